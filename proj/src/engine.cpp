#include "mcsagan/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "mcsagan/autograd.hpp"
#include "mcsagan/checkpoint.hpp"
#include "mcsagan/metrics.hpp"

namespace mcsagan {

namespace {

// Reads optional keys from a JSON object and rejects anything it did not consume.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw std::invalid_argument(where_ + ": expected a JSON object");
  }
  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw std::invalid_argument(where_ + ": unknown key '" + key + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }
  const Json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

std::vector<AttentionKind> kinds_from(const std::vector<std::string>& names) {
  std::vector<AttentionKind> out;
  for (const auto& n : names) out.push_back(parse_attention_kind(n));
  return out;
}

std::vector<std::string> kind_names(const std::vector<AttentionKind>& kinds) {
  std::vector<std::string> out;
  for (auto k : kinds) out.emplace_back(to_string(k));
  return out;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void set_rng_state(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw DataError("corrupt RNG state in checkpoint");
}

Tensor<float> as_batch(const Tensor<float>& v) {
  return reshape(v, Shape{1, 1, v.dim(0), v.dim(1), v.dim(2)});
}

// Temporarily stops gradient accumulation into a set of (unfrozen) parameters.
class GradPause {
 public:
  explicit GradPause(const std::vector<Tensor<float>>& params) : params_(params) {
    for (auto& p : params_) p.set_requires_grad(false);
  }
  ~GradPause() {
    for (auto& p : params_) p.set_requires_grad(true);
  }
  GradPause(const GradPause&) = delete;
  GradPause& operator=(const GradPause&) = delete;

 private:
  std::vector<Tensor<float>> params_;
};

// Op-level finite checks fire before a LossReport exists; this re-labels
// them with the stage or loss term being computed.
template <typename F>
auto labelled(const std::string& what, Index step, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(what + " is non-finite at step " + std::to_string(step) + " (" + e.what() + ")");
  }
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

// ------------------------------------------------------------------ config

void SegPretrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("segmenter epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("segmenter batch size must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("segmenter lr must be > 0");
  segmenter.validate();
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
    throw std::invalid_argument("Adam betas must lie in [0,1)");
  if (!(lr_factor > 0 && lr_factor <= 1)) throw std::invalid_argument("lr_factor must lie in (0,1]");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] < 1 || lr_milestones[i] >= epochs)
      throw std::invalid_argument("lr milestones must lie in [1, epochs)");
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1])
      throw std::invalid_argument("lr milestones must be strictly increasing");
  }
  if (n_critic < 1) throw std::invalid_argument("n_critic must be >= 1");
  if (steps_per_epoch < 0 || max_steps < 0 || val_every < 0)
    throw std::invalid_argument("step counts must be >= 0");
  weights.validate();
  effective_generator().validate();
  critic.validate();
  seg.validate();
}

GeneratorConfig TrainConfig::effective_generator() const {
  GeneratorConfig g = generator;
  g.use_mbha = use_mbha;
  return g;
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  Fields f(j, "config");
  f.get("epochs", c.epochs);
  f.get("batch_size", c.batch_size);
  f.get("lr", c.lr);
  f.get("beta1", c.beta1);
  f.get("beta2", c.beta2);
  f.get("lr_milestones", c.lr_milestones);
  f.get("lr_factor", c.lr_factor);
  f.get("n_critic", c.n_critic);
  f.get("seed", c.seed);
  f.get("steps_per_epoch", c.steps_per_epoch);
  f.get("max_steps", c.max_steps);
  f.get("val_every", c.val_every);
  f.get("use_mbha", c.use_mbha);
  f.get("use_perc", c.use_perc);
  f.get("use_seg", c.use_seg);
  if (const Json* w = f.sub("weights")) {
    Fields g(*w, "config.weights");
    g.get("rec", c.weights.rec);
    g.get("msssim", c.weights.msssim);
    g.get("perc", c.weights.perc);
    g.get("seg", c.weights.seg);
    g.get("cls", c.weights.cls);
    g.get("gp", c.weights.gp);
    g.get("alpha_mask", c.weights.alpha_mask);
  }
  if (const Json* gj = f.sub("generator")) {
    Fields g(*gj, "config.generator");
    GeneratorConfig& gc = c.generator;
    g.get("widths", gc.widths);
    std::vector<std::string> enc = kind_names(gc.encoder_attention),
                             dec = kind_names(gc.decoder_attention);
    std::string bott = to_string(gc.bottleneck_attention);
    g.get("encoder_attention", enc);
    g.get("decoder_attention", dec);
    g.get("bottleneck_attention", bott);
    gc.encoder_attention = kinds_from(enc);
    gc.decoder_attention = kinds_from(dec);
    gc.bottleneck_attention = parse_attention_kind(bott);
    g.get("full_attention_cap", gc.full_attention_cap);
    g.get("head_width", gc.head_width);
    g.get("sn_iterations", gc.sn_iterations);
    if (const Json* bj = g.sub("budget")) {
      Fields b(*bj, "config.generator.budget");
      b.get("t_q", gc.budget.t_q);
      b.get("t_kv", gc.budget.t_kv);
      b.get("t_attn", gc.budget.t_attn);
      b.get("kappa", gc.budget.kappa);
      b.get("alpha", gc.budget.alpha);
      b.get("beta", gc.budget.beta);
      b.get("reduction", gc.budget.reduction);
    }
  }
  if (const Json* cj = f.sub("critic")) {
    Fields g(*cj, "config.critic");
    g.get("base_width", c.critic.base_width);
    g.get("depth", c.critic.depth);
    g.get("max_width", c.critic.max_width);
    g.get("sn_iterations", c.critic.sn_iterations);
  }
  if (const Json* fj = f.sub("features")) {
    Fields g(*fj, "config.features");
    g.get("widths", c.features.widths);
    g.get("seed", c.features.seed);
  }
  if (const Json* sj = f.sub("segmenter")) {
    Fields g(*sj, "config.segmenter");
    g.get("epochs", c.seg.epochs);
    g.get("batch_size", c.seg.batch_size);
    g.get("lr", c.seg.lr);
    g.get("beta1", c.seg.beta1);
    g.get("beta2", c.seg.beta2);
    g.get("base_width", c.seg.segmenter.base_width);
    g.get("seed", c.seg.seed);
  }
  c.validate();
  return c;
}

Json to_json(const TrainConfig& c) {
  const GeneratorConfig& g = c.generator;
  return Json{
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"lr_milestones", c.lr_milestones},
      {"lr_factor", c.lr_factor},
      {"n_critic", c.n_critic},
      {"seed", c.seed},
      {"steps_per_epoch", c.steps_per_epoch},
      {"max_steps", c.max_steps},
      {"val_every", c.val_every},
      {"use_mbha", c.use_mbha},
      {"use_perc", c.use_perc},
      {"use_seg", c.use_seg},
      {"weights",
       {{"rec", c.weights.rec},
        {"msssim", c.weights.msssim},
        {"perc", c.weights.perc},
        {"seg", c.weights.seg},
        {"cls", c.weights.cls},
        {"gp", c.weights.gp},
        {"alpha_mask", c.weights.alpha_mask}}},
      {"generator",
       {{"widths", g.widths},
        {"encoder_attention", kind_names(g.encoder_attention)},
        {"bottleneck_attention", to_string(g.bottleneck_attention)},
        {"decoder_attention", kind_names(g.decoder_attention)},
        {"full_attention_cap", g.full_attention_cap},
        {"head_width", g.head_width},
        {"sn_iterations", g.sn_iterations},
        {"budget",
         {{"t_q", g.budget.t_q},
          {"t_kv", g.budget.t_kv},
          {"t_attn", g.budget.t_attn},
          {"kappa", g.budget.kappa},
          {"alpha", g.budget.alpha},
          {"beta", g.budget.beta},
          {"reduction", g.budget.reduction}}}}},
      {"critic",
       {{"base_width", c.critic.base_width},
        {"depth", c.critic.depth},
        {"max_width", c.critic.max_width},
        {"sn_iterations", c.critic.sn_iterations}}},
      {"features", {{"widths", c.features.widths}, {"seed", c.features.seed}}},
      {"segmenter",
       {{"epochs", c.seg.epochs},
        {"batch_size", c.seg.batch_size},
        {"lr", c.seg.lr},
        {"beta1", c.seg.beta1},
        {"beta2", c.seg.beta2},
        {"base_width", c.seg.segmenter.base_width},
        {"seed", c.seg.seed}}},
  };
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config " + path);
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return train_config_from_json(j);
}

std::uint64_t config_hash(const TrainConfig& c) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

PhantomSpec phantom_spec_from_json(const Json& j) {
  PhantomSpec s;
  Fields f(j, "phantom spec");
  f.get("dims", s.dims);
  f.get("blob_count", s.blob_count);
  std::array<double, 2> r{};
  auto range = [&](const char* key, Range& out) {
    r = {out.lo, out.hi};
    f.get(key, r);
    out = {r[0], r[1]};
  };
  range("blob_radius", s.blob_radius);
  range("tumour_radius", s.tumour_radius);
  range("tumour_fraction", s.tumour_fraction);
  f.get("noise_sigma", s.noise_sigma);
  f.get("seed", s.seed);
  s.validate();
  return s;
}

Json to_json(const PhantomSpec& s) {
  return Json{{"dims", s.dims},
              {"blob_count", s.blob_count},
              {"blob_radius", {s.blob_radius.lo, s.blob_radius.hi}},
              {"tumour_radius", {s.tumour_radius.lo, s.tumour_radius.hi}},
              {"tumour_fraction", {s.tumour_fraction.lo, s.tumour_fraction.hi}},
              {"noise_sigma", s.noise_sigma},
              {"seed", s.seed}};
}

double lr_at_epoch(const TrainConfig& c, int epochs_completed) {
  int passed = 0;
  for (int m : c.lr_milestones)
    if (epochs_completed >= m) ++passed;
  return c.lr * std::pow(c.lr_factor, passed);
}

// ---------------------------------------------------------------- batching

Contrast sample_contrast(std::mt19937_64& rng) {
  return static_cast<Contrast>(std::uniform_int_distribution<int>(0, kNumContrasts - 1)(rng));
}

BatchStream::BatchStream(std::size_t population, Index batch, std::uint64_t seed)
    : population_(population), batch_(batch), rng_(seed) {
  if (batch < 1) throw std::invalid_argument("batch size must be >= 1");
  if (population < static_cast<std::size_t>(batch))
    throw std::invalid_argument("dataset has " + std::to_string(population) +
                                " samples, fewer than one batch of " + std::to_string(batch));
  reshuffle();
}

void BatchStream::reshuffle() {
  order_.resize(population_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  pos_ = 0;
}

std::vector<std::size_t> BatchStream::next() {
  if (pos_ + static_cast<std::size_t>(batch_) > population_) reshuffle();
  std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                               order_.begin() + static_cast<std::ptrdiff_t>(pos_) + batch_);
  pos_ += static_cast<std::size_t>(batch_);
  return out;
}

Json BatchStream::state() const {
  return Json{{"rng", rng_state(rng_)}, {"order", order_}, {"pos", pos_}};
}

void BatchStream::restore(const Json& s) {
  set_rng_state(rng_, s.at("rng").get<std::string>());
  order_ = s.at("order").get<std::vector<std::size_t>>();
  pos_ = s.at("pos").get<std::size_t>();
  if (order_.size() != population_ || pos_ > population_)
    throw DataError("checkpoint batch stream does not match the dataset size");
}

Batch make_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& idx,
                 const std::vector<Contrast>& contrasts) {
  if (idx.size() != contrasts.size()) throw std::invalid_argument("one contrast per sample required");
  std::vector<Tensor<float>> src, tgt, msk;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Sample& s = data.at(idx[k]);
    src.push_back(s.source);
    tgt.push_back(s.target(contrasts[k]));
    msk.push_back(s.mask);
  }
  return Batch{stack_volumes(src), stack_volumes(tgt), stack_volumes(msk),
               domain_codes<float>(contrasts), contrasts};
}

// -------------------------------------------------------------- segmenter

namespace {

using SegInput = std::function<std::pair<Tensor<float>, Tensor<float>>(
    const std::vector<std::size_t>&, std::mt19937_64&)>;

std::vector<PretrainEpoch> train_segmenter_loop(Segmenter<float>& seg, std::size_t n,
                                                const SegPretrainConfig& cfg, const SegInput& input,
                                                const std::function<double()>& val,
                                                const std::function<void(const PretrainEpoch&)>& on_epoch) {
  cfg.validate();
  if (n == 0) throw std::invalid_argument("segmenter training needs a nonempty dataset");
  if (seg.frozen()) throw AutogradError("cannot train a frozen segmenter");
  std::mt19937_64 rng(cfg.seed);
  ParamRegistry<float> reg;
  seg.collect(reg);
  Adam<float> opt(reg.param_tensors(), AdamConfig{cfg.lr, cfg.beta1, cfg.beta2});
  std::vector<std::size_t> order(n);
  std::vector<PretrainEpoch> history;
  for (int e = 1; e <= cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double acc = 0;
    int steps = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::vector<std::size_t> idx(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + static_cast<std::size_t>(cfg.batch_size))));
      auto [x, m] = input(idx, rng);
      opt.zero_grad();
      const Tensor<float> loss = segmenter_pretrain_loss(seg.forward(x), m);
      const double v = loss.item();
      if (!std::isfinite(v))
        throw NumericError("segmenter loss became non-finite in epoch " + std::to_string(e));
      backward(loss);
      opt.step();
      acc += v;
      ++steps;
    }
    PretrainEpoch pe{e, acc / steps, val ? val() : 0.0};
    history.push_back(pe);
    if (on_epoch) on_epoch(pe);
  }
  return history;
}

double mean_dice(const std::vector<Sample>& data, const std::function<Tensor<float>(const Sample&, int)>& logits,
                 int variants) {
  NoGradGuard ng;
  PowerIterationFreeze pf;
  std::vector<double> d;
  for (const Sample& s : data)
    for (int v = 0; v < variants; ++v) d.push_back(dice(binarize(logits(s, v), true), as_batch(s.mask)));
  return mean_of(d);
}

}  // namespace

std::vector<PretrainEpoch> pretrain_segmenter(Segmenter<float>& seg, const std::vector<Sample>& train,
                                              const std::vector<Sample>& val, const SegPretrainConfig& cfg,
                                              const std::function<void(const PretrainEpoch&)>& on_epoch) {
  if (seg.config().in_channels != 1 + kNumContrasts)
    throw std::invalid_argument("the conditional segmenter takes a volume plus a 3-way code");
  SegInput input = [&](const std::vector<std::size_t>& idx, std::mt19937_64& rng) {
    std::vector<Contrast> cs;
    for (std::size_t k = 0; k < idx.size(); ++k) cs.push_back(sample_contrast(rng));
    const Batch b = make_batch(train, idx, cs);
    return std::make_pair(with_codes(b.target, b.codes), b.mask);
  };
  std::function<double()> v;
  if (!val.empty()) v = [&] { return conditional_dice(seg, val); };
  auto history = train_segmenter_loop(seg, train.size(), cfg, input, v, on_epoch);
  seg.freeze();
  return history;
}

double conditional_dice(const Segmenter<float>& seg, const std::vector<Sample>& data) {
  if (data.empty()) throw std::invalid_argument("dice over an empty dataset");
  return mean_dice(
      data,
      [&](const Sample& s, int c) {
        const Contrast con = static_cast<Contrast>(c);
        return seg.forward(as_batch(s.target(con)), domain_codes<float>({con}));
      },
      kNumContrasts);
}

Tensor<float> four_channel(const Tensor<float>& t2w, const std::array<Tensor<float>, kNumContrasts>& c) {
  auto lift = [](const Tensor<float>& v) { return v.ndim() == 3 ? as_batch(v) : v; };
  return concat<float>({lift(t2w), lift(c[0]), lift(c[1]), lift(c[2])}, 1);
}

std::vector<PretrainEpoch> train_downstream_segmenter(
    Segmenter<float>& seg, const std::vector<Sample>& train, const std::vector<Sample>& val,
    const SegPretrainConfig& cfg, const std::function<void(const PretrainEpoch&)>& on_epoch) {
  if (seg.config().in_channels != 1 + kNumContrasts)
    throw std::invalid_argument("the downstream segmenter takes four channels");
  SegInput input = [&](const std::vector<std::size_t>& idx, std::mt19937_64&) {
    std::vector<Tensor<float>> xs, ms;
    for (std::size_t i : idx) {
      xs.push_back(four_channel(train[i].source, train[i].targets));
      ms.push_back(as_batch(train[i].mask));
    }
    return std::make_pair(concat<float>(xs, 0), concat<float>(ms, 0));
  };
  std::function<double()> v;
  if (!val.empty())
    v = [&] { return downstream_dice(seg, val, [](const Sample& s, Contrast c) { return s.target(c); }); };
  auto history = train_segmenter_loop(seg, train.size(), cfg, input, v, on_epoch);
  seg.freeze();
  return history;
}

double downstream_dice(const Segmenter<float>& seg4, const std::vector<Sample>& data, const Synthesizer& synth) {
  if (data.empty()) throw std::invalid_argument("dice over an empty dataset");
  return mean_dice(
      data,
      [&](const Sample& s, int) {
        std::array<Tensor<float>, kNumContrasts> c;
        for (int k = 0; k < kNumContrasts; ++k)
          c[static_cast<std::size_t>(k)] = synth(s, static_cast<Contrast>(k));
        return seg4.forward(four_channel(s.source, c));
      },
      1);
}

void save_segmenter(const std::string& path, Segmenter<float>& seg) {
  ParamRegistry<float> reg;
  seg.collect(reg);
  const Json header{{"kind", "segmenter"},
                    {"in_channels", seg.config().in_channels},
                    {"base_width", seg.config().base_width}};
  write_archive(path, header.dump(), snapshot(reg));
}

std::unique_ptr<Segmenter<float>> load_segmenter(const std::string& path) {
  Archive a;
  Json h;
  try {
    a = read_archive(path);
    h = Json::parse(a.header);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
  if (h.value("kind", "") != "segmenter") throw DataError(path + " is not a segmenter checkpoint");
  SegmenterConfig cfg{h.at("in_channels").get<Index>(), h.at("base_width").get<Index>()};
  std::mt19937_64 rng(0);
  auto seg = std::make_unique<Segmenter<float>>(cfg, rng);
  ParamRegistry<float> reg;
  seg->collect(reg);
  restore(reg, a);
  seg->freeze();
  return seg;
}

// ------------------------------------------------------------------- GAN

Json StepLog::to_json() const {
  auto rep = [](const LossReport& r) {
    Json j = Json::object();
    for (const auto& t : r.terms) j[t.name] = t.value;
    j["total"] = r.total;
    return j;
  };
  Json critic_json = Json::array();
  for (const auto& r : critic) critic_json.push_back(rep(r));
  Json j{{"step", step},           {"epoch", epoch},
         {"lr", lr},               {"critic_updates", critic.size()},
         {"critic", critic_json},  {"generator", rep(generator)},
         {"wasserstein", wasserstein}};
  if (val_masked_l1) j["val_masked_l1"] = *val_masked_l1;
  return j;
}

void check_report(const LossReport& r, const std::string& where, Index step) {
  for (const auto& t : r.terms)
    if (!std::isfinite(t.value))
      throw NumericError(where + " loss term '" + t.name + "' is non-finite at step " + std::to_string(step));
  if (!std::isfinite(r.total))
    throw NumericError(where + " total loss is non-finite at step " + std::to_string(step));
}

GanTrainer::GanTrainer(TrainConfig config, std::vector<Sample> train, std::vector<Sample> val,
                       std::shared_ptr<const Segmenter<float>> segmenter)
    : config_(std::move(config)),
      train_(std::move(train)),
      val_(std::move(val)),
      seg_(std::move(segmenter)),
      rng_(config_.seed),
      stream_(train_.size(), config_.batch_size, config_.seed ^ 0x5bd1e995u) {
  config_.validate();
  if (config_.use_seg) {
    if (!seg_) throw std::invalid_argument("use_seg requires a pretrained segmenter");
    if (!seg_->frozen()) throw AutogradError("the consistency segmenter must be frozen");
  }
  gen_ = std::make_unique<Generator<float>>(config_.effective_generator(), rng_);
  critic_ = std::make_unique<Critic<float>>(config_.critic, rng_);
  if (config_.use_perc) extractor_ = std::make_unique<FeatureExtractor<float>>(config_.features);
  gen_->collect(gen_reg_);
  critic_->collect(critic_reg_);
  const AdamConfig adam{config_.lr, config_.beta1, config_.beta2};
  gen_opt_ = std::make_unique<Adam<float>>(gen_reg_.param_tensors(), adam);
  critic_opt_ = std::make_unique<Adam<float>>(critic_reg_.param_tensors(), adam);

  const Dims3 d{train_[0].source.dim(0), train_[0].source.dim(1), train_[0].source.dim(2)};
  for (Index x : d)
    if (x % gen_->stride_multiple() != 0)
      throw ShapeError("volume dims must be divisible by " + std::to_string(gen_->stride_multiple()));
  steps_per_epoch_ = config_.steps_per_epoch > 0
                         ? config_.steps_per_epoch
                         : std::max<Index>(1, static_cast<Index>(train_.size()) / config_.batch_size);
}

double GanTrainer::lr() const { return lr_at_epoch(config_, epoch_); }

bool GanTrainer::finished() const {
  return (config_.max_steps > 0 && step_ >= config_.max_steps) || epoch_ >= config_.epochs;
}

void GanTrainer::apply_schedule() {
  gen_opt_->set_lr(lr());
  critic_opt_->set_lr(lr());
}

Batch GanTrainer::draw_batch() {
  const std::vector<std::size_t> idx = stream_.next();
  std::vector<Contrast> cs;
  for (std::size_t k = 0; k < idx.size(); ++k) cs.push_back(sample_contrast(rng_));
  return make_batch(train_, idx, cs);
}

LossReport GanTrainer::critic_update(double* wasserstein) {
  const Index at = step_ + 1;
  const Batch b = draw_batch();
  const Tensor<float> fake = labelled("critic update: generator forward", at, [&] {
    NoGradGuard ng;
    PowerIterationFreeze pf;
    return gen_->forward(b.source, b.codes);
  });
  critic_opt_->zero_grad();
  const auto [real_out, fake_out] = labelled("critic forward", at, [&] {
    return std::make_pair(critic_->forward(b.target, b.source), critic_->forward(fake, b.source));
  });
  const Tensor<float> score_real = Critic<float>::score(real_out.realism);
  const Tensor<float> score_fake = Critic<float>::score(fake_out.realism);
  const Tensor<float> wgan =
      labelled("critic loss term 'wgan'", at, [&] { return critic_wgan_loss(score_fake, score_real); });
  const Scorer<float> scorer = [this](const Tensor<float>& y, const Tensor<float>& x) {
    return critic_->forward(y, x).realism;
  };
  const Tensor<float> gp = labelled("critic loss term 'gp'", at,
                                    [&] { return gradient_penalty(scorer, b.target, fake, b.source, rng_); });
  const Tensor<float> cls =
      labelled("critic loss term 'cls'", at, [&] { return classification_loss(real_out.logits, b.codes); });
  LossReport report;
  const Tensor<float> total = critic_total(wgan, gp, cls, config_.weights, &report);
  check_report(report, "critic", at);
  labelled("critic backward", at, [&] { backward(total); });
  critic_opt_->step();
  ++critic_updates_;
  *wasserstein = static_cast<double>(mean(score_real).item()) - static_cast<double>(mean(score_fake).item());
  return report;
}

LossReport GanTrainer::generator_update() {
  const Index at = step_ + 1;
  const Batch b = draw_batch();
  gen_opt_->zero_grad();
  // The critic only scores here; its weights neither advance nor collect gradients.
  GradPause pause(critic_reg_.param_tensors());
  const Tensor<float> fake = labelled("generator forward", at, [&] { return gen_->forward(b.source, b.codes); });
  const CriticOutput<float> out = labelled("generator update: critic forward", at, [&] {
    PowerIterationFreeze pf;
    return critic_->forward(fake, b.source);
  });
  auto term = [&](const char* name, auto&& f) {
    return labelled(std::string("generator loss term '") + name + "'", at, f);
  };
  LossWeights w = config_.weights;
  const Tensor<float> zero = Tensor<float>::scalar(0);
  GeneratorParts<float> parts;
  parts.adv = term("adv", [&] { return adversarial_loss(Critic<float>::score(out.realism)); });
  parts.cls = term("cls", [&] { return classification_loss(out.logits, b.codes); });
  parts.rec = term("rec", [&] { return reconstruction_loss(fake, b.target, b.mask, w.alpha_mask); });
  parts.msssim = term("msssim", [&] { return msssim_loss(fake, b.target); });
  if (config_.use_seg) {
    parts.seg = term("seg", [&] { return seg_consistency_loss(fake, b.codes, b.mask, *seg_); });
  } else {
    parts.seg = zero;
    w.seg = 0;
  }
  if (config_.use_perc) {
    parts.perc = term("perc", [&] { return perceptual_loss(fake, b.target, *extractor_); });
  } else {
    parts.perc = zero;
    w.perc = 0;
  }
  const GeneratorLoss<float> loss = generator_total(parts, w);
  check_report(loss.report, "generator", at);
  labelled("generator backward", at, [&] { backward(loss.total); });
  gen_opt_->step();
  return loss.report;
}

StepLog GanTrainer::step() {
  if (finished()) throw std::logic_error("training already finished");
  apply_schedule();
  StepLog log;
  log.epoch = epoch_;
  log.lr = lr();
  for (int k = 0; k < config_.n_critic; ++k) log.critic.push_back(critic_update(&log.wasserstein));
  log.generator = generator_update();
  ++step_;
  if (step_ % steps_per_epoch_ == 0) ++epoch_;
  log.step = step_;
  if (config_.val_every > 0 && step_ % config_.val_every == 0 && !val_.empty())
    log.val_masked_l1 = validation_masked_l1();
  return log;
}

void GanTrainer::run(const std::function<void(const StepLog&)>& on_step, const std::string& checkpoint_dir) {
  while (!finished()) {
    const int before = epoch_;
    const StepLog log = step();
    if (on_step) on_step(log);
    if (!checkpoint_dir.empty() && epoch_ != before) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch_);
      save_checkpoint(checkpoint_dir + "/" + name);
      save_checkpoint(checkpoint_dir + "/last.ckpt");
    }
  }
}

double GanTrainer::validation_masked_l1() const {
  if (val_.empty()) throw std::invalid_argument("no validation samples");
  NoGradGuard ng;
  PowerIterationFreeze pf;
  std::vector<double> v;
  for (std::size_t i = 0; i < val_.size(); ++i) {
    const Batch b = make_batch(val_, {i}, {static_cast<Contrast>(i % kNumContrasts)});
    v.push_back(reconstruction_loss(gen_->forward(b.source, b.codes), b.target, b.mask,
                                    config_.weights.alpha_mask)
                    .item());
  }
  return mean_of(v);
}

namespace {

void add_moments(std::vector<NamedTensor<float>>& out, const std::string& prefix, const AdamState<float>& s) {
  for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
    out.push_back({prefix + ".m." + std::to_string(i), s.first_moment[i]});
    out.push_back({prefix + ".v." + std::to_string(i), s.second_moment[i]});
  }
}

void load_moments(const Archive& a, const std::string& prefix, AdamState<float>& s) {
  for (std::size_t i = 0; i < s.first_moment.size(); ++i)
    for (auto [tag, dst] : {std::pair{".m.", &s.first_moment[i]}, std::pair{".v.", &s.second_moment[i]}}) {
      const Tensor<float>* src = a.find(prefix + tag + std::to_string(i));
      if (!src || src->shape() != dst->shape()) throw DataError("checkpoint optimizer state is incomplete");
      std::copy(src->data().begin(), src->data().end(), dst->data().begin());
    }
}

Json read_header(const Archive& a, const std::string& path) {
  try {
    return Json::parse(a.header);
  } catch (const Json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  }
}

Archive read_checkpoint(const std::string& path) {
  try {
    return read_archive(path);
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
}

}  // namespace

void GanTrainer::save_checkpoint(const std::string& path) const {
  const Json header{{"kind", "gan"},
                    {"config", to_json(config_)},
                    {"config_hash", config_hash(config_)},
                    {"step", step_},
                    {"epoch", epoch_},
                    {"critic_updates", critic_updates_},
                    {"rng", rng_state(rng_)},
                    {"stream", stream_.state()},
                    {"gen_adam_step", gen_opt_->state().step},
                    {"critic_adam_step", critic_opt_->state().step}};
  std::vector<NamedTensor<float>> entries = snapshot(gen_reg_);
  for (auto& e : snapshot(critic_reg_)) entries.push_back(std::move(e));
  add_moments(entries, "opt.gen", gen_opt_->state());
  add_moments(entries, "opt.critic", critic_opt_->state());
  write_archive(path, header.dump(), entries);
}

void GanTrainer::load_checkpoint(const std::string& path) {
  const Archive a = read_checkpoint(path);
  const Json h = read_header(a, path);
  if (h.value("kind", "") != "gan") throw DataError(path + " is not a GAN checkpoint");
  if (h.at("config_hash").get<std::uint64_t>() != config_hash(config_))
    throw DataError(path + " was written with a different configuration");
  try {
    restore(gen_reg_, a);
    restore(critic_reg_, a);
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
  load_moments(a, "opt.gen", gen_opt_->state());
  load_moments(a, "opt.critic", critic_opt_->state());
  gen_opt_->state().step = h.at("gen_adam_step").get<std::int64_t>();
  critic_opt_->state().step = h.at("critic_adam_step").get<std::int64_t>();
  step_ = h.at("step").get<Index>();
  epoch_ = h.at("epoch").get<int>();
  critic_updates_ = h.at("critic_updates").get<Index>();
  set_rng_state(rng_, h.at("rng").get<std::string>());
  stream_.restore(h.at("stream"));
}

// -------------------------------------------------------- inference & eval

GeneratorBundle load_generator(const std::string& checkpoint) {
  const Archive a = read_checkpoint(checkpoint);
  const Json h = read_header(a, checkpoint);
  if (h.value("kind", "") != "gan") throw DataError(checkpoint + " is not a GAN checkpoint");
  GeneratorBundle b;
  try {
    b.config = train_config_from_json(h.at("config"));
  } catch (const std::invalid_argument& e) {
    throw DataError(checkpoint + ": " + e.what());
  }
  std::mt19937_64 rng(b.config.seed);
  b.generator = std::make_unique<Generator<float>>(b.config.effective_generator(), rng);
  ParamRegistry<float> reg;
  b.generator->collect(reg);
  try {
    restore(reg, a);
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
  return b;
}

Tensor<float> synthesize(const Generator<float>& gen, const Tensor<float>& source, Contrast c) {
  if (source.ndim() != 3) throw ShapeError("synthesize expects a [D,H,W] volume");
  const Index m = gen.stride_multiple();
  for (int a = 0; a < 3; ++a)
    if (source.dim(a) % m != 0)
      throw ShapeError("input dims " + to_string(source.shape()) + " are not divisible by " +
                       std::to_string(m) + " (the generator's total stride)");
  NoGradGuard ng;
  PowerIterationFreeze pf;
  const Tensor<float> y = gen.forward(as_batch(source), domain_codes<float>({c}));
  return reshape(y, source.shape()).clone();
}

Synthesizer generator_synthesizer(const Generator<float>& gen) {
  return [&gen](const Sample& s, Contrast c) { return synthesize(gen, s.source, c); };
}

Json evaluate(const std::vector<Sample>& data, const Synthesizer& synth, const EvalOptions& opt) {
  if (data.empty()) throw std::invalid_argument("cannot evaluate an empty dataset");
  std::unique_ptr<FeatureExtractor<float>> own;
  const FeatureExtractor<float>* fx = opt.extractor;
  if (!fx) {
    own = std::make_unique<FeatureExtractor<float>>();
    fx = own.get();
  }
  NoGradGuard ng;
  PowerIterationFreeze pf;
  auto summary = [](const std::vector<double>& v) {
    if (std::any_of(v.begin(), v.end(), [](double x) { return std::isinf(x); }))
      return Json{{"mean", "inf"}, {"std", nullptr}};
    return Json{{"mean", mean_of(v)}, {"std", std_of(v)}};
  };
  Json report{{"subjects", data.size()}, {"contrasts", Json::object()}};
  std::vector<Synthesizer> none;
  for (int ci = 0; ci < kNumContrasts; ++ci) {
    const Contrast c = static_cast<Contrast>(ci);
    std::vector<double> ps, ss, ms, es;
    Eigen::MatrixXd fp(static_cast<Index>(data.size()), 0), ft;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Tensor<float> pred = as_batch(synth(data[i], c));
      const Tensor<float> tgt = as_batch(data[i].target(c));
      ps.push_back(psnr(pred, tgt));
      ss.push_back(ssim(pred, tgt));
      ms.push_back(msssim(pred, tgt));
      es.push_back(mse(pred, tgt));
      const Tensor<float> a = fx->pooled(pred), b = fx->pooled(tgt);
      if (fp.cols() == 0) {
        fp.resize(static_cast<Index>(data.size()), a.numel());
        ft.resize(static_cast<Index>(data.size()), a.numel());
      }
      for (Index k = 0; k < a.numel(); ++k) {
        fp(static_cast<Index>(i), k) = a.raw()[k];
        ft(static_cast<Index>(i), k) = b.raw()[k];
      }
    }
    Json entry{{"psnr", summary(ps)}, {"ssim", summary(ss)}, {"msssim", summary(ms)}, {"mse", summary(es)}};
    entry["mfd"] = data.size() >= 2
                       ? Json(mfd(FeatureStats::from_samples(fp), FeatureStats::from_samples(ft)))
                       : Json(nullptr);
    report["contrasts"][contrast_name(c)] = entry;
  }
  if (opt.downstream) {
    report["dice"] = {
        {"generated", downstream_dice(*opt.downstream, data, synth)},
        {"real", downstream_dice(*opt.downstream, data, [](const Sample& s, Contrast c) { return s.target(c); })}};
  } else {
    report["dice"] = nullptr;
  }
  return report;
}

// -------------------------------------------------------------- planning

std::vector<Dims3> parse_dims_list(const std::string& text) {
  std::vector<Dims3> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    Dims3 d{};
    std::size_t pos = 0;
    for (int a = 0; a < 3; ++a) {
      if (a > 0) {
        if (pos >= item.size() || (item[pos] != 'x' && item[pos] != 'X'))
          throw std::invalid_argument("malformed dims '" + item + "', expected DxHxW");
        ++pos;
      }
      std::size_t used = 0;
      long long v = 0;
      try {
        if (pos >= item.size() || !std::isdigit(static_cast<unsigned char>(item[pos]))) throw std::invalid_argument("");
        v = std::stoll(item.substr(pos), &used);
      } catch (const std::exception&) {
        throw std::invalid_argument("malformed dims '" + item + "', expected DxHxW");
      }
      if (v < 1) throw std::invalid_argument("dims must be positive in '" + item + "'");
      d[static_cast<std::size_t>(a)] = static_cast<Index>(v);
      pos += used;
    }
    if (pos != item.size()) throw std::invalid_argument("malformed dims '" + item + "', expected DxHxW");
    out.push_back(d);
  }
  if (text.back() == ',') throw std::invalid_argument("trailing comma in dims list");
  return out;
}

std::string plan_table(const std::vector<Dims3>& dims, const AttentionBudget& budget) {
  budget.validate();
  auto d3 = [](const Dims3& d) {
    return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
  };
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %10s %-16s %5s %5s %-12s %-12s %8s %8s %12s\n", "dims", "n_full", "mode",
                "s_q", "s_kv", "q_dims", "kv_dims", "n_q", "m_k", "affinity");
  out += line;
  for (const Dims3& d : dims) {
    const AttentionPlan p = plan_attention(d, budget);
    std::snprintf(line, sizeof line, "%-14s %10lld %-16s %5lld %5lld %-12s %-12s %8lld %8lld %12lld\n", d3(d).c_str(),
                  static_cast<long long>(p.n_full), to_string(p.mode), static_cast<long long>(p.s_q),
                  static_cast<long long>(p.s_kv), d3(p.q_dims).c_str(), d3(p.kv_dims).c_str(),
                  static_cast<long long>(p.n_q), static_cast<long long>(p.m_k),
                  static_cast<long long>(p.n_q * p.m_k));
    out += line;
  }
  return out;
}

}  // namespace mcsagan
