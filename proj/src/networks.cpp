#include "mcsagan/networks.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

#include "mcsagan/checkpoint.hpp"

namespace mcsagan {

namespace {

template <typename S>
Tensor<S> lrelu(const Tensor<S>& x) {
  return leaky_relu(x, static_cast<S>(kLeakySlope));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

template <typename S>
void require_volume(const Tensor<S>& x, Index channels, const char* who) {
  if (x.ndim() != 5 || x.dim(1) != channels)
    throw ShapeError(std::string(who) + " expects [B," + std::to_string(channels) +
                     ",D,H,W], got " + to_string(x.shape()));
}

template <typename S>
void require_multiple(const Tensor<S>& x, Index multiple, const char* who) {
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) % multiple != 0)
      throw ShapeError(std::string(who) + ": spatial dims " + to_string(x.shape()) +
                       " must be divisible by " + std::to_string(multiple));
}

}  // namespace

// ------------------------------------------------------------ domain codes

const char* contrast_name(Contrast c) {
  switch (c) {
    case Contrast::kT2f: return "t2f";
    case Contrast::kT1c: return "t1c";
    case Contrast::kT1n: return "t1n";
  }
  return "?";
}

Contrast parse_contrast(const std::string& name) {
  const std::string n = lower(name);
  if (n == "t2f") return Contrast::kT2f;
  if (n == "t1c") return Contrast::kT1c;
  if (n == "t1n") return Contrast::kT1n;
  throw std::invalid_argument("unknown contrast '" + name + "' (expected t2f, t1c or t1n)");
}

template <typename S>
Tensor<S> domain_codes(const std::vector<Contrast>& contrasts) {
  Tensor<S> codes = Tensor<S>::zeros({static_cast<Index>(contrasts.size()), kNumContrasts});
  for (std::size_t i = 0; i < contrasts.size(); ++i)
    codes.raw()[i * kNumContrasts + static_cast<std::size_t>(contrasts[i])] = S(1);
  return codes;
}

template <typename S>
void validate_codes(const Tensor<S>& codes, Index batch) {
  if (codes.shape() != Shape{batch, kNumContrasts})
    throw std::invalid_argument("domain codes must have shape [" + std::to_string(batch) +
                                ",3], got " + to_string(codes.shape()));
  for (Index b = 0; b < batch; ++b) {
    int ones = 0;
    for (Index k = 0; k < kNumContrasts; ++k) {
      const S v = codes.raw()[b * kNumContrasts + k];
      if (v == S(1))
        ++ones;
      else if (v != S(0))
        ones = -100;
    }
    if (ones != 1) throw std::invalid_argument("domain code row " + std::to_string(b) +
                                               " is not one-hot");
  }
}

template <typename S>
Tensor<S> with_codes(const Tensor<S>& volume, const Tensor<S>& codes) {
  const Index b = volume.dim(0);
  validate_codes(codes, b);
  const Dims3 d = spatial_dims(volume);
  Tensor<S> planes = broadcast_to(reshape(codes, {b, kNumContrasts, 1, 1, 1}),
                                  {b, kNumContrasts, d[0], d[1], d[2]});
  return concat(std::vector<Tensor<S>>{volume, planes}, 1);
}

const char* to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kNone: return "none";
    case AttentionKind::kMBHA: return "mbha";
    case AttentionKind::kFull: return "full";
  }
  return "?";
}

AttentionKind parse_attention_kind(const std::string& name) {
  const std::string n = lower(name);
  if (n == "none") return AttentionKind::kNone;
  if (n == "mbha") return AttentionKind::kMBHA;
  if (n == "full") return AttentionKind::kFull;
  throw std::invalid_argument("unknown attention kind '" + name + "'");
}

// -------------------------------------------------------------- generator

void GeneratorConfig::validate() const {
  if (widths.empty()) throw std::invalid_argument("generator needs at least one stage");
  for (Index w : widths)
    if (w < 1) throw std::invalid_argument("generator widths must be >= 1");
  if (encoder_attention.size() != widths.size())
    throw std::invalid_argument("encoder_attention needs one entry per stage");
  if (decoder_attention.size() + 1 != widths.size())
    throw std::invalid_argument("decoder_attention needs stages - 1 entries");
  const Index deep = widths.back();
  if (deep >= 8 && deep % 8 != 0)
    throw std::invalid_argument("bottleneck width must be a multiple of 8 (group norm)");
  if (head_width < 1) throw std::invalid_argument("head width must be >= 1");
  budget.validate();
}

template <typename S>
Tensor<S> Generator<S>::Attention::forward(const Tensor<S>& x) const {
  if (mbha) return mbha->forward(x);
  if (full) return full->forward(x);
  return x;
}

template <typename S>
void Generator<S>::Attention::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  if (mbha) mbha->collect(reg, prefix + ".mbha");
  if (full) full->collect(reg, prefix + ".attn");
}

template <typename S>
typename Generator<S>::Attention Generator<S>::make_attention(AttentionKind kind, Index channels,
                                                              std::mt19937_64& rng) const {
  Attention a;
  if (kind == AttentionKind::kMBHA && !config_.use_mbha) kind = AttentionKind::kNone;
  a.kind = kind;
  if (kind == AttentionKind::kMBHA)
    a.mbha.emplace(channels, config_.budget, rng, config_.sn_iterations);
  else if (kind == AttentionKind::kFull)
    a.full.emplace(channels, config_.budget.alpha, config_.full_attention_cap, rng,
                   config_.sn_iterations);
  return a;
}

template <typename S>
Generator<S>::Generator(const GeneratorConfig& config, std::mt19937_64& rng) : config_(config) {
  config.validate();
  const auto& w = config.widths;
  const std::size_t n = w.size();
  Index in = 1 + kNumContrasts;
  for (std::size_t i = 0; i < n; ++i) {
    Down d;
    d.conv = Conv3dLayer<S>({in, w[i], 3, 2, 1, false}, rng);
    d.norm = NormLayer<S>(w[i], NormMode::kInstance);
    d.res = ResidualBlock<S>(w[i], w[i], NormMode::kInstance, rng);
    d.att = make_attention(config.encoder_attention[i], w[i], rng);
    down_.push_back(std::move(d));
    in = w[i];
  }
  bottleneck_ = ResidualBlock<S>(w[n - 1], w[n - 1], NormMode::kGroup, rng);
  bottleneck_att_ = make_attention(config.bottleneck_attention, w[n - 1], rng);
  for (std::size_t j = 0; j + 1 < n; ++j) {
    const Index from = w[n - 1 - j], to = w[n - 2 - j];
    Up u;
    u.conv = Conv3dLayer<S>({from, to, 3, 1, 1, false}, rng);
    u.norm = NormLayer<S>(to, NormMode::kInstance);
    u.gate = AttentionGate<S>(to, to, rng);
    u.res = ResidualBlock<S>(2 * to, to, NormMode::kInstance, rng);
    u.att = make_attention(config.decoder_attention[j], to, rng);
    up_.push_back(std::move(u));
  }
  const Index hw = config.head_width;
  final_up_ = Conv3dLayer<S>({w[0], hw, 3, 1, 1, false}, rng);
  final_norm_ = NormLayer<S>(hw, NormMode::kInstance);
  fuse_ = Conv3dLayer<S>({hw + 1 + kNumContrasts, hw, 3, 1, 1, true}, rng);
  head_ = Conv3dLayer<S>({hw, 1, 1, 1, 0, true}, rng);
}

template <typename S>
Index Generator<S>::stride_multiple() const {
  return Index{1} << config_.widths.size();
}

template <typename S>
Tensor<S> Generator<S>::forward(const Tensor<S>& source, const Tensor<S>& codes) const {
  require_volume(source, 1, "generator");
  require_multiple(source, stride_multiple(), "generator");
  const Tensor<S> x_in = with_codes(source, codes);

  std::vector<Tensor<S>> skips;
  Tensor<S> h = x_in;
  for (const Down& d : down_) {
    h = lrelu(d.norm.forward(d.conv.forward(h)));
    h = d.att.forward(d.res.forward(h));
    skips.push_back(h);
  }
  h = bottleneck_att_.forward(bottleneck_.forward(h));
  for (std::size_t j = 0; j < up_.size(); ++j) {
    const Up& u = up_[j];
    const Tensor<S>& skip = skips[skips.size() - 2 - j];
    Tensor<S> g = upsample_trilinear(h, spatial_dims(skip));
    g = lrelu(u.norm.forward(u.conv.forward(g)));
    Tensor<S> gated = u.gate.forward(skip, g);
    h = u.att.forward(u.res.forward(concat(std::vector<Tensor<S>>{gated, g}, 1)));
  }
  h = upsample_trilinear(h, spatial_dims(source));
  h = lrelu(final_norm_.forward(final_up_.forward(h)));
  h = lrelu(fuse_.forward(concat(std::vector<Tensor<S>>{h, x_in}, 1)));
  return tanh(head_.forward(h));
}

template <typename S>
void Generator<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  for (std::size_t i = 0; i < down_.size(); ++i) {
    const std::string p = prefix + ".down" + std::to_string(i);
    down_[i].conv.collect(reg, p + ".conv");
    down_[i].norm.collect(reg, p + ".norm");
    down_[i].res.collect(reg, p + ".res");
    down_[i].att.collect(reg, p);
  }
  bottleneck_.collect(reg, prefix + ".bottleneck.res");
  bottleneck_att_.collect(reg, prefix + ".bottleneck");
  for (std::size_t j = 0; j < up_.size(); ++j) {
    const std::string p = prefix + ".up" + std::to_string(j);
    up_[j].conv.collect(reg, p + ".conv");
    up_[j].norm.collect(reg, p + ".norm");
    up_[j].gate.collect(reg, p + ".gate");
    up_[j].res.collect(reg, p + ".res");
    up_[j].att.collect(reg, p);
  }
  final_up_.collect(reg, prefix + ".final.conv");
  final_norm_.collect(reg, prefix + ".final.norm");
  fuse_.collect(reg, prefix + ".fuse");
  head_.collect(reg, prefix + ".head");
}

// ----------------------------------------------------------------- critic

void CriticConfig::validate() const {
  if (base_width < 1 || max_width < base_width)
    throw std::invalid_argument("critic widths must satisfy 1 <= base <= max");
  if (depth < 1) throw std::invalid_argument("critic depth must be >= 1");
}

template <typename S>
Critic<S>::Critic(const CriticConfig& config, std::mt19937_64& rng) : config_(config) {
  config.validate();
  Index in = 2;
  Index width = config.base_width;
  for (int i = 0; i < config.depth; ++i) {
    trunk_.emplace_back(ConvSpec{in, width, 4, 2, 1, true, true, config.sn_iterations}, rng);
    in = width;
    width = std::min(width * 2, config.max_width);
  }
  head_ = Conv3dLayer<S>({in, 1, 3, 1, 1, true, true, config.sn_iterations}, rng);
  cls_ = Dense<S>(in, kNumContrasts, true, rng);
}

template <typename S>
CriticOutput<S> Critic<S>::forward(const Tensor<S>& target, const Tensor<S>& source) const {
  require_volume(target, 1, "critic");
  if (target.shape() != source.shape())
    throw ShapeError("critic: target " + to_string(target.shape()) + " and source " +
                     to_string(source.shape()) + " differ");
  Tensor<S> h = concat(std::vector<Tensor<S>>{target, source}, 1);
  for (const auto& conv : trunk_) h = lrelu(conv.forward(h));
  CriticOutput<S> out;
  out.realism = head_.forward(h);
  const Index b = h.dim(0);
  out.logits = cls_.forward(reshape(global_avg_pool(h), {b, h.dim(1)}));
  return out;
}

template <typename S>
Tensor<S> Critic<S>::score(const Tensor<S>& realism) {
  const Index b = realism.dim(0);
  return reshape(mean_axis(reshape(realism, {b, realism.numel() / b}), 1), {b});
}

template <typename S>
void Critic<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  for (std::size_t i = 0; i < trunk_.size(); ++i)
    trunk_[i].collect(reg, prefix + ".trunk" + std::to_string(i));
  head_.collect(reg, prefix + ".realism");
  cls_.collect(reg, prefix + ".cls");
}

// -------------------------------------------------------------- segmenter

void SegmenterConfig::validate() const {
  if (in_channels < 1 || base_width < 1)
    throw std::invalid_argument("segmenter channels must be >= 1");
}

template <typename S>
Segmenter<S>::Segmenter(const SegmenterConfig& config, std::mt19937_64& rng) : config_(config) {
  config.validate();
  const Index w = config.base_width;
  enc0_ = ResidualBlock<S>(config.in_channels, w, NormMode::kInstance, rng);
  down0_ = Conv3dLayer<S>({w, 2 * w, 3, 2, 1, true}, rng);
  enc1_ = ResidualBlock<S>(2 * w, 2 * w, NormMode::kInstance, rng);
  down1_ = Conv3dLayer<S>({2 * w, 4 * w, 3, 2, 1, true}, rng);
  mid_ = ResidualBlock<S>(4 * w, 4 * w, NormMode::kInstance, rng);
  up1_ = Conv3dLayer<S>({4 * w, 2 * w, 3, 1, 1, true}, rng);
  dec1_ = ResidualBlock<S>(4 * w, 2 * w, NormMode::kInstance, rng);
  up0_ = Conv3dLayer<S>({2 * w, w, 3, 1, 1, true}, rng);
  dec0_ = ResidualBlock<S>(2 * w, w, NormMode::kInstance, rng);
  head_ = Conv3dLayer<S>({w, 1, 1, 1, 0, true}, rng);
}

template <typename S>
Tensor<S> Segmenter<S>::forward(const Tensor<S>& input) const {
  require_volume(input, config_.in_channels, "segmenter");
  require_multiple(input, 4, "segmenter");
  Tensor<S> e0 = lrelu(enc0_.forward(input));
  Tensor<S> e1 = lrelu(enc1_.forward(lrelu(down0_.forward(e0))));
  Tensor<S> m = lrelu(mid_.forward(lrelu(down1_.forward(e1))));
  Tensor<S> d1 = lrelu(up1_.forward(upsample_trilinear(m, spatial_dims(e1))));
  d1 = lrelu(dec1_.forward(concat(std::vector<Tensor<S>>{e1, d1}, 1)));
  Tensor<S> d0 = lrelu(up0_.forward(upsample_trilinear(d1, spatial_dims(e0))));
  d0 = lrelu(dec0_.forward(concat(std::vector<Tensor<S>>{e0, d0}, 1)));
  return head_.forward(d0);
}

template <typename S>
Tensor<S> Segmenter<S>::forward(const Tensor<S>& volume, const Tensor<S>& codes) const {
  require_volume(volume, 1, "segmenter");
  return forward(with_codes(volume, codes));
}

template <typename S>
void Segmenter<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  enc0_.collect(reg, prefix + ".enc0");
  down0_.collect(reg, prefix + ".down0");
  enc1_.collect(reg, prefix + ".enc1");
  down1_.collect(reg, prefix + ".down1");
  mid_.collect(reg, prefix + ".mid");
  up1_.collect(reg, prefix + ".up1");
  dec1_.collect(reg, prefix + ".dec1");
  up0_.collect(reg, prefix + ".up0");
  dec0_.collect(reg, prefix + ".dec0");
  head_.collect(reg, prefix + ".head");
}

template <typename S>
void Segmenter<S>::freeze() {
  ParamRegistry<S> reg;
  collect(reg);
  for (auto& p : reg.params) p.tensor.freeze();
  frozen_ = true;
}

// ------------------------------------------------------ feature extractor

template <typename S>
FeatureExtractor<S>::FeatureExtractor(const FeatureExtractorConfig& config) : config_(config) {
  if (config.widths.size() != 4)
    throw std::invalid_argument("feature extractor has exactly four stages");
  std::mt19937_64 rng(config.seed);
  const auto& w = config.widths;
  stem_ = Conv3dLayer<S>({1, w[0], 3, 2, 1, true}, rng);
  Index in = w[0];
  for (Index width : w) {
    Stage s;
    s.down = Conv3dLayer<S>({in, width, 3, 2, 1, true}, rng);
    s.conv1 = Conv3dLayer<S>({width, width, 3, 1, 1, true}, rng);
    s.conv2 = Conv3dLayer<S>({width, width, 3, 1, 1, true}, rng);
    stages_.push_back(std::move(s));
    in = width;
  }
  ParamRegistry<S> reg;
  collect(reg);
  for (auto& p : reg.params) p.tensor.freeze();
}

template <typename S>
std::vector<Tensor<S>> FeatureExtractor<S>::features(const Tensor<S>& x) const {
  require_volume(x, 1, "feature extractor");
  for (int a = 2; a < 5; ++a)
    if (x.dim(a) < kMinExtent)
      throw ShapeError("feature extractor needs every spatial dim >= " +
                       std::to_string(kMinExtent) + ", got " + to_string(x.shape()));
  std::vector<Tensor<S>> out;
  Tensor<S> h = lrelu(stem_.forward(x));
  for (const Stage& s : stages_) {
    h = lrelu(s.down.forward(h));
    h = lrelu(add(h, s.conv2.forward(lrelu(s.conv1.forward(h)))));
    out.push_back(h);
  }
  return out;
}

template <typename S>
Tensor<S> FeatureExtractor<S>::pooled(const Tensor<S>& x) const {
  Tensor<S> last = features(x).back();
  return reshape(global_avg_pool(last), {last.dim(0), last.dim(1)});
}

template <typename S>
void FeatureExtractor<S>::collect(ParamRegistry<S>& reg, const std::string& prefix) const {
  stem_.collect(reg, prefix + ".stem");
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i + 1);
    stages_[i].down.collect(reg, p + ".down");
    stages_[i].conv1.collect(reg, p + ".conv1");
    stages_[i].conv2.collect(reg, p + ".conv2");
  }
}

template <typename S>
void FeatureExtractor<S>::load_weights(const std::string& path) {
  const Archive archive = read_archive(path);
  ParamRegistry<S> reg;
  collect(reg);
  for (auto& p : reg.params) {
    const auto* src = archive.find(p.name);
    if (!src) throw std::runtime_error("feature weights file lacks tensor " + p.name);
    if (src->shape() != p.tensor.shape())
      throw ShapeError("feature weight " + p.name + " has shape " + to_string(src->shape()) +
                       ", expected " + to_string(p.tensor.shape()));
    std::transform(src->data().begin(), src->data().end(), p.tensor.data().begin(),
                   [](float v) { return static_cast<S>(v); });
  }
}

#define MCSAGAN_INSTANTIATE(S)                                                  \
  template Tensor<S> domain_codes<S>(const std::vector<Contrast>&);             \
  template void validate_codes(const Tensor<S>&, Index);                        \
  template Tensor<S> with_codes(const Tensor<S>&, const Tensor<S>&);            \
  template class Generator<S>;                                                  \
  template struct CriticOutput<S>;                                              \
  template class Critic<S>;                                                     \
  template class Segmenter<S>;                                                  \
  template class FeatureExtractor<S>;

MCSAGAN_INSTANTIATE(float)
MCSAGAN_INSTANTIATE(double)
#undef MCSAGAN_INSTANTIATE

}  // namespace mcsagan
