#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcsagan/data.hpp"
#include "mcsagan/losses.hpp"
#include "mcsagan/networks.hpp"
#include "mcsagan/optim.hpp"

namespace mcsagan {

using Json = nlohmann::json;

// ------------------------------------------------------------------ config

struct SegPretrainConfig {
  int epochs = 30;
  Index batch_size = 2;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  SegmenterConfig segmenter{4, 8};
  std::uint64_t seed = 7;
  void validate() const;
};

struct TrainConfig {
  int epochs = 210;
  Index batch_size = 2;
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  std::vector<int> lr_milestones{80, 140, 200};
  double lr_factor = 0.5;
  int n_critic = 3;
  LossWeights weights;
  GeneratorConfig generator;
  CriticConfig critic;
  FeatureExtractorConfig features;
  SegPretrainConfig seg;
  /// Ablation switches. use_mbha is mirrored into generator.use_mbha.
  bool use_mbha = true;
  bool use_perc = true;
  bool use_seg = true;
  std::uint64_t seed = 0;
  /// Generator steps per epoch; 0 = one pass over the training set.
  Index steps_per_epoch = 0;
  /// Stop after this many generator steps; 0 = run every epoch.
  Index max_steps = 0;
  /// Validation masked-L1 every N generator steps (0 = never).
  Index val_every = 0;

  /// Milestones strictly increasing and < epochs, n_critic >= 1, ...
  void validate() const;
  GeneratorConfig effective_generator() const;
};

/// Every field is optional; missing ones keep their defaults. Unknown keys throw.
TrainConfig train_config_from_json(const Json& j);
Json to_json(const TrainConfig& c);
TrainConfig load_train_config(const std::string& path);
/// FNV-1a of the canonical JSON dump.
std::uint64_t config_hash(const TrainConfig& c);

PhantomSpec phantom_spec_from_json(const Json& j);
Json to_json(const PhantomSpec& s);

/// lr * factor^(number of milestones <= epochs_completed).
double lr_at_epoch(const TrainConfig& c, int epochs_completed);

// ---------------------------------------------------------------- batching

Contrast sample_contrast(std::mt19937_64& rng);

/// Endless stream of index batches: seeded shuffle, consecutive slices,
/// reshuffle once fewer than a batch remain.
class BatchStream {
 public:
  BatchStream(std::size_t population, Index batch, std::uint64_t seed);
  std::vector<std::size_t> next();
  Json state() const;
  void restore(const Json& state);

 private:
  void reshuffle();
  std::size_t population_;
  Index batch_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct Batch {
  Tensor<float> source, target, mask, codes;
  std::vector<Contrast> contrasts;
};

Batch make_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& idx,
                 const std::vector<Contrast>& contrasts);

// -------------------------------------------------------------- segmenter

struct PretrainEpoch {
  int epoch = 0;
  double loss = 0;
  double val_dice = 0;
};

/// Conditional segmenter pretraining: each sample is shown one uniformly
/// chosen target contrast with its code. Freezes the network at the end.
std::vector<PretrainEpoch> pretrain_segmenter(
    Segmenter<float>& seg, const std::vector<Sample>& train, const std::vector<Sample>& val,
    const SegPretrainConfig& cfg, const std::function<void(const PretrainEpoch&)>& on_epoch = {});

/// Mean per-volume Dice of the conditional segmenter over every (sample, contrast).
double conditional_dice(const Segmenter<float>& seg, const std::vector<Sample>& data);

/// Four-channel input (T2w, T2f, T1c, T1n) for the downstream segmenter.
Tensor<float> four_channel(const Tensor<float>& t2w, const std::array<Tensor<float>, kNumContrasts>& c);

/// Downstream segmenter trained on real four-channel inputs.
std::vector<PretrainEpoch> train_downstream_segmenter(
    Segmenter<float>& seg, const std::vector<Sample>& train, const std::vector<Sample>& val,
    const SegPretrainConfig& cfg, const std::function<void(const PretrainEpoch&)>& on_epoch = {});

/// Produces the [D,H,W] volume of one contrast for a sample.
using Synthesizer = std::function<Tensor<float>(const Sample&, Contrast)>;

/// Mean per-volume Dice of the four-channel segmenter when the three target
/// contrasts come from `synth`.
double downstream_dice(const Segmenter<float>& seg4, const std::vector<Sample>& data,
                       const Synthesizer& synth);

void save_segmenter(const std::string& path, Segmenter<float>& seg);
/// Rebuilds the network from the file's header and freezes it.
std::unique_ptr<Segmenter<float>> load_segmenter(const std::string& path);

// ------------------------------------------------------------------- GAN

struct StepLog {
  Index step = 0;  // generator steps completed, 1-based
  int epoch = 0;
  double lr = 0;
  std::vector<LossReport> critic;  // one per critic update
  LossReport generator;
  double wasserstein = 0;          // mean score_real - mean score_fake, last critic update
  std::optional<double> val_masked_l1;

  Json to_json() const;
};

class GanTrainer {
 public:
  /// `segmenter` must be frozen; it may be null only when use_seg is false.
  GanTrainer(TrainConfig config, std::vector<Sample> train, std::vector<Sample> val,
             std::shared_ptr<const Segmenter<float>> segmenter);

  /// n_critic critic updates on independent batches, then one generator update.
  StepLog step();
  /// Runs until max_steps or the last epoch. Checkpoints after each epoch
  /// when `checkpoint_dir` is non-empty.
  void run(const std::function<void(const StepLog&)>& on_step = {},
           const std::string& checkpoint_dir = "");

  /// Seg-weighted L1 on the validation set, each sample paired with a
  /// fixed contrast (index mod 3).
  double validation_masked_l1() const;

  void save_checkpoint(const std::string& path) const;
  /// Restores weights, optimizer moments, RNG and stream state.
  void load_checkpoint(const std::string& path);

  const TrainConfig& config() const { return config_; }
  Generator<float>& generator() { return *gen_; }
  const Generator<float>& generator() const { return *gen_; }
  Critic<float>& critic() { return *critic_; }
  Index steps() const { return step_; }
  int epoch() const { return epoch_; }
  double lr() const;
  Index critic_updates() const { return critic_updates_; }
  Index generator_updates() const { return step_; }
  Index steps_per_epoch() const { return steps_per_epoch_; }
  bool finished() const;

 private:
  Batch draw_batch();
  LossReport critic_update(double* wasserstein);
  LossReport generator_update();
  void apply_schedule();

  TrainConfig config_;
  std::vector<Sample> train_, val_;
  std::shared_ptr<const Segmenter<float>> seg_;
  std::unique_ptr<Generator<float>> gen_;
  std::unique_ptr<Critic<float>> critic_;
  std::unique_ptr<FeatureExtractor<float>> extractor_;
  ParamRegistry<float> gen_reg_, critic_reg_;
  std::unique_ptr<Adam<float>> gen_opt_, critic_opt_;
  std::mt19937_64 rng_;
  BatchStream stream_;
  Index steps_per_epoch_ = 1;
  Index step_ = 0;
  int epoch_ = 0;
  Index critic_updates_ = 0;
};

/// Throws NumericError naming the first non-finite term.
void check_report(const LossReport& r, const std::string& where, Index step);

// -------------------------------------------------------- inference & eval

struct GeneratorBundle {
  TrainConfig config;
  std::unique_ptr<Generator<float>> generator;
};

/// Generator weights and config from a training checkpoint.
GeneratorBundle load_generator(const std::string& checkpoint);

/// Deterministic inference on one [D,H,W] volume. Throws ShapeError when the
/// dims are not multiples of the generator's stride.
Tensor<float> synthesize(const Generator<float>& gen, const Tensor<float>& source, Contrast c);

Synthesizer generator_synthesizer(const Generator<float>& gen);

struct EvalOptions {
  /// Downstream four-channel segmenter; the report omits Dice when null.
  const Segmenter<float>* downstream = nullptr;
  const FeatureExtractor<float>* extractor = nullptr;  // default-constructed when null
};

/// Per contrast: PSNR/SSIM/MS-SSIM/MSE mean and std, MFD; plus downstream Dice.
/// Infinite PSNR is reported as the string "inf".
Json evaluate(const std::vector<Sample>& data, const Synthesizer& synth, const EvalOptions& opt = {});

// -------------------------------------------------------------- planning

/// Parses "DxHxW[,DxHxW...]"; an empty string gives an empty sweep.
std::vector<Dims3> parse_dims_list(const std::string& text);
/// Fixed-width table, one row per dims entry, header always present.
std::string plan_table(const std::vector<Dims3>& dims, const AttentionBudget& budget);

}  // namespace mcsagan
