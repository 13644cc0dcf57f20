#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mcsagan/attention.hpp"
#include "mcsagan/layers.hpp"

namespace mcsagan {

// ------------------------------------------------------------ domain codes

enum class Contrast : int { kT2f = 0, kT1c = 1, kT1n = 2 };
inline constexpr int kNumContrasts = 3;

const char* contrast_name(Contrast c);  // "t2f", "t1c", "t1n"
/// Parses "t2f" / "t1c" / "t1n" (case-insensitive); throws std::invalid_argument.
Contrast parse_contrast(const std::string& name);

/// [B,3] one-hot rows.
template <typename S>
Tensor<S> domain_codes(const std::vector<Contrast>& contrasts);

/// Throws std::invalid_argument unless `codes` is [B,3] with one 1 per row.
template <typename S>
void validate_codes(const Tensor<S>& codes, Index batch);

/// Concatenate a volume [B,C,D,H,W] with its codes broadcast over space.
template <typename S>
Tensor<S> with_codes(const Tensor<S>& volume, const Tensor<S>& codes);

// -------------------------------------------------------------- generator

enum class AttentionKind { kNone, kMBHA, kFull };

const char* to_string(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& name);

struct GeneratorConfig {
  std::vector<Index> widths{16, 32, 64, 128};
  /// One entry per encoder stage (shallow to deep).
  std::vector<AttentionKind> encoder_attention{AttentionKind::kMBHA, AttentionKind::kMBHA,
                                               AttentionKind::kMBHA, AttentionKind::kFull};
  AttentionKind bottleneck_attention = AttentionKind::kFull;
  /// One entry per decoder stage (deep to shallow), widths.size() - 1 entries.
  std::vector<AttentionKind> decoder_attention{AttentionKind::kFull, AttentionKind::kMBHA,
                                               AttentionKind::kMBHA};
  AttentionBudget budget;
  Index full_attention_cap = Index{1} << 22;
  Index head_width = 8;
  int sn_iterations = 1;
  /// Ablation: MBHA placements become plain skips when false.
  bool use_mbha = true;

  void validate() const;
};

template <typename S>
class Generator {
 public:
  Generator(const GeneratorConfig& config, std::mt19937_64& rng);

  /// x_s [B,1,D,H,W], codes [B,3] -> [B,1,D,H,W] in [-1,1].
  Tensor<S> forward(const Tensor<S>& source, const Tensor<S>& codes) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix = "gen") const;
  const GeneratorConfig& config() const { return config_; }
  /// Spatial dims must be multiples of this.
  Index stride_multiple() const;

 private:
  struct Attention {
    AttentionKind kind = AttentionKind::kNone;
    std::optional<MBHABlock<S>> mbha;
    std::optional<SelfAttention3d<S>> full;
    Tensor<S> forward(const Tensor<S>& x) const;
    void collect(ParamRegistry<S>& reg, const std::string& prefix) const;
  };
  struct Down {
    Conv3dLayer<S> conv;
    NormLayer<S> norm;
    ResidualBlock<S> res;
    Attention att;
  };
  struct Up {
    Conv3dLayer<S> conv;
    NormLayer<S> norm;
    AttentionGate<S> gate;
    ResidualBlock<S> res;
    Attention att;
  };

  Attention make_attention(AttentionKind kind, Index channels, std::mt19937_64& rng) const;

  GeneratorConfig config_;
  std::vector<Down> down_;
  ResidualBlock<S> bottleneck_;
  Attention bottleneck_att_;
  std::vector<Up> up_;
  Conv3dLayer<S> final_up_;
  NormLayer<S> final_norm_;
  Conv3dLayer<S> fuse_;
  Conv3dLayer<S> head_;
};

// ----------------------------------------------------------------- critic

struct CriticConfig {
  Index base_width = 16;
  int depth = 4;
  Index max_width = 256;
  int sn_iterations = 1;
  void validate() const;
};

template <typename S>
struct CriticOutput {
  Tensor<S> realism;  // [B,1,d,h,w]
  Tensor<S> logits;   // [B,3]
};

template <typename S>
class Critic {
 public:
  Critic(const CriticConfig& config, std::mt19937_64& rng);

  /// Judges (target || source) pairs.
  CriticOutput<S> forward(const Tensor<S>& target, const Tensor<S>& source) const;
  /// Per-sample spatial mean of the realism map, [B].
  static Tensor<S> score(const Tensor<S>& realism);
  void collect(ParamRegistry<S>& reg, const std::string& prefix = "critic") const;
  const CriticConfig& config() const { return config_; }
  std::vector<Conv3dLayer<S>>& trunk() { return trunk_; }
  Conv3dLayer<S>& realism_head() { return head_; }
  Dense<S>& class_head() { return cls_; }

 private:
  CriticConfig config_;
  std::vector<Conv3dLayer<S>> trunk_;
  Conv3dLayer<S> head_;
  Dense<S> cls_;
};

// -------------------------------------------------------------- segmenter

struct SegmenterConfig {
  /// 4 for the conditional variant (volume + code), 4 for the downstream
  /// variant (T2w + three contrasts).
  Index in_channels = 4;
  Index base_width = 8;
  void validate() const;
};

/// Three-level U-Net producing voxelwise tumour logits.
template <typename S>
class Segmenter {
 public:
  Segmenter(const SegmenterConfig& config, std::mt19937_64& rng);

  /// Raw input [B,in_channels,D,H,W] -> logits [B,1,D,H,W].
  Tensor<S> forward(const Tensor<S>& input) const;
  /// Conditional use: volume [B,1,...] plus codes [B,3].
  Tensor<S> forward(const Tensor<S>& volume, const Tensor<S>& codes) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix = "seg") const;
  void freeze();
  bool frozen() const { return frozen_; }
  const SegmenterConfig& config() const { return config_; }

 private:
  SegmenterConfig config_;
  ResidualBlock<S> enc0_, enc1_, mid_, dec1_, dec0_;
  Conv3dLayer<S> down0_, down1_, up1_, up0_, head_;
  bool frozen_ = false;
};

// ------------------------------------------------------ feature extractor

struct FeatureExtractorConfig {
  std::vector<Index> widths{8, 16, 32, 64};
  std::uint64_t seed = 0x4d435341u;
};

/// Fixed, frozen four-stage residual encoder. Stage k output sits at stride
/// 2^(k+2) relative to the input.
template <typename S>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(const FeatureExtractorConfig& config = {});

  std::vector<Tensor<S>> features(const Tensor<S>& x) const;
  /// Final stage, globally average-pooled: [B, widths.back()].
  Tensor<S> pooled(const Tensor<S>& x) const;
  void collect(ParamRegistry<S>& reg, const std::string& prefix = "feat") const;
  /// Replace the weights from a checkpoint file holding tensors with the
  /// names reported by `collect` (for externally converted backbones).
  void load_weights(const std::string& path);
  static constexpr Index kMinExtent = 8;

 private:
  struct Stage {
    Conv3dLayer<S> down, conv1, conv2;
  };
  FeatureExtractorConfig config_;
  Conv3dLayer<S> stem_;
  std::vector<Stage> stages_;
};

}  // namespace mcsagan
