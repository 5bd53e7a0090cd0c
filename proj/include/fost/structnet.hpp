#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fost/shape_worlds.hpp"
#include "fost/tensor.hpp"

namespace fost {

struct InputShape {
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
};

/// Architecture of the staged network. Stage i produces map S_{i+2}; the
/// toggles fuse_s2/fuse_s3/fuse_s4 select stages 0/1/2 for structure fusion.
/// The deepest stage always feeds the fused map regardless of its toggle.
struct NetworkConfig {
  std::vector<std::size_t> stage_channels{8, 16, 32};
  std::vector<std::size_t> fc_dims{64, 32};
  std::size_t num_classes = 4;
  bool fuse_s2 = true;
  bool fuse_s3 = true;
  bool fuse_s4 = true;
  InputShape input;
  std::size_t kernel_size = 3;
  double norm_epsilon = 1e-10;
  double norm_momentum = 0.9;

  /// Throws InvalidConfig.
  void validate() const;
  /// One flag per stage: whether its map enters the fused structure feature.
  std::vector<bool> fused_stages() const;
  /// Length of f_vec.
  std::size_t fused_channels() const;
  /// Number of FC layers L entering the multi-layer contrastive loss.
  std::size_t fc_layers() const { return fc_dims.size(); }
};

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> variance;
};

/// Domain-separated normalisation statistics for one normalisation site.
/// Source and target running statistics are stored and updated independently.
class DomainNormState {
 public:
  DomainNormState(std::size_t channels, double epsilon, double momentum = 0.9);

  std::size_t channels() const noexcept { return stats_[0].mean.size(); }
  double epsilon() const noexcept { return epsilon_; }
  double momentum() const noexcept { return momentum_; }
  const RunningStats& stats(DomainId domain) const { return stats_[index(domain)]; }
  RunningStats& stats(DomainId domain) { return stats_[index(domain)]; }

 private:
  static std::size_t index(DomainId domain);
  std::array<RunningStats, 2> stats_;
  double epsilon_;
  double momentum_;
};

/// ConvNorm. Training: normalise with batch statistics and fold them into the
/// domain's running statistics (running = momentum * running + (1 - momentum)
/// * batch). Evaluation: normalise with the domain's running statistics.
Tensor conv_norm_update_and_apply(DomainNormState& state, const Tensor& batch, DomainId domain,
                                  bool training);

/// Pools each enabled shallower map to the deepest map's spatial size and
/// concatenates along channels. The deepest map (last entry) must be enabled;
/// with only it enabled the result is that map unchanged.
/// Throws NoMapsEnabled.
Tensor structure_fusion(std::span<const Tensor> stage_maps, const std::vector<bool>& enabled);

enum class Mode { training, evaluation };

struct FeatureBundle {
  std::vector<Tensor> stage_maps;   // S2, S3, S4, ... decreasing spatial size
  Tensor f_struc;                   // (N, fused channels, h, w)
  Tensor f_vec;                     // (N, fused channels)
  std::vector<Tensor> fc_features;  // L entries, post-activation
  Tensor logits;                    // (N, C)
};

struct HeadOutput {
  std::vector<Tensor> fc_features;
  Tensor logits;
};

class StructNet {
 public:
  StructNet(NetworkConfig config, std::uint64_t seed);

  const NetworkConfig& config() const noexcept { return config_; }

  /// Shared-weight forward; only normalisation statistics depend on `domain`.
  FeatureBundle forward_features(const Tensor& images, DomainId domain, Mode mode);
  /// FC stack and classifier applied to a pooled feature matrix (N, D).
  HeadOutput forward_head(const Tensor& f_vec) const;

  /// Parameters in declaration order: per stage (conv weight, conv bias), per
  /// FC layer (weight, bias), then classifier (weight, bias).
  std::span<Tensor> parameters() noexcept { return params_; }
  std::span<const Tensor> parameters() const noexcept { return params_; }
  /// Parameters [0, conv_parameter_count()) belong to the convolutional stages.
  std::size_t conv_parameter_count() const noexcept { return 2 * config_.stage_channels.size(); }
  std::size_t parameter_count() const;

  std::span<const DomainNormState> norms() const noexcept { return norms_; }
  std::span<DomainNormState> norms() noexcept { return norms_; }

  /// FNV-1a over the raw parameter bytes.
  std::uint64_t parameter_checksum() const;

  /// Checkpoint: "FSTN", config, parameter tensors in declaration order and
  /// normalisation statistics, all little-endian (float64 values).
  void save(const std::filesystem::path& path) const;
  static StructNet load(const std::filesystem::path& path);

 private:
  StructNet(NetworkConfig config, std::vector<Tensor> params, std::vector<DomainNormState> norms);

  NetworkConfig config_;
  std::vector<Tensor> params_;
  // Site 0 normalises the input; site i + 1 follows stage i.
  std::vector<DomainNormState> norms_;
};

}  // namespace fost
