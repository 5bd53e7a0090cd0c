#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fost/structnet.hpp"
#include "fost/tensor.hpp"

namespace fost {

enum class BandwidthMode { median_heuristic, fixed };

/// Ensemble of RBF kernels exp(-|a-b|^2 / (2 (m sigma)^2)), one per
/// multiplier m, averaged.
struct KernelConfig {
  BandwidthMode bandwidth_mode = BandwidthMode::median_heuristic;
  std::vector<double> sigma_multipliers{0.25, 0.5, 1.0, 2.0, 4.0};
  std::optional<double> fixed_sigma;

  /// Throws InvalidConfig.
  void validate() const;
};

/// Kernel value in (0, 1]; k(a, a) == 1 exactly. Throws DimensionMismatch.
double rbf_kernel(std::span<const double> a, std::span<const double> b, const KernelConfig& cfg,
                  double sigma);

/// Differentiable kernel matrix between the rows of `a` (n x d) and `b` (m x d).
Tensor rbf_kernel_matrix(const Tensor& a, const Tensor& b, const KernelConfig& cfg, double sigma);

/// sqrt of the median pairwise squared distance over all rows of both sets
/// (i < j). Falls back to 1 when every pair coincides.
double median_heuristic_sigma(const Tensor& a, const Tensor& b);

/// Bandwidth for one layer: the fixed sigma, or the median heuristic.
double resolve_bandwidth(const KernelConfig& cfg, const Tensor& source_feats, const Tensor& target_feats);

/// W_i = relu(d logit_{y_i} / d f_vec_i), rescaled so that mean(W_i) == 1;
/// rows with no positive component become all-ones. Returned as a constant
/// (no gradient flows through it).
Tensor positive_feature_weights(const StructNet& net, const Tensor& f_vec, std::span<const int> labels);

/// Indicator masks eta_{c1c1}(y^s, y^s), eta_{c2c2}(y^t, y^t) and
/// eta_{c1c2}(y^s, y^t), row-major, 1.0 where both labels match.
struct ClassPairMask {
  int c1 = 0, c2 = 0;
  std::vector<double> source_source;
  std::vector<double> target_target;
  std::vector<double> source_target;
  std::size_t n_source_c1 = 0, n_target_c2 = 0;

  static ClassPairMask build(int c1, int c2, std::span<const int> source_labels,
                             std::span<const int> target_labels);
};

/// Kernel blocks of one layer, computed once and shared by every class pair.
struct KernelBlocks {
  Tensor source_source;
  Tensor target_target;
  Tensor source_target;
};

KernelBlocks kernel_blocks(const Tensor& source_feats, const Tensor& target_feats, const KernelConfig& cfg,
                           double sigma);

/// Class-conditional discrepancy D^{c1c2}: masked mean of k over source class
/// c1 pairs + masked mean over target class c2 pairs - 2 * masked mean over
/// cross pairs. Source rows are the (weighted) positive features; target rows
/// are raw features. Throws NoSamplesForClass.
Tensor class_conditional_discrepancy(int c1, int c2, const KernelBlocks& blocks,
                                     std::span<const int> source_labels, std::span<const int> target_labels);
Tensor class_conditional_discrepancy(int c1, int c2, const Tensor& source_feats, const Tensor& target_feats,
                                     std::span<const int> source_labels, std::span<const int> target_labels,
                                     const KernelConfig& cfg, double sigma);

/// Structure contrastive loss over the given classes (C = classes.size()):
/// mean of D^{cc} minus the mean of D^{cc'} over ordered pairs c != c'. With a
/// single class the inter-class term is empty and contributes nothing.
Tensor scl(const KernelBlocks& blocks, std::span<const int> source_labels, std::span<const int> target_labels,
           std::span<const int> classes);
Tensor scl(const Tensor& source_feats, const Tensor& target_feats, std::span<const int> source_labels,
           std::span<const int> target_labels, std::span<const int> classes, const KernelConfig& cfg,
           double sigma);

struct MultilayerScl {
  Tensor total;
  std::vector<Tensor> per_layer;
  std::vector<double> sigmas;
};

/// Sum over FC layers of the per-layer structure contrastive loss. `sigmas`,
/// when given, fixes the bandwidth per layer instead of resolving it from the
/// batch. Throws LayerCountMismatch.
MultilayerScl multilayer_scl(std::span<const Tensor> source_layers, std::span<const Tensor> target_layers,
                             std::span<const int> source_labels, std::span<const int> target_labels,
                             std::span<const int> classes, const KernelConfig& cfg,
                             std::optional<std::span<const double>> sigmas = std::nullopt);

/// Mean negative log-likelihood of the labels under softmax(logits).
/// Throws LabelOutOfRange.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

struct LossBreakdown {
  double l_ce = 0.0;
  std::vector<double> per_layer_scl;
  double l_scl = 0.0;
  double total = 0.0;
  double alpha = 0.0;
};

struct Objective {
  Tensor total;
  LossBreakdown breakdown;
};

/// (1 - alpha) * l_ce + alpha * l_scl. An undefined `scl.total` means the SCL
/// term is absent and counts as zero. Throws AlphaOutOfRange.
Objective total_loss(const Tensor& l_ce, const MultilayerScl& scl, double alpha);
LossBreakdown total_loss(double l_ce, std::span<const double> per_layer_scl, double alpha);

}  // namespace fost
