#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fost/alignment.hpp"
#include "fost/pseudo_labeler.hpp"
#include "fost/random.hpp"
#include "fost/shape_worlds.hpp"
#include "fost/structnet.hpp"

namespace fost {

enum class ClusterLayer { f_vec, last_fc };
const char* to_string(ClusterLayer layer);
ClusterLayer parse_cluster_layer(const std::string& text);

/// How target features are weighted before the contrastive loss: left raw, or
/// weighted like the source branch using their pseudo-labels.
enum class TargetWeighting { none, pseudo_label };
const char* to_string(TargetWeighting mode);
TargetWeighting parse_target_weighting(const std::string& text);
struct TrainConfig {
  double alpha = 0.25;
  double eta0_conv = 0.01;
  double eta0_fc = 0.01;
  double a = 10.0;
  double b = 0.75;
  double momentum = 0.9;
  std::size_t epochs = 15;
  std::size_t iterations_per_epoch = 50;
  std::size_t batch_classes = 4;
  std::size_t per_class_per_domain = 8;
  Thresholds thresholds{.dissimilarity_cutoff = 0.02, .n0 = 3};
  KernelConfig kernel;
  KMeansOptions kmeans{.max_iters = 1, .tol = 1e-6};
  bool use_positive_weights = true;
  TargetWeighting target_weighting = TargetWeighting::pseudo_label;
  ClusterLayer cluster_layer = ClusterLayer::last_fc;
  bool warm_start_centers = false;
  /// Leading epochs trained with cross-entropy only.
  std::size_t contrastive_warmup_epochs = 5;
  std::uint64_t seed = 0;

  /// Throws InvalidConfig / AlphaOutOfRange.
  void validate() const;
};

/// eta0 / (1 + a p)^b. Throws ProgressOutOfRange.
double lr_schedule(double eta0, double p, double a, double b);

struct MiniBatch {
  std::vector<std::size_t> source_indices;
  std::vector<std::size_t> target_indices;
  std::vector<int> source_labels;
  std::vector<int> target_labels;  // pseudo-labels
  std::vector<int> classes;        // distinct, ascending
};

/// Picks batch_classes eligible classes uniformly (without replacement; when
/// fewer are eligible every one is taken and the remaining slots are drawn
/// with replacement), then per_class_per_domain distinct samples of each
/// picked class from each domain. Throws InsufficientSamples,
/// NoEligibleClasses.
MiniBatch class_aware_sample(std::span<const int> eligible,
                             const std::vector<std::vector<std::size_t>>& source_index_by_class,
                             const std::vector<std::vector<std::size_t>>& target_index_by_class,
                             const TrainConfig& cfg, Rng& rng);

/// v <- mu v - eta g, theta <- theta + v, per parameter.
struct SgdState {
  std::vector<std::vector<double>> velocity;
};
void sgd_momentum_step(std::span<Tensor> params, const Gradients& grads, std::span<const double> lrs,
                       double momentum, SgdState& state);

struct BatchData {
  Tensor source_images;
  std::vector<int> source_labels;
  Tensor target_images;
  std::vector<int> target_labels;
  std::vector<int> classes;  // empty: cross-entropy only
};

/// Held-fixed quantities of the loss (positive weights and per-layer
/// bandwidths). Computed from the batch when not supplied.
struct LossConstants {
  Tensor positive_weights;
  Tensor target_weights;
  std::vector<double> sigmas;
};

struct BatchObjective {
  Objective objective;
  LossConstants constants;
};

/// Forward both domains in training mode and build the full objective.
BatchObjective batch_objective(StructNet& net, const BatchData& batch, const TrainConfig& cfg,
                               const LossConstants* fixed = nullptr);

struct EpochReport {
  std::size_t epoch = 0;
  LossBreakdown loss;  // means over the epoch's iterations
  double lr = 0.0;     // conv learning rate at the epoch's last iteration
  double pseudo_label_acc = 0.0;
  std::size_t n_retained = 0;
  std::size_t n_eligible_classes = 0;
  double target_acc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  StructNet net;
  std::vector<EpochReport> reports;
  std::vector<std::string> warnings;
};

using EpochCallback = std::function<void(const EpochReport&)>;

/// Full training run. Deterministic given cfg.seed (network init and batch
/// sampling use streams derived from it). Throws NumericalDivergence.
TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& cfg, const Datasets& data,
                  const EpochCallback& on_epoch = {});

/// Features of every sample at the clustering layer, evaluation mode.
Tensor extract_features(StructNet& net, const std::vector<Sample>& samples, ClusterLayer layer);

/// Argmax predictions (ties to the lowest class index), evaluation mode.
std::vector<int> predict(StructNet& net, const std::vector<Sample>& samples);

/// Fraction of correct predictions. Throws EmptyTestSet.
double evaluate(StructNet& net, const std::vector<Sample>& test_set);

}  // namespace fost
