#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fost/tensor.hpp"

namespace fost {

using Centers = std::vector<std::vector<double>>;

/// 1/2 (1 - cos(a, b)), in [0, 1]. Throws ZeroVector, DimensionMismatch.
double cosine_dissimilarity(std::span<const double> a, std::span<const double> b);

/// Unit-norm mean of the L2-normalised source features of each class.
/// Throws MissingClass, DegenerateCenter, ZeroVector.
Centers source_class_centers(const Tensor& features, std::span<const int> labels, std::size_t num_classes);

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tol = 1e-6;
};

struct ClusterState {
  Centers centers;                            // unit norm
  std::vector<std::optional<int>> assignments;
  std::vector<double> distances;              // dissimilarity to the assigned center
  std::vector<bool> retained;                 // filled by assign_pseudo_labels
  double objective = 0.0;                     // sum of distances
  std::vector<double> objective_history;      // one entry per assignment step
  std::size_t iterations = 0;
};

/// Spherical k-means on L2-normalised target features, initialised from
/// `init_centers`. Ties go to the lowest index; a cluster that loses all its
/// members keeps its previous center. Throws ZeroVector, DimensionMismatch.
ClusterState spherical_kmeans(const Tensor& target_features, const Centers& init_centers,
                              const KMeansOptions& options = {});

struct Thresholds {
  double dissimilarity_cutoff = 0.05;
  std::size_t n0 = 3;

  /// Throws InvalidConfig.
  void validate() const;
};

struct PseudoLabels {
  std::vector<std::optional<int>> labels;  // nullopt for dropped samples
  std::vector<bool> retained;
  std::size_t retained_count() const;
};

/// Keeps samples whose dissimilarity is strictly below the cutoff; also
/// records the retained mask on `state`.
PseudoLabels assign_pseudo_labels(ClusterState& state, const Thresholds& thresholds);

/// Classes with more than n0 retained target samples and at least one source
/// sample (`source_counts[c]`). Throws NoEligibleClasses.
std::vector<int> eligible_classes(const PseudoLabels& pseudo, std::size_t n0,
                                  std::span<const std::size_t> source_counts);

/// Retained counts per class.
std::vector<std::size_t> retained_per_class(const PseudoLabels& pseudo, std::size_t num_classes);

}  // namespace fost
