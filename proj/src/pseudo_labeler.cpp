#include "fost/pseudo_labeler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fost/errors.hpp"

namespace fost {

namespace {

constexpr double kDegenerateNorm = 1e-8;

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double norm(const double* a, std::size_t n) { return std::sqrt(dot(a, a, n)); }

std::vector<double> normalized_rows(const Tensor& features, const char* what) {
  if (features.rank() != 2) throw DimensionMismatch(std::string(what) + ": expected (N, D) features");
  const std::size_t n = features.dim(0), d = features.dim(1);
  std::vector<double> out(features.data().begin(), features.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &out[i * d];
    const double len = norm(row, d);
    if (len == 0.0) throw ZeroVector(std::string(what) + ": row " + std::to_string(i) + " is zero");
    for (std::size_t j = 0; j < d; ++j) row[j] /= len;
  }
  return out;
}

}  // namespace

double cosine_dissimilarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionMismatch("cosine_dissimilarity: dimensions " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()));
  }
  const double na = norm(a.data(), a.size()), nb = norm(b.data(), b.size());
  if (na == 0.0 || nb == 0.0) throw ZeroVector("cosine_dissimilarity: zero-norm input");
  const double cos = std::clamp(dot(a.data(), b.data(), a.size()) / (na * nb), -1.0, 1.0);
  return 0.5 * (1.0 - cos);
}

Centers source_class_centers(const Tensor& features, std::span<const int> labels, std::size_t num_classes) {
  const std::vector<double> unit = normalized_rows(features, "source_class_centers");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (labels.size() != n) throw DimensionMismatch("source_class_centers: label count mismatch");
  Centers centers(num_classes, std::vector<double>(d, 0.0));
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = labels[i];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw LabelOutOfRange("source_class_centers: label " + std::to_string(c));
    }
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) centers[c][j] += unit[i * d + j];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) throw MissingClass("no source samples of class " + std::to_string(c));
    const double len = norm(centers[c].data(), d);
    if (len / static_cast<double>(counts[c]) < kDegenerateNorm) {
      throw DegenerateCenter("class " + std::to_string(c) + " has a near-zero mean direction");
    }
    for (double& v : centers[c]) v /= len;
  }
  return centers;
}

ClusterState spherical_kmeans(const Tensor& target_features, const Centers& init_centers,
                              const KMeansOptions& options) {
  const std::vector<double> x = normalized_rows(target_features, "spherical_kmeans");
  const std::size_t n = target_features.dim(0), d = target_features.dim(1), k = init_centers.size();
  if (k == 0) throw DimensionMismatch("spherical_kmeans: no centers");

  ClusterState st;
  st.centers = init_centers;
  for (auto& c : st.centers) {
    if (c.size() != d) throw DimensionMismatch("spherical_kmeans: center dimension mismatch");
    const double len = norm(c.data(), d);
    if (len == 0.0) throw ZeroVector("spherical_kmeans: zero initial center");
    for (double& v : c) v /= len;
  }
  st.assignments.assign(n, std::nullopt);
  st.distances.assign(n, 0.0);
  st.retained.assign(n, false);

  auto assign = [&] {
    bool changed = false;
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_dist = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double cos = std::clamp(dot(&x[i * d], st.centers[c].data(), d), -1.0, 1.0);
        const double dist = 0.5 * (1.0 - cos);
        if (c == 0 || dist < best_dist) {
          best = static_cast<int>(c);
          best_dist = dist;
        }
      }
      if (st.assignments[i] != best) changed = true;
      st.assignments[i] = best;
      st.distances[i] = best_dist;
      objective += best_dist;
    }
    st.objective = objective;
    st.objective_history.push_back(objective);
    return changed;
  };

  auto update = [&] {
    Centers sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const int c = *st.assignments[i];
      ++counts[c];
      for (std::size_t j = 0; j < d; ++j) sums[c][j] += x[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      const double len = norm(sums[c].data(), d);
      if (len / static_cast<double>(counts[c]) < kDegenerateNorm) continue;
      for (std::size_t j = 0; j < d; ++j) st.centers[c][j] = sums[c][j] / len;
    }
  };

  assign();
  while (st.iterations < options.max_iters) {
    update();
    ++st.iterations;
    const double before = st.objective;
    const bool changed = assign();
    if (!changed || before - st.objective < options.tol) break;
  }
  return st;
}

void Thresholds::validate() const {
  if (!(dissimilarity_cutoff > 0.0 && dissimilarity_cutoff <= 1.0)) {
    throw InvalidConfig("dissimilarity cutoff must lie in (0, 1]");
  }
}

std::size_t PseudoLabels::retained_count() const {
  return static_cast<std::size_t>(std::count(retained.begin(), retained.end(), true));
}

PseudoLabels assign_pseudo_labels(ClusterState& state, const Thresholds& thresholds) {
  thresholds.validate();
  const std::size_t n = state.assignments.size();
  PseudoLabels out;
  out.labels.assign(n, std::nullopt);
  out.retained.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (state.assignments[i] && state.distances[i] < thresholds.dissimilarity_cutoff) {
      out.labels[i] = state.assignments[i];
      out.retained[i] = true;
    }
  }
  state.retained = out.retained;
  return out;
}

std::vector<std::size_t> retained_per_class(const PseudoLabels& pseudo, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < pseudo.labels.size(); ++i) {
    if (!pseudo.retained[i] || !pseudo.labels[i]) continue;
    const int c = *pseudo.labels[i];
    if (c >= 0 && static_cast<std::size_t>(c) < num_classes) ++counts[c];
  }
  return counts;
}

std::vector<int> eligible_classes(const PseudoLabels& pseudo, std::size_t n0,
                                  std::span<const std::size_t> source_counts) {
  const std::vector<std::size_t> counts = retained_per_class(pseudo, source_counts.size());
  std::vector<int> out;
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] > n0 && source_counts[c] >= 1) out.push_back(static_cast<int>(c));
  if (out.empty()) throw NoEligibleClasses("no class has more than " + std::to_string(n0) + " retained samples");
  return out;
}

}  // namespace fost
