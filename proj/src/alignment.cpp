#include "fost/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fost/errors.hpp"
#include "fost/ops.hpp"

namespace fost {

void KernelConfig::validate() const {
  if (sigma_multipliers.empty()) throw InvalidConfig("kernel ensemble needs at least one multiplier");
  for (double m : sigma_multipliers)
    if (!(m > 0.0)) throw InvalidConfig("sigma multipliers must be positive");
  if (bandwidth_mode == BandwidthMode::fixed && !(fixed_sigma && *fixed_sigma > 0.0)) {
    throw InvalidConfig("fixed bandwidth mode requires a positive fixed_sigma");
  }
}

double rbf_kernel(std::span<const double> a, std::span<const double> b, const KernelConfig& cfg, double sigma) {
  if (a.size() != b.size()) {
    throw DimensionMismatch("rbf_kernel: dimensions " + std::to_string(a.size()) + " and " +
                            std::to_string(b.size()));
  }
  if (!(sigma > 0.0)) throw InvalidConfig("rbf_kernel: sigma must be positive");
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
  double acc = 0.0;
  for (double m : cfg.sigma_multipliers) {
    const double s = m * sigma;
    acc += std::exp(-d2 / (2.0 * s * s));
  }
  return acc / static_cast<double>(cfg.sigma_multipliers.size());
}

Tensor rbf_kernel_matrix(const Tensor& a, const Tensor& b, const KernelConfig& cfg, double sigma) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionMismatch("rbf_kernel_matrix: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (!(sigma > 0.0)) throw InvalidConfig("rbf_kernel_matrix: sigma must be positive");
  const Tensor d2 = ops::sq_dist(a, b);
  Tensor acc;
  for (double m : cfg.sigma_multipliers) {
    const double s = m * sigma;
    Tensor k = ops::exp(ops::scale(d2, -1.0 / (2.0 * s * s)));
    acc = acc.defined() ? ops::add(acc, k) : k;
  }
  return ops::scale(acc, 1.0 / static_cast<double>(cfg.sigma_multipliers.size()));
}

double median_heuristic_sigma(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionMismatch("median_heuristic_sigma: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t d = a.dim(1);
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < a.dim(0); ++i) rows.push_back(&a.data()[i * d]);
  for (std::size_t i = 0; i < b.dim(0); ++i) rows.push_back(&b.data()[i * d]);
  std::vector<double> d2;
  d2.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < d; ++p) acc += (rows[i][p] - rows[j][p]) * (rows[i][p] - rows[j][p]);
      d2.push_back(acc);
    }
  if (d2.empty()) return 1.0;
  const std::size_t mid = d2.size() / 2;
  std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid), d2.end());
  double median = d2[mid];
  if (d2.size() % 2 == 0) {
    const double lower = *std::max_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  return median > 0.0 ? std::sqrt(median) : 1.0;
}

double resolve_bandwidth(const KernelConfig& cfg, const Tensor& source_feats, const Tensor& target_feats) {
  if (cfg.bandwidth_mode == BandwidthMode::fixed) {
    cfg.validate();
    return *cfg.fixed_sigma;
  }
  return median_heuristic_sigma(source_feats, target_feats);
}

Tensor positive_feature_weights(const StructNet& net, const Tensor& f_vec, std::span<const int> labels) {
  if (f_vec.rank() != 2 || labels.size() != f_vec.dim(0)) {
    throw ShapeMismatch("positive_feature_weights: features " + to_string(f_vec.shape()) + " vs " +
                        std::to_string(labels.size()) + " labels");
  }
  Tensor probe = f_vec.detach(true);
  const HeadOutput head = net.forward_head(probe);
  // Samples do not interact in the head, so the gradient of the summed
  // true-class logits w.r.t. row i is the per-sample gradient.
  const Gradients grads = backward(ops::sum(ops::pick(head.logits, labels)));
  std::vector<double> w = grads.of(probe);
  const std::size_t n = f_vec.dim(0), d = f_vec.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &w[i * d];
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = std::max(row[j], 0.0);
      total += row[j];
    }
    if (total <= 0.0) {
      std::fill(row, row + d, 1.0);
      continue;
    }
    const double inv_mean = static_cast<double>(d) / total;
    for (std::size_t j = 0; j < d; ++j) row[j] *= inv_mean;
  }
  return Tensor::from(f_vec.shape(), std::move(w));
}

ClassPairMask ClassPairMask::build(int c1, int c2, std::span<const int> source_labels,
                                   std::span<const int> target_labels) {
  ClassPairMask m;
  m.c1 = c1;
  m.c2 = c2;
  const std::size_t ns = source_labels.size(), nt = target_labels.size();
  m.source_source.assign(ns * ns, 0.0);
  m.target_target.assign(nt * nt, 0.0);
  m.source_target.assign(ns * nt, 0.0);
  for (std::size_t i = 0; i < ns; ++i) {
    if (source_labels[i] != c1) continue;
    ++m.n_source_c1;
    for (std::size_t j = 0; j < ns; ++j)
      if (source_labels[j] == c1) m.source_source[i * ns + j] = 1.0;
    for (std::size_t j = 0; j < nt; ++j)
      if (target_labels[j] == c2) m.source_target[i * nt + j] = 1.0;
  }
  for (std::size_t i = 0; i < nt; ++i) {
    if (target_labels[i] != c2) continue;
    ++m.n_target_c2;
    for (std::size_t j = 0; j < nt; ++j)
      if (target_labels[j] == c2) m.target_target[i * nt + j] = 1.0;
  }
  return m;
}

KernelBlocks kernel_blocks(const Tensor& source_feats, const Tensor& target_feats, const KernelConfig& cfg,
                           double sigma) {
  return {rbf_kernel_matrix(source_feats, source_feats, cfg, sigma),
          rbf_kernel_matrix(target_feats, target_feats, cfg, sigma),
          rbf_kernel_matrix(source_feats, target_feats, cfg, sigma)};
}

Tensor class_conditional_discrepancy(int c1, int c2, const KernelBlocks& blocks,
                                     std::span<const int> source_labels, std::span<const int> target_labels) {
  if (blocks.source_target.dim(0) != source_labels.size() || blocks.source_target.dim(1) != target_labels.size()) {
    throw DimensionMismatch("class_conditional_discrepancy: kernel blocks " +
                            to_string(blocks.source_target.shape()) + " vs " +
                            std::to_string(source_labels.size()) + " source and " +
                            std::to_string(target_labels.size()) + " target labels");
  }
  const ClassPairMask mask = ClassPairMask::build(c1, c2, source_labels, target_labels);
  if (mask.n_source_c1 == 0) throw NoSamplesForClass(c1, NoSamplesForClass::Side::source);
  if (mask.n_target_c2 == 0) throw NoSamplesForClass(c2, NoSamplesForClass::Side::target);
  const Tensor ss = ops::masked_mean(blocks.source_source, mask.source_source);
  const Tensor tt = ops::masked_mean(blocks.target_target, mask.target_target);
  const Tensor st = ops::masked_mean(blocks.source_target, mask.source_target);
  return ops::sub(ops::add(ss, tt), ops::scale(st, 2.0));
}

Tensor class_conditional_discrepancy(int c1, int c2, const Tensor& source_feats, const Tensor& target_feats,
                                     std::span<const int> source_labels, std::span<const int> target_labels,
                                     const KernelConfig& cfg, double sigma) {
  return class_conditional_discrepancy(c1, c2, kernel_blocks(source_feats, target_feats, cfg, sigma),
                                       source_labels, target_labels);
}

Tensor scl(const KernelBlocks& blocks, std::span<const int> source_labels, std::span<const int> target_labels,
           std::span<const int> classes) {
  if (classes.empty()) throw NoEligibleClasses("scl: no classes to contrast");
  const auto c = static_cast<double>(classes.size());
  Tensor intra, inter;
  for (int c1 : classes)
    for (int c2 : classes) {
      Tensor d = class_conditional_discrepancy(c1, c2, blocks, source_labels, target_labels);
      Tensor& slot = c1 == c2 ? intra : inter;
      slot = slot.defined() ? ops::add(slot, d) : d;
    }
  Tensor out = ops::scale(intra, 1.0 / c);
  if (inter.defined()) out = ops::sub(out, ops::scale(inter, 1.0 / (c * (c - 1.0))));
  return out;
}

Tensor scl(const Tensor& source_feats, const Tensor& target_feats, std::span<const int> source_labels,
           std::span<const int> target_labels, std::span<const int> classes, const KernelConfig& cfg,
           double sigma) {
  return scl(kernel_blocks(source_feats, target_feats, cfg, sigma), source_labels, target_labels, classes);
}

MultilayerScl multilayer_scl(std::span<const Tensor> source_layers, std::span<const Tensor> target_layers,
                             std::span<const int> source_labels, std::span<const int> target_labels,
                             std::span<const int> classes, const KernelConfig& cfg,
                             std::optional<std::span<const double>> sigmas) {
  if (source_layers.size() != target_layers.size() || source_layers.empty()) {
    throw LayerCountMismatch("multilayer_scl: " + std::to_string(source_layers.size()) + " source layers vs " +
                             std::to_string(target_layers.size()) + " target layers");
  }
  if (sigmas && sigmas->size() != source_layers.size()) {
    throw LayerCountMismatch("multilayer_scl: " + std::to_string(sigmas->size()) + " bandwidths for " +
                             std::to_string(source_layers.size()) + " layers");
  }
  MultilayerScl out;
  for (std::size_t l = 0; l < source_layers.size(); ++l) {
    const double sigma = sigmas ? (*sigmas)[l] : resolve_bandwidth(cfg, source_layers[l], target_layers[l]);
    Tensor d = scl(source_layers[l], target_layers[l], source_labels, target_labels, classes, cfg, sigma);
    out.sigmas.push_back(sigma);
    out.total = out.total.defined() ? ops::add(out.total, d) : d;
    out.per_layer.push_back(std::move(d));
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || labels.size() != logits.dim(0)) {
    throw ShapeMismatch("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                        std::to_string(labels.size()) + " labels");
  }
  return ops::scale(ops::mean(ops::pick(ops::log_softmax(logits), labels)), -1.0);
}

namespace {

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw AlphaOutOfRange("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
}

}  // namespace

LossBreakdown total_loss(double l_ce, std::span<const double> per_layer_scl, double alpha) {
  check_alpha(alpha);
  LossBreakdown b;
  b.alpha = alpha;
  b.l_ce = l_ce;
  b.per_layer_scl.assign(per_layer_scl.begin(), per_layer_scl.end());
  b.l_scl = std::accumulate(per_layer_scl.begin(), per_layer_scl.end(), 0.0);
  b.total = (1.0 - alpha) * l_ce + alpha * b.l_scl;
  return b;
}

Objective total_loss(const Tensor& l_ce, const MultilayerScl& scl, double alpha) {
  check_alpha(alpha);
  std::vector<double> per_layer;
  for (const Tensor& t : scl.per_layer) per_layer.push_back(t.item());
  Objective obj;
  obj.breakdown = total_loss(l_ce.item(), per_layer, alpha);
  obj.total = ops::scale(l_ce, 1.0 - alpha);
  if (scl.total.defined()) obj.total = ops::add(obj.total, ops::scale(scl.total, alpha));
  // Keep the reported scalar identical to the differentiated one.
  obj.breakdown.total = obj.total.item();
  return obj;
}

}  // namespace fost
