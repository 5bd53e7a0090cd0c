#include "fost/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "fost/errors.hpp"
#include "fost/ops.hpp"

namespace fost {

namespace {

constexpr std::uint64_t kNetSalt = 0x6e6574;
constexpr std::uint64_t kBatchSalt = 0x62617463;
constexpr std::size_t kEvalChunk = 128;

std::vector<std::vector<std::size_t>> index_by_class(const std::vector<Sample>& samples, std::size_t classes) {
  std::vector<std::vector<std::size_t>> out(classes);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int c = samples[i].label;
    if (c >= 0 && static_cast<std::size_t>(c) < classes) out[c].push_back(i);
  }
  return out;
}

// First k entries of a partial Fisher-Yates shuffle of `pool`.
template <typename T>
std::vector<T> draw_distinct(std::vector<T> pool, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

std::vector<int> pick_classes(std::span<const int> eligible, std::size_t slots, Rng& rng) {
  if (eligible.size() >= slots) return draw_distinct(std::vector<int>(eligible.begin(), eligible.end()), slots, rng);
  std::vector<int> out = draw_distinct(std::vector<int>(eligible.begin(), eligible.end()), eligible.size(), rng);
  std::uniform_int_distribution<std::size_t> any(0, eligible.size() - 1);
  while (out.size() < slots) out.push_back(eligible[any(rng)]);
  return out;
}

std::vector<int> distinct_sorted(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

bool is_conv_parameter(const StructNet& net, std::size_t index) { return index < net.conv_parameter_count(); }

template <typename F>
auto guard_divergence(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const NonFiniteEvaluation& e) {
    throw NumericalDivergence(std::string("training diverged: ") + e.what());
  }
}

// Source-only batch over all classes plus a uniform target batch whose only
// role is to feed the target normalisation statistics.
MiniBatch source_only_sample(const std::vector<std::vector<std::size_t>>& source_by_class,
                             std::size_t target_count, const TrainConfig& cfg, Rng& rng) {
  std::vector<int> all(source_by_class.size());
  std::iota(all.begin(), all.end(), 0);
  MiniBatch b;
  for (int c : pick_classes(all, cfg.batch_classes, rng)) {
    const auto& pool = source_by_class[c];
    if (pool.size() < cfg.per_class_per_domain) {
      throw InsufficientSamples("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                                " source samples");
    }
    for (std::size_t i : draw_distinct(pool, cfg.per_class_per_domain, rng)) {
      b.source_indices.push_back(i);
      b.source_labels.push_back(c);
    }
  }
  std::vector<std::size_t> targets(target_count);
  std::iota(targets.begin(), targets.end(), std::size_t{0});
  b.target_indices = draw_distinct(std::move(targets), std::min(target_count, b.source_indices.size()), rng);
  return b;
}

struct Clustering {
  PseudoLabels pseudo;
  Centers centers;
  std::vector<std::size_t> sample_index;  // clustered row -> target sample index
  double accuracy = 0.0;
};

std::vector<std::size_t> nonzero_rows(const Tensor& feats) {
  const std::size_t n = feats.dim(0), d = feats.dim(1);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += feats.at(i * d + j) * feats.at(i * d + j);
    if (s > 0.0) rows.push_back(i);
  }
  return rows;
}

Tensor rows_of(const Tensor& feats, const std::vector<std::size_t>& rows) {
  const NoGradGuard no_grad;
  return ops::gather_rows(feats, rows);
}

Clustering cluster_target(StructNet& net, const Datasets& data, const TrainConfig& cfg,
                          const Centers* warm_start, std::size_t classes) {
  const Tensor src = extract_features(net, data.source_train, cfg.cluster_layer);
  const Tensor tgt = extract_features(net, data.target_train, cfg.cluster_layer);

  const std::vector<std::size_t> src_rows = nonzero_rows(src);
  std::vector<int> src_labels;
  for (std::size_t i : src_rows) src_labels.push_back(data.source_train[i].label);
  if (src_rows.empty()) throw MissingClass("every source feature is zero");

  Clustering out;
  const Centers init = warm_start ? *warm_start
                                  : source_class_centers(rows_of(src, src_rows), src_labels, classes);
  out.sample_index = nonzero_rows(tgt);
  if (out.sample_index.empty()) throw ZeroVector("every target feature is zero");
  ClusterState state = spherical_kmeans(rows_of(tgt, out.sample_index), init, cfg.kmeans);
  out.pseudo = assign_pseudo_labels(state, cfg.thresholds);
  out.centers = state.centers;

  std::size_t correct = 0;
  for (std::size_t r = 0; r < out.sample_index.size(); ++r) {
    if (out.pseudo.retained[r] && *out.pseudo.labels[r] == data.target_train[out.sample_index[r]].label) ++correct;
  }
  const std::size_t kept = out.pseudo.retained_count();
  out.accuracy = kept ? static_cast<double>(correct) / static_cast<double>(kept) : 0.0;
  return out;
}

// Populates both domains' running statistics from the training sets before
// the first clustering pass.
void calibrate_norms(StructNet& net, const Datasets& data) {
  const NoGradGuard no_grad;
  for (const auto* set : {&data.source_train, &data.target_train}) {
    if (set->empty()) continue;
    const DomainId domain = set->front().domain;
    for (std::size_t begin = 0; begin < set->size(); begin += kEvalChunk) {
      std::vector<std::size_t> idx(std::min(kEvalChunk, set->size() - begin));
      std::iota(idx.begin(), idx.end(), begin);
      net.forward_features(stack_images(*set, idx), domain, Mode::training);
    }
  }
}

}  // namespace

const char* to_string(ClusterLayer layer) { return layer == ClusterLayer::f_vec ? "f_vec" : "last_fc"; }

ClusterLayer parse_cluster_layer(const std::string& text) {
  if (text == "f_vec") return ClusterLayer::f_vec;
  if (text == "last_fc") return ClusterLayer::last_fc;
  throw ConfigError("unknown cluster layer '" + text + "' (expected f_vec or last_fc)");
}

const char* to_string(TargetWeighting mode) {
  return mode == TargetWeighting::none ? "none" : "pseudo_label";
}

TargetWeighting parse_target_weighting(const std::string& text) {
  if (text == "none") return TargetWeighting::none;
  if (text == "pseudo_label") return TargetWeighting::pseudo_label;
  throw ConfigError("unknown target weighting '" + text + "' (expected none or pseudo_label)");
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw AlphaOutOfRange("alpha must lie in [0, 1]");
  if (!(eta0_conv > 0.0) || !(eta0_fc > 0.0)) throw InvalidConfig("initial learning rates must be positive");
  if (!(a >= 0.0) || !(b >= 0.0)) throw InvalidConfig("schedule constants must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidConfig("momentum must lie in [0, 1)");
  if (epochs < 1 || iterations_per_epoch < 1) throw InvalidConfig("epochs and iterations must be at least 1");
  if (batch_classes < 1 || per_class_per_domain < 1) throw InvalidConfig("batch sizes must be at least 1");
  if (thresholds.n0 < 1) throw InvalidConfig("n0 must be at least 1");
  if (kmeans.max_iters < 1) throw InvalidConfig("kmeans max_iters must be at least 1");
  thresholds.validate();
  kernel.validate();
}

double lr_schedule(double eta0, double p, double a, double b) {
  if (!(p >= 0.0 && p <= 1.0)) throw ProgressOutOfRange("progress must lie in [0, 1], got " + std::to_string(p));
  return eta0 / std::pow(1.0 + a * p, b);
}

MiniBatch class_aware_sample(std::span<const int> eligible,
                             const std::vector<std::vector<std::size_t>>& source_index_by_class,
                             const std::vector<std::vector<std::size_t>>& target_index_by_class,
                             const TrainConfig& cfg, Rng& rng) {
  if (eligible.empty()) throw NoEligibleClasses("class_aware_sample: no eligible classes");
  const std::size_t k = cfg.per_class_per_domain;
  for (int c : eligible) {
    if (c < 0 || static_cast<std::size_t>(c) >= source_index_by_class.size() ||
        static_cast<std::size_t>(c) >= target_index_by_class.size()) {
      throw LabelOutOfRange("class_aware_sample: class " + std::to_string(c));
    }
    if (source_index_by_class[c].size() < k) {
      throw InsufficientSamples("class " + std::to_string(c) + " has too few source samples");
    }
    if (target_index_by_class[c].size() < k) {
      throw InsufficientSamples("class " + std::to_string(c) + " has too few target samples");
    }
  }
  MiniBatch b;
  const std::vector<int> slots = pick_classes(eligible, cfg.batch_classes, rng);
  for (int c : slots) {
    for (std::size_t i : draw_distinct(source_index_by_class[c], k, rng)) {
      b.source_indices.push_back(i);
      b.source_labels.push_back(c);
    }
    for (std::size_t i : draw_distinct(target_index_by_class[c], k, rng)) {
      b.target_indices.push_back(i);
      b.target_labels.push_back(c);
    }
  }
  b.classes = distinct_sorted(slots);
  return b;
}

void sgd_momentum_step(std::span<Tensor> params, const Gradients& grads, std::span<const double> lrs,
                       double momentum, SgdState& state) {
  if (lrs.size() != params.size()) throw DimensionMismatch("sgd_momentum_step: one learning rate per parameter");
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const Tensor& p : params) state.velocity.emplace_back(p.numel(), 0.0);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::vector<double>* g = grads.find(params[k]);
    std::vector<double>& v = state.velocity[k];
    std::span<double> theta = params[k].mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] - lrs[k] * (g ? (*g)[i] : 0.0);
      theta[i] += v[i];
    }
  }
}

BatchObjective batch_objective(StructNet& net, const BatchData& batch, const TrainConfig& cfg,
                               const LossConstants* fixed) {
  BatchObjective out;
  const FeatureBundle src = net.forward_features(batch.source_images, DomainId::source, Mode::training);
  const Tensor ce = cross_entropy(src.logits, batch.source_labels);

  if (batch.classes.empty() || cfg.alpha == 0.0) {
    if (batch.target_images.defined()) {
      const NoGradGuard no_grad;
      net.forward_features(batch.target_images, DomainId::target, Mode::training);
    }
    out.objective = total_loss(ce, MultilayerScl{}, cfg.alpha);
    return out;
  }

  const FeatureBundle tgt = net.forward_features(batch.target_images, DomainId::target, Mode::training);
  std::vector<Tensor> source_layers = src.fc_features;
  if (fixed && fixed->positive_weights.defined()) {
    out.constants.positive_weights = fixed->positive_weights;
  } else if (cfg.use_positive_weights) {
    out.constants.positive_weights = positive_feature_weights(net, src.f_vec, batch.source_labels);
  }
  if (out.constants.positive_weights.defined()) {
    source_layers = net.forward_head(ops::mul(src.f_vec, out.constants.positive_weights)).fc_features;
  }

  std::vector<Tensor> target_layers = tgt.fc_features;
  if (fixed && fixed->target_weights.defined()) {
    out.constants.target_weights = fixed->target_weights;
  } else if (cfg.use_positive_weights && cfg.target_weighting == TargetWeighting::pseudo_label) {
    out.constants.target_weights = positive_feature_weights(net, tgt.f_vec, batch.target_labels);
  }
  if (out.constants.target_weights.defined()) {
    target_layers = net.forward_head(ops::mul(tgt.f_vec, out.constants.target_weights)).fc_features;
  }

  std::optional<std::span<const double>> sigmas;
  if (fixed && !fixed->sigmas.empty()) sigmas = std::span<const double>(fixed->sigmas);
  const MultilayerScl scl_terms = multilayer_scl(source_layers, target_layers, batch.source_labels,
                                                 batch.target_labels, batch.classes, cfg.kernel, sigmas);
  out.constants.sigmas = scl_terms.sigmas;
  out.objective = total_loss(ce, scl_terms, cfg.alpha);
  return out;
}

Tensor extract_features(StructNet& net, const std::vector<Sample>& samples, ClusterLayer layer) {
  if (samples.empty()) throw EmptyTestSet("extract_features: no samples");
  const NoGradGuard no_grad;
  const DomainId domain = samples.front().domain;
  std::vector<double> values;
  std::size_t dim = 0;
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalChunk) {
    std::vector<std::size_t> idx(std::min(kEvalChunk, samples.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const FeatureBundle fb = net.forward_features(stack_images(samples, idx), domain, Mode::evaluation);
    const Tensor& f = layer == ClusterLayer::f_vec ? fb.f_vec : fb.fc_features.back();
    dim = f.dim(1);
    values.insert(values.end(), f.data().begin(), f.data().end());
  }
  return Tensor::from({samples.size(), dim}, std::move(values));
}

std::vector<int> predict(StructNet& net, const std::vector<Sample>& samples) {
  const NoGradGuard no_grad;
  std::vector<int> out;
  out.reserve(samples.size());
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalChunk) {
    std::vector<std::size_t> idx(std::min(kEvalChunk, samples.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    const DomainId domain = samples[begin].domain;
    const Tensor logits = net.forward_features(stack_images(samples, idx), domain, Mode::evaluation).logits;
    const std::size_t c = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = logits.data().subspan(r * c, c);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double evaluate(StructNet& net, const std::vector<Sample>& test_set) {
  if (test_set.empty()) throw EmptyTestSet("evaluate: empty test set");
  const std::vector<int> pred = predict(net, test_set);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test_set[i].label;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& cfg, const Datasets& data,
                  const EpochCallback& on_epoch) {
  net_cfg.validate();
  cfg.validate();
  if (data.source_train.empty() || data.target_train.empty()) throw EmptySplit("training sets must be non-empty");
  const std::size_t classes = net_cfg.num_classes;

  TrainResult result{StructNet(net_cfg, mix_seed(cfg.seed, kNetSalt)), {}, {}};
  StructNet& net = result.net;
  Rng rng(mix_seed(cfg.seed, kBatchSalt));
  SgdState sgd;
  std::vector<double> lrs(net.parameters().size());

  const auto source_by_class = index_by_class(data.source_train, classes);
  std::vector<std::size_t> source_counts;
  for (const auto& v : source_by_class) source_counts.push_back(v.size());

  calibrate_norms(net, data);

  const double total_iters = static_cast<double>(cfg.epochs * cfg.iterations_per_epoch);
  std::optional<Centers> previous_centers;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochReport report;
    report.epoch = epoch + 1;

    // Clustering always runs so that pseudo-label diagnostics are reported;
    // with alpha = 0 its output is never consumed.
    std::vector<int> eligible;
    std::vector<std::vector<std::size_t>> target_by_class(classes);
    try {
      const Centers* warm = cfg.warm_start_centers && previous_centers ? &*previous_centers : nullptr;
      Clustering cl = cluster_target(net, data, cfg, warm, classes);
      previous_centers = cl.centers;
      report.pseudo_label_acc = cl.accuracy;
      report.n_retained = cl.pseudo.retained_count();
      for (std::size_t r = 0; r < cl.sample_index.size(); ++r) {
        if (cl.pseudo.retained[r]) target_by_class[*cl.pseudo.labels[r]].push_back(cl.sample_index[r]);
      }
      for (int c : eligible_classes(cl.pseudo, cfg.thresholds.n0, source_counts)) {
        if (target_by_class[c].size() >= cfg.per_class_per_domain &&
            source_by_class[c].size() >= cfg.per_class_per_domain) {
          eligible.push_back(c);
        }
      }
      if (eligible.empty()) throw NoEligibleClasses("no class has enough retained samples for a batch");
    } catch (const NoEligibleClasses& e) {
      eligible.clear();
      if (cfg.alpha > 0.0) {
        result.warnings.push_back("epoch " + std::to_string(epoch + 1) + ": " + e.what() +
                                  "; contrastive term skipped");
      }
    } catch (const Error& e) {
      eligible.clear();
      if (cfg.alpha > 0.0) {
        result.warnings.push_back("epoch " + std::to_string(epoch + 1) + ": clustering failed (" + e.what() +
                                  "); contrastive term skipped");
      }
    }
    report.n_eligible_classes = eligible.size();
    const bool contrastive = cfg.alpha > 0.0 && !eligible.empty() && epoch >= cfg.contrastive_warmup_epochs;

    double sum_ce = 0.0, sum_scl = 0.0, sum_total = 0.0;
    std::vector<double> sum_layers(net_cfg.fc_layers(), 0.0);
    for (std::size_t it = 0; it < cfg.iterations_per_epoch; ++it) {
      const double p = static_cast<double>(epoch * cfg.iterations_per_epoch + it) / total_iters;
      const double lr_conv = lr_schedule(cfg.eta0_conv, p, cfg.a, cfg.b);
      const double lr_fc = lr_schedule(cfg.eta0_fc, p, cfg.a, cfg.b);
      for (std::size_t k = 0; k < lrs.size(); ++k) lrs[k] = is_conv_parameter(net, k) ? lr_conv : lr_fc;
      report.lr = lr_conv;

      const MiniBatch mb = contrastive
                               ? class_aware_sample(eligible, source_by_class, target_by_class, cfg, rng)
                               : source_only_sample(source_by_class, data.target_train.size(), cfg, rng);
      BatchData batch;
      batch.source_images = stack_images(data.source_train, mb.source_indices);
      batch.source_labels = mb.source_labels;
      batch.target_images = stack_images(data.target_train, mb.target_indices);
      batch.target_labels = mb.target_labels;
      if (contrastive) batch.classes = mb.classes;

      guard_divergence([&] {
        const BatchObjective bo = batch_objective(net, batch, cfg);
        const Gradients grads = backward(bo.objective.total);
        sgd_momentum_step(net.parameters(), grads, lrs, cfg.momentum, sgd);
        const LossBreakdown& lb = bo.objective.breakdown;
        sum_ce += lb.l_ce;
        sum_scl += lb.l_scl;
        sum_total += lb.total;
        for (std::size_t l = 0; l < lb.per_layer_scl.size() && l < sum_layers.size(); ++l) {
          sum_layers[l] += lb.per_layer_scl[l];
        }
        return 0;
      });
    }
    for (const Tensor& p : net.parameters()) {
      for (double v : p.data())
        if (!std::isfinite(v)) throw NumericalDivergence("non-finite parameter after epoch " + std::to_string(epoch + 1));
    }

    const double iters = static_cast<double>(cfg.iterations_per_epoch);
    report.loss.alpha = cfg.alpha;
    report.loss.l_ce = sum_ce / iters;
    report.loss.l_scl = sum_scl / iters;
    report.loss.total = sum_total / iters;
    for (double& s : sum_layers) s /= iters;
    report.loss.per_layer_scl = sum_layers;
    report.target_acc = data.target_test.empty() ? 0.0 : evaluate(net, data.target_test);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.reports.push_back(report);
    if (on_epoch) on_epoch(report);
  }
  return result;
}

}  // namespace fost
