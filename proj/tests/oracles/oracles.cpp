#include "oracles.hpp"

#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <stdexcept>

namespace fost::oracle {

Matrix to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("to_matrix: rank-2 tensor expected");
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i * t.dim(1) + j);
  return m;
}

Tensor to_tensor(const Matrix& m) {
  std::vector<double> flat;
  for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor::from({m.size(), m.empty() ? 0 : m.front().size()}, std::move(flat));
}

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

double rbf(const std::vector<double>& a, const std::vector<double>& b, std::span<const double> multipliers,
           double sigma) {
  const double d2 = squared_distance(a, b);
  double total = 0.0;
  for (double m : multipliers) total += std::exp(-d2 / (2.0 * m * sigma * m * sigma));
  return total / static_cast<double>(multipliers.size());
}

std::optional<double> discrepancy(int c1, int c2, const Matrix& source, const Matrix& target,
                                  std::span<const int> source_labels, std::span<const int> target_labels,
                                  std::span<const double> multipliers, double sigma) {
  double ss = 0.0, tt = 0.0, st = 0.0;
  double nss = 0.0, ntt = 0.0, nst = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    for (std::size_t j = 0; j < source.size(); ++j) {
      if (source_labels[i] == c1 && source_labels[j] == c1) {
        ss += rbf(source[i], source[j], multipliers, sigma);
        nss += 1.0;
      }
    }
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    for (std::size_t j = 0; j < target.size(); ++j) {
      if (target_labels[i] == c2 && target_labels[j] == c2) {
        tt += rbf(target[i], target[j], multipliers, sigma);
        ntt += 1.0;
      }
    }
  }
  for (std::size_t i = 0; i < source.size(); ++i) {
    for (std::size_t j = 0; j < target.size(); ++j) {
      if (source_labels[i] == c1 && target_labels[j] == c2) {
        st += rbf(source[i], target[j], multipliers, sigma);
        nst += 1.0;
      }
    }
  }
  if (nss == 0.0 || ntt == 0.0) return std::nullopt;
  return ss / nss + tt / ntt - 2.0 * st / nst;
}

double structure_contrastive(const Matrix& source, const Matrix& target, std::span<const int> source_labels,
                             std::span<const int> target_labels, std::span<const int> classes,
                             std::span<const double> multipliers, double sigma) {
  double intra = 0.0, inter = 0.0;
  for (int c : classes) {
    for (int c2 : classes) {
      const double d = discrepancy(c, c2, source, target, source_labels, target_labels, multipliers, sigma).value();
      if (c == c2) {
        intra += d;
      } else {
        inter += d;
      }
    }
  }
  const double n = static_cast<double>(classes.size());
  double out = intra / n;
  if (classes.size() > 1) out -= inter / (n * (n - 1.0));
  return out;
}

double median_sigma(const Matrix& a, const Matrix& b) {
  Matrix all = a;
  all.insert(all.end(), b.begin(), b.end());
  std::vector<double> d;
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) d.push_back(squared_distance(all[i], all[j]));
  std::sort(d.begin(), d.end());
  const std::size_t n = d.size();
  const double med = n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
  return med > 0.0 ? std::sqrt(med) : 1.0;
}

double cosine_dissimilarity(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return 0.5 * (1.0 - dot / std::sqrt(na * nb));
}

std::vector<int> nearest_centers(const Matrix& features, const Matrix& centers) {
  std::vector<int> out;
  for (const auto& f : features) {
    int best = 0;
    double best_d = cosine_dissimilarity(f, centers[0]);
    for (std::size_t c = 1; c < centers.size(); ++c) {
      const double d = cosine_dissimilarity(f, centers[c]);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    out.push_back(best);
  }
  return out;
}

double chi_square_uniform(std::span<const std::size_t> counts) {
  double total = 0.0;
  for (std::size_t c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0.0;
  for (std::size_t c : counts) stat += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  return stat;
}

double chi_square_critical(std::size_t dof, double significance) {
  const boost::math::chi_squared dist(static_cast<double>(dof));
  return boost::math::quantile(boost::math::complement(dist, significance));
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, std::vector<double>(cols));
  for (auto& row : m)
    for (double& v : row) v = normal(rng);
  return m;
}

std::vector<int> random_labels(std::size_t n, int classes, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, classes - 1);
  std::vector<int> out(n);
  for (int& y : out) y = pick(rng);
  return out;
}

}  // namespace fost::oracle
