#pragma once

// Naive reference implementations used to check the library. Everything here
// is written as plain loops over std::vector, independent of the tape.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fost/random.hpp"
#include "fost/tensor.hpp"

namespace fost::oracle {

using Matrix = std::vector<std::vector<double>>;

Matrix to_matrix(const Tensor& t);
Tensor to_tensor(const Matrix& m);

double squared_distance(const std::vector<double>& a, const std::vector<double>& b);
double rbf(const std::vector<double>& a, const std::vector<double>& b, std::span<const double> multipliers,
           double sigma);

// Masked triple sum; nullopt when class c1 has no source sample or c2 no
// target sample.
std::optional<double> discrepancy(int c1, int c2, const Matrix& source, const Matrix& target,
                                  std::span<const int> source_labels, std::span<const int> target_labels,
                                  std::span<const double> multipliers, double sigma);

// Enumerates every ordered (c, c') pair of `classes` explicitly.
double structure_contrastive(const Matrix& source, const Matrix& target, std::span<const int> source_labels,
                             std::span<const int> target_labels, std::span<const int> classes,
                             std::span<const double> multipliers, double sigma);

// sqrt of the median squared distance over distinct pairs of the pooled rows.
double median_sigma(const Matrix& a, const Matrix& b);

double cosine_dissimilarity(const std::vector<double>& a, const std::vector<double>& b);

// Nearest center by cosine dissimilarity, lowest index on ties.
std::vector<int> nearest_centers(const Matrix& features, const Matrix& centers);

// Pearson statistic against a uniform expectation.
double chi_square_uniform(std::span<const std::size_t> counts);
// Upper critical value of the chi-square distribution.
double chi_square_critical(std::size_t dof, double significance);

// Gaussian matrix helpers for random instances.
Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0);
std::vector<int> random_labels(std::size_t n, int classes, Rng& rng);

}  // namespace fost::oracle
