#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fost/tensor.hpp"

// Differentiable operations. Every function checks its shape contract and
// throws ShapeMismatch naming both offending shapes.
namespace fost::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Hadamard product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

/// (m x k) * (k x n).
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (n x in), weight (out x in), bias (out) -> x * weight^T + bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Broadcast `bias` over rows of a (n x d) tensor or over the channel axis of
/// an (N, C, H, W) tensor.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Adaptive average pooling of (N, C, H, W) to (N, C, out_h, out_w). Output
/// cell i covers input rows [floor(i*H/out_h), ceil((i+1)*H/out_h)).
Tensor avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Concatenate along axis 1. All other dimensions must agree.
Tensor concat_channels(std::span<const Tensor> parts);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count);
std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> sizes);

/// Row-wise log-softmax of (n x c), max-subtracted.
Tensor log_softmax(const Tensor& x);
/// Row-wise L2 normalisation; a rank-1 tensor is treated as one row.
Tensor l2_normalize(const Tensor& x);

/// Same-padded stride-1 convolution. x (N, Cin, H, W), weight (Cout, Cin, K, K)
/// with odd K, bias (Cout).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> variance;  // biased (divides by count)
};

/// Per-channel standardisation with batch statistics over every axis except
/// axis 1. Accepts (N, C) or (N, C, H, W). Writes the statistics to `stats`.
Tensor batch_norm(const Tensor& x, double epsilon, ChannelStats* stats = nullptr);

/// y[:, c, ...] = x[:, c, ...] * scale[c] + shift[c] with constant scale/shift.
Tensor channel_affine(const Tensor& x, std::span<const double> scale, std::span<const double> shift);

/// out[i] = x[i, index[i]] for x of shape (n x c).
Tensor pick(const Tensor& x, std::span<const int> index);
/// Rows of x (axis 0) selected in the given order.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Pairwise squared Euclidean distances between rows: (n x d), (m x d) -> (n x m).
Tensor sq_dist(const Tensor& a, const Tensor& b);
/// sum(x * mask) / sum(mask) for a constant mask of x's size. Requires
/// sum(mask) > 0.
Tensor masked_mean(const Tensor& x, std::span<const double> mask);

Tensor reshape(const Tensor& x, Shape shape);
/// (N, ...) -> (N, rest).
Tensor flatten(const Tensor& x);

/// Records ReLU activation patterns on one evaluation and replays them on the
/// following ones. Finite-difference probes then differentiate the locally
/// linear piece the backward pass sees, instead of straddling a kink.
/// Confined to the creating thread; at most one may be active per thread.
class ReluPatternLock {
 public:
  ReluPatternLock();
  ~ReluPatternLock();
  ReluPatternLock(const ReluPatternLock&) = delete;
  ReluPatternLock& operator=(const ReluPatternLock&) = delete;

  /// Stop recording; later evaluations replay the recorded masks.
  void lock();
  /// Reset the replay cursor. Call before every replayed evaluation.
  void rewind() { cursor_ = 0; }
  std::size_t recorded() const noexcept { return masks_.size(); }

  // Used by relu().
  std::vector<unsigned char> next_mask(std::span<const double> input);

 private:
  bool locked_ = false;
  std::size_t cursor_ = 0;
  std::vector<std::vector<unsigned char>> masks_;
};

}  // namespace fost::ops
