#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace fost {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class OpKind : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  matmul,
  linear,
  add_bias,
  relu,
  exp,
  sum,
  mean,
  avg_pool2d,
  concat_channels,
  slice_channels,
  log_softmax,
  l2_normalize,
  conv2d,
  batch_norm,
  channel_affine,
  pick,
  gather_rows,
  sq_dist,
  masked_mean,
  reshape,
};

const char* to_string(OpKind op);

class Tensor;
class Gradients;
Gradients backward(const Tensor& loss);

/// Backward rule of one recorded operation. `grad_out` is the gradient of the
/// loss w.r.t. the op output; `grad_in[k]` is either null (input k does not
/// need a gradient) or a zero-initialised buffer sized like input k that the
/// rule accumulates into.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> grad_in)>;

/// One entry of the reverse-mode tape. Saved context lives in the captures of
/// `backward`.
struct TapeNode {
  OpKind op = OpKind::leaf;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

/// Dense row-major float64 array with optional gradient tracking.
///
/// A Tensor is a cheap shared handle. Values are fixed once an operation has
/// produced them; only leaves (parameters) are mutated, and only between
/// backward passes, by the optimizer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  std::uint64_t id() const;
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view for leaves only (optimizer updates, test fixtures).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool is_leaf() const;
  const TapeNode* node() const;

  /// Gradient stored on a leaf by the last backward pass that reached it.
  const std::optional<std::vector<double>>& grad() const;
  void zero_grad();

  /// Copy of the values as a new leaf with no history.
  Tensor detach(bool requires_grad = false) const;

  /// Internal: used by ops to build a result node.
  static Tensor make_result(OpKind op, Shape shape, std::vector<double> values,
                            std::vector<Tensor> inputs, BackwardFn backward);

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;

  friend class Gradients;
  friend Gradients backward(const Tensor& loss);
};

/// Result of a backward pass: gradient buffers keyed by leaf id.
class Gradients {
 public:
  const std::vector<double>* find(const Tensor& leaf) const;
  /// Gradient of `leaf`, or zeros if the loss does not depend on it.
  std::vector<double> of(const Tensor& leaf) const;
  std::size_t size() const noexcept { return by_id_.size(); }
  bool contains(const Tensor& leaf) const { return find(leaf) != nullptr; }

 private:
  std::unordered_map<std::uint64_t, std::vector<double>> by_id_;
  friend Gradients backward(const Tensor& loss);
};

/// While alive on a thread, operations on that thread record no tape nodes
/// and their results never require gradients. Nests.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

/// Reverse-mode sweep from a scalar loss. Visits every recorded node once in
/// reverse creation order (a valid reverse topological order since inputs are
/// always created before their consumers). Gradients of leaves with
/// requires_grad are returned and also stored on the leaves; intermediate
/// buffers are released.
Gradients backward(const Tensor& loss);

}  // namespace fost
