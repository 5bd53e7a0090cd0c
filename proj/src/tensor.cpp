#include "fost/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "fost/errors.hpp"

namespace fost {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

void check_finite(std::span<const double> values, OpKind op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteEvaluation(std::string("non-finite value produced by ") + to_string(op));
    }
  }
}

}  // namespace

struct Tensor::Impl {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  std::unique_ptr<TapeNode> node;
};

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

const char* to_string(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::matmul: return "matmul";
    case OpKind::linear: return "linear";
    case OpKind::add_bias: return "add_bias";
    case OpKind::relu: return "relu";
    case OpKind::exp: return "exp";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::avg_pool2d: return "avg_pool2d";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::slice_channels: return "slice_channels";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::l2_normalize: return "l2_normalize";
    case OpKind::conv2d: return "conv2d";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::channel_affine: return "channel_affine";
    case OpKind::pick: return "pick";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::sq_dist: return "sq_dist";
    case OpKind::masked_mean: return "masked_mean";
    case OpKind::reshape: return "reshape";
  }
  return "unknown";
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeMismatch("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (fost::numel(shape) != values.size()) {
    throw ShapeMismatch("shape " + to_string(shape) + " does not match " +
                        std::to_string(values.size()) + " values");
  }
  check_finite(values, OpKind::leaf);
  auto impl = std::make_shared<Impl>();
  impl->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = fost::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() noexcept { return t_grad_enabled; }

Tensor Tensor::make_result(OpKind op, Shape shape, std::vector<double> values,
                           std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(values, op);
  auto impl = std::make_shared<Impl>();
  impl->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  const bool tracked = t_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
  if (tracked) {
    impl->requires_grad = true;
    impl->node = std::make_unique<TapeNode>(TapeNode{op, std::move(inputs), std::move(backward)});
  }
  return Tensor(std::move(impl));
}

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw ShapeMismatch("use of an undefined tensor");
  return *impl_;
}

std::uint64_t Tensor::id() const { return impl().id; }
const Shape& Tensor::shape() const { return impl().shape; }
std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}
std::size_t Tensor::numel() const { return impl().data.size(); }
std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw ShapeMismatch("only leaf tensors may be modified in place");
  return impl().data;
}
double Tensor::item() const {
  if (numel() != 1) throw NonScalarLoss("item() on tensor of shape " + to_string(shape()));
  return impl().data[0];
}
bool Tensor::requires_grad() const { return impl().requires_grad; }
bool Tensor::is_leaf() const { return impl().node == nullptr; }
const TapeNode* Tensor::node() const { return impl().node.get(); }
const std::optional<std::vector<double>>& Tensor::grad() const { return impl().grad; }
void Tensor::zero_grad() { impl().grad.reset(); }

Tensor Tensor::detach(bool requires_grad) const {
  return from(shape(), std::vector<double>(data().begin(), data().end()), requires_grad);
}

const std::vector<double>* Gradients::find(const Tensor& leaf) const {
  auto it = by_id_.find(leaf.id());
  return it == by_id_.end() ? nullptr : &it->second;
}

std::vector<double> Gradients::of(const Tensor& leaf) const {
  if (const auto* g = find(leaf)) return *g;
  return std::vector<double>(leaf.numel(), 0.0);
}

Gradients backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw NonScalarLoss("loss must be scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw DetachedGraph("loss does not depend on any tensor that requires a gradient");
  }

  // Collect every tracked tensor reachable from the loss.
  std::vector<Tensor::Impl*> order;
  std::unordered_set<const Tensor::Impl*> seen;
  std::vector<Tensor::Impl*> stack{loss.impl_.get()};
  seen.insert(loss.impl_.get());
  while (!stack.empty()) {
    Tensor::Impl* cur = stack.back();
    stack.pop_back();
    order.push_back(cur);
    if (!cur->node) continue;
    for (const Tensor& in : cur->node->inputs) {
      Tensor::Impl* p = in.impl_.get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Tensor::Impl* a, const Tensor::Impl* b) { return a->id > b->id; });

  std::unordered_map<const Tensor::Impl*, std::vector<double>> grads;
  grads.emplace(loss.impl_.get(), std::vector<double>{1.0});

  Gradients result;
  bool reached_leaf = false;
  for (Tensor::Impl* cur : order) {
    auto it = grads.find(cur);
    if (it == grads.end()) continue;
    if (!cur->node) {
      reached_leaf = true;
      cur->grad = it->second;
      result.by_id_.emplace(cur->id, std::move(it->second));
      grads.erase(it);
      continue;
    }
    std::vector<double> grad_out = std::move(it->second);
    grads.erase(it);

    const auto& inputs = cur->node->inputs;
    std::vector<std::vector<double>*> grad_in(inputs.size(), nullptr);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      Tensor::Impl* p = inputs[k].impl_.get();
      if (!p->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(p);
      if (inserted) slot->second.assign(p->data.size(), 0.0);
      grad_in[k] = &slot->second;
    }
    cur->node->backward(grad_out, grad_in);
  }
  if (!reached_leaf) {
    throw DetachedGraph("loss does not depend on any parameter");
  }
  return result;
}

}  // namespace fost
