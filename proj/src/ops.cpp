#include "fost/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Core>

#include "fost/errors.hpp"

namespace fost::ops {

namespace {

thread_local ReluPatternLock* t_relu_lock = nullptr;

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeMismatch(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                      to_string(b));
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                        to_string(x.shape()));
  }
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch(op, a.shape(), b.shape());
}

std::vector<double> copy_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Inner size of an (N, C, ...) tensor: product of the dimensions after axis 1.
std::size_t inner_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(OpKind::add, a.shape(), std::move(out), {a, b},
                             [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                               for (auto* buf : gi) {
                                 if (!buf) continue;
                                 for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
                               }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_result(OpKind::sub, a.shape(), std::move(out), {a, b},
                             [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                               if (gi[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                               if (gi[1])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(OpKind::mul, a.shape(), std::move(out), {a, b},
                             [a, b](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                               auto x = a.data(), y = b.data();
                               if (gi[0])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * y[i];
                               if (gi[1])
                                 for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * x[i];
                             });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out = copy_of(a);
  for (double& v : out) v *= factor;
  return Tensor::make_result(OpKind::scale, a.shape(), std::move(out), {a},
                             [factor](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
                             });
}

Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out = copy_of(a);
  for (double& v : out) v += offset;
  return Tensor::make_result(OpKind::add_scalar, a.shape(), std::move(out), {a},
                             [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                             });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n, 0.0);
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* yr = &y[p * n];
      double* o = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += xv * yr[j];
    }
  return Tensor::make_result(
      OpKind::matmul, {m, n}, std::move(out), {a, b},
      [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>* const> gi) {
        auto x = a.data(), y = b.data();
        if (gi[0]) {
          auto& ga = *gi[0];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (gi[1]) {
          auto& gb = *gi[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double xv = x[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += xv * g[i * n + j];
            }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  require_rank("linear", bias, 1);
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) mismatch("linear", x.shape(), weight.shape());
  if (bias.dim(0) != out_dim) mismatch("linear", weight.shape(), bias.shape());
  std::vector<double> out(n * out_dim);
  auto xv = x.data(), wv = weight.data(), bv = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = bv[o];
      const double* xr = &xv[i * in];
      const double* wr = &wv[o * in];
      for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
      out[i * out_dim + o] = acc;
    }
  return Tensor::make_result(
      OpKind::linear, {n, out_dim}, std::move(out), {x, weight, bias},
      [x, weight, n, in, out_dim](std::span<const double> g, std::span<std::vector<double>* const> gi) {
        auto xv = x.data(), wv = weight.data();
        if (gi[0]) {
          auto& gx = *gi[0];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out_dim; ++o) {
              const double go = g[i * out_dim + o];
              const double* wr = &wv[o * in];
              double* gr = &gx[i * in];
              for (std::size_t p = 0; p < in; ++p) gr[p] += go * wr[p];
            }
        }
        if (gi[1]) {
          auto& gw = *gi[1];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out_dim; ++o) {
              const double go = g[i * out_dim + o];
              const double* xr = &xv[i * in];
              double* gr = &gw[o * in];
              for (std::size_t p = 0; p < in; ++p) gr[p] += go * xr[p];
            }
        }
        if (gi[2]) {
          auto& gb = *gi[2];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[i * out_dim + o];
        }
      });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  if (x.rank() < 2 || x.dim(1) != bias.dim(0)) mismatch("add_bias", x.shape(), bias.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_size(x.shape());
  std::vector<double> out = copy_of(x);
  auto bv = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* o = &out[(i * c + ch) * inner];
      for (std::size_t p = 0; p < inner; ++p) o[p] += bv[ch];
    }
  return Tensor::make_result(
      OpKind::add_bias, x.shape(), std::move(out), {x, bias},
      [n, c, inner](std::span<const double> g, std::span<std::vector<double>* const> gi) {
        if (gi[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
        if (gi[1]) {
          auto& gb = *gi[1];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double* gr = &g[(i * c + ch) * inner];
              double acc = 0.0;
              for (std::size_t p = 0; p < inner; ++p) acc += gr[p];
              gb[ch] += acc;
            }
        }
      });
}

ReluPatternLock::ReluPatternLock() {
  if (t_relu_lock) throw Error("a ReluPatternLock is already active on this thread");
  t_relu_lock = this;
}

ReluPatternLock::~ReluPatternLock() { t_relu_lock = nullptr; }

void ReluPatternLock::lock() {
  locked_ = true;
  cursor_ = 0;
}

std::vector<unsigned char> ReluPatternLock::next_mask(std::span<const double> input) {
  if (!locked_) {
    std::vector<unsigned char> mask(input.size());
    for (std::size_t i = 0; i < input.size(); ++i) mask[i] = input[i] > 0.0;
    masks_.push_back(mask);
    return mask;
  }
  if (cursor_ >= masks_.size() || masks_[cursor_].size() != input.size()) {
    throw ShapeMismatch("relu pattern replay diverged from the recorded evaluation");
  }
  return masks_[cursor_++];
}

Tensor relu(const Tensor& x) {
  auto in = x.data();
  std::vector<unsigned char> mask;
  if (t_relu_lock) {
    mask = t_relu_lock->next_mask(in);
  } else {
    mask.resize(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) mask[i] = in[i] > 0.0;
  }
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = mask[i] ? in[i] : 0.0;
  return Tensor::make_result(OpKind::relu, x.shape(), std::move(out), {x},
                             [mask = std::move(mask)](std::span<const double> g,
                                                      std::span<std::vector<double>* const> gi) {
                               auto& gx = *gi[0];
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (mask[i]) gx[i] += g[i];
                             });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out = copy_of(x);
  for (double& v : out) v = std::exp(v);
  std::vector<double> saved = out;
  return Tensor::make_result(OpKind::exp, x.shape(), std::move(out), {x},
                             [saved = std::move(saved)](std::span<const double> g,
                                                        std::span<std::vector<double>* const> gi) {
                               auto& gx = *gi[0];
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * saved[i];
                             });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return Tensor::make_result(OpKind::sum, {1}, {acc}, {x},
                             [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                               for (double& v : *gi[0]) v += g[0];
                             });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return Tensor::make_result(OpKind::mean, {1}, {acc * inv}, {x},
                             [inv](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                               for (double& v : *gi[0]) v += g[0] * inv;
                             });
}

namespace {

struct PoolWindows {
  std::vector<std::size_t> begin, end;
};

PoolWindows adaptive_windows(std::size_t in, std::size_t out) {
  PoolWindows w;
  w.begin.resize(out);
  w.end.resize(out);
  for (std::size_t i = 0; i < out; ++i) {
    w.begin[i] = (i * in) / out;
    w.end[i] = ((i + 1) * in + out - 1) / out;
  }
  return w;
}

}  // namespace

Tensor avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank("avg_pool2d", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) {
    mismatch("avg_pool2d", x.shape(), Shape{n, c, out_h, out_w});
  }
  auto rows = adaptive_windows(h, out_h);
  auto cols = adaptive_windows(w, out_w);
  std::vector<double> out(n * c * out_h * out_w);
  auto in = x.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = &in[plane * h * w];
    double* dst = &out[plane * out_h * out_w];
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        double acc = 0.0;
        for (std::size_t r = rows.begin[i]; r < rows.end[i]; ++r)
          for (std::size_t s = cols.begin[j]; s < cols.end[j]; ++s) acc += src[r * w + s];
        const double area =
            static_cast<double>((rows.end[i] - rows.begin[i]) * (cols.end[j] - cols.begin[j]));
        dst[i * out_w + j] = acc / area;
      }
  }
  return Tensor::make_result(
      OpKind::avg_pool2d, {n, c, out_h, out_w}, std::move(out), {x},
      [n, c, h, w, out_h, out_w, rows, cols](std::span<const double> g,
                                             std::span<std::vector<double>* const> gi) {
        auto& gx = *gi[0];
        for (std::size_t plane = 0; plane < n * c; ++plane) {
          double* dst = &gx[plane * h * w];
          const double* src = &g[plane * out_h * out_w];
          for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t j = 0; j < out_w; ++j) {
              const double area =
                  static_cast<double>((rows.end[i] - rows.begin[i]) * (cols.end[j] - cols.begin[j]));
              const double share = src[i * out_w + j] / area;
              for (std::size_t r = rows.begin[i]; r < rows.end[i]; ++r)
                for (std::size_t s = cols.begin[j]; s < cols.end[j]; ++s) dst[r * w + s] += share;
            }
        }
      });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  if (first.size() < 2) mismatch("concat_channels", first, first);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || s[0] != first[0] || inner_size(s) != inner_size(first) ||
        !std::equal(s.begin() + 2, s.end(), first.begin() + 2)) {
      mismatch("concat_channels", first, s);
    }
    widths.push_back(s[1]);
    total += s[1];
  }
  const std::size_t n = first[0], inner = inner_size(first);
  Shape out_shape = first;
  out_shape[1] = total;
  std::vector<double> out(n * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    const std::size_t block = widths[k] * inner;
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(&src[i * block], block, &out[(i * total + offset) * inner]);
    offset += widths[k];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make_result(
      OpKind::concat_channels, std::move(out_shape), std::move(out), std::move(inputs),
      [n, total, inner, widths](std::span<const double> g, std::span<std::vector<double>* const> gi) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const std::size_t block = widths[k] * inner;
          if (gi[k]) {
            auto& dst = *gi[k];
            for (std::size_t i = 0; i < n; ++i) {
              const double* src = &g[(i * total + offset) * inner];
              for (std::size_t p = 0; p < block; ++p) dst[i * block + p] += src[p];
            }
          }
          offset += widths[k];
        }
      });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() < 2 || count == 0 || begin + count > x.dim(1)) {
    throw ShapeMismatch("slice_channels: range [" + std::to_string(begin) + ", " +
                        std::to_string(begin + count) + ") invalid for shape " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_size(x.shape());
  Shape out_shape = x.shape();
  out_shape[1] = count;
  std::vector<double> out(n * count * inner);
  auto src = x.data();
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(&src[(i * c + begin) * inner], count * inner, &out[i * count * inner]);
  return Tensor::make_result(
      OpKind::slice_channels, std::move(out_shape), std::move(out), {x},
      [n, c, inner, begin, count](std::span<const double> g, std::span<std::vector<double>* const> gi) {
        auto& gx = *gi[0];
        for (std::size_t i = 0; i < n; ++i) {
          double* dst = &gx[(i * c + begin) * inner];
          const double* s = &g[i * count * inner];
          for (std::size_t p = 0; p < count * inner; ++p) dst[p] += s[p];
        }
      });
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> sizes) {
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (x.rank() < 2 || total != x.dim(1)) {
    throw ShapeMismatch("split_channels: sizes sum to " + std::to_string(total) + " but shape is " +
                        to_string(x.shape()));
  }
  std::vector<Tensor> parts;
  std::size_t begin = 0;
  for (std::size_t s : sizes) {
    parts.push_back(slice_channels(x, begin, s));
    begin += s;
  }
  return parts;
}

Tensor log_softmax(const Tensor& x) {
  require_rank("log_softmax", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  auto in = x.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = &in[i * c];
    const double mx = *std::max_element(r, r + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(r[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = r[j] - lse;
  }
  std::vector<double> saved = out;
  return Tensor::make_result(OpKind::log_softmax, x.shape(), std::move(out), {x},
                             [saved = std::move(saved), n, c](std::span<const double> g,
                                                              std::span<std::vector<double>* const> gi) {
                               auto& gx = *gi[0];
                               for (std::size_t i = 0; i < n; ++i) {
                                 double gsum = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
                                 for (std::size_t j = 0; j < c; ++j)
                                   gx[i * c + j] += g[i * c + j] - std::exp(saved[i * c + j]) * gsum;
                               }
                             });
}

Tensor l2_normalize(const Tensor& x) {
  if (x.rank() != 1 && x.rank() != 2) {
    throw ShapeMismatch("l2_normalize: expected rank 1 or 2, got shape " + to_string(x.shape()));
  }
  const std::size_t n = x.rank() == 1 ? 1 : x.dim(0);
  const std::size_t d = x.rank() == 1 ? x.dim(0) : x.dim(1);
  auto in = x.data();
  std::vector<double> out(n * d), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += in[i * d + j] * in[i * d + j];
    if (ss == 0.0) throw ZeroVector("l2_normalize: row " + std::to_string(i) + " is zero");
    norms[i] = std::sqrt(ss);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = in[i * d + j] / norms[i];
  }
  std::vector<double> saved = out;
  return Tensor::make_result(
      OpKind::l2_normalize, x.shape(), std::move(out), {x},
      [saved = std::move(saved), norms = std::move(norms), n, d](std::span<const double> g,
                                                                  std::span<std::vector<double>* const> gi) {
        auto& gx = *gi[0];
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += saved[i * d + j] * g[i * d + j];
          for (std::size_t j = 0; j < d; ++j)
            gx[i * d + j] += (g[i * d + j] - saved[i * d + j] * dot) / norms[i];
        }
      });
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Rows are (ci, ky, kx) taps, columns are output pixels; out-of-image taps are 0.
void im2col(const double* src, std::size_t cin, std::size_t h, std::size_t w, std::size_t k, double* col) {
  const long pad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = col + ((ci * k + ky) * k + kx) * h * w;
        const double* plane = src + ci * h * w;
        const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
        for (long y = 0; y < H; ++y) {
          double* r = row + y * W;
          const long sy = y + dy;
          if (sy < 0 || sy >= H) {
            std::fill(r, r + W, 0.0);
            continue;
          }
          for (long xx = 0; xx < W; ++xx) {
            const long sx = xx + dx;
            r[xx] = (sx >= 0 && sx < W) ? plane[sy * W + sx] : 0.0;
          }
        }
      }
}

void col2im_add(const double* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k, double* dst) {
  const long pad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = col + ((ci * k + ky) * k + kx) * h * w;
        double* plane = dst + ci * h * w;
        const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
        for (long y = 0; y < H; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
          for (long xx = x0; xx < x1; ++xx) plane[sy * W + xx + dx] += row[y * W + xx];
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  require_rank("conv2d", bias, 1);
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k || k % 2 == 0) mismatch("conv2d", x.shape(), weight.shape());
  if (bias.dim(0) != cout) mismatch("conv2d", weight.shape(), bias.shape());
  const std::size_t taps = cin * k * k, pixels = h * w;

  std::vector<double> out(n * cout * pixels);
  std::vector<double> col(taps * pixels);
  const ConstMatMap wm(weight.data().data(), static_cast<long>(cout), static_cast<long>(taps));
  const Eigen::Map<const Eigen::VectorXd> bv(bias.data().data(), static_cast<long>(cout));
  for (std::size_t b = 0; b < n; ++b) {
    im2col(&x.data()[b * cin * pixels], cin, h, w, k, col.data());
    MatMap o(&out[b * cout * pixels], static_cast<long>(cout), static_cast<long>(pixels));
    o.noalias() = wm * ConstMatMap(col.data(), static_cast<long>(taps), static_cast<long>(pixels));
    o.colwise() += bv;
  }

  return Tensor::make_result(
      OpKind::conv2d, {n, cout, h, w}, std::move(out), {x, weight, bias},
      [x, weight, n, cin, cout, h, w, k, taps, pixels](std::span<const double> g,
                                                     std::span<std::vector<double>* const> gi) {
        const ConstMatMap wm(weight.data().data(), static_cast<long>(cout), static_cast<long>(taps));
        std::vector<double> col(taps * pixels), gcol(gi[0] ? taps * pixels : 0);
        RowMatrix gw = RowMatrix::Zero(static_cast<long>(cout), static_cast<long>(taps));
        for (std::size_t b = 0; b < n; ++b) {
          const ConstMatMap go(&g[b * cout * pixels], static_cast<long>(cout), static_cast<long>(pixels));
          if (gi[2]) {
            for (std::size_t co = 0; co < cout; ++co) (*gi[2])[co] += go.row(static_cast<long>(co)).sum();
          }
          if (gi[1]) {
            im2col(&x.data()[b * cin * pixels], cin, h, w, k, col.data());
            gw.noalias() += go * ConstMatMap(col.data(), static_cast<long>(taps), static_cast<long>(pixels)).transpose();
          }
          if (gi[0]) {
            MatMap(gcol.data(), static_cast<long>(taps), static_cast<long>(pixels)).noalias() = wm.transpose() * go;
            col2im_add(gcol.data(), cin, h, w, k, &(*gi[0])[b * cin * pixels]);
          }
        }
        if (gi[1]) {
          for (std::size_t i = 0; i < cout * taps; ++i) (*gi[1])[i] += gw.data()[i];
        }
      });
}

Tensor batch_norm(const Tensor& x, double epsilon, ChannelStats* stats) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeMismatch("batch_norm: expected (N, C) or (N, C, H, W), got " + to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_size(x.shape());
  const double count = static_cast<double>(n * inner);
  auto in = x.data();
  std::vector<double> mu(c, 0.0), var(c, 0.0), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* r = &in[(b * c + ch) * inner];
      for (std::size_t p = 0; p < inner; ++p) acc += r[p];
    }
    mu[ch] = acc / count;
    double sq = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* r = &in[(b * c + ch) * inner];
      for (std::size_t p = 0; p < inner; ++p) sq += (r[p] - mu[ch]) * (r[p] - mu[ch]);
    }
    var[ch] = sq / count;
    inv_std[ch] = 1.0 / std::sqrt(var[ch] + epsilon);
  }
  std::vector<double> out(in.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * inner;
      for (std::size_t p = 0; p < inner; ++p) out[base + p] = (in[base + p] - mu[ch]) * inv_std[ch];
    }
  if (stats) {
    stats->mean = mu;
    stats->variance = var;
  }
  std::vector<double> xhat = out;
  return Tensor::make_result(
      OpKind::batch_norm, x.shape(), std::move(out), {x},
      [xhat = std::move(xhat), inv_std, n, c, inner, count](std::span<const double> g,
                                                             std::span<std::vector<double>* const> gi) {
        auto& gx = *gi[0];
        for (std::size_t ch = 0; ch < c; ++ch) {
          double gsum = 0.0, gxh = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * inner;
            for (std::size_t p = 0; p < inner; ++p) {
              gsum += g[base + p];
              gxh += g[base + p] * xhat[base + p];
            }
          }
          const double gm = gsum / count, gxm = gxh / count;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * inner;
            for (std::size_t p = 0; p < inner; ++p)
              gx[base + p] += inv_std[ch] * (g[base + p] - gm - xhat[base + p] * gxm);
          }
        }
      });
}

Tensor channel_affine(const Tensor& x, std::span<const double> scale_c, std::span<const double> shift_c) {
  if (x.rank() < 2 || x.dim(1) != scale_c.size() || scale_c.size() != shift_c.size()) {
    mismatch("channel_affine", x.shape(), Shape{scale_c.size(), shift_c.size()});
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = inner_size(x.shape());
  std::vector<double> sc(scale_c.begin(), scale_c.end());
  std::vector<double> out = copy_of(x);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* r = &out[(b * c + ch) * inner];
      for (std::size_t p = 0; p < inner; ++p) r[p] = r[p] * sc[ch] + shift_c[ch];
    }
  return Tensor::make_result(OpKind::channel_affine, x.shape(), std::move(out), {x},
                             [sc = std::move(sc), n, c, inner](std::span<const double> g,
                                                                std::span<std::vector<double>* const> gi) {
                               auto& gx = *gi[0];
                               for (std::size_t b = 0; b < n; ++b)
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   const std::size_t base = (b * c + ch) * inner;
                                   for (std::size_t p = 0; p < inner; ++p) gx[base + p] += g[base + p] * sc[ch];
                                 }
                             });
}

Tensor pick(const Tensor& x, std::span<const int> index) {
  require_rank("pick", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (index.size() != n) mismatch("pick", x.shape(), Shape{index.size()});
  std::vector<std::size_t> idx(n);
  std::vector<double> out(n);
  auto in = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= c) {
      throw LabelOutOfRange("label " + std::to_string(index[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    idx[i] = i * c + static_cast<std::size_t>(index[i]);
    out[i] = in[idx[i]];
  }
  return Tensor::make_result(OpKind::pick, {n}, std::move(out), {x},
                             [idx = std::move(idx)](std::span<const double> g,
                                                    std::span<std::vector<double>* const> gi) {
                               for (std::size_t i = 0; i < idx.size(); ++i) (*gi[0])[idx[i]] += g[i];
                             });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1 || rows.empty()) throw ShapeMismatch("gather_rows: empty selection or scalar input");
  const std::size_t n = x.dim(0), row = x.numel() / n;
  for (std::size_t r : rows)
    if (r >= n) throw ShapeMismatch("gather_rows: row " + std::to_string(r) + " out of range for " + to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * row);
  auto in = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(&in[rows[i] * row], row, &out[i * row]);
  std::vector<std::size_t> sel(rows.begin(), rows.end());
  return Tensor::make_result(OpKind::gather_rows, std::move(out_shape), std::move(out), {x},
                             [sel = std::move(sel), row](std::span<const double> g,
                                                         std::span<std::vector<double>* const> gi) {
                               auto& gx = *gi[0];
                               for (std::size_t i = 0; i < sel.size(); ++i)
                                 for (std::size_t p = 0; p < row; ++p) gx[sel[i] * row + p] += g[i * row + p];
                             });
}

Tensor sq_dist(const Tensor& a, const Tensor& b) {
  require_rank("sq_dist", a, 2);
  require_rank("sq_dist", b, 2);
  if (a.dim(1) != b.dim(1)) mismatch("sq_dist", a.shape(), b.shape());
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  auto av = a.data(), bv = b.data();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        const double diff = av[i * d + p] - bv[j * d + p];
        acc += diff * diff;
      }
      out[i * m + j] = acc;
    }
  return Tensor::make_result(
      OpKind::sq_dist, {n, m}, std::move(out), {a, b},
      [a, b, n, m, d](std::span<const double> g, std::span<std::vector<double>* const> gi) {
        auto av = a.data(), bv = b.data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double gij = 2.0 * g[i * m + j];
            if (gij == 0.0) continue;
            for (std::size_t p = 0; p < d; ++p) {
              const double diff = av[i * d + p] - bv[j * d + p];
              if (gi[0]) (*gi[0])[i * d + p] += gij * diff;
              if (gi[1]) (*gi[1])[j * d + p] -= gij * diff;
            }
          }
      });
}

Tensor masked_mean(const Tensor& x, std::span<const double> mask) {
  if (mask.size() != x.numel()) mismatch("masked_mean", x.shape(), Shape{mask.size()});
  double wsum = 0.0, acc = 0.0;
  auto in = x.data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    wsum += mask[i];
    acc += mask[i] * in[i];
  }
  if (wsum <= 0.0) throw ShapeMismatch("masked_mean: mask selects nothing");
  std::vector<double> coef(mask.begin(), mask.end());
  for (double& v : coef) v /= wsum;
  return Tensor::make_result(OpKind::masked_mean, {1}, {acc / wsum}, {x},
                             [coef = std::move(coef)](std::span<const double> g,
                                                      std::span<std::vector<double>* const> gi) {
                               auto& gx = *gi[0];
                               for (std::size_t i = 0; i < coef.size(); ++i) gx[i] += g[0] * coef[i];
                             });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) mismatch("reshape", x.shape(), shape);
  return Tensor::make_result(OpKind::reshape, std::move(shape), copy_of(x), {x},
                             [](std::span<const double> g, std::span<std::vector<double>* const> gi) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                             });
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 1) throw ShapeMismatch("flatten: scalar input");
  return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

}  // namespace fost::ops
