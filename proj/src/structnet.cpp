#include "fost/structnet.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <string>

#include "fost/errors.hpp"
#include "fost/ops.hpp"
#include "fost/random.hpp"

namespace fost {

void NetworkConfig::validate() const {
  if (stage_channels.empty()) throw InvalidConfig("network needs at least one stage");
  if (fc_dims.empty()) throw InvalidConfig("network needs at least one FC layer (L >= 1)");
  if (num_classes < 2) throw InvalidConfig("num_classes must be at least 2");
  if (kernel_size % 2 == 0) throw InvalidConfig("kernel_size must be odd");
  if (input.channels == 0) throw InvalidConfig("input channels must be positive");
  for (std::size_t c : stage_channels)
    if (c == 0) throw InvalidConfig("stage channels must be positive");
  for (std::size_t d : fc_dims)
    if (d == 0) throw InvalidConfig("fc dims must be positive");
  const std::size_t shrink = std::size_t{1} << stage_channels.size();
  if (input.height < shrink || input.width < shrink) {
    throw InvalidConfig("input " + std::to_string(input.height) + "x" + std::to_string(input.width) +
                        " too small for " + std::to_string(stage_channels.size()) + " stride-2 stages");
  }
  if (!(norm_epsilon > 0.0)) throw InvalidConfig("norm_epsilon must be positive");
  if (!(norm_momentum >= 0.0 && norm_momentum < 1.0)) throw InvalidConfig("norm_momentum must lie in [0, 1)");
}

std::vector<bool> NetworkConfig::fused_stages() const {
  const std::array<bool, 3> toggles{fuse_s2, fuse_s3, fuse_s4};
  std::vector<bool> on(stage_channels.size(), false);
  for (std::size_t i = 0; i + 1 < on.size() && i < toggles.size(); ++i) on[i] = toggles[i];
  on.back() = true;
  return on;
}

std::size_t NetworkConfig::fused_channels() const {
  const auto on = fused_stages();
  std::size_t total = 0;
  for (std::size_t i = 0; i < on.size(); ++i)
    if (on[i]) total += stage_channels[i];
  return total;
}

DomainNormState::DomainNormState(std::size_t channels, double epsilon, double momentum)
    : epsilon_(epsilon), momentum_(momentum) {
  for (auto& s : stats_) {
    s.mean.assign(channels, 0.0);
    s.variance.assign(channels, 1.0);
  }
}

std::size_t DomainNormState::index(DomainId domain) {
  switch (domain) {
    case DomainId::source: return 0;
    case DomainId::target: return 1;
  }
  throw UnknownDomain("unknown domain id " + std::to_string(static_cast<int>(domain)));
}

Tensor conv_norm_update_and_apply(DomainNormState& state, const Tensor& batch, DomainId domain,
                                  bool training) {
  if (batch.rank() < 2 || batch.dim(1) != state.channels()) {
    throw ShapeMismatch("conv_norm: batch shape " + to_string(batch.shape()) + " vs " +
                        std::to_string(state.channels()) + " channels");
  }
  RunningStats& running = state.stats(domain);
  if (training) {
    ops::ChannelStats batch_stats;
    Tensor out = ops::batch_norm(batch, state.epsilon(), &batch_stats);
    const double m = state.momentum();
    for (std::size_t c = 0; c < state.channels(); ++c) {
      running.mean[c] = m * running.mean[c] + (1.0 - m) * batch_stats.mean[c];
      running.variance[c] = m * running.variance[c] + (1.0 - m) * batch_stats.variance[c];
    }
    return out;
  }
  std::vector<double> scale(state.channels()), shift(state.channels());
  for (std::size_t c = 0; c < state.channels(); ++c) {
    scale[c] = 1.0 / std::sqrt(running.variance[c] + state.epsilon());
    shift[c] = -running.mean[c] * scale[c];
  }
  return ops::channel_affine(batch, scale, shift);
}

Tensor structure_fusion(std::span<const Tensor> stage_maps, const std::vector<bool>& enabled) {
  if (stage_maps.empty() || enabled.size() != stage_maps.size() || !enabled.back()) {
    throw NoMapsEnabled("structure fusion requires the deepest stage map to be enabled");
  }
  const Tensor& deepest = stage_maps.back();
  const std::size_t h = deepest.dim(2), w = deepest.dim(3);
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i + 1 < stage_maps.size(); ++i) {
    if (!enabled[i]) continue;
    const Tensor& m = stage_maps[i];
    parts.push_back(m.dim(2) == h && m.dim(3) == w ? m : ops::avg_pool2d(m, h, w));
  }
  if (parts.empty()) return deepest;
  parts.push_back(deepest);
  return ops::concat_channels(parts);
}

StructNet::StructNet(NetworkConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  auto he = [&rng](Shape shape, double fan_in, double gain) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
    std::vector<double> v(numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  const std::size_t k = config_.kernel_size;
  std::size_t in_c = config_.input.channels;
  norms_.emplace_back(in_c, config_.norm_epsilon, config_.norm_momentum);
  for (std::size_t out_c : config_.stage_channels) {
    params_.push_back(he({out_c, in_c, k, k}, static_cast<double>(in_c * k * k), 2.0));
    params_.push_back(Tensor::zeros({out_c}, true));
    norms_.emplace_back(out_c, config_.norm_epsilon, config_.norm_momentum);
    in_c = out_c;
  }
  std::size_t in_d = config_.fused_channels();
  for (std::size_t out_d : config_.fc_dims) {
    params_.push_back(he({out_d, in_d}, static_cast<double>(in_d), 2.0));
    params_.push_back(Tensor::zeros({out_d}, true));
    in_d = out_d;
  }
  params_.push_back(he({config_.num_classes, in_d}, static_cast<double>(in_d), 1.0));
  params_.push_back(Tensor::zeros({config_.num_classes}, true));
}

StructNet::StructNet(NetworkConfig config, std::vector<Tensor> params, std::vector<DomainNormState> norms)
    : config_(std::move(config)), params_(std::move(params)), norms_(std::move(norms)) {}

std::size_t StructNet::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& p : params_) n += p.numel();
  return n;
}

FeatureBundle StructNet::forward_features(const Tensor& images, DomainId domain, Mode mode) {
  const InputShape& in = config_.input;
  if (images.rank() != 4 || images.dim(1) != in.channels || images.dim(2) != in.height ||
      images.dim(3) != in.width) {
    throw ShapeMismatch("forward_features: images " + to_string(images.shape()) + " vs expected (N, " +
                        std::to_string(in.channels) + ", " + std::to_string(in.height) + ", " +
                        std::to_string(in.width) + ")");
  }
  const bool training = mode == Mode::training;
  FeatureBundle out;
  Tensor x = conv_norm_update_and_apply(norms_[0], images, domain, training);
  for (std::size_t s = 0; s < config_.stage_channels.size(); ++s) {
    x = ops::conv2d(x, params_[2 * s], params_[2 * s + 1]);
    x = ops::relu(x);
    x = ops::avg_pool2d(x, x.dim(2) / 2, x.dim(3) / 2);
    x = conv_norm_update_and_apply(norms_[s + 1], x, domain, training);
    out.stage_maps.push_back(x);
  }
  out.f_struc = structure_fusion(out.stage_maps, config_.fused_stages());
  out.f_vec = ops::flatten(ops::avg_pool2d(out.f_struc, 1, 1));
  HeadOutput head = forward_head(out.f_vec);
  out.fc_features = std::move(head.fc_features);
  out.logits = std::move(head.logits);
  return out;
}

HeadOutput StructNet::forward_head(const Tensor& f_vec) const {
  if (f_vec.rank() != 2 || f_vec.dim(1) != config_.fused_channels()) {
    throw ShapeMismatch("forward_head: features " + to_string(f_vec.shape()) + " vs width " +
                        std::to_string(config_.fused_channels()));
  }
  HeadOutput out;
  Tensor h = f_vec;
  std::size_t p = conv_parameter_count();
  for (std::size_t l = 0; l < config_.fc_dims.size(); ++l, p += 2) {
    h = ops::relu(ops::linear(h, params_[p], params_[p + 1]));
    out.fc_features.push_back(h);
  }
  out.logits = ops::linear(h, params_[p], params_[p + 1]);
  return out;
}

std::uint64_t StructNet::parameter_checksum() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const Tensor& p : params_)
    for (double v : p.data()) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        hash ^= (bits >> (8 * b)) & 0xff;
        hash *= 0x100000001b3ULL;
      }
    }
  return hash;
}

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : os_(path, std::ios::binary), path_(path) {
    if (!os_) throw IoFailure("cannot open " + path.string() + " for writing");
  }
  void raw(const char* bytes, std::size_t n) { os_.write(bytes, static_cast<std::streamsize>(n)); }
  void u32(std::uint64_t v) {
    for (int b = 0; b < 4; ++b) os_.put(static_cast<char>((v >> (8 * b)) & 0xff));
  }
  void u8(bool v) { os_.put(v ? 1 : 0); }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) os_.put(static_cast<char>((bits >> (8 * b)) & 0xff));
  }
  void finish() {
    os_.flush();
    if (!os_) throw IoFailure("write failed: " + path_.string());
  }

 private:
  std::ofstream os_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : is_(path, std::ios::binary), path_(path) {
    if (!is_) throw CheckpointError("cannot open checkpoint " + path.string());
  }
  std::string raw(std::size_t n) {
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    is_.read(reinterpret_cast<char*>(b), 4);
    check();
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  bool u8() {
    const int c = is_.get();
    check();
    return c != 0;
  }
  double f64() {
    unsigned char b[8];
    is_.read(reinterpret_cast<char*>(b), 8);
    check();
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(bits);
  }

 private:
  void check() {
    if (!is_) throw CheckpointError("truncated checkpoint " + path_.string());
  }
  std::ifstream is_;
  std::filesystem::path path_;
};

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void StructNet::save(const std::filesystem::path& path) const {
  Writer w(path);
  w.raw("FSTN", 4);
  w.u32(kCheckpointVersion);
  w.u32(config_.input.channels);
  w.u32(config_.input.height);
  w.u32(config_.input.width);
  w.u32(config_.num_classes);
  w.u32(config_.kernel_size);
  w.u32(config_.stage_channels.size());
  for (std::size_t c : config_.stage_channels) w.u32(c);
  w.u32(config_.fc_dims.size());
  for (std::size_t d : config_.fc_dims) w.u32(d);
  w.u8(config_.fuse_s2);
  w.u8(config_.fuse_s3);
  w.u8(config_.fuse_s4);
  w.f64(config_.norm_epsilon);
  w.f64(config_.norm_momentum);
  w.u32(params_.size());
  for (const Tensor& p : params_) {
    w.u32(p.rank());
    for (std::size_t d : p.shape()) w.u32(d);
    for (double v : p.data()) w.f64(v);
  }
  w.u32(norms_.size());
  for (const DomainNormState& n : norms_) {
    w.u32(n.channels());
    for (DomainId d : {DomainId::source, DomainId::target}) {
      for (double v : n.stats(d).mean) w.f64(v);
      for (double v : n.stats(d).variance) w.f64(v);
    }
  }
  w.finish();
}

StructNet StructNet::load(const std::filesystem::path& path) {
  Reader r(path);
  if (r.raw(4) != "FSTN") throw CheckpointError("bad checkpoint magic in " + path.string());
  if (r.u32() != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
  NetworkConfig cfg;
  cfg.input.channels = r.u32();
  cfg.input.height = r.u32();
  cfg.input.width = r.u32();
  cfg.num_classes = r.u32();
  cfg.kernel_size = r.u32();
  cfg.stage_channels.resize(r.u32());
  for (auto& c : cfg.stage_channels) c = r.u32();
  cfg.fc_dims.resize(r.u32());
  for (auto& d : cfg.fc_dims) d = r.u32();
  cfg.fuse_s2 = r.u8();
  cfg.fuse_s3 = r.u8();
  cfg.fuse_s4 = r.u8();
  cfg.norm_epsilon = r.f64();
  cfg.norm_momentum = r.f64();
  cfg.validate();

  // Shapes come from a freshly built network so a corrupt file cannot smuggle
  // in a mismatched architecture.
  StructNet reference(cfg, 0);
  const std::size_t count = r.u32();
  if (count != reference.params_.size()) throw CheckpointError("parameter count mismatch");
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < count; ++i) {
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    if (shape != reference.params_[i].shape()) {
      throw CheckpointError("parameter " + std::to_string(i) + " has shape " + to_string(shape) +
                            ", expected " + to_string(reference.params_[i].shape()));
    }
    std::vector<double> values(numel(shape));
    for (double& v : values) v = r.f64();
    params.push_back(Tensor::from(std::move(shape), std::move(values), true));
  }
  const std::size_t n_norms = r.u32();
  if (n_norms != reference.norms_.size()) throw CheckpointError("normalisation site count mismatch");
  std::vector<DomainNormState> norms;
  for (std::size_t i = 0; i < n_norms; ++i) {
    const std::size_t channels = r.u32();
    if (channels != reference.norms_[i].channels()) throw CheckpointError("normalisation width mismatch");
    DomainNormState state(channels, cfg.norm_epsilon, cfg.norm_momentum);
    for (DomainId d : {DomainId::source, DomainId::target}) {
      for (double& v : state.stats(d).mean) v = r.f64();
      for (double& v : state.stats(d).variance) v = r.f64();
    }
    norms.push_back(std::move(state));
  }
  return StructNet(std::move(cfg), std::move(params), std::move(norms));
}

}  // namespace fost
