#include "fost/shape_worlds.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include <json.hpp>

#include "fost/errors.hpp"
#include "fost/random.hpp"

namespace fost {

const char* to_string(DomainId domain) { return domain == DomainId::source ? "source" : "target"; }

DomainId parse_domain(std::string_view name) {
  if (name == "source") return DomainId::source;
  if (name == "target") return DomainId::target;
  throw UnknownDomain("unknown domain '" + std::string(name) + "'");
}

const char* to_string(BackgroundKind kind) {
  switch (kind) {
    case BackgroundKind::constant: return "constant";
    case BackgroundKind::stripes: return "stripes";
    case BackgroundKind::checker: return "checker";
    case BackgroundKind::noise: return "noise";
  }
  return "unknown";
}

BackgroundKind parse_background(std::string_view name) {
  if (name == "constant") return BackgroundKind::constant;
  if (name == "stripes") return BackgroundKind::stripes;
  if (name == "checker") return BackgroundKind::checker;
  if (name == "noise") return BackgroundKind::noise;
  throw ConfigError("unknown background kind '" + std::string(name) + "'");
}

const char* to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::disk: return "disk";
    case ShapeFamily::square: return "square";
    case ShapeFamily::triangle: return "triangle";
    case ShapeFamily::cross: return "cross";
    case ShapeFamily::ring: return "ring";
    case ShapeFamily::bar: return "bar";
  }
  return "unknown";
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::uint64_t kGeometrySalt = 0x6e6f6d65;
constexpr std::uint64_t kTextureSalt = 0x74657874;

// Membership in the unit-radius canonical shape, in the shape's own frame.
bool inside(ShapeFamily family, double u, double v) {
  const double r2 = u * u + v * v;
  switch (family) {
    case ShapeFamily::disk: return r2 <= 1.0;
    case ShapeFamily::square: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case ShapeFamily::triangle: {
      const double s3 = std::numbers::sqrt3;
      return v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0;
    }
    case ShapeFamily::cross:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case ShapeFamily::ring: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case ShapeFamily::bar: return std::abs(u) <= 1.0 && std::abs(v) <= 0.3;
  }
  return false;
}

struct Placement {
  double cx, cy, radius, angle;
};

Placement draw_placement(Rng& rng, const ImageGeometry& geo) {
  const double side = static_cast<double>(std::min(geo.height, geo.width));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Placement p{};
  p.radius = side * (0.22 + 0.10 * unit(rng));
  const double margin = p.radius + 1.0;
  p.cx = margin + (static_cast<double>(geo.width) - 2.0 * margin) * unit(rng);
  p.cy = margin + (static_cast<double>(geo.height) - 2.0 * margin) * unit(rng);
  p.angle = 2.0 * kPi * unit(rng);
  return p;
}

// Fraction of a pixel covered by the shape, 4x4 supersampled.
std::vector<double> coverage(ShapeFamily family, const Placement& p, const ImageGeometry& geo) {
  constexpr int kSub = 4;
  const double c = std::cos(p.angle), s = std::sin(p.angle);
  std::vector<double> cov(geo.height * geo.width, 0.0);
  for (std::size_t y = 0; y < geo.height; ++y)
    for (std::size_t x = 0; x < geo.width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSub - p.cx;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSub - p.cy;
          const double u = (c * px + s * py) / p.radius;
          const double v = (-s * px + c * py) / p.radius;
          hits += inside(family, u, v);
        }
      cov[y * geo.width + x] = static_cast<double>(hits) / (kSub * kSub);
    }
  return cov;
}

std::vector<double> background(const DomainSpec& spec, Rng& rng, const ImageGeometry& geo) {
  const auto& bp = spec.params;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double phase_x = bp.random_phase ? unit(rng) * bp.period : 0.0;
  const double phase_y = bp.random_phase ? unit(rng) * bp.period : 0.0;
  std::vector<double> bg(geo.height * geo.width, bp.level);
  const double c = std::cos(bp.angle), s = std::sin(bp.angle);
  for (std::size_t y = 0; y < geo.height; ++y)
    for (std::size_t x = 0; x < geo.width; ++x) {
      const double fx = static_cast<double>(x) + phase_x, fy = static_cast<double>(y) + phase_y;
      double sign = 0.0;
      switch (spec.background) {
        case BackgroundKind::constant: break;
        case BackgroundKind::stripes: {
          const double t = (c * fx + s * fy) / bp.period;
          sign = (t - std::floor(t)) < 0.5 ? 1.0 : -1.0;
          break;
        }
        case BackgroundKind::checker: {
          const double half = bp.period / 2.0;
          const long cell = static_cast<long>(std::floor(fx / half)) + static_cast<long>(std::floor(fy / half));
          sign = (cell % 2 == 0) ? 1.0 : -1.0;
          break;
        }
        case BackgroundKind::noise: sign = 2.0 * unit(rng) - 1.0; break;
      }
      bg[y * geo.width + x] += bp.amplitude * sign;
    }
  return bg;
}

void validate_spec(const DomainSpec& spec) {
  if (!(spec.noise_sigma >= 0.0 && spec.noise_sigma < 0.5)) {
    throw InvalidConfig("noise_sigma must lie in [0, 0.5), got " + std::to_string(spec.noise_sigma));
  }
  if (!(spec.params.period > 0.0)) throw InvalidConfig("background period must be positive");
  if (spec.params.amplitude < 0.0) throw InvalidConfig("background amplitude must be non-negative");
}

}  // namespace

std::vector<Sample> generate_domain(const DomainSpec& spec, std::size_t classes, std::size_t per_class,
                                    std::uint64_t seed, const GenerateOptions& options) {
  if (classes < 2) throw InvalidConfig("at least two classes are required");
  if (classes > kShapeFamilies) {
    throw TooManyClasses("requested " + std::to_string(classes) + " classes but only " +
                         std::to_string(kShapeFamilies) + " shape families exist");
  }
  if (per_class < 1) throw InvalidConfig("per_class must be at least 1");
  validate_spec(spec);
  const ImageGeometry& geo = options.geometry;
  if (geo.height < 8 || geo.width < 8) throw InvalidConfig("images must be at least 8x8");

  const std::size_t total = classes * per_class;
  std::vector<Sample> out;
  out.reserve(total);
  for (std::size_t k = 0; k < total; ++k) {
    const int label = static_cast<int>(k % classes);
    Rng geo_rng(mix_seed(mix_seed(seed, kGeometrySalt), k));
    Rng tex_rng(mix_seed(mix_seed(seed, kTextureSalt + static_cast<std::uint64_t>(spec.domain)), k));

    const Placement place = draw_placement(geo_rng, geo);
    const auto cov = coverage(static_cast<ShapeFamily>(label), place, geo);
    auto pixels = background(spec, tex_rng, geo);
    const double fg = spec.foreground_intensity + spec.foreground_intensity_shift;
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<unsigned char> mask(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      double v = pixels[i] * (1.0 - cov[i]) + fg * cov[i];
      if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(tex_rng);
      pixels[i] = std::clamp(v, 0.0, 1.0);
      mask[i] = cov[i] >= 0.5;
    }
    Sample s;
    s.image = Tensor::from({1, geo.height, geo.width}, std::move(pixels));
    s.label = label;
    s.domain = spec.domain;
    if (options.with_masks) s.foreground_mask = std::move(mask);
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split(const std::vector<Sample>& dataset,
                                                          double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw EmptySplit("train_fraction must lie strictly between 0 and 1");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset[i].label].push_back(i);

  Rng rng(seed);
  std::vector<unsigned char> is_train(dataset.size(), 0);
  for (auto& [label, idx] : by_class) {
    const auto n = static_cast<long long>(idx.size());
    const long long n_train = std::llround(train_fraction * static_cast<double>(n));
    if (n_train <= 0 || n_train >= n) {
      throw EmptySplit("class " + std::to_string(label) + " with " + std::to_string(n) +
                       " samples would land entirely on one side of the split");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (long long j = 0; j < n_train; ++j) is_train[idx[static_cast<std::size_t>(j)]] = 1;
  }
  std::pair<std::vector<Sample>, std::vector<Sample>> out;
  for (std::size_t i = 0; i < dataset.size(); ++i) (is_train[i] ? out.first : out.second).push_back(dataset[i]);
  return out;
}

void validate_domain_pair(const DomainSpec& source, const DomainSpec& target) {
  validate_spec(source);
  validate_spec(target);
  if (source.domain != DomainId::source || target.domain != DomainId::target) {
    throw InvalidConfig("domain specs must be tagged source and target respectively");
  }
  const auto& a = source.params;
  const auto& b = target.params;
  const bool same = source.background == target.background && a.level == b.level &&
                    a.amplitude == b.amplitude && a.period == b.period && a.angle == b.angle &&
                    source.foreground_intensity == target.foreground_intensity &&
                    source.foreground_intensity_shift == target.foreground_intensity_shift &&
                    source.noise_sigma == target.noise_sigma;
  if (same) throw InvalidConfig("source and target specs are identical; there is no domain shift");
}

Datasets make_datasets(const DataConfig& config, std::uint64_t seed) {
  validate_domain_pair(config.source, config.target);
  const std::size_t per_class = config.train_per_class + config.test_per_class;
  const double fraction = static_cast<double>(config.train_per_class) / static_cast<double>(per_class);
  GenerateOptions opts;
  opts.geometry = config.geometry;
  Datasets d;
  auto src = generate_domain(config.source, config.classes, per_class, mix_seed(seed, 11), opts);
  auto tgt = generate_domain(config.target, config.classes, per_class, mix_seed(seed, 12), opts);
  std::tie(d.source_train, d.source_test) = split(src, fraction, mix_seed(seed, 21));
  std::tie(d.target_train, d.target_test) = split(tgt, fraction, mix_seed(seed, 22));
  return d;
}

Tensor stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeMismatch("stack_images: empty selection");
  const Shape& s = samples.at(indices[0]).image.shape();
  const std::size_t per = numel(s);
  std::vector<double> values(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = samples.at(indices[i]).image;
    if (img.shape() != s) throw ShapeMismatch("stack_images: " + to_string(s) + " vs " + to_string(img.shape()));
    std::copy(img.data().begin(), img.data().end(), values.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  Shape out{indices.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor::from(std::move(out), std::move(values));
}

Tensor stack_images(const std::vector<Sample>& samples) {
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return stack_images(samples, all);
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_dataset_binary(const std::filesystem::path& path, const std::vector<Sample>& samples,
                          std::size_t classes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoFailure("cannot open " + path.string() + " for writing");
  const std::size_t pixels = samples.empty() ? 0 : samples.front().image.numel();
  os.write("FWS1", 4);
  put_u32(os, static_cast<std::uint32_t>(samples.size()));
  put_u32(os, static_cast<std::uint32_t>(classes));
  put_u32(os, static_cast<std::uint32_t>(pixels));
  for (const Sample& s : samples) {
    if (s.image.numel() != pixels) throw ShapeMismatch("write_dataset_binary: ragged image sizes");
    for (double v : s.image.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) throw IoFailure("write failed: " + path.string());
}

void write_dataset_manifest(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream os(path);
  if (!os) throw IoFailure("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    nlohmann::ordered_json rec;
    rec["index"] = i;
    rec["label"] = samples[i].label;
    rec["domain"] = to_string(samples[i].domain);
    os << rec.dump() << '\n';
  }
  if (!os) throw IoFailure("write failed: " + path.string());
}

LoadedDataset read_dataset_binary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoFailure("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "FWS1") throw IoFailure("bad dataset magic in " + path.string());
  LoadedDataset d;
  d.count = get_u32(is);
  d.classes = get_u32(is);
  d.pixels = get_u32(is);
  d.values.resize(static_cast<std::size_t>(d.count) * d.pixels);
  for (float& v : d.values) v = std::bit_cast<float>(get_u32(is));
  if (!is) throw IoFailure("truncated dataset file " + path.string());
  return d;
}

}  // namespace fost
