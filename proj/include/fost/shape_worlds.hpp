#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fost/tensor.hpp"

namespace fost {

enum class DomainId : std::uint8_t { source = 0, target = 1 };

const char* to_string(DomainId domain);
/// Throws UnknownDomain.
DomainId parse_domain(std::string_view name);

enum class BackgroundKind : std::uint8_t { constant, stripes, checker, noise };

const char* to_string(BackgroundKind kind);
/// Throws ConfigError.
BackgroundKind parse_background(std::string_view name);

/// Foreground shape families; class c renders family c.
enum class ShapeFamily : std::uint8_t { disk, square, triangle, cross, ring, bar };
inline constexpr std::size_t kShapeFamilies = 6;
const char* to_string(ShapeFamily family);

struct BackgroundParams {
  double level = 0.3;      // mean intensity
  double amplitude = 0.2;  // texture half-swing
  double period = 6.0;     // pixels per texture cycle (stripes, checker)
  double angle = 0.0;      // stripe orientation, radians
  bool random_phase = true;
};

/// One data distribution. Class signal lives in the foreground shape; domain
/// signal lives in the background and the foreground intensity.
struct DomainSpec {
  DomainId domain = DomainId::source;
  BackgroundKind background = BackgroundKind::checker;
  BackgroundParams params;
  double foreground_intensity = 0.85;
  double foreground_intensity_shift = 0.0;
  double noise_sigma = 0.05;  // must be < 0.5
};

struct ImageGeometry {
  std::size_t height = 32;
  std::size_t width = 32;
};

struct Sample {
  Tensor image;  // (1, H, W), values in [0, 1]
  int label = 0;
  DomainId domain = DomainId::source;
  /// Binary foreground mask (H * W), present when requested at generation.
  std::optional<std::vector<unsigned char>> foreground_mask;
};

struct GenerateOptions {
  ImageGeometry geometry;
  bool with_masks = false;
};

/// C * per_class samples, per_class of each class, in label-interleaved order.
/// Deterministic in (spec, classes, per_class, seed). Shape geometry depends
/// only on (classes, seed, sample index), so two specs differing only in
/// background produce identical foreground masks.
/// Throws TooManyClasses, InvalidConfig.
std::vector<Sample> generate_domain(const DomainSpec& spec, std::size_t classes, std::size_t per_class,
                                    std::uint64_t seed, const GenerateOptions& options = {});

/// Label-stratified split; each class contributes round(fraction * n_c)
/// training samples. Original order is preserved within each side.
/// Throws EmptySplit if any class would land entirely on one side.
std::pair<std::vector<Sample>, std::vector<Sample>> split(const std::vector<Sample>& dataset,
                                                          double train_fraction, std::uint64_t seed);

/// Checks the pairing invariants between a source and a target spec.
void validate_domain_pair(const DomainSpec& source, const DomainSpec& target);

struct DataConfig {
  std::size_t classes = 4;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  ImageGeometry geometry;
  DomainSpec source{DomainId::source, BackgroundKind::checker, {0.3, 0.2, 6.0, 0.0, true}, 0.85, 0.0, 0.05};
  DomainSpec target{DomainId::target, BackgroundKind::stripes, {0.3, 0.2, 6.0, 0.0, true}, 0.85, 0.0, 0.05};
};

struct Datasets {
  std::vector<Sample> source_train, source_test;
  std::vector<Sample> target_train, target_test;
};

/// Generates both domains and splits them. Each domain uses its own seed
/// stream derived from `seed`.
Datasets make_datasets(const DataConfig& config, std::uint64_t seed);

/// Stacks the selected samples' images into an (N, 1, H, W) tensor.
Tensor stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> indices);
Tensor stack_images(const std::vector<Sample>& samples);

/// Binary export: 16-byte header ("FWS1", u32 count, u32 classes, u32 H*W),
/// then count * H*W little-endian float32 pixels, row-major.
void write_dataset_binary(const std::filesystem::path& path, const std::vector<Sample>& samples,
                          std::size_t classes);
/// JSON-lines manifest, one {"index","label","domain"} record per sample.
void write_dataset_manifest(const std::filesystem::path& path, const std::vector<Sample>& samples);

struct LoadedDataset {
  std::uint32_t count = 0, classes = 0, pixels = 0;
  std::vector<float> values;
};
LoadedDataset read_dataset_binary(const std::filesystem::path& path);

}  // namespace fost
