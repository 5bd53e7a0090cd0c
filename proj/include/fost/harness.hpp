#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fost/shape_worlds.hpp"
#include "fost/structnet.hpp"
#include "fost/trainer.hpp"

namespace fost {

/// Everything a run needs. network.num_classes and network.input follow the
/// data section.
struct RunConfig {
  DataConfig data;
  NetworkConfig network;
  TrainConfig train;

  /// Copies data-derived fields into the network config and validates all
  /// three sections. Throws ConfigError / InvalidConfig.
  void resolve();
};

/// Line-oriented `key = value` text with `[section]` headers; comments start
/// with ';' or '#'. Unknown sections or keys are errors. Throws ConfigError.
RunConfig parse_config(std::istream& in, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);
/// The same format with every field spelled out.
std::string render_config(const RunConfig& config);

/// CSV with one row per epoch; numbers use 6 significant digits.
std::string format_metrics(std::span<const EpochReport> reports);
/// Throws IoFailure.
void write_metrics(std::span<const EpochReport> reports, const std::filesystem::path& path);

extern const char* const kMetricsHeader;

struct RunManifest {
  std::string command;
  std::string config_path;
  RunConfig config;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  std::string started_at;  // UTC, ISO 8601
};

std::string manifest_json(const RunManifest& manifest);

/// Builds `final_dir` by letting `fill` write into a sibling temporary
/// directory, then renaming it into place. On any exception the temporary
/// directory is removed and `final_dir` is never created.
void write_atomically(const std::filesystem::path& final_dir,
                      const std::function<void(const std::filesystem::path&)>& fill);

/// Output root: FOST_OUT_DIR if set, else "runs".
std::filesystem::path default_output_root();
std::string utc_timestamp();

/// Self-test suite registered by the caller (the CLI links the oracle suites).
struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};
using SuiteRunner = std::function<std::vector<SuiteResult>()>;

/// Command dispatcher: train, ablate, selftest, export-data. Returns 0 on
/// success, 1 on runtime failure, 2 on usage or configuration errors.
int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
                const SuiteRunner& selftest = {});

struct AblationRow {
  std::string name;
  bool fuse_s2 = false, fuse_s3 = false, fuse_s4 = false;
  std::size_t f_vec_dim = 0;
  double source_acc = 0.0;
  double target_acc = 0.0;
};

/// The fusion toggle grid: baseline (deepest map only), +S2, +S2+S3, +S2+S3+S4.
std::vector<AblationRow> ablation_grid();
std::string format_ablation(std::span<const AblationRow> rows);

}  // namespace fost
