#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fost/errors.hpp"
#include "fost/harness.hpp"

using namespace fost;
namespace fs = std::filesystem;

namespace {

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny_config() {
  RunConfig c;
  c.data.classes = 3;
  c.data.train_per_class = 10;
  c.data.test_per_class = 4;
  c.network.stage_channels = {4, 8};
  c.network.fc_dims = {8};
  c.train.epochs = 2;
  c.train.iterations_per_epoch = 3;
  c.train.batch_classes = 3;
  c.train.per_class_per_domain = 2;
  c.train.contrastive_warmup_epochs = 0;
  c.train.seed = 4;
  c.resolve();
  return c;
}

fs::path write_config(const fs::path& dir, const RunConfig& c) {
  const fs::path p = dir / "run.ini";
  std::ofstream(p) << render_config(c);
  return p;
}

struct Cli {
  std::ostringstream out, err;
  int code = -1;
  Cli(std::vector<std::string> args, const SuiteRunner& suites = {}) {
    args.insert(args.begin(), "fost");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    code = run_command(static_cast<int>(argv.size()), argv.data(), out, err, suites);
  }
};

}  // namespace

TEST_CASE("config render and parse roundtrip") {
  RunConfig c = tiny_config();
  c.train.alpha = 0.125;
  c.train.target_weighting = TargetWeighting::none;
  c.train.kernel.sigma_multipliers = {0.5, 3.0};
  c.network.fuse_s3 = false;
  const std::string text = render_config(c);
  std::istringstream in(text);
  RunConfig back = parse_config(in);
  back.resolve();
  CHECK(render_config(back) == text);
  CHECK(back.train.alpha == 0.125);
  CHECK(back.network.fuse_s3 == false);
  CHECK(back.train.kernel.sigma_multipliers == std::vector<double>{0.5, 3.0});
}

TEST_CASE("shipped default config equals the built-in defaults") {
  RunConfig defaults;
  defaults.resolve();
  RunConfig shipped = load_config(fs::path(FOST_SOURCE_DIR) / "configs" / "default.ini");
  shipped.resolve();
  CHECK(render_config(shipped) == render_config(defaults));
}

TEST_CASE("partial configs keep defaults and comments are ignored") {
  std::istringstream in("; comment\n[train]\n# another\nalpha = 0.5\n");
  const RunConfig c = parse_config(in);
  CHECK(c.train.alpha == 0.5);
  CHECK(c.train.epochs == TrainConfig{}.epochs);
}

TEST_CASE("config errors") {
  const auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
  };
  CHECK_THROWS_AS(parse("[train]\nalpah = 0.5\n"), ConfigError);
  CHECK_THROWS_AS(parse("[trian]\nalpha = 0.5\n"), ConfigError);
  CHECK_THROWS_AS(parse("[train]\nalpha = half\n"), ConfigError);
  CHECK_THROWS_AS(parse("[train]\nepochs = 2.5\n"), ConfigError);
  CHECK_THROWS_AS(parse("[network]\nfuse_s2 = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse("[train]\ncluster_layer = middle\n"), ConfigError);
  try {
    parse("[train]\nalpah = 0.5\n");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("alpah") != std::string::npos);
  }
  RunConfig c;
  c.train.batch_classes = 5;
  CHECK_THROWS_AS(c.resolve(), ConfigError);
}

TEST_CASE("metrics csv") {
  std::vector<EpochReport> reports(3);
  for (std::size_t i = 0; i < 3; ++i) {
    reports[i].epoch = i + 1;
    reports[i].loss = total_loss(1.0 / (i + 1), std::vector<double>{0.1234567}, 0.25);
    reports[i].n_retained = 10 * i;
  }
  const std::string csv = format_metrics(reports);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == kMetricsHeader);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 9);
  }
  CHECK(rows == 3);
  CHECK(csv.find(",0.123457,") != std::string::npos);

  Scratch s("fost_test_metrics");
  CHECK_THROWS_AS(write_metrics({}, s.dir / "m.csv"), IoFailure);
  CHECK_THROWS_AS(write_metrics(reports, s.dir / "missing" / "m.csv"), IoFailure);
}

TEST_CASE("manifest echoes every config key") {
  const RunConfig c = tiny_config();
  const RunManifest m{"train", "run.ini", c, 4, "out/dir", "2026-01-01T00:00:00Z"};
  const auto j = nlohmann::json::parse(manifest_json(m));
  CHECK(j["command"] == "train");
  CHECK(j["seed"] == 4);
  CHECK(j["config"]["data"]["classes"] == 3);
  CHECK(j["config"]["network"]["stage_channels"] == nlohmann::json::array({4, 8}));
  CHECK(j["config"]["train"]["target_weighting"] == to_string(c.train.target_weighting));

  std::istringstream in(render_config(c));
  std::string line, section;
  std::size_t keys = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const std::string key = line.substr(0, line.find(' '));
    CHECK_MESSAGE(j["config"][section].contains(key), section << "." << key);
    ++keys;
  }
  std::size_t json_keys = 0;
  for (const auto& [name, sec] : j["config"].items()) json_keys += sec.size();
  CHECK(json_keys == keys);
}

TEST_CASE("atomic writes leave nothing behind on failure") {
  Scratch s("fost_test_atomic");
  const fs::path target = s.dir / "run";
  CHECK_THROWS_AS(write_atomically(target,
                                   [](const fs::path& tmp) {
                                     std::ofstream(tmp / "half.txt") << "x";
                                     throw IoFailure("disk full");
                                   }),
                  IoFailure);
  CHECK_FALSE(fs::exists(target));
  CHECK(fs::is_empty(s.dir));

  write_atomically(target, [](const fs::path& tmp) { std::ofstream(tmp / "ok.txt") << "y"; });
  CHECK(slurp(target / "ok.txt") == "y");
  CHECK(std::distance(fs::directory_iterator(s.dir), fs::directory_iterator{}) == 1);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(Cli({}).code == 2);
  CHECK(Cli({"frobnicate"}).code == 2);
  CHECK(Cli({"train"}).code == 2);
  const Cli missing({"train", "--config", "/nonexistent/fost.ini"});
  CHECK(missing.code == 2);
  CHECK(missing.err.str().find("config not found: /nonexistent/fost.ini") != std::string::npos);
  CHECK(Cli({"--help"}).code == 0);

  Scratch s("fost_test_badcfg");
  std::ofstream(s.dir / "bad.ini") << "[train]\nalpha = 2\n";
  const Cli bad({"train", "--config", (s.dir / "bad.ini").string(), "--out", (s.dir / "o").string()});
  CHECK(bad.code == 2);
  CHECK_FALSE(fs::exists(s.dir / "o"));
}

TEST_CASE("selftest aggregates suite results") {
  const Cli none({"selftest"});
  CHECK(none.code == 1);
  const Cli good({"selftest"}, [] { return std::vector<SuiteResult>{{"a", true, ""}, {"b", true, "fine"}}; });
  CHECK(good.code == 0);
  CHECK(good.out.str() == "PASS a\nPASS b: fine\n");
  const Cli bad({"selftest"}, [] { return std::vector<SuiteResult>{{"a", true, ""}, {"b", false, "off by 1"}}; });
  CHECK(bad.code == 1);
  CHECK(bad.out.str().find("FAIL b: off by 1") != std::string::npos);
}

TEST_CASE("train writes metrics, checkpoint and manifest") {
  Scratch s("fost_test_train");
  const fs::path cfg = write_config(s.dir, tiny_config());
  const fs::path out = s.dir / "run";
  const Cli run({"train", "--config", cfg.string(), "--seed", "9", "--out", out.string()});
  REQUIRE_MESSAGE(run.code == 0, run.err.str());
  CHECK(fs::exists(out / "checkpoint.fstn"));
  const std::string metrics = slurp(out / "metrics.csv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
  const auto j = nlohmann::json::parse(slurp(out / "manifest.json"));
  CHECK(j["seed"] == 9);
  CHECK(j["config"]["train"]["seed"] == 9);
  CHECK(StructNet::load(out / "checkpoint.fstn").config().stage_channels == std::vector<std::size_t>{4, 8});
  CHECK(run.out.str().find("epoch 2") != std::string::npos);

  const Cli again({"train", "--config", cfg.string(), "--out", out.string()});
  CHECK(again.code == 2);
}

TEST_CASE("report losses satisfy the weighting identity") {
  const RunConfig c = tiny_config();
  const TrainResult r = train(c.network, c.train, make_datasets(c.data, 1));
  for (const EpochReport& e : r.reports) {
    CHECK(std::abs(e.loss.total - ((1.0 - e.loss.alpha) * e.loss.l_ce + e.loss.alpha * e.loss.l_scl)) < 1e-9);
  }
}

TEST_CASE("export-data writes four splits") {
  Scratch s("fost_test_export_cli");
  const fs::path cfg = write_config(s.dir, tiny_config());
  const Cli run({"export-data", "--config", cfg.string(), "--out", (s.dir / "data").string()});
  REQUIRE_MESSAGE(run.code == 0, run.err.str());
  for (const char* name : {"source_train", "source_test", "target_train", "target_test"}) {
    CHECK(fs::exists(s.dir / "data" / (std::string(name) + ".bin")));
    CHECK(fs::exists(s.dir / "data" / (std::string(name) + ".jsonl")));
  }
  const LoadedDataset d = read_dataset_binary(s.dir / "data" / "source_train.bin");
  CHECK(d.count == 30);
  CHECK(d.classes == 3);
}

TEST_CASE("ablate runs the fusion grid") {
  CHECK(ablation_grid().size() == 4);
  CHECK(ablation_grid().front().name == "baseline");
  Scratch s("fost_test_ablate");
  RunConfig c = tiny_config();
  c.network.stage_channels = {2, 3, 4};
  c.train.epochs = 1;
  c.resolve();
  const fs::path cfg = write_config(s.dir, c);
  const Cli run({"ablate", "--config", cfg.string(), "--out", (s.dir / "ab").string()});
  REQUIRE_MESSAGE(run.code == 0, run.err.str());
  const std::string csv = slurp(s.dir / "ab" / "ablation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK(csv.find("baseline,false,false,false,4,") != std::string::npos);
  CHECK(csv.find("+S2+S3+S4,true,true,true,9,") != std::string::npos);
}
