#include "fost/harness.hpp"

#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "fost/errors.hpp"

namespace fost {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

double to_double(const std::string& text, const std::string& key) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

std::size_t to_size(const std::string& text, const std::string& key) {
  const std::string t = trim(text);
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

std::uint64_t to_u64(const std::string& text, const std::string& key) {
  const std::string t = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool to_bool(const std::string& text, const std::string& key) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& text, const std::string& key, F convert) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(convert(item, key));
  if (out.empty()) throw ConfigError(key + ": expected a comma-separated list");
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, ptr) : std::to_string(v);
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(std::uint64_t v, int) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

enum class Kind { number, boolean, text, list };

struct Field {
  const char* section;
  const char* key;
  Kind kind;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

void add_domain_fields(std::vector<Field>& f, const char* section, DomainSpec DataConfig::*member) {
  auto spec = [member](RunConfig& c) -> DomainSpec& { return c.data.*member; };
  auto cspec = [member](const RunConfig& c) -> const DomainSpec& { return c.data.*member; };
  f.push_back({section, "background", Kind::text,
               [=](RunConfig& c, const std::string& v) { spec(c).background = parse_background(trim(v)); },
               [=](const RunConfig& c) { return std::string(to_string(cspec(c).background)); }});
  f.push_back({section, "level", Kind::number,
               [=](RunConfig& c, const std::string& v) { spec(c).params.level = to_double(v, "level"); },
               [=](const RunConfig& c) { return fmt(cspec(c).params.level); }});
  f.push_back({section, "amplitude", Kind::number,
               [=](RunConfig& c, const std::string& v) { spec(c).params.amplitude = to_double(v, "amplitude"); },
               [=](const RunConfig& c) { return fmt(cspec(c).params.amplitude); }});
  f.push_back({section, "period", Kind::number,
               [=](RunConfig& c, const std::string& v) { spec(c).params.period = to_double(v, "period"); },
               [=](const RunConfig& c) { return fmt(cspec(c).params.period); }});
  f.push_back({section, "angle", Kind::number,
               [=](RunConfig& c, const std::string& v) { spec(c).params.angle = to_double(v, "angle"); },
               [=](const RunConfig& c) { return fmt(cspec(c).params.angle); }});
  f.push_back({section, "random_phase", Kind::boolean,
               [=](RunConfig& c, const std::string& v) { spec(c).params.random_phase = to_bool(v, "random_phase"); },
               [=](const RunConfig& c) { return fmt(cspec(c).params.random_phase); }});
  f.push_back({section, "foreground_intensity", Kind::number,
               [=](RunConfig& c, const std::string& v) {
                 spec(c).foreground_intensity = to_double(v, "foreground_intensity");
               },
               [=](const RunConfig& c) { return fmt(cspec(c).foreground_intensity); }});
  f.push_back({section, "foreground_intensity_shift", Kind::number,
               [=](RunConfig& c, const std::string& v) {
                 spec(c).foreground_intensity_shift = to_double(v, "foreground_intensity_shift");
               },
               [=](const RunConfig& c) { return fmt(cspec(c).foreground_intensity_shift); }});
  f.push_back({section, "noise_sigma", Kind::number,
               [=](RunConfig& c, const std::string& v) { spec(c).noise_sigma = to_double(v, "noise_sigma"); },
               [=](const RunConfig& c) { return fmt(cspec(c).noise_sigma); }});
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    // [data]
    f.push_back({"data", "classes", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.data.classes = to_size(v, "classes"); },
                 [](const RunConfig& c) { return fmt(c.data.classes); }});
    f.push_back({"data", "train_per_class", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.data.train_per_class = to_size(v, "train_per_class"); },
                 [](const RunConfig& c) { return fmt(c.data.train_per_class); }});
    f.push_back({"data", "test_per_class", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.data.test_per_class = to_size(v, "test_per_class"); },
                 [](const RunConfig& c) { return fmt(c.data.test_per_class); }});
    f.push_back({"data", "height", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.data.geometry.height = to_size(v, "height"); },
                 [](const RunConfig& c) { return fmt(c.data.geometry.height); }});
    f.push_back({"data", "width", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.data.geometry.width = to_size(v, "width"); },
                 [](const RunConfig& c) { return fmt(c.data.geometry.width); }});
    add_domain_fields(f, "source", &DataConfig::source);
    add_domain_fields(f, "target", &DataConfig::target);

    // [network]
    f.push_back({"network", "stage_channels", Kind::list,
                 [](RunConfig& c, const std::string& v) {
                   c.network.stage_channels = to_list<std::size_t>(v, "stage_channels", to_size);
                 },
                 [](const RunConfig& c) { return fmt_list(c.network.stage_channels); }});
    f.push_back({"network", "fc_dims", Kind::list,
                 [](RunConfig& c, const std::string& v) {
                   c.network.fc_dims = to_list<std::size_t>(v, "fc_dims", to_size);
                 },
                 [](const RunConfig& c) { return fmt_list(c.network.fc_dims); }});
    f.push_back({"network", "fuse_s2", Kind::boolean,
                 [](RunConfig& c, const std::string& v) { c.network.fuse_s2 = to_bool(v, "fuse_s2"); },
                 [](const RunConfig& c) { return fmt(c.network.fuse_s2); }});
    f.push_back({"network", "fuse_s3", Kind::boolean,
                 [](RunConfig& c, const std::string& v) { c.network.fuse_s3 = to_bool(v, "fuse_s3"); },
                 [](const RunConfig& c) { return fmt(c.network.fuse_s3); }});
    f.push_back({"network", "fuse_s4", Kind::boolean,
                 [](RunConfig& c, const std::string& v) { c.network.fuse_s4 = to_bool(v, "fuse_s4"); },
                 [](const RunConfig& c) { return fmt(c.network.fuse_s4); }});
    f.push_back({"network", "kernel_size", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.network.kernel_size = to_size(v, "kernel_size"); },
                 [](const RunConfig& c) { return fmt(c.network.kernel_size); }});
    f.push_back({"network", "norm_epsilon", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.network.norm_epsilon = to_double(v, "norm_epsilon"); },
                 [](const RunConfig& c) { return fmt(c.network.norm_epsilon); }});
    f.push_back({"network", "norm_momentum", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.network.norm_momentum = to_double(v, "norm_momentum"); },
                 [](const RunConfig& c) { return fmt(c.network.norm_momentum); }});

    // [train]
    auto num = [&f](const char* key, double TrainConfig::*m) {
      f.push_back({"train", key, Kind::number,
                   [key, m](RunConfig& c, const std::string& v) { c.train.*m = to_double(v, key); },
                   [m](const RunConfig& c) { return fmt(c.train.*m); }});
    };
    auto count = [&f](const char* key, std::size_t TrainConfig::*m) {
      f.push_back({"train", key, Kind::number,
                   [key, m](RunConfig& c, const std::string& v) { c.train.*m = to_size(v, key); },
                   [m](const RunConfig& c) { return fmt(c.train.*m); }});
    };
    num("alpha", &TrainConfig::alpha);
    num("eta0_conv", &TrainConfig::eta0_conv);
    num("eta0_fc", &TrainConfig::eta0_fc);
    num("a", &TrainConfig::a);
    num("b", &TrainConfig::b);
    num("momentum", &TrainConfig::momentum);
    count("epochs", &TrainConfig::epochs);
    count("iterations_per_epoch", &TrainConfig::iterations_per_epoch);
    count("batch_classes", &TrainConfig::batch_classes);
    count("per_class_per_domain", &TrainConfig::per_class_per_domain);
    count("contrastive_warmup_epochs", &TrainConfig::contrastive_warmup_epochs);
    f.push_back({"train", "dissimilarity_cutoff", Kind::number,
                 [](RunConfig& c, const std::string& v) {
                   c.train.thresholds.dissimilarity_cutoff = to_double(v, "dissimilarity_cutoff");
                 },
                 [](const RunConfig& c) { return fmt(c.train.thresholds.dissimilarity_cutoff); }});
    f.push_back({"train", "n0", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.train.thresholds.n0 = to_size(v, "n0"); },
                 [](const RunConfig& c) { return fmt(c.train.thresholds.n0); }});
    f.push_back({"train", "kmeans_max_iters", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.train.kmeans.max_iters = to_size(v, "kmeans_max_iters"); },
                 [](const RunConfig& c) { return fmt(c.train.kmeans.max_iters); }});
    f.push_back({"train", "kmeans_tol", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.train.kmeans.tol = to_double(v, "kmeans_tol"); },
                 [](const RunConfig& c) { return fmt(c.train.kmeans.tol); }});
    f.push_back({"train", "use_positive_weights", Kind::boolean,
                 [](RunConfig& c, const std::string& v) {
                   c.train.use_positive_weights = to_bool(v, "use_positive_weights");
                 },
                 [](const RunConfig& c) { return fmt(c.train.use_positive_weights); }});
    f.push_back({"train", "target_weighting", Kind::text,
                 [](RunConfig& c, const std::string& v) { c.train.target_weighting = parse_target_weighting(trim(v)); },
                 [](const RunConfig& c) { return std::string(to_string(c.train.target_weighting)); }});
    f.push_back({"train", "cluster_layer", Kind::text,
                 [](RunConfig& c, const std::string& v) { c.train.cluster_layer = parse_cluster_layer(trim(v)); },
                 [](const RunConfig& c) { return std::string(to_string(c.train.cluster_layer)); }});
    f.push_back({"train", "warm_start_centers", Kind::boolean,
                 [](RunConfig& c, const std::string& v) {
                   c.train.warm_start_centers = to_bool(v, "warm_start_centers");
                 },
                 [](const RunConfig& c) { return fmt(c.train.warm_start_centers); }});
    f.push_back({"train", "seed", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.train.seed = to_u64(v, "seed"); },
                 [](const RunConfig& c) { return fmt(c.train.seed, 0); }});

    // [kernel]
    f.push_back({"kernel", "bandwidth", Kind::text,
                 [](RunConfig& c, const std::string& v) {
                   const std::string t = trim(v);
                   if (t == "median") {
                     c.train.kernel.bandwidth_mode = BandwidthMode::median_heuristic;
                   } else if (t == "fixed") {
                     c.train.kernel.bandwidth_mode = BandwidthMode::fixed;
                   } else {
                     throw ConfigError("bandwidth: expected median or fixed, got '" + t + "'");
                   }
                 },
                 [](const RunConfig& c) {
                   return std::string(c.train.kernel.bandwidth_mode == BandwidthMode::fixed ? "fixed" : "median");
                 }});
    f.push_back({"kernel", "fixed_sigma", Kind::number,
                 [](RunConfig& c, const std::string& v) { c.train.kernel.fixed_sigma = to_double(v, "fixed_sigma"); },
                 [](const RunConfig& c) { return fmt(c.train.kernel.fixed_sigma.value_or(1.0)); }});
    f.push_back({"kernel", "sigma_multipliers", Kind::list,
                 [](RunConfig& c, const std::string& v) {
                   c.train.kernel.sigma_multipliers = to_list<double>(v, "sigma_multipliers", to_double);
                 },
                 [](const RunConfig& c) { return fmt_list(c.train.kernel.sigma_multipliers); }});
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& section, const std::string& key) {
  for (const Field& f : fields())
    if (section == f.section && key == f.key) return &f;
  return nullptr;
}

ordered_json config_json(const RunConfig& config) {
  ordered_json out = ordered_json::object();
  for (const Field& f : fields()) {
    const std::string value = f.get(config);
    ordered_json& slot = out[f.section][f.key];
    switch (f.kind) {
      case Kind::text: slot = value; break;
      case Kind::boolean: slot = value == "true"; break;
      case Kind::number: slot = ordered_json::parse(value); break;
      case Kind::list: slot = ordered_json::parse("[" + value + "]"); break;
    }
  }
  return out;
}

std::string sig6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoFailure("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoFailure("failed writing " + path.string());
}

std::string compact_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

struct UsageError : Error {
  using Error::Error;
};

RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed) {
  if (!fs::exists(path)) throw UsageError("config not found: " + path);
  RunConfig cfg = load_config(path);
  if (seed) cfg.train.seed = *seed;
  cfg.resolve();
  return cfg;
}

fs::path choose_output(const std::string& requested, const std::string& prefix, std::uint64_t seed) {
  const fs::path dir = requested.empty()
                           ? default_output_root() / (prefix + "-" + compact_timestamp() + "-s" + std::to_string(seed))
                           : fs::path(requested);
  if (fs::exists(dir)) throw UsageError("output directory already exists: " + dir.string());
  return dir;
}

void print_epoch(std::ostream& out, const EpochReport& r) {
  out << "epoch " << r.epoch << "  total " << sig6(r.loss.total) << "  ce " << sig6(r.loss.l_ce) << "  scl "
      << sig6(r.loss.l_scl) << "  pseudo_acc " << sig6(r.pseudo_label_acc) << "  retained " << r.n_retained
      << "  eligible " << r.n_eligible_classes << "  target_acc " << sig6(r.target_acc) << "  (" << sig6(r.seconds)
      << " s)\n";
  out.flush();
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out_dir,
              std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_run_config(config_path, seed);
  const fs::path dir = choose_output(out_dir, "train", cfg.train.seed);
  RunManifest manifest{"train", config_path, cfg, cfg.train.seed, dir, utc_timestamp()};

  const Datasets data = make_datasets(cfg.data, cfg.train.seed);
  TrainResult result = train(cfg.network, cfg.train, data, [&out](const EpochReport& r) { print_epoch(out, r); });
  for (const std::string& w : result.warnings) err << "warning: " << w << "\n";

  write_atomically(dir, [&](const fs::path& tmp) {
    write_metrics(result.reports, tmp / "metrics.csv");
    result.net.save(tmp / "checkpoint.fstn");
    write_text(tmp / "manifest.json", manifest_json(manifest));
  });
  out << "source_test_acc " << sig6(evaluate(result.net, data.source_test)) << "  target_test_acc "
      << sig6(evaluate(result.net, data.target_test)) << "\n";
  out << "wrote " << dir.string() << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out_dir,
               std::ostream& out, std::ostream& err) {
  const RunConfig base = load_run_config(config_path, seed);
  const fs::path dir = choose_output(out_dir, "ablate", base.train.seed);
  RunManifest manifest{"ablate", config_path, base, base.train.seed, dir, utc_timestamp()};
  const Datasets data = make_datasets(base.data, base.train.seed);

  std::vector<AblationRow> rows = ablation_grid();
  for (AblationRow& row : rows) {
    RunConfig cfg = base;
    cfg.network.fuse_s2 = row.fuse_s2;
    cfg.network.fuse_s3 = row.fuse_s3;
    cfg.network.fuse_s4 = row.fuse_s4;
    cfg.resolve();
    row.f_vec_dim = cfg.network.fused_channels();
    out << "== " << row.name << " (f_vec " << row.f_vec_dim << ")\n";
    TrainResult result = train(cfg.network, cfg.train, data, [&out](const EpochReport& r) { print_epoch(out, r); });
    for (const std::string& w : result.warnings) err << "warning: " << w << "\n";
    row.source_acc = evaluate(result.net, data.source_test);
    row.target_acc = evaluate(result.net, data.target_test);
  }
  const std::string table = format_ablation(rows);
  write_atomically(dir, [&](const fs::path& tmp) {
    write_text(tmp / "ablation.csv", table);
    write_text(tmp / "manifest.json", manifest_json(manifest));
  });
  out << table << "wrote " << dir.string() << "\n";
  return 0;
}

int cmd_export(const std::string& config_path, const std::string& out_dir, std::ostream& out) {
  const RunConfig cfg = load_run_config(config_path, std::nullopt);
  const fs::path dir = choose_output(out_dir, "data", cfg.train.seed);
  RunManifest manifest{"export-data", config_path, cfg, cfg.train.seed, dir, utc_timestamp()};
  const Datasets data = make_datasets(cfg.data, cfg.train.seed);
  write_atomically(dir, [&](const fs::path& tmp) {
    const std::pair<const char*, const std::vector<Sample>*> parts[] = {{"source_train", &data.source_train},
                                                                        {"source_test", &data.source_test},
                                                                        {"target_train", &data.target_train},
                                                                        {"target_test", &data.target_test}};
    for (const auto& [name, samples] : parts) {
      write_dataset_binary(tmp / (std::string(name) + ".bin"), *samples, cfg.data.classes);
      write_dataset_manifest(tmp / (std::string(name) + ".jsonl"), *samples);
    }
    write_text(tmp / "manifest.json", manifest_json(manifest));
  });
  out << "wrote " << dir.string() << "\n";
  return 0;
}

int cmd_selftest(const SuiteRunner& suites, std::ostream& out, std::ostream& err) {
  if (!suites) {
    err << "selftest: no suites linked into this binary\n";
    return 1;
  }
  bool all = true;
  for (const SuiteResult& r : suites()) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) out << ": " << r.detail;
    out << "\n";
    all = all && r.passed;
  }
  out.flush();
  return all ? 0 : 1;
}

}  // namespace

const char* const kMetricsHeader =
    "epoch,loss_total,loss_ce,loss_scl,lr,pseudo_label_acc,n_retained,n_eligible_classes,target_acc,seconds";

void RunConfig::resolve() {
  network.num_classes = data.classes;
  network.input = InputShape{1, data.geometry.height, data.geometry.width};
  data.source.domain = DomainId::source;
  data.target.domain = DomainId::target;
  if (data.classes < 2) throw ConfigError("data.classes must be at least 2");
  validate_domain_pair(data.source, data.target);
  network.validate();
  train.validate();
  if (train.batch_classes > data.classes) throw ConfigError("train.batch_classes exceeds data.classes");
  if (train.per_class_per_domain > data.train_per_class) {
    throw ConfigError("train.per_class_per_domain exceeds data.train_per_class");
  }
}

RunConfig parse_config(std::istream& in, const std::string& origin) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(origin + ": key '" + section + "' outside of a section");
    for (const auto& [key, value] : body) {
      const Field* f = find_field(section, key);
      if (!f) throw ConfigError(origin + ": unknown key '" + key + "' in section [" + section + "]");
      try {
        f->set(cfg, value.data());
      } catch (const Error& e) {
        throw ConfigError(origin + ": [" + section + "] " + e.what());
      }
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config not found: " + path.string());
  return parse_config(in, path.string());
}

std::string render_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

std::string format_metrics(std::span<const EpochReport> reports) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const EpochReport& r : reports) {
    out += std::to_string(r.epoch) + "," + sig6(r.loss.total) + "," + sig6(r.loss.l_ce) + "," + sig6(r.loss.l_scl) +
           "," + sig6(r.lr) + "," + sig6(r.pseudo_label_acc) + "," + std::to_string(r.n_retained) + "," +
           std::to_string(r.n_eligible_classes) + "," + sig6(r.target_acc) + "," + sig6(r.seconds) + "\n";
  }
  return out;
}

void write_metrics(std::span<const EpochReport> reports, const std::filesystem::path& path) {
  if (reports.empty()) throw IoFailure("write_metrics: no epoch reports");
  write_text(path, format_metrics(reports));
}

std::string manifest_json(const RunManifest& m) {
  ordered_json j;
  j["command"] = m.command;
  j["config_path"] = m.config_path;
  j["seed"] = m.seed;
  j["output_dir"] = m.output_dir.string();
  j["started_at"] = m.started_at;
  j["config"] = config_json(m.config);
  return j.dump(2) + "\n";
}

void write_atomically(const std::filesystem::path& final_dir,
                      const std::function<void(const std::filesystem::path&)>& fill) {
  static std::atomic<unsigned> counter{0};
  const fs::path parent = final_dir.has_parent_path() ? final_dir.parent_path() : fs::path(".");
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoFailure("cannot create " + parent.string() + ": " + ec.message());
  const fs::path tmp = parent / ("." + final_dir.filename().string() + ".tmp-" + std::to_string(::getpid()) + "-" +
                                 std::to_string(counter++));
  fs::create_directory(tmp, ec);
  if (ec) throw IoFailure("cannot create " + tmp.string() + ": " + ec.message());
  try {
    fill(tmp);
    fs::rename(tmp, final_dir);
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
}

std::filesystem::path default_output_root() {
  const char* env = std::getenv("FOST_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<AblationRow> ablation_grid() {
  return {{"baseline", false, false, false},
          {"+S2", true, false, false},
          {"+S2+S3", true, true, false},
          {"+S2+S3+S4", true, true, true}};
}

std::string format_ablation(std::span<const AblationRow> rows) {
  std::string out = "row,fuse_s2,fuse_s3,fuse_s4,f_vec_dim,source_acc,target_acc\n";
  for (const AblationRow& r : rows) {
    out += r.name + "," + fmt(r.fuse_s2) + "," + fmt(r.fuse_s3) + "," + fmt(r.fuse_s4) + "," +
           std::to_string(r.f_vec_dim) + "," + sig6(r.source_acc) + "," + sig6(r.target_acc) + "\n";
  }
  return out;
}

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
                const SuiteRunner& selftest) {
  CLI::App app{"Foreground object structure transfer on synthetic shape domains", "fost"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;

  CLI::App* train_cmd = app.add_subcommand("train", "Train one run and write metrics, manifest and checkpoint");
  train_cmd->add_option("--config", config_path, "Config file")->required();
  train_cmd->add_option("--seed", seed, "Override [train] seed");
  train_cmd->add_option("--out", out_dir, "Run directory (default: $FOST_OUT_DIR or ./runs)");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "Run the structure-fusion toggle grid");
  ablate_cmd->add_option("--config", config_path, "Config file")->required();
  ablate_cmd->add_option("--seed", seed, "Override [train] seed");
  ablate_cmd->add_option("--out", out_dir, "Output directory");

  CLI::App* selftest_cmd = app.add_subcommand("selftest", "Run the oracle suites");

  CLI::App* export_cmd = app.add_subcommand("export-data", "Write the generated datasets to disk");
  export_cmd->add_option("--config", config_path, "Config file")->required();
  export_cmd->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, seed, out_dir, out, err);
    if (ablate_cmd->parsed()) return cmd_ablate(config_path, seed, out_dir, out, err);
    if (export_cmd->parsed()) return cmd_export(config_path, out_dir, out);
    if (selftest_cmd->parsed()) return cmd_selftest(selftest, out, err);
  } catch (const UsageError& e) {
    err << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidConfig& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const AlphaOutOfRange& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << "usage error: no command\n";
  return 2;
}

}  // namespace fost
