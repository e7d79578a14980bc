#include "ntklab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ntklab/hash.hpp"
#include "ntklab/ntk.hpp"
#include "ntklab/seed.hpp"

namespace ntklab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

ConfigError::ConfigError(std::string key, const std::string& message)
    : std::invalid_argument(key + ": " + message), key_(std::move(key)) {}

namespace {

enum class Type { integer, real, boolean, text, int_list, real_list };

struct KeySpec {
  std::string section;
  std::string key;
  Type type;
  json fallback;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  std::vector<std::string> choices;
};

const std::vector<KeySpec>& schema() {
  const double inf = std::numeric_limits<double>::infinity();
  static const std::vector<KeySpec> s = {
      {"model", "width", Type::integer, 256, 1, 1e6},
      {"model", "depth", Type::integer, 3, 1, 64},
      {"model", "activation", Type::text, "softplus", 0, 0, {"softplus", "relu"}},
      {"model", "beta_act", Type::real, 5.0, 0, inf},
      {"model", "prefactor", Type::real, 1.404, 0, inf},
      {"model", "bias", Type::boolean, false},
      {"model", "alpha", Type::real, 1.0, 0, inf},
      {"model", "variant", Type::text, "centered", 0, 0, {"centered", "uncentered"}},
      {"loss", "beta", Type::real, kDefaultLossBeta, 0, inf},
      {"flow", "eps_grad", Type::real, 1e-4, 0, inf},
      {"flow", "max_output_change", Type::real, 0.1, 0, inf},
      {"flow", "dt_init", Type::real, 1e-4, 0, inf},
      {"flow", "dt_grow", Type::real, 1.1, 1, inf},
      {"flow", "dt_shrink", Type::real, 0.5, 0, 1},
      {"flow", "min_dt", Type::real, 1e-30, 0, inf},
      {"flow", "max_steps", Type::integer, 1000000, 1, 1e15},
      {"flow", "checkpoint_ratio", Type::real, 1.3, 1, inf},
      {"flow", "checkpoint_t0", Type::real, 1e-6, 0, inf},
      {"flow", "accept_gradient_jumps", Type::boolean, false},
      {"data", "dataset", Type::text, "teacher", 0, 0, {"teacher", "fashion", "mnist", "mnist-pca10"}},
      {"data", "path", Type::text, ""},
      {"data", "n_train", Type::integer, 1000, 1, 1e7},
      {"data", "n_test", Type::integer, 2000, 1, 1e7},
      {"data", "seed", Type::integer, 0, 0, 9.007199254740992e15},
      {"data", "dim", Type::integer, 10, 1, 1e5},
      {"data", "teacher_width", Type::integer, 32, 1, 1e5},
      {"data", "teacher_depth", Type::integer, 2, 1, 64},
      {"data", "positive_classes", Type::int_list, json::array({0, 1, 2, 3, 4}), 0, 9},
      {"run", "seed", Type::integer, 0, 0, 9.007199254740992e15},
      {"run", "ensemble", Type::integer, 10, 1, 1e6},
      {"run", "jobs", Type::integer, 1, 1, 4096},
      {"sweep", "grid", Type::text, "fixed_width", 0, 0,
       {"fixed_width", "fixed_scale", "product", "list"}},
      {"sweep", "widths", Type::int_list, json::array({32, 128, 512}), 1, 1e6},
      {"sweep", "scales", Type::real_list, json::array(), 0, inf},
      {"sweep", "scale_min", Type::real, 1e-3, 0, inf},
      {"sweep", "scale_max", Type::real, 1e5, 0, inf},
      {"sweep", "scale_points", Type::integer, 9, 1, 1e4},
      {"sweep", "scale", Type::real, 1e-2, 0, inf},
      {"sweep", "alphas", Type::real_list, json::array(), 0, inf},
      {"sweep", "allow_tiny_scale", Type::boolean, false},
      {"sweep", "train_sizes", Type::int_list, json::array(), 1, 1e7},
      {"observables", "kernel_change", Type::boolean, true},
      {"observables", "weight_motion", Type::boolean, true},
      {"observables", "output_norm", Type::boolean, true},
      {"observables", "preactivation_rates", Type::boolean, false},
      {"observables", "kernel_checkpoints", Type::boolean, false},
      {"observables", "probe_size", Type::integer, 256, 1, 1e6},
      {"ntk", "memory_budget_mb", Type::integer, 1024, 1, 1e7},
      {"ntk", "block_size", Type::integer, 32, 1, 1e6},
  };
  return s;
}

const KeySpec& spec_for(const std::string& section, const std::string& key) {
  for (const auto& k : schema())
    if (k.section == section && k.key == key) return k;
  throw ConfigError(section + "." + key, "unknown key");
}

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double parse_number(const std::string& name, const std::string& text) {
  const std::string t = trim(text);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || *end != '\0' || !std::isfinite(v))
    throw ConfigError(name, "expected a number, got '" + text + "'");
  return v;
}

json parse_value(const KeySpec& k, const std::string& text) {
  const std::string name = k.section + "." + k.key;
  auto checked = [&](double v) {
    if (v < k.lo || v > k.hi || ((k.type == Type::real || k.type == Type::real_list) && k.lo == 0 && v <= 0.0))
      throw ConfigError(name, "value " + text + " out of range");
    return v;
  };
  auto integer = [&](const std::string& t) -> json {
    const double v = checked(parse_number(name, t));
    if (v != std::floor(v)) throw ConfigError(name, "expected an integer, got '" + t + "'");
    if (v >= 0) return static_cast<std::uint64_t>(v);
    return static_cast<std::int64_t>(v);
  };
  auto list = [&](auto&& item) {
    json out = json::array();
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      if (trim(cell).empty()) continue;
      out.push_back(item(cell));
    }
    return out;
  };
  switch (k.type) {
    case Type::integer: return integer(text);
    case Type::real: return checked(parse_number(name, text));
    case Type::boolean: {
      const std::string t = trim(text);
      if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
      if (t == "false" || t == "0" || t == "no" || t == "off") return false;
      throw ConfigError(name, "expected true or false, got '" + text + "'");
    }
    case Type::text: {
      const std::string t = trim(text);
      if (!k.choices.empty() && std::find(k.choices.begin(), k.choices.end(), t) == k.choices.end()) {
        std::string allowed;
        for (const auto& c : k.choices) allowed += (allowed.empty() ? "" : ", ") + c;
        throw ConfigError(name, "'" + t + "' is not one of " + allowed);
      }
      return t;
    }
    case Type::int_list: return list(integer);
    case Type::real_list: return list([&](const std::string& c) { return json(checked(parse_number(name, c))); });
  }
  return nullptr;
}

template <class T>
T get(const Config& cfg, const char* section, const char* key) {
  return cfg.at(section).at(key).get<T>();
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string dataset_id(const Config& cfg) { return content_hash(cfg.at("data")).substr(0, 16); }

}  // namespace

Config default_config() {
  Config c = json::object();
  for (const auto& k : schema()) c[k.section][k.key] = k.fallback;
  return c;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> keys;
  for (const auto& k : schema()) keys.push_back(k.section + "." + k.key);
  return keys;
}

Config parse_config(std::istream& in, const std::string& origin) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin, std::string("cannot parse: ") + e.message() + " at line " +
                                  std::to_string(e.line()));
  }
  Config c = default_config();
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError(section, "key outside of a section");
    for (const auto& [key, value] : body) {
      const KeySpec& k = spec_for(section, key);
      c[section][key] = parse_value(k, value.data());
    }
  }
  return c;
}

Config load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path.string());
  return parse_config(in, path.string());
}

void apply_override(Config& cfg, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw ConfigError(dotted_key, "expected section.key");
  const std::string section = dotted_key.substr(0, dot), key = dotted_key.substr(dot + 1);
  cfg[section][key] = parse_value(spec_for(section, key), value);
}

void validate_config(const Config& cfg) {
  for (const auto& [section, body] : cfg.items())
    for (const auto& [key, value] : body.items()) spec_for(section, key);
  const std::string ds = get<std::string>(cfg, "data", "dataset");
  if (ds != "teacher") {
    const std::string path = get<std::string>(cfg, "data", "path");
    if (path.empty()) throw ConfigError("data.path", "dataset '" + ds + "' needs a data directory");
    if (!fs::is_directory(path)) throw ConfigError("data.path", "no such directory: " + path);
    for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                          "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"})
      if (!fs::exists(fs::path(path) / f))
        throw ConfigError("data.path", "missing " + (fs::path(path) / f).string());
    const auto n_train = get<int>(cfg, "data", "n_train"), n_test = get<int>(cfg, "data", "n_test");
    if (n_train % 10 != 0) throw ConfigError("data.n_train", "must be a multiple of 10 for image data");
    if (n_test % 10 != 0) throw ConfigError("data.n_test", "must be a multiple of 10 for image data");
    if (cfg.at("data").at("positive_classes").empty())
      throw ConfigError("data.positive_classes", "must not be empty");
  }
  const std::string grid = get<std::string>(cfg, "sweep", "grid");
  if (cfg.at("sweep").at("widths").empty()) throw ConfigError("sweep.widths", "must not be empty");
  if (grid == "list" && cfg.at("sweep").at("alphas").size() != cfg.at("sweep").at("widths").size())
    throw ConfigError("sweep.alphas", "list grid needs one alpha per entry of sweep.widths");
  if (get<double>(cfg, "sweep", "scale_max") < get<double>(cfg, "sweep", "scale_min"))
    throw ConfigError("sweep.scale_max", "must be >= sweep.scale_min");
}

std::string config_hash(const Config& cfg, const std::string& command) {
  Config c = cfg;
  c["run"].erase("jobs");  // does not change any result
  return content_hash(json{{"command", command}, {"config", c}}).substr(0, 16);
}

Architecture architecture_from(const Config& cfg, int input_dim) {
  Architecture a;
  a.input_dim = input_dim;
  a.width = get<int>(cfg, "model", "width");
  a.depth = get<int>(cfg, "model", "depth");
  a.use_bias = get<bool>(cfg, "model", "bias");
  a.activation = get<std::string>(cfg, "model", "activation") == "relu"
                     ? Activation::make_relu()
                     : Activation::make_softplus(get<double>(cfg, "model", "beta_act"),
                                                 get<double>(cfg, "model", "prefactor"));
  a.validate();
  return a;
}

FlowConfig flow_from(const Config& cfg) {
  FlowConfig f;
  f.eps_grad = get<double>(cfg, "flow", "eps_grad");
  f.max_output_change = get<double>(cfg, "flow", "max_output_change");
  f.dt_init = get<double>(cfg, "flow", "dt_init");
  f.dt_grow = get<double>(cfg, "flow", "dt_grow");
  f.dt_shrink = get<double>(cfg, "flow", "dt_shrink");
  f.min_dt = get<double>(cfg, "flow", "min_dt");
  f.max_steps = get<std::int64_t>(cfg, "flow", "max_steps");
  f.checkpoint_ratio = get<double>(cfg, "flow", "checkpoint_ratio");
  f.checkpoint_t0 = get<double>(cfg, "flow", "checkpoint_t0");
  f.loss_beta = get<double>(cfg, "loss", "beta");
  // ReLU gradients jump at every kink; without this the step size stalls in front of one.
  f.accept_gradient_jumps = get<bool>(cfg, "flow", "accept_gradient_jumps") ||
                            get<std::string>(cfg, "model", "activation") == "relu";
  f.validate();
  return f;
}

Dataset dataset_from(const Config& cfg) {
  const std::string ds = get<std::string>(cfg, "data", "dataset");
  const int n_train = get<int>(cfg, "data", "n_train"), n_test = get<int>(cfg, "data", "n_test");
  const auto seed = get<std::uint64_t>(cfg, "data", "seed");
  if (ds == "teacher") {
    TeacherSpec t;
    t.width = get<int>(cfg, "data", "teacher_width");
    t.depth = get<int>(cfg, "data", "teacher_depth");
    return synthetic_teacher(seed, get<int>(cfg, "data", "dim"), n_train, n_test, t);
  }
  const fs::path dir = get<std::string>(cfg, "data", "path");
  const IdxData train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  const IdxData test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  ImageSplitConfig split;
  split.positive_classes.clear();
  for (int c : cfg.at("data").at("positive_classes")) split.positive_classes.insert(c);
  split.train_per_class = n_train / 10;
  split.test_per_class = n_test / 10;
  split.seed = seed;
  split.source = ds;
  if (ds == "mnist-pca10") split.pca_rank = 10;
  return make_image_dataset(train, test, split);
}

std::vector<GridPoint> grid_from(const Config& cfg) {
  const json& s = cfg.at("sweep");
  const std::vector<int> widths = s.at("widths").get<std::vector<int>>();
  std::vector<double> scales = s.at("scales").get<std::vector<double>>();
  if (scales.empty())
    scales = log_space(s.at("scale_min"), s.at("scale_max"), s.at("scale_points"));
  const std::string grid = s.at("grid");
  if (grid == "fixed_width") return grid_fixed_width(get<int>(cfg, "model", "width"), scales);
  if (grid == "fixed_scale") return grid_fixed_scale(s.at("scale"), widths);
  if (grid == "product") return grid_product(widths, scales);
  std::vector<GridPoint> pts;
  const auto alphas = s.at("alphas").get<std::vector<double>>();
  for (std::size_t i = 0; i < alphas.size(); ++i) pts.push_back({alphas[i], widths.at(i)});
  return pts;
}

SweepConfig sweep_from(const Config& cfg, std::shared_ptr<const Dataset> data) {
  SweepConfig s;
  s.points = grid_from(cfg);
  s.ensemble_size = get<int>(cfg, "run", "ensemble");
  s.arch = architecture_from(cfg, data->dim());
  s.variant = parse_variant(get<std::string>(cfg, "model", "variant"));
  s.flow = flow_from(cfg);
  s.base_seed = get<std::uint64_t>(cfg, "run", "seed");
  s.jobs = get<int>(cfg, "run", "jobs");
  s.allow_tiny_scale = get<bool>(cfg, "sweep", "allow_tiny_scale");
  s.observables.kernel_change = get<bool>(cfg, "observables", "kernel_change");
  s.observables.weight_motion = get<bool>(cfg, "observables", "weight_motion");
  s.observables.output_norm = get<bool>(cfg, "observables", "output_norm");
  s.observables.preactivation_rates = get<bool>(cfg, "observables", "preactivation_rates");
  s.observables.kernel_checkpoints = get<bool>(cfg, "observables", "kernel_checkpoints");
  s.observables.kernel_probe_size = get<int>(cfg, "observables", "probe_size");
  s.dataset_id = dataset_id(cfg);
  s.data = std::move(data);
  return s;
}

json to_json(const RunManifest& m) {
  return {{"config_hash", m.config_hash},     {"command", m.command},
          {"tool_version", m.tool_version},   {"base_seed", m.base_seed},
          {"member_seeds", m.member_seeds},   {"dataset_provenance", m.dataset_provenance},
          {"config", m.config},               {"started", m.started},
          {"finished", m.finished},           {"outputs", m.outputs},
          {"extra", m.extra}};
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.config_hash = j.at("config_hash");
  m.command = j.at("command");
  m.tool_version = j.at("tool_version");
  m.base_seed = j.at("base_seed");
  m.member_seeds = j.at("member_seeds").get<std::vector<std::uint64_t>>();
  m.dataset_provenance = j.at("dataset_provenance");
  m.config = j.at("config");
  m.started = j.at("started");
  m.finished = j.at("finished");
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  m.extra = j.value("extra", json::object());
  return m;
}

void write_manifest(const RunManifest& m, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << to_json(m).dump(2) << '\n';
}

RunManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest in " + dir.string());
  return manifest_from_json(json::parse(in));
}

std::vector<std::string> validate_manifest(const fs::path& dir) {
  std::vector<std::string> problems;
  RunManifest m;
  try {
    m = read_manifest(dir);
  } catch (const std::exception& e) {
    return {e.what()};
  }
  try {
    if (config_hash(m.config, m.command) != m.config_hash)
      problems.push_back("config hash does not match the stored config");
  } catch (const std::exception& e) {
    problems.push_back(std::string("stored config unusable: ") + e.what());
  }
  if (dir.filename() != m.config_hash)
    problems.push_back("directory name " + dir.filename().string() + " differs from hash " + m.config_hash);
  for (const auto& o : m.outputs)
    if (!fs::exists(dir / o)) problems.push_back("missing output " + o);
  return problems;
}

fs::path results_root() {
  if (const char* env = std::getenv(kResultsEnv); env && *env) return env;
  return "results";
}

// ---------------------------------------------------------------- figures

namespace {

struct Series {
  std::string name;
  std::vector<double> x, y, yerr;
};

struct Figure {
  std::string id;
  std::string title;
  std::string x_label, y_label;
  std::string x_scale = "log", y_scale = "log";
  std::vector<Series> series;
  json annotations = json::array();
};

Table load_sweep_table(const fs::path& dir, const std::string& figure) {
  const fs::path p = dir / "tables" / "sweep.csv";
  if (!fs::exists(p))
    throw std::runtime_error("figure " + figure + " needs tables/sweep.csv in " + dir.string());
  return read_csv(p);
}

std::vector<double> distinct(const std::vector<double>& values, bool log_round) {
  std::vector<double> out;
  for (double v : values) {
    bool seen = false;
    for (double u : out)
      if (log_round ? std::abs(std::log10(u) - std::log10(v)) < 1e-6 : u == v) seen = true;
    if (!seen) out.push_back(v);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string label(const char* name, double v) {
  std::ostringstream s;
  s << name << '=' << v;
  return s.str();
}

// Rows of `t` with column `key` equal to `value`, ordered by column `by`.
std::vector<std::vector<double>> rows_where(const Table& t, const std::string& key, double value,
                                            const std::string& by, bool log_match) {
  const std::size_t k = t.column_index(key), b = t.column_index(by);
  std::vector<std::vector<double>> rows;
  for (const auto& r : t.rows) {
    const bool match = log_match ? std::abs(std::log10(r[k]) - std::log10(value)) < 1e-6 : r[k] == value;
    if (match) rows.push_back(r);
  }
  std::sort(rows.begin(), rows.end(), [&](const auto& p, const auto& q) { return p[b] < q[b]; });
  return rows;
}

// Series of y against x, one per distinct value of `group`.
void grouped(Figure& f, const Table& t, const std::string& group, const char* group_label,
             bool group_log, const std::string& x, const std::string& y, const std::string& yerr,
             const std::function<double(const std::vector<double>&)>& factor = {}) {
  const std::size_t xi = t.column_index(x), yi = t.column_index(y);
  const std::size_t ei = yerr.empty() ? 0 : t.column_index(yerr);
  for (double g : distinct(t.column(group), group_log)) {
    Series s;
    s.name = label(group_label, g);
    for (const auto& r : rows_where(t, group, g, x, group_log)) {
      const double scale = factor ? factor(r) : 1.0;
      s.x.push_back(r[xi]);
      s.y.push_back(r[yi] * scale);
      s.yerr.push_back(yerr.empty() ? 0.0 : r[ei] * scale);
    }
    f.series.push_back(std::move(s));
  }
}

void annotate_fits(Figure& f, const FitWindow& feature, const FitWindow& lazy) {
  for (const auto& s : f.series) {
    for (const auto& [name, w] : {std::pair{"feature", feature}, std::pair{"lazy", lazy}}) {
      try {
        const PowerLawFit fit = fit_power_law(s.x, s.y, w);
        json a = to_json(fit);
        a["series"] = s.name;
        a["regime"] = name;
        f.annotations.push_back(a);
      } catch (const std::exception&) {
        // fewer than four points of this series fall in the window
      }
    }
  }
}

Figure build_figure(const fs::path& dir, const std::string& id) {
  const FitWindow feature{1e-3, 1e-1}, lazy{1e3, 1e5};
  Figure f;
  f.id = id;
  const Table t = load_sweep_table(dir, id);
  if (id == "1b") {
    f.title = "test error against sqrt(h) alpha";
    f.x_label = "sqrt(h) alpha";
    f.y_label = "test error";
    f.y_scale = "linear";
    grouped(f, t, "h", "h", false, "scale", "mean_test_error", "stderr_test_error");
    const std::size_t before = f.series.size();
    grouped(f, t, "h", "h", false, "scale", "ensemble_test_error", "");
    for (std::size_t i = before; i < f.series.size(); ++i) f.series[i].name += " ensemble";
  } else if (id == "1d") {
    f.title = "rescaled test error against sqrt(h) alpha";
    f.x_label = "sqrt(h) alpha";
    f.y_label = "rescaled test error";
    f.y_scale = "linear";
    grouped(f, t, "h", "h", false, "scale", "mean_test_error", "stderr_test_error");
    for (auto& s : f.series) {
      const auto [lo, hi] = std::minmax_element(s.y.begin(), s.y.end());
      const double l = *lo, span = *hi - *lo;
      for (std::size_t i = 0; i < s.y.size(); ++i) {
        s.y[i] = span > 0 ? (s.y[i] - l) / span : 0.0;
        s.yerr[i] = span > 0 ? s.yerr[i] / span : 0.0;
      }
      try {
        f.annotations.push_back({{"series", s.name}, {"crossover_alpha_sqrt_h", crossover_locate(s.x, s.y)}});
      } catch (const std::exception&) {
      }
    }
  } else if (id == "2a") {
    f.title = "output variance against width";
    f.x_label = "h";
    f.y_label = "Var F";
    grouped(f, t, "scale", "scale", true, "h", "variance", "");
    for (auto& s : f.series) {
      if (s.x.empty()) continue;
      json ref = {{"series", s.name}, {"reference_slope", -1.0}, {"x", s.x}};
      std::vector<double> y;
      for (double x : s.x) y.push_back(s.y.front() * s.x.front() / x);
      ref["y"] = y;
      f.annotations.push_back(ref);
      if (s.x.size() >= 4) {
        json a = to_json(fit_power_law(s.x, s.y));
        a["series"] = s.name;
        f.annotations.push_back(a);
      }
    }
  } else if (id == "2c") {
    f.title = "ensemble-average test error against width";
    f.x_label = "h";
    f.y_label = "test error of the averaged predictor";
    f.y_scale = "linear";
    grouped(f, t, "scale", "scale", true, "h", "ensemble_test_error", "");
  } else if (id == "3a-right") {
    f.title = "relative kernel change against sqrt(h) alpha";
    f.x_label = "sqrt(h) alpha";
    f.y_label = "|Theta_T - Theta_0| / |Theta_0|";
    grouped(f, t, "h", "h", false, "scale", "kernel_change", "kernel_change_stderr");
    annotate_fits(f, feature, lazy);
  } else if (id == "3c") {
    f.title = "loss half-time over sqrt(h) alpha";
    f.x_label = "sqrt(h) alpha";
    f.y_label = "t_half / (sqrt(h) alpha)";
    const std::size_t si = t.column_index("scale");
    grouped(f, t, "h", "h", false, "scale", "t_half", "t_half_stderr",
            [si](const std::vector<double>& r) { return 1.0 / r[si]; });
  } else if (id == "weight-motion") {
    f.title = "relative weight motion against sqrt(h) alpha";
    f.x_label = "sqrt(h) alpha";
    f.y_label = "|w - w0| / |w0|";
    grouped(f, t, "h", "h", false, "scale", "weight_motion", "weight_motion_stderr");
    annotate_fits(f, feature, lazy);
  } else if (id == "dfnorm") {
    f.title = "output change at the loss half-time over sqrt(h)";
    f.x_label = "h";
    f.y_label = "|f(w_t) - f(w0)| / sqrt(h)";
    const std::size_t hi = t.column_index("h");
    grouped(f, t, "scale", "scale", true, "h", "output_change_half", "output_change_half_stderr",
            [hi](const std::vector<double>& r) { return 1.0 / std::sqrt(r[hi]); });
  }
  return f;
}

}  // namespace

const std::vector<std::string>& figure_ids() {
  static const std::vector<std::string> ids = {"1b", "1d", "2a", "2c", "3a-right", "3c", "weight-motion", "dfnorm"};
  return ids;
}

std::vector<fs::path> write_figure(const fs::path& results_dir, const std::string& figure_id) {
  const auto& ids = figure_ids();
  if (std::find(ids.begin(), ids.end(), figure_id) == ids.end()) {
    std::string list;
    for (const auto& i : ids) list += (list.empty() ? "" : ", ") + i;
    throw std::invalid_argument("unknown figure id '" + figure_id + "'; supported: " + list);
  }
  const Figure f = build_figure(results_dir, figure_id);
  const fs::path out = results_dir / "figures";
  fs::create_directories(out);
  const fs::path csv = out / (figure_id + ".csv"), desc = out / (figure_id + ".json");
  std::ofstream c(csv);
  c << "series,x,y,yerr\n";
  c.precision(17);
  for (const auto& s : f.series)
    for (std::size_t i = 0; i < s.x.size(); ++i)
      c << s.name << ',' << s.x[i] << ',' << s.y[i] << ',' << s.yerr[i] << '\n';
  json series = json::array();
  for (const auto& s : f.series) series.push_back({{"name", s.name}, {"points", s.x.size()}});
  std::ofstream d(desc);
  d << json{{"figure", f.id},
            {"title", f.title},
            {"x", {{"label", f.x_label}, {"scale", f.x_scale}}},
            {"y", {{"label", f.y_label}, {"scale", f.y_scale}}},
            {"data", csv.filename().string()},
            {"series", series},
            {"annotations", f.annotations}}
           .dump(2)
    << '\n';
  return {csv, desc};
}

// ---------------------------------------------------------------- commands

namespace {

struct Common {
  std::string config_path;
  std::map<std::string, std::string> overrides;  // section.key -> text
  bool resume = false;
  bool bias = false;
  std::string results;
  std::string anchor = "init";
  std::string run_id;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "INI configuration file");
  const std::vector<std::pair<const char*, const char*>> flags = {
      {"--alpha", "model.alpha"},       {"--width", "model.width"},
      {"--depth", "model.depth"},       {"--activation", "model.activation"},
      {"--beta-act", "model.beta_act"}, {"--beta-loss", "loss.beta"},
      {"--dataset", "data.dataset"},    {"--n-train", "data.n_train"},
      {"--ensemble", "run.ensemble"},   {"--seed", "run.seed"},
      {"--jobs", "run.jobs"},           {"--eps-grad", "flow.eps_grad"},
      {"--variant", "model.variant"}};
  for (const auto& [flag, key] : flags) {
    std::string k = key;
    app->add_option_function<std::string>(
        flag, [&c, k](const std::string& v) { c.overrides[k] = v; }, "overrides " + k);
  }
  app->add_flag("--bias", c.bias, "add bias vectors to the hidden layers");
  app->add_flag("--resume", c.resume, "reuse completed points of an earlier run");
  app->add_option("--results", c.results, std::string("results root (default: $") + kResultsEnv + " or ./results)");
}

Config build_config(const Common& c) {
  Config cfg = c.config_path.empty() ? default_config() : load_config(c.config_path);
  for (const auto& [k, v] : c.overrides) {
    try {
      apply_override(cfg, k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(e.key(), std::string("(command-line override) ") + e.what());
    }
  }
  if (c.bias) cfg["model"]["bias"] = true;
  validate_config(cfg);
  return cfg;
}

fs::path result_dir(const Common& c, const std::string& hash) {
  return (c.results.empty() ? results_root() : fs::path(c.results)) / hash;
}

int status_code(RunStatus s) {
  switch (s) {
    case RunStatus::stopped: return exit_ok;
    case RunStatus::max_steps: return exit_max_steps;
    case RunStatus::diverged: return exit_diverged;
    case RunStatus::running: return exit_runtime;
  }
  return exit_runtime;
}

RunManifest start_manifest(const Config& cfg, const std::string& cmd, const Dataset& data) {
  RunManifest m;
  m.command = cmd;
  m.config_hash = config_hash(cfg, cmd);
  m.config = cfg;
  m.config["run"].erase("jobs");
  m.base_seed = cfg.at("run").at("seed").get<std::uint64_t>();
  m.dataset_provenance = data.provenance;
  m.started = now_iso();
  return m;
}

GramOptions gram_options(const Config& cfg) {
  GramOptions o;
  o.memory_budget_bytes = static_cast<std::size_t>(get<int>(cfg, "ntk", "memory_budget_mb")) << 20;
  o.block_size = get<int>(cfg, "ntk", "block_size");
  return o;
}

int cmd_train(const Config& cfg, const Common& c, std::ostream& out) {
  const Dataset data = dataset_from(cfg);
  RunManifest m = start_manifest(cfg, "train", data);
  const fs::path dir = result_dir(c, m.config_hash);
  const Architecture arch = architecture_from(cfg, data.dim());
  const std::uint64_t seed = member_seed(m.base_seed, 0);
  m.member_seeds = {seed};
  Predictor p(init_gaussian(arch, seed), get<double>(cfg, "model", "alpha"),
              parse_variant(get<std::string>(cfg, "model", "variant")));
  if (auto w = p.warning()) out << "warning: " << *w << '\n';
  auto [rec, trained] = train(p, data, flow_from(cfg));
  if (auto w = p.warning()) rec.warnings.push_back(*w);

  const Eigen::MatrixXd probe =
      select_columns(data.test_x, kernel_probe_indices(data, get<int>(cfg, "observables", "probe_size"), m.base_seed));
  m.extra["status"] = to_string(rec.status);
  m.extra["test_error"] = rec.checkpoints.back().test_error.value_or(std::nan(""));
  if (rec.t_half) m.extra["t_half"] = *rec.t_half;
  if (rec.status != RunStatus::diverged && get<bool>(cfg, "observables", "kernel_change"))
    m.extra["kernel_change"] = kernel_change(gram(p.params(), probe), gram(trained.params(), probe));
  write_jsonl(rec, dir / "runs" / "run-000.jsonl");
  write_params(trained.params(), dir / "runs" / "run-000.params");
  m.outputs = {"runs/run-000.jsonl", "runs/run-000.params"};
  m.finished = now_iso();
  write_manifest(m, dir);
  out << "run " << m.config_hash << ": " << to_string(rec.status) << ", " << rec.accepted_steps
      << " steps, t=" << rec.final_time << ", test error " << m.extra["test_error"] << '\n'
      << dir.string() << '\n';
  return status_code(rec.status);
}

int sweep_code(const SweepOutcome& o) {
  int code = exit_ok;
  for (const auto& r : o.results)
    for (const auto& m : r.members) code = std::max(code, status_code(m.status));
  return code;
}

json sweep_fits(const Table& t) {
  json fits = json::array();
  const FitWindow feature{1e-3, 1e-1}, lazy{1e3, 1e5};
  for (double h : distinct(t.column("h"), false)) {
    const Table row = t.where("h", h);
    for (const char* field : {"kernel_change", "weight_motion", "t_half"}) {
      for (const auto& [regime, w] : {std::pair{"feature", feature}, std::pair{"lazy", lazy}}) {
        try {
          json f = to_json(fit_power_law(row, "scale", field, w));
          f["h"] = h;
          f["field"] = field;
          f["regime"] = regime;
          fits.push_back(f);
        } catch (const std::exception&) {
        }
      }
    }
    try {
      fits.push_back({{"h", h}, {"field", "crossover_alpha"}, {"value", crossover_locate(row)}});
    } catch (const std::exception&) {
    }
  }
  return fits;
}

int cmd_sweep(const Config& cfg, const Common& c, std::ostream& out, bool single_point) {
  Config effective = cfg;
  if (single_point) {
    effective["sweep"]["grid"] = "list";
    effective["sweep"]["alphas"] = json::array({cfg.at("model").at("alpha")});
    effective["sweep"]["widths"] = json::array({cfg.at("model").at("width")});
  }
  auto data = std::make_shared<const Dataset>(dataset_from(effective));
  const std::string cmd = single_point ? "ensemble" : "sweep";
  RunManifest m = start_manifest(effective, cmd, *data);
  const fs::path dir = result_dir(c, m.config_hash);
  if (!c.resume && fs::exists(dir / "runs")) fs::remove_all(dir / "runs");
  SweepConfig sc = sweep_from(effective, data);
  for (int i = 0; i < sc.ensemble_size; ++i) m.member_seeds.push_back(member_seed(sc.base_seed, i));
  const SweepOutcome o = sweep(sc, dir);
  out << cmd << ' ' << m.config_hash << ": " << o.trained_points << " points trained, "
      << o.reused_points << " reused\n";

  for (const auto& r : o.results) m.outputs.push_back("runs/" + r.point_id + ".json");
  m.outputs.push_back("tables/sweep.csv");
  m.outputs.push_back("tables/sweep.json");
  std::ofstream(dir / "tables" / "fits.json") << sweep_fits(o.table).dump(2) << '\n';
  m.outputs.push_back("tables/fits.json");

  const auto sizes = effective.at("sweep").at("train_sizes").get<std::vector<int>>();
  if (!single_point && !sizes.empty()) {
    const VarianceScan scan = variance_vs_n(sc, sizes);
    write_csv(scan.table, dir / "tables" / "variance_vs_n.csv");
    json asym = json::array();
    for (const auto& [n, h] : scan.asymptote_width)
      asym.push_back({{"n", n}, {"h", h ? json(*h) : json(nullptr)}});
    std::ofstream(dir / "tables" / "variance_vs_n.json") << json{{"asymptote_width", asym}}.dump(2) << '\n';
    m.outputs.push_back("tables/variance_vs_n.csv");
    m.outputs.push_back("tables/variance_vs_n.json");
  }
  m.extra["complete"] = o.complete;
  m.finished = now_iso();
  write_manifest(m, dir);
  out << dir.string() << '\n';
  return sweep_code(o);
}

NetworkParams load_run_params(const Common& c, const Dataset& data) {
  if (c.run_id.empty()) throw ConfigError("--run", "anchor 'end' needs --run <id> of a train result");
  const fs::path dir = result_dir(c, c.run_id);
  const RunManifest m = read_manifest(dir);
  if (m.command != "train") throw ConfigError("--run", c.run_id + " is not a train result");
  if (m.dataset_provenance != data.provenance)
    throw ConfigError("--run", "run " + c.run_id + " was trained on a different dataset");
  return read_params(dir / "runs" / "run-000.params");
}

int cmd_ntk(const Config& cfg, const Common& c, std::ostream& out) {
  const Dataset data = dataset_from(cfg);
  Config keyed = cfg;
  keyed["anchor"] = {{"run", c.run_id}};
  RunManifest m = start_manifest(cfg, "ntk", data);
  m.config_hash = config_hash(keyed, "ntk");
  m.config = keyed;
  m.config["run"].erase("jobs");
  const fs::path dir = result_dir(c, m.config_hash);
  const auto idx = kernel_probe_indices(data, get<int>(cfg, "observables", "probe_size"), m.base_seed);
  std::vector<std::string> ids;
  for (auto i : idx) ids.push_back("test:" + std::to_string(i));
  const Eigen::MatrixXd probe = select_columns(data.test_x, idx);
  const Architecture arch = architecture_from(cfg, data.dim());
  m.member_seeds = {member_seed(m.base_seed, 0)};
  const KernelGram g0 = gram(init_gaussian(arch, m.member_seeds[0]), probe, ids, gram_options(cfg));
  write_gram(g0, dir / "grams" / "init.ntkg");
  m.outputs = {"grams/init.ntkg", "grams/init.ntkg.json"};
  const SpectrumCheck s0 = spectrum_check(g0);
  json summary = {{"probe_size", g0.size()},
                  {"init", {{"frobenius", g0.frobenius_norm()}, {"min_eigenvalue", s0.min_eigenvalue},
                            {"trace", s0.trace}, {"psd", s0.psd()}}}};
  if (!c.run_id.empty()) {
    const KernelGram g1 = gram(load_run_params(c, data), probe, ids, gram_options(cfg));
    write_gram(g1, dir / "grams" / "end.ntkg");
    m.outputs.push_back("grams/end.ntkg");
    m.outputs.push_back("grams/end.ntkg.json");
    const SpectrumCheck s1 = spectrum_check(g1);
    summary["end"] = {{"frobenius", g1.frobenius_norm()}, {"min_eigenvalue", s1.min_eigenvalue},
                      {"trace", s1.trace}, {"psd", s1.psd()}};
    summary["kernel_change"] = kernel_change(g0, g1);
  }
  fs::create_directories(dir / "tables");
  std::ofstream(dir / "tables" / "ntk.json") << summary.dump(2) << '\n';
  m.outputs.push_back("tables/ntk.json");
  m.finished = now_iso();
  write_manifest(m, dir);
  out << summary.dump(2) << '\n' << dir.string() << '\n';
  return exit_ok;
}

int cmd_frozen(const Config& cfg, const Common& c, std::ostream& out) {
  if (c.anchor != "init" && c.anchor != "end") throw ConfigError("--anchor", "expected init or end");
  const Dataset data = dataset_from(cfg);
  Config keyed = cfg;
  keyed["anchor"] = {{"point", c.anchor}, {"run", c.anchor == "end" ? c.run_id : ""}};
  RunManifest m = start_manifest(cfg, "frozen", data);
  m.config_hash = config_hash(keyed, "frozen");
  m.config = keyed;
  m.config["run"].erase("jobs");
  const fs::path dir = result_dir(c, m.config_hash);
  NetworkParams anchor;
  if (c.anchor == "end") {
    anchor = load_run_params(c, data);
  } else {
    m.member_seeds = {member_seed(m.base_seed, 0)};
    anchor = init_gaussian(architecture_from(cfg, data.dim()), m.member_seeds[0]);
  }
  const FrozenResult r = frozen_flow(anchor, data, data.test_x, flow_from(cfg), &data.test_y, gram_options(cfg));
  write_jsonl(r.record, dir / "runs" / "frozen.jsonl");
  json summary = {{"anchor", c.anchor},
                  {"status", to_string(r.record.status)},
                  {"test_error", r.eval_error ? json(*r.eval_error) : json(nullptr)},
                  {"final_time", r.record.final_time},
                  {"accepted_steps", r.record.accepted_steps}};
  if (c.anchor == "end") summary["run"] = c.run_id;
  fs::create_directories(dir / "tables");
  std::ofstream(dir / "tables" / "frozen.json") << summary.dump(2) << '\n';
  m.outputs = {"runs/frozen.jsonl", "tables/frozen.json"};
  m.extra = summary;
  m.finished = now_iso();
  write_manifest(m, dir);
  out << summary.dump(2) << '\n' << dir.string() << '\n';
  return status_code(r.record.status);
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lazy versus feature training of rescaled fully connected networks"};
  app.require_subcommand(1);
  Common common;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] :
       std::vector<std::pair<std::string, std::string>>{
           {"train", "train one predictor to the stopping rule"},
           {"ensemble", "train an ensemble at one (alpha, h) point"},
           {"sweep", "run ensembles over a grid of (alpha, h) points"},
           {"ntk", "tangent-kernel Gram on a test probe set"},
           {"frozen", "frozen-kernel dynamics anchored at init or at a trained run"}}) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, common);
    subs[name] = s;
  }
  for (const char* name : {"ntk", "frozen"}) subs[name]->add_option("--run", common.run_id, "id of a train result");
  subs["frozen"]->add_option("--anchor", common.anchor, "init or end")->check(CLI::IsMember({"init", "end"}));

  CLI::App* report = app.add_subcommand("report", "emit plot data for a figure");
  std::string report_dir, figure;
  bool list = false;
  report->add_option("results-dir", report_dir, "result directory holding tables/");
  report->add_option("figure-id", figure, "figure id");
  report->add_flag("--list", list, "print the supported figure ids");
  CLI::App* check = app.add_subcommand("check", "validate the manifest of a result directory");
  std::string check_dir;
  check->add_option("results-dir", check_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_validation;
  }

  try {
    if (report->parsed()) {
      if (list || figure.empty()) {
        for (const auto& id : figure_ids()) out << id << '\n';
        return list ? exit_ok : exit_validation;
      }
      for (const auto& p : write_figure(report_dir, figure)) out << p.string() << '\n';
      return exit_ok;
    }
    if (check->parsed()) {
      const auto problems = validate_manifest(check_dir);
      for (const auto& p : problems) err << p << '\n';
      if (problems.empty()) out << "ok\n";
      return problems.empty() ? exit_ok : exit_validation;
    }
    const Config cfg = build_config(common);
    if (subs["train"]->parsed()) return cmd_train(cfg, common, out);
    if (subs["ensemble"]->parsed()) return cmd_sweep(cfg, common, out, true);
    if (subs["sweep"]->parsed()) return cmd_sweep(cfg, common, out, false);
    if (subs["ntk"]->parsed()) return cmd_ntk(cfg, common, out);
    if (subs["frozen"]->parsed()) return cmd_frozen(cfg, common, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_validation;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return exit_validation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_runtime;
  }
  return exit_validation;
}

}  // namespace ntklab::cli
