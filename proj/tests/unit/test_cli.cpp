#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "ntklab/cli.hpp"
#include "ntklab/ntk.hpp"

using namespace ntklab;
using namespace ntklab::cli;
namespace fs = std::filesystem;

namespace {

const char* kTinyIni = R"([model]
width = 16
depth = 2
alpha = 1

[data]
n_train = 30
n_test = 60
dim = 5
teacher_width = 8
teacher_depth = 1

[run]
ensemble = 2
seed = 3

[sweep]
scales = 0.01, 1, 1000

[observables]
probe_size = 20
)";

struct Workspace {
  fs::path root;
  fs::path ini;
  Workspace() : root(fs::temp_directory_path() / "ntklab_cli_test") {
    fs::remove_all(root);
    fs::create_directories(root);
    ini = root / "tiny.ini";
    std::ofstream(ini) << kTinyIni;
  }
  ~Workspace() { fs::remove_all(root); }
};

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "ntklab");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Last non-empty output line: the result directory.
fs::path last_line(const std::string& s) {
  std::istringstream in(s);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return last;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Config parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

}  // namespace

TEST_CASE("default configuration") {
  const Config c = default_config();
  CHECK(c["model"]["depth"] == 3);
  CHECK(c["model"]["beta_act"] == 5.0);
  CHECK(c["model"]["activation"] == "softplus");
  CHECK(c["loss"]["beta"] == 20.0);
  CHECK(c["flow"]["eps_grad"] == 1e-4);
  CHECK(c["flow"]["max_output_change"] == 0.1);
  CHECK_NOTHROW(validate_config(c));
  const FlowConfig f = flow_from(c);
  CHECK(f.loss_beta == 20.0);
  const Architecture a = architecture_from(c, 10);
  CHECK(a.depth == 3);
  CHECK(a.activation.beta == 5.0);
  CHECK(std::find(known_keys().begin(), known_keys().end(), "flow.eps_grad") != known_keys().end());
}

TEST_CASE("config parsing and errors name the key") {
  const Config c = parse("[model]\nwidth = 64\nactivation = relu\n[sweep]\nwidths = 8, 16\n");
  CHECK(c["model"]["width"] == 64);
  CHECK(c["model"]["activation"] == "relu");
  CHECK(c["sweep"]["widths"] == nlohmann::json({8, 16}));
  CHECK(c["model"]["depth"] == 3);  // untouched keys keep defaults

  auto key_of = [](const std::string& text) {
    try {
      parse(text);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("no error");
  };
  CHECK(key_of("[model]\nwidht = 3\n") == "model.widht");
  CHECK(key_of("[model]\nwidth = 3.5\n") == "model.width");
  CHECK(key_of("[model]\nactivation = tanh\n") == "model.activation");
  CHECK(key_of("[model]\nalpha = -1\n") == "model.alpha");
  CHECK(key_of("[flow]\ndt_shrink = 2\n") == "flow.dt_shrink");
  CHECK(key_of("[bogus]\nx = 1\n") == "bogus.x");
  CHECK(key_of("[observables]\nkernel_change = maybe\n") == "observables.kernel_change");

  Config d = default_config();
  d["data"]["dataset"] = "fashion";
  try {
    validate_config(d);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "data.path");
  }
  Config l = default_config();
  l["sweep"]["grid"] = "list";
  l["sweep"]["alphas"] = {1.0};
  CHECK_THROWS_AS(validate_config(l), ConfigError);
}

TEST_CASE("overrides and grids") {
  Config c = parse("[model]\nalpha = 5\nwidth = 32\n");
  apply_override(c, "model.alpha", "1e3");
  apply_override(c, "model.width", "64");
  CHECK(c["model"]["alpha"] == 1e3);
  CHECK(c["model"]["width"] == 64);
  CHECK_THROWS_AS(apply_override(c, "model", "1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "model.nope", "1"), ConfigError);

  c["sweep"]["scales"] = {1.0, 100.0};
  const auto fw = grid_from(c);
  REQUIRE(fw.size() == 2);
  CHECK(fw[1].width == 64);
  CHECK(fw[1].scale() == doctest::Approx(100.0));
  c["sweep"]["grid"] = "fixed_scale";
  c["sweep"]["widths"] = {4, 16, 64};
  CHECK(grid_from(c).size() == 3);
  CHECK(grid_from(c)[2].scale() == doctest::Approx(1e-2));
  c["sweep"]["grid"] = "product";
  CHECK(grid_from(c).size() == 6);
  c["sweep"]["scales"] = nlohmann::json::array();
  c["sweep"]["grid"] = "fixed_width";
  CHECK(grid_from(c).size() == 9);  // scale_min..scale_max in 9 points
}

TEST_CASE("config hash") {
  const Config a = parse("[model]\nwidth = 64\nalpha = 2\n[data]\nn_train = 100\n");
  const Config b = parse("[data]\nn_train = 100\n[model]\nalpha = 2\nwidth = 64\n");
  CHECK(config_hash(a, "train") == config_hash(b, "train"));
  CHECK(config_hash(a, "train") != config_hash(a, "sweep"));
  Config jobs = a;
  jobs["run"]["jobs"] = 8;
  CHECK(config_hash(jobs, "train") == config_hash(a, "train"));
  Config other = a;
  other["model"]["alpha"] = 3.0;
  CHECK(config_hash(other, "train") != config_hash(a, "train"));
  CHECK(config_hash(a, "train").size() == 16);
}

TEST_CASE("manifest round trip and validation") {
  Workspace ws;
  RunManifest m;
  m.command = "train";
  m.config = default_config();
  m.config["run"].erase("jobs");
  m.config_hash = config_hash(default_config(), "train");
  m.base_seed = 4;
  m.member_seeds = {1, 2};
  m.dataset_provenance = {{"source", "teacher"}};
  m.outputs = {"runs/a.txt"};
  m.extra = {{"status", "stopped"}};
  const fs::path dir = ws.root / m.config_hash;
  write_manifest(m, dir);
  const RunManifest back = read_manifest(dir);
  CHECK(to_json(back) == to_json(m));

  auto problems = validate_manifest(dir);
  REQUIRE(problems.size() == 1);
  CHECK(problems[0].find("runs/a.txt") != std::string::npos);
  fs::create_directories(dir / "runs");
  std::ofstream(dir / "runs" / "a.txt") << "x";
  CHECK(validate_manifest(dir).empty());

  fs::rename(dir, ws.root / "renamed");
  CHECK_FALSE(validate_manifest(ws.root / "renamed").empty());
  CHECK_FALSE(validate_manifest(ws.root / "nothing-here").empty());
}

TEST_CASE("results root") {
  ::setenv(kResultsEnv, "/tmp/somewhere", 1);
  CHECK(results_root() == fs::path("/tmp/somewhere"));
  ::unsetenv(kResultsEnv);
  CHECK(results_root() == fs::path("results"));
}

TEST_CASE("train command") {
  Workspace ws;
  const std::string results = (ws.root / "results").string();
  const Run r = invoke({"train", "--config", ws.ini.string(), "--results", results});
  REQUIRE(r.code == exit_ok);
  const fs::path dir = last_line(r.out);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "runs" / "run-000.jsonl"));
  CHECK(validate_manifest(dir).empty());
  const RunManifest m = read_manifest(dir);
  CHECK(m.command == "train");
  CHECK(m.extra.at("status") == "stopped");
  CHECK(m.member_seeds == std::vector<std::uint64_t>{member_seed(3, 0)});
  CHECK(dir.filename() == m.config_hash);
  const RunRecord rec = read_jsonl(dir / "runs" / "run-000.jsonl");
  CHECK(rec.status == RunStatus::stopped);
  const NetworkParams w = read_params(dir / "runs" / "run-000.params");
  CHECK(w.arch.width == 16);

  // flags override the file
  const Run o = invoke({"train", "--config", ws.ini.string(), "--results", results, "--width", "8",
                     "--alpha", "1e3"});
  REQUIRE(o.code == exit_ok);
  const RunManifest mo = read_manifest(last_line(o.out));
  CHECK(mo.config["model"]["width"] == 8);
  CHECK(mo.config["model"]["alpha"] == 1e3);
  CHECK(mo.config_hash != m.config_hash);

  // same config, same numbers
  const Run again = invoke({"train", "--config", ws.ini.string(), "--results", results});
  CHECK(read_manifest(last_line(again.out)).extra.at("test_error") == m.extra.at("test_error"));
}

TEST_CASE("exit codes") {
  Workspace ws;
  const std::string results = (ws.root / "results").string();
  CHECK(invoke({"train", "--config", ws.ini.string(), "--results", results, "--dataset", "mnist"}).code ==
        exit_validation);
  const Run bad_key = invoke({"train", "--config", ws.ini.string(), "--results", results, "--width", "x"});
  CHECK(bad_key.code == exit_validation);
  CHECK(bad_key.err.find("model.width") != std::string::npos);
  CHECK(invoke({"train", "--no-such-flag"}).code == exit_validation);
  CHECK(invoke({}).code == exit_validation);
  CHECK(invoke({"train", "--config", (ws.root / "missing.ini").string()}).code == exit_validation);

  std::ofstream(ws.root / "capped.ini") << kTinyIni << "[flow]\nmax_steps = 3\n";
  CHECK(invoke({"train", "--config", (ws.root / "capped.ini").string(), "--results", results}).code ==
        exit_max_steps);
}

TEST_CASE("ensemble, sweep, report and resume") {
  Workspace ws;
  const std::string results = (ws.root / "results").string();

  const Run t = invoke({"train", "--config", ws.ini.string(), "--results", results});
  const Run e = invoke({"ensemble", "--config", ws.ini.string(), "--results", results, "--ensemble", "1"});
  REQUIRE(e.code == exit_ok);
  const fs::path edir = last_line(e.out);
  const Table et = read_csv(edir / "tables" / "sweep.csv");
  REQUIRE(et.size() == 1);
  // the one-member ensemble is the train run
  CHECK(et.column("mean_test_error")[0] == read_manifest(last_line(t.out)).extra.at("test_error"));

  const Run s = invoke({"sweep", "--config", ws.ini.string(), "--results", results, "--jobs", "2"});
  REQUIRE(s.code == exit_ok);
  const fs::path dir = last_line(s.out);
  CHECK(s.out.find("3 points trained") != std::string::npos);
  CHECK(validate_manifest(dir).empty());
  CHECK(fs::exists(dir / "tables" / "fits.json"));
  const std::string table = slurp(dir / "tables" / "sweep.csv");

  const Run again = invoke({"sweep", "--config", ws.ini.string(), "--results", results, "--resume"});
  CHECK(again.out.find("0 points trained, 3 reused") != std::string::npos);
  CHECK(last_line(again.out) == dir);
  CHECK(slurp(dir / "tables" / "sweep.csv") == table);

  // delete one point and resume: only it is retrained, table unchanged
  const Table st = read_csv(dir / "tables" / "sweep.csv");
  fs::remove(dir / "runs" / (st.ids[1] + ".json"));
  const Run partial = invoke({"sweep", "--config", ws.ini.string(), "--results", results, "--resume"});
  CHECK(partial.out.find("1 points trained, 2 reused") != std::string::npos);
  CHECK(slurp(dir / "tables" / "sweep.csv") == table);

  const Run rep = invoke({"report", dir.string(), "3a-right"});
  REQUIRE(rep.code == exit_ok);
  const auto desc = read_json(dir / "figures" / "3a-right.json");
  CHECK(desc.at("x").at("scale") == "log");
  CHECK(desc.at("series").size() == 1);
  CHECK(slurp(dir / "figures" / "3a-right.csv").rfind("series,x,y,yerr\n", 0) == 0);
  for (const auto& id : figure_ids()) CHECK(invoke({"report", dir.string(), id}).code == exit_ok);

  const Run unknown = invoke({"report", dir.string(), "9z"});
  CHECK(unknown.code == exit_validation);
  CHECK(unknown.err.find("3a-right") != std::string::npos);
  CHECK(invoke({"report", (ws.root / "empty").string(), "1b"}).code == exit_runtime);
  CHECK(invoke({"report", "--list"}).out.find("dfnorm") != std::string::npos);
  CHECK(invoke({"check", dir.string()}).code == exit_ok);
}

TEST_CASE("fixed-scale sweep gives the variance figure") {
  Workspace ws;
  std::ofstream(ws.root / "scale2.ini") << R"([model]
depth = 2
[data]
n_train = 30
n_test = 60
dim = 5
teacher_width = 8
teacher_depth = 1
[run]
ensemble = 2
[sweep]
grid = fixed_scale
widths = 8, 16
scale = 1
[observables]
kernel_change = false
)";
  const Run s = invoke({"sweep", "--config", (ws.root / "scale2.ini").string(), "--results",
                     (ws.root / "results").string()});
  REQUIRE(s.code == exit_ok);
  const fs::path dir = last_line(s.out);
  REQUIRE(invoke({"report", dir.string(), "2a"}).code == exit_ok);
  const auto desc = read_json(dir / "figures" / "2a.json");
  bool has_reference = false;
  for (const auto& a : desc.at("annotations"))
    if (a.contains("reference_slope") && a.at("reference_slope") == -1.0) has_reference = true;
  CHECK(has_reference);
}

TEST_CASE("ntk and frozen commands") {
  Workspace ws;
  const std::string results = (ws.root / "results").string();
  const Run t = invoke({"train", "--config", ws.ini.string(), "--results", results});
  REQUIRE(t.code == exit_ok);
  const std::string run_id = last_line(t.out).filename().string();

  const Run n = invoke({"ntk", "--config", ws.ini.string(), "--results", results, "--run", run_id});
  REQUIRE(n.code == exit_ok);
  const fs::path ndir = last_line(n.out);
  const KernelGram g = read_gram(ndir / "grams" / "init.ntkg");
  CHECK(g.size() == 20);
  CHECK(g.probe_ids[0].rfind("test:", 0) == 0);
  const auto summary = read_json(ndir / "tables" / "ntk.json");
  CHECK(summary.at("init").at("psd") == true);
  CHECK(summary.at("kernel_change").get<double>() ==
        doctest::Approx(read_manifest(last_line(t.out)).extra.at("kernel_change").get<double>()));
  CHECK(validate_manifest(ndir).empty());

  const Run fi = invoke({"frozen", "--config", ws.ini.string(), "--results", results});
  const Run fe = invoke({"frozen", "--config", ws.ini.string(), "--results", results, "--anchor", "end",
                      "--run", run_id});
  REQUIRE(fi.code == exit_ok);
  REQUIRE(fe.code == exit_ok);
  CHECK(last_line(fi.out) != last_line(fe.out));
  const auto froz = read_json(fs::path(last_line(fe.out)) / "tables" / "frozen.json");
  CHECK(froz.at("anchor") == "end");
  CHECK(froz.at("status") == "stopped");
  // anchored at the trained weights: the kernel transplant
  const Config cfg = load_config(ws.ini);
  const Dataset data = dataset_from(cfg);
  const NetworkParams w = read_params(last_line(t.out) / "runs" / "run-000.params");
  CHECK(froz.at("test_error").get<double>() ==
        doctest::Approx(kernel_transplant(w, data, flow_from(cfg))).epsilon(1e-9));

  CHECK(invoke({"frozen", "--config", ws.ini.string(), "--results", results, "--anchor", "end"}).code ==
        exit_validation);
  CHECK(invoke({"frozen", "--config", ws.ini.string(), "--anchor", "middle"}).code == exit_validation);
  CHECK(invoke({"frozen", "--config", ws.ini.string(), "--results", results, "--anchor", "end", "--run",
             "0000000000000000"})
            .code == exit_runtime);
}

TEST_CASE("built tool runs as a process") {
  const char* tool = std::getenv("NTKLAB_TOOL");
  if (!tool) return;
  Workspace ws;
  const std::string base = std::string(tool) + " train --config " + ws.ini.string() + " --results " +
                           (ws.root / "results").string() + " > /dev/null 2>&1";
  int status = std::system(base.c_str());
  CHECK(WEXITSTATUS(status) == 0);
  status = std::system((base + " --bogus").c_str());
  CHECK(WEXITSTATUS(status) != 0);
  const std::string env = std::string("NTKLAB_RESULTS=") + (ws.root / "env").string() + " " + tool +
                          " train --config " + ws.ini.string() + " > /dev/null 2>&1";
  status = std::system(env.c_str());
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(fs::exists(ws.root / "env"));
}
