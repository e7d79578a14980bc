#include "ntklab/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "ntklab/hash.hpp"
#include "ntklab/ntk.hpp"
#include "ntklab/seed.hpp"

namespace ntklab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kProbeStream = std::uint64_t{1} << 40;

nlohmann::json opt_json(const std::optional<double>& v) {
  if (v && std::isfinite(*v)) return *v;
  return nullptr;
}

nlohmann::json num_json(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

double num_from(const nlohmann::json& j, const char* key) {
  return opt_from(j, key).value_or(kNaN);
}

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

Eigen::MatrixXd kernel_probe(const SweepConfig& cfg) {
  return select_columns(cfg.data->test_x, kernel_probe_indices(*cfg.data, cfg.observables.kernel_probe_size,
                                                               cfg.base_seed));
}

// Linear interpolation of a checkpoint series at time t.
std::optional<double> value_at(const RunRecord& r, double t,
                               double Checkpoint::*field) {
  const auto& c = r.checkpoints;
  for (std::size_t i = 1; i < c.size(); ++i) {
    if (c[i].t >= t) {
      const double span = c[i].t - c[i - 1].t;
      const double w = span > 0.0 ? (t - c[i - 1].t) / span : 1.0;
      return (1.0 - w) * c[i - 1].*field + w * c[i].*field;
    }
  }
  return std::nullopt;
}

std::vector<double> collect(const std::vector<MemberResult>& members,
                            std::optional<double> MemberResult::*field) {
  std::vector<double> out;
  for (const auto& m : members)
    if (m.status != RunStatus::diverged && m.*field && std::isfinite(*(m.*field)))
      out.push_back(*(m.*field));
  return out;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double GridPoint::scale() const { return std::sqrt(static_cast<double>(width)) * alpha; }
double GridPoint::log10_alpha() const { return std::log10(alpha); }

std::vector<GridPoint> grid_fixed_width(int width, const std::vector<double>& scales) {
  std::vector<GridPoint> g;
  for (double s : scales) g.push_back({s / std::sqrt(static_cast<double>(width)), width});
  return g;
}

std::vector<GridPoint> grid_fixed_scale(double scale, const std::vector<int>& widths) {
  std::vector<GridPoint> g;
  for (int h : widths) g.push_back({scale / std::sqrt(static_cast<double>(h)), h});
  return g;
}

std::vector<GridPoint> grid_product(const std::vector<int>& widths,
                                    const std::vector<double>& scales) {
  std::vector<GridPoint> g;
  for (int h : widths) {
    auto row = grid_fixed_width(h, scales);
    g.insert(g.end(), row.begin(), row.end());
  }
  return g;
}

std::vector<double> log_space(double lo, double hi, int n) {
  if (n < 1 || !(lo > 0.0) || !(hi > 0.0)) throw std::invalid_argument("log_space: bad range");
  if (n == 1) return {lo};
  std::vector<double> v;
  const double a = std::log10(lo), b = std::log10(hi);
  for (int i = 0; i < n; ++i) v.push_back(std::pow(10.0, a + (b - a) * i / (n - 1)));
  return v;
}

void SweepConfig::validate() const {
  if (points.empty()) throw std::invalid_argument("sweep: empty grid");
  if (ensemble_size < 1) throw std::invalid_argument("sweep: ensemble size must be >= 1");
  if (!data) throw std::invalid_argument("sweep: no dataset");
  if (jobs < 1) throw std::invalid_argument("sweep: jobs must be >= 1");
  if (observables.kernel_probe_size < 1)
    throw std::invalid_argument("sweep: kernel probe size must be >= 1");
  flow.validate();
  for (const auto& p : points) {
    if (!(p.alpha > 0.0) || !std::isfinite(p.alpha))
      throw std::invalid_argument("sweep: alpha must be positive and finite");
    Architecture a = arch;
    a.width = p.width;
    a.input_dim = data->dim();
    a.validate();
    if (!allow_tiny_scale && p.scale() < kMinScale * (1.0 - 1e-9))
      throw std::invalid_argument("sweep: sqrt(h) alpha below 1e-4 requires allow_tiny_scale");
  }
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / s.count;
  if (s.count == 1) {
    s.stderr_ = 0.0;
    return s;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.stderr_ = std::sqrt(ss / (s.count - 1) / s.count);
  return s;
}

std::vector<Eigen::Index> kernel_probe_indices(const Dataset& data, int size,
                                               std::uint64_t base_seed) {
  const Eigen::Index m = std::min<Eigen::Index>(size, data.n_test());
  return probe_indices(data.n_test(), m, derive_seed(base_seed, kProbeStream));
}

std::uint64_t member_seed(std::uint64_t base_seed, int member) {
  return derive_seed(base_seed, static_cast<std::uint64_t>(member));
}

MemberResult run_member(const SweepConfig& cfg, const GridPoint& point, int member) {
  const Dataset& data = *cfg.data;
  Architecture arch = cfg.arch;
  arch.width = point.width;
  arch.input_dim = data.dim();

  MemberResult m;
  m.index = member;
  m.seed = member_seed(cfg.base_seed, member);
  Predictor p(init_gaussian(arch, m.seed), point.alpha, cfg.variant);

  if (cfg.observables.preactivation_rates) {
    auto [report, g] = loss_and_grad(p, data.train_x, data.train_y, cfg.flow.loss_beta);
    const double gn = g.norm();
    const double step = gn > 0.0 ? 1e-7 * p.params().norm() / gn : 1.0;
    const Eigen::Index probes = std::min<Eigen::Index>(8, data.n_test());
    m.preactivation_rates.assign(arch.depth, 0.0);
    for (Eigen::Index i = 0; i < probes; ++i) {
      auto rates = preactivation_rate(p.params(), g, data.test_x.col(i), step);
      for (int l = 0; l < arch.depth; ++l) m.preactivation_rates[l] += rms(rates[l]) / probes;
    }
  }

  FlowObservables obs;
  Eigen::MatrixXd probe;
  KernelGram g0;
  if (cfg.observables.kernel_change) {
    probe = kernel_probe(cfg);
    g0 = gram(p.params(), probe);
    if (cfg.observables.kernel_checkpoints)
      obs.kernel_probe = [&](const NetworkParams& w) { return kernel_change(g0, gram(w, probe)); };
  }

  auto [rec, trained] = train(p, data, cfg.flow, obs);
  m.status = rec.status;
  m.final_time = rec.final_time;
  m.accepted_steps = rec.accepted_steps;
  m.rejected_steps = rec.rejected_steps;
  m.t_half = rec.t_half;
  m.test_predictions = predict_batch(trained, data.test_x);
  m.test_error = classification_error(m.test_predictions, data.test_y);
  if (m.status == RunStatus::diverged) return m;

  const Checkpoint& last = rec.checkpoints.back();
  if (cfg.observables.weight_motion) m.weight_motion = last.weight_motion;
  if (cfg.observables.output_norm) {
    m.output_norm = last.output_norm;
    if (rec.t_half) m.output_change_half = value_at(rec, *rec.t_half, &Checkpoint::output_change_norm);
  }
  if (cfg.observables.kernel_change) m.kernel_change = kernel_change(g0, gram(trained.params(), probe));
  return m;
}

StreamingVariance::StreamingVariance(Eigen::Index points)
    : mean_(Eigen::VectorXd::Zero(points)), m2_(Eigen::VectorXd::Zero(points)) {}

void StreamingVariance::add(const Eigen::VectorXd& values) {
  if (values.size() != mean_.size()) throw DimensionError("StreamingVariance: size mismatch");
  ++count_;
  const Eigen::VectorXd delta = values - mean_;
  mean_ += delta / count_;
  m2_.array() += delta.array() * (values - mean_).array();
}

double StreamingVariance::variance() const {
  if (count_ == 0 || mean_.size() == 0) return kNaN;
  return m2_.mean() / count_;
}

double two_pass_variance(const Eigen::MatrixXd& x) {
  if (x.rows() == 0 || x.cols() == 0) return kNaN;
  const Eigen::RowVectorXd mean = x.colwise().mean();
  return (x.rowwise() - mean).squaredNorm() / static_cast<double>(x.size());
}

EnsembleResult combine_members(const GridPoint& point, std::vector<MemberResult> members,
                               const Eigen::VectorXd& test_labels) {
  EnsembleResult r;
  r.point = point;
  StreamingVariance acc(test_labels.size());
  std::vector<double> errors;
  for (const auto& m : members) {
    if (m.status != RunStatus::stopped) {
      r.partial = true;
      r.incomplete_members.push_back(m.index);
    }
    if (m.status == RunStatus::diverged || !m.test_predictions.allFinite()) continue;
    acc.add(m.test_predictions);
    errors.push_back(m.test_error);
  }
  r.members = std::move(members);
  r.median_test_error = median(errors);
  if (acc.count() == 0) {
    r.ensemble_test_error = kNaN;
    r.variance = kNaN;
    return r;
  }
  r.mean_prediction = acc.mean();
  r.variance = acc.variance();
  r.ensemble_test_error = classification_error(r.mean_prediction, test_labels);
  if (r.ensemble_test_error > r.median_test_error)
    r.warnings.push_back("ensemble error above median member error");
  return r;
}

Stat EnsembleResult::test_error() const {
  std::vector<double> v;
  for (const auto& m : members)
    if (m.status != RunStatus::diverged) v.push_back(m.test_error);
  return summarize(v);
}
Stat EnsembleResult::t_half() const { return summarize(collect(members, &MemberResult::t_half)); }
Stat EnsembleResult::weight_motion() const {
  return summarize(collect(members, &MemberResult::weight_motion));
}
Stat EnsembleResult::output_norm() const {
  return summarize(collect(members, &MemberResult::output_norm));
}
Stat EnsembleResult::output_change_half() const {
  return summarize(collect(members, &MemberResult::output_change_half));
}
Stat EnsembleResult::kernel_change() const {
  return summarize(collect(members, &MemberResult::kernel_change));
}
Stat EnsembleResult::accepted_steps() const {
  std::vector<double> v;
  for (const auto& m : members) v.push_back(static_cast<double>(m.accepted_steps));
  return summarize(v);
}

EnsembleResult run_ensemble(const SweepConfig& cfg, const GridPoint& point) {
  SweepConfig one = cfg;
  one.points = {point};
  return sweep(one).results.at(0);
}

nlohmann::json config_json(const Architecture& a) {
  return {{"input_dim", a.input_dim},
          {"width", a.width},
          {"depth", a.depth},
          {"activation", a.activation.name()},
          {"beta_act", a.activation.beta},
          {"prefactor", a.activation.prefactor},
          {"bias", a.use_bias}};
}

nlohmann::json config_json(const FlowConfig& f) {
  return {{"max_output_change", f.max_output_change},
          {"eps_grad", f.eps_grad},
          {"dt_init", f.dt_init},
          {"dt_grow", f.dt_grow},
          {"dt_shrink", f.dt_shrink},
          {"min_dt", f.min_dt},
          {"max_steps", f.max_steps},
          {"checkpoint_ratio", f.checkpoint_ratio},
          {"checkpoint_t0", f.checkpoint_t0},
          {"beta_loss", f.loss_beta},
          {"accept_gradient_jumps", f.accept_gradient_jumps}};
}

std::string point_hash(const SweepConfig& cfg, const GridPoint& point) {
  Architecture a = cfg.arch;
  a.width = point.width;
  a.input_dim = cfg.data->dim();
  const auto& o = cfg.observables;
  nlohmann::json j = {
      {"format", 1},
      {"dataset", cfg.dataset_id.empty() ? cfg.data->provenance.dump() : cfg.dataset_id},
      {"arch", config_json(a)},
      {"alpha", point.alpha},
      {"ensemble", cfg.ensemble_size},
      {"seed", cfg.base_seed},
      {"variant", to_string(cfg.variant)},
      {"flow", config_json(cfg.flow)},
      {"observables",
       {{"kernel_change", o.kernel_change},
        {"weight_motion", o.weight_motion},
        {"output_norm", o.output_norm},
        {"preactivation_rates", o.preactivation_rates},
        {"kernel_checkpoints", o.kernel_checkpoints},
        {"kernel_probe_size", o.kernel_probe_size}}}};
  return content_hash(j).substr(0, 16);
}

nlohmann::json to_json(const MemberResult& m) {
  return {{"index", m.index},
          {"seed", m.seed},
          {"status", to_string(m.status)},
          {"test_error", num_json(m.test_error)},
          {"final_time", num_json(m.final_time)},
          {"accepted_steps", m.accepted_steps},
          {"rejected_steps", m.rejected_steps},
          {"t_half", opt_json(m.t_half)},
          {"weight_motion", opt_json(m.weight_motion)},
          {"output_norm", opt_json(m.output_norm)},
          {"output_change_half", opt_json(m.output_change_half)},
          {"kernel_change", opt_json(m.kernel_change)},
          {"preactivation_rates", m.preactivation_rates}};
}

MemberResult member_from_json(const nlohmann::json& j) {
  MemberResult m;
  m.index = j.at("index");
  m.seed = j.at("seed");
  m.status = parse_run_status(j.at("status"));
  m.test_error = num_from(j, "test_error");
  m.final_time = num_from(j, "final_time");
  m.accepted_steps = j.at("accepted_steps");
  m.rejected_steps = j.at("rejected_steps");
  m.t_half = opt_from(j, "t_half");
  m.weight_motion = opt_from(j, "weight_motion");
  m.output_norm = opt_from(j, "output_norm");
  m.output_change_half = opt_from(j, "output_change_half");
  m.kernel_change = opt_from(j, "kernel_change");
  m.preactivation_rates = j.at("preactivation_rates").get<std::vector<double>>();
  return m;
}

nlohmann::json to_json(const EnsembleResult& r) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : r.members) members.push_back(to_json(m));
  return {{"point_id", r.point_id},
          {"base_seed", r.base_seed},
          {"alpha", r.point.alpha},
          {"width", r.point.width},
          {"ensemble_test_error", num_json(r.ensemble_test_error)},
          {"median_test_error", num_json(r.median_test_error)},
          {"variance", num_json(r.variance)},
          {"partial", r.partial},
          {"incomplete_members", r.incomplete_members},
          {"warnings", r.warnings},
          {"members", members}};
}

EnsembleResult ensemble_from_json(const nlohmann::json& j) {
  EnsembleResult r;
  r.point_id = j.at("point_id");
  r.base_seed = j.at("base_seed");
  r.point.alpha = j.at("alpha");
  r.point.width = j.at("width");
  r.ensemble_test_error = num_from(j, "ensemble_test_error");
  r.median_test_error = num_from(j, "median_test_error");
  r.variance = num_from(j, "variance");
  r.partial = j.at("partial");
  r.incomplete_members = j.at("incomplete_members").get<std::vector<int>>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (const auto& m : j.at("members")) r.members.push_back(member_from_json(m));
  return r;
}

std::size_t Table::column_index(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::out_of_range("table: no column " + name);
  return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> Table::column(const std::string& name) const {
  const std::size_t c = column_index(name);
  std::vector<double> v;
  for (const auto& row : rows) v.push_back(row[c]);
  return v;
}

Table Table::where(const std::string& name, double value) const {
  const std::size_t c = column_index(name);
  Table t;
  t.header = header;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (std::abs(rows[i][c] - value) <= 1e-9 * std::max(std::abs(value), 1.0)) {
      t.ids.push_back(ids[i]);
      t.rows.push_back(rows[i]);
    }
  }
  return t;
}

const std::vector<std::string>& sweep_columns() {
  static const std::vector<std::string> cols = {
      "h",                  "alpha",
      "log10_alpha",        "scale",
      "seed",               "ensemble",
      "members_used",       "partial",
      "mean_test_error",    "stderr_test_error",
      "ensemble_test_error", "median_test_error",
      "variance",           "t_half",
      "t_half_stderr",      "weight_motion",
      "weight_motion_stderr", "output_norm",
      "output_norm_stderr", "output_change_half",
      "output_change_half_stderr", "kernel_change",
      "kernel_change_stderr", "accepted_steps"};
  return cols;
}

Table sweep_table(const std::vector<EnsembleResult>& results) {
  Table t;
  t.header = sweep_columns();
  for (const auto& r : results) {
    const Stat err = r.test_error(), th = r.t_half(), wm = r.weight_motion(),
               on = r.output_norm(), oc = r.output_change_half(), kc = r.kernel_change();
    const double seed = static_cast<double>(r.base_seed);  // exact below 2^53
    t.ids.push_back(r.point_id);
    t.rows.push_back({static_cast<double>(r.point.width), r.point.alpha, r.point.log10_alpha(),
                      r.point.scale(), seed, static_cast<double>(r.members.size()),
                      static_cast<double>(err.count), r.partial ? 1.0 : 0.0, err.mean,
                      err.stderr_, r.ensemble_test_error, r.median_test_error, r.variance,
                      th.mean, th.stderr_, wm.mean, wm.stderr_, on.mean, on.stderr_, oc.mean,
                      oc.stderr_, kc.mean, kc.stderr_, r.accepted_steps().mean});
  }
  return t;
}

void write_csv(const Table& t, const std::filesystem::path& path, const std::string& id_column) {
  std::ostringstream out;
  out << id_column;
  for (const auto& h : t.header) out << ',' << h;
  out << '\n';
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    out << t.ids[i];
    for (double v : t.rows[i]) out << ',' << format_double(v);
    out << '\n';
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_text_atomic(path, out.str());
}

Table read_csv(const std::filesystem::path& path, const std::string& id_column) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty table");
  auto head = split(line);
  if (head.empty() || head[0] != id_column)
    throw std::runtime_error(path.string() + ": first column is not " + id_column);
  Table t;
  t.header.assign(head.begin() + 1, head.end());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != head.size())
      throw std::runtime_error(path.string() + ": ragged row " + std::to_string(t.size() + 1));
    t.ids.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t c = 1; c < cells.size(); ++c) row.push_back(std::strtod(cells[c].c_str(), nullptr));
    t.rows.push_back(std::move(row));
  }
  return t;
}

SweepOutcome sweep(const SweepConfig& cfg, const std::optional<std::filesystem::path>& store,
                   std::optional<int> stop_after) {
  cfg.validate();
  const std::size_t np = cfg.points.size();
  std::vector<std::string> hashes(np);
  std::vector<std::optional<EnsembleResult>> slots(np);
  SweepOutcome out;

  std::filesystem::path runs_dir;
  if (store) {
    runs_dir = *store / "runs";
    std::filesystem::create_directories(runs_dir);
    std::filesystem::create_directories(*store / "tables");
  }
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < np; ++i) {
    hashes[i] = point_hash(cfg, cfg.points[i]);
    if (store) {
      const auto file = runs_dir / (hashes[i] + ".json");
      if (std::filesystem::exists(file)) {
        std::ifstream in(file);
        slots[i] = ensemble_from_json(nlohmann::json::parse(in));
        ++out.reused_points;
        continue;
      }
    }
    todo.push_back(i);
  }
  if (stop_after && static_cast<int>(todo.size()) > *stop_after) todo.resize(std::max(*stop_after, 0));

  const int e = cfg.ensemble_size;
  const std::size_t tasks = todo.size() * static_cast<std::size_t>(e);
  std::vector<std::vector<MemberResult>> members(todo.size(), std::vector<MemberResult>(e));
  std::vector<std::atomic<int>> remaining(todo.size());
  for (auto& r : remaining) r = e;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr failure;
  std::mutex writer;

  auto worker = [&] {
    for (;;) {
      const std::size_t k = next++;
      if (k >= tasks || abort) return;
      const std::size_t slot = k / e;
      const int member = static_cast<int>(k % e);
      const std::size_t i = todo[slot];
      try {
        members[slot][member] = run_member(cfg, cfg.points[i], member);
        if (--remaining[slot] == 0) {
          EnsembleResult r = combine_members(cfg.points[i], std::move(members[slot]), cfg.data->test_y);
          r.point_id = hashes[i];
          r.base_seed = cfg.base_seed;
          std::lock_guard lock(writer);
          if (store) write_text_atomic(runs_dir / (hashes[i] + ".json"), to_json(r).dump(1) + "\n");
          slots[i] = std::move(r);
        }
      } catch (...) {
        std::lock_guard lock(writer);
        if (!failure) failure = std::current_exception();
        abort = true;
        return;
      }
    }
  };
  const int threads = static_cast<int>(std::min<std::size_t>(cfg.jobs, std::max<std::size_t>(tasks, 1)));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  out.trained_points = static_cast<int>(todo.size());

  nlohmann::json points = nlohmann::json::array();
  for (std::size_t i = 0; i < np; ++i) {
    points.push_back({{"point_id", hashes[i]},
                      {"alpha", cfg.points[i].alpha},
                      {"width", cfg.points[i].width},
                      {"done", slots[i].has_value()},
                      {"partial", slots[i] ? slots[i]->partial : false}});
    if (slots[i]) {
      out.results.push_back(*slots[i]);
    } else {
      out.complete = false;
    }
  }
  out.table = sweep_table(out.results);
  if (store) {
    write_csv(out.table, *store / "tables" / "sweep.csv");
    nlohmann::json side = {{"columns", sweep_columns()},
                           {"complete", out.complete},
                           {"ensemble", cfg.ensemble_size},
                           {"base_seed", cfg.base_seed},
                           {"dataset", cfg.dataset_id},
                           {"arch", config_json(cfg.arch)},
                           {"flow", config_json(cfg.flow)},
                           {"variant", to_string(cfg.variant)},
                           {"points", points}};
    write_text_atomic(*store / "tables" / "sweep.json", side.dump(1) + "\n");
  }
  return out;
}

PowerLawFit fit_power_law(const std::vector<double>& x, const std::vector<double>& y,
                          FitWindow window) {
  if (x.size() != y.size()) throw DimensionError("fit_power_law: x and y sizes differ");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) throw std::invalid_argument("fit_power_law: abscissa must be positive");
    if (x[i] < window.lo * (1.0 - 1e-9) || x[i] > window.hi * (1.0 + 1e-9)) continue;
    if (!(y[i] > 0.0) || !std::isfinite(y[i]))
      throw std::invalid_argument("fit_power_law: non-positive value in window");
    lx.push_back(std::log10(x[i]));
    ly.push_back(std::log10(y[i]));
  }
  const int n = static_cast<int>(lx.size());
  if (n < 4) throw std::invalid_argument("fit_power_law: fewer than 4 points in window");
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (int i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("fit_power_law: abscissa values coincide");
  PowerLawFit f;
  f.exponent = sxy / sxx;
  f.intercept = my - f.exponent * mx;
  f.window = window;
  f.points = n;
  double ssr = 0.0;
  for (int i = 0; i < n; ++i) {
    const double r = ly[i] - f.intercept - f.exponent * lx[i];
    ssr += r * r;
  }
  f.residual = std::sqrt(ssr / n);
  f.exponent_stderr = std::sqrt(ssr / (n - 2) / sxx);
  return f;
}

PowerLawFit fit_power_law(const Table& t, const std::string& x_field, const std::string& y_field,
                          FitWindow window) {
  return fit_power_law(t.column(x_field), t.column(y_field), window);
}

nlohmann::json to_json(const PowerLawFit& f) {
  return {{"exponent", f.exponent},
          {"intercept", f.intercept},
          {"window", {f.window.lo, std::isfinite(f.window.hi) ? nlohmann::json(f.window.hi) : nlohmann::json(nullptr)}},
          {"residual", f.residual},
          {"exponent_stderr", f.exponent_stderr},
          {"points", f.points}};
}

std::vector<double> rescale_unit(const std::vector<double>& values) {
  if (values.empty()) return {};
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = *hi - *lo;
  std::vector<double> out;
  for (double v : values) out.push_back(span > 0.0 ? (v - *lo) / span : 0.0);
  return out;
}

double crossover_locate(const std::vector<double>& alphas, const std::vector<double>& errors) {
  if (alphas.size() != errors.size()) throw DimensionError("crossover_locate: size mismatch");
  std::vector<std::size_t> order(alphas.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return alphas[a] < alphas[b]; });
  std::vector<double> la, e;
  for (auto i : order) {
    if (!(alphas[i] > 0.0)) throw std::invalid_argument("crossover_locate: alpha must be positive");
    la.push_back(std::log10(alphas[i]));
    e.push_back(errors[i]);
  }
  const std::vector<double> r = rescale_unit(e);
  std::vector<double> crossings;
  for (std::size_t i = 0; i + 1 < r.size(); ++i) {
    const double a = r[i] - 0.5, b = r[i + 1] - 0.5;
    if (a == 0.0) {
      crossings.push_back(la[i]);
    } else if (a * b < 0.0) {
      crossings.push_back(la[i] + (la[i + 1] - la[i]) * a / (a - b));
    }
  }
  if (!r.empty() && r.back() == 0.5) crossings.push_back(la.back());
  if (crossings.empty()) throw std::runtime_error("crossover_locate: curve never crosses 0.5");
  return std::pow(10.0, crossings[(crossings.size() - 1) / 2]);
}

double crossover_locate(const Table& fixed_width, const std::string& error_field) {
  return crossover_locate(fixed_width.column("alpha"), fixed_width.column(error_field));
}

VarianceScan variance_vs_n(const SweepConfig& base, const std::vector<int>& train_sizes,
                           double slope_tol) {
  if (train_sizes.empty()) throw std::invalid_argument("variance_vs_n: no train sizes");
  if (!base.data) throw std::invalid_argument("variance_vs_n: no dataset");
  VarianceScan scan;
  scan.table.header = {"n", "h", "alpha", "scale", "variance", "ensemble_test_error"};
  for (int n : train_sizes) {
    if (n < 1 || n > base.data->n_train())
      throw std::invalid_argument("variance_vs_n: train size out of range");
    SweepConfig c = base;
    c.data = std::make_shared<const Dataset>(base.data->with_train_size(n));
    c.dataset_id = (base.dataset_id.empty() ? base.data->provenance.dump() : base.dataset_id) +
                   "/n=" + std::to_string(n);
    const SweepOutcome o = sweep(c);
    std::vector<std::pair<int, double>> curve;
    for (const auto& r : o.results) {
      scan.table.ids.push_back(r.point_id);
      scan.table.rows.push_back({static_cast<double>(n), static_cast<double>(r.point.width),
                                 r.point.alpha, r.point.scale(), r.variance,
                                 r.ensemble_test_error});
      curve.emplace_back(r.point.width, r.variance);
    }
    std::sort(curve.begin(), curve.end());
    std::optional<int> reached;
    for (std::size_t i = curve.size(); i-- > 1;) {
      const double s = std::log(curve[i].second / curve[i - 1].second) /
                       std::log(static_cast<double>(curve[i].first) / curve[i - 1].first);
      if (!(std::abs(s + 1.0) <= slope_tol)) break;
      reached = curve[i - 1].first;
    }
    scan.asymptote_width.emplace_back(n, reached);
  }
  return scan;
}

}  // namespace ntklab
