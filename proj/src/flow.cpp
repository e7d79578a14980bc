#include "ntklab/flow.hpp"

#include <fstream>
#include <stdexcept>

namespace ntklab {

void FlowConfig::validate() const {
  if (!(dt_shrink > 0.0 && dt_shrink < 1.0 && dt_grow > 1.0))
    throw std::invalid_argument("flow config needs 0 < dt_shrink < 1 < dt_grow");
  if (!(eps_grad > 0.0)) throw std::invalid_argument("flow config needs eps_grad > 0");
  if (!(max_output_change > 0.0))
    throw std::invalid_argument("flow config needs max_output_change > 0");
  if (!(dt_init > 0.0)) throw std::invalid_argument("flow config needs dt_init > 0");
  if (!(checkpoint_ratio > 1.0 && checkpoint_t0 > 0.0))
    throw std::invalid_argument("flow config needs checkpoint_ratio > 1 and checkpoint_t0 > 0");
  if (max_steps < 0) throw std::invalid_argument("flow config needs max_steps >= 0");
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::running: return "running";
    case RunStatus::stopped: return "stopped";
    case RunStatus::max_steps: return "max_steps";
    case RunStatus::diverged: return "diverged";
  }
  return "unknown";
}

RunStatus parse_run_status(const std::string& s) {
  if (s == "stopped") return RunStatus::stopped;
  if (s == "max_steps") return RunStatus::max_steps;
  if (s == "diverged") return RunStatus::diverged;
  return RunStatus::running;
}

std::optional<double> half_time(std::span<const double> times, std::span<const double> values) {
  if (times.size() != values.size() || values.empty()) return std::nullopt;
  const double target = 0.5 * values[0];
  if (!(values[0] > 0.0)) return std::nullopt;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] <= target) {
      const double v0 = values[k - 1];
      const double v1 = values[k];
      if (v0 == v1) return times[k];
      const double frac = (v0 - target) / (v0 - v1);
      return times[k - 1] + frac * (times[k] - times[k - 1]);
    }
  }
  return std::nullopt;
}

std::optional<double> half_time(const RunRecord& record) {
  std::vector<double> t;
  std::vector<double> v;
  for (const auto& c : record.checkpoints) {
    t.push_back(c.t);
    v.push_back(c.loss);
  }
  return half_time(t, v);
}

CheckpointGrid::CheckpointGrid(double t0, double ratio) : ratio_(ratio), next_(t0) {}

bool CheckpointGrid::due(double t) {
  if (t < next_) return false;
  while (next_ <= t) next_ *= ratio_;
  return true;
}

NetworkFlowSystem::NetworkFlowSystem(const Predictor& p, const Dataset& data, double loss_beta)
    : data_(&data),
      alpha_(p.alpha()),
      loss_beta_(loss_beta),
      train_offsets_(init_offsets(p, data.train_x)) {}

NetworkFlowSystem::Eval NetworkFlowSystem::evaluate(const State& w) const {
  auto [report, grad] =
      loss_and_grad(w, alpha_, data_->train_x, data_->train_y, train_offsets_, loss_beta_);
  return {std::move(report), std::move(grad)};
}

NetworkFlowSystem::State NetworkFlowSystem::propose(const State& w, const Eval& e,
                                                    double dt) const {
  State next = w;
  next.axpy(-dt, e.grad);
  return next;
}

double NetworkFlowSystem::output_change(const Eval& a, const Eval& b) const {
  return alpha_ * (a.report.raw_outputs - b.report.raw_outputs).cwiseAbs().maxCoeff();
}

double NetworkFlowSystem::gradient_rotation(const Eval& a, const Eval& b) const {
  double diff = 0.0;
  for (std::size_t l = 0; l < a.grad.weights.size(); ++l)
    diff += (a.grad.weights[l] - b.grad.weights[l]).squaredNorm();
  for (std::size_t l = 0; l < a.grad.biases.size(); ++l)
    diff += (a.grad.biases[l] - b.grad.biases[l]).squaredNorm();
  const double denom = a.grad.norm() * b.grad.norm();
  if (denom == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / denom;
}

bool NetworkFlowSystem::finite(const Eval& e) const {
  return std::isfinite(e.report.loss) && e.report.raw_outputs.allFinite() && e.grad.all_finite();
}

bool NetworkFlowSystem::fitted(const Eval& e) const { return stopping_check(e.report); }

namespace {

const Eigen::MatrixXd& eval_patterns(const Dataset& d) {
  return d.n_test() > 0 ? d.test_x : d.train_x;
}

}  // namespace

TrainingRun::TrainingRun(Predictor p, const Dataset& data, const FlowConfig& cfg,
                         FlowObservables obs)
    : predictor_(std::move(p)),
      data_(&data),
      cfg_(cfg),
      obs_(std::move(obs)),
      system_((cfg.validate(), predictor_), data, cfg.loss_beta),
      stepper_(system_, predictor_.params(), cfg),
      grid_(cfg.checkpoint_t0, cfg.checkpoint_ratio),
      eval_offsets_(outputs(predictor_.init_snapshot(), eval_patterns(data))) {
  if (auto w = predictor_.warning()) record_.warnings.push_back(*w);
  push_checkpoint();
}

TrainingRun::TrainingRun(Predictor p, const Dataset& data, const FlowConfig& cfg,
                         FlowObservables obs, const Resume& from)
    : predictor_(std::move(p)),
      data_(&data),
      cfg_(cfg),
      obs_(std::move(obs)),
      system_((cfg.validate(), predictor_), data, cfg.loss_beta),
      stepper_(system_, from.params, cfg, from.t, from.dt, from.jump_reference,
               from.jump_armed),
      grid_(cfg.checkpoint_t0, cfg.checkpoint_ratio),
      record_(from.record),
      eval_offsets_(outputs(predictor_.init_snapshot(), eval_patterns(data))),
      base_accepted_(from.record.accepted_steps),
      base_rejected_(from.record.rejected_steps),
      base_jumps_(from.record.gradient_jumps) {
  record_.status = RunStatus::running;
  // Rebuild the grid position exactly as the uninterrupted run would have it.
  grid_.due(from.t);
}

Predictor TrainingRun::current() const {
  Predictor p = predictor_;
  p.set_params(stepper_.state());
  return p;
}

Checkpoint TrainingRun::make_checkpoint() const {
  const auto& w = stepper_.state();
  const auto& rep = stepper_.eval().report;
  Checkpoint c;
  c.t = stepper_.time();
  c.step = base_accepted_ + stepper_.accepted();
  c.loss = rep.loss;
  c.min_margin = rep.margins.minCoeff();
  c.train_error = static_cast<double>((rep.margins.array() <= 0.0).count()) /
                  static_cast<double>(rep.margins.size());

  const Eigen::VectorXd f = outputs(w, eval_patterns(*data_));
  if (obs_.test_error && data_->n_test() > 0) {
    const Eigen::VectorXd offsets =
        predictor_.variant() == ModelVariant::centered ? eval_offsets_
                                                       : Eigen::VectorXd::Zero(f.size());
    c.test_error = classification_error(predictor_.alpha() * (f - offsets), data_->test_y);
  }
  const double n = static_cast<double>(f.size());
  c.output_norm = std::sqrt(f.squaredNorm() / n);
  c.output_change_norm = std::sqrt((f - eval_offsets_).squaredNorm() / n);

  ParamTensors delta = w;
  delta.axpy(-1.0, predictor_.init_snapshot());
  c.weight_motion = delta.norm() / predictor_.init_snapshot().norm();
  if (obs_.kernel_probe) c.kernel_change = obs_.kernel_probe(w);
  return c;
}

void TrainingRun::push_checkpoint() {
  if (!record_.checkpoints.empty() && record_.checkpoints.back().t == stepper_.time()) return;
  record_.checkpoints.push_back(make_checkpoint());
}

void TrainingRun::finalize(RunStatus status) {
  if (status != RunStatus::diverged || stepper_.eval().report.raw_outputs.allFinite())
    push_checkpoint();
  record_.status = status;
  record_.accepted_steps = base_accepted_ + stepper_.accepted();
  record_.rejected_steps = base_rejected_ + stepper_.rejected();
  record_.gradient_jumps = base_jumps_ + stepper_.jumps();
  record_.final_time = stepper_.time();
  record_.final_dt = stepper_.dt();
  record_.t_half = half_time(record_);
  if (record_.gradient_jumps > 0)
    record_.warnings.push_back(std::to_string(record_.gradient_jumps) +
                               " steps accepted across gradient discontinuities");
}

RunStatus TrainingRun::advance(double until) {
  if (record_.status != RunStatus::running) return record_.status;
  for (;;) {
    if (stepper_.fitted()) {
      finalize(RunStatus::stopped);
      return record_.status;
    }
    if (base_accepted_ + stepper_.accepted() >= cfg_.max_steps) {
      finalize(RunStatus::max_steps);
      return record_.status;
    }
    if (stepper_.time() >= until) {
      record_.accepted_steps = base_accepted_ + stepper_.accepted();
      record_.rejected_steps = base_rejected_ + stepper_.rejected();
      record_.gradient_jumps = base_jumps_ + stepper_.jumps();
      record_.final_time = stepper_.time();
      record_.final_dt = stepper_.dt();
      return RunStatus::running;
    }
    const StepStatus s = stepper_.step();
    if (s == StepStatus::diverged) {
      finalize(RunStatus::diverged);
      return record_.status;
    }
    if (s == StepStatus::accepted && grid_.due(stepper_.time())) push_checkpoint();
  }
}

TrainingRun::Resume TrainingRun::pause_state() const {
  Resume r;
  r.params = stepper_.state();
  r.t = stepper_.time();
  r.dt = stepper_.dt();
  r.jump_reference = stepper_.jump_reference();
  r.jump_armed = stepper_.jump_armed();
  r.record = record_;
  r.record.accepted_steps = base_accepted_ + stepper_.accepted();
  r.record.rejected_steps = base_rejected_ + stepper_.rejected();
  r.record.gradient_jumps = base_jumps_ + stepper_.jumps();
  return r;
}

std::pair<RunRecord, Predictor> train(const Predictor& p, const Dataset& data,
                                      const FlowConfig& cfg, const FlowObservables& obs) {
  TrainingRun tr(p, data, cfg, obs);
  tr.advance();
  return {tr.record(), tr.current()};
}

RunRecord run(const Predictor& p, const Dataset& data, const FlowConfig& cfg,
              const FlowObservables& obs) {
  return train(p, data, cfg, obs).first;
}

nlohmann::json to_json(const Checkpoint& c) {
  nlohmann::json j = {{"t", c.t},
                      {"step", c.step},
                      {"loss", c.loss},
                      {"min_margin", c.min_margin},
                      {"train_error", c.train_error},
                      {"test_error", c.test_error ? nlohmann::json(*c.test_error) : nlohmann::json()},
                      {"weight_motion", c.weight_motion},
                      {"output_norm", c.output_norm},
                      {"output_change_norm", c.output_change_norm},
                      {"kernel_change",
                       c.kernel_change ? nlohmann::json(*c.kernel_change) : nlohmann::json()}};
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint c;
  c.t = j.at("t");
  c.step = j.at("step");
  c.loss = j.at("loss");
  c.min_margin = j.at("min_margin");
  c.train_error = j.at("train_error");
  if (!j.at("test_error").is_null()) c.test_error = j.at("test_error").get<double>();
  c.weight_motion = j.at("weight_motion");
  c.output_norm = j.at("output_norm");
  c.output_change_norm = j.at("output_change_norm");
  if (!j.at("kernel_change").is_null()) c.kernel_change = j.at("kernel_change").get<double>();
  return c;
}

nlohmann::json summary_json(const RunRecord& r) {
  return {{"status", to_string(r.status)},
          {"accepted_steps", r.accepted_steps},
          {"rejected_steps", r.rejected_steps},
          {"gradient_jumps", r.gradient_jumps},
          {"wall_steps", r.wall_steps()},
          {"final_time", r.final_time},
          {"final_dt", r.final_dt},
          {"t_half", r.t_half ? nlohmann::json(*r.t_half) : nlohmann::json()},
          {"warnings", r.warnings}};
}

void write_jsonl(const RunRecord& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& c : r.checkpoints) {
    nlohmann::json j = to_json(c);
    j["type"] = "checkpoint";
    out << j.dump() << '\n';
  }
  nlohmann::json s = summary_json(r);
  s["type"] = "summary";
  out << s.dump() << '\n';
}

RunRecord read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  RunRecord r;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") == "checkpoint") {
      r.checkpoints.push_back(checkpoint_from_json(j));
    } else {
      r.status = parse_run_status(j.at("status"));
      r.accepted_steps = j.at("accepted_steps");
      r.rejected_steps = j.at("rejected_steps");
      r.gradient_jumps = j.value("gradient_jumps", std::int64_t{0});
      r.final_time = j.at("final_time");
      r.final_dt = j.at("final_dt");
      if (!j.at("t_half").is_null()) r.t_half = j.at("t_half").get<double>();
      r.warnings = j.at("warnings").get<std::vector<std::string>>();
    }
  }
  return r;
}

}  // namespace ntklab
