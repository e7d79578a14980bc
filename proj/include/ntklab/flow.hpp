#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntklab/data.hpp"
#include "ntklab/objective.hpp"

namespace ntklab {

struct FlowConfig {
  double max_output_change = 0.1;  // bound on alpha * max_train |f_i - f_{i+1}|
  double eps_grad = 1e-4;          // bound on the gradient rotation between steps
  double dt_init = 1e-4;
  double dt_grow = 1.1;
  double dt_shrink = 0.5;
  double min_dt = 1e-30;
  std::int64_t max_steps = 1'000'000;  // accepted steps
  double checkpoint_ratio = 1.3;
  double checkpoint_t0 = 1e-6;  // first non-zero point of the geometric grid
  double loss_beta = kDefaultLossBeta;
  // Non-smooth activations: accept a step whose rotation does not shrink as dt halves.
  bool accept_gradient_jumps = false;

  void validate() const;
};

enum class StepStatus { accepted, rejected, diverged };
enum class RunStatus { running, stopped, max_steps, diverged };

std::string to_string(RunStatus s);
RunStatus parse_run_status(const std::string& s);

/// Explicit Euler on dx/dt = -g(x) with accept/reject step control.
///
/// A system supplies evaluate(state) -> Eval (gradient plus constrained outputs),
/// propose(state, eval, dt) = state - dt * gradient, output_change(a, b),
/// gradient_rotation(a, b) = |g_a - g_b|^2 / (|g_a| |g_b|), finite(eval) and
/// fitted(eval) (the stopping rule).
template <class S>
concept FlowSystem = requires(S& sys, const typename S::State& x, const typename S::Eval& e,
                              double dt) {
  { sys.evaluate(x) } -> std::same_as<typename S::Eval>;
  { sys.propose(x, e, dt) } -> std::same_as<typename S::State>;
  { sys.output_change(e, e) } -> std::convertible_to<double>;
  { sys.gradient_rotation(e, e) } -> std::convertible_to<double>;
  { sys.finite(e) } -> std::convertible_to<bool>;
  { sys.fitted(e) } -> std::convertible_to<bool>;
};

template <FlowSystem S>
class AdaptiveStepper {
 public:
  using State = typename S::State;
  using Eval = typename S::Eval;

  AdaptiveStepper(S& system, State initial, const FlowConfig& cfg)
      : sys_(&system), cfg_(cfg), state_(std::move(initial)), eval_(sys_->evaluate(state_)),
        dt_(cfg.dt_init) {}

  /// Resume from a saved (state, t, dt); the evaluation is recomputed deterministically.
  AdaptiveStepper(S& system, State state, const FlowConfig& cfg, double t, double dt,
                  double jump_reference = 0.0, bool jump_armed = false)
      : sys_(&system), cfg_(cfg), state_(std::move(state)), eval_(sys_->evaluate(state_)),
        t_(t), dt_(dt), jump_ref_dt_(jump_reference), jump_armed_(jump_armed) {}

  StepStatus step() {
    if (!sys_->finite(eval_)) return StepStatus::diverged;
    if (dt_ < cfg_.min_dt) return StepStatus::diverged;
    State proposal = sys_->propose(state_, eval_, dt_);
    Eval next = sys_->evaluate(proposal);
    bool ok = false;
    if (sys_->finite(next) && sys_->output_change(eval_, next) < cfg_.max_output_change) {
      ok = sys_->gradient_rotation(eval_, next) < cfg_.eps_grad;
      if (!ok && cfg_.accept_gradient_jumps) {
        // Approaching a kink, rotation-only rejections drive dt to zero without
        // time advancing; a smooth gradient would let dt recover.
        if (jump_ref_dt_ == 0.0) {
          jump_ref_dt_ = dt_;
        } else if (jump_armed_ || dt_ < kJumpShrink * jump_ref_dt_) {
          // Once past one kink, sliding along it is accepted until dt recovers.
          ok = true;
          jump_armed_ = true;
          ++jumps_;
        }
      }
    }
    if (!ok) {
      dt_ *= cfg_.dt_shrink;
      ++rejected_;
      return StepStatus::rejected;
    }
    if (dt_ >= jump_ref_dt_) {
      jump_ref_dt_ = 0.0;
      jump_armed_ = false;
    }
    state_ = std::move(proposal);
    eval_ = std::move(next);
    t_ += dt_;
    dt_ *= cfg_.dt_grow;
    ++accepted_;
    return StepStatus::accepted;
  }

  bool fitted() const { return sys_->fitted(eval_); }
  const State& state() const { return state_; }
  const Eval& eval() const { return eval_; }
  double time() const { return t_; }
  double dt() const { return dt_; }
  std::int64_t accepted() const { return accepted_; }
  std::int64_t rejected() const { return rejected_; }
  /// Steps accepted across a gradient discontinuity.
  std::int64_t jumps() const { return jumps_; }
  /// dt at the start of the current run of rotation-only rejections, 0 when none.
  double jump_reference() const { return jump_ref_dt_; }
  bool jump_armed() const { return jump_armed_; }

 private:
  static constexpr double kJumpShrink = 1.0 / 64;

  S* sys_;
  FlowConfig cfg_;
  State state_;
  Eval eval_;
  double t_ = 0.0;
  double dt_;
  std::int64_t accepted_ = 0;
  std::int64_t rejected_ = 0;
  std::int64_t jumps_ = 0;
  double jump_ref_dt_ = 0.0;
  bool jump_armed_ = false;
};

struct Checkpoint {
  double t = 0.0;
  std::int64_t step = 0;
  double loss = 0.0;  // alpha^2 L on the training set
  double min_margin = 0.0;
  double train_error = 0.0;
  std::optional<double> test_error;
  double weight_motion = 0.0;       // |w - w0| / |w0|
  double output_norm = 0.0;         // sqrt(<f(w_t, x)^2>) over the evaluation set
  double output_change_norm = 0.0;  // sqrt(<(f(w_t, x) - f(w0, x))^2>)
  std::optional<double> kernel_change;
};

struct RunRecord {
  std::vector<Checkpoint> checkpoints;
  RunStatus status = RunStatus::running;
  std::int64_t accepted_steps = 0;
  std::int64_t rejected_steps = 0;
  std::int64_t gradient_jumps = 0;  // steps accepted across a gradient discontinuity
  double final_time = 0.0;
  double final_dt = 0.0;
  std::optional<double> t_half;
  std::vector<std::string> warnings;

  std::int64_t wall_steps() const { return accepted_steps + rejected_steps; }
};

/// First time the series drops to half its first value, linearly interpolated.
std::optional<double> half_time(std::span<const double> times, std::span<const double> values);
std::optional<double> half_time(const RunRecord& record);

/// Geometric checkpoint schedule: 0, t0, t0 r, t0 r^2, ...
class CheckpointGrid {
 public:
  CheckpointGrid(double t0, double ratio);
  /// True when `t` has reached the next grid point; advances past t.
  bool due(double t);
  double next() const { return next_; }

 private:
  double ratio_;
  double next_;
};

/// Optional per-checkpoint hook (e.g. the kernel change), evaluated at the live weights.
using CheckpointProbe = std::function<double(const NetworkParams&)>;

struct FlowObservables {
  bool test_error = true;
  CheckpointProbe kernel_probe;  // empty: not measured during training
};

/// Network gradient flow on an alpha-scaled predictor.
class NetworkFlowSystem {
 public:
  struct Eval {
    LossReport report;
    ParamGradient grad;
  };
  using State = NetworkParams;

  NetworkFlowSystem(const Predictor& p, const Dataset& data, double loss_beta);

  Eval evaluate(const State& w) const;
  State propose(const State& w, const Eval& e, double dt) const;
  double output_change(const Eval& a, const Eval& b) const;
  double gradient_rotation(const Eval& a, const Eval& b) const;
  bool finite(const Eval& e) const;
  bool fitted(const Eval& e) const;

  const Eigen::VectorXd& train_offsets() const { return train_offsets_; }

 private:
  const Dataset* data_;
  double alpha_;
  double loss_beta_;
  Eigen::VectorXd train_offsets_;
};

/// One training run, resumable at any accepted step.
class TrainingRun {
 public:
  TrainingRun(Predictor p, const Dataset& data, const FlowConfig& cfg,
              FlowObservables obs = {});

  struct Resume {
    NetworkParams params;
    double t = 0.0;
    double dt = 0.0;
    double jump_reference = 0.0;
    bool jump_armed = false;
    RunRecord record;  // checkpoints and counters so far
  };
  /// Continue a run previously paused with advance(until).
  TrainingRun(Predictor p, const Dataset& data, const FlowConfig& cfg, FlowObservables obs,
              const Resume& from);

  /// Integrates until stopping, max_steps, divergence or until time `until`.
  RunStatus advance(double until = std::numeric_limits<double>::infinity());

  Resume pause_state() const;
  const RunRecord& record() const { return record_; }
  const Predictor& predictor() const { return predictor_; }
  /// Predictor carrying the current weights.
  Predictor current() const;

 private:
  Checkpoint make_checkpoint() const;
  void push_checkpoint();
  void finalize(RunStatus status);

  Predictor predictor_;
  const Dataset* data_;
  FlowConfig cfg_;
  FlowObservables obs_;
  NetworkFlowSystem system_;
  AdaptiveStepper<NetworkFlowSystem> stepper_;
  CheckpointGrid grid_;
  RunRecord record_;
  Eigen::VectorXd eval_offsets_;  // f(w0, x) on the evaluation set
  std::int64_t base_accepted_ = 0;
  std::int64_t base_rejected_ = 0;
  std::int64_t base_jumps_ = 0;
};

RunRecord run(const Predictor& p, const Dataset& data, const FlowConfig& cfg,
              const FlowObservables& obs = {});
/// Runs and also returns the trained predictor.
std::pair<RunRecord, Predictor> train(const Predictor& p, const Dataset& data,
                                      const FlowConfig& cfg, const FlowObservables& obs = {});

nlohmann::json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
nlohmann::json summary_json(const RunRecord& r);

/// One JSON object per checkpoint, followed by a single summary object.
void write_jsonl(const RunRecord& r, const std::filesystem::path& path);
RunRecord read_jsonl(const std::filesystem::path& path);

}  // namespace ntklab
