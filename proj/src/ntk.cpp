#include "ntklab/ntk.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ntklab/binary_io.hpp"

namespace ntklab {

namespace {

struct LayerFactors {
  std::vector<Eigen::MatrixXd> deltas;       // df/dz~^l, h x m
  std::vector<Eigen::MatrixXd> activations;  // z^l, h x m
};

LayerFactors factors(const NetworkParams& params, const Eigen::MatrixXd& x) {
  BatchTrace t = forward_batch(params, x);
  LayerFactors f;
  f.deltas = output_sensitivities(params, t);
  f.activations = std::move(t.activations);
  return f;
}

void check_factor_budget(const NetworkParams& params, Eigen::Index ma, Eigen::Index mb,
                         const GramOptions& opt) {
  const auto h = static_cast<std::size_t>(params.arch.width);
  const auto L = static_cast<std::size_t>(params.arch.depth);
  const std::size_t bytes =
      8 * (static_cast<std::size_t>(ma + mb) * h * 2 * L + static_cast<std::size_t>(ma * mb));
  if (bytes > opt.memory_budget_bytes) {
    std::ostringstream os;
    os << "gram needs ~" << bytes << " bytes (budget " << opt.memory_budget_bytes
       << "); subsample the probe set";
    throw GramBudgetError(os.str());
  }
}

Eigen::MatrixXd factored_cross(const NetworkParams& params, const Eigen::MatrixXd& a,
                               const LayerFactors& fa, const Eigen::MatrixXd& b,
                               const LayerFactors& fb) {
  const auto L = static_cast<std::size_t>(params.arch.depth);
  const double d = params.arch.input_dim;
  const double h = params.arch.width;
  // W^0 block.
  Eigen::MatrixXd theta =
      (fa.deltas[0].transpose() * fb.deltas[0]).cwiseProduct(a.transpose() * b) / d;
  // W^1..W^{L-1}.
  for (std::size_t l = 1; l < L; ++l)
    theta += (fa.deltas[l].transpose() * fb.deltas[l])
                 .cwiseProduct(fa.activations[l - 1].transpose() * fb.activations[l - 1]) /
             h;
  // W^L, whose gradient is z^L / sqrt(h).
  theta += fa.activations[L - 1].transpose() * fb.activations[L - 1] / h;
  if (params.arch.use_bias)
    for (std::size_t l = 0; l < L; ++l) theta += fa.deltas[l].transpose() * fb.deltas[l];
  return theta;
}

std::vector<std::string> default_ids(Eigen::Index m, std::vector<std::string> ids) {
  if (ids.empty()) {
    ids.reserve(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i) ids.push_back(std::to_string(i));
  }
  if (static_cast<Eigen::Index>(ids.size()) != m)
    throw DimensionError("gram: probe id count does not match probe size");
  return ids;
}

}  // namespace

KernelGram gram(const NetworkParams& params, const Eigen::MatrixXd& probe,
                std::vector<std::string> ids, const GramOptions& opt) {
  if (probe.cols() == 0) throw std::invalid_argument("gram: empty probe set");
  check_factor_budget(params, probe.cols(), 0, opt);
  const LayerFactors f = factors(params, probe);
  KernelGram g;
  g.values = factored_cross(params, probe, f, probe, f);
  // Exact symmetry; the two products differ only by round-off.
  g.values = 0.5 * (g.values + g.values.transpose()).eval();
  g.probe_ids = default_ids(probe.cols(), std::move(ids));
  return g;
}

Eigen::MatrixXd cross_gram(const NetworkParams& params, const Eigen::MatrixXd& a,
                           const Eigen::MatrixXd& b, const GramOptions& opt) {
  check_factor_budget(params, a.cols(), b.cols(), opt);
  const LayerFactors fa = factors(params, a);
  const LayerFactors fb = factors(params, b);
  return factored_cross(params, a, fa, b, fb);
}

KernelGram gram_materialized(const NetworkParams& params, const Eigen::MatrixXd& probe,
                             std::vector<std::string> ids, const GramOptions& opt) {
  const Eigen::Index m = probe.cols();
  if (m == 0) throw std::invalid_argument("gram: empty probe set");
  const auto P = static_cast<std::size_t>(params.size());
  const Eigen::Index block = std::clamp<Eigen::Index>(opt.block_size, 1, m);
  const std::size_t full_bytes = 8 * P * static_cast<std::size_t>(m);
  const std::size_t block_bytes = 8 * P * 2 * static_cast<std::size_t>(block);
  if (block_bytes > opt.memory_budget_bytes && full_bytes > opt.memory_budget_bytes) {
    std::ostringstream os;
    os << "materialized gram needs " << std::min(full_bytes, block_bytes) << " bytes for "
       << m << " probes x " << P << " parameters (budget " << opt.memory_budget_bytes
       << "); subsample the probe set or reduce the block size";
    throw GramBudgetError(os.str());
  }

  auto block_gradients = [&](Eigen::Index start, Eigen::Index count) {
    Eigen::MatrixXd g(static_cast<Eigen::Index>(P), count);
    for (Eigen::Index j = 0; j < count; ++j)
      g.col(j) = grad_output(params, probe.col(start + j)).flatten();
    return g;
  };

  KernelGram out;
  out.values.resize(m, m);
  if (full_bytes <= opt.memory_budget_bytes) {
    const Eigen::MatrixXd g = block_gradients(0, m);
    out.values = g.transpose() * g;
  } else {
    for (Eigen::Index i = 0; i < m; i += block) {
      const Eigen::Index ni = std::min(block, m - i);
      const Eigen::MatrixXd gi = block_gradients(i, ni);
      for (Eigen::Index j = i; j < m; j += block) {
        const Eigen::Index nj = std::min(block, m - j);
        const Eigen::MatrixXd blk =
            j == i ? Eigen::MatrixXd(gi.transpose() * gi)
                   : Eigen::MatrixXd(gi.transpose() * block_gradients(j, nj));
        out.values.block(i, j, ni, nj) = blk;
        out.values.block(j, i, nj, ni) = blk.transpose();
      }
    }
  }
  out.probe_ids = default_ids(m, std::move(ids));
  return out;
}

double kernel_change(const KernelGram& g0, const KernelGram& g1) {
  if (g0.values.rows() != g1.values.rows() || g0.values.cols() != g1.values.cols() ||
      g0.probe_ids != g1.probe_ids)
    throw std::invalid_argument("kernel_change: probe sets differ");
  const double n0 = g0.frobenius_norm();
  if (!(n0 > 0.0)) throw std::invalid_argument("kernel_change: reference kernel has zero norm");
  return (g1.values - g0.values).norm() / n0;
}

SpectrumCheck spectrum_check(const KernelGram& g) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g.values, Eigen::EigenvaluesOnly);
  return {eig.eigenvalues().minCoeff(), g.values.trace()};
}

std::vector<Eigen::Index> probe_indices(Eigen::Index available, Eigen::Index m,
                                        std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(available));
  std::iota(idx.begin(), idx.end(), 0);
  if (m >= available) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = x.col(idx[j]);
  return out;
}

FrozenFlowSystem::FrozenFlowSystem(const Eigen::MatrixXd& train_gram,
                                   const Eigen::MatrixXd& eval_cross,
                                   const Eigen::VectorXd& labels, double loss_beta)
    : train_gram_(&train_gram), eval_cross_(&eval_cross), labels_(&labels),
      loss_beta_(loss_beta) {}

FrozenFlowSystem::Eval FrozenFlowSystem::evaluate(const State& s) const {
  const Eigen::Index n = s.train.size();
  Eval e;
  e.train_values = s.train;
  Eigen::VectorXd lprime(n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    lprime(i) = soft_hinge_derivative(s.train(i), (*labels_)(i), loss_beta_);
    total += soft_hinge(s.train(i), (*labels_)(i), loss_beta_);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  e.train_grad = (*train_gram_) * lprime * inv_n;
  e.eval_grad = eval_cross_->rows() > 0 ? Eigen::VectorXd((*eval_cross_) * lprime * inv_n)
                                        : Eigen::VectorXd();
  e.report.margins = s.train.cwiseProduct(*labels_);
  e.report.loss = total * inv_n;
  e.report.all_fitted = (e.report.margins.array() > 1.0).all();
  e.report.raw_outputs = s.train;
  return e;
}

FrozenFlowSystem::State FrozenFlowSystem::propose(const State& s, const Eval& e,
                                                  double dt) const {
  State next{s.train - dt * e.train_grad, s.eval};
  if (e.eval_grad.size() > 0) next.eval -= dt * e.eval_grad;
  return next;
}

double FrozenFlowSystem::output_change(const Eval& a, const Eval& b) const {
  return (a.train_values - b.train_values).cwiseAbs().maxCoeff();
}

double FrozenFlowSystem::gradient_rotation(const Eval& a, const Eval& b) const {
  const double diff = (a.train_grad - b.train_grad).squaredNorm();
  const double denom = a.train_grad.norm() * b.train_grad.norm();
  if (denom == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / denom;
}

bool FrozenFlowSystem::finite(const Eval& e) const {
  return e.train_values.allFinite() && e.train_grad.allFinite() &&
         (e.eval_grad.size() == 0 || e.eval_grad.allFinite());
}

bool FrozenFlowSystem::fitted(const Eval& e) const { return stopping_check(e.report); }

FrozenResult frozen_flow_from_kernel(const Eigen::MatrixXd& train_gram,
                                     const Eigen::MatrixXd& eval_cross,
                                     const Eigen::VectorXd& train_y, const FlowConfig& cfg,
                                     const Eigen::VectorXd* eval_y) {
  cfg.validate();
  const Eigen::Index n = train_gram.rows();
  if (train_gram.cols() != n || train_y.size() != n || (eval_cross.rows() > 0 && eval_cross.cols() != n))
    throw DimensionError("frozen_flow: kernel blocks do not match the training set");
  if (eval_y && eval_y->size() != eval_cross.rows())
    throw DimensionError("frozen_flow: eval labels do not match the eval set");

  FrozenFlowSystem sys(train_gram, eval_cross, train_y, cfg.loss_beta);
  FrozenFlowSystem::State init{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(eval_cross.rows())};
  AdaptiveStepper<FrozenFlowSystem> stepper(sys, init, cfg);
  CheckpointGrid grid(cfg.checkpoint_t0, cfg.checkpoint_ratio);

  FrozenResult res;
  auto push = [&] {
    if (!res.record.checkpoints.empty() && res.record.checkpoints.back().t == stepper.time())
      return;
    const auto& rep = stepper.eval().report;
    Checkpoint c;
    c.t = stepper.time();
    c.step = stepper.accepted();
    c.loss = rep.loss;
    c.min_margin = rep.margins.minCoeff();
    c.train_error = static_cast<double>((rep.margins.array() <= 0.0).count()) /
                    static_cast<double>(n);
    const auto& ev = stepper.state().eval;
    if (eval_y && ev.size() > 0) c.test_error = classification_error(ev, *eval_y);
    const auto& shown = ev.size() > 0 ? ev : stepper.state().train;
    c.output_norm = std::sqrt(shown.squaredNorm() / static_cast<double>(shown.size()));
    c.output_change_norm = c.output_norm;
    res.record.checkpoints.push_back(c);
  };
  push();

  RunStatus status = RunStatus::running;
  while (status == RunStatus::running) {
    if (stepper.fitted()) {
      status = RunStatus::stopped;
    } else if (stepper.accepted() >= cfg.max_steps) {
      status = RunStatus::max_steps;
    } else {
      const StepStatus s = stepper.step();
      if (s == StepStatus::diverged) status = RunStatus::diverged;
      else if (s == StepStatus::accepted && grid.due(stepper.time())) push();
    }
  }
  push();
  res.record.status = status;
  res.record.accepted_steps = stepper.accepted();
  res.record.rejected_steps = stepper.rejected();
  res.record.final_time = stepper.time();
  res.record.final_dt = stepper.dt();
  res.record.t_half = half_time(res.record);

  res.model.train_gram = train_gram;
  res.model.eval_cross = eval_cross;
  res.model.train_values = stepper.state().train;
  res.model.eval_values = stepper.state().eval;
  res.model.time = stepper.time();
  if (eval_y && eval_cross.rows() > 0)
    res.eval_error = classification_error(res.model.eval_values, *eval_y);
  return res;
}

FrozenResult frozen_flow(const NetworkParams& anchor, const Dataset& data,
                         const Eigen::MatrixXd& eval_x, const FlowConfig& cfg,
                         const Eigen::VectorXd* eval_y, const GramOptions& opt) {
  const Eigen::MatrixXd train_gram = gram(anchor, data.train_x, {}, opt).values;
  const Eigen::MatrixXd eval_cross = eval_x.cols() > 0
                                         ? cross_gram(anchor, eval_x, data.train_x, opt)
                                         : Eigen::MatrixXd(0, data.n_train());
  FrozenResult r = frozen_flow_from_kernel(train_gram, eval_cross, data.train_y, cfg, eval_y);
  r.model.anchor = anchor;
  return r;
}

double kernel_transplant(const NetworkParams& trained, const Dataset& data,
                         const FlowConfig& cfg, const GramOptions& opt) {
  if (data.n_test() == 0) throw std::invalid_argument("kernel_transplant: empty test set");
  const FrozenResult r = frozen_flow(trained, data, data.test_x, cfg, &data.test_y, opt);
  if (r.record.status != RunStatus::stopped)
    throw std::runtime_error("kernel_transplant: frozen dynamics ended with status " +
                             to_string(r.record.status));
  return *r.eval_error;
}

void write_gram(const KernelGram& g, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto m = static_cast<std::uint32_t>(g.values.rows());
  out.write("NTKG", 4);
  binary::put_u32(out, 1);
  binary::put_u32(out, m);
  for (Eigen::Index i = 0; i < g.values.rows(); ++i)
    for (Eigen::Index j = 0; j < g.values.cols(); ++j) binary::put_f64(out, g.values(i, j));
  std::ofstream side(path.string() + ".json");
  side << nlohmann::json{{"probe_ids", g.probe_ids}, {"m", m}, {"layout", "row-major f64 LE"}}
              .dump(2)
       << '\n';
}

KernelGram read_gram(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "NTKG")
    throw std::runtime_error("not a gram file (bad magic): " + path.string());
  const std::uint32_t version = binary::get_u32(in);
  if (version != 1) throw std::runtime_error("unsupported gram version " + std::to_string(version));
  const std::uint32_t m = binary::get_u32(in);
  KernelGram g;
  g.values.resize(m, m);
  for (std::uint32_t i = 0; i < m; ++i)
    for (std::uint32_t j = 0; j < m; ++j) g.values(i, j) = binary::get_f64(in);
  std::ifstream side(path.string() + ".json");
  if (side) {
    g.probe_ids = nlohmann::json::parse(side).at("probe_ids").get<std::vector<std::string>>();
  } else {
    g.probe_ids = default_ids(m, {});
  }
  return g;
}

}  // namespace ntklab
