#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ntklab/data.hpp"
#include "ntklab/flow.hpp"
#include "ntklab/net.hpp"

namespace ntklab {

class GramBudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tangent-kernel evaluations Theta(w, x_mu, x_nu) over a probe set.
struct KernelGram {
  std::vector<std::string> probe_ids;
  Eigen::MatrixXd values;
  std::optional<Eigen::MatrixXd> cross;  // Theta(x_train, x_probe) when requested

  Eigen::Index size() const { return values.rows(); }
  double frobenius_norm() const { return values.norm(); }
};

struct GramOptions {
  std::size_t memory_budget_bytes = std::size_t{1} << 30;
  Eigen::Index block_size = 32;  // per-sample gradients held at once (materialized route)
};

/// Gram via the layer factorisation grad_{W^l} f = delta^{l+1} (z^l)^T / sqrt(fan_in):
/// Theta = sum_l (D_l^T D_l) .* (Z_l^T Z_l) / fan_in, without forming per-sample gradients.
KernelGram gram(const NetworkParams& params, const Eigen::MatrixXd& probe,
                std::vector<std::string> ids = {}, const GramOptions& opt = {});

/// Gram from explicitly materialized per-sample gradient vectors, built block by block.
KernelGram gram_materialized(const NetworkParams& params, const Eigen::MatrixXd& probe,
                             std::vector<std::string> ids = {}, const GramOptions& opt = {});

/// Theta(a_i, b_j) for the columns of a and b (factorised route).
Eigen::MatrixXd cross_gram(const NetworkParams& params, const Eigen::MatrixXd& a,
                           const Eigen::MatrixXd& b, const GramOptions& opt = {});

/// |Theta_1 - Theta_0|_F / |Theta_0|_F.
double kernel_change(const KernelGram& g0, const KernelGram& g1);

/// Smallest eigenvalue and trace, for the PSD check (lambda_min >= -tol * trace).
struct SpectrumCheck {
  double min_eigenvalue = 0.0;
  double trace = 0.0;
  bool psd(double rel_tol = 1e-8) const { return min_eigenvalue >= -rel_tol * trace; }
};
SpectrumCheck spectrum_check(const KernelGram& g);

/// Seeded subsample of m test columns used as the kernel probe set.
std::vector<Eigen::Index> probe_indices(Eigen::Index available, Eigen::Index m,
                                        std::uint64_t seed);
Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& idx);

/// Function-space gradient flow driven by a kernel frozen at `anchor`.
struct FrozenModel {
  NetworkParams anchor;
  Eigen::MatrixXd train_gram;  // n x n
  Eigen::MatrixXd eval_cross;  // m x n, Theta(x_eval, x_train)
  Eigen::VectorXd train_values;
  Eigen::VectorXd eval_values;
  double time = 0.0;
};

struct FrozenResult {
  FrozenModel model;
  RunRecord record;
  std::optional<double> eval_error;  // when eval labels were supplied
};

class FrozenFlowSystem {
 public:
  struct State {
    Eigen::VectorXd train;
    Eigen::VectorXd eval;
  };
  struct Eval {
    Eigen::VectorXd train_values;
    Eigen::VectorXd train_grad;  // (1/n) Theta_TT l'
    Eigen::VectorXd eval_grad;   // (1/n) Theta_ET l'
    LossReport report;
  };

  FrozenFlowSystem(const Eigen::MatrixXd& train_gram, const Eigen::MatrixXd& eval_cross,
                   const Eigen::VectorXd& labels, double loss_beta);

  Eval evaluate(const State& s) const;
  State propose(const State& s, const Eval& e, double dt) const;
  double output_change(const Eval& a, const Eval& b) const;
  double gradient_rotation(const Eval& a, const Eval& b) const;
  bool finite(const Eval& e) const;
  bool fitted(const Eval& e) const;

 private:
  const Eigen::MatrixXd* train_gram_;
  const Eigen::MatrixXd* eval_cross_;
  const Eigen::VectorXd* labels_;
  double loss_beta_;
};

/// Integrates the frozen-kernel dynamics from zero function values until every
/// training margin exceeds 1, reusing the network flow's step control.
FrozenResult frozen_flow(const NetworkParams& anchor, const Dataset& data,
                         const Eigen::MatrixXd& eval_x, const FlowConfig& cfg,
                         const Eigen::VectorXd* eval_y = nullptr,
                         const GramOptions& opt = {});
/// Same dynamics from precomputed kernel blocks.
FrozenResult frozen_flow_from_kernel(const Eigen::MatrixXd& train_gram,
                                     const Eigen::MatrixXd& eval_cross,
                                     const Eigen::VectorXd& train_y, const FlowConfig& cfg,
                                     const Eigen::VectorXd* eval_y = nullptr);

/// Test error of the frozen-kernel model anchored at the given (trained) parameters.
double kernel_transplant(const NetworkParams& trained, const Dataset& data,
                         const FlowConfig& cfg, const GramOptions& opt = {});

/// Binary layout: "NTKG", u32 version, u32 m, then m*m row-major f64, all little-endian.
/// Probe identifiers go to a JSON sidecar at `path` + ".json".
void write_gram(const KernelGram& g, const std::filesystem::path& path);
KernelGram read_gram(const std::filesystem::path& path);

}  // namespace ntklab
