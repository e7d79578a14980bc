#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "ntklab/net.hpp"

namespace ntklab {

inline constexpr double kDefaultLossBeta = 20.0;

enum class ModelVariant {
  centered,    // F = alpha (f(w, x) - f(w0, x))
  uncentered,  // F = alpha f(w, x)
};

std::string to_string(ModelVariant v);
ModelVariant parse_variant(const std::string& s);

/// Live parameters plus a frozen copy of the initialization they started from.
class Predictor {
 public:
  Predictor(NetworkParams init, double alpha, ModelVariant variant = ModelVariant::centered);

  const NetworkParams& params() const { return params_; }
  NetworkParams& params() { return params_; }
  const NetworkParams& init_snapshot() const { return *init_; }
  double alpha() const { return alpha_; }
  ModelVariant variant() const { return variant_; }

  // Replaces the live parameters; shape must match the snapshot.
  void set_params(NetworkParams params);

  /// Diagnostic for configurations that are known not to train well, if any.
  std::optional<std::string> warning() const;

 private:
  NetworkParams params_;
  std::shared_ptr<const NetworkParams> init_;
  double alpha_;
  ModelVariant variant_;
};

struct LossReport {
  double loss = 0.0;        // alpha^2 * L, i.e. the mean soft-hinge loss
  Eigen::VectorXd margins;  // F(x_mu) y_mu
  bool all_fitted = false;  // every margin > 1
  Eigen::VectorXd raw_outputs;  // f(w, x_mu), kept for step control
};

/// f(w0, x) over the columns of `patterns`; zero for the uncentered variant.
Eigen::VectorXd init_offsets(const Predictor& p, const Eigen::MatrixXd& patterns);

double predict(const Predictor& p, const Eigen::VectorXd& x);
Eigen::VectorXd predict_batch(const Predictor& p, const Eigen::MatrixXd& patterns);
Eigen::VectorXd predict_batch(const Predictor& p, const Eigen::MatrixXd& patterns,
                              const Eigen::VectorXd& offsets);

/// Soft-hinge loss per pattern, sp_beta(1 - F y).
double soft_hinge(double prediction, double label, double beta = kDefaultLossBeta);
/// d soft_hinge / d prediction.
double soft_hinge_derivative(double prediction, double label, double beta = kDefaultLossBeta);

LossReport evaluate_loss(const Predictor& p, const Eigen::MatrixXd& patterns,
                         const Eigen::VectorXd& labels, const Eigen::VectorXd& offsets,
                         double loss_beta = kDefaultLossBeta);

/// L(w) = (alpha^2 n)^{-1} sum_mu sp_beta(1 - F(w, x_mu) y_mu) and its exact gradient.
/// The report stores alpha^2 L.
std::pair<LossReport, ParamGradient> loss_and_grad(const Predictor& p,
                                                   const Eigen::MatrixXd& patterns,
                                                   const Eigen::VectorXd& labels,
                                                   const Eigen::VectorXd& offsets,
                                                   double loss_beta = kDefaultLossBeta);
/// Same objective evaluated at arbitrary parameters w with scale alpha.
std::pair<LossReport, ParamGradient> loss_and_grad(const NetworkParams& w, double alpha,
                                                   const Eigen::MatrixXd& patterns,
                                                   const Eigen::VectorXd& labels,
                                                   const Eigen::VectorXd& offsets,
                                                   double loss_beta = kDefaultLossBeta);
std::pair<LossReport, ParamGradient> loss_and_grad(const Predictor& p,
                                                   const Eigen::MatrixXd& patterns,
                                                   const Eigen::VectorXd& labels,
                                                   double loss_beta = kDefaultLossBeta);

bool stopping_check(const LossReport& report);

/// Fraction of patterns with sign(F) != y; F = 0 counts as an error.
double classification_error(const Eigen::VectorXd& predictions, const Eigen::VectorXd& labels);
double test_error(const Predictor& p, const Eigen::MatrixXd& patterns,
                  const Eigen::VectorXd& labels);

}  // namespace ntklab
