#include "ntklab/objective.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ntklab {

std::string to_string(ModelVariant v) {
  return v == ModelVariant::centered ? "centered" : "uncentered";
}

ModelVariant parse_variant(const std::string& s) {
  if (s == "centered") return ModelVariant::centered;
  if (s == "uncentered") return ModelVariant::uncentered;
  throw std::invalid_argument("unknown model variant '" + s + "' (centered|uncentered)");
}

Predictor::Predictor(NetworkParams init, double alpha, ModelVariant variant)
    : params_(init),
      init_(std::make_shared<const NetworkParams>(std::move(init))),
      alpha_(alpha),
      variant_(variant) {
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw std::invalid_argument("predictor scale alpha must be positive and finite");
}

void Predictor::set_params(NetworkParams params) {
  if (!params.same_shape(*init_))
    throw DimensionError("set_params: shape differs from the initialization snapshot");
  params_ = std::move(params);
}

std::optional<std::string> Predictor::warning() const {
  if (variant_ == ModelVariant::uncentered && alpha_ > 10.0) {
    std::ostringstream os;
    os << "uncentered model with alpha=" << alpha_
       << " is expected not to converge for alpha >> 1";
    return os.str();
  }
  return std::nullopt;
}

Eigen::VectorXd init_offsets(const Predictor& p, const Eigen::MatrixXd& patterns) {
  if (p.variant() == ModelVariant::uncentered) return Eigen::VectorXd::Zero(patterns.cols());
  return outputs(p.init_snapshot(), patterns);
}

Eigen::VectorXd predict_batch(const Predictor& p, const Eigen::MatrixXd& patterns,
                              const Eigen::VectorXd& offsets) {
  if (offsets.size() != patterns.cols())
    throw DimensionError("predict_batch: offsets do not match batch size");
  return p.alpha() * (outputs(p.params(), patterns) - offsets);
}

Eigen::VectorXd predict_batch(const Predictor& p, const Eigen::MatrixXd& patterns) {
  return predict_batch(p, patterns, init_offsets(p, patterns));
}

double predict(const Predictor& p, const Eigen::VectorXd& x) {
  return predict_batch(p, x)(0);
}

double soft_hinge(double prediction, double label, double beta) {
  return softplus(1.0 - prediction * label, beta);
}

double soft_hinge_derivative(double prediction, double label, double beta) {
  return -label * logistic(beta * (1.0 - prediction * label));
}

namespace {

void check_batch(const Eigen::MatrixXd& patterns, const Eigen::VectorXd& labels,
                 const Eigen::VectorXd& offsets) {
  if (patterns.cols() == 0) throw std::invalid_argument("loss over an empty batch");
  if (labels.size() != patterns.cols() || offsets.size() != patterns.cols())
    throw DimensionError("loss: labels/offsets do not match batch size");
}

LossReport report_from_outputs(double alpha, Eigen::VectorXd f,
                               const Eigen::VectorXd& labels, const Eigen::VectorXd& offsets,
                               double loss_beta) {
  LossReport r;
  const Eigen::VectorXd F = alpha * (f - offsets);
  r.margins = F.cwiseProduct(labels);
  double total = 0.0;
  for (Eigen::Index i = 0; i < r.margins.size(); ++i)
    total += softplus(1.0 - r.margins(i), loss_beta);
  r.loss = total / static_cast<double>(r.margins.size());
  r.all_fitted = (r.margins.array() > 1.0).all();
  r.raw_outputs = std::move(f);
  return r;
}

}  // namespace

LossReport evaluate_loss(const Predictor& p, const Eigen::MatrixXd& patterns,
                         const Eigen::VectorXd& labels, const Eigen::VectorXd& offsets,
                         double loss_beta) {
  check_batch(patterns, labels, offsets);
  return report_from_outputs(p.alpha(), outputs(p.params(), patterns), labels, offsets, loss_beta);
}

std::pair<LossReport, ParamGradient> loss_and_grad(const NetworkParams& w, double alpha,
                                                   const Eigen::MatrixXd& patterns,
                                                   const Eigen::VectorXd& labels,
                                                   const Eigen::VectorXd& offsets,
                                                   double loss_beta) {
  check_batch(patterns, labels, offsets);
  const BatchTrace trace = forward_batch(w, patterns);
  LossReport r = report_from_outputs(alpha, trace.output.transpose(), labels, offsets, loss_beta);

  // dL/df_mu = alpha * dL/dF_mu = -y_mu logistic(beta (1 - m_mu)) / (alpha n)
  const double n = static_cast<double>(patterns.cols());
  Eigen::VectorXd coeffs(patterns.cols());
  for (Eigen::Index i = 0; i < coeffs.size(); ++i)
    coeffs(i) = -labels(i) * logistic(loss_beta * (1.0 - r.margins(i))) / (alpha * n);
  ParamGradient g = backward_batch(w, trace, patterns, coeffs);
  return {std::move(r), std::move(g)};
}

std::pair<LossReport, ParamGradient> loss_and_grad(const Predictor& p,
                                                   const Eigen::MatrixXd& patterns,
                                                   const Eigen::VectorXd& labels,
                                                   const Eigen::VectorXd& offsets,
                                                   double loss_beta) {
  return loss_and_grad(p.params(), p.alpha(), patterns, labels, offsets, loss_beta);
}

std::pair<LossReport, ParamGradient> loss_and_grad(const Predictor& p,
                                                   const Eigen::MatrixXd& patterns,
                                                   const Eigen::VectorXd& labels,
                                                   double loss_beta) {
  return loss_and_grad(p, patterns, labels, init_offsets(p, patterns), loss_beta);
}

bool stopping_check(const LossReport& report) {
  return report.margins.size() > 0 && (report.margins.array() > 1.0).all();
}

double classification_error(const Eigen::VectorXd& predictions, const Eigen::VectorXd& labels) {
  if (predictions.size() == 0) throw std::invalid_argument("error over an empty set");
  if (predictions.size() != labels.size())
    throw DimensionError("classification_error: size mismatch");
  Eigen::Index wrong = 0;
  for (Eigen::Index i = 0; i < predictions.size(); ++i)
    if (!(predictions(i) * labels(i) > 0.0)) ++wrong;
  return static_cast<double>(wrong) / static_cast<double>(predictions.size());
}

double test_error(const Predictor& p, const Eigen::MatrixXd& patterns,
                  const Eigen::VectorXd& labels) {
  if (patterns.cols() == 0) throw std::invalid_argument("test error over an empty slice");
  return classification_error(predict_batch(p, patterns), labels);
}

}  // namespace ntklab
