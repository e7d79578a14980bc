#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ntklab {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// sp_beta(x) = ln(1 + e^{beta x}) / beta, evaluated without overflow.
double softplus(double x, double beta);
/// d/dx sp_beta(x) = logistic(beta x).
double softplus_derivative(double x, double beta);
/// Numerically stable logistic 1 / (1 + e^{-x}).
double logistic(double x);

struct Activation {
  enum class Kind { softplus, relu };

  Kind kind = Kind::softplus;
  double beta = 5.0;
  // Multiplies the Softplus so that preactivations have unit variance at init.
  double prefactor = 1.404;

  static Activation make_softplus(double beta = 5.0, double prefactor = 1.404);
  static Activation make_relu();

  double value(double x) const;
  // ReLU uses sigma'(0) = 0.
  double derivative(double x) const;

  std::string name() const;
};

struct Architecture {
  int input_dim = 1;
  int width = 1;
  int depth = 1;  // number of hidden layers
  Activation activation{};
  bool use_bias = false;

  void validate() const;
  std::size_t parameter_count() const;
};

/// Layer-ordered tensors W^0..W^L plus optional per-hidden-layer biases.
/// W^0 is h x d, W^1..W^{L-1} are h x h and W^L is 1 x h.
struct ParamTensors {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;

  double dot(const ParamTensors& other) const;
  double squared_norm() const;
  double norm() const;
  // this += scale * other
  ParamTensors& axpy(double scale, const ParamTensors& other);
  ParamTensors& scale(double factor);
  bool all_finite() const;
  bool same_shape(const ParamTensors& other) const;
  std::size_t size() const;
  Eigen::VectorXd flatten() const;
  void set_zero();
};

struct NetworkParams : ParamTensors {
  Architecture arch;
};

/// Gradient of a scalar with respect to every parameter; congruent with NetworkParams.
struct ParamGradient : ParamTensors {};

ParamGradient zero_gradient(const NetworkParams& params);

/// Single-pattern signals: preactivations z~^l, activations z^l, scalar output.
struct ForwardTrace {
  std::vector<Eigen::VectorXd> preactivations;
  std::vector<Eigen::VectorXd> activations;
  double output = 0.0;
};

/// The same signals for a batch of patterns stored column-wise (h x n).
struct BatchTrace {
  std::vector<Eigen::MatrixXd> preactivations;
  std::vector<Eigen::MatrixXd> activations;
  std::vector<Eigen::MatrixXd> derivatives;  // sigma'(z~^l)
  Eigen::RowVectorXd output;
};

NetworkParams init_gaussian(const Architecture& arch, std::uint64_t seed);

ForwardTrace forward(const NetworkParams& params, const Eigen::VectorXd& x);
BatchTrace forward_batch(const NetworkParams& params, const Eigen::MatrixXd& patterns);
/// Outputs only; does not keep the intermediate layers.
Eigen::VectorXd outputs(const NetworkParams& params, const Eigen::MatrixXd& patterns);

ParamGradient grad_output(const NetworkParams& params, const Eigen::VectorXd& x);

/// sum_mu coeffs[mu] * grad_w f(w, x_mu) from a stored batch trace.
ParamGradient backward_batch(const NetworkParams& params, const BatchTrace& trace,
                             const Eigen::MatrixXd& patterns,
                             const Eigen::VectorXd& coeffs);

/// df/dz~^l for every hidden layer and every column of the trace (h x n each).
std::vector<Eigen::MatrixXd> output_sensitivities(const NetworkParams& params,
                                                  const BatchTrace& trace);

/// Finite-difference rate of every hidden preactivation under one descent step
/// of size `step` along -loss_grad, evaluated at probe_x. Entry l holds layer l+1.
std::vector<Eigen::VectorXd> preactivation_rate(const NetworkParams& params,
                                                const ParamGradient& loss_grad,
                                                const Eigen::VectorXd& probe_x,
                                                double step);

/// Binary layout: "NTKP", u32 version, u32 input_dim, width, depth, activation kind,
/// use_bias, f64 beta, prefactor, then every weight matrix (row-major) and bias vector
/// in layer order, all little-endian.
void write_params(const NetworkParams& params, const std::filesystem::path& path);
NetworkParams read_params(const std::filesystem::path& path);

/// Root-mean-square over the entries of v.
double rms(const Eigen::VectorXd& v);

}  // namespace ntklab
