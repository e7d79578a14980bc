#include "ntklab/net.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "ntklab/binary_io.hpp"

namespace ntklab {

double softplus(double x, double beta) {
  const double bx = beta * x;
  // max(bx, 0) + log1p(exp(-|bx|)) never overflows.
  return (std::max(bx, 0.0) + std::log1p(std::exp(-std::abs(bx)))) / beta;
}

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_derivative(double x, double beta) { return logistic(beta * x); }

Activation Activation::make_softplus(double beta, double prefactor) {
  Activation a;
  a.kind = Kind::softplus;
  a.beta = beta;
  a.prefactor = prefactor;
  return a;
}

Activation Activation::make_relu() {
  Activation a;
  a.kind = Kind::relu;
  a.beta = 0.0;
  a.prefactor = 1.0;
  return a;
}

double Activation::value(double x) const {
  if (kind == Kind::relu) return prefactor * (x > 0.0 ? x : 0.0);
  return prefactor * softplus(x, beta);
}

double Activation::derivative(double x) const {
  if (kind == Kind::relu) return x > 0.0 ? prefactor : 0.0;
  return prefactor * softplus_derivative(x, beta);
}

std::string Activation::name() const {
  return kind == Kind::relu ? "relu" : "softplus";
}

void Architecture::validate() const {
  if (input_dim < 1 || width < 1 || depth < 1) {
    std::ostringstream os;
    os << "architecture needs d, h, L >= 1 (got d=" << input_dim << ", h=" << width
       << ", L=" << depth << ")";
    throw std::invalid_argument(os.str());
  }
  if (activation.kind == Activation::Kind::softplus &&
      !(activation.beta > 0.0 && activation.prefactor > 0.0)) {
    throw std::invalid_argument("softplus activation needs beta > 0 and prefactor > 0");
  }
}

std::size_t Architecture::parameter_count() const {
  const auto d = static_cast<std::size_t>(input_dim);
  const auto h = static_cast<std::size_t>(width);
  const auto L = static_cast<std::size_t>(depth);
  std::size_t n = h * d + (L - 1) * h * h + h;
  if (use_bias) n += L * h;
  return n;
}

double ParamTensors::dot(const ParamTensors& other) const {
  double s = 0.0;
  for (std::size_t l = 0; l < weights.size(); ++l)
    s += weights[l].cwiseProduct(other.weights[l]).sum();
  for (std::size_t l = 0; l < biases.size(); ++l) s += biases[l].dot(other.biases[l]);
  return s;
}

double ParamTensors::squared_norm() const {
  double s = 0.0;
  for (const auto& w : weights) s += w.squaredNorm();
  for (const auto& b : biases) s += b.squaredNorm();
  return s;
}

double ParamTensors::norm() const { return std::sqrt(squared_norm()); }

ParamTensors& ParamTensors::axpy(double scale, const ParamTensors& other) {
  for (std::size_t l = 0; l < weights.size(); ++l) weights[l] += scale * other.weights[l];
  for (std::size_t l = 0; l < biases.size(); ++l) biases[l] += scale * other.biases[l];
  return *this;
}

ParamTensors& ParamTensors::scale(double factor) {
  for (auto& w : weights) w *= factor;
  for (auto& b : biases) b *= factor;
  return *this;
}

bool ParamTensors::all_finite() const {
  for (const auto& w : weights)
    if (!w.allFinite()) return false;
  for (const auto& b : biases)
    if (!b.allFinite()) return false;
  return true;
}

bool ParamTensors::same_shape(const ParamTensors& other) const {
  if (weights.size() != other.weights.size() || biases.size() != other.biases.size())
    return false;
  for (std::size_t l = 0; l < weights.size(); ++l)
    if (weights[l].rows() != other.weights[l].rows() ||
        weights[l].cols() != other.weights[l].cols())
      return false;
  for (std::size_t l = 0; l < biases.size(); ++l)
    if (biases[l].size() != other.biases[l].size()) return false;
  return true;
}

std::size_t ParamTensors::size() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
  for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
  return n;
}

Eigen::VectorXd ParamTensors::flatten() const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
  Eigen::Index k = 0;
  for (const auto& w : weights) {
    out.segment(k, w.size()) = w.reshaped();
    k += w.size();
  }
  for (const auto& b : biases) {
    out.segment(k, b.size()) = b;
    k += b.size();
  }
  return out;
}

void ParamTensors::set_zero() {
  for (auto& w : weights) w.setZero();
  for (auto& b : biases) b.setZero();
}

ParamGradient zero_gradient(const NetworkParams& params) {
  ParamGradient g;
  g.weights = params.weights;
  g.biases = params.biases;
  g.set_zero();
  return g;
}

NetworkParams init_gaussian(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = normal(rng);
  };

  NetworkParams p;
  p.arch = arch;
  const int h = arch.width;
  p.weights.reserve(static_cast<std::size_t>(arch.depth) + 1);
  p.weights.emplace_back(h, arch.input_dim);
  for (int l = 1; l < arch.depth; ++l) p.weights.emplace_back(h, h);
  p.weights.emplace_back(1, h);
  for (auto& w : p.weights) fill(w);
  // Biases are drawn after all weights so the weights do not depend on the flag.
  if (arch.use_bias) {
    for (int l = 0; l < arch.depth; ++l) {
      Eigen::VectorXd b(h);
      for (Eigen::Index i = 0; i < h; ++i) b(i) = normal(rng);
      p.biases.push_back(std::move(b));
    }
  }
  return p;
}

namespace {

void check_patterns(const NetworkParams& params, Eigen::Index rows) {
  if (rows != params.arch.input_dim) {
    std::ostringstream os;
    os << "input has dimension " << rows << " but network expects d=" << params.arch.input_dim;
    throw DimensionError(os.str());
  }
}

Eigen::MatrixXd apply_activation(const Activation& act, const Eigen::MatrixXd& z) {
  return z.unaryExpr([&act](double v) { return act.value(v); });
}

// sigma and sigma' in one pass; Softplus shares one exp between the two.
void activate(const Activation& act, const Eigen::MatrixXd& z, Eigen::MatrixXd& value,
              Eigen::MatrixXd& deriv) {
  value.resize(z.rows(), z.cols());
  deriv.resize(z.rows(), z.cols());
  const double* in = z.data();
  double* v = value.data();
  double* dv = deriv.data();
  const Eigen::Index n = z.size();
  const double a = act.prefactor;
  if (act.kind == Activation::Kind::relu) {
    for (Eigen::Index i = 0; i < n; ++i) {
      v[i] = in[i] > 0.0 ? a * in[i] : 0.0;
      dv[i] = in[i] > 0.0 ? a : 0.0;
    }
    return;
  }
  const double beta = act.beta;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double bx = beta * in[i];
    const double e = std::exp(-std::abs(bx));
    v[i] = a * ((std::max(bx, 0.0) + std::log1p(e)) / beta);  // same rounding as value()
    dv[i] = a * (bx >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e));
  }
}

// Deltas df/dz~^l (scaled per column by coeffs) for l = 1..L, stored at index l-1.
std::vector<Eigen::MatrixXd> backprop(const NetworkParams& params, const BatchTrace& trace,
                                      const Eigen::RowVectorXd& coeffs) {
  const auto& arch = params.arch;
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(arch.width));
  const auto L = static_cast<std::size_t>(arch.depth);
  std::vector<Eigen::MatrixXd> deltas(L);
  deltas[L - 1] = trace.derivatives[L - 1].cwiseProduct(params.weights[L].transpose() * coeffs) *
                  inv_sqrt_h;
  for (std::size_t l = L - 1; l >= 1; --l) {
    deltas[l - 1] =
        trace.derivatives[l - 1].cwiseProduct(params.weights[l].transpose() * deltas[l]) *
        inv_sqrt_h;
  }
  return deltas;
}

}  // namespace

BatchTrace forward_batch(const NetworkParams& params, const Eigen::MatrixXd& patterns) {
  check_patterns(params, patterns.rows());
  const auto& arch = params.arch;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(arch.input_dim));
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(arch.width));
  const auto L = static_cast<std::size_t>(arch.depth);

  BatchTrace t;
  t.preactivations.resize(L);
  t.activations.resize(L);
  t.derivatives.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::MatrixXd pre = l == 0 ? Eigen::MatrixXd(params.weights[0] * patterns * inv_sqrt_d)
                                 : Eigen::MatrixXd(params.weights[l] * t.activations[l - 1] *
                                                   inv_sqrt_h);
    if (arch.use_bias) pre.colwise() += params.biases[l];
    activate(arch.activation, pre, t.activations[l], t.derivatives[l]);
    t.preactivations[l] = std::move(pre);
  }
  t.output = params.weights[L] * t.activations[L - 1] * inv_sqrt_h;
  return t;
}

Eigen::VectorXd outputs(const NetworkParams& params, const Eigen::MatrixXd& patterns) {
  check_patterns(params, patterns.rows());
  const auto& arch = params.arch;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(arch.input_dim));
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(arch.width));
  const auto L = static_cast<std::size_t>(arch.depth);
  Eigen::MatrixXd z = params.weights[0] * patterns * inv_sqrt_d;
  for (std::size_t l = 0; l < L; ++l) {
    if (l > 0) z = params.weights[l] * z * inv_sqrt_h;
    if (arch.use_bias) z.colwise() += params.biases[l];
    z = apply_activation(arch.activation, z);
  }
  return (params.weights[L] * z * inv_sqrt_h).transpose();
}

ForwardTrace forward(const NetworkParams& params, const Eigen::VectorXd& x) {
  BatchTrace bt = forward_batch(params, x);
  ForwardTrace t;
  for (auto& m : bt.preactivations) t.preactivations.emplace_back(m.col(0));
  for (auto& m : bt.activations) t.activations.emplace_back(m.col(0));
  t.output = bt.output(0);
  return t;
}

ParamGradient backward_batch(const NetworkParams& params, const BatchTrace& trace,
                             const Eigen::MatrixXd& patterns, const Eigen::VectorXd& coeffs) {
  check_patterns(params, patterns.rows());
  if (coeffs.size() != patterns.cols() || trace.output.size() != patterns.cols())
    throw DimensionError("backward_batch: coefficient count does not match batch size");
  const auto& arch = params.arch;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(arch.input_dim));
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(arch.width));
  const auto L = static_cast<std::size_t>(arch.depth);

  const Eigen::RowVectorXd c = coeffs.transpose();
  const auto deltas = backprop(params, trace, c);

  ParamGradient g;
  g.weights.resize(L + 1);
  g.weights[L] = (trace.activations[L - 1] * c.transpose()).transpose() * inv_sqrt_h;
  for (std::size_t l = L - 1; l >= 1; --l)
    g.weights[l] = deltas[l] * trace.activations[l - 1].transpose() * inv_sqrt_h;
  g.weights[0] = deltas[0] * patterns.transpose() * inv_sqrt_d;
  if (arch.use_bias) {
    g.biases.resize(L);
    for (std::size_t l = 0; l < L; ++l) g.biases[l] = deltas[l].rowwise().sum();
  }
  return g;
}

std::vector<Eigen::MatrixXd> output_sensitivities(const NetworkParams& params,
                                                  const BatchTrace& trace) {
  const Eigen::RowVectorXd ones = Eigen::RowVectorXd::Ones(trace.output.size());
  return backprop(params, trace, ones);
}

ParamGradient grad_output(const NetworkParams& params, const Eigen::VectorXd& x) {
  const BatchTrace t = forward_batch(params, x);
  return backward_batch(params, t, x, Eigen::VectorXd::Ones(1));
}

std::vector<Eigen::VectorXd> preactivation_rate(const NetworkParams& params,
                                                const ParamGradient& loss_grad,
                                                const Eigen::VectorXd& probe_x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("preactivation_rate: step must be > 0");
  if (!params.same_shape(loss_grad))
    throw DimensionError("preactivation_rate: gradient shape does not match parameters");
  NetworkParams moved = params;
  moved.axpy(-step, loss_grad);
  const ForwardTrace before = forward(params, probe_x);
  const ForwardTrace after = forward(moved, probe_x);
  std::vector<Eigen::VectorXd> rates;
  for (std::size_t l = 0; l < before.preactivations.size(); ++l) {
    Eigen::VectorXd r = (after.preactivations[l] - before.preactivations[l]) / step;
    if (!r.allFinite())
      throw std::runtime_error("preactivation_rate: non-finite rate, step too large");
    rates.push_back(std::move(r));
  }
  return rates;
}

double rms(const Eigen::VectorXd& v) {
  if (v.size() == 0) return 0.0;
  return std::sqrt(v.squaredNorm() / static_cast<double>(v.size()));
}

void write_params(const NetworkParams& params, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const Architecture& a = params.arch;
  out.write("NTKP", 4);
  binary::put_u32(out, 1);
  binary::put_u32(out, static_cast<std::uint32_t>(a.input_dim));
  binary::put_u32(out, static_cast<std::uint32_t>(a.width));
  binary::put_u32(out, static_cast<std::uint32_t>(a.depth));
  binary::put_u32(out, a.activation.kind == Activation::Kind::relu ? 1u : 0u);
  binary::put_u32(out, a.use_bias ? 1u : 0u);
  binary::put_f64(out, a.activation.beta);
  binary::put_f64(out, a.activation.prefactor);
  for (const auto& w : params.weights)
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) binary::put_f64(out, w(i, j));
  for (const auto& b : params.biases)
    for (Eigen::Index i = 0; i < b.size(); ++i) binary::put_f64(out, b[i]);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

NetworkParams read_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "NTKP")
    throw std::runtime_error("not a parameter file (bad magic): " + path.string());
  if (binary::get_u32(in) != 1) throw std::runtime_error("unsupported parameter file version");
  Architecture a;
  a.input_dim = static_cast<int>(binary::get_u32(in));
  a.width = static_cast<int>(binary::get_u32(in));
  a.depth = static_cast<int>(binary::get_u32(in));
  const bool relu = binary::get_u32(in) == 1;
  a.use_bias = binary::get_u32(in) == 1;
  const double beta = binary::get_f64(in);
  const double prefactor = binary::get_f64(in);
  a.activation = relu ? Activation::make_relu() : Activation::make_softplus(beta, prefactor);
  a.validate();
  NetworkParams p;
  p.arch = a;
  p.weights.emplace_back(a.width, a.input_dim);
  for (int l = 1; l < a.depth; ++l) p.weights.emplace_back(a.width, a.width);
  p.weights.emplace_back(1, a.width);
  if (a.use_bias) p.biases.assign(static_cast<std::size_t>(a.depth), Eigen::VectorXd(a.width));
  for (auto& w : p.weights)
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = binary::get_f64(in);
  for (auto& b : p.biases)
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = binary::get_f64(in);
  return p;
}

}  // namespace ntklab
