#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "ntklab/net.hpp"

namespace testing {

inline ntklab::Architecture tiny_arch(int d, int h, int L, bool bias = false,
                                      bool relu = false) {
  ntklab::Architecture a;
  a.input_dim = d;
  a.width = h;
  a.depth = L;
  a.use_bias = bias;
  if (relu) a.activation = ntklab::Activation::make_relu();
  return a;
}

// Central finite differences of a scalar function of the parameters, entry by entry.
inline ntklab::ParamGradient fd_gradient(const ntklab::NetworkParams& w,
                                         const std::function<double(const ntklab::NetworkParams&)>& fn,
                                         double step = 1e-5) {
  ntklab::ParamGradient g = ntklab::zero_gradient(w);
  ntklab::NetworkParams probe = w;
  for (std::size_t l = 0; l < w.weights.size(); ++l)
    for (Eigen::Index i = 0; i < w.weights[l].size(); ++i) {
      const double keep = probe.weights[l].data()[i];
      probe.weights[l].data()[i] = keep + step;
      const double up = fn(probe);
      probe.weights[l].data()[i] = keep - step;
      const double down = fn(probe);
      probe.weights[l].data()[i] = keep;
      g.weights[l].data()[i] = (up - down) / (2 * step);
    }
  for (std::size_t l = 0; l < w.biases.size(); ++l)
    for (Eigen::Index i = 0; i < w.biases[l].size(); ++i) {
      const double keep = probe.biases[l][i];
      probe.biases[l][i] = keep + step;
      const double up = fn(probe);
      probe.biases[l][i] = keep - step;
      const double down = fn(probe);
      probe.biases[l][i] = keep;
      g.biases[l][i] = (up - down) / (2 * step);
    }
  return g;
}

// max |a - b| / max(|b|_inf, floor) over all entries.
inline double relative_error(const ntklab::ParamTensors& a, const ntklab::ParamTensors& b,
                             double floor = 1e-8) {
  const Eigen::VectorXd x = a.flatten(), y = b.flatten();
  return (x - y).cwiseAbs().maxCoeff() / std::max(y.cwiseAbs().maxCoeff(), floor);
}

inline Eigen::MatrixXd sphere_patterns(int d, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(d, n);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) = g(rng);
    x.col(j) *= std::sqrt(static_cast<double>(d)) / x.col(j).norm();
  }
  return x;
}

// Slope of log y against log x by least squares.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const int n = static_cast<int>(x.size());
  double mx = 0, my = 0;
  for (int i = 0; i < n; ++i) {
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
  }
  return sxy / sxx;
}

}  // namespace testing
