#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "ntklab/objective.hpp"

using namespace ntklab;
using testing::tiny_arch;

namespace {

NetworkParams perturbed(const NetworkParams& p, double amount, std::uint64_t seed) {
  NetworkParams q = p;
  q.axpy(amount, init_gaussian(p.arch, seed));
  return q;
}

}  // namespace

TEST_CASE("centered predictor vanishes at init") {
  const Predictor p(init_gaussian(tiny_arch(5, 8, 2, true), 1), 3.0);
  const Eigen::MatrixXd x = testing::sphere_patterns(5, 7, 2);
  CHECK(predict_batch(p, x).cwiseAbs().maxCoeff() == 0.0);
  for (Eigen::Index j = 0; j < x.cols(); ++j) CHECK(predict(p, x.col(j)) == 0.0);
  // F = 0 everywhere counts as all wrong
  CHECK(test_error(p, x, Eigen::VectorXd::Ones(7)) == 1.0);
}

TEST_CASE("predict against independent recomputation") {
  const NetworkParams w0 = init_gaussian(tiny_arch(4, 6, 3), 5);
  const Eigen::MatrixXd x = testing::sphere_patterns(4, 6, 6);
  const double alpha = 0.37;
  Predictor centered(w0, alpha);
  centered.set_params(perturbed(w0, 0.2, 9));
  Predictor uncentered(w0, alpha, ModelVariant::uncentered);
  uncentered.set_params(centered.params());
  const Eigen::VectorXd F = predict_batch(centered, x), G = predict_batch(uncentered, x);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double f = forward(centered.params(), x.col(j)).output;
    const double f0 = forward(w0, x.col(j)).output;
    CHECK(F[j] == doctest::Approx(alpha * (f - f0)).epsilon(1e-12));
    CHECK(G[j] == doctest::Approx(alpha * f).epsilon(1e-12));
  }
  CHECK_THROWS_AS(predict(centered, Eigen::VectorXd::Zero(3)), DimensionError);
  CHECK_THROWS(centered.set_params(init_gaussian(tiny_arch(4, 7, 3), 1)));
  CHECK_THROWS(Predictor(w0, 0.0));
}

TEST_CASE("predictor keeps its own init snapshot") {
  const NetworkParams w0 = init_gaussian(tiny_arch(2, 3, 1), 4);
  Predictor p(w0, 1.0);
  p.params().weights[0](0, 0) += 1.0;
  CHECK(p.init_snapshot().weights[0](0, 0) == w0.weights[0](0, 0));
  const Predictor copy = p;
  CHECK(&copy.init_snapshot() == &p.init_snapshot());
}

TEST_CASE("soft hinge closed form and shape") {
  CHECK(soft_hinge(0.0, 1.0) == doctest::Approx(std::log1p(std::exp(20.0)) / 20.0).epsilon(1e-15));
  CHECK(soft_hinge(0.0, 1.0) == doctest::Approx(1.0).epsilon(1e-8));
  double prev = soft_hinge(-5.0, 1.0);
  for (double m = -4.9; m < 5.0; m += 0.1) {
    const double v = soft_hinge(m, 1.0);
    CHECK(v < prev);
    prev = v;
  }
  // derivative against a central difference
  for (double F : {-0.7, 0.3, 0.95, 1.2}) {
    const double fd = (soft_hinge(F + 1e-6, -1.0) - soft_hinge(F - 1e-6, -1.0)) / 2e-6;
    CHECK(soft_hinge_derivative(F, -1.0) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("single pattern at F = 0 gives rescaled loss sp_20(1)") {
  const Predictor p(init_gaussian(tiny_arch(3, 4, 2), 3), 5.0);
  const Eigen::MatrixXd x = testing::sphere_patterns(3, 1, 1);
  auto [rep, g] = loss_and_grad(p, x, Eigen::VectorXd::Ones(1));
  CHECK(rep.loss == doctest::Approx(std::log1p(std::exp(20.0)) / 20.0).epsilon(1e-14));
  CHECK(rep.margins[0] == 0.0);
  CHECK_FALSE(rep.all_fitted);
}

TEST_CASE("loss gradient matches finite differences on random tiny nets") {
  for (int trial = 0; trial < 6; ++trial) {
    const bool bias = trial % 2 == 1;
    const NetworkParams w0 = init_gaussian(tiny_arch(3, 4 + trial, 2, bias), 40 + trial);
    const Eigen::MatrixXd x = testing::sphere_patterns(3, 5, 60 + trial);
    Eigen::VectorXd labels(5);
    labels << -1, -1, 1, 1, 1;
    const double alpha = 0.5 + trial;
    Predictor p(w0, alpha, trial % 3 == 2 ? ModelVariant::uncentered : ModelVariant::centered);
    p.set_params(perturbed(w0, 0.3, 80 + trial));
    const Eigen::VectorXd off = init_offsets(p, x);
    auto [rep, g] = loss_and_grad(p, x, labels, off);
    const ParamGradient fd = testing::fd_gradient(p.params(), [&](const NetworkParams& w) {
      return loss_and_grad(w, alpha, x, labels, off).first.loss / (alpha * alpha);
    });
    CAPTURE(trial);
    CHECK(testing::relative_error(g, fd) < 1e-5);
  }
}

TEST_CASE("fitted patterns give a flat loss") {
  const NetworkParams w0 = init_gaussian(tiny_arch(4, 6, 2), 7);
  const Eigen::MatrixXd x = testing::sphere_patterns(4, 8, 8);
  const NetworkParams w = perturbed(w0, 0.5, 9);
  const Eigen::VectorXd df = outputs(w, x) - outputs(w0, x);
  const Eigen::VectorXd y = df.array().sign();
  const double alpha = 5.0 / df.cwiseAbs().minCoeff();  // every margin >= 5
  Predictor at_init(w0, alpha);
  Predictor trained(w0, alpha);
  trained.set_params(w);
  auto [r0, g0] = loss_and_grad(at_init, x, y);
  auto [r1, g1] = loss_and_grad(trained, x, y);
  CHECK(r1.all_fitted);
  CHECK(stopping_check(r1));
  CHECK(r1.loss < 1e-30);
  CHECK(g1.norm() < 1e-6 * g0.norm());
}

TEST_CASE("stopping rule is strict") {
  LossReport r;
  r.margins = Eigen::Vector2d(1.01, 2.0);
  CHECK(stopping_check(r));
  r.margins = Eigen::Vector2d(1.0, 2.0);
  CHECK_FALSE(stopping_check(r));
}

TEST_CASE("classification error by hand") {
  Eigen::VectorXd F(10), y(10);
  F << 0.5, -0.2, 0.0, 3.0, -1.0, 2.0, -0.1, 0.0, 0.7, -4.0;
  y << 1, 1, 1, -1, -1, 1, -1, -1, -1, -1;
  // wrong: index 1 (sign), 2 (zero), 3 (sign), 7 (zero), 8 (sign)
  CHECK(classification_error(F, y) == doctest::Approx(0.5));
  CHECK(classification_error(y, y) == 0.0);
  CHECK_THROWS(classification_error(Eigen::VectorXd(0), Eigen::VectorXd(0)));
  CHECK_THROWS(classification_error(F, Eigen::VectorXd::Ones(3)));
}

TEST_CASE("empty batches are rejected") {
  const Predictor p(init_gaussian(tiny_arch(2, 3, 1), 1), 1.0);
  CHECK_THROWS(loss_and_grad(p, Eigen::MatrixXd(2, 0), Eigen::VectorXd(0)));
}

TEST_CASE("uncentered predictor warns at large alpha") {
  const NetworkParams w0 = init_gaussian(tiny_arch(2, 3, 1), 1);
  CHECK_FALSE(Predictor(w0, 100.0).warning());
  CHECK_FALSE(Predictor(w0, 1.0, ModelVariant::uncentered).warning());
  CHECK(Predictor(w0, 100.0, ModelVariant::uncentered).warning());
  CHECK(parse_variant("uncentered") == ModelVariant::uncentered);
  CHECK(to_string(ModelVariant::centered) == "centered");
  CHECK_THROWS(parse_variant("other"));
}

TEST_CASE("loss gradient at init scales with width and alpha") {
  // dL/dW^0 and dL/dW^L entries ~ 1/(sqrt(h) alpha), hidden-to-hidden ~ 1/(h alpha)
  const Eigen::MatrixXd x = testing::sphere_patterns(10, 20, 3);
  Eigen::VectorXd y(20);
  for (int i = 0; i < 20; ++i) y[i] = i % 2 ? 1.0 : -1.0;
  std::vector<double> hs, g0, g1, g2;
  for (int h : {32, 128, 512, 2048}) {
    double s0 = 0, s1 = 0, s2 = 0;
    for (int r = 0; r < 3; ++r) {
      const Predictor p(init_gaussian(tiny_arch(10, h, 2), 10 + r), 0.5);
      const ParamGradient g = loss_and_grad(p, x, y).second;
      s0 += std::sqrt(g.weights[0].squaredNorm() / g.weights[0].size());
      s1 += std::sqrt(g.weights[1].squaredNorm() / g.weights[1].size());
      s2 += std::sqrt(g.weights[2].squaredNorm() / g.weights[2].size());
    }
    hs.push_back(h);
    g0.push_back(s0);
    g1.push_back(s1);
    g2.push_back(s2);
  }
  CHECK(testing::loglog_slope(hs, g0) == doctest::Approx(-0.5).epsilon(0.2));
  CHECK(testing::loglog_slope(hs, g1) == doctest::Approx(-1.0).epsilon(0.1));
  CHECK(testing::loglog_slope(hs, g2) == doctest::Approx(-0.5).epsilon(0.2));

  const NetworkParams w = init_gaussian(tiny_arch(10, 64, 2), 1);
  const double n1 = loss_and_grad(Predictor(w, 1.0), x, y).second.norm();
  const double n4 = loss_and_grad(Predictor(w, 4.0), x, y).second.norm();
  CHECK(n1 / n4 == doctest::Approx(4.0).epsilon(1e-12));
}
