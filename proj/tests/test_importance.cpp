#include <gtest/gtest.h>

#include "sdeinfer/importance.hpp"
#include "test_support.hpp"

using namespace sdeinfer;

namespace {

Vector theta2(double a, double b) {
  Vector t(2);
  t << a, b;
  return t;
}

Vector scalar(double v) { return Vector::Constant(1, v); }

// Mean of exp(log_est - log_exact) with its standard error.
template <typename Fn>
oracle::MeanAndError ratio_mean(int reps, double log_exact, Fn&& log_est) {
  std::vector<double> ratios(reps);
  for (int r = 0; r < reps; ++r) ratios[r] = std::exp(log_est(r) - log_exact);
  return oracle::mean_and_error(ratios);
}

}  // namespace

TEST(EstimateTransition, SingleStepIsEulerDensity) {
  SdeModel ou = oracle::ou_model();
  TimeGrid grid(3, 1);
  RngStream rng(1);
  InnovationBlock u = InnovationBlock::standard_normal(7, 0, 1, rng);
  const Vector th = theta2(0.4, 1.2);
  TransitionEstimate est = estimate_transition(ou, scalar(0.3), scalar(-0.1), th, grid, 1, u);
  EXPECT_NEAR(est.log_value, euler_log_density(ou, scalar(0.3), scalar(-0.1), th, 1.0), 1e-12);
  EXPECT_EQ(est.particles, 7);
}

TEST(EstimateTransition, UnbiasedForOrnsteinUhlenbeck) {
  SdeModel ou = oracle::ou_model();
  const Vector th = theta2(0.9, 1.3);
  for (int m : {2, 5, 10}) {
    TimeGrid grid(2, m);
    oracle::ScalarLinearModel lm = oracle::euler_ou_transition(0.9, 1.3, m);
    const double x0 = 1.1, x1 = -0.4;
    const double exact = oracle::normal_log_pdf(x1, lm.a * x0, lm.q);
    for (int particles : {1, 5}) {
      RngStream rng(100 + m * 10 + particles);
      auto stat = ratio_mean(10000, exact, [&](int) {
        InnovationBlock u = InnovationBlock::standard_normal(particles, m - 1, 1, rng);
        return estimate_transition(ou, scalar(x0), scalar(x1), th, grid, 0, u).log_value;
      });
      EXPECT_LT(std::abs(stat.mean - 1.0), 3.0 * stat.se + 1e-12) << "m=" << m << " N=" << particles;
    }
  }
}

TEST(EstimateTransition, BrownianWeightsAreExact) {
  SdeModel bm = oracle::brownian_drift_model();
  const Vector th = theta2(0.0, 1.0);
  TimeGrid grid(1, 5);
  RngStream rng(3);
  InnovationBlock u = InnovationBlock::standard_normal(4, 4, 1, rng);
  TransitionEstimate est = estimate_transition(bm, scalar(0.2), scalar(1.5), th, grid, 0, u);
  EXPECT_NEAR(est.log_value, oracle::normal_log_pdf(1.5, 0.2, 1.0), 1e-10);
}

TEST(EstimateTransition, DeterministicAndSingleSampleWeight) {
  SdeModel ou = oracle::ou_model();
  const Vector th = theta2(0.5, 0.8);
  TimeGrid grid(2, 4);
  RngStream rng(4);
  InnovationBlock u = InnovationBlock::standard_normal(1, 3, 1, rng);
  const double a = estimate_transition(ou, scalar(0.0), scalar(0.6), th, grid, 1, u).log_value;
  const double b = estimate_transition(ou, scalar(0.0), scalar(0.6), th, grid, 1, u).log_value;
  EXPECT_EQ(a, b);
  BridgeDraw draw = propagate(BridgeTarget::exact(scalar(0.6)), ou, scalar(0.0), th, 1.0, 4, u.particle(0));
  EXPECT_EQ(a, draw.log_euler - draw.log_g);
}

TEST(EstimateTransition, ShapeChecked) {
  SdeModel ou = oracle::ou_model();
  TimeGrid grid(2, 4);
  InnovationBlock wrong(3, 4, 1);
  EXPECT_THROW(estimate_transition(ou, scalar(0.0), scalar(0.1), theta2(1, 1), grid, 0, wrong), SdeError);
}

TEST(EstimateInitial, PointMassReducesToTransition) {
  SdeModel ou = oracle::ou_model();
  const Vector th = theta2(0.5, 0.8);
  TimeGrid grid(2, 4);
  RngStream rng(9);
  InnovationBlock u0 = InnovationBlock::standard_normal(3, 4, 1, rng);
  InnovationBlock u(3, 3, 1);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) u.values()(i * 3 + k) = u0.values()(i * 4 + k + 1);
  }
  InitialDistribution prior = InitialDistribution::point_mass(scalar(0.7));
  const double init = estimate_initial(ou, prior, scalar(0.2), th, grid, u0).log_value;
  const double trans = estimate_transition(ou, scalar(0.7), scalar(0.2), th, grid, 0, u).log_value;
  EXPECT_EQ(init, trans);
}

TEST(EstimateInitial, GaussianPriorConvolution) {
  SdeModel bm = oracle::brownian_drift_model();
  const Vector th = theta2(0.0, 1.0);
  InitialDistribution prior = InitialDistribution::gaussian(scalar(0.5), Matrix::Constant(1, 1, 0.8));
  const double x1 = 1.7;
  const double exact = oracle::normal_log_pdf(x1, 0.5, 1.8);
  for (int m : {2, 5}) {
    TimeGrid grid(1, m);
    for (int particles : {1, 5}) {
      RngStream rng(5000 + 10 * m + particles);
      auto stat = ratio_mean(10000, exact, [&](int) {
        InnovationBlock u = InnovationBlock::standard_normal(particles, m, 1, rng);
        return estimate_initial(bm, prior, scalar(x1), th, grid, u).log_value;
      });
      EXPECT_LT(std::abs(stat.mean - 1.0), 3.0 * stat.se) << "m=" << m << " N=" << particles;
    }
  }
}

TEST(EstimateJoint, AdditivityAndIntervalIndependence) {
  SdeModel ou = oracle::ou_model();
  const Vector th = theta2(0.5, 0.8);
  TimeGrid grid(5, 3);
  RngStream rng(12);
  Matrix x_o(5, 1);
  x_o << 0.1, 0.4, -0.2, 0.0, 0.3;
  InitialDistribution prior = InitialDistribution::gaussian(scalar(0.0), Matrix::Constant(1, 1, 0.5));
  auto u = draw_interval_innovations(5, 4, 3, 1, rng);
  Vector parts = estimate_joint(ou, x_o, prior, th, grid, u);
  for (int t = 0; t < 5; ++t) EXPECT_EQ(parts(t), estimate_interval(ou, prior, x_o, th, grid, t, u[t]).log_value);
  double sum = 0.0;
  for (int t = 0; t < 5; ++t) sum += parts(t);
  EXPECT_EQ(sum_log_estimates(parts), sum);

  auto mutated = u;
  mutated[3].values().setConstant(2.0);
  Vector again = estimate_joint(ou, x_o, prior, th, grid, mutated);
  for (int t = 0; t < 5; ++t) {
    if (t != 3) EXPECT_EQ(again(t), parts(t));
  }
  EXPECT_NE(again(3), parts(3));

  WorkerPool pool(3);
  EXPECT_EQ(estimate_joint(ou, x_o, prior, th, grid, u, &pool), parts);
}

TEST(EstimateJoint, SingleIntervalIsInitialTerm) {
  SdeModel ou = oracle::ou_model();
  TimeGrid grid(1, 3);
  RngStream rng(13);
  InitialDistribution prior = InitialDistribution::point_mass(scalar(0.0));
  auto u = draw_interval_innovations(1, 2, 3, 1, rng);
  Matrix x_o = Matrix::Constant(1, 1, 0.25);
  Vector parts = estimate_joint(ou, x_o, prior, theta2(0.5, 0.8), grid, u);
  EXPECT_EQ(parts(0), estimate_initial(ou, prior, scalar(0.25), theta2(0.5, 0.8), grid, u[0]).log_value);
}

TEST(EstimateJoint, BrownianProductOfTransitions) {
  SdeModel bm = oracle::brownian_drift_model();
  const Vector th = theta2(0.3, 1.0);
  TimeGrid grid(5, 4);
  InitialDistribution prior = InitialDistribution::gaussian(scalar(0.0), Matrix::Constant(1, 1, 1.0));
  Matrix x_o(5, 1);
  x_o << 0.5, 0.9, 1.0, 1.6, 2.2;
  double exact = oracle::normal_log_pdf(0.5, 0.3, 2.0);
  for (int t = 1; t < 5; ++t) exact += oracle::normal_log_pdf(x_o(t, 0), x_o(t - 1, 0) + 0.3, 1.0);
  RngStream rng(77);
  auto stat = ratio_mean(10000, exact, [&](int) {
    auto u = draw_interval_innovations(5, 2, 4, 1, rng);
    return sum_log_estimates(estimate_joint(bm, x_o, prior, th, grid, u));
  });
  EXPECT_LT(std::abs(stat.mean - 1.0), 3.0 * stat.se);
}

TEST(EstimateTransition, VarianceNonIncreasingInN) {
  SdeModel ou = oracle::ou_model();
  const Vector th = theta2(1.5, 2.0);
  TimeGrid grid(1, 5);
  double previous = std::numeric_limits<double>::infinity();
  for (int particles : {1, 2, 4, 8}) {
    RngStream rng(900 + particles);
    std::vector<double> logs(10000);
    for (auto& v : logs) {
      InnovationBlock u = InnovationBlock::standard_normal(particles, 4, 1, rng);
      v = estimate_transition(ou, scalar(2.0), scalar(-1.0), th, grid, 0, u).log_value;
    }
    auto me = oracle::mean_and_error(logs);
    const double var = me.se * me.se * logs.size();
    EXPECT_LE(var, previous * 1.05) << "N=" << particles;
    previous = var;
  }
}

TEST(EstimateTransition, DomainExitGivesZeroWeight) {
  SdeModel bm = oracle::brownian_drift_model();
  bm.lower = Vector::Zero(1);
  TimeGrid grid(1, 3);
  InnovationBlock u(2, 2, 1);
  u.values().setConstant(-100.0);
  EXPECT_EQ(estimate_transition(bm, scalar(0.5), scalar(0.5), theta2(0.0, 1.0), grid, 0, u).log_value, kNegInf);
  u.values()(0) = 0.0;
  u.values()(1) = 0.0;
  EXPECT_GT(estimate_transition(bm, scalar(0.5), scalar(0.5), theta2(0.0, 1.0), grid, 0, u).log_value, kNegInf);
}
