#include <gtest/gtest.h>

#include <set>

#include "sdeinfer/models.hpp"
#include "sdeinfer/samplers.hpp"
#include "test_support.hpp"

using namespace sdeinfer;

namespace {

Vector theta2(double a, double b) {
  Vector t(2);
  t << a, b;
  return t;
}

std::vector<double> column(const Matrix& m, int j) {
  std::vector<double> out(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[i] = m(i, j);
  return out;
}

// Drift-only inference in dX = b dt + sqrt(0.5) dW, y = X + N(0, 0.49), X_0 = 0.
// With a flat prior the marginal posterior of b is Gaussian, read off the
// Kalman log-likelihood which is quadratic in b.
struct DriftProblem {
  SdeModel model = oracle::brownian_drift_model();
  ObservationModel obs = ObservationModel::identity(1, 0.7);
  InitialDistribution prior_x0 = InitialDistribution::point_mass(Vector::Zero(1));
  Matrix y;
  std::vector<double> y_list;
  double post_mean = 0.0;
  double post_var = 0.0;

  explicit DriftProblem(int n) : y(n, 1) {
    RngStream rng(17);
    double x = 0.0;
    for (int t = 0; t < n; ++t) {
      x += 0.4 + std::sqrt(0.5) * rng.gaussian();
      y(t, 0) = x + 0.7 * rng.gaussian();
      y_list.push_back(y(t, 0));
    }
    auto ll = [&](double b) {
      oracle::ScalarLinearModel lm;
      lm.b = b;
      lm.q = 0.5;
      lm.r = 0.49;
      return oracle::kalman_log_likelihood(lm, y_list);
    };
    const double curvature = ll(1.0) + ll(-1.0) - 2.0 * ll(0.0);
    post_var = -1.0 / curvature;
    post_mean = (ll(1.0) - ll(-1.0)) / 2.0 * post_var;
  }

  ParamVector start() const { return ParamVector::from_natural(theta2(0.0, 0.5), {false, false}); }
  RwmProposal proposal() const { return RwmProposal::diagonal(theta2(0.5 * post_var * 2.4 * 2.4, 0.0)); }
};

struct AugmentedSetup {
  ModelSpec spec = lotka_volterra_model();
  AcpmmhProblem problem;
  AcpmmhProposals proposals;
  Matrix x_true;

  AugmentedSetup(int n, int m) {
    RngStream rng(99);
    problem.model = &spec.model;
    ObservationModel obs = spec.observation(0);
    obs_storage = std::make_unique<ObservationModel>(obs);
    problem.obs = obs_storage.get();
    problem.prior_x0 = InitialDistribution::point_mass(spec.x0);
    problem.grid = TimeGrid(n, m);
    problem.prior = spec.prior;
    LatentPath path = simulate_path(spec.model, spec.truth, spec.x0, TimeGrid(n, 20), rng);
    problem.data = simulate_data(path, *problem.obs, rng);
    x_true = path.observed();
    proposals.theta = RwmProposal(Matrix::Identity(3, 3) * 0.002);
    for (int t = 0; t < n; ++t) proposals.x.push_back(RwmProposal(Matrix::Identity(2, 2) * 0.5));
  }

  ParamVector truth() const { return ParamVector::from_natural(spec.truth, spec.log_scale); }

  std::unique_ptr<ObservationModel> obs_storage;
};

// log of the full augmented target recomputed from scratch.
double full_log_target(const AcpmmhSampler& s, const AcpmmhState& st) {
  const auto& p = s.problem();
  double total = p.prior.log_density(st.theta.work());
  total += sum_log_estimates(estimate_joint(*p.model, st.x_o, p.prior_x0, st.theta.natural(), p.grid, st.u));
  for (int t = 1; t <= s.n(); ++t) total += s.obs_term(st.x_o.row(t - 1).transpose(), t);
  return total;
}

}  // namespace

TEST(CnKernel, StationaryWithLagOneCorrelationRho) {
  const double rho = 0.9;
  CnKernel k(rho);
  RngStream rng(1);
  Vector u = rng.gaussian_vector(1);
  std::vector<double> chain;
  double cross = 0.0, sq = 0.0;
  for (int i = 0; i < 50000; ++i) {
    Vector next = k.propose(u, rng);
    cross += u(0) * next(0);
    sq += u(0) * u(0);
    u = next;
    if (i % 20 == 0) chain.push_back(u(0));
  }
  EXPECT_NEAR(cross / sq, rho, 0.01);
  EXPECT_GT(oracle::ks_normal_p(chain), 0.01);
}

TEST(CnKernel, Extremes) {
  RngStream rng(2);
  Vector u = rng.gaussian_vector(5);
  EXPECT_EQ(CnKernel(1.0).propose(u, rng), u);
  EXPECT_THROW(CnKernel(1.5), SdeError);
}

TEST(RwmProposal, EmpiricalCovariance) {
  Matrix omega(2, 2);
  omega << 2.0, 0.6, 0.6, 0.5;
  RwmProposal q(omega);
  RngStream rng(3);
  Matrix acc = Matrix::Zero(2, 2);
  const int reps = 100000;
  for (int i = 0; i < reps; ++i) {
    Vector step = q.propose(Vector::Zero(2), rng);
    acc += step * step.transpose();
  }
  EXPECT_LT((acc / reps - omega).cwiseAbs().maxCoeff(), 0.03);
  Matrix bad(2, 2);
  bad << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(RwmProposal{bad}, SdeError);
}

TEST(OddEvenSchedule, CoversEveryTimeOnceWithoutNeighbours) {
  for (int n = 1; n <= 20; ++n) {
    OddEvenSchedule s = odd_even_schedule(n);
    std::multiset<int> seen(s.odd.begin(), s.odd.end());
    seen.insert(s.even.begin(), s.even.end());
    seen.insert(s.endpoint);
    EXPECT_EQ(seen.size(), static_cast<std::size_t>(n));
    for (int t = 1; t <= n; ++t) EXPECT_EQ(seen.count(t), 1u) << "n=" << n << " t=" << t;
    for (const auto* group : {&s.odd, &s.even}) {
      for (std::size_t i = 1; i < group->size(); ++i) EXPECT_GE((*group)[i] - (*group)[i - 1], 2);
      for (int t : *group) EXPECT_LT(t, n);
    }
  }
}

TEST(Cpmmh, ExactLikelihoodRecoversConjugatePosterior) {
  DriftProblem dp(10);
  LikelihoodEstimator exact;
  exact.aux_size = [](int) { return Eigen::Index(3); };
  exact.log_estimate = [&](const Vector& th, int, const Vector&) {
    oracle::ScalarLinearModel lm;
    lm.b = th(0);
    lm.q = 0.5;
    lm.r = 0.49;
    return oracle::kalman_log_likelihood(lm, dp.y_list);
  };
  ChainOutput out = cpmmh_run(exact, ParameterPrior::flat(), dp.start(), dp.proposal(), {1, 40000, 0.99}, RngStream(4));
  auto b = oracle::batch_means(column(out.theta, 0));
  EXPECT_LT(std::abs(b.mean - dp.post_mean), 4.0 * b.se);
  EXPECT_GT(out.acceptance[0].rate(), 0.2);
  EXPECT_LT(out.acceptance[0].rate(), 0.8);
  EXPECT_EQ(out.theta.rows(), 40000);
  EXPECT_TRUE((out.theta.col(1).array() == 0.5).all());
}

TEST(Pmmh, FilterEstimatorRecoversConjugatePosterior) {
  DriftProblem dp(8);
  TimeGrid grid(8, 2);
  LikelihoodEstimator est = filter_estimator(dp.model, dp.obs, dp.prior_x0, dp.y, grid, false);
  ChainOutput out = pmmh_run(est, ParameterPrior::flat(), dp.start(), dp.proposal(), 10, 20000, RngStream(5));
  auto b = oracle::batch_means(column(out.theta, 0));
  EXPECT_LT(std::abs(b.mean - dp.post_mean), 4.0 * b.se);
  std::vector<double> draws = column(out.theta, 0);
  double var = 0.0;
  for (double v : draws) var += (v - b.mean) * (v - b.mean);
  var /= draws.size();
  EXPECT_NEAR(var / dp.post_var, 1.0, 0.25);
}

TEST(Cpmmh, PmmhIsCpmmhWithRhoZero) {
  DriftProblem dp(5);
  TimeGrid grid(5, 2);
  LikelihoodEstimator est = filter_estimator(dp.model, dp.obs, dp.prior_x0, dp.y, grid, false);
  ChainOutput a = pmmh_run(est, ParameterPrior::flat(), dp.start(), dp.proposal(), 3, 200, RngStream(6));
  ChainOutput b = cpmmh_run(est, ParameterPrior::flat(), dp.start(), dp.proposal(), {3, 200, 0.0}, RngStream(6));
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.log_lik, b.log_lik);
}

TEST(Cpmmh, PriorOutsideSupportRejectsWithoutEstimating) {
  DriftProblem dp(3);
  int calls = 0;
  LikelihoodEstimator est;
  est.aux_size = [](int) { return Eigen::Index(1); };
  est.log_estimate = [&](const Vector&, int, const Vector&) {
    ++calls;
    return 0.0;
  };
  ParameterPrior narrow = ParameterPrior::independent_uniform(-1e-9, 1e-9);
  ParamVector start = ParamVector::from_natural(theta2(0.0, 0.0), {false, false});
  ChainOutput out = cpmmh_run(est, narrow, start, RwmProposal::diagonal(theta2(1.0, 1.0)), {1, 100, 0.5}, RngStream(7));
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(out.acceptance[0].accepted, 0);
}

TEST(Acpmmh, DriftPosteriorMatchesKalman) {
  DriftProblem dp(10);
  AcpmmhProblem problem;
  problem.model = &dp.model;
  problem.obs = &dp.obs;
  problem.prior_x0 = dp.prior_x0;
  problem.data = dp.y;
  problem.grid = TimeGrid(10, 3);
  problem.prior = ParameterPrior::flat();
  AcpmmhProposals q{dp.proposal(), {}};
  for (int t = 0; t < 10; ++t) q.x.push_back(RwmProposal(Matrix::Constant(1, 1, 0.3)));
  ChainOutput out = acpmmh_run(problem, q, {1, 0.99, 40000, 1, false}, dp.start(), dp.y, RngStream(8));
  auto b = oracle::batch_means(column(out.theta, 0));
  EXPECT_LT(std::abs(b.mean - dp.post_mean), 4.0 * b.se) << b.mean << " vs " << dp.post_mean;
  EXPECT_EQ(out.acceptance.size(), 3u);
  EXPECT_EQ(out.counter("x")->proposed, 40000LL * 9);
}

TEST(Acpmmh, LatentMarginalsMatchSmoother) {
  DriftProblem dp(6);
  AcpmmhProblem problem;
  problem.model = &dp.model;
  problem.obs = &dp.obs;
  problem.prior_x0 = dp.prior_x0;
  problem.data = dp.y;
  problem.grid = TimeGrid(6, 2);
  problem.prior = ParameterPrior::flat();
  // theta frozen at the drift 0.4: the chain targets p(x^o | y, theta).
  AcpmmhProposals q{RwmProposal::diagonal(theta2(0.0, 0.0)), {}};
  for (int t = 0; t < 6; ++t) q.x.push_back(RwmProposal(Matrix::Constant(1, 1, 0.4)));
  ParamVector th = ParamVector::from_natural(theta2(0.4, 0.5), {false, false});
  ChainOutput out = acpmmh_run(problem, q, {2, 0.9, 40000, 1, true}, th, dp.y, RngStream(9));
  oracle::ScalarLinearModel lm;
  lm.b = 0.4;
  lm.q = 0.5;
  lm.r = 0.49;
  auto smooth = oracle::rts_smoother(lm, dp.y_list);
  for (int t = 0; t < 6; ++t) {
    auto b = oracle::batch_means(column(out.x_trace, t));
    EXPECT_LT(std::abs(b.mean - smooth.mean[t]), 4.0 * b.se) << "t=" << t + 1;
  }
}

TEST(Acpmmh, UpdatesAreLocalAndCachesStayCoherent) {
  AugmentedSetup a(7, 3);
  AcpmmhSampler sampler(a.problem, a.proposals, {2, 0.99, 1, 1, true});
  RngStream root(10);
  AcpmmhState s = sampler.initialise(a.truth(), a.x_true, root);
  ASSERT_TRUE(sampler.caches_coherent(s));
  for (int t = 1; t <= 7; ++t) {
    long long it = 1;
    AcpmmhState before = s;
    while (!sampler.x_update(s, t, it, root)) {
      ++it;
      ASSERT_LT(it, 5000);
    }
    for (int r = 0; r < 7; ++r) {
      if (r != t - 1) EXPECT_EQ(s.x_o.row(r), before.x_o.row(r));
    }
    EXPECT_NE(s.x_o.row(t - 1), before.x_o.row(t - 1));
    for (int j = 0; j < 7; ++j) {
      const bool touched = j == t - 1 || (j == t && t < 7);
      if (!touched) {
        EXPECT_EQ(s.u[j].values(), before.u[j].values()) << "t=" << t << " j=" << j;
        EXPECT_EQ(s.log_est(j), before.log_est(j));
      }
    }
    EXPECT_TRUE(sampler.caches_coherent(s));
  }
  ChainOutput out = sampler.run(s, root);
  EXPECT_TRUE(sampler.caches_coherent(s));
  (void)out;
}

TEST(Acpmmh, RatiosEqualFullTargetDifferences) {
  AugmentedSetup a(6, 4);
  AcpmmhSampler sampler(a.problem, a.proposals, {3, 0.95, 1, 1, true});
  RngStream root(11);
  AcpmmhState s = sampler.initialise(a.truth(), a.x_true, root);
  const double current = full_log_target(sampler, s);
  EXPECT_NEAR(current, s.log_target(), 1e-9 * std::abs(current));
  RngStream rng(12);
  for (int t = 1; t <= 6; ++t) {
    auto prop = sampler.propose_x(s, t, rng);
    ASSERT_TRUE(std::isfinite(prop.log_ratio));
    AcpmmhState cand = s;
    cand.x_o.row(t - 1) = prop.x.transpose();
    cand.u[t - 1] = prop.u_prev;
    if (t < 6) cand.u[t] = prop.u_next;
    EXPECT_NEAR(prop.log_ratio, full_log_target(sampler, cand) - current, 1e-9) << "t=" << t;
  }
  for (int rep = 0; rep < 5; ++rep) {
    Vector work = s.theta.work() + 0.05 * rng.gaussian_vector(3);
    ParamVector cand_theta = ParamVector::from_work(work, s.theta.log_scale());
    AcpmmhState cand = s;
    cand.theta = cand_theta;
    EXPECT_NEAR(sampler.theta_log_ratio(s, cand_theta, nullptr), full_log_target(sampler, cand) - current, 1e-9);
  }
}

TEST(Acpmmh, SingleSampleThetaRatioIsInnovationSchemeRatio) {
  AugmentedSetup a(5, 4);
  AcpmmhSampler sampler(a.problem, a.proposals, {1, 0.0, 1, 1, true});
  RngStream root(13);
  AcpmmhState s = sampler.initialise(a.truth(), a.x_true, root);
  const SdeModel& model = a.spec.model;
  const double dt = 0.25;
  // sum over intervals of log p_e(path) - log g(path), with paths regenerated from u.
  auto scheme = [&](const Vector& th) {
    double total = 0.0;
    for (int t = 0; t < 5; ++t) {
      const Vector start = t == 0 ? a.spec.x0 : Vector(s.x_o.row(t - 1).transpose());
      const Vector end = s.x_o.row(t).transpose();
      Eigen::Map<const RowMatrix> u = s.u[t].particle(0);
      RowMatrix block = t == 0 ? RowMatrix(u.bottomRows(3)) : RowMatrix(u);
      BridgeDraw d = propagate(BridgeTarget::exact(end), model, start, th, t, 4, block);
      Matrix segment(5, 2);
      segment.row(0) = start.transpose();
      segment.middleRows(1, 3) = d.points;
      segment.row(4) = end.transpose();
      total += path_log_density(model, segment, th, dt) - d.log_g;
    }
    return total;
  };
  RngStream rng(14);
  for (int rep = 0; rep < 5; ++rep) {
    ParamVector cand = ParamVector::from_work(s.theta.work() + 0.03 * rng.gaussian_vector(3), s.theta.log_scale());
    const double expect = a.problem.prior.log_density(cand.work()) - a.problem.prior.log_density(s.theta.work()) +
                          scheme(cand.natural()) - scheme(s.theta.natural());
    EXPECT_NEAR(sampler.theta_log_ratio(s, cand, nullptr), expect, 1e-8);
  }
}

TEST(Acpmmh, BridgeDensityIsInverseJacobian) {
  ModelSpec spec = lotka_volterra_model();
  Vector start = spec.x0;
  Vector end(2);
  end << 110.0, 92.0;
  const int m = 5;
  RngStream rng(15);
  RowMatrix u(m - 1, 2);
  for (int k = 0; k < m - 1; ++k) u.row(k) = rng.gaussian_vector(2).transpose();
  auto map = [&](const RowMatrix& v) {
    BridgeDraw d = propagate(BridgeTarget::exact(end), spec.model, start, spec.truth, 0.0, m, v);
    return Eigen::Map<const Vector>(RowMatrix(d.points).data(), 2 * (m - 1)).eval();
  };
  const int D = 2 * (m - 1);
  Matrix jac(D, D);
  const double h = 1e-6;
  for (int j = 0; j < D; ++j) {
    RowMatrix up = u, down = u;
    up.data()[j] += h;
    down.data()[j] -= h;
    jac.col(j) = (map(up) - map(down)) / (2.0 * h);
  }
  BridgeDraw d = propagate(BridgeTarget::exact(end), spec.model, start, spec.truth, 0.0, m, u);
  const double log_phi = -0.5 * (D * kLog2Pi + Eigen::Map<const Vector>(u.data(), D).squaredNorm());
  const double log_det = std::log(std::abs(jac.determinant()));
  EXPECT_NEAR(d.log_g, log_phi - log_det, 1e-5);
}

TEST(Acpmmh, WorkerCountDoesNotChangeTheChain) {
  AugmentedSetup a(9, 3);
  ChainOutput one = acpmmh_run(a.problem, a.proposals, {2, 0.99, 60, 1, true}, a.truth(), a.x_true, RngStream(16));
  ChainOutput four = acpmmh_run(a.problem, a.proposals, {2, 0.99, 60, 4, true}, a.truth(), a.x_true, RngStream(16));
  EXPECT_EQ(one.theta, four.theta);
  EXPECT_EQ(one.x_trace, four.x_trace);
  EXPECT_EQ(one.log_lik, four.log_lik);
}

TEST(Acpmmh, InitialiseRejectsImpossibleStart) {
  AugmentedSetup a(4, 2);
  AcpmmhSampler sampler(a.problem, a.proposals, {1, 0.9, 1, 1, true});
  Matrix bad = a.x_true;
  bad(1, 0) = -5.0;
  EXPECT_THROW(sampler.initialise(a.truth(), bad, RngStream(1)), SdeError);
}
