#ifndef SDEINFER_LNA_HPP
#define SDEINFER_LNA_HPP

#include <chrono>
#include <vector>

#include "sdeinfer/models.hpp"
#include "sdeinfer/prior.hpp"
#include "sdeinfer/samplers.hpp"

namespace sdeinfer {

// Linear noise approximation X_t ~ N(eta_t + m_t, V_t) started from a
// Gaussian (eta_0, V_0) with P_0 = I.
struct LnaState {
  Vector eta;
  Vector m_resid;
  Matrix V;
  Matrix P;
  double t = 0.0;

  static LnaState start(const Vector& a, const Matrix& c, double t0 = 0.0) {
    const Eigen::Index d = a.size();
    return {a, Vector::Zero(d), c, Matrix::Identity(d, d), t0};
  }
};

struct LnaDerivative {
  Vector eta;
  Vector m_resid;
  Matrix V;
  Matrix P;
};

// beta is evaluated at eta clamped into the state domain; the counter records
// how often that changed eta.
inline LnaDerivative lna_ode_rhs(const SdeModel& model, const LnaState& s, const Vector& theta,
                                 long* clamp_events = nullptr) {
  require(s.eta.allFinite() && s.V.allFinite() && s.P.allFinite(), ErrorKind::StepFailure,
          "LNA state is not finite");
  const Matrix h = drift_jacobian(model, s.eta, theta);
  const Vector clamped = model.clamp(s.eta);
  if (clamp_events && clamped != s.eta) ++*clamp_events;
  const Matrix beta = model.diffusion(clamped, theta);
  LnaDerivative out;
  out.eta = model.drift(s.eta, theta);
  out.m_resid = h * s.m_resid;
  out.V = s.V * h.transpose() + beta + h * s.V;
  out.P = h * s.P;
  return out;
}

struct LnaPrediction {
  Vector eta;
  Matrix V;
  Matrix P;
};

namespace detail {

inline Matrix symmetrize_checked(const Matrix& v) {
  require(asymmetry(v) < 1e-9 * (1.0 + v.cwiseAbs().maxCoeff()), ErrorKind::StepFailure,
          "LNA covariance lost symmetry");
  return symmetrize(v);
}

inline LnaState lna_axpy(const LnaState& s, double h, const LnaDerivative& k) {
  LnaState out;
  out.eta = s.eta + h * k.eta;
  out.m_resid = s.m_resid + h * k.m_resid;
  out.V = symmetrize_checked(s.V + h * k.V);
  out.P = s.P + h * k.P;
  out.t = s.t + h;
  return out;
}

}  // namespace detail

/**
 * Fixed-step RK4 for (eta, V, P) over [t, t + span] from eta = a, V = C,
 * P = I. The residual mean is identically zero when eta starts at a, so it
 * is not integrated.
 */
inline LnaPrediction integrate_lna(const SdeModel& model, const Vector& theta, const Vector& a, const Matrix& c,
                                   int steps = 20, double span = 1.0, long* clamp_events = nullptr) {
  require(steps >= 1, ErrorKind::InvalidConfig, "LNA needs at least one RK4 step");
  require(a.size() == model.dim && c.rows() == model.dim && c.cols() == model.dim, ErrorKind::ShapeMismatch,
          "LNA initial moments have the wrong shape");
  LnaState s = LnaState::start(a, symmetrize(c));
  const double h = span / steps;
  for (int k = 0; k < steps; ++k) {
    const LnaDerivative k1 = lna_ode_rhs(model, s, theta, clamp_events);
    const LnaDerivative k2 = lna_ode_rhs(model, detail::lna_axpy(s, 0.5 * h, k1), theta, clamp_events);
    const LnaDerivative k3 = lna_ode_rhs(model, detail::lna_axpy(s, 0.5 * h, k2), theta, clamp_events);
    const LnaDerivative k4 = lna_ode_rhs(model, detail::lna_axpy(s, h, k3), theta, clamp_events);
    s.eta += h / 6.0 * (k1.eta + 2.0 * k2.eta + 2.0 * k3.eta + k4.eta);
    s.V = detail::symmetrize_checked(s.V + h / 6.0 * (k1.V + 2.0 * k2.V + 2.0 * k3.V + k4.V));
    s.P += h / 6.0 * (k1.P + 2.0 * k2.P + 2.0 * k3.P + k4.P);
    s.t += h;
    if (!s.eta.allFinite() || !s.V.allFinite() || !s.P.allFinite()) {
      fail(ErrorKind::StepFailure, "LNA integration produced non-finite values");
    }
  }
  return {s.eta, s.V, s.P};
}

// Time-1 prior X_1 ~ N(a, C).
struct LnaPrior {
  Vector a;
  Matrix C;
};

// Pushes p(x_0) through the LNA over [0, 1].
inline LnaPrior lna_prior_from_initial(const SdeModel& model, const Vector& theta, const InitialDistribution& x0,
                                       int steps = 20, long* clamp_events = nullptr) {
  LnaPrediction p = integrate_lna(model, theta, x0.mean(), x0.cov(), steps, 1.0, clamp_events);
  return {p.eta, p.V};
}

struct FilterRecord {
  // Index t-1 refers to time t. eta/V/P at index 0 hold the time-1 prior (a, C, I).
  std::vector<Vector> a;
  std::vector<Matrix> C;
  std::vector<Vector> eta;
  std::vector<Matrix> V;
  std::vector<Matrix> P;
  std::vector<double> log_lik;  // running log p(y_{1:t})
  long clamp_events = 0;

  int n() const { return static_cast<int>(a.size()); }
  double total() const { return log_lik.empty() ? 0.0 : log_lik.back(); }
};

namespace detail {

// Gaussian conditioning of N(mean, cov) on y = F^T x + N(0, Sigma).
// Returns log N(y; F^T mean, F^T cov F + Sigma).
inline double lna_update(const ObservationModel& obs, const Vector& y, const Vector& mean, const Matrix& cov,
                         Vector& a_out, Matrix& c_out) {
  const Matrix& f = obs.F();
  const Matrix s = f.transpose() * cov * f + obs.Sigma();
  GaussianFactor factor = [&] {
    try {
      return GaussianFactor::cholesky(s);
    } catch (const SdeError&) {
      fail(ErrorKind::SingularForecastCov, "LNA forecast covariance is singular");
    }
  }();
  const Matrix cf = cov * f;
  Matrix gain_t(s.rows(), cov.rows());  // S^{-1} F^T cov
  for (Eigen::Index j = 0; j < cov.rows(); ++j) gain_t.col(j) = factor.solve(cf.row(j).transpose());
  const Vector resid = y - f.transpose() * mean;
  a_out = mean + gain_t.transpose() * resid;
  c_out = symmetrize(cov - cf * gain_t);
  return factor.log_density(resid);
}

}  // namespace detail

inline FilterRecord lna_forward_filter(const SdeModel& model, const ObservationModel& obs, const Matrix& data,
                                       const Vector& theta, const LnaPrior& prior, int steps = 20) {
  const int n = static_cast<int>(data.rows());
  require(n >= 1 && data.cols() == obs.obs_dim(), ErrorKind::ShapeMismatch, "data must be n x d_o");
  require(obs.state_dim() == model.dim && prior.a.size() == model.dim, ErrorKind::ShapeMismatch,
          "LNA dimensions disagree");
  FilterRecord rec;
  const Matrix eye = Matrix::Identity(model.dim, model.dim);
  Vector a;
  Matrix c;
  double total = detail::lna_update(obs, data.row(0).transpose(), prior.a, prior.C, a, c);
  rec.a.push_back(a);
  rec.C.push_back(c);
  rec.eta.push_back(prior.a);
  rec.V.push_back(prior.C);
  rec.P.push_back(eye);
  rec.log_lik.push_back(total);
  for (int t = 1; t < n; ++t) {
    LnaPrediction pred = integrate_lna(model, theta, a, c, steps, 1.0, &rec.clamp_events);
    total += detail::lna_update(obs, data.row(t).transpose(), pred.eta, pred.V, a, c);
    rec.a.push_back(a);
    rec.C.push_back(c);
    rec.eta.push_back(pred.eta);
    rec.V.push_back(pred.V);
    rec.P.push_back(pred.P);
    rec.log_lik.push_back(total);
  }
  return rec;
}

// Draws x^o (row t-1 = x_t) from the LNA smoothing distribution.
inline Matrix lna_backward_sampler(const FilterRecord& rec, RngStream& rng) {
  const int n = rec.n();
  require(n >= 1 && static_cast<int>(rec.eta.size()) == n, ErrorKind::ShapeMismatch, "incomplete filter record");
  const int d = static_cast<int>(rec.a[0].size());
  Matrix x(n, d);
  x.row(n - 1) = (rec.a[n - 1] + psd_sqrt(rec.C[n - 1]) * rng.gaussian_vector(d)).transpose();
  for (int t = n - 1; t >= 1; --t) {
    // time t (index t-1) conditioned on x_{t+1} (index t)
    const Matrix& ct = rec.C[t - 1];
    const Matrix& p = rec.P[t];
    GaussianFactor v = [&] {
      try {
        return GaussianFactor::cholesky(rec.V[t]);
      } catch (const SdeError&) {
        fail(ErrorKind::SingularV, "LNA predictive covariance is singular");
      }
    }();
    const Matrix pc = p * ct;  // P_{t+1} C_t
    Matrix vinv_pc(d, d);
    for (int j = 0; j < d; ++j) vinv_pc.col(j) = v.solve(pc.col(j));
    const Vector resid = x.row(t).transpose() - rec.eta[t];
    const Vector mean = rec.a[t - 1] + vinv_pc.transpose() * resid;
    const Matrix cov = symmetrize(ct - pc.transpose() * vinv_pc);
    x.row(t - 1) = (mean + psd_sqrt(cov) * rng.gaussian_vector(d)).transpose();
  }
  return x;
}

struct LnaMhOptions {
  int n_iters = 1000;
  int thin = 1;
  int steps = 20;
  std::optional<LnaPrior> fixed_prior;  // default: push p(x_0) through the LNA
};

struct LnaMhResult {
  ChainOutput chain;          // theta for every iteration; x_trace holds one x^o draw per kept iteration
  Vector theta_mean;          // natural scale
  Matrix theta_cov;           // working scale
  Matrix x_mean;              // n x d
  std::vector<Matrix> x_cov;  // per time, d x d
  long clamp_events = 0;
};

inline double lna_log_likelihood(const SdeModel& model, const ObservationModel& obs, const InitialDistribution& x0,
                                 const Matrix& data, const Vector& theta, const LnaMhOptions& options,
                                 FilterRecord* record = nullptr) {
  try {
    LnaPrior prior = options.fixed_prior ? *options.fixed_prior : lna_prior_from_initial(model, theta, x0, options.steps);
    FilterRecord rec = lna_forward_filter(model, obs, data, theta, prior, options.steps);
    const double total = rec.total();
    if (record) *record = std::move(rec);
    return std::isfinite(total) ? total : kNegInf;
  } catch (const SdeError& e) {
    if (e.category() != ErrorCategory::Numeric) throw;
    return kNegInf;
  }
}

/**
 * MH on theta against the LNA marginal likelihood, with one backward-sampled
 * x^o per kept (thinned) iteration.
 */
inline LnaMhResult lna_mh_run(const SdeModel& model, const ObservationModel& obs, const InitialDistribution& x0,
                              const Matrix& data, const ParameterPrior& prior, const ParamVector& theta0,
                              const RwmProposal& proposal, const LnaMhOptions& options, const RngStream& root) {
  require(options.n_iters >= 1, ErrorKind::InvalidConfig, "n_iters must be positive");
  require(options.thin >= 1, ErrorKind::InvalidConfig, "thin must be positive");
  require(proposal.dim() == theta0.size(), ErrorKind::ShapeMismatch, "proposal dimension must match theta");
  const int n = static_cast<int>(data.rows());
  const int d = model.dim;
  ParamVector theta = theta0;
  double log_prior = prior.log_density(theta.work());
  require(log_prior > kNegInf, ErrorKind::InvalidConfig, "initial theta outside prior support");
  FilterRecord rec;
  double log_lik = lna_log_likelihood(model, obs, x0, data, theta.natural(), options, &rec);
  if (log_lik == kNegInf) fail(ErrorKind::InitFailure, "LNA likelihood is zero at the initial theta");

  LnaMhResult res;
  res.clamp_events = rec.clamp_events;
  ChainOutput& out = res.chain;
  const int kept = options.n_iters / options.thin;
  out.theta.resize(options.n_iters, theta.size());
  out.x_trace.resize(kept, n * d);
  out.log_lik.reserve(options.n_iters);
  AcceptanceCounter counter{"theta"};
  const auto start = std::chrono::steady_clock::now();
  Matrix work_draws(kept, theta.size());
  for (int it = 1; it <= options.n_iters; ++it) {
    RngStream rng = stream(root, it, StreamTag::Theta);
    const Vector work = proposal.propose(theta.work(), rng);
    const double prior_prop = prior.log_density(work);
    bool accepted = false;
    if (prior_prop > kNegInf) {
      ParamVector cand = ParamVector::from_work(work, theta.log_scale());
      FilterRecord cand_rec;
      const double ll = lna_log_likelihood(model, obs, x0, data, cand.natural(), options, &cand_rec);
      res.clamp_events += cand_rec.clamp_events;
      if (mh_accept(prior_prop - log_prior + ll - log_lik, rng)) {
        theta = std::move(cand);
        log_prior = prior_prop;
        log_lik = ll;
        rec = std::move(cand_rec);
        accepted = true;
      }
    }
    counter.record(accepted);
    out.theta.row(it - 1) = theta.natural().transpose();
    out.log_lik.push_back(log_lik);
    if (it % options.thin == 0 && it / options.thin <= kept) {
      const int row = it / options.thin - 1;
      RngStream xr = stream(root, it, StreamTag::State);
      const Matrix x = lna_backward_sampler(rec, xr);
      for (int t = 0; t < n; ++t) out.x_trace.block(row, t * d, 1, d) = x.row(t);
      work_draws.row(row) = theta.work().transpose();
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.acceptance.push_back(counter);

  res.theta_mean = out.theta.colwise().mean().transpose();
  const Matrix wc = work_draws.rowwise() - work_draws.colwise().mean();
  res.theta_cov = kept > 1 ? Matrix(wc.transpose() * wc / (kept - 1)) : Matrix::Zero(theta.size(), theta.size());
  res.x_mean.resize(n, d);
  for (int t = 0; t < n; ++t) {
    const Matrix block = out.x_trace.middleCols(t * d, d);
    const Vector mean = block.colwise().mean().transpose();
    res.x_mean.row(t) = mean.transpose();
    const Matrix centred = block.rowwise() - mean.transpose();
    res.x_cov.push_back(kept > 1 ? Matrix(centred.transpose() * centred / (kept - 1)) : Matrix::Zero(d, d));
  }
  return res;
}

}  // namespace sdeinfer

#endif  // SDEINFER_LNA_HPP
