#ifndef SDEINFER_TUNING_HPP
#define SDEINFER_TUNING_HPP

#include <string>
#include <utility>
#include <vector>

#include "sdeinfer/diagnostics.hpp"
#include "sdeinfer/lna.hpp"

namespace sdeinfer {

struct TuningResult {
  std::string option;  // "lna" or "acpmmh"
  ParamVector theta_init;
  Matrix x_o_init;
  Matrix omega_theta;
  std::vector<Matrix> omega_x;
  int particles = 1;
  int pilot_iters = 0;
  std::vector<std::pair<std::string, double>> pilot_acceptance;

  AcpmmhProposals proposals() const {
    AcpmmhProposals q{RwmProposal(omega_theta), {}};
    for (const Matrix& w : omega_x) q.x.emplace_back(w);
    return q;
  }
};

struct PilotOptions {
  int iterations = 1000;
  int batch = 50;                 // Robbins-Monro batch length
  double theta_target = 0.25;     // target acceptance of the theta move
  double x_target = 0.25;         // target acceptance of the x_t moves
  int particles = 1;
  double rho = 0.99;
  int lna_steps = 20;
  int workers = 1;
};

namespace detail {

inline Matrix sample_cov(const Matrix& draws) {
  const Eigen::Index rows = draws.rows();
  if (rows < 2) return Matrix::Zero(draws.cols(), draws.cols());
  const Matrix centred = draws.rowwise() - draws.colwise().mean();
  return centred.transpose() * centred / static_cast<double>(rows - 1);
}

// A usable RWM covariance: the scaled estimate, or the fallback when the
// estimate is degenerate (e.g. no move accepted during the pilot).
inline Matrix proposal_from(const Matrix& cov, int dim, const Matrix& fallback) {
  if (!cov.allFinite() || !(cov.diagonal().minCoeff() > 0.0)) return fallback;
  return rwm_variance(cov, dim);
}

// Pushes x into the interior of the state domain.
inline Vector into_domain(const SdeModel& model, const Vector& x, double eps = 1e-3) {
  Vector out = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (out(i) <= model.lower(i)) out(i) = model.lower(i) + eps;
    if (out(i) >= model.upper(i)) out(i) = model.upper(i) - eps;
  }
  return out;
}

}  // namespace detail

/**
 * Starting x^o for the augmented scheme. With d_o = d the observations are
 * mapped back through F and pushed into the domain; otherwise each x_t is the
 * endpoint of a bridge aimed at y_t started from x_{t-1}.
 */
inline Matrix initial_latent_states(const AcpmmhProblem& p, const Vector& theta, const RngStream& root) {
  const SdeModel& model = *p.model;
  const ObservationModel& obs = *p.obs;
  const int n = p.grid.n(), d = model.dim;
  Matrix x(n, d);
  if (obs.obs_dim() == d) {
    Eigen::FullPivLU<Matrix> lu(obs.F().transpose());
    if (lu.isInvertible()) {
      for (int t = 0; t < n; ++t) {
        x.row(t) = detail::into_domain(model, lu.solve(Vector(p.data.row(t).transpose()))).transpose();
      }
      return x;
    }
  }
  Vector prev = p.prior_x0.mean();
  for (int t = 0; t < n; ++t) {
    const BridgeTarget target = BridgeTarget::noisy(obs, p.data.row(t).transpose());
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      RngStream rng = root.derive({static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(attempt)});
      RowMatrix u(p.grid.m(), d);
      for (int k = 0; k < p.grid.m(); ++k) u.row(k) = rng.gaussian_vector(d).transpose();
      try {
        BridgeDraw draw = propagate(target, model, prev, theta, t, p.grid.m(), u);
        const Vector end = draw.points.row(p.grid.m() - 1).transpose();
        if (draw.in_domain && end.allFinite()) {
          x.row(t) = end.transpose();
          prev = end;
          ok = true;
        }
      } catch (const SdeError& e) {
        if (e.category() != ErrorCategory::Numeric) throw;
      }
    }
    if (!ok) fail(ErrorKind::InitFailure, "could not draw an initial latent state at t = " + std::to_string(t + 1));
  }
  return x;
}

/**
 * Option 1: pilot MH against the LNA posterior. The first half adapts a
 * diagonal proposal scale; the second half uses (2.56^2/p) var of the first
 * half. Returns posterior means as initial values and the rescaled posterior
 * variances as proposal covariances.
 */
inline TuningResult tune_option1(const AcpmmhProblem& p, const ParamVector& theta_start, const PilotOptions& options,
                                 const RngStream& root) {
  require(options.iterations >= 2, ErrorKind::InvalidConfig, "pilot needs at least two iterations");
  const SdeModel& model = *p.model;
  const int dim_theta = theta_start.size(), d = model.dim, n = p.grid.n();
  LnaMhOptions lna;
  lna.steps = options.lna_steps;
  try {
    ParamVector theta = theta_start;
    double log_scale = 0.0;
    const Matrix base = Matrix::Identity(dim_theta, dim_theta) * 0.01;
    const int adapt_iters = options.iterations / 2;
    Matrix adapt_draws(0, dim_theta);
    int batch_index = 0;
    for (int done = 0; done < adapt_iters; done += options.batch, ++batch_index) {
      lna.n_iters = std::min(options.batch, adapt_iters - done);
      lna.thin = lna.n_iters;
      LnaMhResult r = lna_mh_run(model, *p.obs, p.prior_x0, p.data, p.prior, theta,
                                 RwmProposal(base * std::exp(2.0 * log_scale)), lna,
                                 root.derive({1, static_cast<std::uint64_t>(batch_index)}));
      const Vector last = r.chain.theta.row(r.chain.theta.rows() - 1).transpose();
      theta = ParamVector::from_natural(last, theta.log_scale());
      Matrix work = r.chain.theta;
      for (Eigen::Index i = 0; i < work.rows(); ++i) {
        work.row(i) = ParamVector::from_natural(r.chain.theta.row(i).transpose(), theta.log_scale()).work().transpose();
      }
      adapt_draws.conservativeResize(adapt_draws.rows() + work.rows(), Eigen::NoChange);
      adapt_draws.bottomRows(work.rows()) = work;
      log_scale += (r.chain.acceptance[0].rate() - options.theta_target) / std::sqrt(batch_index + 1.0);
    }
    const Matrix fallback = base * std::exp(2.0 * log_scale);
    const Matrix omega0 =
        detail::proposal_from(detail::sample_cov(adapt_draws.bottomRows(adapt_draws.rows() / 2)), dim_theta, fallback);
    lna.n_iters = options.iterations - adapt_iters;
    lna.thin = 1;
    LnaMhResult main = lna_mh_run(model, *p.obs, p.prior_x0, p.data, p.prior, theta, RwmProposal(omega0), lna,
                                  root.derive({2}));
    TuningResult out;
    out.option = "lna";
    out.theta_init = ParamVector::from_natural(main.theta_mean, theta.log_scale());
    out.omega_theta = detail::proposal_from(main.theta_cov, dim_theta, omega0);
    out.x_o_init.resize(n, d);
    for (int t = 0; t < n; ++t) {
      out.x_o_init.row(t) = detail::into_domain(model, main.x_mean.row(t).transpose()).transpose();
      out.omega_x.push_back(detail::proposal_from(main.x_cov[t], d, Matrix::Identity(d, d)));
    }
    out.particles = options.particles;
    out.pilot_iters = options.iterations;
    out.pilot_acceptance.emplace_back("theta", main.chain.acceptance[0].rate());
    return out;
  } catch (const SdeError& e) {
    if (e.category() != ErrorCategory::Numeric) throw;
    fail(ErrorKind::TuningFailure, std::string("LNA pilot failed (") + e.what() + "); try tuning option 2");
  }
}

/**
 * Option 2: short augmented-scheme pilot started from x^o built from the
 * data. Diagonal RWM scales are adapted per batch by Robbins-Monro toward the
 * target acceptance rates; the second half of the pilot gives the moments.
 */
inline TuningResult tune_option2(const AcpmmhProblem& p, const ParamVector& theta_start, const PilotOptions& options,
                                 const RngStream& root) {
  require(options.iterations >= 2, ErrorKind::InvalidConfig, "pilot needs at least two iterations");
  require(options.batch >= 1, ErrorKind::InvalidConfig, "pilot batch must be positive");
  const SdeModel& model = *p.model;
  const int dim_theta = theta_start.size(), d = model.dim, n = p.grid.n();
  const Matrix base_theta = Matrix::Identity(dim_theta, dim_theta) * 0.01;
  const double sigma_scale = std::max(1e-2, p.obs->Sigma().diagonal().mean());
  const Matrix base_x = Matrix::Identity(d, d) * sigma_scale;
  double log_theta = 0.0, log_x = 0.0;

  auto make_proposals = [&] {
    AcpmmhProposals q{RwmProposal(base_theta * std::exp(2.0 * log_theta)), {}};
    for (int t = 0; t < n; ++t) q.x.emplace_back(base_x * std::exp(2.0 * log_x));
    return q;
  };

  const Matrix x0 = initial_latent_states(p, theta_start.natural(), root.derive({3}));
  AcpmmhOptions opt;
  opt.particles = options.particles;
  opt.rho = options.rho;
  opt.workers = options.workers;
  opt.keep_trace = true;
  AcpmmhSampler sampler(p, make_proposals(), opt);
  AcpmmhState state = sampler.initialise(theta_start, x0, root.derive({4}));

  const RngStream chain_root = root.derive({5});
  Matrix theta_draws(options.iterations, dim_theta);
  Matrix x_draws(options.iterations, n * d);
  long long done = 0;
  int batch_index = 0;
  std::vector<AcceptanceCounter> totals;
  while (done < options.iterations) {
    const int count = static_cast<int>(std::min<long long>(options.batch, options.iterations - done));
    sampler.set_proposals(make_proposals());
    sampler.set_iterations(done + 1, count);
    ChainOutput out = sampler.run(state, chain_root);
    for (int i = 0; i < count; ++i) {
      theta_draws.row(done + i) =
          ParamVector::from_natural(out.theta.row(i).transpose(), theta_start.log_scale()).work().transpose();
    }
    x_draws.middleRows(done, count) = out.x_trace;
    ++batch_index;
    log_theta += (out.counter("theta")->rate() - options.theta_target) / std::sqrt(static_cast<double>(batch_index));
    const AcceptanceCounter* xc = out.counter("x");
    const AcceptanceCounter* ec = out.counter("x_end");
    const double x_rate = static_cast<double>(xc->accepted + ec->accepted) / std::max(1LL, xc->proposed + ec->proposed);
    log_x += (x_rate - options.x_target) / std::sqrt(static_cast<double>(batch_index));
    if (totals.empty()) {
      totals = out.acceptance;
    } else {
      for (std::size_t k = 0; k < totals.size(); ++k) {
        totals[k].accepted += out.acceptance[k].accepted;
        totals[k].proposed += out.acceptance[k].proposed;
      }
    }
    done += count;
  }

  const Eigen::Index half = options.iterations / 2;
  const Matrix th_tail = theta_draws.bottomRows(options.iterations - half);
  const Matrix x_tail = x_draws.bottomRows(options.iterations - half);
  TuningResult res;
  res.option = "acpmmh";
  const Vector work_mean = th_tail.colwise().mean().transpose();
  res.theta_init = ParamVector::from_work(work_mean, theta_start.log_scale());
  if (!(p.prior.log_density(res.theta_init.work()) > kNegInf)) res.theta_init = state.theta;
  res.omega_theta = detail::proposal_from(detail::sample_cov(th_tail), dim_theta, base_theta * std::exp(2.0 * log_theta));
  res.x_o_init.resize(n, d);
  for (int t = 0; t < n; ++t) {
    const Matrix block = x_tail.middleCols(t * d, d);
    res.x_o_init.row(t) = detail::into_domain(model, block.colwise().mean().transpose()).transpose();
    res.omega_x.push_back(detail::proposal_from(detail::sample_cov(block), d, base_x * std::exp(2.0 * log_x)));
  }
  res.particles = options.particles;
  res.pilot_iters = options.iterations;
  for (const auto& c : totals) res.pilot_acceptance.emplace_back(c.name, c.rate());
  return res;
}

}  // namespace sdeinfer

#endif  // SDEINFER_TUNING_HPP
