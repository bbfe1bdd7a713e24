#ifndef SDEINFER_DIAGNOSTICS_HPP
#define SDEINFER_DIAGNOSTICS_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "sdeinfer/samplers.hpp"

namespace sdeinfer {

struct EssValue {
  double ess = 0.0;
  bool degenerate = false;  // constant chain
};

namespace detail {

// Yule-Walker AR fit by Levinson-Durbin, order chosen by AIC; returns the
// spectral density at frequency zero, var_pred / (1 - sum(phi))^2.
inline double ar_spectrum0(std::span<const double> x) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  const int order_max =
      static_cast<int>(std::min<double>(static_cast<double>(n) - 1.0, std::floor(10.0 * std::log10(static_cast<double>(n)))));
  std::vector<double> acov(order_max + 1, 0.0);
  for (int k = 0; k <= order_max; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i + k < n; ++i) s += (x[i] - mean) * (x[i + k] - mean);
    acov[k] = s / static_cast<double>(n);
  }
  std::vector<double> phi(order_max + 1, 0.0), prev(order_max + 1, 0.0), best_phi;
  double v = acov[0];
  double best_aic = static_cast<double>(n) * std::log(v);
  int best_order = 0;
  double best_var = v;
  for (int k = 1; k <= order_max; ++k) {
    double num = acov[k];
    for (int j = 1; j < k; ++j) num -= prev[j] * acov[k - j];
    const double refl = num / v;
    phi[k] = refl;
    for (int j = 1; j < k; ++j) phi[j] = prev[j] - refl * prev[k - j];
    v *= 1.0 - refl * refl;
    if (!(v > 0.0)) break;
    const double aic = static_cast<double>(n) * std::log(v) + 2.0 * k;
    if (aic < best_aic) {
      best_aic = aic;
      best_order = k;
      best_var = v;
      best_phi.assign(phi.begin() + 1, phi.begin() + k + 1);
    }
    prev = phi;
  }
  const double var_pred = best_var * static_cast<double>(n) / static_cast<double>(n - (best_order + 1));
  double sum_phi = 0.0;
  for (double p : best_phi) sum_phi += p;
  return var_pred / ((1.0 - sum_phi) * (1.0 - sum_phi));
}

inline double sample_variance(std::span<const double> x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(x.size() - 1);
}

}  // namespace detail

/**
 * ESS = L var(x) / S(0) with S(0) from an AIC-selected autoregressive fit,
 * clamped to [1, L]. A constant chain is flagged and given ESS = L.
 */
inline EssValue effective_sample_size(std::span<const double> chain) {
  require(chain.size() >= 10, ErrorKind::InvalidConfig, "ESS needs a chain of length >= 10");
  const double length = static_cast<double>(chain.size());
  const double var = detail::sample_variance(chain);
  if (!(var > 0.0)) return {length, true};
  const double spec = detail::ar_spectrum0(chain);
  double ess = length * var / spec;
  if (!std::isfinite(ess)) ess = 1.0;
  return {std::clamp(ess, 1.0, length), false};
}

inline EssValue effective_sample_size(const std::vector<double>& chain) {
  return effective_sample_size(std::span<const double>(chain));
}

// Cross-check: L var(x) / (b var(batch means)) with b = floor(sqrt(L)).
inline double batch_means_ess(std::span<const double> chain) {
  const std::size_t length = chain.size();
  const std::size_t b = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(length))));
  require(b >= 2, ErrorKind::InvalidConfig, "chain too short for batch means");
  const std::size_t batches = length / b;
  std::vector<double> means(batches, 0.0);
  for (std::size_t k = 0; k < batches; ++k) {
    for (std::size_t i = 0; i < b; ++i) means[k] += chain[k * b + i];
    means[k] /= static_cast<double>(b);
  }
  const double var = detail::sample_variance(chain);
  const double bvar = detail::sample_variance(means);
  if (!(var > 0.0) || !(bvar > 0.0)) return static_cast<double>(length);
  return std::clamp(static_cast<double>(length) * var / (static_cast<double>(b) * bvar), 1.0,
                    static_cast<double>(length));
}

struct EssReport {
  std::vector<std::string> names;
  std::vector<double> ess;
  std::vector<bool> degenerate;
  double min_ess = 0.0;
  double seconds = 0.0;
  double mess_per_second = 0.0;
  std::vector<std::pair<std::string, double>> acceptance;

  bool any_degenerate() const { return std::find(degenerate.begin(), degenerate.end(), true) != degenerate.end(); }
};

inline std::vector<double> matrix_column(const Matrix& m, Eigen::Index j) {
  std::vector<double> out(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[i] = m(i, j);
  return out;
}

/**
 * ESS of every theta chain and, when present and requested, every x^o
 * component chain. mESS is the minimum over non-degenerate chains (over all
 * chains if every one is constant).
 */
inline EssReport ess_report(const ChainOutput& out, const std::vector<std::string>& param_names, int state_dim = 0,
                            bool include_x = true) {
  EssReport r;
  for (Eigen::Index j = 0; j < out.theta.cols(); ++j) {
    r.names.push_back(j < static_cast<Eigen::Index>(param_names.size()) ? param_names[j] : "theta" + std::to_string(j + 1));
    EssValue v = effective_sample_size(matrix_column(out.theta, j));
    r.ess.push_back(v.ess);
    r.degenerate.push_back(v.degenerate);
  }
  if (include_x && out.x_trace.size() > 0 && state_dim > 0) {
    for (Eigen::Index j = 0; j < out.x_trace.cols(); ++j) {
      r.names.push_back("x" + std::to_string(j / state_dim + 1) + "_" + std::to_string(j % state_dim + 1));
      EssValue v = effective_sample_size(matrix_column(out.x_trace, j));
      r.ess.push_back(v.ess);
      r.degenerate.push_back(v.degenerate);
    }
  }
  double lo = std::numeric_limits<double>::infinity(), lo_all = lo;
  for (std::size_t i = 0; i < r.ess.size(); ++i) {
    lo_all = std::min(lo_all, r.ess[i]);
    if (!r.degenerate[i]) lo = std::min(lo, r.ess[i]);
  }
  r.min_ess = std::isfinite(lo) ? lo : lo_all;
  r.seconds = out.seconds;
  r.mess_per_second = out.seconds > 0.0 ? r.min_ess / out.seconds : 0.0;
  for (const auto& c : out.acceptance) r.acceptance.emplace_back(c.name, c.rate());
  return r;
}

// Omega = (2.56^2 / p) var
inline Matrix rwm_variance(const Matrix& posterior_cov, int p) {
  require(p >= 1, ErrorKind::InvalidConfig, "dimension must be positive");
  require(posterior_cov.rows() == posterior_cov.cols(), ErrorKind::ShapeMismatch, "covariance must be square");
  return (2.56 * 2.56 / p) * symmetrize(posterior_cov);
}

// ---------------------------------------------------------------------------
// Choice of the number of particles.

struct NTuningOptions {
  int max_particles = 1024;
  int replicates = 50;
};

// Replicate r always draws from root.derive({r, N}), so the search is deterministic.
inline std::vector<double> log_estimate_replicates(const LikelihoodEstimator& est, const Vector& theta, int particles,
                                                   int replicates, const RngStream& root) {
  std::vector<double> out(replicates);
  for (int r = 0; r < replicates; ++r) {
    RngStream rng = root.derive({static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(particles)});
    out[r] = est.log_estimate(theta, particles, rng.gaussian_vector(est.aux_size(particles)));
  }
  return out;
}

// Var(log p_u'(y) - log p_u(y)) with u' drawn from the CN kernel given u.
inline std::vector<double> log_estimate_differences(const LikelihoodEstimator& est, const Vector& theta, int particles,
                                                    double rho, int replicates, const RngStream& root) {
  const CnKernel kernel(rho);
  std::vector<double> out(replicates);
  for (int r = 0; r < replicates; ++r) {
    RngStream rng = root.derive({static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(particles)});
    const Vector u = rng.gaussian_vector(est.aux_size(particles));
    const Vector u2 = kernel.propose(u, rng);
    out[r] = est.log_estimate(theta, particles, u2) - est.log_estimate(theta, particles, u);
  }
  return out;
}

namespace detail {

inline double finite_variance(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return std::numeric_limits<double>::infinity();
  }
  return sample_variance(v);
}

// Smallest N in [1, max] with score(N) <= target: doubling, then bisection
// between the last failing and first passing N.
template <typename Score>
int smallest_passing(Score&& score, double target, int max_particles) {
  int hi = 1;
  while (score(hi) > target) {
    if (hi >= max_particles) fail(ErrorKind::TuningFailure, "no N up to the maximum meets the variance target");
    hi = std::min(2 * hi, max_particles);
  }
  int lo = hi / 2;  // failing (or 0)
  while (hi - lo > 1) {
    const int mid = (lo + hi) / 2;
    if (score(mid) <= target) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

}  // namespace detail

// Smallest N with sd of the log estimate <= 1.5 at theta.
inline int tune_N_pmmh(const LikelihoodEstimator& est, const Vector& theta, const RngStream& root,
                       NTuningOptions options = {}, double target_sd = 1.5) {
  auto score = [&](int particles) {
    return std::sqrt(detail::finite_variance(log_estimate_replicates(est, theta, particles, options.replicates, root)));
  };
  return detail::smallest_passing(score, target_sd, options.max_particles);
}

// Smallest N with Var(log p' - log p) <= 1 under CN-coupled u, u'.
inline int tune_N_cpmmh(const LikelihoodEstimator& est, const Vector& theta, double rho, const RngStream& root,
                        NTuningOptions options = {}, double target_var = 1.0) {
  auto score = [&](int particles) {
    return detail::finite_variance(log_estimate_differences(est, theta, particles, rho, options.replicates, root));
  };
  return detail::smallest_passing(score, target_var, options.max_particles);
}

// The augmented scheme's estimator of p(x^o | theta) at fixed x^o, seen as a
// function of a flat u (interval blocks laid end to end).
inline LikelihoodEstimator interval_estimator(const SdeModel& model, const InitialDistribution& prior_x0,
                                              const Matrix& x_o, const TimeGrid& grid) {
  LikelihoodEstimator est;
  const int n = grid.n(), m = grid.m(), d = model.dim;
  est.aux_size = [n, m, d](int particles) {
    return static_cast<Eigen::Index>(particles) * d * (m + static_cast<Eigen::Index>(n - 1) * (m - 1));
  };
  est.log_estimate = [&model, prior_x0, x_o, grid](const Vector& theta, int particles, const Vector& u) {
    const int n = grid.n(), m = grid.m(), d = model.dim;
    std::vector<InnovationBlock> blocks;
    Eigen::Index offset = 0;
    for (int t = 0; t < n; ++t) {
      InnovationBlock b(particles, t == 0 ? m : m - 1, d);
      b.values() = u.segment(offset, b.size());
      offset += b.size();
      blocks.push_back(std::move(b));
    }
    return sum_log_estimates(estimate_joint(model, x_o, prior_x0, theta, grid, blocks));
  };
  return est;
}

// Same rule as tune_N_cpmmh, applied to the augmented scheme's joint estimator at fixed x^o.
inline int tune_N_acpmmh(const SdeModel& model, const InitialDistribution& prior_x0, const Matrix& x_o,
                         const TimeGrid& grid, const Vector& theta, double rho, const RngStream& root,
                         NTuningOptions options = {}) {
  return tune_N_cpmmh(interval_estimator(model, prior_x0, x_o, grid), theta, rho, root, options);
}

}  // namespace sdeinfer

#endif  // SDEINFER_DIAGNOSTICS_HPP
