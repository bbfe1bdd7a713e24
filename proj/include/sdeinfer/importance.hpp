#ifndef SDEINFER_IMPORTANCE_HPP
#define SDEINFER_IMPORTANCE_HPP

#include <cmath>
#include <vector>

#include "sdeinfer/bridge.hpp"
#include "sdeinfer/innovations.hpp"
#include "sdeinfer/parallel.hpp"

namespace sdeinfer {

struct TransitionEstimate {
  double log_value = kNegInf;
  int interval = 0;
  int particles = 0;
};

namespace detail {

// log p_e(path) - log g(path) for one exact-endpoint bridge; any numerical
// failure along the bridge counts as a zero weight.
inline double exact_bridge_log_weight(const SdeModel& model, const Vector& x_start, const Vector& x_next,
                                      const Vector& theta, double t_start, int m,
                                      const Eigen::Ref<const RowMatrix>& u) {
  try {
    BridgeDraw draw = propagate(BridgeTarget::exact(x_next), model, x_start, theta, t_start, m, u);
    if (!draw.in_domain || draw.log_euler == kNegInf) return kNegInf;
    const double w = draw.log_euler - draw.log_g;
    return std::isnan(w) ? kNegInf : w;
  } catch (const SdeError& e) {
    if (e.category() != ErrorCategory::Numeric) throw;
    return kNegInf;
  }
}

inline TransitionEstimate average_weights(const std::vector<double>& log_w, int interval) {
  TransitionEstimate out;
  out.interval = interval;
  out.particles = static_cast<int>(log_w.size());
  const double lse = log_sum_exp(log_w);
  out.log_value = lse == kNegInf ? kNegInf : lse - std::log(static_cast<double>(log_w.size()));
  return out;
}

}  // namespace detail

/**
 * Importance-sampling estimate of p^(m)(x_next | x_t, theta) over interval t.
 * Each of the N bridges is driven by one (m-1) x d slice of u; the weight is
 * p_e(x_(t,t+1]) / g(x_(t,t+1)) with x_{t+1} fixed at x_next.
 */
inline TransitionEstimate estimate_transition(const SdeModel& model, const Vector& x_t, const Vector& x_next,
                                              const Vector& theta, const TimeGrid& grid, int interval,
                                              const InnovationBlock& u) {
  const int m = grid.m();
  require(u.steps() == m - 1 && u.dim() == model.dim && u.particles() >= 1, ErrorKind::ShapeMismatch,
          "transition innovations must be N x (m-1) x d");
  std::vector<double> log_w(u.particles());
  for (int i = 0; i < u.particles(); ++i) {
    log_w[i] = detail::exact_bridge_log_weight(model, x_t, x_next, theta, interval, m, u.particle(i));
  }
  return detail::average_weights(log_w, interval);
}

/**
 * Estimate of p^(m)(x_1 | theta) with importance density p(x_0) g(x_(0,1) | x_0, x_1).
 * Row 0 of each particle's slice reparameterises the x_0 draw; rows 1..m-1
 * drive the bridge. p(x_0) cancels from the weight.
 */
inline TransitionEstimate estimate_initial(const SdeModel& model, const InitialDistribution& prior,
                                           const Vector& x_1, const Vector& theta, const TimeGrid& grid,
                                           const InnovationBlock& u) {
  const int m = grid.m();
  require(u.steps() == m && u.dim() == model.dim && u.particles() >= 1, ErrorKind::ShapeMismatch,
          "initial innovations must be N x m x d");
  std::vector<double> log_w(u.particles());
  for (int i = 0; i < u.particles(); ++i) {
    auto slice = u.particle(i);
    Vector x0 = prior.draw(slice.row(0).transpose());
    if (!model.in_domain(x0)) {
      log_w[i] = kNegInf;
      continue;
    }
    log_w[i] = detail::exact_bridge_log_weight(model, x0, x_1, theta, 0.0, m, slice.bottomRows(m - 1));
  }
  return detail::average_weights(log_w, 0);
}

// Shapes of the per-interval innovation blocks used by the augmented sampler.
inline std::vector<InnovationBlock> draw_interval_innovations(int n, int particles, int m, int d, RngStream& rng) {
  std::vector<InnovationBlock> out;
  out.reserve(n);
  for (int t = 0; t < n; ++t) out.push_back(InnovationBlock::standard_normal(particles, t == 0 ? m : m - 1, d, rng));
  return out;
}

// Estimate for interval t (t = 0 is the initial term); x_o row t-1 holds x_t.
inline TransitionEstimate estimate_interval(const SdeModel& model, const InitialDistribution& prior,
                                            const Matrix& x_o, const Vector& theta, const TimeGrid& grid, int t,
                                            const InnovationBlock& u) {
  if (t == 0) return estimate_initial(model, prior, x_o.row(0).transpose(), theta, grid, u);
  return estimate_transition(model, x_o.row(t - 1).transpose(), x_o.row(t).transpose(), theta, grid, t, u);
}

/**
 * Per-interval log estimates for all n intervals; their sum estimates
 * log p^(m)(x^o | theta). Intervals are independent and run on the pool.
 */
inline Vector estimate_joint(const SdeModel& model, const Matrix& x_o, const InitialDistribution& prior,
                             const Vector& theta, const TimeGrid& grid, const std::vector<InnovationBlock>& u,
                             WorkerPool* pool = nullptr) {
  const int n = grid.n();
  require(x_o.rows() == n && x_o.cols() == model.dim, ErrorKind::ShapeMismatch, "x^o must be n x d");
  require(static_cast<int>(u.size()) == n, ErrorKind::ShapeMismatch, "need one innovation block per interval");
  Vector out(n);
  for_each_index(pool, static_cast<std::size_t>(n), [&](std::size_t t) {
    const int ti = static_cast<int>(t);
    out(ti) = estimate_interval(model, prior, x_o, theta, grid, ti, u[t]).log_value;
  });
  return out;
}

// Ordered sum; any -inf term makes the total -inf.
inline double sum_log_estimates(const Vector& parts) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < parts.size(); ++i) {
    if (parts(i) == kNegInf) return kNegInf;
    total += parts(i);
  }
  return total;
}

}  // namespace sdeinfer

#endif  // SDEINFER_IMPORTANCE_HPP
