#ifndef SDEINFER_PARTICLE_FILTER_HPP
#define SDEINFER_PARTICLE_FILTER_HPP

#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "sdeinfer/bridge.hpp"
#include "sdeinfer/parallel.hpp"

namespace sdeinfer {

/**
 * All randomness of one filter run, as standard Gaussians.
 *
 * Flat layout (fixed, so that a Crank-Nicolson move pairs like with like):
 *   [0, n*N*m*d)          propagation, interval-major, then particle, substep, component
 *   [.., + n)             one resampling variate per interval, mapped through Phi
 *   [.., + N*d)           initial-state draws, particle-major
 */
class AuxiliaryVariates {
 public:
  AuxiliaryVariates() = default;

  AuxiliaryVariates(int n, int particles, int m, int dim) : n_(n), particles_(particles), m_(m), dim_(dim) {
    require(n >= 1 && particles >= 1 && m >= 1 && dim >= 1, ErrorKind::ShapeMismatch,
            "invalid auxiliary variate shape");
    values_ = Vector::Zero(total_size(n, particles, m, dim));
  }

  static Eigen::Index total_size(int n, int particles, int m, int dim) {
    const Eigen::Index prop = static_cast<Eigen::Index>(n) * particles * m * dim;
    return prop + n + static_cast<Eigen::Index>(particles) * dim;
  }

  // Wraps an existing flat vector (e.g. a sampler's current u).
  static AuxiliaryVariates from_values(int n, int particles, int m, int dim, Vector values) {
    AuxiliaryVariates out(n, particles, m, dim);
    require(values.size() == out.values_.size(), ErrorKind::ShapeMismatch, "auxiliary vector has the wrong length");
    out.values_ = std::move(values);
    return out;
  }

  static AuxiliaryVariates standard_normal(int n, int particles, int m, int dim, RngStream& rng) {
    AuxiliaryVariates out(n, particles, m, dim);
    for (Eigen::Index i = 0; i < out.values_.size(); ++i) out.values_(i) = rng.gaussian();
    return out;
  }

  int n() const { return n_; }
  int particles() const { return particles_; }
  int m() const { return m_; }
  int dim() const { return dim_; }

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }

  Eigen::Map<const RowMatrix> propagation(int t, int i) const {
    const Eigen::Index offset = (static_cast<Eigen::Index>(t) * particles_ + i) * m_ * dim_;
    return Eigen::Map<const RowMatrix>(values_.data() + offset, m_, dim_);
  }

  double resampling(int t) const { return values_(propagation_size() + t); }

  Vector initial(int i) const {
    const Eigen::Index offset = propagation_size() + n_ + static_cast<Eigen::Index>(i) * dim_;
    return values_.segment(offset, dim_);
  }

 private:
  Eigen::Index propagation_size() const { return static_cast<Eigen::Index>(n_) * particles_ * m_ * dim_; }

  int n_ = 0;
  int particles_ = 0;
  int m_ = 0;
  int dim_ = 0;
  Vector values_;
};

/**
 * Systematic resampling from normalised weights driven by one Gaussian
 * variate: U = Phi(z), ancestor of slot i is the smallest j whose cumulative
 * weight reaches (i + U) / N.
 */
inline std::vector<int> systematic_resample(const Vector& weights, double gaussian_variate) {
  const int count = static_cast<int>(weights.size());
  require(count >= 1, ErrorKind::ShapeMismatch, "need at least one weight");
  require(std::isfinite(gaussian_variate), ErrorKind::InvalidConfig, "resampling variate must be finite");
  const double total = weights.sum();
  if (!(total > 0.0)) fail(ErrorKind::DegenerateWeights, "all particle weights are zero");
  int last = count - 1;
  while (last > 0 && weights(last) <= 0.0) --last;

  const double u = normal_cdf(gaussian_variate);
  std::vector<int> ancestors(count);
  double cumulative = weights(0) / total;
  int j = 0;
  for (int i = 0; i < count; ++i) {
    const double target = (i + u) / count;
    while (cumulative < target && j < last) {
      ++j;
      cumulative += weights(j) / total;
    }
    ancestors[i] = j;
  }
  return ancestors;
}

/**
 * Greedy nearest-neighbour ordering: start from the particle with the
 * smallest first component, then repeatedly take the closest unsorted one.
 * Ties go to the lower index.
 */
inline std::vector<int> euclidean_sort(const RowMatrix& particles) {
  const int count = static_cast<int>(particles.rows());
  std::vector<int> order;
  order.reserve(count);
  if (count == 0) return order;
  std::vector<bool> used(count, false);
  int current = 0;
  for (int i = 1; i < count; ++i) {
    if (particles(i, 0) < particles(current, 0)) current = i;
  }
  order.push_back(current);
  used[current] = true;
  for (int step = 1; step < count; ++step) {
    int best = -1;
    double best_dist = 0.0;
    for (int i = 0; i < count; ++i) {
      if (used[i]) continue;
      const double dist = (particles.row(i) - particles.row(current)).squaredNorm();
      if (best < 0 || dist < best_dist) {
        best = i;
        best_dist = dist;
      }
    }
    order.push_back(best);
    used[best] = true;
    current = best;
  }
  return order;
}

struct FilterOptions {
  bool sort = false;
  WorkerPool* pool = nullptr;
};

/**
 * Bridge-proposal particle filter. Returns log of
 *   N^{-n} prod_t sum_i p(y_{t+1}|x^i) p_e(x^i_(t,t+1]) / g(x^i_(t,t+1])
 * as a deterministic function of (theta, u). Resamples every interval.
 * Returns -inf when every weight vanishes at some time.
 */
inline double run_filter(const SdeModel& model, const ObservationModel& obs, const InitialDistribution& prior,
                         const Matrix& data, const Vector& theta, const TimeGrid& grid, const AuxiliaryVariates& u,
                         FilterOptions options = {}) {
  const int n = grid.n();
  const int m = grid.m();
  const int d = model.dim;
  const int count = u.particles();
  require(data.rows() == n && data.cols() == obs.obs_dim(), ErrorKind::ShapeMismatch, "data must be n x d_o");
  require(u.n() == n && u.m() == m && u.dim() == d, ErrorKind::ShapeMismatch,
          "auxiliary variates do not match (n, m, d)");
  require(obs.state_dim() == d && prior.dim() == d, ErrorKind::ShapeMismatch, "model dimensions disagree");

  RowMatrix x(count, d);
  for (int i = 0; i < count; ++i) x.row(i) = prior.draw(u.initial(i)).transpose();
  Vector log_w = Vector::Zero(count);
  RowMatrix next(count, d);
  Vector next_log_w(count);
  const double log_count = std::log(static_cast<double>(count));
  double total = 0.0;

  for (int t = 0; t < n; ++t) {
    Vector w = (log_w.array() - log_w.maxCoeff()).exp();
    const std::vector<int> ancestors = systematic_resample(w, u.resampling(t));
    const Vector y_next = data.row(t).transpose();
    const BridgeTarget target = BridgeTarget::noisy(obs, y_next);

    for_each_index(options.pool, static_cast<std::size_t>(count), [&](std::size_t idx) {
      const int i = static_cast<int>(idx);
      const Vector start = x.row(ancestors[i]).transpose();
      next.row(i) = start.transpose();
      next_log_w(i) = kNegInf;
      try {
        BridgeDraw draw = propagate(target, model, start, theta, t, m, u.propagation(t, i));
        if (!draw.in_domain || draw.log_euler == kNegInf) return;
        const Vector end = draw.points.row(m - 1).transpose();
        next.row(i) = end.transpose();
        const double lw = obs_log_density(y_next, end, obs) + draw.log_euler - draw.log_g;
        if (!std::isnan(lw)) next_log_w(i) = lw;
      } catch (const SdeError& e) {
        if (e.category() != ErrorCategory::Numeric) throw;
      }
    });

    const double lse = log_sum_exp(std::span<const double>(next_log_w.data(), count));
    if (lse == kNegInf) return kNegInf;
    total += lse - log_count;

    if (options.sort && count > 1) {
      const std::vector<int> order = euclidean_sort(next);
      for (int i = 0; i < count; ++i) {
        x.row(i) = next.row(order[i]);
        log_w(i) = next_log_w(order[i]);
      }
    } else {
      x = next;
      log_w = next_log_w;
    }
  }
  return total;
}

}  // namespace sdeinfer

#endif  // SDEINFER_PARTICLE_FILTER_HPP
