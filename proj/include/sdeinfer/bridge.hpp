#ifndef SDEINFER_BRIDGE_HPP
#define SDEINFER_BRIDGE_HPP

#include <utility>

#include "sdeinfer/sde.hpp"

namespace sdeinfer {

struct BridgeParams {
  Vector mu;
  Matrix psi;
};

/**
 * Modified diffusion bridge toward a noisy, partial observation y_next at
 * time t_next, evaluated at x_k (time tau_k):
 *
 *   mu  = alpha + beta F (F' beta F D_k + Sigma)^{-1} (y - F'(x + alpha D_k))
 *   Psi = beta - beta F (F' beta F D_k + Sigma)^{-1} F' beta dtau
 *
 * with D_k = t_next - tau_k.
 */
inline BridgeParams mdb_noisy_params(const SdeModel& model, const ObservationModel& obs, const Vector& x_k,
                                     const Vector& y_next, const Vector& theta, double tau_k, double t_next,
                                     double delta_tau) {
  const double gap = t_next - tau_k;
  require(gap > 0.0, ErrorKind::InvalidConfig, "bridge time must precede the observation time");
  Vector a = model.drift(x_k, theta);
  Matrix b = model.diffusion(x_k, theta);
  detail::check_finite_drift(a, b);
  const Matrix& f = obs.F();
  Matrix bf = b * f;
  Matrix inner = f.transpose() * bf * gap + obs.Sigma();
  Matrix gain;  // beta F inner^{-1}
  try {
    GaussianFactor factor = GaussianFactor::cholesky(inner);
    Matrix solved(inner.rows(), bf.rows());
    for (Eigen::Index j = 0; j < bf.rows(); ++j) solved.col(j) = factor.solve(bf.row(j).transpose());
    gain = solved.transpose();
  } catch (const SdeError&) {
    fail(ErrorKind::SingularInnovation, "F' beta F D_k + Sigma is singular");
  }
  BridgeParams out;
  out.mu = a + gain * (y_next - f.transpose() * (x_k + a * gap));
  out.psi = b - gain * bf.transpose() * delta_tau;
  return out;
}

/// Bridge toward an exactly known endpoint (the Sigma = 0 case).
inline BridgeParams mdb_exact_params(const SdeModel& model, const Vector& x_k, const Vector& x_next,
                                     const Vector& theta, double tau_k, double t_next, double delta_tau) {
  const double gap = t_next - tau_k;
  require(gap > 0.0 && t_next - (tau_k + delta_tau) >= -1e-12, ErrorKind::InvalidConfig,
          "exact bridge step must not pass the endpoint");
  Matrix b = model.diffusion(x_k, theta);
  detail::check_finite_drift(Vector::Zero(1), b);
  const double shrink = std::max(0.0, t_next - (tau_k + delta_tau)) / gap;
  return {(x_next - x_k) / gap, shrink * b};
}

enum class BridgeKind { NoisyEndpoint, ExactEndpoint };

// What the construct conditions on: a noisy observation (the particle
// filter, which also generates the endpoint) or an exact endpoint.
class BridgeTarget {
 public:
  static BridgeTarget noisy(const ObservationModel& obs, Vector y_next) {
    return BridgeTarget(BridgeKind::NoisyEndpoint, std::move(y_next), &obs);
  }
  static BridgeTarget exact(Vector x_next) { return BridgeTarget(BridgeKind::ExactEndpoint, std::move(x_next), nullptr); }

  BridgeKind kind() const { return kind_; }
  const Vector& value() const { return value_; }
  const ObservationModel& obs() const { return *obs_; }

  // Innovation rows consumed per interval.
  int steps(int m) const { return kind_ == BridgeKind::NoisyEndpoint ? m : m - 1; }

 private:
  BridgeTarget(BridgeKind kind, Vector value, const ObservationModel* obs)
      : kind_(kind), value_(std::move(value)), obs_(obs) {}

  BridgeKind kind_;
  Vector value_;
  const ObservationModel* obs_;
};

struct BridgeDraw {
  RowMatrix points;          // generated states, one per row, in time order
  double log_g = 0.0;        // log proposal density of the generated points
  double log_euler = 0.0;    // log p_e of the whole interval (endpoint included)
  bool in_domain = true;
};

namespace detail {

// Shared walk for drawing (u given) and density evaluation (points given).
inline BridgeDraw walk_bridge(const BridgeTarget& target, const SdeModel& model, const Vector& x_start,
                              const Vector& theta, double t_start, int m, const Eigen::Ref<const RowMatrix>* u,
                              const Eigen::Ref<const RowMatrix>* given) {
  const int steps = target.steps(m);
  const double dt = 1.0 / m;
  const double t_next = t_start + 1.0;
  BridgeDraw out;
  out.points.resize(steps, model.dim);
  Vector x = x_start;
  for (int k = 0; k < steps; ++k) {
    const double tau_k = t_start + static_cast<double>(k) / m;
    Vector a = model.drift(x, theta);
    Matrix b = model.diffusion(x, theta);
    check_finite_drift(a, b);
    GaussianFactor euler = GaussianFactor::spectral(b);
    Vector mean;
    GaussianFactor proposal = euler;
    if (target.kind() == BridgeKind::ExactEndpoint) {
      const double gap = static_cast<double>(m - k) / m;
      const double shrink = static_cast<double>(m - k - 1) / (m - k);
      mean = x + (target.value() - x) / gap * dt;
      proposal = euler.scaled(shrink * dt);
    } else {
      BridgeParams params = mdb_noisy_params(model, target.obs(), x, target.value(), theta, tau_k, t_next, dt);
      mean = x + params.mu * dt;
      proposal = GaussianFactor::spectral(params.psi * dt);
    }
    euler = euler.scaled(dt);
    Vector next = given ? Vector(given->row(k).transpose()) : Vector(mean + proposal.transform(u->row(k).transpose()));
    out.points.row(k) = next.transpose();
    out.log_g += proposal.log_density(next - mean);
    if (!model.in_domain(next)) {
      out.in_domain = false;
      out.log_euler = kNegInf;
      return out;
    }
    out.log_euler += euler.log_density(next - x - a * dt);
    x = std::move(next);
  }
  if (target.kind() == BridgeKind::ExactEndpoint) {
    out.log_euler += euler_log_density(model, x, target.value(), theta, dt);
  }
  return out;
}

}  // namespace detail

/**
 * Generative bridge over one unit interval starting at t_start:
 *   x_{k+1} = x_k + mu dtau + sqrt(Psi dtau) u_k.
 * u has m rows for a noisy target (endpoint generated) and m-1 rows for an
 * exact one. Leaving the state domain stops the walk with in_domain = false.
 */
inline BridgeDraw propagate(const BridgeTarget& target, const SdeModel& model, const Vector& x_start,
                            const Vector& theta, double t_start, int m, const Eigen::Ref<const RowMatrix>& u) {
  require(u.rows() == target.steps(m) && u.cols() == model.dim, ErrorKind::ShapeMismatch,
          "innovation block has the wrong shape for this bridge");
  return detail::walk_bridge(target, model, x_start, theta, t_start, m, &u, nullptr);
}

// log g of given bridge points (same layout as BridgeDraw::points).
inline double bridge_log_density(const BridgeTarget& target, const SdeModel& model, const Vector& x_start,
                                 const Vector& theta, double t_start, int m,
                                 const Eigen::Ref<const RowMatrix>& points) {
  require(points.rows() == target.steps(m) && points.cols() == model.dim, ErrorKind::ShapeMismatch,
          "bridge points have the wrong shape");
  return detail::walk_bridge(target, model, x_start, theta, t_start, m, nullptr, &points).log_g;
}

}  // namespace sdeinfer

#endif  // SDEINFER_BRIDGE_HPP
