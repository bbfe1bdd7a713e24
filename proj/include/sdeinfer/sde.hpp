#ifndef SDEINFER_SDE_HPP
#define SDEINFER_SDE_HPP

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sdeinfer/errors.hpp"
#include "sdeinfer/linalg.hpp"
#include "sdeinfer/rng.hpp"

namespace sdeinfer {

using DriftFn = std::function<Vector(const Vector& x, const Vector& theta)>;
using MatrixFn = std::function<Matrix(const Vector& x, const Vector& theta)>;

/**
 * Ito diffusion dX = alpha(X, theta) dt + sqrt(beta(X, theta)) dW.
 *
 * theta passed to drift/diffusion/jacobian is always on the natural scale.
 * The state domain is a box [lower, upper]; infinite bounds are allowed.
 */
struct SdeModel {
  std::string name;
  int dim = 0;
  int n_params = 0;
  DriftFn drift;
  MatrixFn diffusion;
  MatrixFn jacobian;  // d alpha_i / d x_j; empty means "use finite differences"
  Vector lower;
  Vector upper;

  bool in_domain(const Vector& x) const {
    if (!x.allFinite()) return false;
    for (int i = 0; i < dim; ++i) {
      if (x(i) < lower(i) || x(i) > upper(i)) return false;
    }
    return true;
  }

  Vector clamp(const Vector& x) const { return x.cwiseMax(lower).cwiseMin(upper); }
};

// Unbounded domain of dimension d.
inline std::pair<Vector, Vector> unbounded_domain(int d) {
  const double inf = std::numeric_limits<double>::infinity();
  return {Vector::Constant(d, -inf), Vector::Constant(d, inf)};
}

// Y_t = F^T X_t + eps_t, eps_t ~ N(0, Sigma).
class ObservationModel {
 public:
  ObservationModel(Matrix f, Matrix sigma) : f_(std::move(f)), sigma_(std::move(sigma)) {
    require(f_.cols() >= 1 && f_.cols() <= f_.rows(), ErrorKind::ShapeMismatch,
            "observation matrix F must be d x d_o with d_o <= d");
    require(sigma_.rows() == f_.cols() && sigma_.cols() == f_.cols(), ErrorKind::ShapeMismatch,
            "Sigma must be d_o x d_o");
    require(sigma_.allFinite() && asymmetry(sigma_) <= 1e-12 * (1.0 + sigma_.cwiseAbs().maxCoeff()),
            ErrorKind::NotPSD, "Sigma must be finite and symmetric");
    if (f_.cols() > 1) {
      Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma_, Eigen::EigenvaluesOnly);
      require(eig.eigenvalues().minCoeff() >= -1e-12 * (1.0 + sigma_.cwiseAbs().maxCoeff()),
              ErrorKind::NotPSD, "Sigma has a negative eigenvalue");
    } else {
      require(sigma_(0, 0) >= 0.0, ErrorKind::NotPSD, "Sigma must be non-negative");
    }
    noise_root_ = psd_sqrt(sigma_);
    if (sigma_.trace() > 0.0) {
      try {
        factor_ = GaussianFactor::cholesky(sigma_);
      } catch (const SdeError&) {
        factor_.reset();
      }
    }
  }

  // Every component observed with independent noise of standard deviation sd.
  static ObservationModel identity(int d, double sd) {
    return ObservationModel(Matrix::Identity(d, d), Matrix::Identity(d, d) * sd * sd);
  }

  int state_dim() const { return static_cast<int>(f_.rows()); }
  int obs_dim() const { return static_cast<int>(f_.cols()); }
  const Matrix& F() const { return f_; }
  const Matrix& Sigma() const { return sigma_; }
  const Matrix& noise_root() const { return noise_root_; }
  bool has_density() const { return factor_.has_value(); }

  const GaussianFactor& factor() const {
    if (!factor_) fail(ErrorKind::SingularCovariance, "observation covariance is singular");
    return *factor_;
  }

 private:
  Matrix f_;
  Matrix sigma_;
  Matrix noise_root_;
  std::optional<GaussianFactor> factor_;
};

// Observation instants are the integers 1..n; each unit interval is split
// into m Euler steps of width 1/m.
class TimeGrid {
 public:
  TimeGrid(int n, int m) : n_(n), m_(m) {
    require(n >= 1, ErrorKind::InvalidConfig, "need at least one observation");
    require(m >= 1, ErrorKind::InvalidConfig, "need m >= 1 substeps per interval");
  }

  static TimeGrid from_delta_tau(int n, double delta_tau) {
    require(delta_tau > 0.0 && delta_tau <= 1.0, ErrorKind::InvalidConfig,
            "delta_tau must lie in (0, 1]");
    const double steps = 1.0 / delta_tau;
    const int m = static_cast<int>(std::lround(steps));
    require(std::abs(steps - m) <= 1e-9 * steps, ErrorKind::InvalidConfig,
            "1/delta_tau must be an integer");
    return TimeGrid(n, m);
  }

  int n() const { return n_; }
  int m() const { return m_; }
  double delta_tau() const { return 1.0 / m_; }
  double tau(int t, int k) const { return t + static_cast<double>(k) / m_; }
  int points() const { return n_ * m_ + 1; }

 private:
  int n_;
  int m_;
};

// Positive parameters are stored and proposed on the log scale.
class ParamVector {
 public:
  ParamVector() = default;

  static ParamVector from_natural(const Vector& theta, std::vector<bool> log_scale) {
    require(static_cast<std::size_t>(theta.size()) == log_scale.size(), ErrorKind::ShapeMismatch,
            "log-scale mask size must match theta");
    Vector work = theta;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      if (log_scale[i]) {
        require(theta(i) > 0.0, ErrorKind::InvalidConfig, "log-scale parameter must be positive");
        work(i) = std::log(theta(i));
      }
    }
    return ParamVector(theta, work, std::move(log_scale));
  }

  static ParamVector from_work(const Vector& work, std::vector<bool> log_scale) {
    require(static_cast<std::size_t>(work.size()) == log_scale.size(), ErrorKind::ShapeMismatch,
            "log-scale mask size must match theta");
    Vector theta = work;
    for (Eigen::Index i = 0; i < work.size(); ++i) {
      if (log_scale[i]) theta(i) = std::exp(work(i));
    }
    return ParamVector(theta, work, std::move(log_scale));
  }

  const Vector& natural() const { return natural_; }
  const Vector& work() const { return work_; }
  const std::vector<bool>& log_scale() const { return log_scale_; }
  int size() const { return static_cast<int>(natural_.size()); }

 private:
  ParamVector(Vector natural, Vector work, std::vector<bool> mask)
      : natural_(std::move(natural)), work_(std::move(work)), log_scale_(std::move(mask)) {}

  Vector natural_;
  Vector work_;
  std::vector<bool> log_scale_;
};

/**
 * Distribution of X_0, written as x0 = mean + root * z with z ~ N(0, I) so
 * that every draw is a deterministic function of Gaussian innovations.
 * A zero covariance gives a point mass.
 */
class InitialDistribution {
 public:
  static InitialDistribution point_mass(Vector x0) {
    InitialDistribution out;
    out.mean_ = std::move(x0);
    out.cov_ = Matrix::Zero(out.mean_.size(), out.mean_.size());
    out.root_ = out.cov_;
    return out;
  }

  static InitialDistribution gaussian(Vector mean, Matrix cov) {
    require(cov.rows() == mean.size() && cov.cols() == mean.size(), ErrorKind::ShapeMismatch,
            "initial covariance shape");
    InitialDistribution out;
    out.mean_ = std::move(mean);
    out.cov_ = std::move(cov);
    out.root_ = psd_sqrt(out.cov_);
    out.degenerate_ = out.cov_.trace() <= 0.0;
    return out;
  }

  int dim() const { return static_cast<int>(mean_.size()); }
  bool degenerate() const { return degenerate_; }
  const Vector& mean() const { return mean_; }
  const Matrix& cov() const { return cov_; }

  Vector draw(const Vector& z) const {
    if (degenerate_) return mean_;
    return mean_ + root_ * z;
  }

 private:
  Vector mean_;
  Matrix cov_;
  Matrix root_;
  bool degenerate_ = true;
};

/// Values of X on the fine grid: row r is the state at time r / m.
class LatentPath {
 public:
  LatentPath(TimeGrid grid, Matrix values) : grid_(grid), values_(std::move(values)) {
    require(values_.rows() == grid_.points(), ErrorKind::ShapeMismatch,
            "latent path must have n*m+1 rows");
  }

  const TimeGrid& grid() const { return grid_; }
  const Matrix& values() const { return values_; }
  int dim() const { return static_cast<int>(values_.cols()); }

  Vector at(int t, int k) const { return values_.row(t * grid_.m() + k).transpose(); }

  // x^o: states at the observation times 1..n (row t-1 holds x_t).
  Matrix observed() const {
    Matrix out(grid_.n(), dim());
    for (int t = 1; t <= grid_.n(); ++t) out.row(t - 1) = values_.row(t * grid_.m());
    return out;
  }

  // x^L: every other grid point, in time order (includes x_0).
  Matrix intermediate() const {
    Matrix out(grid_.points() - grid_.n(), dim());
    int r = 0;
    for (int i = 0; i < grid_.points(); ++i) {
      if (i == 0 || i % grid_.m() != 0) out.row(r++) = values_.row(i);
    }
    return out;
  }

 private:
  TimeGrid grid_;
  Matrix values_;
};

struct GaussianMoments {
  Vector mean;
  Matrix cov;
};

namespace detail {

inline void check_finite_drift(const Vector& a, const Matrix& b) {
  if (!a.allFinite() || !b.allFinite()) fail(ErrorKind::NonFiniteDrift, "drift or diffusion is not finite");
}

}  // namespace detail

// One Euler-Maruyama step: mean x + alpha dt, covariance beta dt. beta is
// checked for symmetry and positive semi-definiteness.
inline GaussianMoments euler_moments(const SdeModel& model, const Vector& x, const Vector& theta,
                                     double dt) {
  require(dt > 0.0, ErrorKind::InvalidConfig, "dt must be positive");
  Vector a = model.drift(x, theta);
  Matrix b = model.diffusion(x, theta);
  detail::check_finite_drift(a, b);
  const double scale = 1.0 + b.cwiseAbs().maxCoeff();
  if (asymmetry(b) > 1e-9 * scale) fail(ErrorKind::NotPSD, "diffusion matrix is not symmetric");
  if (b.rows() > 1) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(b, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-9 * scale) fail(ErrorKind::NotPSD, "diffusion matrix is indefinite");
  } else if (b(0, 0) < -1e-9 * scale) {
    fail(ErrorKind::NotPSD, "negative diffusion coefficient");
  }
  return {x + a * dt, b * dt};
}

// log N(x_to; x_from + alpha dt, beta dt); -inf when x_to leaves the domain.
inline double euler_log_density(const SdeModel& model, const Vector& x_from, const Vector& x_to,
                                const Vector& theta, double dt) {
  if (!model.in_domain(x_to)) return kNegInf;
  Vector a = model.drift(x_from, theta);
  Matrix b = model.diffusion(x_from, theta);
  detail::check_finite_drift(a, b);
  GaussianFactor factor = GaussianFactor::cholesky(b * dt);
  return factor.log_density(x_to - x_from - a * dt);
}

// Sum of the m Euler log-densities along a segment whose first row is x_t.
inline double path_log_density(const SdeModel& model, const Matrix& segment, const Vector& theta,
                               double dt) {
  require(segment.rows() >= 2, ErrorKind::ShapeMismatch, "segment needs at least two points");
  double total = 0.0;
  for (Eigen::Index k = 0; k + 1 < segment.rows(); ++k) {
    total += euler_log_density(model, segment.row(k).transpose(), segment.row(k + 1).transpose(), theta, dt);
  }
  return total;
}

// Forward Euler-Maruyama simulation. Steps that leave the domain are
// truncated at the boundary.
inline LatentPath simulate_path(const SdeModel& model, const Vector& theta, const Vector& x0,
                                const TimeGrid& grid, RngStream& rng) {
  require(x0.size() == model.dim, ErrorKind::ShapeMismatch, "x0 has wrong dimension");
  require(model.in_domain(x0), ErrorKind::DomainExit, "x0 outside the state domain");
  const double dt = grid.delta_tau();
  Matrix values(grid.points(), model.dim);
  values.row(0) = x0.transpose();
  Vector x = x0;
  for (int r = 1; r < grid.points(); ++r) {
    Vector a = model.drift(x, theta);
    Matrix b = model.diffusion(x, theta);
    detail::check_finite_drift(a, b);
    Vector noise = psd_sqrt(b * dt) * rng.gaussian_vector(model.dim);
    x = model.clamp(x + a * dt + noise);
    values.row(r) = x.transpose();
  }
  return LatentPath(grid, std::move(values));
}

// y_t = F^T x_t + eps_t for t = 1..n; row t-1 holds y_t.
inline Matrix simulate_data(const LatentPath& path, const ObservationModel& obs, RngStream& rng) {
  require(path.dim() == obs.state_dim(), ErrorKind::ShapeMismatch, "path and observation model disagree on d");
  const int n = path.grid().n();
  Matrix y(n, obs.obs_dim());
  for (int t = 1; t <= n; ++t) {
    Vector eps = obs.noise_root() * rng.gaussian_vector(obs.obs_dim());
    y.row(t - 1) = (obs.F().transpose() * path.at(t, 0) + eps).transpose();
  }
  return y;
}

// log N(y_t; F^T x_t, Sigma)
inline double obs_log_density(const Vector& y, const Vector& x, const ObservationModel& obs) {
  require(y.size() == obs.obs_dim() && x.size() == obs.state_dim(), ErrorKind::ShapeMismatch,
          "observation density argument sizes");
  return obs.factor().log_density(y - obs.F().transpose() * x);
}

}  // namespace sdeinfer

#endif  // SDEINFER_SDE_HPP
