#ifndef SDEINFER_MODELS_HPP
#define SDEINFER_MODELS_HPP

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sdeinfer/prior.hpp"
#include "sdeinfer/sde.hpp"

namespace sdeinfer {

// A benchmark diffusion together with the settings used to generate and fit data.
struct ModelSpec {
  SdeModel model;
  std::vector<std::string> param_names;
  std::vector<bool> log_scale;
  Vector truth;
  Vector x0;
  std::vector<Matrix> noise_variants;  // observation covariances of the standard data sets
  ParameterPrior prior;
  int default_n = 50;

  ObservationModel observation(std::size_t variant = 0) const {
    require(variant < noise_variants.size(), ErrorKind::InvalidConfig, "unknown noise variant for " + model.name);
    return ObservationModel(Matrix::Identity(model.dim, model.dim), noise_variants[variant]);
  }

  ObservationModel observation_with_sd(double sd) const { return ObservationModel::identity(model.dim, sd); }
};

namespace detail {

inline Vector nonnegative_lower(int d) { return Vector::Zero(d); }
inline Vector unbounded_upper(int d) { return Vector::Constant(d, std::numeric_limits<double>::infinity()); }

inline Matrix scaled_identity(int d, double sd) { return Matrix::Identity(d, d) * sd * sd; }

}  // namespace detail

// dX = (theta1 - theta2) X dt + sqrt((theta1 + theta2) X) dW
inline ModelSpec square_root_model() {
  ModelSpec spec;
  SdeModel& m = spec.model;
  m.name = "sqrt";
  m.dim = 1;
  m.n_params = 2;
  m.drift = [](const Vector& x, const Vector& th) { return Vector::Constant(1, (th(0) - th(1)) * x(0)); };
  m.diffusion = [](const Vector& x, const Vector& th) { return Matrix::Constant(1, 1, (th(0) + th(1)) * x(0)); };
  m.jacobian = [](const Vector&, const Vector& th) { return Matrix::Constant(1, 1, th(0) - th(1)); };
  m.lower = detail::nonnegative_lower(1);
  m.upper = detail::unbounded_upper(1);
  spec.param_names = {"theta1", "theta2"};
  spec.log_scale = {true, true};
  spec.truth = Vector(2);
  spec.truth << 0.05, 0.06;
  spec.x0 = Vector::Constant(1, 25.0);
  spec.noise_variants = {detail::scaled_identity(1, 1.0), detail::scaled_identity(1, 5.0)};
  spec.prior = ParameterPrior::independent_normal(0.0, 10.0);
  spec.default_n = 101;
  return spec;
}

// Prey X1 and predators X2.
inline ModelSpec lotka_volterra_model() {
  ModelSpec spec;
  SdeModel& m = spec.model;
  m.name = "lv";
  m.dim = 2;
  m.n_params = 3;
  m.drift = [](const Vector& x, const Vector& th) {
    Vector a(2);
    const double inter = th(1) * x(0) * x(1);
    a << th(0) * x(0) - inter, inter - th(2) * x(1);
    return a;
  };
  m.diffusion = [](const Vector& x, const Vector& th) {
    Matrix b(2, 2);
    const double inter = th(1) * x(0) * x(1);
    b << th(0) * x(0) + inter, -inter, -inter, inter + th(2) * x(1);
    return b;
  };
  m.jacobian = [](const Vector& x, const Vector& th) {
    Matrix h(2, 2);
    h << th(0) - th(1) * x(1), -th(1) * x(0), th(1) * x(1), th(1) * x(0) - th(2);
    return h;
  };
  m.lower = detail::nonnegative_lower(2);
  m.upper = detail::unbounded_upper(2);
  spec.param_names = {"theta1", "theta2", "theta3"};
  spec.log_scale = {true, true, true};
  spec.truth = Vector(3);
  spec.truth << 0.5, 0.0025, 0.3;
  spec.x0 = Vector::Constant(2, 100.0);
  spec.noise_variants = {detail::scaled_identity(2, 1.0), detail::scaled_identity(2, 5.0),
                         detail::scaled_identity(2, 10.0)};
  spec.prior = ParameterPrior::independent_normal(0.0, 10.0);
  spec.default_n = 50;
  return spec;
}

namespace detail {

// Stoichiometry of the autoregulatory network; columns are reactions,
// rows are (RNA, P, P2, DNA).
inline const Matrix& autoreg_stoichiometry() {
  static const Matrix s = [] {
    Matrix out(4, 8);
    out << 0, 0, 1, 0, 0, 0, -1, 0,
           0, 0, 0, 1, -2, 2, 0, -1,
          -1, 1, 0, 0, 1, -1, 0, 0,
          -1, 1, 0, 0, 0, 0, 0, 0;
    return out;
  }();
  return s;
}

// Hazards are clamped at zero: the dimerisation hazard 0.05 X2 (X2 - 1) is
// negative for 0 < X2 < 1, which would make beta indefinite.
inline Vector autoreg_hazards(const Vector& x, const Vector& th, double c8) {
  Vector h(8);
  h << 0.1 * x(3) * x(2), th(0) * (10.0 - x(3)), th(1) * x(3), 0.2 * x(0), 0.05 * x(1) * (x(1) - 1.0),
      th(2) * x(2), th(3) * x(0), c8 * x(1);
  return h.cwiseMax(0.0);
}

inline Matrix autoreg_hazard_gradient(const Vector& x, const Vector& th, double c8) {
  Matrix g = Matrix::Zero(8, 4);
  Vector raw(8);
  raw << 0.1 * x(3) * x(2), th(0) * (10.0 - x(3)), th(1) * x(3), 0.2 * x(0), 0.05 * x(1) * (x(1) - 1.0),
      th(2) * x(2), th(3) * x(0), c8 * x(1);
  g(0, 2) = 0.1 * x(3);
  g(0, 3) = 0.1 * x(2);
  g(1, 3) = -th(0);
  g(2, 3) = th(1);
  g(3, 0) = 0.2;
  g(4, 1) = 0.05 * (2.0 * x(1) - 1.0);
  g(5, 2) = th(2);
  g(6, 0) = th(3);
  g(7, 1) = c8;
  for (int r = 0; r < 8; ++r) {
    if (raw(r) < 0.0) g.row(r).setZero();
  }
  return g;
}

}  // namespace detail

/**
 * Prokaryotic autoregulation (RNA, P, P2, DNA): alpha = S h, beta = S diag(h) S'.
 * Only theta1..theta4 are inferred; the rate of the eighth reaction is the
 * fixed constant c8, which has no agreed default and must be supplied.
 */
inline ModelSpec autoreg_model(double c8) {
  require(c8 >= 0.0 && std::isfinite(c8), ErrorKind::InvalidConfig, "autoreg rate constant c8 must be >= 0");
  ModelSpec spec;
  SdeModel& m = spec.model;
  m.name = "autoreg";
  m.dim = 4;
  m.n_params = 4;
  m.drift = [c8](const Vector& x, const Vector& th) -> Vector {
    return detail::autoreg_stoichiometry() * detail::autoreg_hazards(x, th, c8);
  };
  m.diffusion = [c8](const Vector& x, const Vector& th) -> Matrix {
    const Matrix& s = detail::autoreg_stoichiometry();
    return s * detail::autoreg_hazards(x, th, c8).asDiagonal() * s.transpose();
  };
  m.jacobian = [c8](const Vector& x, const Vector& th) -> Matrix {
    return detail::autoreg_stoichiometry() * detail::autoreg_hazard_gradient(x, th, c8);
  };
  m.lower = detail::nonnegative_lower(4);
  m.upper = detail::unbounded_upper(4);
  m.upper(3) = 10.0;
  spec.param_names = {"theta1", "theta2", "theta3", "theta4"};
  spec.log_scale = {true, true, true, true};
  spec.truth = Vector(4);
  spec.truth << 0.7, 0.35, 0.9, 0.3;
  spec.x0 = Vector(4);
  spec.x0 << 8.0, 8.0, 8.0, 5.0;
  Matrix sigma = Matrix::Zero(4, 4);
  sigma.diagonal() << 1.0, 1.0, 1.0, 0.25;
  spec.noise_variants = {sigma};
  spec.prior = ParameterPrior::independent_uniform(-5.0, 5.0);
  spec.default_n = 50;
  return spec;
}

inline std::vector<std::string> model_names() { return {"sqrt", "lv", "autoreg"}; }

// Registry used by the CLI; autoreg needs c8.
inline ModelSpec make_model(const std::string& name, std::optional<double> c8 = std::nullopt) {
  if (name == "sqrt") return square_root_model();
  if (name == "lv") return lotka_volterra_model();
  if (name == "autoreg") {
    require(c8.has_value(), ErrorKind::InvalidConfig, "model autoreg requires an explicit c8 value");
    return autoreg_model(*c8);
  }
  fail(ErrorKind::InvalidConfig, "unknown model '" + name + "' (expected sqrt, lv or autoreg)");
}

// Central-difference Jacobian of the drift, step 1e-5 (1 + |x_j|).
inline Matrix finite_difference_jacobian(const SdeModel& model, const Vector& x, const Vector& theta) {
  Matrix h(model.dim, model.dim);
  for (int j = 0; j < model.dim; ++j) {
    const double step = 1e-5 * (1.0 + std::abs(x(j)));
    Vector up = x, down = x;
    up(j) += step;
    down(j) -= step;
    h.col(j) = (model.drift(up, theta) - model.drift(down, theta)) / (2.0 * step);
  }
  return h;
}

inline Matrix drift_jacobian(const SdeModel& model, const Vector& x, const Vector& theta) {
  Matrix h = model.jacobian ? model.jacobian(x, theta) : finite_difference_jacobian(model, x, theta);
  if (!h.allFinite()) fail(ErrorKind::NonFiniteJacobian, "drift Jacobian is not finite");
  return h;
}

}  // namespace sdeinfer

#endif  // SDEINFER_MODELS_HPP
