#ifndef SDEINFER_LINALG_HPP
#define SDEINFER_LINALG_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#include "sdeinfer/errors.hpp"

namespace sdeinfer {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double standard_normal_log_density(const Vector& u) {
  return -0.5 * (static_cast<double>(u.size()) * kLog2Pi + u.squaredNorm());
}

// log(sum exp(v)) with the max of the finite entries subtracted first; -inf
// entries are skipped. Summation runs in index order.
inline double log_sum_exp(std::span<const double> values) {
  double top = kNegInf;
  for (double v : values) {
    if (v > top) top = v;
  }
  if (top == kNegInf) return kNegInf;
  double acc = 0.0;
  for (double v : values) {
    if (v != kNegInf) acc += std::exp(v - top);
  }
  return top + std::log(acc);
}

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

inline double asymmetry(const Matrix& a) {
  return (a - a.transpose()).cwiseAbs().maxCoeff();
}

// Symmetric PSD square root with small negative eigenvalues clamped to zero.
// Used where the covariance may legitimately be singular (zero noise).
inline Matrix psd_sqrt(const Matrix& cov) {
  if (cov.rows() == 1) return Matrix::Constant(1, 1, std::sqrt(std::max(cov(0, 0), 0.0)));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(cov));
  Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

// Factorisation of a Gaussian covariance used both to draw correlated
// variates and to evaluate densities, so the two always agree.
//
// Jitter policy: on failure (non-finite, indefinite, or numerically singular)
// j = 1e-10 * trace/d is added to the diagonal, retried at 10j, 100j, 1000j,
// after which SingularCovariance is thrown.
class GaussianFactor {
 public:
  enum class Method { Spectral, Cholesky };

  static GaussianFactor spectral(const Matrix& cov) { return GaussianFactor(cov, Method::Spectral); }
  static GaussianFactor cholesky(const Matrix& cov) { return GaussianFactor(cov, Method::Cholesky); }

  int dim() const { return static_cast<int>(values_.size()); }
  double log_det() const { return log_det_; }
  double jitter() const { return jitter_; }
  Method method() const { return method_; }

  // log N(residual; 0, cov)
  double log_density(const Vector& residual) const {
    return -0.5 * (dim() * kLog2Pi + log_det_ + quad_form(residual));
  }

  double quad_form(const Vector& r) const {
    if (dim() == 1) return r(0) * r(0) / values_(0);
    if (method_ == Method::Spectral) {
      Vector z = basis_.transpose() * r;
      return (z.array().square() / values_.array()).sum();
    }
    Vector z = basis_.triangularView<Eigen::Lower>().solve(r);
    return z.squaredNorm();
  }

  // Returns R u with R R^T = cov; R is the symmetric root for the spectral method.
  Vector transform(const Vector& u) const {
    if (dim() == 1) return Vector::Constant(1, std::sqrt(values_(0)) * u(0));
    if (method_ == Method::Spectral) {
      Vector z = basis_.transpose() * u;
      z.array() *= values_.array().sqrt();
      return basis_ * z;
    }
    return basis_.triangularView<Eigen::Lower>() * u;
  }

  Vector solve(const Vector& b) const {
    if (dim() == 1) return b / values_(0);
    if (method_ == Method::Spectral) {
      Vector z = basis_.transpose() * b;
      z.array() /= values_.array();
      return basis_ * z;
    }
    Vector z = basis_.triangularView<Eigen::Lower>().solve(b);
    return basis_.transpose().triangularView<Eigen::Upper>().solve(z);
  }

  // Factor of c * cov, reusing this decomposition.
  GaussianFactor scaled(double c) const {
    GaussianFactor out = *this;
    if (method_ == Method::Spectral || dim() == 1) {
      out.values_ *= c;
    } else {
      out.basis_ *= std::sqrt(c);
      out.values_ *= c;
    }
    out.log_det_ = log_det_ + dim() * std::log(c);
    out.jitter_ = jitter_ * c;
    return out;
  }

  Matrix covariance() const {
    if (dim() == 1) return Matrix::Constant(1, 1, values_(0));
    if (method_ == Method::Spectral) return basis_ * values_.asDiagonal() * basis_.transpose();
    Matrix l = basis_.triangularView<Eigen::Lower>();
    return l * l.transpose();
  }

 private:
  GaussianFactor(const Matrix& cov, Method method) : method_(method) {
    require(cov.rows() == cov.cols() && cov.rows() > 0, ErrorKind::ShapeMismatch,
            "covariance must be square and non-empty");
    const int d = static_cast<int>(cov.rows());
    if (!cov.allFinite()) fail(ErrorKind::SingularCovariance, "covariance has non-finite entries");
    if (d == 1) {
      factor_scalar(cov(0, 0));
      return;
    }
    if (method_ == Method::Spectral) {
      factor_spectral(cov);
    } else {
      factor_cholesky(cov);
    }
  }

  static double base_jitter(const Matrix& cov) {
    return 1e-10 * cov.trace() / static_cast<double>(cov.rows());
  }

  static bool acceptable(double lo, double hi) { return hi > 0.0 && lo > 1e-15 * hi; }

  // For d = 1 the jitter scale is proportional to v itself, so a non-positive
  // variance can never be rescued.
  void factor_scalar(double v) {
    if (!(v > 0.0)) fail(ErrorKind::SingularCovariance, "zero or negative variance");
    values_ = Vector::Constant(1, v);
    log_det_ = std::log(v);
    basis_ = Matrix::Identity(1, 1);
  }

  void factor_spectral(const Matrix& cov) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(cov));
    const Vector& lam = eig.eigenvalues();
    double j = 0.0;
    if (!acceptable(lam.minCoeff(), lam.maxCoeff())) {
      const double base = base_jitter(cov);
      if (!(base > 0.0)) fail(ErrorKind::SingularCovariance, "covariance has zero trace");
      bool ok = false;
      for (int k = 0; k <= 3 && !ok; ++k) {
        j = base * std::pow(10.0, k);
        ok = acceptable(lam.minCoeff() + j, lam.maxCoeff() + j);
      }
      if (!ok) fail(ErrorKind::SingularCovariance, "covariance singular after jitter");
    }
    basis_ = eig.eigenvectors();
    values_ = lam.array() + j;
    jitter_ = j;
    log_det_ = values_.array().log().sum();
  }

  void factor_cholesky(const Matrix& cov) {
    const int d = static_cast<int>(cov.rows());
    Matrix sym = symmetrize(cov);
    double j = 0.0;
    for (int attempt = 0; attempt <= 4; ++attempt) {
      if (attempt > 0) {
        const double base = base_jitter(cov);
        if (!(base > 0.0)) break;
        j = base * std::pow(10.0, attempt - 1);
      }
      Eigen::LLT<Matrix> llt(sym + j * Matrix::Identity(d, d));
      if (llt.info() != Eigen::Success) continue;
      Vector diag = llt.matrixL().toDenseMatrix().diagonal();
      Vector sq = diag.array().square();
      if (!acceptable(sq.minCoeff(), sq.maxCoeff())) continue;
      basis_ = llt.matrixL();
      values_ = sq;
      jitter_ = j;
      log_det_ = 2.0 * diag.array().log().sum();
      return;
    }
    fail(ErrorKind::SingularCovariance, "covariance singular after jitter");
  }

  Method method_;
  Matrix basis_;
  Vector values_;
  double log_det_ = 0.0;
  double jitter_ = 0.0;
};

}  // namespace sdeinfer

#endif  // SDEINFER_LINALG_HPP
