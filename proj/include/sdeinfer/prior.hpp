#ifndef SDEINFER_PRIOR_HPP
#define SDEINFER_PRIOR_HPP

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "sdeinfer/errors.hpp"
#include "sdeinfer/linalg.hpp"

namespace sdeinfer {

/**
 * Prior on theta, expressed as a log-density of the working-scale vector
 * (log theta_i for log-scale components). Any Jacobian of the log transform
 * is already inside the density: a N(0, 10^2) prior "on log theta" is just a
 * normal density in the working coordinate.
 */
class ParameterPrior {
 public:
  using LogDensity = std::function<double(const Vector& work)>;

  ParameterPrior() = default;
  ParameterPrior(std::string label, LogDensity fn) : label_(std::move(label)), fn_(std::move(fn)) {}

  static ParameterPrior independent_normal(double mean, double sd) {
    require(sd > 0.0, ErrorKind::InvalidConfig, "prior sd must be positive");
    return ParameterPrior("normal(" + std::to_string(mean) + "," + std::to_string(sd) + ")",
                          [mean, sd](const Vector& w) {
                            double total = 0.0;
                            for (Eigen::Index i = 0; i < w.size(); ++i) {
                              const double z = (w(i) - mean) / sd;
                              total += -0.5 * (kLog2Pi + z * z) - std::log(sd);
                            }
                            return total;
                          });
  }

  static ParameterPrior independent_uniform(double lo, double hi) {
    require(hi > lo, ErrorKind::InvalidConfig, "uniform prior needs lo < hi");
    return ParameterPrior("uniform(" + std::to_string(lo) + "," + std::to_string(hi) + ")",
                          [lo, hi](const Vector& w) {
                            for (Eigen::Index i = 0; i < w.size(); ++i) {
                              if (!(w(i) >= lo && w(i) <= hi)) return kNegInf;
                            }
                            return -static_cast<double>(w.size()) * std::log(hi - lo);
                          });
  }

  // Improper flat prior; used by tests that isolate the likelihood.
  static ParameterPrior flat() {
    return ParameterPrior("flat", [](const Vector&) { return 0.0; });
  }

  double log_density(const Vector& work) const { return fn_ ? fn_(work) : 0.0; }
  bool in_support(const Vector& work) const { return log_density(work) > kNegInf; }
  const std::string& label() const { return label_; }

 private:
  std::string label_ = "flat";
  LogDensity fn_;
};

}  // namespace sdeinfer

#endif  // SDEINFER_PRIOR_HPP
