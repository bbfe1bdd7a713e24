#ifndef SDEINFER_INNOVATIONS_HPP
#define SDEINFER_INNOVATIONS_HPP

#include "sdeinfer/errors.hpp"
#include "sdeinfer/linalg.hpp"
#include "sdeinfer/rng.hpp"

namespace sdeinfer {

// Standard-Gaussian variates driving N bridges over one interval.
// Layout: particle-major, then step, then component.
class InnovationBlock {
 public:
  InnovationBlock() = default;

  InnovationBlock(int particles, int steps, int dim) : particles_(particles), steps_(steps), dim_(dim) {
    require(particles >= 1 && steps >= 0 && dim >= 1, ErrorKind::ShapeMismatch, "invalid innovation block shape");
    values_ = Vector::Zero(static_cast<Eigen::Index>(particles) * steps * dim);
  }

  static InnovationBlock standard_normal(int particles, int steps, int dim, RngStream& rng) {
    InnovationBlock out(particles, steps, dim);
    for (Eigen::Index i = 0; i < out.values_.size(); ++i) out.values_(i) = rng.gaussian();
    return out;
  }

  int particles() const { return particles_; }
  int steps() const { return steps_; }
  int dim() const { return dim_; }
  Eigen::Index size() const { return values_.size(); }

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }

  // steps x dim view of one particle's variates.
  Eigen::Map<const RowMatrix> particle(int i) const {
    return Eigen::Map<const RowMatrix>(values_.data() + static_cast<Eigen::Index>(i) * steps_ * dim_, steps_, dim_);
  }

  bool same_shape(const InnovationBlock& other) const {
    return particles_ == other.particles_ && steps_ == other.steps_ && dim_ == other.dim_;
  }

 private:
  int particles_ = 0;
  int steps_ = 0;
  int dim_ = 0;
  Vector values_;
};

}  // namespace sdeinfer

#endif  // SDEINFER_INNOVATIONS_HPP
