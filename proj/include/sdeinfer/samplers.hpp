#ifndef SDEINFER_SAMPLERS_HPP
#define SDEINFER_SAMPLERS_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sdeinfer/importance.hpp"
#include "sdeinfer/particle_filter.hpp"
#include "sdeinfer/prior.hpp"

namespace sdeinfer {

// u' = rho u + sqrt(1 - rho^2) xi. Leaves N(0, I) invariant.
class CnKernel {
 public:
  explicit CnKernel(double rho = 0.0) : rho_(rho) {
    require(rho >= 0.0 && rho <= 1.0, ErrorKind::InvalidConfig, "rho must lie in [0, 1]");
    scale_ = std::sqrt(1.0 - rho * rho);
  }

  double rho() const { return rho_; }

  Vector propose(const Vector& u, RngStream& rng) const {
    Vector out(u.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) out(i) = rho_ * u(i) + scale_ * rng.gaussian();
    return out;
  }

 private:
  double rho_;
  double scale_ = 1.0;
};

// Gaussian random walk x' = x + Omega^{1/2} z; symmetric, so q cancels.
class RwmProposal {
 public:
  RwmProposal() = default;

  explicit RwmProposal(Matrix omega) : omega_(std::move(omega)) {
    require(omega_.rows() == omega_.cols() && omega_.rows() >= 1, ErrorKind::ShapeMismatch,
            "proposal covariance must be square");
    require(omega_.allFinite() && asymmetry(omega_) <= 1e-12 * (1.0 + omega_.cwiseAbs().maxCoeff()),
            ErrorKind::NotPSD, "proposal covariance must be symmetric");
    if (omega_.rows() > 1) {
      Eigen::SelfAdjointEigenSolver<Matrix> eig(omega_, Eigen::EigenvaluesOnly);
      require(eig.eigenvalues().minCoeff() >= -1e-12 * (1.0 + omega_.cwiseAbs().maxCoeff()), ErrorKind::NotPSD,
              "proposal covariance must be PSD");
    } else {
      require(omega_(0, 0) >= 0.0, ErrorKind::NotPSD, "proposal variance must be non-negative");
    }
    root_ = psd_sqrt(omega_);
  }

  static RwmProposal diagonal(const Vector& variances) { return RwmProposal(Matrix(variances.asDiagonal())); }

  int dim() const { return static_cast<int>(omega_.rows()); }
  const Matrix& omega() const { return omega_; }

  Vector propose(const Vector& x, RngStream& rng) const { return x + root_ * rng.gaussian_vector(dim()); }

 private:
  Matrix omega_;
  Matrix root_;
};

struct AcceptanceCounter {
  std::string name;
  long long proposed = 0;
  long long accepted = 0;

  void record(bool ok) {
    ++proposed;
    if (ok) ++accepted;
  }
  double rate() const { return proposed ? static_cast<double>(accepted) / proposed : 0.0; }
};

struct ChainOutput {
  Matrix theta;                 // n_iters x p, natural scale
  std::vector<double> log_lik;  // current log-likelihood (estimate) after each iteration
  Matrix x_trace;               // n_iters x (n d) for augmented samplers, row-major per time; empty otherwise
  std::vector<AcceptanceCounter> acceptance;
  double seconds = 0.0;

  const AcceptanceCounter* counter(const std::string& name) const {
    for (const auto& c : acceptance) {
      if (c.name == name) return &c;
    }
    return nullptr;
  }
};

// Unbiased likelihood estimator seen as a function of (theta, N, u).
struct LikelihoodEstimator {
  std::function<Eigen::Index(int particles)> aux_size;
  std::function<double(const Vector& theta, int particles, const Vector& u)> log_estimate;
};

inline LikelihoodEstimator filter_estimator(const SdeModel& model, const ObservationModel& obs,
                                            const InitialDistribution& prior_x0, const Matrix& data,
                                            const TimeGrid& grid, bool sort, WorkerPool* pool = nullptr) {
  LikelihoodEstimator est;
  const int n = grid.n(), m = grid.m(), d = model.dim;
  est.aux_size = [n, m, d](int particles) { return AuxiliaryVariates::total_size(n, particles, m, d); };
  est.log_estimate = [&model, &obs, prior_x0, data, grid, sort, pool](const Vector& theta, int particles,
                                                                      const Vector& u) {
    AuxiliaryVariates aux = AuxiliaryVariates::from_values(grid.n(), particles, grid.m(), model.dim, u);
    return run_filter(model, obs, prior_x0, data, theta, grid, aux, {sort, pool});
  };
  return est;
}

// Stream tags; every random draw in a sampler comes from
// root.derive({iteration, tag, index}) so that accept/reject outcomes never
// shift later draws and parallel sweeps see the same numbers as serial ones.
enum class StreamTag : std::uint64_t { Init = 1, Theta = 2, Aux = 3, Accept = 4, State = 5, Endpoint = 6 };

inline RngStream stream(const RngStream& root, long long iteration, StreamTag tag, long long index = 0) {
  return root.derive({static_cast<std::uint64_t>(iteration), static_cast<std::uint64_t>(tag),
                      static_cast<std::uint64_t>(index)});
}

inline bool mh_accept(double log_ratio, RngStream& rng) {
  if (std::isnan(log_ratio) || log_ratio == kNegInf) return false;
  if (log_ratio >= 0.0) return true;
  return std::log(rng.uniform()) < log_ratio;
}

struct PmmhOptions {
  int particles = 1;
  int n_iters = 1000;
  double rho = 0.0;  // 0 gives PMMH (fresh u every step)
};

/**
 * Correlated pseudo-marginal MH on (theta, u): theta' ~ q(.|theta),
 * u' ~ K(.|u), accepted jointly with probability
 *   min{1, pi(theta') p_u'(y|theta') / (pi(theta) p_u(y|theta))}.
 * theta is proposed on the working scale, where the prior density lives.
 */
inline ChainOutput cpmmh_run(const LikelihoodEstimator& estimator, const ParameterPrior& prior, const ParamVector& theta0,
                             const RwmProposal& proposal, const PmmhOptions& options, const RngStream& root) {
  require(options.n_iters >= 1, ErrorKind::InvalidConfig, "n_iters must be positive");
  require(options.particles >= 1, ErrorKind::InvalidConfig, "need at least one particle");
  require(proposal.dim() == theta0.size(), ErrorKind::ShapeMismatch, "proposal dimension must match theta");
  const CnKernel kernel(options.rho);
  const Eigen::Index aux = estimator.aux_size(options.particles);
  require(prior.in_support(theta0.work()), ErrorKind::InvalidConfig, "initial theta outside prior support");

  ParamVector theta = theta0;
  Vector u;
  double log_lik = kNegInf;
  for (int attempt = 0; attempt < 100 && log_lik == kNegInf; ++attempt) {
    RngStream rng = stream(root, 0, StreamTag::Init, attempt);
    u = rng.gaussian_vector(aux);
    log_lik = estimator.log_estimate(theta.natural(), options.particles, u);
  }
  if (log_lik == kNegInf) fail(ErrorKind::InitFailure, "initial likelihood estimate is zero after 100 draws of u");
  double log_prior = prior.log_density(theta.work());

  ChainOutput out;
  out.theta.resize(options.n_iters, theta.size());
  out.log_lik.reserve(options.n_iters);
  AcceptanceCounter counter{"theta"};
  const auto start = std::chrono::steady_clock::now();
  for (int it = 1; it <= options.n_iters; ++it) {
    RngStream theta_rng = stream(root, it, StreamTag::Theta);
    RngStream aux_rng = stream(root, it, StreamTag::Aux);
    RngStream accept_rng = stream(root, it, StreamTag::Accept);
    const Vector work = proposal.propose(theta.work(), theta_rng);
    const Vector u_prop = kernel.propose(u, aux_rng);
    const double prior_prop = prior.log_density(work);
    bool accepted = false;
    if (prior_prop > kNegInf) {
      ParamVector candidate = ParamVector::from_work(work, theta.log_scale());
      const double ll_prop = estimator.log_estimate(candidate.natural(), options.particles, u_prop);
      if (mh_accept(prior_prop - log_prior + ll_prop - log_lik, accept_rng)) {
        theta = std::move(candidate);
        u = u_prop;
        log_lik = ll_prop;
        log_prior = prior_prop;
        accepted = true;
      }
    }
    counter.record(accepted);
    out.theta.row(it - 1) = theta.natural().transpose();
    out.log_lik.push_back(log_lik);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.acceptance.push_back(counter);
  return out;
}

inline ChainOutput pmmh_run(const LikelihoodEstimator& estimator, const ParameterPrior& prior, const ParamVector& theta0,
                            const RwmProposal& proposal, int particles, int n_iters, const RngStream& root) {
  return cpmmh_run(estimator, prior, theta0, proposal, {particles, n_iters, 0.0}, root);
}

// ---------------------------------------------------------------------------
// Augmented scheme: Gibbs over theta and (x_t, u_{t-1}, u_t).

struct OddEvenSchedule {
  std::vector<int> odd;
  std::vector<int> even;
  int endpoint = 0;
};

// Interior times split by parity; the last time is always the endpoint move.
inline OddEvenSchedule odd_even_schedule(int n) {
  require(n >= 1, ErrorKind::InvalidConfig, "need n >= 1");
  OddEvenSchedule s;
  for (int t = 1; t <= n - 1; ++t) (t % 2 ? s.odd : s.even).push_back(t);
  s.endpoint = n;
  return s;
}

struct AcpmmhProblem {
  const SdeModel* model = nullptr;
  const ObservationModel* obs = nullptr;
  InitialDistribution prior_x0 = InitialDistribution::point_mass(Vector::Zero(1));
  Matrix data;  // n x d_o
  TimeGrid grid{1, 1};
  ParameterPrior prior;
};

struct AcpmmhProposals {
  RwmProposal theta;
  std::vector<RwmProposal> x;  // one per time 1..n (index t-1)
};

struct AcpmmhOptions {
  int particles = 1;
  double rho = 0.99;
  int n_iters = 1000;
  int workers = 1;
  bool keep_trace = true;
  long long first_iteration = 1;  // stream index of the first iteration (for runs continued in batches)
};

struct AcpmmhState {
  ParamVector theta;
  Matrix x_o;                        // row t-1 holds x_t
  std::vector<InnovationBlock> u;    // u[t] drives interval t (t = 0 is the initial term)
  Vector log_est;                    // per-interval log estimates
  Vector log_obs;                    // log p(y_t | x_t), index t-1
  double log_prior = 0.0;

  double log_target() const { return log_prior + sum_log_estimates(log_est) + log_obs.sum(); }
};

class AcpmmhSampler {
 public:
  AcpmmhSampler(AcpmmhProblem problem, AcpmmhProposals proposals, AcpmmhOptions options)
      : p_(std::move(problem)), q_(std::move(proposals)), opt_(options), kernel_(options.rho),
        pool_(options.workers > 1 ? std::make_unique<WorkerPool>(options.workers) : nullptr) {
    require(p_.model && p_.obs, ErrorKind::InvalidConfig, "model and observation model required");
    require(opt_.particles >= 1, ErrorKind::InvalidConfig, "need at least one importance sample");
    require(p_.data.rows() == p_.grid.n() && p_.data.cols() == p_.obs->obs_dim(), ErrorKind::ShapeMismatch,
            "data must be n x d_o");
    require(q_.theta.dim() == p_.model->n_params, ErrorKind::ShapeMismatch, "theta proposal dimension");
    require(static_cast<int>(q_.x.size()) == p_.grid.n(), ErrorKind::ShapeMismatch, "need one x proposal per time");
    for (const auto& q : q_.x) require(q.dim() == p_.model->dim, ErrorKind::ShapeMismatch, "x proposal dimension");
    p_.obs->factor();  // augmented target needs p(y|x); throws SingularCovariance otherwise
  }

  // Used by pilot runs that rescale proposals between batches.
  void set_proposals(AcpmmhProposals proposals) {
    require(proposals.theta.dim() == q_.theta.dim() && proposals.x.size() == q_.x.size(), ErrorKind::ShapeMismatch,
            "replacement proposals have the wrong shape");
    q_ = std::move(proposals);
  }
  void set_iterations(long long first, int count) {
    opt_.first_iteration = first;
    opt_.n_iters = count;
  }

  const AcpmmhProposals& proposals() const { return q_; }
  const AcpmmhProblem& problem() const { return p_; }
  const AcpmmhOptions& options() const { return opt_; }
  WorkerPool* pool() const { return pool_.get(); }

  int n() const { return p_.grid.n(); }

  TransitionEstimate interval_estimate(const Vector& theta, const Matrix& x_o, int t, const InnovationBlock& u) const {
    return estimate_interval(*p_.model, p_.prior_x0, x_o, theta, p_.grid, t, u);
  }

  double obs_term(const Vector& x_t, int t) const {
    if (!p_.model->in_domain(x_t)) return kNegInf;
    return obs_log_density(p_.data.row(t - 1).transpose(), x_t, *p_.obs);
  }

  // Fills u and the caches from (theta, x_o). Intervals are independent given
  // x_o, so each interval's block is redrawn (up to 100 times) until its
  // estimate is non-zero.
  AcpmmhState initialise(const ParamVector& theta0, const Matrix& x_o0, const RngStream& root) const {
    require(x_o0.rows() == n() && x_o0.cols() == p_.model->dim, ErrorKind::ShapeMismatch, "x^o must be n x d");
    require(x_o0.allFinite(), ErrorKind::InvalidConfig, "initial x^o must be finite");
    AcpmmhState s;
    s.theta = theta0;
    s.x_o = x_o0;
    s.log_prior = p_.prior.log_density(theta0.work());
    require(s.log_prior > kNegInf, ErrorKind::InvalidConfig, "initial theta outside prior support");
    s.log_obs.resize(n());
    for (int t = 1; t <= n(); ++t) s.log_obs(t - 1) = obs_term(x_o0.row(t - 1).transpose(), t);
    if (!std::isfinite(s.log_obs.sum())) fail(ErrorKind::InitFailure, "initial x^o has zero observation density");
    const int d = p_.model->dim, m = p_.grid.m();
    s.u.assign(n(), InnovationBlock());
    s.log_est.resize(n());
    std::vector<char> ok(n(), 0);
    for_each_index(pool_.get(), static_cast<std::size_t>(n()), [&](std::size_t ti) {
      const int t = static_cast<int>(ti);
      for (int attempt = 0; attempt < 100 && !ok[t]; ++attempt) {
        RngStream rng = stream(root, 0, StreamTag::Init, static_cast<long long>(attempt) * n() + t);
        s.u[t] = InnovationBlock::standard_normal(opt_.particles, t == 0 ? m : m - 1, d, rng);
        s.log_est(t) = interval_estimate(s.theta.natural(), s.x_o, t, s.u[t]).log_value;
        ok[t] = s.log_est(t) > kNegInf;
      }
    });
    for (int t = 0; t < n(); ++t) {
      if (!ok[t]) {
        fail(ErrorKind::InitFailure, "estimate for interval " + std::to_string(t) + " is zero after 100 draws of u");
      }
    }
    return s;
  }

  /**
   * log acceptance ratio for theta' with u and x^o held fixed:
   *   pi(theta')/pi(theta) * p_u(x^o|theta')/p_u(x^o|theta) * p(y|x^o,theta')/p(y|x^o,theta).
   * The proposal is symmetric on the working scale. New per-interval
   * estimates are written to est_out.
   */
  double theta_log_ratio(const AcpmmhState& s, const ParamVector& candidate, Vector* est_out) const {
    const double prior_prop = p_.prior.log_density(candidate.work());
    if (prior_prop == kNegInf) return kNegInf;
    Vector est = estimate_joint(*p_.model, s.x_o, p_.prior_x0, candidate.natural(), p_.grid, s.u, pool_.get());
    const double total = sum_log_estimates(est);
    if (est_out) *est_out = std::move(est);
    if (total == kNegInf) return kNegInf;
    // p(y | x^o) does not depend on theta for the shipped observation models.
    return prior_prop - s.log_prior + total - sum_log_estimates(s.log_est);
  }

  bool theta_update(AcpmmhState& s, long long iteration, const RngStream& root) const {
    RngStream rng = stream(root, iteration, StreamTag::Theta);
    RngStream accept_rng = stream(root, iteration, StreamTag::Accept);
    ParamVector candidate = ParamVector::from_work(q_.theta.propose(s.theta.work(), rng), s.theta.log_scale());
    Vector est;
    const double ratio = theta_log_ratio(s, candidate, &est);
    if (!mh_accept(ratio, accept_rng)) return false;
    s.log_prior = p_.prior.log_density(candidate.work());
    s.theta = std::move(candidate);
    s.log_est = std::move(est);
    return true;
  }

  struct XProposal {
    Vector x;
    InnovationBlock u_prev;   // u'_{t-1}
    InnovationBlock u_next;   // u'_t (unused for the endpoint)
    double est_prev = kNegInf;
    double est_next = kNegInf;
    double obs = kNegInf;
    double log_ratio = kNegInf;
  };

  /**
   * Proposal and log acceptance ratio for (x_t, u_{t-1}, u_t), 1 <= t <= n.
   * For t = n only interval n-1 is involved. CN terms cancel against p(u).
   */
  XProposal propose_x(const AcpmmhState& s, int t, RngStream& rng) const {
    const int last = n();
    XProposal prop;
    prop.x = q_.x[t - 1].propose(s.x_o.row(t - 1).transpose(), rng);
    prop.u_prev = s.u[t - 1];
    prop.u_prev.values() = kernel_.propose(s.u[t - 1].values(), rng);
    if (t < last) {
      prop.u_next = s.u[t];
      prop.u_next.values() = kernel_.propose(s.u[t].values(), rng);
    }
    if (!p_.model->in_domain(prop.x)) return prop;
    const Vector& theta = s.theta.natural();
    if (t == 1) {
      prop.est_prev = estimate_initial(*p_.model, p_.prior_x0, prop.x, theta, p_.grid, prop.u_prev).log_value;
    } else {
      prop.est_prev =
          estimate_transition(*p_.model, s.x_o.row(t - 2).transpose(), prop.x, theta, p_.grid, t - 1, prop.u_prev)
              .log_value;
    }
    if (prop.est_prev == kNegInf) return prop;
    double current = s.log_est(t - 1);
    double proposed = prop.est_prev;
    if (t < last) {
      prop.est_next =
          estimate_transition(*p_.model, prop.x, s.x_o.row(t).transpose(), theta, p_.grid, t, prop.u_next).log_value;
      if (prop.est_next == kNegInf) return prop;
      current += s.log_est(t);
      proposed += prop.est_next;
    }
    prop.obs = obs_term(prop.x, t);
    if (prop.obs == kNegInf) return prop;
    prop.log_ratio = proposed - current + prop.obs - s.log_obs(t - 1);
    return prop;
  }

  bool x_update(AcpmmhState& s, int t, long long iteration, const RngStream& root) const {
    const StreamTag tag = t == n() ? StreamTag::Endpoint : StreamTag::State;
    RngStream rng = stream(root, iteration, tag, t);
    XProposal prop = propose_x(s, t, rng);
    if (!mh_accept(prop.log_ratio, rng)) return false;
    s.x_o.row(t - 1) = prop.x.transpose();
    s.u[t - 1] = std::move(prop.u_prev);
    s.log_est(t - 1) = prop.est_prev;
    if (t < n()) {
      s.u[t] = std::move(prop.u_next);
      s.log_est(t) = prop.est_next;
    }
    s.log_obs(t - 1) = prop.obs;
    return true;
  }

  bool endpoint_update(AcpmmhState& s, long long iteration, const RngStream& root) const {
    return x_update(s, n(), iteration, root);
  }

  // Runs one sweep; members touch disjoint rows and caches, so they may run concurrently.
  int sweep(AcpmmhState& s, const std::vector<int>& times, long long iteration, const RngStream& root) const {
    std::vector<char> accepted(times.size(), 0);
    for_each_index(pool_.get(), times.size(),
                   [&](std::size_t i) { accepted[i] = x_update(s, times[i], iteration, root) ? 1 : 0; });
    int total = 0;
    for (char a : accepted) total += a;
    return total;
  }

  // Recomputes every cache from (theta, x^o, u); true when all match bit for bit.
  bool caches_coherent(const AcpmmhState& s) const {
    Vector est = estimate_joint(*p_.model, s.x_o, p_.prior_x0, s.theta.natural(), p_.grid, s.u);
    if (!(est.array() == s.log_est.array()).all()) return false;
    for (int t = 1; t <= n(); ++t) {
      if (obs_term(s.x_o.row(t - 1).transpose(), t) != s.log_obs(t - 1)) return false;
    }
    return s.log_prior == p_.prior.log_density(s.theta.work());
  }

  ChainOutput run(AcpmmhState& s, const RngStream& root) const {
    require(opt_.n_iters >= 1, ErrorKind::InvalidConfig, "n_iters must be positive");
    const OddEvenSchedule schedule = odd_even_schedule(n());
    ChainOutput out;
    out.theta.resize(opt_.n_iters, s.theta.size());
    out.log_lik.reserve(opt_.n_iters);
    const int width = n() * p_.model->dim;
    if (opt_.keep_trace) out.x_trace.resize(opt_.n_iters, width);
    AcceptanceCounter theta_c{"theta"}, x_c{"x"}, end_c{"x_end"};
    const auto start = std::chrono::steady_clock::now();
    for (int row = 0; row < opt_.n_iters; ++row) {
      const long long it = opt_.first_iteration + row;
      theta_c.record(theta_update(s, it, root));
      for (const auto* group : {&schedule.odd, &schedule.even}) {
        const int acc = sweep(s, *group, it, root);
        x_c.proposed += static_cast<long long>(group->size());
        x_c.accepted += acc;
      }
      end_c.record(endpoint_update(s, it, root));
      out.theta.row(row) = s.theta.natural().transpose();
      out.log_lik.push_back(sum_log_estimates(s.log_est) + s.log_obs.sum());
      if (opt_.keep_trace) {
        for (int t = 0; t < n(); ++t) out.x_trace.block(row, t * p_.model->dim, 1, p_.model->dim) = s.x_o.row(t);
      }
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.acceptance = {theta_c, x_c, end_c};
    return out;
  }

 private:
  AcpmmhProblem p_;
  AcpmmhProposals q_;
  AcpmmhOptions opt_;
  CnKernel kernel_;
  std::unique_ptr<WorkerPool> pool_;
};

inline ChainOutput acpmmh_run(const AcpmmhProblem& problem, const AcpmmhProposals& proposals,
                              const AcpmmhOptions& options, const ParamVector& theta0, const Matrix& x_o0,
                              const RngStream& root, AcpmmhState* final_state = nullptr) {
  AcpmmhSampler sampler(problem, proposals, options);
  AcpmmhState state = sampler.initialise(theta0, x_o0, root);
  ChainOutput out = sampler.run(state, root);
  if (final_state) *final_state = std::move(state);
  return out;
}

}  // namespace sdeinfer

#endif  // SDEINFER_SAMPLERS_HPP
