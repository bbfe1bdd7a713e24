#ifndef SDEINFER_EXPERIMENT_HPP
#define SDEINFER_EXPERIMENT_HPP

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sdeinfer/diagnostics.hpp"
#include "sdeinfer/tuning.hpp"

namespace sdeinfer {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Text helpers. Numbers are written with 17 significant digits so that every
// double round-trips exactly.

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

inline double parse_double(const std::string& s, ErrorKind kind = ErrorKind::InvalidConfig) {
  const std::string t = trim(s);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size()) fail(kind, "not a number: '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& s, ErrorKind kind = ErrorKind::InvalidConfig) {
  const std::string t = trim(s);
  char* end = nullptr;
  const long long v = std::strtoll(t.c_str(), &end, 10);
  if (t.empty() || end != t.c_str() + t.size()) fail(kind, "not an integer: '" + s + "'");
  return v;
}

inline Vector parse_vector(const std::string& s) {
  std::vector<std::string> parts = split(s, ',');
  Vector out(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) out(i) = parse_double(parts[i]);
  return out;
}

inline std::string join(const Vector& v) {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v(i));
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// key = value lines; '#' starts a comment.
inline std::map<std::string, std::string> read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoFailure, "cannot open " + path);
  std::map<std::string, std::string> out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::InvalidConfig, path + ":" + std::to_string(number) + ": expected key = value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoFailure, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorKind::IoFailure, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::string model = "sqrt";
  std::optional<double> c8;
  std::optional<Vector> theta;  // ground truth for simulate, initial value for run
  std::optional<Vector> x0;
  int noise = 0;                  // index into the model's standard noise settings
  std::optional<double> obs_sd;   // Sigma = sd^2 I, overrides noise
  std::vector<int> observe;       // observed components (0-based); empty = all
  std::optional<int> n;
  int m = 5;
  double sim_delta_tau = 0.001;
  std::string sampler = "acpmmh";
  std::optional<double> rho;
  std::optional<int> particles;  // empty = auto
  bool sort = true;
  int n_iters = 1000;
  int thin = 1;
  int x_thin = 10;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string tuning = "none";
  std::optional<int> pilot_iters;
  double pilot_fraction = 0.1;
  double x_target = 0.25;
  int lna_steps = 20;
  int max_particles = 1024;
  std::string output = "out";
  std::string data;
  std::optional<Vector> omega_theta;  // p x p, row-major
  std::optional<Vector> init_x;       // n x d, row-major
  std::optional<Vector> omega_x;      // n blocks of d x d

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = {
        "model", "c8", "theta", "x0", "noise", "obs_sd", "observe", "n", "m", "delta_tau", "sim_delta_tau",
        "sampler", "rho", "particles", "sort", "n_iters", "thin", "x_thin", "seed", "workers", "tuning",
        "pilot_iters", "pilot_fraction", "x_target", "lna_steps", "max_particles", "output", "data",
        "omega_theta", "init_x", "omega_x"};
    return k;
  }

  static ExperimentConfig from_map(const std::map<std::string, std::string>& kv) {
    ExperimentConfig c;
    for (const auto& [key, raw] : kv) {
      const std::string v = trim(raw);
      if (key == "model") c.model = v;
      else if (key == "c8") c.c8 = parse_double(v);
      else if (key == "theta") c.theta = parse_vector(v);
      else if (key == "x0") c.x0 = parse_vector(v);
      else if (key == "noise") c.noise = static_cast<int>(parse_int(v));
      else if (key == "obs_sd") c.obs_sd = parse_double(v);
      else if (key == "observe") {
        c.observe.clear();
        if (!v.empty()) {
          for (const auto& p : split(v, ',')) c.observe.push_back(static_cast<int>(parse_int(p)));
        }
      } else if (key == "n") c.n = static_cast<int>(parse_int(v));
      else if (key == "m") c.m = static_cast<int>(parse_int(v));
      else if (key == "delta_tau") {
        const double dt = parse_double(v);
        require(dt > 0.0 && dt <= 1.0, ErrorKind::InvalidConfig, "delta_tau must lie in (0, 1]");
        const double steps = 1.0 / dt;
        require(std::abs(steps - std::round(steps)) < 1e-9 * steps, ErrorKind::InvalidConfig,
                "delta_tau must be 1/m for an integer m");
        c.m = static_cast<int>(std::round(steps));
      } else if (key == "sim_delta_tau") c.sim_delta_tau = parse_double(v);
      else if (key == "sampler") c.sampler = v;
      else if (key == "rho") c.rho = parse_double(v);
      else if (key == "particles") {
        if (v == "auto") c.particles.reset();
        else c.particles = static_cast<int>(parse_int(v));
      } else if (key == "sort") {
        require(v == "true" || v == "false" || v == "1" || v == "0", ErrorKind::InvalidConfig, "sort must be true or false");
        c.sort = v == "true" || v == "1";
      } else if (key == "n_iters") c.n_iters = static_cast<int>(parse_int(v));
      else if (key == "thin") c.thin = static_cast<int>(parse_int(v));
      else if (key == "x_thin") c.x_thin = static_cast<int>(parse_int(v));
      else if (key == "seed") {
        const long long s = parse_int(v);
        require(s >= 0, ErrorKind::InvalidConfig, "seed must be non-negative");
        c.seed = static_cast<std::uint64_t>(s);
      } else if (key == "workers") c.workers = static_cast<int>(parse_int(v));
      else if (key == "tuning") c.tuning = v;
      else if (key == "pilot_iters") c.pilot_iters = static_cast<int>(parse_int(v));
      else if (key == "pilot_fraction") c.pilot_fraction = parse_double(v);
      else if (key == "x_target") c.x_target = parse_double(v);
      else if (key == "lna_steps") c.lna_steps = static_cast<int>(parse_int(v));
      else if (key == "max_particles") c.max_particles = static_cast<int>(parse_int(v));
      else if (key == "output") c.output = v;
      else if (key == "data") c.data = v;
      else if (key == "omega_theta") c.omega_theta = parse_vector(v);
      else if (key == "init_x") c.init_x = parse_vector(v);
      else if (key == "omega_x") c.omega_x = parse_vector(v);
      else fail(ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
    }
    return c;
  }

  // Canonical key = value form. Keys that cannot change the chains (workers,
  // output location) are left out when hashing.
  std::map<std::string, std::string> to_map(bool for_hash = false) const {
    std::map<std::string, std::string> kv;
    kv["model"] = model;
    if (c8) kv["c8"] = format_double(*c8);
    if (theta) kv["theta"] = join(*theta);
    if (x0) kv["x0"] = join(*x0);
    kv["noise"] = std::to_string(noise);
    if (obs_sd) kv["obs_sd"] = format_double(*obs_sd);
    if (!observe.empty()) {
      std::string s;
      for (std::size_t i = 0; i < observe.size(); ++i) s += (i ? "," : "") + std::to_string(observe[i]);
      kv["observe"] = s;
    }
    if (n) kv["n"] = std::to_string(*n);
    kv["m"] = std::to_string(m);
    kv["sim_delta_tau"] = format_double(sim_delta_tau);
    kv["sampler"] = sampler;
    if (rho) kv["rho"] = format_double(*rho);
    kv["particles"] = particles ? std::to_string(*particles) : "auto";
    kv["sort"] = sort ? "true" : "false";
    kv["n_iters"] = std::to_string(n_iters);
    kv["thin"] = std::to_string(thin);
    kv["x_thin"] = std::to_string(x_thin);
    if (seed) kv["seed"] = std::to_string(*seed);
    kv["tuning"] = tuning;
    if (pilot_iters) kv["pilot_iters"] = std::to_string(*pilot_iters);
    kv["pilot_fraction"] = format_double(pilot_fraction);
    kv["x_target"] = format_double(x_target);
    kv["lna_steps"] = std::to_string(lna_steps);
    kv["max_particles"] = std::to_string(max_particles);
    if (omega_theta) kv["omega_theta"] = join(*omega_theta);
    if (init_x) kv["init_x"] = join(*init_x);
    if (omega_x) kv["omega_x"] = join(*omega_x);
    if (!for_hash) {
      kv["workers"] = std::to_string(workers);
      kv["output"] = output;
      if (!data.empty()) kv["data"] = data;
    }
    return kv;
  }

  std::string canonical(bool for_hash = false) const {
    std::string out;
    for (const auto& [k, v] : to_map(for_hash)) out += k + " = " + v + "\n";
    return out;
  }

  std::string hash() const { return hex(fnv1a(canonical(true))); }

  double effective_rho() const {
    if (rho) return *rho;
    return sampler == "pmmh" ? 0.0 : 0.99;
  }

  int effective_pilot_iters() const {
    return pilot_iters ? *pilot_iters : static_cast<int>(std::floor(pilot_fraction * n_iters));
  }

  void validate() const {
    require(seed.has_value(), ErrorKind::InvalidConfig, "a seed is required");
    require(sampler == "pmmh" || sampler == "cpmmh" || sampler == "acpmmh" || sampler == "lna-mh",
            ErrorKind::InvalidConfig, "sampler must be one of pmmh, cpmmh, acpmmh, lna-mh");
    require(tuning == "1" || tuning == "2" || tuning == "none", ErrorKind::InvalidConfig, "tuning must be 1, 2 or none");
    const double r = effective_rho();
    require(r >= 0.0 && r <= 1.0, ErrorKind::InvalidConfig, "rho must lie in [0, 1]");
    require(sampler != "pmmh" || r == 0.0, ErrorKind::InvalidConfig, "pmmh uses rho = 0");
    require(m >= 1, ErrorKind::InvalidConfig, "m must be positive");
    require(n_iters >= 1, ErrorKind::InvalidConfig, "n_iters must be positive");
    require(thin >= 1 && x_thin >= 1, ErrorKind::InvalidConfig, "thinning must be positive");
    require(workers >= 1, ErrorKind::InvalidConfig, "workers must be positive");
    require(!particles || *particles >= 1, ErrorKind::InvalidConfig, "particles must be positive or auto");
    require(sim_delta_tau > 0.0 && sim_delta_tau <= 1.0, ErrorKind::InvalidConfig, "sim_delta_tau must lie in (0, 1]");
    require(pilot_fraction > 0.0 && pilot_fraction <= 1.0, ErrorKind::InvalidConfig, "pilot_fraction must lie in (0, 1]");
    require(x_target > 0.0 && x_target < 1.0, ErrorKind::InvalidConfig, "x_target must lie in (0, 1)");
    require(lna_steps >= 1 && max_particles >= 1, ErrorKind::InvalidConfig, "lna_steps and max_particles must be positive");
    if (tuning != "none") {
      const int pilot = effective_pilot_iters();
      require(pilot >= 2, ErrorKind::InvalidConfig, "pilot run needs at least two iterations");
      require(pilot <= pilot_fraction * n_iters + 1e-9, ErrorKind::InvalidConfig,
              "pilot_iters exceeds pilot_fraction of n_iters");
    }
  }
};

inline ExperimentConfig load_config(const std::string& path) { return ExperimentConfig::from_map(read_key_values(path)); }

// Everything derived from a config that the commands need.
struct Experiment {
  ExperimentConfig config;
  ModelSpec spec;
  std::optional<ObservationModel> obs;
  InitialDistribution prior_x0 = InitialDistribution::point_mass(Vector::Zero(1));
  int n = 0;

  explicit Experiment(ExperimentConfig c) : config(std::move(c)), spec(make_model(config.model, config.c8)) {
    const int d = spec.model.dim;
    if (config.theta) {
      require(config.theta->size() == spec.model.n_params, ErrorKind::ShapeMismatch, "theta has the wrong length");
    }
    Vector x0 = config.x0 ? *config.x0 : spec.x0;
    require(x0.size() == d, ErrorKind::ShapeMismatch, "x0 has the wrong length");
    prior_x0 = InitialDistribution::point_mass(x0);
    Matrix sigma;
    if (config.obs_sd) {
      require(*config.obs_sd >= 0.0, ErrorKind::InvalidConfig, "obs_sd must be non-negative");
      sigma = Matrix::Identity(d, d) * (*config.obs_sd) * (*config.obs_sd);
    } else {
      require(config.noise >= 0 && config.noise < static_cast<int>(spec.noise_variants.size()), ErrorKind::InvalidConfig,
              "noise index out of range for " + spec.model.name);
      sigma = spec.noise_variants[config.noise];
    }
    if (config.observe.empty()) {
      obs.emplace(Matrix::Identity(d, d), sigma);
    } else {
      const int k = static_cast<int>(config.observe.size());
      Matrix f = Matrix::Zero(d, k), s(k, k);
      for (int j = 0; j < k; ++j) {
        require(config.observe[j] >= 0 && config.observe[j] < d, ErrorKind::InvalidConfig, "observed component out of range");
        f(config.observe[j], j) = 1.0;
        for (int i = 0; i < k; ++i) s(i, j) = sigma(config.observe[i], config.observe[j]);
      }
      obs.emplace(f, s);
    }
    n = config.n ? *config.n : spec.default_n;
    require(n >= 1, ErrorKind::InvalidConfig, "n must be positive");
  }

  Vector theta() const { return config.theta ? *config.theta : spec.truth; }
  TimeGrid grid() const { return TimeGrid(n, config.m); }
};

// ---------------------------------------------------------------------------
// Data files: header "t,y_1,...,y_k", one row per observation time.

inline std::string data_to_csv(const Matrix& y) {
  std::string out = "t";
  for (Eigen::Index j = 0; j < y.cols(); ++j) out += ",y_" + std::to_string(j + 1);
  out += "\n";
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    out += std::to_string(t + 1);
    for (Eigen::Index j = 0; j < y.cols(); ++j) out += "," + format_double(y(t, j));
    out += "\n";
  }
  return out;
}

// Reads a header + numeric rows file; each row has the header's width.
inline std::pair<std::vector<std::string>, Matrix> read_csv(const std::string& path, ErrorKind on_bad) {
  std::ifstream in(path);
  if (!in) fail(on_bad == ErrorKind::CorruptArchive ? ErrorKind::CorruptArchive : ErrorKind::IoFailure,
                "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) fail(on_bad, path + ": missing header");
  std::vector<std::string> header = split(trim(line), ',');
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> parts = split(line, ',');
    if (parts.size() != header.size()) fail(on_bad, path + ": row width does not match header");
    std::vector<double> row;
    for (const auto& p : parts) row.push_back(parse_double(p, on_bad));
    rows.push_back(std::move(row));
  }
  Matrix m(rows.size(), header.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < header.size(); ++j) m(i, j) = rows[i][j];
  }
  return {header, m};
}

inline Matrix read_data(const std::string& path) {
  auto [header, m] = read_csv(path, ErrorKind::IoFailure);
  require(header.size() >= 2 && header[0] == "t", ErrorKind::IoFailure, path + ": expected header t,y_1,...");
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    require(m(t, 0) == static_cast<double>(t + 1), ErrorKind::IoFailure, path + ": observation times must be 1..n");
  }
  return m.rightCols(m.cols() - 1);
}

// ---------------------------------------------------------------------------

struct SimulateResult {
  Matrix y;
  Matrix latent;  // x at observation times
};

inline SimulateResult simulate(const Experiment& e) {
  const int m_sim = static_cast<int>(std::round(1.0 / e.config.sim_delta_tau));
  RngStream root(*e.config.seed);
  RngStream path_rng = root.derive({1});
  RngStream noise_rng = root.derive({2});
  LatentPath path = simulate_path(e.spec.model, e.theta(), e.prior_x0.mean(), TimeGrid(e.n, m_sim), path_rng);
  return {simulate_data(path, *e.obs, noise_rng), path.observed()};
}

inline void cmd_simulate(const ExperimentConfig& config, const std::string& out_path) {
  config.validate();
  Experiment e(config);
  write_text(out_path, data_to_csv(simulate(e).y));
}

struct RunResult {
  ChainOutput chain;
  EssReport ess;
  std::optional<TuningResult> tuning;
  int particles = 1;
  double rho = 0.0;
  double tuning_seconds = 0.0;
  std::vector<std::string> notes;
};

namespace detail {

inline std::vector<Matrix> unpack_blocks(const Vector& flat, int count, int d) {
  require(flat.size() == static_cast<Eigen::Index>(count) * d * d, ErrorKind::ShapeMismatch,
          "omega_x must hold n blocks of d x d");
  std::vector<Matrix> out;
  for (int t = 0; t < count; ++t) {
    Matrix b(d, d);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) b(i, j) = flat((static_cast<Eigen::Index>(t) * d + i) * d + j);
    }
    out.push_back(b);
  }
  return out;
}

inline Matrix unpack_matrix(const Vector& flat, int rows, int cols, const char* what) {
  require(flat.size() == static_cast<Eigen::Index>(rows) * cols, ErrorKind::ShapeMismatch,
          std::string(what) + " has the wrong number of entries");
  Matrix out(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out(i, j) = flat(static_cast<Eigen::Index>(i) * cols + j);
  }
  return out;
}

inline Vector pack(const Matrix& m) {
  Vector out(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i * m.cols() + j) = m(i, j);
  }
  return out;
}

}  // namespace detail

/**
 * Pilot / tuning stage shared by `run` and `tune`: initial values, proposal
 * covariances and the number of particles.
 */
inline TuningResult prepare(const Experiment& e, const Matrix& y, const RngStream& root, std::vector<std::string>* notes,
                            WorkerPool* pool) {
  const ExperimentConfig& c = e.config;
  const int p = e.spec.model.n_params, d = e.spec.model.dim, n = e.n;
  AcpmmhProblem problem{&e.spec.model, &*e.obs, e.prior_x0, y, e.grid(), e.spec.prior};
  const ParamVector theta0 = ParamVector::from_natural(e.theta(), e.spec.log_scale);
  PilotOptions pilot;
  pilot.iterations = c.effective_pilot_iters();
  pilot.x_target = c.x_target;
  pilot.particles = 1;
  pilot.rho = c.effective_rho();
  pilot.lna_steps = c.lna_steps;
  pilot.workers = c.workers;

  TuningResult t;
  bool tuned = false;
  if (c.tuning == "1") {
    try {
      t = tune_option1(problem, theta0, pilot, root.derive({1}));
      tuned = true;
    } catch (const SdeError& err) {
      if (err.kind() != ErrorKind::TuningFailure) throw;
      if (notes) notes->push_back(std::string("warning: ") + err.what() + "; falling back to option 2");
      std::cerr << "warning: " << err.what() << "; falling back to tuning option 2\n";
    }
  }
  if (!tuned && c.tuning != "none") {
    t = tune_option2(problem, theta0, pilot, root.derive({2}));
    tuned = true;
  }
  if (!tuned) {
    t.option = "none";
    t.theta_init = theta0;
    t.omega_theta = c.omega_theta ? detail::unpack_matrix(*c.omega_theta, p, p, "omega_theta")
                                  : Matrix(Matrix::Identity(p, p) * 0.01);
    t.x_o_init = c.init_x ? detail::unpack_matrix(*c.init_x, n, d, "init_x")
                          : initial_latent_states(problem, theta0.natural(), root.derive({3}));
    const double scale = std::max(1e-2, e.obs->Sigma().diagonal().mean());
    t.omega_x = c.omega_x ? detail::unpack_blocks(*c.omega_x, n, d)
                          : std::vector<Matrix>(n, Matrix::Identity(d, d) * scale);
  }

  // Number of particles.
  if (c.particles) {
    t.particles = *c.particles;
  } else if (c.sampler == "lna-mh") {
    t.particles = 1;
  } else {
    NTuningOptions nopt;
    nopt.max_particles = c.max_particles;
    const RngStream nroot = root.derive({4});
    if (c.sampler == "acpmmh") {
      t.particles = tune_N_acpmmh(e.spec.model, e.prior_x0, t.x_o_init, e.grid(), t.theta_init.natural(),
                                  c.effective_rho(), nroot, nopt);
    } else {
      LikelihoodEstimator est = filter_estimator(e.spec.model, *e.obs, e.prior_x0, y, e.grid(),
                                                 c.sampler == "cpmmh" && c.sort, pool);
      t.particles = c.sampler == "pmmh" ? tune_N_pmmh(est, t.theta_init.natural(), nroot, nopt)
                                        : tune_N_cpmmh(est, t.theta_init.natural(), c.effective_rho(), nroot, nopt);
    }
  }
  return t;
}

inline RunResult run_experiment(const Experiment& e, const Matrix& y) {
  const ExperimentConfig& c = e.config;
  require(y.rows() == e.n, ErrorKind::ShapeMismatch,
          "data has " + std::to_string(y.rows()) + " rows but n = " + std::to_string(e.n));
  require(y.cols() == e.obs->obs_dim(), ErrorKind::ShapeMismatch, "data width does not match the observation model");
  require(y.allFinite(), ErrorKind::InvalidConfig, "data must be finite");
  const RngStream root(*c.seed);
  std::unique_ptr<WorkerPool> pool = c.workers > 1 ? std::make_unique<WorkerPool>(c.workers) : nullptr;

  RunResult res;
  const auto t0 = std::chrono::steady_clock::now();
  TuningResult t = prepare(e, y, root.derive({100}), &res.notes, pool.get());
  res.tuning_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.particles = t.particles;
  res.rho = c.effective_rho();
  const RngStream main_root = root.derive({300});
  const int d = e.spec.model.dim;

  if (c.sampler == "pmmh" || c.sampler == "cpmmh") {
    LikelihoodEstimator est =
        filter_estimator(e.spec.model, *e.obs, e.prior_x0, y, e.grid(), c.sampler == "cpmmh" && c.sort, pool.get());
    res.chain = cpmmh_run(est, e.spec.prior, t.theta_init, RwmProposal(t.omega_theta),
                          {t.particles, c.n_iters, res.rho}, main_root);
  } else if (c.sampler == "acpmmh") {
    AcpmmhProblem problem{&e.spec.model, &*e.obs, e.prior_x0, y, e.grid(), e.spec.prior};
    AcpmmhOptions opt{t.particles, res.rho, c.n_iters, c.workers, true};
    res.chain = acpmmh_run(problem, t.proposals(), opt, t.theta_init, t.x_o_init, main_root);
  } else {
    LnaMhOptions opt;
    opt.n_iters = c.n_iters;
    opt.thin = 1;
    opt.steps = c.lna_steps;
    LnaMhResult r = lna_mh_run(e.spec.model, *e.obs, e.prior_x0, y, e.spec.prior, t.theta_init,
                               RwmProposal(t.omega_theta), opt, main_root);
    res.chain = std::move(r.chain);
    if (r.clamp_events > 0) res.notes.push_back("lna clamp events: " + std::to_string(r.clamp_events));
  }
  res.ess = ess_report(res.chain, e.spec.param_names, d, true);
  if (t.option != "none") res.tuning = t;
  return res;
}

// ---------------------------------------------------------------------------
// Archive: chain.csv, x.csv (samplers with latent states), summary.txt
// (deterministic) and timing.txt (wall-clock only).

inline std::string chain_to_csv(const ChainOutput& out, const std::vector<std::string>& names, int thin) {
  std::string s = "iteration";
  for (const auto& nme : names) s += "," + nme;
  s += ",log_lik\n";
  for (Eigen::Index i = thin - 1; i < out.theta.rows(); i += thin) {
    s += std::to_string(i + 1);
    for (Eigen::Index j = 0; j < out.theta.cols(); ++j) s += "," + format_double(out.theta(i, j));
    s += "," + format_double(out.log_lik[i]) + "\n";
  }
  return s;
}

inline std::string states_to_csv(const ChainOutput& out, int d, int thin) {
  std::string s = "iteration";
  for (Eigen::Index j = 0; j < out.x_trace.cols(); ++j) {
    s += ",x" + std::to_string(j / d + 1) + "_" + std::to_string(j % d + 1);
  }
  s += "\n";
  for (Eigen::Index i = thin - 1; i < out.x_trace.rows(); i += thin) {
    s += std::to_string(i + 1);
    for (Eigen::Index j = 0; j < out.x_trace.cols(); ++j) s += "," + format_double(out.x_trace(i, j));
    s += "\n";
  }
  return s;
}

inline std::string summary_text(const Experiment& e, const RunResult& r) {
  std::ostringstream s;
  s << "version = " << kVersion << "\n";
  s << "config_hash = " << e.config.hash() << "\n";
  for (const auto& [k, v] : e.config.to_map(true)) s << "config." << k << " = " << v << "\n";
  s << "sampler = " << e.config.sampler << "\n";
  s << "rho = " << format_double(r.rho) << "\n";
  s << "particles = " << r.particles << "\n";
  s << "iterations = " << r.chain.theta.rows() << "\n";
  s << "tuning.option = " << (r.tuning ? r.tuning->option : "none") << "\n";
  if (r.tuning) {
    s << "tuning.pilot_iters = " << r.tuning->pilot_iters << "\n";
    for (const auto& [name, rate] : r.tuning->pilot_acceptance) s << "tuning.acceptance." << name << " = " << format_double(rate) << "\n";
  }
  for (const auto& c : r.chain.acceptance) s << "acceptance." << c.name << " = " << format_double(c.rate()) << "\n";
  std::string degenerate;
  for (std::size_t i = 0; i < r.ess.names.size(); ++i) {
    s << "ess." << r.ess.names[i] << " = " << format_double(r.ess.ess[i]) << "\n";
    if (r.ess.degenerate[i]) degenerate += (degenerate.empty() ? "" : ",") + r.ess.names[i];
  }
  s << "ess.degenerate = " << degenerate << "\n";
  s << "mess = " << format_double(r.ess.min_ess) << "\n";
  for (std::size_t i = 0; i < r.notes.size(); ++i) s << "note." << i + 1 << " = " << r.notes[i] << "\n";
  return s.str();
}

inline std::string timing_text(const RunResult& r, int workers) {
  std::ostringstream s;
  s << "workers = " << workers << "\n";
  s << "seconds = " << format_double(r.chain.seconds) << "\n";
  s << "tuning_seconds = " << format_double(r.tuning_seconds) << "\n";
  s << "mess_per_second = " << format_double(r.ess.mess_per_second) << "\n";
  return s.str();
}

inline void write_archive(const std::filesystem::path& dir, const Experiment& e, const RunResult& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "chain.csv", chain_to_csv(r.chain, e.spec.param_names, e.config.thin));
  if (r.chain.x_trace.size() > 0) write_text(dir / "x.csv", states_to_csv(r.chain, e.spec.model.dim, e.config.x_thin));
  write_text(dir / "summary.txt", summary_text(e, r));
  write_text(dir / "timing.txt", timing_text(r, e.config.workers));
}

inline RunResult cmd_run(const ExperimentConfig& config, const std::string& data_path) {
  config.validate();
  Experiment e(config);
  const Matrix y = read_data(data_path);
  RunResult r = run_experiment(e, y);
  write_archive(config.output, e, r);
  return r;
}

// `tune` writes a config file that reruns with the tuned values and no pilot.
inline std::string tuning_config_text(const Experiment& e, const TuningResult& t) {
  ExperimentConfig c = e.config;
  c.tuning = "none";
  c.pilot_iters.reset();
  c.theta = t.theta_init.natural();
  c.particles = t.particles;
  c.omega_theta = detail::pack(t.omega_theta);
  if (t.x_o_init.size() > 0) c.init_x = detail::pack(t.x_o_init);
  if (!t.omega_x.empty()) {
    const int d = e.spec.model.dim;
    Vector flat(static_cast<Eigen::Index>(t.omega_x.size()) * d * d);
    for (std::size_t k = 0; k < t.omega_x.size(); ++k) flat.segment(k * d * d, d * d) = detail::pack(t.omega_x[k]);
    c.omega_x = flat;
  }
  return "# tuned with option " + t.option + "\n" + c.canonical(false);
}

inline TuningResult cmd_tune(const ExperimentConfig& config, const std::string& data_path,
                             const std::filesystem::path& out_file) {
  config.validate();
  Experiment e(config);
  const Matrix y = read_data(data_path);
  require(y.rows() == e.n && y.cols() == e.obs->obs_dim(), ErrorKind::ShapeMismatch, "data does not match the config");
  std::unique_ptr<WorkerPool> pool = config.workers > 1 ? std::make_unique<WorkerPool>(config.workers) : nullptr;
  TuningResult t = prepare(e, y, RngStream(*config.seed).derive({100}), nullptr, pool.get());
  write_text(out_file, tuning_config_text(e, t));
  return t;
}

// ---------------------------------------------------------------------------
// Report.

struct ArchiveView {
  std::map<std::string, std::string> summary;
  std::map<std::string, std::string> timing;
  std::vector<std::string> theta_names;
  Matrix theta;  // rows = stored iterations
  std::vector<std::string> x_names;
  Matrix x;
};

inline ArchiveView read_archive(const std::filesystem::path& dir) {
  ArchiveView a;
  const auto need = [&](const char* name) {
    if (!std::filesystem::exists(dir / name)) fail(ErrorKind::CorruptArchive, (dir / name).string() + " is missing");
  };
  need("summary.txt");
  need("chain.csv");
  try {
    a.summary = read_key_values((dir / "summary.txt").string());
    if (std::filesystem::exists(dir / "timing.txt")) a.timing = read_key_values((dir / "timing.txt").string());
  } catch (const SdeError& err) {
    fail(ErrorKind::CorruptArchive, err.what());
  }
  std::map<std::string, std::string> echo;
  for (const auto& [k, v] : a.summary) {
    if (k.rfind("config.", 0) == 0) echo[k.substr(7)] = v;
  }
  if (!a.summary.count("config_hash")) fail(ErrorKind::CorruptArchive, "summary has no config hash");
  try {
    if (ExperimentConfig::from_map(echo).hash() != a.summary.at("config_hash")) {
      fail(ErrorKind::CorruptArchive, "config echo does not match the recorded hash");
    }
  } catch (const SdeError& err) {
    if (err.kind() == ErrorKind::CorruptArchive) throw;
    fail(ErrorKind::CorruptArchive, std::string("config echo unreadable: ") + err.what());
  }
  auto [header, m] = read_csv((dir / "chain.csv").string(), ErrorKind::CorruptArchive);
  if (header.size() < 3 || header.front() != "iteration" || header.back() != "log_lik" || m.rows() == 0) {
    fail(ErrorKind::CorruptArchive, "chain.csv has an unexpected layout");
  }
  a.theta_names.assign(header.begin() + 1, header.end() - 1);
  a.theta = m.middleCols(1, m.cols() - 2);
  if (std::filesystem::exists(dir / "x.csv")) {
    auto [xh, xm] = read_csv((dir / "x.csv").string(), ErrorKind::CorruptArchive);
    if (xh.size() < 2 || xh.front() != "iteration") fail(ErrorKind::CorruptArchive, "x.csv has an unexpected layout");
    a.x_names.assign(xh.begin() + 1, xh.end());
    a.x = xm.rightCols(xm.cols() - 1);
  }
  return a;
}

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * (v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

struct ReportRow {
  std::string label;
  std::string sampler;
  double rho = 0.0;
  int particles = 1;
  double seconds = 0.0;
  double mess = 0.0;
  double mess_per_second = 0.0;
  double relative = 1.0;
  std::vector<std::pair<std::string, double>> ess;  // recomputed from the stored chains
  bool degenerate = false;
};

/**
 * Table of (sampler, rho, N, CPU, mESS, mESS/s, Rel.) over the given archives,
 * Rel. taken against the first. Per-archive plot data (posterior histograms,
 * latent-state bands) is written next to each archive.
 */
inline std::vector<ReportRow> cmd_report(const std::vector<std::filesystem::path>& dirs, std::ostream& out,
                                         int bins = 30) {
  require(!dirs.empty(), ErrorKind::InvalidConfig, "report needs at least one archive");
  std::vector<ReportRow> rows;
  for (const auto& dir : dirs) {
    ArchiveView a = read_archive(dir);
    ReportRow r;
    r.label = dir.filename().string().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    r.sampler = a.summary.count("sampler") ? a.summary["sampler"] : "?";
    try {
      r.rho = a.summary.count("rho") ? parse_double(a.summary["rho"]) : 0.0;
      r.particles = a.summary.count("particles") ? static_cast<int>(parse_int(a.summary["particles"])) : 1;
      r.mess = a.summary.count("mess") ? parse_double(a.summary["mess"]) : 0.0;
      r.seconds = a.timing.count("seconds") ? parse_double(a.timing["seconds"]) : 0.0;
    } catch (const SdeError& err) {
      fail(ErrorKind::CorruptArchive, err.what());
    }
    auto add_ess = [&](const std::string& name, const std::vector<double>& chain) {
      if (chain.size() < 10) return;
      EssValue v = effective_sample_size(chain);
      r.ess.emplace_back(name, v.ess);
      r.degenerate = r.degenerate || v.degenerate;
    };
    for (Eigen::Index j = 0; j < a.theta.cols(); ++j) add_ess(a.theta_names[j], matrix_column(a.theta, j));
    for (Eigen::Index j = 0; j < a.x.cols(); ++j) add_ess(a.x_names[j], matrix_column(a.x, j));
    if (r.mess == 0.0 && !r.ess.empty()) {
      r.mess = r.ess.front().second;
      for (const auto& [nm, v] : r.ess) r.mess = std::min(r.mess, v);
    }
    r.mess_per_second = r.seconds > 0.0 ? r.mess / r.seconds : 0.0;

    // marginal posterior histograms
    std::string hist = "parameter,bin_lo,bin_hi,density\n";
    for (Eigen::Index j = 0; j < a.theta.cols(); ++j) {
      const std::vector<double> v = matrix_column(a.theta, j);
      const double lo = *std::min_element(v.begin(), v.end());
      double hi = *std::max_element(v.begin(), v.end());
      if (hi <= lo) hi = lo + 1e-12 * (1.0 + std::abs(lo));
      const double w = (hi - lo) / bins;
      std::vector<double> counts(bins, 0.0);
      for (double x : v) counts[std::min(bins - 1, static_cast<int>((x - lo) / w))] += 1.0;
      for (int b = 0; b < bins; ++b) {
        hist += a.theta_names[j] + "," + format_double(lo + b * w) + "," + format_double(lo + (b + 1) * w) + "," +
                format_double(counts[b] / (v.size() * w)) + "\n";
      }
    }
    write_text(dir / "posterior_hist.csv", hist);
    if (a.x.cols() > 0) {
      // columns are x{t}_{component}
      std::string band = "t,component,mean,lo95,hi95\n";
      for (Eigen::Index j = 0; j < a.x.cols(); ++j) {
        const std::string& nm = a.x_names[j];
        const auto us = nm.find('_');
        if (nm.size() < 4 || nm[0] != 'x' || us == std::string::npos) fail(ErrorKind::CorruptArchive, "bad state column " + nm);
        const std::vector<double> v = matrix_column(a.x, j);
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= v.size();
        band += nm.substr(1, us - 1) + "," + nm.substr(us + 1) + "," + format_double(mean) + "," + format_double(quantile(v, 0.025)) + "," +
                format_double(quantile(v, 0.975)) + "\n";
      }
      write_text(dir / "predictive.csv", band);
    }
    rows.push_back(std::move(r));
  }
  const double base = rows.front().mess_per_second;
  for (auto& r : rows) r.relative = base > 0.0 ? r.mess_per_second / base : 0.0;

  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-8s %6s %6s %10s %10s %10s %8s\n", "archive", "sampler", "rho", "N", "CPU(s)",
                "mESS", "mESS/s", "Rel.");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-16s %-8s %6.2f %6d %10.1f %10.1f %10.3f %8.2f%s\n", r.label.c_str(),
                  r.sampler.c_str(), r.rho, r.particles, r.seconds, r.mess, r.mess_per_second, r.relative,
                  r.degenerate ? "  (degenerate chain)" : "");
    out << line;
  }
  for (const auto& r : rows) {
    out << "\n[" << r.label << "] ESS of stored chains\n";
    for (const auto& [name, v] : r.ess) out << "  " << name << " " << format_double(v) << "\n";
  }
  return rows;
}

inline int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Config: return 2;
    case ErrorCategory::Numeric: return 3;
    case ErrorCategory::Io: return 4;
  }
  return 1;
}

}  // namespace sdeinfer

#endif  // SDEINFER_EXPERIMENT_HPP
