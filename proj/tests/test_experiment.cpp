#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sdeinfer/experiment.hpp"
#include "test_support.hpp"

using namespace sdeinfer;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("sdeinfer_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig small_sqrt(const fs::path& dir) {
  ExperimentConfig c;
  c.model = "sqrt";
  c.obs_sd = 1.0;
  c.n = 12;
  c.sampler = "acpmmh";
  c.rho = 0.99;
  c.particles = 1;
  c.n_iters = 200;
  c.seed = 11;
  c.output = (dir / "archive").string();
  return c;
}

fs::path simulate_into(const ExperimentConfig& c, const fs::path& dir) {
  const fs::path data = dir / "data.csv";
  cmd_simulate(c, data.string());
  return data;
}

void expect_kind(const std::function<void()>& f, ErrorKind kind) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(kind);
  } catch (const SdeError& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

}  // namespace

TEST(ExperimentConfig, CanonicalRoundTripAndHash) {
  ExperimentConfig c = small_sqrt("/tmp");
  c.theta = Vector::Constant(2, 0.1 / 3.0);
  c.omega_theta = Vector::Constant(4, 1e-3);
  const ExperimentConfig back = ExperimentConfig::from_map(c.to_map());
  EXPECT_EQ(back.canonical(), c.canonical());
  EXPECT_EQ(back.theta->coeff(0), 0.1 / 3.0);
  EXPECT_EQ(back.hash(), c.hash());

  ExperimentConfig other = c;
  other.workers = 4;
  other.output = "elsewhere";
  EXPECT_EQ(other.hash(), c.hash());
  other.rho = 0.5;
  EXPECT_NE(other.hash(), c.hash());
}

TEST(ExperimentConfig, Validation) {
  ExperimentConfig c = small_sqrt("/tmp");
  c.n_iters = 0;
  expect_kind([&] { c.validate(); }, ErrorKind::InvalidConfig);
  c = small_sqrt("/tmp");
  c.seed.reset();
  expect_kind([&] { c.validate(); }, ErrorKind::InvalidConfig);
  c = small_sqrt("/tmp");
  c.rho = 1.5;
  expect_kind([&] { c.validate(); }, ErrorKind::InvalidConfig);
  expect_kind([] { ExperimentConfig::from_map({{"colour", "red"}}); }, ErrorKind::InvalidConfig);
  expect_kind([] { ExperimentConfig::from_map({{"delta_tau", "0.3"}}); }, ErrorKind::InvalidConfig);
  EXPECT_EQ(ExperimentConfig::from_map({{"delta_tau", "0.2"}}).m, 5);
  EXPECT_EQ(ExperimentConfig::from_map({{"delta_tau", "0.001"}}).m, 1000);
  c = small_sqrt("/tmp");
  c.tuning = "2";
  c.pilot_iters = 50;  // more than 10% of 200
  expect_kind([&] { c.validate(); }, ErrorKind::InvalidConfig);
}

TEST(Simulate, SquareRootDefaultLength) {
  const fs::path dir = scratch("sim");
  ExperimentConfig c = small_sqrt(dir);
  c.n.reset();
  const fs::path data = simulate_into(c, dir);
  const Matrix y = read_data(data.string());
  EXPECT_EQ(y.rows(), 101);
  EXPECT_EQ(y.cols(), 1);
  // same seed, same bytes
  cmd_simulate(c, (dir / "again.csv").string());
  EXPECT_EQ(slurp(data), slurp(dir / "again.csv"));
  c.seed = 12;
  cmd_simulate(c, (dir / "other.csv").string());
  EXPECT_NE(slurp(data), slurp(dir / "other.csv"));
}

TEST(Simulate, NoiselessObservationsEqualThePath) {
  ExperimentConfig c = small_sqrt("/tmp");
  c.model = "lv";
  c.obs_sd = 0.0;
  Experiment e(c);
  SimulateResult r = simulate(e);
  EXPECT_EQ(r.y, r.latent);
  c.observe = {0};
  Experiment partial(c);
  SimulateResult p = simulate(partial);
  ASSERT_EQ(p.y.cols(), 1);
  EXPECT_EQ(p.y.col(0), p.latent.col(0));
}

TEST(Simulate, DataFileRoundTrip) {
  Matrix y(3, 2);
  y << 0.1, 1e-300, -2.5, 1.0 / 3.0, 7.0, 123456789.123456789;
  const fs::path dir = scratch("roundtrip");
  write_text(dir / "y.csv", data_to_csv(y));
  EXPECT_EQ(read_data((dir / "y.csv").string()), y);
}

TEST(Run, ArchiveShapeAndDeterminism) {
  const fs::path dir = scratch("run");
  ExperimentConfig c = small_sqrt(dir);
  const fs::path data = simulate_into(c, dir);
  RunResult r = cmd_run(c, data.string());
  EXPECT_EQ(r.chain.theta.rows(), 200);
  const auto [header, chain] = read_csv((dir / "archive" / "chain.csv").string(), ErrorKind::CorruptArchive);
  EXPECT_EQ(header.front(), "iteration");
  EXPECT_EQ(chain.rows(), 200);
  EXPECT_EQ(chain.col(1), r.chain.theta.col(0));  // lossless at 17 digits
  const auto [xh, x] = read_csv((dir / "archive" / "x.csv").string(), ErrorKind::CorruptArchive);
  EXPECT_EQ(x.rows(), 20);
  EXPECT_EQ(xh.size(), 13u);

  ExperimentConfig again = c;
  again.output = (dir / "again").string();
  again.workers = 3;
  cmd_run(again, data.string());
  for (const char* f : {"chain.csv", "x.csv", "summary.txt"}) {
    EXPECT_EQ(slurp(dir / "archive" / f), slurp(dir / "again" / f)) << f;
  }
}

TEST(Run, SummaryEchoReproducesTheRun) {
  const fs::path dir = scratch("echo");
  ExperimentConfig c = small_sqrt(dir);
  c.sampler = "cpmmh";
  c.particles = 3;
  c.n_iters = 100;
  const fs::path data = simulate_into(c, dir);
  cmd_run(c, data.string());
  std::map<std::string, std::string> echo;
  for (const auto& [k, v] : read_key_values((dir / "archive" / "summary.txt").string())) {
    if (k.rfind("config.", 0) == 0) echo[k.substr(7)] = v;
  }
  ExperimentConfig back = ExperimentConfig::from_map(echo);
  back.output = (dir / "replay").string();
  cmd_run(back, data.string());
  EXPECT_EQ(slurp(dir / "archive" / "chain.csv"), slurp(dir / "replay" / "chain.csv"));
}

TEST(Run, AllSamplersProduceChains) {
  const fs::path dir = scratch("samplers");
  ExperimentConfig base = small_sqrt(dir);
  base.n_iters = 60;
  const fs::path data = simulate_into(base, dir);
  for (const std::string s : {"pmmh", "cpmmh", "acpmmh", "lna-mh"}) {
    ExperimentConfig c = base;
    c.sampler = s;
    c.rho = s == "pmmh" ? 0.0 : 0.99;
    c.particles = s == "lna-mh" ? 1 : 4;
    c.output = (dir / s).string();
    RunResult r = cmd_run(c, data.string());
    EXPECT_EQ(r.chain.theta.rows(), 60) << s;
    EXPECT_TRUE(fs::exists(dir / s / "summary.txt")) << s;
  }
}

TEST(Run, DataShapeMismatch) {
  const fs::path dir = scratch("mismatch");
  ExperimentConfig c = small_sqrt(dir);
  const fs::path data = simulate_into(c, dir);
  c.n = 13;
  expect_kind([&] { cmd_run(c, data.string()); }, ErrorKind::ShapeMismatch);
  expect_kind([&] { cmd_run(small_sqrt(dir), (dir / "missing.csv").string()); }, ErrorKind::IoFailure);
}

TEST(Tune, WritesARunnableConfig) {
  const fs::path dir = scratch("tune");
  ExperimentConfig c = small_sqrt(dir);
  c.tuning = "1";
  c.n_iters = 1000;
  const fs::path data = simulate_into(c, dir);
  TuningResult t = cmd_tune(c, data.string(), dir / "tuned.cfg");
  EXPECT_EQ(t.option, "lna");
  ExperimentConfig tuned = load_config((dir / "tuned.cfg").string());
  EXPECT_EQ(tuned.tuning, "none");
  ASSERT_TRUE(tuned.omega_theta.has_value());
  ASSERT_TRUE(tuned.init_x.has_value());
  EXPECT_EQ(tuned.init_x->size(), 12);
  tuned.n_iters = 50;
  tuned.output = (dir / "tuned_run").string();
  RunResult r = cmd_run(tuned, data.string());
  EXPECT_EQ(r.chain.theta.rows(), 50);
}

TEST(Report, IidArchiveHasEssNearLength) {
  const fs::path dir = scratch("report_iid");
  ExperimentConfig c = small_sqrt(dir);
  c.n_iters = 4000;
  Experiment e(c);
  RunResult r;
  r.chain.theta.resize(4000, 2);
  RngStream rng(9);
  for (Eigen::Index i = 0; i < 4000; ++i) {
    r.chain.theta(i, 0) = rng.gaussian();
    r.chain.theta(i, 1) = 3.0;
  }
  r.chain.log_lik.assign(4000, -1.0);
  r.chain.seconds = 2.0;
  r.ess = ess_report(r.chain, e.spec.param_names, 1, false);
  write_archive(dir, e, r);
  std::ostringstream out;
  std::vector<ReportRow> rows = cmd_report({dir}, out);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(rows[0].ess[0].second / 4000.0, 1.0, 0.15);
  EXPECT_TRUE(rows[0].degenerate);  // the constant column
  EXPECT_NE(out.str().find("degenerate"), std::string::npos);
  for (const char* col : {"rho", "N", "CPU(s)", "mESS", "mESS/s", "Rel."}) {
    EXPECT_NE(out.str().find(col), std::string::npos) << col;
  }
  EXPECT_TRUE(fs::exists(dir / "posterior_hist.csv"));
}

TEST(Report, RelativeColumnAndPlotData) {
  const fs::path dir = scratch("report_rel");
  ExperimentConfig c = small_sqrt(dir);
  const fs::path data = simulate_into(c, dir);
  cmd_run(c, data.string());
  std::ostringstream out;
  auto rows = cmd_report({dir / "archive", dir / "archive"}, out);
  EXPECT_DOUBLE_EQ(rows[1].relative, 1.0);
  const auto [h, band] = read_csv((dir / "archive" / "predictive.csv").string(), ErrorKind::CorruptArchive);
  (void)h;
  EXPECT_EQ(band.rows(), 12);
}

TEST(Report, CorruptArchives) {
  const fs::path dir = scratch("corrupt");
  ExperimentConfig c = small_sqrt(dir);
  c.n_iters = 50;
  const fs::path data = simulate_into(c, dir);
  cmd_run(c, data.string());
  const fs::path a = dir / "archive";
  std::ostringstream out;

  const std::string chain = slurp(a / "chain.csv");
  write_text(a / "chain.csv", chain + "51,0.1\n");
  expect_kind([&] { cmd_report({a}, out); }, ErrorKind::CorruptArchive);
  write_text(a / "chain.csv", chain);

  std::string summary = slurp(a / "summary.txt");
  const auto pos = summary.find("config.n_iters = 50");
  ASSERT_NE(pos, std::string::npos);
  write_text(a / "summary.txt", summary.substr(0, pos) + "config.n_iters = 51" + summary.substr(pos + 19));
  expect_kind([&] { cmd_report({a}, out); }, ErrorKind::CorruptArchive);

  fs::remove(a / "summary.txt");
  expect_kind([&] { cmd_report({a}, out); }, ErrorKind::CorruptArchive);
}

TEST(ExitCodes, Categories) {
  EXPECT_EQ(exit_code(ErrorCategory::Config), 2);
  EXPECT_EQ(exit_code(ErrorCategory::Numeric), 3);
  EXPECT_EQ(exit_code(ErrorCategory::Io), 4);
  EXPECT_EQ(exit_code(SdeError(ErrorKind::SingularV, "x").category()), 3);
}
