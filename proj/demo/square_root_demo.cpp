// Square-root diffusion: simulate 101 observations, fit with the augmented
// correlated sampler (N = 1, rho = 0.99) and print the posterior summary.
#include <cstdio>

#include "sdeinfer/sdeinfer.hpp"

using namespace sdeinfer;

int main(int argc, char** argv) {
  const int iters = argc > 1 ? std::atoi(argv[1]) : 5000;
  ExperimentConfig c;
  c.model = "sqrt";
  c.obs_sd = 1.0;
  c.sampler = "acpmmh";
  c.rho = 0.99;
  c.particles = 1;
  c.n_iters = iters;
  c.seed = 2024;
  c.tuning = "1";
  try {
    c.validate();
    Experiment e(c);
    const Matrix y = simulate(e).y;
    RunResult r = run_experiment(e, y);

    const Matrix& th = r.chain.theta;
    const Eigen::Index burn = th.rows() / 5;
    std::vector<double> diff;
    for (Eigen::Index i = burn; i < th.rows(); ++i) diff.push_back(th(i, 0) - th(i, 1));
    std::printf("tuning %s, N = %d, %lld iterations in %.1f s\n", r.tuning ? r.tuning->option.c_str() : "none",
                r.particles, static_cast<long long>(th.rows()), r.chain.seconds);
    for (const auto& a : r.chain.acceptance) std::printf("acceptance %-6s %.3f\n", a.name.c_str(), a.rate());
    for (Eigen::Index j = 0; j < th.cols(); ++j) {
      std::vector<double> v;
      for (Eigen::Index i = burn; i < th.rows(); ++i) v.push_back(th(i, j));
      std::printf("%-8s truth %.4f  median %.4f  95%% [%.4f, %.4f]\n", e.spec.param_names[j].c_str(), e.spec.truth(j),
                  quantile(v, 0.5), quantile(v, 0.025), quantile(v, 0.975));
    }
    std::printf("th1-th2  truth %.4f  median %.4f  95%% [%.4f, %.4f]\n", e.spec.truth(0) - e.spec.truth(1),
                quantile(diff, 0.5), quantile(diff, 0.025), quantile(diff, 0.975));
    std::printf("mESS %.1f  mESS/s %.2f\n", r.ess.min_ess, r.ess.mess_per_second);
  } catch (const SdeError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return exit_code(err.category());
  }
  return 0;
}
