// Acceptance runner: one criterion per invocation, or all of them in order.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <Eigen/LU>

#include "prepaid/error.hpp"
#include "prepaid/estimators.hpp"
#include "prepaid/grid.hpp"
#include "prepaid/inference.hpp"
#include "prepaid/learn.hpp"
#include "prepaid/models.hpp"
#include "prepaid/optimize.hpp"
#include "prepaid/parallel.hpp"
#include "prepaid/recovery.hpp"
#include "prepaid/rng.hpp"
#include "prepaid/service.hpp"
#include "prepaid/theory.hpp"

#include <httplib.h>

using namespace prepaid;
namespace fs = std::filesystem;

namespace {

struct Context {
  fs::path cache;
  std::string cli;
  unsigned workers = 1;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double x, int precision = 4) {
  std::ostringstream out;
  out << std::setprecision(precision) << x;
  return out.str();
}

std::string fmt(const Eigen::VectorXd& v, int precision = 4) {
  std::string s = "(";
  for (Index i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i], precision);
  return s + ")";
}

/// Check line inside a criterion.
bool check(bool ok, const std::string& what) {
  std::cout << "  " << (ok ? "ok   " : "FAIL ") << what << '\n';
  return ok;
}

/// Loads the named database from the cache, building and publishing it atomically when absent.
PrepaidDatabase cached_database(const Context& ctx, const std::string& name, const Model& model,
                                const BuildOptions& options) {
  fs::create_directories(ctx.cache);
  const fs::path path = ctx.cache / (name + ".ppdb");
  if (fs::exists(path)) {
    try {
      auto db = load_database(path);
      std::cout << "  using cached " << path.string() << '\n';
      return db;
    } catch (const FormatError& e) {
      std::cout << "  rebuilding " << path.string() << ": " << e.what() << '\n';
    }
  }
  const auto start = Clock::now();
  auto db = build_database(model, options);
  std::cout << "  built " << name << ": " << db.size() << " records in " << fmt(seconds_since(start), 3) << " s\n";
  const fs::path tmp = ctx.cache / (name + ".tmp" + std::to_string(::getpid()) + ".ppdb");
  save_database(db, tmp);
  fs::rename(tmp.string() + ".json", path.string() + ".json");
  fs::rename(tmp, path);
  return db;
}

PrepaidDatabase ricker_database(const Context& ctx) {
  BuildOptions o;
  o.points = 5000;
  o.t_sim = 100000;
  o.t_prepaid = {100, 1000};
  o.samples = 0;
  o.seed = 2024;
  o.workers = ctx.workers;
  return cached_database(ctx, "ricker_5000", RickerModel(), o);
}

Eigen::VectorXd rowwise_rmse(const Eigen::MatrixXd& estimates, const Eigen::MatrixXd& truths) {
  return ((estimates - truths).array().square().rowwise().sum() / static_cast<double>(truths.cols())).sqrt();
}

// ---------------------------------------------------------------------------

bool criterion1(const Context& ctx) {
  const auto start = Clock::now();
  ToyStudyOptions o;
  o.situation = 1;
  o.deltas = {0.003, 0.01, 0.03};
  o.ns = {10, 30, 100};
  o.replications = 2000;
  o.s = 1.0;
  o.t_obs = 100.0;
  o.t_sim = 1000.0;
  o.seed = 101;
  o.workers = ctx.workers;
  const auto study = toy_rmse_study(o);
  int agree = 0;
  for (const auto& cell : study.cells) {
    ToyConfig c;
    c.s = o.s;
    c.t_obs = o.t_obs;
    c.t_sim = o.t_sim;
    c.delta = cell.delta;
    c.n = cell.n;
    const double target = toy_estimator_moments(c).mse(c.mu);
    const double z = std::abs(cell.mse - target) / cell.mse_se;
    const bool ok = z <= 3.0;
    agree += ok;
    std::cout << "  delta " << cell.delta << " N " << cell.n << ": mse " << fmt(cell.mse) << " (se " << fmt(cell.mse_se)
              << ", used " << cell.replications << ") predicted " << fmt(target) << " |z| " << fmt(z, 3)
              << (ok ? "" : "  outside") << '\n';
  }
  const double secs = seconds_since(start);
  bool ok = check(agree >= 8, std::to_string(agree) + " of 9 cells within 3 standard errors (need 8)");
  ok &= check(secs < 300.0, "runtime " + fmt(secs, 3) + " s < 300 s");
  return ok;
}

bool criterion2(const Context& ctx) {
  const auto start = Clock::now();
  ToyStudyOptions o;
  o.situation = 2;
  o.mu = 1.0;
  o.deltas = default_toy_deltas();
  o.ns = default_toy_ns();
  o.replications = 1000;
  o.seed = 202;
  o.workers = ctx.workers;
  const auto study = toy_rmse_study(o);
  bool ok = true;
  const std::size_t last = o.deltas.size() - 1;
  for (std::size_t ni = 0; ni < o.ns.size(); ++ni) {
    double interior = INFINITY;
    double arg = 0.0;
    for (std::size_t di = 1; di < last; ++di)
      if (study.cell(di, ni).rmse < interior) {
        interior = study.cell(di, ni).rmse;
        arg = o.deltas[di];
      }
    const double first = study.cell(0, ni).rmse, end = study.cell(last, ni).rmse;
    ok &= check(interior < first && interior < end,
                "N " + std::to_string(o.ns[ni]) + ": interior minimum " + fmt(interior) + " at delta " + fmt(arg, 3) +
                    " vs endpoints " + fmt(first) + ", " + fmt(end));
  }
  const double secs = seconds_since(start);
  ok &= check(secs < 300.0, "runtime " + fmt(secs, 3) + " s < 300 s");
  return ok;
}

RecoveryReport ricker_desk_study(const Context& ctx, const LikelihoodIndex& index) {
  TestSpec spec;
  spec.count = 50;
  spec.t_obs = {100.0, 10000.0};
  spec.trim = 0.01;
  RecoveryOptions ro;
  ro.methods = {Method::grid_ml, Method::svm_ml};
  ro.workers = ctx.workers;
  return recovery_study(index, RickerModel(), spec, ro, 303);
}

bool criterion3(const Context& ctx) {
  const auto start = Clock::now();
  const auto db = ricker_database(ctx);
  const LikelihoodIndex index(db, ctx.workers);
  const auto report = ricker_desk_study(ctx, index);
  const auto& grid = report.summary(Method::grid_ml, 10000.0);
  const auto& svm = report.summary(Method::svm_ml, 10000.0);
  const Eigen::VectorXd gap = expected_gap(db.header.space, db.size());
  std::cout << "  T_obs 1e4 grid-ml rmse " << fmt(grid.rmse) << ", svm-ml rmse " << fmt(svm.rmse) << ", gap "
            << fmt(gap) << '\n';
  bool ok = check(grid.failures == 0 && svm.failures == 0, "no failed items");
  const auto& names = db.header.space.names();
  for (Index d = 0; d < db.dim(); ++d) {
    ok &= check(svm.rmse[d] < grid.rmse[d], names[d] + ": svm-ml " + fmt(svm.rmse[d]) + " < grid-ml " + fmt(grid.rmse[d]));
    const double ratio = grid.rmse[d] / gap[d];
    ok &= check(ratio >= 1.0 / 3.0 && ratio <= 3.0, names[d] + ": grid-ml rmse / gap = " + fmt(ratio, 3) + " in [1/3, 3]");
  }
  const double secs = seconds_since(start);
  ok &= check(secs < 1800.0, "runtime " + fmt(secs, 4) + " s < 1800 s");
  return ok;
}

bool criterion4(const Context& ctx) {
  const auto db = ricker_database(ctx);
  const LikelihoodIndex index(db, ctx.workers);
  const auto report = ricker_desk_study(ctx, index);
  bool ok = true;
  const auto& names = db.header.space.names();
  for (Method m : {Method::grid_ml, Method::svm_ml}) {
    const auto& shortt = report.summary(m, 100.0);
    const auto& longt = report.summary(m, 10000.0);
    for (Index d = 0; d < db.dim(); ++d)
      ok &= check(longt.median_abs_error[d] <= shortt.median_abs_error[d],
                  std::string(method_name(m)) + " " + names[d] + ": median error " + fmt(longt.median_abs_error[d]) +
                      " at 1e4 <= " + fmt(shortt.median_abs_error[d]) + " at 1e2");
  }
  return ok;
}

bool criterion5(const Context& ctx) {
  const auto start = Clock::now();
  bool ok = true;
  {
    BuildOptions o;
    o.points = 2000;
    o.t_sim = 10000;
    o.t_prepaid = {100};
    o.seed = 505;
    o.workers = ctx.workers;
    const auto model = GaussianMeanModel::toy();
    const auto db = cached_database(ctx, "toy_2000", model, o);
    const LikelihoodIndex index(db, ctx.workers);
    TestSpec spec;
    spec.count = 200;
    spec.t_obs = {100.0};
    spec.trim = 0.01;
    RecoveryOptions ro;
    ro.methods = {Method::svm_ml};
    ro.bootstrap = true;
    ro.boot.replicates = 500;
    ro.workers = ctx.workers;
    const auto t0 = Clock::now();
    const auto report = recovery_study(index, model, spec, ro, 505);
    const auto& s = report.summary(Method::svm_ml, 100.0);
    Index svm_mode = 0;
    for (const auto& r : report.rows) svm_mode += r.ci && r.ci->svm_mode;
    std::cout << "  toy: " << s.items << " items, " << svm_mode << " in surrogate mode, " << fmt(seconds_since(t0), 4)
              << " s\n";
    ok &= check(s.failures == 0, "toy: no failed items");
    ok &= check(s.coverage[0] >= 0.88 && s.coverage[0] <= 0.99, "toy: coverage " + fmt(s.coverage[0]) + " in [0.88, 0.99]");
  }
  {
    const auto db = ricker_database(ctx);
    const LikelihoodIndex index(db, ctx.workers);
    TestSpec spec;
    spec.count = 100;
    spec.t_obs = {1000.0};
    spec.trim = 0.01;
    RecoveryOptions ro;
    ro.methods = {Method::svm_ml};
    ro.bootstrap = true;
    ro.boot.replicates = 1000;
    ro.workers = ctx.workers;
    const auto t0 = Clock::now();
    const auto report = recovery_study(index, RickerModel(), spec, ro, 515);
    const auto& s = report.summary(Method::svm_ml, 1000.0);
    Index svm_mode = 0;
    for (const auto& r : report.rows) svm_mode += r.ci && r.ci->svm_mode;
    std::cout << "  ricker: " << s.items << " items, " << s.failures << " failed, " << svm_mode
              << " in surrogate mode, " << fmt(seconds_since(t0), 4) << " s\n";
    const auto& names = db.header.space.names();
    for (Index d = 0; d < db.dim(); ++d)
      ok &= check(s.coverage[d] >= 0.85 && s.coverage[d] <= 1.0,
                  "ricker " + names[d] + ": coverage " + fmt(s.coverage[d]) + " in [0.85, 1.00]");
  }
  const double secs = seconds_since(start);
  ok &= check(secs < 3600.0, "runtime " + fmt(secs, 4) + " s < 3600 s");
  return ok;
}

bool criterion6(const Context& ctx) {
  const auto db = ricker_database(ctx);
  const LikelihoodIndex index(db, ctx.workers);
  const auto& space = db.header.space;
  const std::array<Prior, 3> priors{Prior::uniform(space),
                                    Prior::scaled_beta(space, {{10, 10}, {10, 10}, {10, 10}}),
                                    Prior::scaled_beta(space, {{2, 10}, {10, 2}, {2, 10}})};
  int good_sets = 0;
  const auto& names = space.names();
  for (std::size_t g = 0; g < 3; ++g) {
    TestSpec spec;
    spec.count = 100;
    spec.t_obs = {100.0};
    spec.generating = priors[g];
    std::array<Eigen::VectorXd, 3> rmse;
    for (std::size_t e = 0; e < 3; ++e) {
      RecoveryOptions ro;
      ro.methods = {Method::grid_map};
      ro.map_prior = priors[e];
      ro.workers = ctx.workers;
      rmse[e] = recovery_study(index, RickerModel(), spec, ro, 606 + g).summary(Method::grid_map, 100.0).rmse;
    }
    int won = 0;
    for (Index d = 0; d < space.dim(); ++d) {
      bool best = true;
      for (std::size_t e = 0; e < 3; ++e)
        if (e != g && !(rmse[g][d] < rmse[e][d])) best = false;
      won += best;
    }
    std::cout << "  test set P" << g + 1 << ": rmse with P1 " << fmt(rmse[0]) << ", P2 " << fmt(rmse[1]) << ", P3 "
              << fmt(rmse[2]) << "; matched prior lowest for " << won << " of 3 (" << names[0] << ", " << names[1]
              << ", " << names[2] << ")\n";
    good_sets += won >= 2;
  }
  return check(good_sets >= 2, "matched prior lowest in >= 2 parameters for " + std::to_string(good_sets) +
                                   " of 3 test sets (need 2)");
}

bool criterion7(const Context& ctx) {
  const auto db = ricker_database(ctx);
  const LikelihoodIndex index(db, ctx.workers);
  const RickerModel model;
  const auto& space = db.header.space;
  MultiConditionDesign design;
  design.conditions = 2;
  design.t_obs = {100.0, 100.0};
  design.tied_dims = {0, 1};
  const std::vector<double> candidates{0.003, 0.01, 0.03, 0.1, 0.3};
  const auto tuning = tune_sigma_prior(index, model, design, candidates, 100, 707);
  std::cout << "  tuned sigma_prior " << tuning.best << " (scores";
  for (double s : tuning.scores) std::cout << ' ' << fmt(s, 3);
  std::cout << ")\n";

  const Index experiments = 100;
  std::vector<ParameterVector> truth, flat, tied;
  std::vector<std::vector<ParameterVector>> per_experiment(static_cast<std::size_t>(experiments));
  std::vector<std::vector<EstimationResult>> flat_results(static_cast<std::size_t>(experiments)),
      tied_results(static_cast<std::size_t>(experiments));
  std::vector<std::string> errors(static_cast<std::size_t>(experiments));
  parallel_for(static_cast<std::size_t>(experiments), ctx.workers, [&](std::size_t e) {
    Rng rng = make_rng(717, e);
    per_experiment[e] = draw_tied_truth(space, design, rng);
    std::vector<StatVector> stats;
    for (std::size_t c = 0; c < per_experiment[e].size(); ++c) {
      const auto data = model.simulate(per_experiment[e][c], static_cast<Index>(design.t_obs[c]),
                                       stream_seed(stream_seed(727, e), c));
      stats.push_back(model.summarize(data));
    }
    try {
      flat_results[e] = estimate_multicondition(index, stats, design.t_obs, design.tied_dims, INFINITY);
      tied_results[e] = estimate_multicondition(index, stats, design.t_obs, design.tied_dims, tuning.best);
    } catch (const Error& err) {
      errors[e] = err.what();
    }
  });
  Index failed = 0;
  for (std::size_t e = 0; e < per_experiment.size(); ++e) {
    if (!errors[e].empty()) {
      ++failed;
      continue;
    }
    for (std::size_t c = 0; c < per_experiment[e].size(); ++c) {
      truth.push_back(per_experiment[e][c]);
      flat.push_back(flat_results[e][c].theta_grid);
      tied.push_back(tied_results[e][c].theta_grid);
    }
  }
  auto to_matrix = [&](const std::vector<ParameterVector>& v) {
    Eigen::MatrixXd m(space.dim(), static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) m.col(static_cast<Index>(i)) = v[i];
    return m;
  };
  const Eigen::MatrixXd t = to_matrix(truth);
  const Eigen::VectorXd rmse_flat = rowwise_rmse(to_matrix(flat), t), rmse_tied = rowwise_rmse(to_matrix(tied), t);
  std::cout << "  " << truth.size() << " condition estimates (" << failed << " experiments failed): flat rmse "
            << fmt(rmse_flat) << ", tied rmse " << fmt(rmse_tied) << '\n';
  bool ok = check(failed == 0, "no failed experiments");
  const auto& names = space.names();
  for (Index d : design.tied_dims)
    ok &= check(rmse_tied[d] < rmse_flat[d], names[d] + ": tied " + fmt(rmse_tied[d]) + " < flat " + fmt(rmse_flat[d]));
  return ok;
}

bool criterion8(const Context& ctx) {
  const TraitModel model;
  BuildOptions o;
  o.points = 2000;
  o.t_sim = 200;
  o.t_prepaid = {1};
  o.samples = 200;
  o.seed = 808;
  o.workers = ctx.workers;
  const auto db = cached_database(ctx, "trait_2000", model, o);
  const LikelihoodIndex index(db, ctx.workers);
  bool ok = true;

  TestSpec spec;
  spec.count = 100;
  spec.t_obs = {1.0};
  RecoveryOptions ro;
  ro.methods = {Method::abc_grid_pm};
  ro.workers = ctx.workers;
  const auto report = recovery_study(index, model, spec, ro, 818);
  const auto& s = report.summary(Method::abc_grid_pm, 1.0);
  std::cout << "  " << s.items << " items, rmse " << fmt(s.rmse) << ", coverage " << fmt(s.coverage) << '\n';
  ok &= check(s.failures == 0, "no failed items");
  const auto& names = db.header.space.names();
  for (Index d = 0; d < db.dim(); ++d)
    ok &= check(s.coverage[d] >= 0.88 && s.coverage[d] <= 0.99,
                names[d] + ": coverage " + fmt(s.coverage[d]) + " in [0.88, 0.99]");

  const Eigen::MatrixXd truths = draw_test_set(db.header.space, spec, 828);
  bool sizes = true;
  for (Index i = 0; i < 10; ++i) {
    const auto data = model.simulate(truths.col(i), 1, stream_seed(838, static_cast<std::uint64_t>(i)));
    const auto r = abc_grid_pm(index, model.summarize(data), 1.0);
    sizes &= r.posterior && r.posterior->theta.cols() == 1000 && r.posterior->weights.size() == 1000;
    if (r.posterior)
      for (Index k = 1; k < r.posterior->epsilon.size(); ++k) sizes &= r.posterior->epsilon[k - 1] <= r.posterior->epsilon[k];
  }
  ok &= check(sizes, "abc-grid-pm returns exactly 1000 posterior samples with nondecreasing distances (10 datasets)");

  Rng rng = make_rng(848, 0);
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::MatrixXd x(4, 1000);
  for (Index j = 0; j < x.cols(); ++j)
    for (Index k = 0; k < 4; ++k) x(k, j) = (k + 1.0) * z(rng) + k;
  Eigen::VectorXd w(1000);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (Index j = 0; j < 1000; ++j) w[j] = u(rng);
  w /= w.sum();
  double mean_err = 0.0, cov_err = 0.0;
  for (const auto& [tp, tobs] : std::vector<std::pair<double, double>>{{1.0, 1000.0}, {100.0, 10.0}}) {
    for (bool weighted : {false, true}) {
      const Eigen::VectorXd weights = weighted ? w : Eigen::VectorXd::Constant(1000, 1.0 / 1000.0);
      const Eigen::MatrixXd y = rescale_posterior(x, tp, tobs, weighted ? w : Eigen::VectorXd());
      const Eigen::VectorXd mx = x * weights, my = y * weights;
      const Eigen::MatrixXd cx = (x.colwise() - mx) * weights.asDiagonal() * (x.colwise() - mx).transpose();
      const Eigen::MatrixXd cy = (y.colwise() - my) * weights.asDiagonal() * (y.colwise() - my).transpose();
      mean_err = std::max(mean_err, (mx - my).cwiseAbs().maxCoeff());
      cov_err = std::max(cov_err, (cy - cx * (tp / tobs)).cwiseAbs().maxCoeff() / (cx * (tp / tobs)).cwiseAbs().maxCoeff());
    }
  }
  ok &= check(mean_err <= 1e-10, "rescaled posterior mean moves by " + fmt(mean_err, 3) + " <= 1e-10");
  ok &= check(cov_err <= 1e-10, "rescaled covariance relative error " + fmt(cov_err, 3) + " against T_prepaid/T_obs");
  return ok;
}

bool criterion9(const Context&) {
  bool ok = true;
  Rng rng = make_rng(909, 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uniform_matrix = [&](Index rows, Index cols, double lo, double hi) {
    Eigen::MatrixXd m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = lo + (hi - lo) * u(rng);
    return m;
  };

  {
    const Eigen::MatrixXd X = uniform_matrix(3, 80, 0.0, 10.0);
    Eigen::VectorXd y(80);
    for (Index j = 0; j < 80; ++j) y[j] = std::sin(X(0, j)) + X(1, j) * X(2, j) / 10.0;
    const double h = 0.8, gamma = 30.0;
    const auto model = lssvm_fit(X, y, h, gamma);
    const Eigen::MatrixXd Z = model.standardizer().apply(X);
    const Index n = X.cols();
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n + 1, n + 1);
    for (Index i = 0; i < n; ++i) {
      A(0, i + 1) = A(i + 1, 0) = 1.0;
      for (Index j = 0; j < n; ++j) A(i + 1, j + 1) = std::exp(-(Z.col(i) - Z.col(j)).squaredNorm() / (2.0 * h * h));
      A(i + 1, i + 1) += 1.0 / gamma;
    }
    Eigen::VectorXd rhs(n + 1);
    rhs << 0.0, y;
    const Eigen::VectorXd sol = A.fullPivLu().solve(rhs);
    const double err = std::max(std::abs(model.bias(0) - sol[0]), (model.alpha(0) - sol.tail(n)).cwiseAbs().maxCoeff());
    ok &= check(err <= 1e-8, "LS-SVM vs dense bordered system: " + fmt(err, 3) + " <= 1e-8");
  }
  {
    double worst = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) {
      const auto series = simulate_ricker({10.0 + 20.0 * static_cast<double>(seed), 0.3, 10.0}, 400, 50, seed);
      std::vector<double> y(series.y.begin(), series.y.end());
      const auto stats = ricker_stats(y).stats;
      const auto T = static_cast<Index>(y.size());
      double mean = 0.0;
      for (double v : y) mean += v;
      mean /= static_cast<double>(T);
      for (Index lag = 1; lag <= kRickerMaxLag; ++lag) {
        double acc = 0.0;
        for (Index i = 0; i < T; ++i)
          for (Index j = 0; j < T; ++j)
            if (j - i == lag) acc += (y[i] - mean) * (y[j] - mean);
        const double oracle = acc / static_cast<double>(T);
        worst = std::max(worst, std::abs(stats[1 + lag] - oracle) / std::max(1.0, std::abs(oracle)));
      }
    }
    ok &= check(worst <= 1e-10, "autocovariances vs double sum: " + fmt(worst, 3) + " <= 1e-10");
  }
  {
    const Eigen::MatrixXd B = uniform_matrix(6, 6, -1.0, 1.0);
    const Eigen::MatrixXd w = B * B.transpose() + 0.5 * Eigen::MatrixXd::Identity(6, 6);
    const Eigen::MatrixXd winv = w.inverse();
    const MahalanobisMetric metric(w);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      const Eigen::VectorXd a = uniform_matrix(6, 1, -3.0, 3.0), b = uniform_matrix(6, 1, -3.0, 3.0);
      const double oracle = (a - b).dot(winv * (a - b));
      worst = std::max(worst, std::abs(metric(a, b) - oracle) / std::max(1.0, oracle));
      worst = std::max(worst, std::abs(mahalanobis_eps(a, b, w) - oracle) / std::max(1.0, oracle));
    }
    ok &= check(worst <= 1e-10, "Mahalanobis vs explicit inverse: " + fmt(worst, 3) + " <= 1e-10");
  }
  {
    double worst = 0.0;
    bool monotone = true;
    for (Index k : {2, 3, 4}) {
      const Eigen::MatrixXd pts = uniform_matrix(k, 150, -1.0, 1.0);
      const auto r = mvee_detailed(pts);
      for (Index j = 0; j < pts.cols(); ++j) worst = std::max(worst, r.ellipsoid.membership(pts.col(j)));
      for (std::size_t i = 1; i < r.volume_trace.size(); ++i) monotone &= r.volume_trace[i] <= r.volume_trace[i - 1];
    }
    ok &= check(worst <= 1.0 + 1e-4, "MVEE largest membership " + fmt(worst, 8) + " <= 1 + 1e-4");
    ok &= check(monotone, "MVEE volume trace nonincreasing");
  }
  {
    DEConfig c;
    c.lower = Eigen::VectorXd::Constant(4, -5.0);
    c.upper = Eigen::VectorXd::Constant(4, 5.0);
    c.max_generations = 3000;
    c.stall_generations = 200;
    c.tolerance = 0.0;
    c.seed = 3;
    const auto sphere = differential_evolution([](const Eigen::VectorXd& x) { return x.squaredNorm(); }, c);
    ok &= check(sphere.x.norm() < 1e-6, "DE sphere optimum norm " + fmt(sphere.x.norm(), 3) + " < 1e-6");
    c.lower = Eigen::VectorXd::Constant(2, -2.0);
    c.upper = Eigen::VectorXd::Constant(2, 2.0);
    c.max_generations = 5000;
    c.stall_generations = 300;
    c.seed = 5;
    const auto rosen = differential_evolution(
        [](const Eigen::VectorXd& x) { return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2); }, c);
    const double err = (rosen.x - Eigen::Vector2d(1.0, 1.0)).cwiseAbs().maxCoeff();
    ok &= check(err < 1e-4, "DE Rosenbrock distance to (1, 1) " + fmt(err, 3) + " < 1e-4");
  }
  {
    BuildOptions o;
    o.points = 100;
    o.t_sim = 10000;
    o.t_prepaid = {100};
    o.seed = 919;
    o.workers = 1;
    const auto model = GaussianMeanModel::toy();
    const auto db = build_database(model, o);
    const LikelihoodIndex index(db);
    double worst = 0.0;
    for (double s_obs : {-2.0, 0.3, 4.1}) {
      const double t_obs = 50.0;
      const StatVector s = StatVector::Constant(1, s_obs);
      std::vector<long double> ll(static_cast<std::size_t>(db.size()));
      long double top = -INFINITY;
      for (Index p = 0; p < db.size(); ++p) {
        const Eigen::MatrixXd cov = db.covariance(p, 0) * (100.0 / t_obs);
        const Eigen::VectorXd d = s - db.mu.col(p);
        ll[p] = -0.5L * static_cast<long double>(d.dot(cov.inverse() * d)) -
                0.5L * std::log(static_cast<long double>(cov.determinant()));
        top = std::max(top, ll[p]);
      }
      long double num = 0.0L, den = 0.0L;
      for (Index p = 0; p < db.size(); ++p) {
        const long double w = std::exp(ll[p] - top);
        num += w * static_cast<long double>(db.theta(0, p));
        den += w;
      }
      const auto r = posterior_mean_sl(index, s, t_obs);
      worst = std::max(worst, std::abs(r.theta_grid[0] - static_cast<double>(num / den)));
    }
    ok &= check(worst <= 1e-10, "SL posterior mean vs brute-force weighted mean: " + fmt(worst, 3) + " <= 1e-10");
  }
  return ok;
}

bool criterion10(const Context&) {
  const RickerModel ricker;
  PrepaidDatabase db;
  db.header.model_id = "synthetic";
  db.header.space = ricker.space();
  db.header.schema = ricker.schema();
  db.header.t_sim = 100000;
  db.header.t_prepaid = {100, 1000};
  db.header.samples_per_record = 0;
  const Index omega = 100000, r = db.header.schema.size();
  db.theta = design_grid(db.header.space, omega);
  Rng rng = make_rng(1010, 0);
  std::normal_distribution<double> z(0.0, 1.0);
  db.mu.resize(r, omega);
  for (std::size_t t = 0; t < 2; ++t) db.cov.emplace_back(packed_size(r), omega);
  for (Index p = 0; p < omega; ++p) {
    for (Index i = 0; i < r; ++i) db.mu(i, p) = z(rng);
    Eigen::MatrixXd a(r, r);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < r; ++j) a(i, j) = 0.3 * z(rng);
    const Eigen::MatrixXd c = a * a.transpose() + Eigen::MatrixXd::Identity(r, r);
    db.cov[0].col(p) = pack_lower(c);
    db.cov[1].col(p) = pack_lower(c * 0.1);
  }
  db.flags.assign(static_cast<std::size_t>(omega), 0);
  db.validate();
  auto t0 = Clock::now();
  const LikelihoodIndex index(db);
  std::cout << "  synthetic database: " << omega << " records, " << r << " statistics; index built in "
            << fmt(seconds_since(t0), 3) << " s\n";

  const StatVector s = db.mu.col(12345) + 0.1 * StatVector::Ones(r);
  auto median_time = [&](double t_obs) {
    std::vector<double> times;
    for (int i = 0; i < 5; ++i) {
      const auto start = Clock::now();
      const auto result = estimate_grid_ml(index, s, t_obs);
      times.push_back(seconds_since(start));
      if (result.theta_grid.size() != db.dim()) throw Error("bad estimate");
    }
    std::sort(times.begin(), times.end());
    return std::pair{times[2], times.back()};
  };
  const auto [short_med, short_max] = median_time(100.0);
  const auto [long_med, long_max] = median_time(10000.0);
  std::cout << "  grid-ml wall time: T_obs 1e2 median " << fmt(short_med, 3) << " s (max " << fmt(short_max, 3)
            << "), T_obs 1e4 median " << fmt(long_med, 3) << " s (max " << fmt(long_max, 3) << ")\n";
  bool ok = check(std::max(short_max, long_max) < 1.0, "every single estimate under 1 s");
  const double ratio = std::max(short_med, long_med) / std::min(short_med, long_med);
  ok &= check(ratio <= 2.0, "wall time ratio across T_obs " + fmt(ratio, 3) + " <= 2");
  return ok;
}

bool criterion11(const Context& ctx) {
  BuildOptions o;
  o.points = 300;
  o.t_sim = 10000;
  o.t_prepaid = {100, 1000};
  o.samples = 5;
  o.seed = 1111;
  o.workers = 1;
  const RickerModel model;
  const auto serial = build_database(model, o);
  o.workers = 4;
  const auto parallel = build_database(model, o);
  const auto bytes = serialize_database(serial);
  bool ok = check(bytes == serialize_database(parallel), "serial and 4-worker builds serialize byte for byte");

  fs::create_directories(ctx.cache);
  const fs::path path = ctx.cache / ("roundtrip" + std::to_string(::getpid()) + ".ppdb");
  save_database(serial, path);
  const auto back = load_database(path);
  ok &= check(back == serial && serialize_database(back) == bytes, "save/load round trip bit-exact");

  std::vector<char> file;
  {
    std::ifstream in(path, std::ios::binary);
    file.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto rejected = [&](const std::vector<char>& content) {
    {
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      out.write(content.data(), static_cast<std::streamsize>(content.size()));
    }
    try {
      load_database(path);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  auto flipped = file;
  flipped[flipped.size() / 2] ^= 0x01;
  const auto flip_msg = rejected(flipped);
  ok &= check(!flip_msg.empty(), "single flipped bit rejected: " + flip_msg);
  auto truncated = file;
  truncated.resize(file.size() - 100);
  const auto trunc_msg = rejected(truncated);
  ok &= check(!trunc_msg.empty(), "truncated file rejected: " + trunc_msg);
  fs::remove(path);
  fs::remove(path.string() + ".json");
  return ok;
}

struct Spawned {
  int status = -1;
  std::string out;
};

Spawned run_command(const std::string& command) {
  Spawned r;
  FILE* pipe = ::popen((command + " 2>/dev/null").c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buffer{};
  std::size_t n;
  while ((n = std::fread(buffer.data(), 1, buffer.size(), pipe)) > 0) r.out.append(buffer.data(), n);
  const int status = ::pclose(pipe);
  r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

nlohmann::json untimed(nlohmann::json j) {
  if (j.contains("diagnostics")) j["diagnostics"].erase("wall_seconds");
  return j;
}

bool criterion12(const Context& ctx) {
  if (ctx.cli.empty()) return check(false, "path to the command-line tool not given (--cli)");
  BuildOptions o;
  o.points = 1500;
  o.t_sim = 10000;
  o.t_prepaid = {100};
  o.samples = 20;
  o.seed = 1212;
  o.workers = ctx.workers;
  cached_database(ctx, "toy_service", GaussianMeanModel::toy(), o);
  const fs::path db_path = fs::absolute(ctx.cache / "toy_service.ppdb");

  auto catalog = std::make_shared<Catalog>();
  catalog->load(db_path);
  ServerOptions so;
  so.port = 0;
  so.threads = 4;
  so.max_queued = 64;
  Server server(catalog, so);
  const int port = server.start();
  std::cout << "  server on port " << port << '\n';
  bool ok = true;

  const fs::path data_path = ctx.cache / ("toy_data" + std::to_string(::getpid()) + ".txt");
  std::string data_text;
  {
    const auto model = GaussianMeanModel::toy();
    const auto data = model.simulate(ParameterVector::Constant(1, 1.7), 80, 5);
    std::ostringstream text;
    text.precision(17);
    for (Index t = 0; t < data.size(); ++t) text << data.rows(t, 0) << '\n';
    data_text = text.str();
    std::ofstream(data_path) << data_text;
  }
  struct Case {
    std::string args;
    nlohmann::json body;
  };
  const std::vector<Case> cases{
      {"--stats 0.42 --tobs 100", {{"model", "toy"}, {"statistics", {0.42}}, {"t_obs", 100}}},
      {"--data " + data_path.string(), {{"model", "toy"}, {"data", data_text}}},
      {"--stats -2.5 --tobs 300 --method svm-ml --seed 4",
       {{"model", "toy"}, {"statistics", {-2.5}}, {"t_obs", 300}, {"method", "svm-ml"}, {"seed", 4}}},
      {"--stats 1.1 --tobs 100 --method abc-grid-pm --seed 2",
       {{"model", "toy"}, {"statistics", {1.1}}, {"t_obs", 100}, {"method", "abc-grid-pm"}, {"seed", 2}}},
  };
  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(120, 0);
  for (const auto& c : cases) {
    const auto cli = run_command(ctx.cli + " estimate --json --db " + db_path.string() + " --model toy " + c.args);
    const auto res = client.Post("/v1/estimate", c.body.dump(), "application/json");
    bool same = cli.status == 0 && res && res->status == 200;
    if (same) same = untimed(nlohmann::json::parse(cli.out)) == untimed(nlohmann::json::parse(res->body));
    ok &= check(same, "CLI and HTTP agree for: " + c.args);
  }

  auto invalid = client.Post("/v1/estimate", R"({"model":"toy","statistics":[0.1],"level":2,"neighbors":0})",
                             "application/json");
  if (!invalid) std::cout << "  invalid request: " << httplib::to_string(invalid.error()) << '\n';
  else if (invalid->status != 400) std::cout << "  invalid request: status " << invalid->status << '\n';
  bool fields = invalid && invalid->status == 400;
  if (fields) {
    const auto body = nlohmann::json::parse(invalid->body);
    std::vector<std::string> names;
    for (const auto& f : body["fields"]) names.push_back(f["field"].get<std::string>());
    for (const char* want : {"t_obs", "level", "neighbors"})
      fields &= std::find(names.begin(), names.end(), want) != names.end();
  }
  ok &= check(fields, "invalid request answered 400 with t_obs, level and neighbors field errors");
  const auto cli_invalid = run_command(ctx.cli + " estimate --db " + db_path.string() + " --model toy --stats 0.1");
  ok &= check(cli_invalid.status == 2, "CLI rejects the same request with exit status " + std::to_string(cli_invalid.status));

  const int concurrent = 32;
  std::vector<int> statuses(concurrent, 0);
  std::vector<bool> matches(concurrent, false);
  std::vector<std::thread> threads;
  std::mutex log_mutex;
  for (int i = 0; i < concurrent; ++i)
    threads.emplace_back([&, i] {
      EstimateRequest r;
      r.model = "toy";
      r.statistics = std::vector<double>{-4.0 + 0.25 * i};
      r.t_obs = 100;
      if (i % 4 == 1) r.method = "sl-grid-pm";
      httplib::Client local("127.0.0.1", port);
      local.set_read_timeout(120, 0);
      const auto res = local.Post("/v1/estimate", request_to_json(r).dump(), "application/json");
      if (!res) {
        std::lock_guard lock(log_mutex);
        std::cout << "  request " << i << ": " << httplib::to_string(res.error()) << '\n';
        return;
      }
      statuses[static_cast<std::size_t>(i)] = res->status;
      matches[static_cast<std::size_t>(i)] =
          res->status == 200 &&
          untimed(nlohmann::json::parse(res->body)) == untimed(nlohmann::json::parse(run_estimate(*catalog, r).dump()));
    });
  for (auto& t : threads) t.join();
  const auto succeeded = std::count(statuses.begin(), statuses.end(), 200);
  const auto matched = std::count(matches.begin(), matches.end(), true);
  ok &= check(succeeded == concurrent && matched == concurrent,
              std::to_string(succeeded) + " of 32 concurrent requests succeeded, " + std::to_string(matched) +
                  " match the library result");
  server.stop();
  fs::remove(data_path);
  return ok;
}

const std::map<int, std::pair<std::string, std::function<bool(const Context&)>>> kCriteria{
    {1, {"toy analytic agreement", criterion1}},
    {2, {"toy trade-off shape", criterion2}},
    {3, {"ricker desk recovery", criterion3}},
    {4, {"monotone information", criterion4}},
    {5, {"bootstrap coverage", criterion5}},
    {6, {"prior benefit", criterion6}},
    {7, {"tying benefit", criterion7}},
    {8, {"trait abc", criterion8}},
    {9, {"oracle equivalences", criterion9}},
    {10, {"grid-ml speed", criterion10}},
    {11, {"determinism and format", criterion11}},
    {12, {"service conformance", criterion12}},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Runs the acceptance criteria"};
  std::vector<int> selected;
  Context ctx;
  std::string cache = "acceptance_cache";
  ctx.workers = default_workers();
  app.add_option("--criterion", selected, "criterion number (repeatable); all when absent")->check(CLI::Range(1, 12));
  app.add_option("--cache", cache, "directory for cached databases");
  app.add_option("--cli", ctx.cli, "path to the prepaid command-line tool");
  app.add_option("--workers", ctx.workers, "worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  ctx.cache = cache;
  if (selected.empty())
    for (const auto& [n, c] : kCriteria) selected.push_back(n);

  bool all = true;
  for (int n : selected) {
    const auto& [name, run] = kCriteria.at(n);
    std::cout << "criterion " << n << ": " << name << '\n' << std::flush;
    const auto start = Clock::now();
    bool ok = false;
    try {
      ok = run(ctx);
    } catch (const std::exception& e) {
      std::cout << "  error: " << e.what() << '\n';
    }
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << n << " (" << name << ") in " << fmt(seconds_since(start), 4)
              << " s\n"
              << std::flush;
    all &= ok;
  }
  return all ? 0 : 1;
}
