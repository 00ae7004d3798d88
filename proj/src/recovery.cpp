#include "prepaid/recovery.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "prepaid/parallel.hpp"
#include "prepaid/rng.hpp"

namespace prepaid {

namespace {

constexpr int kMaxTrimAttempts = 10000;

bool point_method(Method m) {
  return m == Method::grid_ml || m == Method::svm_ml || m == Method::lin_ml || m == Method::grid_map;
}

EstimationResult run_method(Method method, const LikelihoodIndex& index, const StatVector& s, double t_obs,
                            const RecoveryOptions& options, std::uint64_t seed) {
  switch (method) {
    case Method::grid_ml:
      return estimate_grid_ml(index, s, t_obs);
    case Method::svm_ml:
    case Method::lin_ml: {
      SurrogateOptions so = options.surrogate;
      so.seed = seed;
      return method == Method::svm_ml ? estimate_svm_ml(index, s, t_obs, so) : estimate_lin_ml(index, s, t_obs, so);
    }
    case Method::grid_map:
      return estimate_grid_map(index, s, t_obs, *options.map_prior);
    case Method::sl_grid_pm:
      return posterior_mean_sl(index, s, t_obs, options.abc.level);
    case Method::abc_grid_pm:
      return abc_grid_pm(index, s, t_obs, options.abc);
    case Method::abc_svm_pm: {
      AbcOptions ao = options.abc;
      ao.seed = seed;
      return abc_svm_pm(index, s, t_obs, ao);
    }
    case Method::multi_condition:
      break;
  }
  throw UnsupportedMethod(std::string("method ") + method_name(method) + " is not available in a single-condition study");
}

Eigen::VectorXd nan_vector(Index k) { return Eigen::VectorXd::Constant(k, std::numeric_limits<double>::quiet_NaN()); }

}  // namespace

Eigen::MatrixXd draw_test_set(const ParameterSpace& space, const TestSpec& spec, std::uint64_t seed) {
  if (spec.count < 1) throw DomainError("test set size must be >= 1");
  if (!(spec.trim >= 0.0 && spec.trim < 0.5)) throw DomainError("trim must lie in [0, 0.5)");
  const Prior generating = spec.generating ? *spec.generating : Prior::uniform(space);
  const Eigen::VectorXd lo = space.lower() + spec.trim * space.range();
  const Eigen::VectorXd hi = space.upper() - spec.trim * space.range();
  Eigen::MatrixXd out(space.dim(), spec.count);
  std::uint64_t draw = 0;
  for (Index i = 0; i < spec.count; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxTrimAttempts) throw DomainError("generating prior rarely falls inside the trimmed box");
      const ParameterVector theta = generating.sample(stream_seed(seed, draw++));
      if (theta.size() != space.dim()) throw DomainError("generating prior has the wrong dimension");
      if ((theta.array() > lo.array()).all() && (theta.array() < hi.array()).all()) {
        out.col(i) = theta;
        break;
      }
    }
  }
  return out;
}

const MethodSummary& RecoveryReport::summary(Method method, double t_obs) const {
  for (const auto& s : summaries)
    if (s.method == method && s.t_obs == t_obs) return s;
  throw DomainError(std::string("no summary for ") + method_name(method) + " at T_obs " + std::to_string(t_obs));
}

MethodSummary summarize_rows(const std::vector<const RecoveryRow*>& rows, const ParameterSpace& space) {
  const Index dims = space.dim();
  MethodSummary s;
  if (!rows.empty()) {
    s.method = rows.front()->method;
    s.t_obs = rows.front()->t_obs;
  }
  s.rmse = nan_vector(dims);
  s.mae = nan_vector(dims);
  s.median_abs_error = nan_vector(dims);
  s.coverage = nan_vector(dims);
  std::vector<const RecoveryRow*> ok;
  for (const auto* r : rows) {
    if (r->error.empty()) ok.push_back(r);
    else ++s.failures;
  }
  s.items = static_cast<Index>(ok.size());
  if (ok.empty()) return s;
  double seconds = 0.0;
  for (const auto* r : ok) seconds += r->seconds;
  const double n = static_cast<double>(ok.size());
  s.mean_seconds = seconds / n;
  for (Index d = 0; d < dims; ++d) {
    std::vector<double> abs_err;
    double sq = 0.0, sum = 0.0;
    for (const auto* r : ok) {
      const double e = r->estimate[d] - r->truth[d];
      sq += e * e;
      sum += std::abs(e);
      abs_err.push_back(std::abs(e));
    }
    s.rmse[d] = std::sqrt(sq / n);
    s.mae[d] = sum / n;
    s.median_abs_error[d] = quantile(std::move(abs_err), 0.5);
  }
  // Intervals are on the user scale.
  Eigen::VectorXd hits = Eigen::VectorXd::Zero(dims);
  Index with_ci = 0;
  for (const auto* r : ok) {
    if (!r->ci) continue;
    ++with_ci;
    const Eigen::VectorXd truth = space.to_user(r->truth);
    for (Index d = 0; d < dims; ++d) {
      const auto& iv = r->ci->intervals[static_cast<std::size_t>(d)];
      if (truth[d] >= iv.low && truth[d] <= iv.high) hits[d] += 1.0;
    }
  }
  if (with_ci > 0) s.coverage = hits / static_cast<double>(with_ci);
  return s;
}

RecoveryReport recovery_study(const LikelihoodIndex& index, const Model& model, const TestSpec& spec,
                              const RecoveryOptions& options, std::uint64_t seed) {
  const auto& db = index.database();
  const auto& space = db.header.space;
  if (!(model.space() == space)) throw DomainError("model and database parameter spaces differ");
  if (options.methods.empty()) throw DomainError("at least one method is required");
  for (Method m : options.methods) {
    if (m == Method::multi_condition)
      throw UnsupportedMethod("multicond is not available in a single-condition study");
    if (m == Method::grid_map && !options.map_prior) throw DomainError("grid-map needs an estimating prior");
  }
  for (double t : spec.t_obs)
    if (!(t >= 1.0)) throw DomainError("T_obs must be >= 1");

  const Eigen::MatrixXd truths = draw_test_set(space, spec, stream_seed(seed, 0));
  const std::size_t n_methods = options.methods.size();
  const std::size_t n_items = static_cast<std::size_t>(spec.count);
  RecoveryReport report;
  report.space = space;
  report.rows.resize(spec.t_obs.size() * n_items * n_methods);

  const std::size_t units = spec.t_obs.size() * n_items;
  parallel_for(units, options.workers == 0 ? default_workers() : options.workers, [&](std::size_t unit) {
    const std::size_t ti = unit / n_items;
    const std::size_t item = unit % n_items;
    const double t_obs = spec.t_obs[ti];
    const ParameterVector truth = truths.col(static_cast<Index>(item));
    const std::uint64_t item_seed = stream_seed(stream_seed(seed, ti + 1), item);
    std::string sim_error;
    StatVector s;
    try {
      s = model.summarize(model.simulate(truth, static_cast<Index>(std::llround(t_obs)), item_seed));
      if (!s.allFinite()) sim_error = "non-finite statistics";
    } catch (const Error& e) {
      sim_error = e.what();
    }
    for (std::size_t mi = 0; mi < n_methods; ++mi) {
      RecoveryRow& row = report.rows[unit * n_methods + mi];
      row.item = static_cast<Index>(item);
      row.t_obs = t_obs;
      row.method = options.methods[mi];
      row.truth = truth;
      if (!sim_error.empty()) {
        row.error = "simulation: " + sim_error;
        continue;
      }
      const auto start = std::chrono::steady_clock::now();
      try {
        EstimationResult r = run_method(row.method, index, s, t_obs, options, stream_seed(item_seed, mi + 1));
        row.estimate = r.theta_grid;
        row.ci = r.ci;
        row.flags = r.diagnostics.flags;
        if (options.bootstrap && point_method(row.method)) {
          BootstrapOptions bo = options.boot;
          bo.seed = stream_seed(item_seed, 1000 + mi);
          bo.surrogate.seed = stream_seed(item_seed, 2000 + mi);
          if (options.workers != 1) bo.workers = 1;
          row.ci = bootstrap_ci(index, model, s, r.theta_grid, t_obs, bo).ci;
        }
      } catch (const Error& e) {
        row.error = e.what();
      }
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
  });

  for (std::size_t ti = 0; ti < spec.t_obs.size(); ++ti) {
    for (std::size_t mi = 0; mi < n_methods; ++mi) {
      std::vector<const RecoveryRow*> rows;
      for (std::size_t item = 0; item < n_items; ++item) rows.push_back(&report.rows[(ti * n_items + item) * n_methods + mi]);
      MethodSummary summary = summarize_rows(rows, space);
      summary.method = options.methods[mi];
      summary.t_obs = spec.t_obs[ti];
      report.summaries.push_back(std::move(summary));
    }
  }
  return report;
}

void write_recovery_csv(const RecoveryReport& report, std::ostream& out) {
  const auto& names = report.space.names();
  out << "item,t_obs,method";
  for (const auto& n : names) out << ",true_" << n;
  for (const auto& n : names) out << ",est_" << n;
  for (const auto& n : names) out << ",low_" << n << ",high_" << n;
  out << ",seconds,flags,error\n";
  out.precision(17);
  for (const auto& r : report.rows) {
    out << r.item << ',' << r.t_obs << ',' << method_name(r.method);
    for (Index d = 0; d < r.truth.size(); ++d) out << ',' << r.truth[d];
    for (Index d = 0; d < r.truth.size(); ++d) {
      out << ',';
      if (r.estimate.size() == r.truth.size()) out << r.estimate[d];
    }
    for (Index d = 0; d < r.truth.size(); ++d) {
      out << ',';
      if (r.ci) out << r.ci->intervals[static_cast<std::size_t>(d)].low;
      out << ',';
      if (r.ci) out << r.ci->intervals[static_cast<std::size_t>(d)].high;
    }
    out << ',' << r.seconds << ',';
    for (std::size_t i = 0; i < r.flags.size(); ++i) out << (i ? ";" : "") << r.flags[i];
    std::string error = r.error;
    std::replace(error.begin(), error.end(), ',', ';');
    std::replace(error.begin(), error.end(), '\n', ' ');
    out << ',' << error << '\n';
  }
}

namespace {

nlohmann::ordered_json per_parameter(const std::vector<std::string>& names, const Eigen::VectorXd& v) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t d = 0; d < names.size(); ++d) {
    const double x = v[static_cast<Index>(d)];
    j[names[d]] = std::isfinite(x) ? nlohmann::ordered_json(x) : nlohmann::ordered_json(nullptr);
  }
  return j;
}

}  // namespace

nlohmann::ordered_json recovery_json(const RecoveryReport& report) {
  nlohmann::ordered_json out;
  const auto& names = report.space.names();
  std::vector<std::string> scale;
  for (std::size_t d = 0; d < names.size(); ++d)
    scale.push_back(report.space.transforms()[d] == Transform::log ? "log(" + names[d] + ")" : names[d]);
  out["parameters"] = scale;
  out["error_scale"] = "grid";
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& s : report.summaries) {
    nlohmann::ordered_json j;
    j["method"] = method_tag(s.method);
    j["t_obs"] = s.t_obs;
    j["items"] = s.items;
    j["failures"] = s.failures;
    j["rmse"] = per_parameter(scale, s.rmse);
    j["mae"] = per_parameter(scale, s.mae);
    j["median_abs_error"] = per_parameter(scale, s.median_abs_error);
    j["coverage"] = per_parameter(scale, s.coverage);
    j["mean_seconds"] = s.mean_seconds;
    rows.push_back(std::move(j));
  }
  out["summaries"] = std::move(rows);
  out["reference"] = reference_tables();
  return out;
}

nlohmann::ordered_json reference_tables() {
  using J = nlohmann::ordered_json;
  J ricker;
  ricker["parameters"] = {"r", "sigma", "phi"};
  ricker["rmse_t1e5"] = {
      {"Grid-ML", {1.2, 0.021, 0.14}}, {"SVM-ML", {0.43, 0.0044, 0.023}}, {"Lin-ML", {0.54, 0.013, 0.091}}};
  ricker["bootstrap_coverage"] = {
      {"1e2", {0.95, 0.84, 0.97}}, {"5e2", {0.96, 0.94, 0.96}}, {"1e3", {0.97, 0.95, 0.97}}};
  ricker["grid_ml_seconds"] = 0.044;
  ricker["svm_ml_seconds"] = 3.7;
  ricker["map_rmse_t1e2"] = {
      {"generated_P1", {{"P1", {8.2, 0.13, 0.53}}, {"P2", {10, 0.12, 0.82}}, {"P3", {16, 0.17, 0.94}}}},
      {"generated_P2", {{"P1", {10, 0.13, 0.55}}, {"P2", {6.5, 0.072, 0.43}}, {"P3", {11, 0.12, 0.60}}}},
      {"generated_P3", {{"P1", {4.4, 0.15, 0.33}}, {"P2", {6.9, 0.19, 0.51}}, {"P3", {3.5, 0.065, 0.28}}}}};
  ricker["tied_rmse_t1e2"] = {{"flat", {88, 0.17, 0.42}}, {"tied", {61, 0.11, 0.36}}};

  J trait;
  trait["parameters"] = {"log(I)", "log(A)", "h", "log(sigma)"};
  trait["rmse"] = {
      {"t1_SL-Grid-PM_1e5", {0.17, 0.66, 7.49, 0.7}},   {"t1_ABC-Grid-PM_1e5", {0.16, 0.63, 7.9, 0.7}},
      {"t1_ABC-Grid-PM_5e5", {0.16, 0.62, 8.17, 0.7}},  {"t1000_ABC-Grid-PM_1e5", {0.07, 0.35, 6.41, 0.61}},
      {"t1000_ABC-Grid-PM_5e5", {0.05, 0.27, 4.83, 0.48}}, {"t1000_ABC-SVM-PM_1e5", {0.03, 0.23, 5.24, 0.42}},
      {"t1000_ABC-SVM-PM_5e5", {0.03, 0.21, 4.39, 0.4}}};
  trait["mae"] = {
      {"t1_SL-Grid-PM_1e5", {0.1, 0.39, 0.96, 0.38}},    {"t1_ABC-Grid-PM_1e5", {0.1, 0.4, 1, 0.4}},
      {"t1_ABC-Grid-PM_5e5", {0.1, 0.38, 1, 0.39}},      {"t1000_ABC-Grid-PM_1e5", {0.03, 0.14, 0.39, 0.32}},
      {"t1000_ABC-Grid-PM_5e5", {0.02, 0.09, 0.27, 0.22}}, {"t1000_ABC-SVM-PM_1e5", {0.02, 0.07, 0.18, 0.14}},
      {"t1000_ABC-SVM-PM_5e5", {0.01, 0.07, 0.17, 0.15}}};
  trait["coverage"] = {
      {"t1_ABC-Grid-PM_1e5", {0.94, 0.95, 0.95, 0.94}},    {"t1_ABC-Grid-PM_5e5", {0.94, 0.95, 0.94, 0.94}},
      {"t1000_ABC-Grid-PM_1e5", {0.27, 0.3, 0.29, 0.27}},  {"t1000_ABC-Grid-PM_5e5", {0.47, 0.5, 0.48, 0.48}},
      {"t1000_ABC-SVM-PM_1e5", {0.93, 0.94, 0.96, 0.93}},  {"t1000_ABC-SVM-PM_5e5", {0.96, 0.95, 0.96, 0.95}}};

  J out;
  out["note"] = "full-scale figures (grids of 1e5 to 5e5 points), for comparison only";
  out["ricker"] = std::move(ricker);
  out["trait"] = std::move(trait);
  return out;
}

}  // namespace prepaid
