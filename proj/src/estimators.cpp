#include "prepaid/estimators.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <set>

#include "prepaid/parallel.hpp"

namespace prepaid {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct MethodInfo {
  Method method;
  const char* tag;
  const char* name;
};

constexpr MethodInfo kMethods[] = {
    {Method::grid_ml, "Grid-ML", "grid-ml"},
    {Method::svm_ml, "SVM-ML", "svm-ml"},
    {Method::lin_ml, "Lin-ML", "lin-ml"},
    {Method::grid_map, "Grid-MAP", "grid-map"},
    {Method::multi_condition, "MultiCond", "multicond"},
    {Method::sl_grid_pm, "SL-Grid-PM", "sl-grid-pm"},
    {Method::abc_grid_pm, "ABC-Grid-PM", "abc-grid-pm"},
    {Method::abc_svm_pm, "ABC-SVM-PM", "abc-svm-pm"},
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void check_observation(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs) {
  const auto& db = index.database();
  if (s_obs.size() != db.stat_count())
    throw DomainError("expected " + std::to_string(db.stat_count()) + " statistics, got " +
                      std::to_string(s_obs.size()));
  if (!s_obs.allFinite()) throw DomainError("observed statistics must be finite");
  if (!(t_obs >= 1.0)) throw DomainError("T_obs must be >= 1");
}

void finish(EstimationResult& out, const ParameterSpace& space, const Stopwatch& clock) {
  out.theta = space.to_user(out.theta_grid);
  out.diagnostics.wall_seconds = clock.seconds();
}

EstimationResult from_neighbors(const LikelihoodIndex& index, const NeighborSet& nn, Method method) {
  const auto& db = index.database();
  EstimationResult out;
  out.method = method;
  out.theta_grid = db.theta.col(nn.indices.front());
  out.diagnostics.objective = nn.scores.front();
  out.diagnostics.neighbors = nn.indices;
  out.diagnostics.neighbor_scores = nn.scores;
  out.diagnostics.t_prepaid = db.header.t_prepaid[nn.t_index];
  return out;
}

Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& source, const std::vector<Index>& cols) {
  Eigen::MatrixXd out(source.rows(), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Index>(j)) = source.col(cols[j]);
  return out;
}

/// Indices 0..n-1 of the `take` smallest values, ties to the lower index.
std::vector<Index> smallest(const Eigen::Ref<const Eigen::VectorXd>& values, Index take) {
  std::vector<Index> order(static_cast<std::size_t>(values.size()));
  std::iota(order.begin(), order.end(), Index{0});
  take = std::clamp<Index>(take, 0, values.size());
  auto less = [&](Index a, Index b) { return values[a] < values[b] || (values[a] == values[b] && a < b); };
  std::partial_sort(order.begin(), order.begin() + take, order.end(), less);
  order.resize(static_cast<std::size_t>(take));
  return order;
}

/// Negative scaled synthetic log-likelihood with a fixed covariance factor.
class FixedCovarianceLoss {
 public:
  FixedCovarianceLoss(Eigen::MatrixXd L, double log_det, double t_prepaid, double t_obs)
      : L_(std::move(L)), c_(t_prepaid / t_obs) {
    offset_ = 0.5 * (static_cast<double>(L_.rows()) * std::log(c_) + log_det);
  }

  double operator()(const StatVector& s_obs, const StatVector& predicted) const {
    const Eigen::VectorXd z = L_.triangularView<Eigen::Lower>().solve(s_obs - predicted);
    return 0.5 * z.squaredNorm() / c_ + offset_;
  }

 private:
  Eigen::MatrixXd L_;
  double c_;
  double offset_ = 0.0;
};

/// DE over the neighbor box of `loss(predict(theta))`, seeded with the
/// neighbors that score best under the same objective.
DEResult maximize_surrogate(const Eigen::MatrixXd& X, const std::function<double(const Eigen::VectorXd&)>& loss,
                            int max_generations, std::uint64_t seed, double* best_neighbor) {
  const Index n = X.cols();
  const Index k = X.rows();
  Eigen::VectorXd neighbor_loss(n);
  for (Index j = 0; j < n; ++j) neighbor_loss[j] = loss(X.col(j));
  for (Index j = 0; j < n; ++j)
    if (std::isnan(neighbor_loss[j])) neighbor_loss[j] = kInf;
  DEConfig config;
  config.lower = X.rowwise().minCoeff();
  config.upper = X.rowwise().maxCoeff();
  config.max_generations = max_generations;
  config.seed = seed;
  const Index population = std::max<Index>(15, 10 * k);
  const auto seeds = smallest(neighbor_loss, std::min<Index>(n, population / 2));
  config.initial = gather_columns(X, seeds);
  *best_neighbor = neighbor_loss[seeds.front()];
  return differential_evolution(loss, config);
}

EstimationResult surrogate_ml(Method method, const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                              const SurrogateOptions& options) {
  Stopwatch clock;
  check_observation(index, s_obs, t_obs);
  const auto& db = index.database();
  const auto& space = db.header.space;
  if (options.neighbors < 1) throw DomainError("neighbor count must be >= 1");
  if (options.neighbors > db.size()) throw DomainError("neighbor count exceeds the grid size");
  const NeighborSet nn = nn_by_synthlik(index, s_obs, t_obs, options.neighbors);
  EstimationResult grid = from_neighbors(index, nn, Method::grid_ml);
  auto fallback = [&](const std::string& why) {
    grid.method = method;
    grid.diagnostics.flags.push_back("fallback-grid-ml");
    grid.diagnostics.flags.push_back(why);
    finish(grid, space, clock);
    return grid;
  };

  const Eigen::MatrixXd X = gather_columns(db.theta, nn.indices);
  const Eigen::MatrixXd Y = gather_columns(db.mu, nn.indices);
  const auto& schema = db.header.schema;
  std::function<StatVector(const Eigen::VectorXd&)> predict;
  try {
    if (method == Method::lin_ml) {
      auto lin = std::make_shared<LinearSurrogate>(LinearSurrogate::fit(X, Y));
      predict = [lin, &schema](const Eigen::VectorXd& x) { return clamp_predictions(lin->predict(x), schema); };
    } else {
      auto svm = std::make_shared<KernelSurrogate>(fit_tuned_surrogate(X, Y, options.tune));
      predict = [svm, &schema](const Eigen::VectorXd& x) { return clamp_predictions(svm->predict(x), schema); };
    }
  } catch (const Error&) {
    return fallback("surrogate-fit-failed");
  }

  const Index nearest = nn.indices.front();
  const FixedCovarianceLoss loss(index.factor(nearest, nn.t_index), index.log_det(nearest, nn.t_index),
                                 static_cast<double>(db.header.t_prepaid[nn.t_index]), t_obs);
  auto objective = [&](const Eigen::VectorXd& theta) { return loss(s_obs, predict(theta)); };
  double best_neighbor = kInf;
  DEResult de;
  try {
    de = maximize_surrogate(X, objective, options.max_generations, options.seed, &best_neighbor);
  } catch (const OptimizationError&) {
    return fallback("optimizer-failed");
  }
  if (!std::isfinite(de.value) || de.value > best_neighbor) return fallback("surrogate-below-grid");

  EstimationResult out = grid;
  out.method = method;
  out.theta_grid = de.x;
  out.diagnostics.objective = -de.value;
  out.diagnostics.iterations = de.generations;
  finish(out, space, clock);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

const char* method_tag(Method m) noexcept {
  for (const auto& info : kMethods)
    if (info.method == m) return info.tag;
  return "?";
}

const char* method_name(Method m) noexcept {
  for (const auto& info : kMethods)
    if (info.method == m) return info.name;
  return "?";
}

Method parse_method(std::string_view name) {
  for (const auto& info : kMethods)
    if (name == info.name || name == info.tag) return info.method;
  std::string valid;
  for (const auto& info : kMethods) valid += std::string(valid.empty() ? "" : ", ") + info.name;
  throw UnsupportedMethod("unknown method '" + std::string(name) + "'; valid methods: " + valid);
}

std::vector<std::string> method_names() {
  std::vector<std::string> out;
  for (const auto& info : kMethods) out.emplace_back(info.name);
  return out;
}

bool EstimationResult::has_flag(std::string_view flag) const {
  return std::find(diagnostics.flags.begin(), diagnostics.flags.end(), flag) != diagnostics.flags.end();
}

// ---------------------------------------------------------------------------

EstimationResult estimate_grid_ml(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                  const GridOptions& options) {
  Stopwatch clock;
  check_observation(index, s_obs, t_obs);
  const NeighborSet nn = nn_by_synthlik(index, s_obs, t_obs, std::max<Index>(1, options.report_neighbors));
  EstimationResult out = from_neighbors(index, nn, Method::grid_ml);
  finish(out, index.database().header.space, clock);
  return out;
}

EstimationResult estimate_svm_ml(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                 const SurrogateOptions& options) {
  return surrogate_ml(Method::svm_ml, index, s_obs, t_obs, options);
}

EstimationResult estimate_lin_ml(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                 const SurrogateOptions& options) {
  return surrogate_ml(Method::lin_ml, index, s_obs, t_obs, options);
}

EstimationResult estimate_grid_map(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                   const Prior& prior, const GridOptions& options) {
  Stopwatch clock;
  check_observation(index, s_obs, t_obs);
  const auto& db = index.database();
  std::size_t t = 0;
  Eigen::VectorXd scores = index.logliks(s_obs, t_obs, &t);
  if (index.usable_count(t) == 0) throw EmptyDatabase("no usable grid point in the database");
  for (Index p = 0; p < scores.size(); ++p)
    if (scores[p] > -kInf) scores[p] += prior.log_density(db.theta.col(p));
  NeighborSet nn;
  nn.t_index = t;
  nn.indices = top_n(scores, std::max<Index>(1, options.report_neighbors));
  if (nn.indices.empty()) throw DomainError("prior assigns zero density to every usable grid point");
  for (Index p : nn.indices) nn.scores.push_back(scores[p]);
  EstimationResult out = from_neighbors(index, nn, Method::grid_map);
  finish(out, db.header.space, clock);
  return out;
}

std::vector<EstimationResult> estimate_multicondition(const LikelihoodIndex& index,
                                                      const std::vector<StatVector>& s_obs,
                                                      const std::vector<double>& t_obs,
                                                      const std::vector<Index>& tied_dims, double sigma_prior,
                                                      const MultiConditionOptions& options) {
  Stopwatch clock;
  const auto& db = index.database();
  const auto& space = db.header.space;
  const std::size_t conditions = s_obs.size();
  if (conditions < 2) throw DomainError("multi-condition estimation needs at least two conditions");
  if (t_obs.size() != conditions) throw DomainError("one T_obs per condition is required");
  if (tied_dims.empty()) throw DomainError("at least one tied dimension is required");
  if (!(sigma_prior > 0.0)) throw DomainError("sigma_prior must be > 0");
  for (Index d : tied_dims)
    if (d < 0 || d >= space.dim()) throw DomainError("tied dimension out of range");
  if (options.shortlist < 1) throw DomainError("shortlist size must be >= 1");
  const TyingPrior prior(tied_dims, sigma_prior, space.range());

  std::vector<Eigen::VectorXd> scores(conditions);
  std::vector<std::vector<Index>> shortlist(conditions);
  std::vector<std::size_t> t_used(conditions);
  for (std::size_t c = 0; c < conditions; ++c) {
    check_observation(index, s_obs[c], t_obs[c]);
    scores[c] = index.logliks(s_obs[c], t_obs[c], &t_used[c]);
    shortlist[c] = top_n(scores[c], options.shortlist);
    if (shortlist[c].empty()) throw EmptyDatabase("no usable grid point in the database");
  }

  std::vector<std::size_t> choice(conditions, 0);
  std::vector<ParameterVector> thetas(conditions);
  for (std::size_t c = 0; c < conditions; ++c) thetas[c] = db.theta.col(shortlist[c][0]);
  auto joint = [&] {
    double total = prior.log_density(thetas);
    for (std::size_t c = 0; c < conditions; ++c) total += scores[c][shortlist[c][choice[c]]];
    return total;
  };
  int sweeps_done = 0;
  if (std::isfinite(sigma_prior)) {
    for (int sweep = 0; sweep < options.sweeps; ++sweep) {
      ++sweeps_done;
      bool changed = false;
      for (std::size_t c = 0; c < conditions; ++c) {
        std::size_t best = choice[c];
        double best_value = -kInf;
        for (std::size_t j = 0; j < shortlist[c].size(); ++j) {
          thetas[c] = db.theta.col(shortlist[c][j]);
          const double value = scores[c][shortlist[c][j]] + prior.log_density(thetas);
          if (value > best_value) {
            best_value = value;
            best = j;
          }
        }
        if (best != choice[c]) changed = true;
        choice[c] = best;
        thetas[c] = db.theta.col(shortlist[c][best]);
      }
      if (!changed) break;
    }
    for (Index d : tied_dims) {
      double mean = 0.0;
      for (const auto& th : thetas) mean += th[d];
      mean /= static_cast<double>(conditions);
      for (auto& th : thetas) th[d] = mean;
    }
  }
  const double objective = joint();

  std::vector<EstimationResult> out(conditions);
  for (std::size_t c = 0; c < conditions; ++c) {
    auto& r = out[c];
    r.method = Method::multi_condition;
    r.theta_grid = thetas[c];
    r.diagnostics.objective = objective;
    r.diagnostics.t_prepaid = db.header.t_prepaid[t_used[c]];
    r.diagnostics.neighbors.assign(shortlist[c].begin(),
                                   shortlist[c].begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(
                                                              shortlist[c].size(), 100)));
    for (Index p : r.diagnostics.neighbors) r.diagnostics.neighbor_scores.push_back(scores[c][p]);
    r.diagnostics.iterations = sweeps_done;
    if (!std::isfinite(sigma_prior)) r.diagnostics.flags.push_back("untied");
    finish(r, space, clock);
  }
  return out;
}

EstimationResult posterior_mean_sl(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                   double level) {
  Stopwatch clock;
  check_observation(index, s_obs, t_obs);
  const auto& db = index.database();
  std::size_t t = 0;
  const Eigen::VectorXd scores = index.logliks(s_obs, t_obs, &t);
  if (index.usable_count(t) == 0) throw EmptyDatabase("no usable grid point in the database");
  const double top = scores.maxCoeff();
  Eigen::VectorXd w = (scores.array() - top).exp().matrix();
  for (Index p = 0; p < w.size(); ++p)
    if (!(scores[p] > -kInf)) w[p] = 0.0;
  const double total = w.sum();
  if (!(total > 0.0) || !std::isfinite(total)) {
    auto out = estimate_grid_ml(index, s_obs, t_obs);
    out.method = Method::sl_grid_pm;
    out.diagnostics.flags.push_back("fallback-grid-ml");
    return out;
  }
  w /= total;
  EstimationResult out;
  out.method = Method::sl_grid_pm;
  out.theta_grid = db.theta * w;
  out.diagnostics.objective = top;
  out.diagnostics.t_prepaid = db.header.t_prepaid[t];
  out.diagnostics.neighbors = top_n(scores, std::min<Index>(100, db.size()));
  for (Index p : out.diagnostics.neighbors) out.diagnostics.neighbor_scores.push_back(scores[p]);
  PosteriorSample weighted{db.theta, w, Eigen::VectorXd::Zero(db.size())};
  out.ci = posterior_intervals(db.header.space, weighted, level, out.theta_grid);
  finish(out, db.header.space, clock);
  return out;
}

// ---------------------------------------------------------------------------
// Prepaid ABC

namespace {

struct AbcCore {
  std::size_t t = 0;
  Index m = 0;
  std::vector<Index> order;    // usable records, best likelihood first
  std::vector<Index> subset;   // prefix of order
  Eigen::MatrixXd stats;       // R x (Q M): stored samples of the subset
  Eigen::MatrixXd pooled;      // W_Q
  Eigen::VectorXd eps;         // per column of stats
  std::vector<Index> best;     // columns of stats, smallest eps first
  bool short_posterior = false;
};

AbcCore abc_core(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs, const AbcOptions& options) {
  check_observation(index, s_obs, t_obs);
  const auto& db = index.database();
  AbcCore core;
  core.m = db.samples_per_record();
  if (core.m == 0) throw UnsupportedMethod("the database stores no replicate samples (M = 0); ABC needs M > 0");
  if (options.posterior_size < 1) throw DomainError("posterior size must be >= 1");
  if (!(options.coverage > 0.0 && options.coverage <= 1.0)) throw DomainError("coverage must lie in (0, 1]");
  const Eigen::VectorXd scores = index.logliks(s_obs, t_obs, &core.t);
  if (index.usable_count(core.t) == 0) throw EmptyDatabase("no usable grid point in the database");
  core.order = top_n(scores, db.size());
  const double top = scores[core.order.front()];
  std::vector<double> w(core.order.size());
  double total = 0.0;
  for (std::size_t i = 0; i < core.order.size(); ++i) total += (w[i] = std::exp(scores[core.order[i]] - top));
  double cumulative = 0.0;
  std::size_t q = 0;
  while (q < core.order.size()) {
    cumulative += w[q++];
    if (cumulative >= options.coverage * total) break;
  }
  while (q < core.order.size() && static_cast<Index>(q) * core.m < options.posterior_size) ++q;
  core.subset.assign(core.order.begin(), core.order.begin() + static_cast<std::ptrdiff_t>(q));

  const Index r = db.stat_count();
  core.stats.resize(r, static_cast<Index>(q) * core.m);
  for (std::size_t i = 0; i < q; ++i)
    core.stats.middleCols(static_cast<Index>(i) * core.m, core.m) = db.sample_block(core.subset[i], core.t);
  core.pooled = sample_covariance(core.stats);
  const MahalanobisMetric metric(core.pooled);
  core.eps = metric.to_columns(core.stats, s_obs);
  const Index take = std::min<Index>(options.posterior_size, core.stats.cols());
  core.short_posterior = take < options.posterior_size;
  core.best = smallest(core.eps, take);
  return core;
}

Eigen::VectorXd weighted_mean(const Eigen::MatrixXd& theta, const Eigen::VectorXd& w) { return theta * w; }

void attach_posterior(EstimationResult& out, const ParameterSpace& space, PosteriorSample posterior, double t_prepaid,
                      double t_obs, double level) {
  if (t_prepaid != t_obs && posterior.theta.cols() >= 2)
    posterior.theta = rescale_posterior(posterior.theta, t_prepaid, t_obs, posterior.weights);
  out.theta_grid = weighted_mean(posterior.theta, posterior.weights);
  out.ci = posterior_intervals(space, posterior, level, out.theta_grid);
  out.posterior = std::move(posterior);
}

struct Candidate {
  double eps;
  Index proposal;  // into the cluster's proposal store
  Index order;     // creation order, for ties
};

bool candidate_less(const Candidate& a, const Candidate& b) {
  return a.eps < b.eps || (a.eps == b.eps && a.order < b.order);
}

struct ClusterRun {
  std::vector<Candidate> kept;
  std::vector<Eigen::VectorXd> proposals;
  std::vector<double> volumes;  // ellipse volume each proposal was drawn from
  std::vector<double> trace;
  std::vector<std::string> flags;
  int iterations = 0;
  bool usable = false;
};

/// Grid points closest to the centroid of `members` in range-normalized
/// parameter space, excluding members, until the cluster has `min_size` points.
std::vector<Index> pad_cluster(const LikelihoodIndex& index, std::size_t t, std::vector<Index> members, Index min_size) {
  const auto& db = index.database();
  if (static_cast<Index>(members.size()) >= min_size) return members;
  const Eigen::VectorXd lower = db.header.space.lower();
  Eigen::VectorXd range = db.header.space.range();
  for (Index d = 0; d < range.size(); ++d)
    if (!(range[d] > 0.0)) range[d] = 1.0;
  Eigen::VectorXd centroid = Eigen::VectorXd::Zero(db.dim());
  for (Index p : members) centroid += db.theta.col(p);
  centroid /= static_cast<double>(members.size());
  const std::set<Index> taken(members.begin(), members.end());
  Eigen::VectorXd dist = Eigen::VectorXd::Constant(db.size(), kInf);
  for (Index p = 0; p < db.size(); ++p) {
    if (!index.usable(p, t) || taken.count(p) != 0) continue;
    dist[p] = ((db.theta.col(p) - centroid).array() / range.array()).matrix().squaredNorm();
  }
  const Index need = min_size - static_cast<Index>(members.size());
  for (Index p : smallest(dist, need))
    if (std::isfinite(dist[p])) members.push_back(p);
  return members;
}

ClusterRun run_cluster(const LikelihoodIndex& index, const AbcCore& core, const MahalanobisMetric& metric,
                       const StatVector& s_obs, const std::vector<Index>& members, const AbcOptions& options,
                       std::uint64_t seed) {
  const auto& db = index.database();
  const auto& space = db.header.space;
  const auto& schema = db.header.schema;
  ClusterRun run;
  const Eigen::MatrixXd X = gather_columns(db.theta, members);
  const Eigen::MatrixXd Y = gather_columns(db.mu, members);
  KernelSurrogate svm;
  Ellipsoid ellipse;
  try {
    svm = fit_tuned_surrogate(X, Y, options.tune);
  } catch (const Error&) {
    run.flags.push_back("cluster-fit-failed");
    return run;
  }
  try {
    ellipse = mvee(X);
  } catch (const DegenerateGeometry&) {
    run.flags.push_back("cluster-degenerate");
    return run;
  }
  run.usable = true;

  Eigen::VectorXd range = space.range();
  for (Index d = 0; d < range.size(); ++d)
    if (!(range[d] > 0.0)) range[d] = 1.0;
  const Eigen::MatrixXd Xn = X.array().colwise() / range.array();
  const Index m = core.m;
  Index created = 0;
  double previous = kInf;
  for (int it = 0; it < options.max_iterations; ++it) {
    ++run.iterations;
    const double volume = ellipsoid_volume(ellipse);
    const Eigen::MatrixXd draws = ellipsoid_sample(ellipse, options.proposals, stream_seed(seed, static_cast<std::uint64_t>(it)));
    std::vector<Candidate> fresh;
    fresh.reserve(static_cast<std::size_t>(options.proposals * m));
    for (Index j = 0; j < draws.cols(); ++j) {
      const Eigen::VectorXd theta = draws.col(j);
      if (!space.contains(theta)) continue;
      const StatVector predicted = clamp_predictions(svm.predict(theta), schema);
      const Eigen::VectorXd tn = theta.array() / range.array();
      Index donor = 0;
      (Xn.colwise() - tn).colwise().squaredNorm().minCoeff(&donor);
      const Index p = members[static_cast<std::size_t>(donor)];
      const StatVector shift = predicted - db.mu.col(p);
      Eigen::MatrixXd shifted = db.sample_block(p, core.t);
      shifted.colwise() += shift;
      for (Index i = 0; i < m; ++i) shifted.col(i) = clamp_predictions(shifted.col(i), schema);
      const Eigen::VectorXd eps = metric.to_columns(shifted, s_obs);
      const auto id = static_cast<Index>(run.proposals.size());
      run.proposals.push_back(theta);
      run.volumes.push_back(volume);
      for (Index i = 0; i < m; ++i) fresh.push_back({eps[i], id, created++});
    }
    if (fresh.empty()) {
      run.flags.push_back("proposals-outside-box");
      break;
    }
    fresh.insert(fresh.end(), run.kept.begin(), run.kept.end());
    const auto keep = static_cast<std::size_t>(std::min<Index>(options.keep, static_cast<Index>(fresh.size())));
    std::partial_sort(fresh.begin(), fresh.begin() + static_cast<std::ptrdiff_t>(keep), fresh.end(), candidate_less);
    fresh.resize(keep);
    run.kept = std::move(fresh);
    const double worst = run.kept.back().eps;
    run.trace.push_back(worst);

    std::vector<Index> ids;
    for (const auto& c : run.kept) ids.push_back(c.proposal);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    Eigen::MatrixXd support(db.dim(), static_cast<Index>(ids.size()));
    for (std::size_t i = 0; i < ids.size(); ++i) support.col(static_cast<Index>(i)) = run.proposals[ids[i]];
    if (std::isfinite(previous) && previous - worst < options.improvement * previous) break;
    if (worst == 0.0) break;
    previous = worst;
    try {
      ellipse = mvee(support);
    } catch (const DegenerateGeometry&) {
      run.flags.push_back("ellipse-collapsed");
      break;
    }
  }
  return run;
}

}  // namespace

EstimationResult abc_grid_pm(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                             const AbcOptions& options) {
  Stopwatch clock;
  const auto& db = index.database();
  const AbcCore core = abc_core(index, s_obs, t_obs, options);
  const auto n = static_cast<Index>(core.best.size());
  PosteriorSample posterior;
  posterior.theta.resize(db.dim(), n);
  posterior.epsilon.resize(n);
  for (Index j = 0; j < n; ++j) {
    const Index column = core.best[static_cast<std::size_t>(j)];
    posterior.theta.col(j) = db.theta.col(core.subset[static_cast<std::size_t>(column / core.m)]);
    posterior.epsilon[j] = core.eps[column];
  }
  posterior.weights = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));

  EstimationResult out;
  out.method = Method::abc_grid_pm;
  const auto tp = static_cast<double>(db.header.t_prepaid[core.t]);
  out.diagnostics.t_prepaid = db.header.t_prepaid[core.t];
  out.diagnostics.subset_size = static_cast<Index>(core.subset.size());
  out.diagnostics.objective = posterior.epsilon[n - 1];
  out.diagnostics.neighbors.assign(core.subset.begin(),
                                   core.subset.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(100, core.subset.size())));
  if (core.short_posterior) out.diagnostics.flags.push_back("posterior-short");
  attach_posterior(out, db.header.space, std::move(posterior), tp, t_obs, options.level);
  finish(out, db.header.space, clock);
  return out;
}

EstimationResult abc_svm_pm(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                            const AbcOptions& options) {
  Stopwatch clock;
  const auto& db = index.database();
  const AbcCore core = abc_core(index, s_obs, t_obs, options);
  const MahalanobisMetric metric(core.pooled);

  // Rank subset points by how many of their samples made the ABC cut.
  const double cut = core.eps[core.best.back()];
  std::vector<Index> hits(core.subset.size(), 0);
  for (Index col = 0; col < core.eps.size(); ++col)
    if (core.eps[col] <= cut) ++hits[static_cast<std::size_t>(col / core.m)];
  std::vector<std::size_t> rank(core.subset.size());
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return hits[a] > hits[b]; });
  std::vector<Index> chosen;
  for (std::size_t i = 0; i < rank.size() && static_cast<Index>(chosen.size()) < options.svm_points; ++i)
    chosen.push_back(core.subset[rank[i]]);
  for (std::size_t i = core.subset.size(); i < core.order.size() && static_cast<Index>(chosen.size()) < options.svm_points;
       ++i)
    chosen.push_back(core.order[i]);

  EstimationResult out;
  out.method = Method::abc_svm_pm;
  out.diagnostics.t_prepaid = db.header.t_prepaid[core.t];
  out.diagnostics.subset_size = static_cast<Index>(core.subset.size());
  out.diagnostics.neighbors = chosen;

  std::vector<std::vector<Index>> clusters;
  if (chosen.size() >= 2) {
    for (const auto& local : hcluster(gather_columns(db.theta, chosen), options.cluster_cap)) {
      std::vector<Index> members;
      for (Index i : local) members.push_back(chosen[static_cast<std::size_t>(i)]);
      clusters.push_back(pad_cluster(index, core.t, std::move(members), options.cluster_min));
    }
  } else {
    clusters.push_back(pad_cluster(index, core.t, chosen, options.cluster_min));
  }

  std::vector<ClusterRun> runs(clusters.size());
  for (std::size_t c = 0; c < clusters.size(); ++c)
    runs[c] = run_cluster(index, core, metric, s_obs, clusters[c], options, stream_seed(options.seed, c));

  struct Pooled {
    double eps;
    std::size_t cluster;
    Index order;
    Index proposal;
  };
  std::vector<Pooled> pool;
  int iterations = 0;
  for (std::size_t c = 0; c < runs.size(); ++c) {
    for (const auto& f : runs[c].flags) out.diagnostics.flags.push_back(f);
    if (!runs[c].usable) continue;
    iterations += runs[c].iterations;
    out.diagnostics.traces.push_back(runs[c].trace);
    for (const auto& k : runs[c].kept) pool.push_back({k.eps, c, k.order, k.proposal});
  }
  if (pool.empty()) {
    auto fallback = abc_grid_pm(index, s_obs, t_obs, options);
    fallback.method = Method::abc_svm_pm;
    fallback.diagnostics.flags.insert(fallback.diagnostics.flags.begin(), out.diagnostics.flags.begin(),
                                      out.diagnostics.flags.end());
    fallback.diagnostics.flags.push_back("fallback-abc-grid-pm");
    fallback.diagnostics.wall_seconds = clock.seconds();
    return fallback;
  }
  const auto take = static_cast<std::size_t>(std::min<Index>(options.posterior_size, static_cast<Index>(pool.size())));
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take), pool.end(),
                    [](const Pooled& a, const Pooled& b) {
                      if (a.eps != b.eps) return a.eps < b.eps;
                      if (a.cluster != b.cluster) return a.cluster < b.cluster;
                      return a.order < b.order;
                    });
  pool.resize(take);
  if (static_cast<Index>(take) < options.posterior_size) out.diagnostics.flags.push_back("posterior-short");

  const auto n = static_cast<Index>(take);
  PosteriorSample posterior;
  posterior.theta.resize(db.dim(), n);
  posterior.weights.resize(n);
  posterior.epsilon.resize(n);
  for (Index j = 0; j < n; ++j) {
    const auto& e = pool[static_cast<std::size_t>(j)];
    posterior.theta.col(j) = runs[e.cluster].proposals[static_cast<std::size_t>(e.proposal)];
    posterior.weights[j] = runs[e.cluster].volumes[static_cast<std::size_t>(e.proposal)];
    posterior.epsilon[j] = e.eps;
  }
  posterior.weights /= posterior.weights.sum();
  out.diagnostics.objective = posterior.epsilon[n - 1];
  out.diagnostics.iterations = iterations;
  attach_posterior(out, db.header.space, std::move(posterior), static_cast<double>(db.header.t_prepaid[core.t]), t_obs,
                   options.level);
  finish(out, db.header.space, clock);
  return out;
}

// ---------------------------------------------------------------------------

double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw DomainError("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("quantile level must lie in [0, 1]");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double weighted_quantile(const Eigen::Ref<const Eigen::VectorXd>& values, const Eigen::Ref<const Eigen::VectorXd>& weights,
                         double p) {
  if (values.size() == 0 || values.size() != weights.size()) throw DomainError("weighted quantile: size mismatch");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("quantile level must lie in [0, 1]");
  std::vector<Index> order(static_cast<std::size_t>(values.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return values[a] < values[b]; });
  const double total = weights.sum();
  if (!(total > 0.0)) throw DomainError("weighted quantile: weights sum to zero");
  double cumulative = 0.0;
  for (Index i : order) {
    cumulative += weights[i] / total;
    if (cumulative >= p) return values[i];
  }
  return values[order.back()];
}

ConfidenceSet posterior_intervals(const ParameterSpace& space, const PosteriorSample& posterior, double level,
                                  const ParameterVector& estimate) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("level must lie in (0, 1)");
  const Index k = posterior.theta.rows();
  const double tail = (1.0 - level) / 2.0;
  const bool equal = posterior.weights.size() > 0 &&
                     (posterior.weights.array() == posterior.weights[0]).all();
  Eigen::VectorXd low(k), high(k);
  for (Index d = 0; d < k; ++d) {
    const Eigen::VectorXd row = posterior.theta.row(d).transpose();
    if (equal) {
      std::vector<double> v(row.data(), row.data() + row.size());
      low[d] = quantile(v, tail);
      high[d] = quantile(v, 1.0 - tail);
    } else {
      low[d] = weighted_quantile(row, posterior.weights, tail);
      high[d] = weighted_quantile(row, posterior.weights, 1.0 - tail);
    }
  }
  ConfidenceSet ci;
  ci.level = level;
  ci.kind = "posterior-quantile";
  ci.replicates = posterior.theta.cols();
  const Eigen::VectorXd ul = space.to_user(low), uh = space.to_user(high);
  for (Index d = 0; d < k; ++d) {
    ci.intervals.push_back({ul[d], uh[d]});
    if (estimate[d] < low[d] || estimate[d] > high[d]) ci.contains_estimate = false;
  }
  return ci;
}

// ---------------------------------------------------------------------------

BootstrapResult bootstrap_ci(const LikelihoodIndex& index, const Model& model, const StatVector& s_obs,
                             const ParameterVector& estimate, double t_obs, const BootstrapOptions& options) {
  const auto& db = index.database();
  const auto& space = db.header.space;
  check_observation(index, s_obs, t_obs);
  if (options.replicates < 2) throw DomainError("bootstrap needs at least two replicates");
  if (!(options.level > 0.0 && options.level < 1.0)) throw DomainError("level must lie in (0, 1)");
  if (estimate.size() != space.dim()) throw DomainError("point estimate has the wrong dimension");
  if (!(model.space() == space)) throw DomainError("model and database parameter spaces differ");
  const auto length = static_cast<Index>(std::llround(t_obs));
  const unsigned workers = options.workers == 0 ? default_workers() : options.workers;

  // Simulate every replicate first.
  const auto b_count = static_cast<std::size_t>(options.replicates);
  std::vector<StatVector> stats(b_count);
  std::vector<std::uint8_t> ok(b_count, 0);
  parallel_for(b_count, workers, [&](std::size_t b) {
    try {
      const Dataset data = model.simulate(estimate, length, stream_seed(options.seed, b));
      StatVector s = model.summarize(data);
      if (s.allFinite()) {
        stats[b] = std::move(s);
        ok[b] = 1;
      }
    } catch (const SimulationError&) {
    } catch (const NumericError&) {
    }
  });
  std::vector<std::size_t> good;
  for (std::size_t b = 0; b < b_count; ++b)
    if (ok[b]) good.push_back(b);
  const Index failures = options.replicates - static_cast<Index>(good.size());
  if (static_cast<double>(failures) > options.max_failure_fraction * static_cast<double>(options.replicates) ||
      good.size() < 2)
    throw SimulationError("bootstrap: " + std::to_string(failures) + " of " + std::to_string(options.replicates) +
                          " simulations failed (limit " +
                          std::to_string(static_cast<int>(options.max_failure_fraction * 100.0)) + "%)");

  const auto n = static_cast<Index>(good.size());
  std::vector<Index> nearest(good.size(), 0);
  parallel_for(good.size(), workers, [&](std::size_t i) {
    const Eigen::VectorXd scores = index.logliks(stats[good[i]], t_obs);
    const auto best = top_n(scores, 1);
    if (best.empty()) throw EmptyDatabase("no usable grid point in the database");
    nearest[i] = best.front();
  });
  const std::size_t window = std::min<std::size_t>(good.size(), static_cast<std::size_t>(options.uniqueness_window));
  const std::set<Index> unique(nearest.begin(), nearest.begin() + static_cast<std::ptrdiff_t>(window));
  const bool svm_mode = static_cast<double>(unique.size()) * static_cast<double>(options.uniqueness_window) <
                        static_cast<double>(options.uniqueness_threshold) * static_cast<double>(window);

  BootstrapResult result;
  result.estimates.resize(space.dim(), n);
  if (!svm_mode) {
    for (Index i = 0; i < n; ++i) result.estimates.col(i) = db.theta.col(nearest[static_cast<std::size_t>(i)]);
  } else {
    const NeighborSet nn = nn_by_synthlik(index, s_obs, t_obs, std::min<Index>(options.surrogate.neighbors, db.size()));
    const Eigen::MatrixXd X = gather_columns(db.theta, nn.indices);
    const Eigen::MatrixXd Y = gather_columns(db.mu, nn.indices);
    const KernelSurrogate svm = fit_tuned_surrogate(X, Y, options.surrogate.tune);
    const auto& schema = db.header.schema;
    const Index p0 = nn.indices.front();
    const FixedCovarianceLoss loss(index.factor(p0, nn.t_index), index.log_det(p0, nn.t_index),
                                   static_cast<double>(db.header.t_prepaid[nn.t_index]), t_obs);
    parallel_for(good.size(), workers, [&](std::size_t i) {
      const StatVector& s = stats[good[i]];
      auto objective = [&](const Eigen::VectorXd& theta) {
        return loss(s, clamp_predictions(svm.predict(theta), schema));
      };
      double best_neighbor = kInf;
      const DEResult de = maximize_surrogate(X, objective, options.svm_generations,
                                             stream_seed(options.surrogate.seed, good[i]), &best_neighbor);
      result.estimates.col(static_cast<Index>(i)) = de.x;
    });
  }

  ConfidenceSet& ci = result.ci;
  ci.level = options.level;
  ci.kind = "bootstrap-percentile";
  ci.replicates = n;
  ci.failures = failures;
  ci.svm_mode = svm_mode;
  const double tail = (1.0 - options.level) / 2.0;
  Eigen::VectorXd low(space.dim()), high(space.dim());
  for (Index d = 0; d < space.dim(); ++d) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = result.estimates(d, i);
    low[d] = quantile(v, tail);
    high[d] = quantile(std::move(v), 1.0 - tail);
    if (estimate[d] < low[d] || estimate[d] > high[d]) ci.contains_estimate = false;
  }
  const Eigen::VectorXd ul = space.to_user(low), uh = space.to_user(high);
  for (Index d = 0; d < space.dim(); ++d) ci.intervals.push_back({ul[d], uh[d]});
  return result;
}

// ---------------------------------------------------------------------------

std::vector<ParameterVector> draw_tied_truth(const ParameterSpace& space, const MultiConditionDesign& design, Rng& rng) {
  if (design.conditions < 1) throw DomainError("design needs at least one condition");
  if (!(design.trim >= 0.0 && design.trim < 0.5)) throw DomainError("trim must lie in [0, 0.5)");
  const Index k = space.dim();
  const Eigen::VectorXd lo = space.lower() + design.trim * space.range();
  const Eigen::VectorXd hi = space.upper() - design.trim * space.range();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&] {
    ParameterVector th(k);
    for (Index d = 0; d < k; ++d) th[d] = lo[d] + unit(rng) * (hi[d] - lo[d]);
    return th;
  };
  const ParameterVector shared = draw();
  std::vector<ParameterVector> out;
  for (Index c = 0; c < design.conditions; ++c) {
    ParameterVector th = draw();
    for (Index d : design.tied_dims) th[d] = shared[d];
    out.push_back(std::move(th));
  }
  return out;
}

SigmaTuning tune_sigma_prior(const LikelihoodIndex& index, const Model& model, const MultiConditionDesign& design,
                             const std::vector<double>& candidates, Index replications, std::uint64_t seed,
                             const MultiConditionOptions& options) {
  if (candidates.empty()) throw DomainError("at least one sigma_prior candidate is required");
  const auto& db = index.database();
  const auto& space = db.header.space;
  SigmaTuning out;
  out.candidates = candidates;
  out.scores.assign(candidates.size(), 0.0);
  if (candidates.size() == 1) {
    out.best = candidates.front();
    return out;
  }
  if (replications < 1) throw DomainError("replications must be >= 1");
  if (static_cast<Index>(design.t_obs.size()) != design.conditions)
    throw DomainError("design needs one T_obs per condition");

  std::vector<std::vector<ParameterVector>> truths;
  std::vector<std::vector<StatVector>> observed;
  Rng rng = make_rng(seed, 0);
  for (Index rep = 0; rep < replications; ++rep) {
    truths.push_back(draw_tied_truth(space, design, rng));
    std::vector<StatVector> s;
    for (Index c = 0; c < design.conditions; ++c) {
      const auto length = static_cast<Index>(std::llround(design.t_obs[static_cast<std::size_t>(c)]));
      const auto sim_seed = stream_seed(seed, static_cast<std::uint64_t>(rep * design.conditions + c) + 1);
      s.push_back(model.summarize(model.simulate(truths.back()[static_cast<std::size_t>(c)], length, sim_seed)));
    }
    observed.push_back(std::move(s));
  }
  const Eigen::VectorXd range = space.range();
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(space.dim());
    Index count = 0;
    for (Index rep = 0; rep < replications; ++rep) {
      const auto& s = observed[static_cast<std::size_t>(rep)];
      if (!std::all_of(s.begin(), s.end(), [](const StatVector& v) { return v.allFinite(); })) continue;
      const auto est = estimate_multicondition(index, s, design.t_obs, design.tied_dims, candidates[k], options);
      for (std::size_t c = 0; c < est.size(); ++c)
        sq += (est[c].theta_grid - truths[static_cast<std::size_t>(rep)][c]).array().square().matrix();
      count += static_cast<Index>(est.size());
    }
    double score = 0.0;
    for (Index d : design.tied_dims) score += std::sqrt(sq[d] / static_cast<double>(std::max<Index>(count, 1))) / range[d];
    out.scores[k] = score;
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < candidates.size(); ++k)
    if (out.scores[k] < out.scores[best]) best = k;
  out.best = candidates[best];
  return out;
}

}  // namespace prepaid
