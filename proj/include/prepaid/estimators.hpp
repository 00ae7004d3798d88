#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prepaid/inference.hpp"
#include "prepaid/learn.hpp"
#include "prepaid/optimize.hpp"
#include "prepaid/rng.hpp"

namespace prepaid {

enum class Method { grid_ml, svm_ml, lin_ml, grid_map, multi_condition, sl_grid_pm, abc_grid_pm, abc_svm_pm };

/// Display tag, e.g. "SVM-ML".
const char* method_tag(Method m) noexcept;
/// Command-line name, e.g. "svm-ml".
const char* method_name(Method m) noexcept;
/// Accepts the command-line name; throws UnsupportedMethod listing the valid names.
Method parse_method(std::string_view name);
std::vector<std::string> method_names();

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

struct ConfidenceSet {
  double level = 0.95;
  std::string kind;                  // "bootstrap-percentile" or "posterior-quantile"
  std::vector<Interval> intervals;   // user scale, one per parameter
  bool contains_estimate = true;     // false when some interval misses the point estimate
  Index replicates = 0;
  Index failures = 0;
  bool svm_mode = false;             // bootstrap re-estimated with the shared surrogate
};

struct PosteriorSample {
  Eigen::MatrixXd theta;    // K x n, grid scale
  Eigen::VectorXd weights;  // n, nonnegative, sum 1
  Eigen::VectorXd epsilon;  // ABC distance of each entry, nondecreasing
};

struct Diagnostics {
  double objective = 0.0;
  std::vector<Index> neighbors;
  std::vector<double> neighbor_scores;
  Index t_prepaid = 0;
  double wall_seconds = 0.0;
  std::vector<std::string> flags;
  Index subset_size = 0;      // ABC: Q
  int iterations = 0;         // DE generations or ABC-SVM loop passes
  /// ABC-SVM: worst kept distance after each pass, one list per fitted cluster.
  std::vector<std::vector<double>> traces;
};

struct EstimationResult {
  Method method = Method::grid_ml;
  ParameterVector theta_grid;  // grid scale
  Eigen::VectorXd theta;       // user scale
  std::optional<ConfidenceSet> ci;
  std::optional<PosteriorSample> posterior;
  Diagnostics diagnostics;

  bool has_flag(std::string_view flag) const;
};

// ---------------------------------------------------------------------------

struct GridOptions {
  Index report_neighbors = 100;
};

/// Grid argmax of the T_obs-scaled synthetic likelihood.
EstimationResult estimate_grid_ml(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                  const GridOptions& options = {});

struct SurrogateOptions {
  Index neighbors = 100;
  TuneGrid tune;
  int max_generations = 1000;
  std::uint64_t seed = 1;
};

/// Maximizes the synthetic likelihood with per-statistic tuned LS-SVM
/// predictions, clamped to the schema, and the nearest neighbor's scaled
/// covariance, by differential evolution inside the neighbors' bounding box.
EstimationResult estimate_svm_ml(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                 const SurrogateOptions& options = {});

/// As estimate_svm_ml with per-statistic linear regressions.
EstimationResult estimate_lin_ml(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                 const SurrogateOptions& options = {});

/// Grid argmax of log-likelihood plus prior log-density.
EstimationResult estimate_grid_map(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                   const Prior& prior, const GridOptions& options = {});

struct MultiConditionOptions {
  Index shortlist = 1000;
  int sweeps = 5;
};

/// Joint estimate over conditions under a tying prior on the tied dims, whose
/// deviations are scaled per dimension by the grid range. Tied coordinates are
/// reported as the across-condition mean. sigma_prior may be infinite.
std::vector<EstimationResult> estimate_multicondition(const LikelihoodIndex& index,
                                                      const std::vector<StatVector>& s_obs,
                                                      const std::vector<double>& t_obs,
                                                      const std::vector<Index>& tied_dims, double sigma_prior,
                                                      const MultiConditionOptions& options = {});

/// Likelihood-weighted mean of all grid points (max-subtracted weights).
EstimationResult posterior_mean_sl(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                                   double level = 0.95);

struct AbcOptions {
  Index posterior_size = 1000;
  double coverage = 0.999;
  double level = 0.95;
  // ABC-SVM only.
  Index svm_points = 100;
  Index cluster_cap = 50;
  Index cluster_min = 20;
  Index proposals = 1000;
  Index keep = 5000;
  int max_iterations = 50;
  double improvement = 1e-3;
  TuneGrid tune;
  std::uint64_t seed = 1;
};

/// Prepaid ABC over the stored replicate statistics.
EstimationResult abc_grid_pm(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                             const AbcOptions& options = {});

/// Prepaid ABC refined by clustered LS-SVM interpolation and ellipsoid resampling.
EstimationResult abc_svm_pm(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs,
                            const AbcOptions& options = {});

// ---------------------------------------------------------------------------

/// Type-7 quantile of v (copied, not modified).
double quantile(std::vector<double> v, double p);
/// Quantile of a weighted sample (left-continuous inverse of the weighted CDF).
double weighted_quantile(const Eigen::Ref<const Eigen::VectorXd>& values, const Eigen::Ref<const Eigen::VectorXd>& weights,
                         double p);

/// Equal-tailed posterior intervals on the user scale.
ConfidenceSet posterior_intervals(const ParameterSpace& space, const PosteriorSample& posterior, double level,
                                  const ParameterVector& estimate);

struct BootstrapOptions {
  Index replicates = 1000;
  double level = 0.95;
  std::uint64_t seed = 1;
  Index uniqueness_window = 100;
  Index uniqueness_threshold = 50;
  double max_failure_fraction = 0.05;
  SurrogateOptions surrogate;  // used in SVM mode
  int svm_generations = 300;
  unsigned workers = 1;
};

struct BootstrapResult {
  ConfidenceSet ci;
  Eigen::MatrixXd estimates;  // K x successful replicates, grid scale
};

/// Parametric bootstrap at the point estimate: simulate B datasets of length
/// T_obs, estimate each by Grid-ML (or, when the first window has too few unique
/// nearest neighbors, by the shared surrogate around the original observation),
/// and return percentile intervals. Throws SimulationError above the failure limit.
BootstrapResult bootstrap_ci(const LikelihoodIndex& index, const Model& model, const StatVector& s_obs,
                             const ParameterVector& estimate, double t_obs, const BootstrapOptions& options = {});

// ---------------------------------------------------------------------------

struct MultiConditionDesign {
  Index conditions = 2;
  std::vector<double> t_obs;     // one per condition
  std::vector<Index> tied_dims;
  double trim = 0.01;            // generating box shrunk by this fraction of the range per side
};

struct SigmaTuning {
  double best = 0.0;
  std::vector<double> candidates;
  std::vector<double> scores;  // summed range-normalized RMSE over tied dims
};

/// Simulates `replications` tied-truth experiments and returns the candidate
/// with the lowest summed RMSE on the tied dimensions (earliest on ties).
SigmaTuning tune_sigma_prior(const LikelihoodIndex& index, const Model& model, const MultiConditionDesign& design,
                             const std::vector<double>& candidates, Index replications, std::uint64_t seed,
                             const MultiConditionOptions& options = {});

/// Draws a parameter vector for each condition sharing the tied coordinates.
std::vector<ParameterVector> draw_tied_truth(const ParameterSpace& space, const MultiConditionDesign& design, Rng& rng);

}  // namespace prepaid
