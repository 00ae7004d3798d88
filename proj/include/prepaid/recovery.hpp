#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "prepaid/estimators.hpp"

namespace prepaid {

struct TestSpec {
  Index count = 50;
  std::vector<double> t_obs{1000.0};
  /// Draws closer than trim * range (grid scale) to any bound of the space are rejected.
  double trim = 0.01;
  /// Grid-scale generating distribution; the space's uniform box when absent.
  std::optional<Prior> generating;
};

/// Trimmed test parameters, grid scale, K x count. Deterministic per seed.
Eigen::MatrixXd draw_test_set(const ParameterSpace& space, const TestSpec& spec, std::uint64_t seed);

struct RecoveryOptions {
  std::vector<Method> methods{Method::grid_ml};
  std::optional<Prior> map_prior;  // required for grid-map
  SurrogateOptions surrogate;
  AbcOptions abc;
  bool bootstrap = false;          // attach bootstrap CIs to point estimators
  BootstrapOptions boot;
  unsigned workers = 1;            // items in parallel
};

struct RecoveryRow {
  Index item = 0;
  double t_obs = 0.0;
  Method method = Method::grid_ml;
  ParameterVector truth;      // grid scale
  ParameterVector estimate;   // grid scale; empty on failure
  std::optional<ConfidenceSet> ci;
  double seconds = 0.0;
  std::vector<std::string> flags;
  std::string error;          // nonempty when the item failed
};

struct MethodSummary {
  Method method = Method::grid_ml;
  double t_obs = 0.0;
  Index items = 0;      // successful
  Index failures = 0;
  Eigen::VectorXd rmse, mae, median_abs_error;  // grid scale, per parameter
  Eigen::VectorXd coverage;                      // NaN without intervals
  double mean_seconds = 0.0;
};

struct RecoveryReport {
  ParameterSpace space;
  std::vector<RecoveryRow> rows;           // ordered by (t_obs, item, method)
  std::vector<MethodSummary> summaries;    // ordered by (t_obs, method)

  const MethodSummary& summary(Method method, double t_obs) const;
};

/// Simulates each test item at each T_obs, runs every method, and tabulates
/// accuracy, coverage and timing. Output is independent of `workers`.
RecoveryReport recovery_study(const LikelihoodIndex& index, const Model& model, const TestSpec& spec,
                              const RecoveryOptions& options, std::uint64_t seed);

/// Errors on the grid scale; coverage of user-scale intervals. Failed rows are counted, not scored.
MethodSummary summarize_rows(const std::vector<const RecoveryRow*>& rows, const ParameterSpace& space);

/// One row per item per method.
void write_recovery_csv(const RecoveryReport& report, std::ostream& out);
nlohmann::ordered_json recovery_json(const RecoveryReport& report);

/// Published accuracy and coverage figures for the bundled models, at full scale.
nlohmann::ordered_json reference_tables();

}  // namespace prepaid
