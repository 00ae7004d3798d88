#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "prepaid/domain.hpp"

namespace prepaid {

struct DEConfig {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Index population = 0;  // 0: max(15, 10 K)
  double F = 0.8;
  double CR = 0.9;
  int max_generations = 1000;
  /// Stop when the best value improved by at most tolerance * |best| over
  /// the last stall_generations generations.
  int stall_generations = 50;
  double tolerance = 1e-10;
  std::uint64_t seed = 1;
  /// Optional K x m starting members; the rest of the population is uniform.
  Eigen::MatrixXd initial;
  unsigned workers = 1;
};

struct DEResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int generations = 0;
  Index evaluations = 0;
  std::vector<double> best_trace;  // best value after each generation, starting with the initial population
};

using Objective = std::function<double(const Eigen::VectorXd&)>;

/// Maps v into [lo, hi] by mirror reflection at the bounds.
double reflect_into(double v, double lo, double hi);

/// DE/rand/1/bin minimization with synchronous generations. NaN counts as
/// +infinity; a generation in which every evaluation is NaN throws OptimizationError.
DEResult differential_evolution(const Objective& objective, const DEConfig& config);

}  // namespace prepaid
