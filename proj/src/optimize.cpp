#include "prepaid/optimize.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "prepaid/parallel.hpp"
#include "prepaid/rng.hpp"

namespace prepaid {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void evaluate(const Objective& f, const Eigen::MatrixXd& members, Eigen::VectorXd& values, unsigned workers,
              const char* stage) {
  std::vector<std::uint8_t> nan(static_cast<std::size_t>(members.cols()), 0);
  parallel_for(static_cast<std::size_t>(members.cols()), workers, [&](std::size_t i) {
    const double v = f(members.col(static_cast<Index>(i)));
    nan[i] = std::isnan(v);
    values[static_cast<Index>(i)] = std::isnan(v) ? kInf : v;
  });
  for (auto b : nan)
    if (!b) return;
  throw OptimizationError(std::string("differential evolution: objective returned NaN for every member of the ") +
                          stage);
}

}  // namespace

double reflect_into(double v, double lo, double hi) {
  const double w = hi - lo;
  if (!(w > 0.0)) return lo;
  if (v >= lo && v <= hi) return v;
  double y = std::fmod(v - lo, 2.0 * w);
  if (y < 0.0) y += 2.0 * w;
  const double out = y <= w ? lo + y : lo + 2.0 * w - y;
  return std::min(hi, std::max(lo, out));
}

DEResult differential_evolution(const Objective& objective, const DEConfig& config) {
  const Index K = config.lower.size();
  if (K < 1 || config.upper.size() != K) throw DomainError("differential evolution: bounds must have equal nonzero length");
  if (!config.lower.allFinite() || !config.upper.allFinite() || (config.upper.array() < config.lower.array()).any())
    throw DomainError("differential evolution: bounds must be finite with lower <= upper");
  if (!(config.F > 0.0 && config.F <= 2.0)) throw DomainError("differential evolution: F must be in (0, 2]");
  if (!(config.CR >= 0.0 && config.CR <= 1.0)) throw DomainError("differential evolution: CR must be in [0, 1]");
  const Index np = config.population > 0 ? config.population : std::max<Index>(15, 10 * K);
  if (np < 4) throw DomainError("differential evolution: population must be >= 4");
  if (config.initial.size() > 0 && config.initial.rows() != K)
    throw DomainError("differential evolution: initial members must have K rows");
  const unsigned workers = config.workers == 0 ? default_workers() : config.workers;

  Rng rng(splitmix64(config.seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<Index> pick(0, np - 1);
  std::uniform_int_distribution<Index> pick_dim(0, K - 1);

  Eigen::MatrixXd pop(K, np);
  for (Index i = 0; i < np; ++i) {
    if (i < config.initial.cols()) {
      for (Index k = 0; k < K; ++k)
        pop(k, i) = reflect_into(config.initial(k, i), config.lower[k], config.upper[k]);
    } else {
      for (Index k = 0; k < K; ++k) pop(k, i) = config.lower[k] + unit(rng) * (config.upper[k] - config.lower[k]);
    }
  }
  Eigen::VectorXd values(np);
  evaluate(objective, pop, values, workers, "initial population");

  DEResult result;
  result.evaluations = np;
  Index best = 0;
  values.minCoeff(&best);
  result.best_trace.push_back(values[best]);

  Eigen::MatrixXd trial(K, np);
  Eigen::VectorXd trial_values(np);
  int gen = 0;
  while (gen < config.max_generations) {
    for (Index i = 0; i < np; ++i) {
      Index a, b, c;
      do a = pick(rng); while (a == i);
      do b = pick(rng); while (b == i || b == a);
      do c = pick(rng); while (c == i || c == a || c == b);
      const Index forced = pick_dim(rng);
      for (Index k = 0; k < K; ++k) {
        if (k == forced || unit(rng) < config.CR) {
          const double v = pop(k, a) + config.F * (pop(k, b) - pop(k, c));
          trial(k, i) = reflect_into(v, config.lower[k], config.upper[k]);
        } else {
          trial(k, i) = pop(k, i);
        }
      }
    }
    evaluate(objective, trial, trial_values, workers, "current generation");
    result.evaluations += np;
    for (Index i = 0; i < np; ++i) {
      if (trial_values[i] <= values[i]) {
        pop.col(i) = trial.col(i);
        values[i] = trial_values[i];
      }
    }
    ++gen;
    // Lowest index wins ties so the trajectory is reproducible.
    for (Index i = 0; i < np; ++i)
      if (values[i] < values[best]) best = i;
    result.best_trace.push_back(values[best]);
    if (gen >= config.stall_generations) {
      const double before = result.best_trace[result.best_trace.size() - 1 - static_cast<std::size_t>(config.stall_generations)];
      const double now = values[best];
      if (std::isfinite(now) && before - now <= config.tolerance * std::abs(now)) break;
    }
  }
  result.x = pop.col(best);
  result.value = values[best];
  result.generations = gen;
  return result;
}

}  // namespace prepaid
