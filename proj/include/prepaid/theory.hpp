#pragma once

#include <cstdint>
#include <ostream>
#include <vector>

#include "prepaid/domain.hpp"

namespace prepaid {

/// Mean, variance and sd of N consecutive grid values starting at mu_first with spacing delta.
struct SelectionMoments {
  double mean = 0.0;
  double variance = 0.0;
  double sd = 0.0;
};

SelectionMoments toy_selection_moments(double delta, Index n, double mu_first);

/// Gaussian-mean toy problem: y_i ~ N(mu, s^2), i = 1..T_obs.
struct ToyConfig {
  double mu = 0.0;
  double s = 1.0;
  double t_obs = 100.0;
  double t_sim = 1000.0;
  double delta = 0.01;
  Index n = 30;
  double alpha = 0.0;  // mean of the selected grid values minus mu
  int situation = 1;   // 1: statistic ybar; 2: statistic ybar^2

  void validate() const;
};

struct EstimatorMoments {
  double mean = 0.0;
  double variance = 0.0;

  double mse(double mu) const { return variance + (mean - mu) * (mean - mu); }
};

/// Leading-order bias and variance of the local-regression estimator (situation 1 only).
EstimatorMoments toy_estimator_moments(const ToyConfig& config);

struct ToyCell {
  double delta = 0.0;
  Index n = 0;
  Index replications = 0;  // used
  Index excluded = 0;      // near-zero fitted slope
  double bias = 0.0;
  double bias_se = 0.0;
  double mse = 0.0;
  double mse_se = 0.0;     // Monte Carlo standard error of mse
  double rmse = 0.0;
};

/// One (delta, N) cell of the miniature pipeline: per replication, draw the
/// observed mean, simulate grid statistics around it on a randomly shifted grid,
/// take the N nearest by |stat_sim - stat_obs|, fit stat_sim on mu by least
/// squares and invert the line at stat_obs.
ToyCell toy_cell(const ToyConfig& config, Index replications, std::uint64_t seed);

struct ToyStudyOptions {
  std::vector<double> deltas;
  std::vector<Index> ns;
  int situation = 1;
  Index replications = 1000;
  std::uint64_t seed = 1;
  double mu = 0.0;
  double s = 1.0;
  double t_obs = 100.0;
  double t_sim = 1000.0;
  unsigned workers = 1;
};

/// Log-spaced gaps over [1e-4, 1e-1], four per decade.
std::vector<double> default_toy_deltas();
std::vector<Index> default_toy_ns();

struct ToyStudy {
  int situation = 1;
  std::vector<double> deltas;
  std::vector<Index> ns;
  std::vector<ToyCell> cells;  // index: n_index * deltas.size() + delta_index

  const ToyCell& cell(std::size_t delta_index, std::size_t n_index) const;
};

/// Every (delta, N) cell with independently seeded streams; requires >= 100 replications.
ToyStudy toy_rmse_study(const ToyStudyOptions& options);

/// delta,n,replications,excluded,bias,bias_se,mse,mse_se,rmse
void write_toy_csv(const ToyStudy& study, std::ostream& out);
/// gnuplot "matrix nonuniform" layout: first row holds the deltas, each further row N then the RMSEs.
void write_toy_matrix(const ToyStudy& study, std::ostream& out);

}  // namespace prepaid
