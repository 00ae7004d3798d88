#pragma once

#include <cstdint>
#include <vector>

#include "prepaid/domain.hpp"

namespace prepaid {

/// Per-dimension centering and scaling of column points.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  // sd, or 1 for a constant dimension

  static Standardizer fit(const Eigen::Ref<const Eigen::MatrixXd>& points);
  Eigen::MatrixXd apply(const Eigen::Ref<const Eigen::MatrixXd>& points) const;
  Eigen::VectorXd apply_one(const Eigen::Ref<const Eigen::VectorXd>& x) const;
};

/// Median Euclidean distance over all pairs of columns.
double median_pairwise_distance(const Eigen::Ref<const Eigen::MatrixXd>& points);

struct LssvmHyper {
  double bandwidth = 1.0;  // in standardized units
  double reg = 1.0;        // gamma
};

/// Least-squares SVM regression with a Gaussian kernel, one independent
/// machine per output, all sharing the same standardized training inputs.
class KernelSurrogate {
 public:
  KernelSurrogate() = default;

  /// X: K x N training points; Y: outputs x N targets; one hyperparameter pair per output.
  static KernelSurrogate fit(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::MatrixXd>& Y,
                             const std::vector<LssvmHyper>& hyper);

  Index inputs() const noexcept { return z_.rows(); }
  Index outputs() const noexcept { return static_cast<Index>(alpha_.size()); }
  Index training_size() const noexcept { return z_.cols(); }

  Eigen::VectorXd predict(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  double predict(Index output, const Eigen::Ref<const Eigen::VectorXd>& x) const;

  const Eigen::VectorXd& alpha(Index output) const { return alpha_[static_cast<std::size_t>(output)]; }
  double bias(Index output) const { return bias_[static_cast<std::size_t>(output)]; }
  const LssvmHyper& hyper(Index output) const { return hyper_[static_cast<std::size_t>(output)]; }
  const Standardizer& standardizer() const noexcept { return standardizer_; }

 private:
  Standardizer standardizer_;
  Eigen::MatrixXd z_;
  std::vector<Eigen::VectorXd> alpha_;
  std::vector<double> bias_;
  std::vector<LssvmHyper> hyper_;
  std::vector<double> distinct_bandwidths_;
  std::vector<std::size_t> bandwidth_slot_;
};

/// Single-output fit. Throws NumericError if the kernel system cannot be factored.
KernelSurrogate lssvm_fit(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::VectorXd>& y,
                          double bandwidth, double reg);

/// Pair minimizing k-fold cross-validated squared error; point i is in fold i mod folds.
/// Ties keep the earliest candidate (bandwidths outer, regs inner).
LssvmHyper lssvm_tune(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::VectorXd>& y,
                      const std::vector<double>& bandwidths, const std::vector<double>& regs, int folds);

struct TuneGrid {
  std::vector<double> bandwidth_factors{0.25, 0.5, 1.0, 2.0, 4.0};  // times the median pairwise distance
  std::vector<double> regs{1.0, 10.0, 100.0, 1000.0, 10000.0};
  int folds = 5;
};

/// One tuned machine per output (row of Y).
KernelSurrogate fit_tuned_surrogate(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::MatrixXd>& Y,
                                    const TuneGrid& grid = {});

/// Ordinary least squares with intercept: returns (beta0, beta_1..K). N > K + 1.
/// Throws NumericError on a rank-deficient design.
Eigen::VectorXd linear_fit(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::VectorXd>& y);

/// One linear model per output; coefficients stored as a (K + 1) x outputs matrix.
class LinearSurrogate {
 public:
  static LinearSurrogate fit(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::MatrixXd>& Y);
  Eigen::VectorXd predict(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  const Eigen::MatrixXd& coefficients() const noexcept { return coef_; }

 private:
  Eigen::MatrixXd coef_;
};

/// Componentwise clamp into the schema's feasible ranges.
StatVector clamp_predictions(const StatVector& s, const StatSchema& schema);

/// Ward agglomerative clustering of the columns (standardized internally), cut by
/// repeatedly splitting the largest cluster above max_cluster_size. Clusters are
/// listed by their smallest member.
std::vector<std::vector<Index>> hcluster(const Eigen::Ref<const Eigen::MatrixXd>& points, Index max_cluster_size);

/// {x : (x - c)' A (x - c) <= 1}.
struct Ellipsoid {
  Eigen::VectorXd center;
  Eigen::MatrixXd shape;

  double membership(const Eigen::Ref<const Eigen::VectorXd>& x) const;
};

struct MveeResult {
  Ellipsoid ellipsoid;
  int iterations = 0;
  /// Lifted moment log-determinant per iteration (nondecreasing).
  std::vector<double> log_det_trace;
  /// Volume of the best enclosing ellipsoid found so far, per iteration.
  std::vector<double> volume_trace;
};

/// Khachiyan's algorithm with away steps on the columns of `points`, started on
/// the extremes along the principal axes; stops once every lifted distance of a
/// support point lies within (1 +- tolerance)(K + 1). The returned shape is rescaled so that
/// every point has membership <= 1. Throws DegenerateGeometry for fewer than
/// K + 1 affinely independent points.
MveeResult mvee_detailed(const Eigen::Ref<const Eigen::MatrixXd>& points, double tolerance = 1e-5,
                         int max_iterations = 20000);
Ellipsoid mvee(const Eigen::Ref<const Eigen::MatrixXd>& points, double tolerance = 1e-5);

/// Volume of the unit ball in K dimensions.
double unit_ball_volume(Index dims);
double ellipsoid_volume(const Ellipsoid& e);

/// n uniform points (K x n) inside the ellipsoid.
Eigen::MatrixXd ellipsoid_sample(const Ellipsoid& e, Index n, std::uint64_t seed);

}  // namespace prepaid
