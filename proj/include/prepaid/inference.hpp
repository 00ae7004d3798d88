#pragma once

#include <span>
#include <string>
#include <vector>

#include "prepaid/grid.hpp"

namespace prepaid {

/// Lower Cholesky factor of sigma + jitter * I.
struct RegularizedCholesky {
  Eigen::MatrixXd L;
  double log_det = 0.0;  // of the regularized matrix
  double jitter = 0.0;   // absolute amount added to the diagonal
};

/// Factors sigma, adding lambda * mean(diag) * I with lambda in {0, 1e-10, ..., 1e-6}
/// until the factor exists and no pivot is negligible against the diagonal scale.
/// Throws NumericError mentioning `context` when every attempt fails.
RegularizedCholesky regularized_cholesky(const Eigen::Ref<const Eigen::MatrixXd>& sigma,
                                         const std::string& context = "covariance");

/// -1/2 (s - mu)' Sigma^-1 (s - mu) - 1/2 log|Sigma|.
double synthetic_loglik(const StatVector& s_obs, const StatVector& mu, const Eigen::Ref<const Eigen::MatrixXd>& sigma);

/// (T_prepaid / T_obs) * sigma.
Eigen::MatrixXd scale_cov(const Eigen::Ref<const Eigen::MatrixXd>& sigma, double t_prepaid, double t_obs);

/// Position in `t_prepaid` of the entry closest to t_obs in log scale; ties go to the earlier entry.
std::size_t select_t_prepaid(std::span<const Index> t_prepaid, double t_obs);

struct NeighborSet {
  std::vector<Index> indices;
  std::vector<double> scores;  // best first
  std::size_t t_index = 0;     // T_prepaid used
};

/// Indices of the n largest scores, ties broken by lower index. Entries equal to
/// -infinity are never returned.
std::vector<Index> top_n(const Eigen::Ref<const Eigen::VectorXd>& scores, Index n);

/// Cholesky factors of every usable record's covariance, one set per T_prepaid,
/// so that a likelihood scan costs one triangular solve per record.
class LikelihoodIndex {
 public:
  explicit LikelihoodIndex(const PrepaidDatabase& db, unsigned workers = 1);

  const PrepaidDatabase& database() const noexcept { return *db_; }

  /// Whether record p has a finite likelihood at T_prepaid slot t.
  bool usable(Index p, std::size_t t) const { return usable_[t][static_cast<std::size_t>(p)] != 0; }
  Index usable_count(std::size_t t) const;

  /// Scaled synthetic log-likelihood of record p; -infinity if unusable.
  double loglik(Index p, const StatVector& s_obs, double t_obs, std::size_t t) const;

  /// loglik for every record at the log-nearest T_prepaid.
  Eigen::VectorXd logliks(const StatVector& s_obs, double t_obs, std::size_t* t_used = nullptr,
                          unsigned workers = 1) const;

  /// Unscaled factor of record p (valid only when usable).
  Eigen::MatrixXd factor(Index p, std::size_t t) const;
  double log_det(Index p, std::size_t t) const { return log_det_[t][p]; }

 private:
  const PrepaidDatabase* db_;
  Index r_;
  std::vector<Eigen::MatrixXd> packed_;        // packed_size(R) x Omega per T_prepaid
  std::vector<Eigen::VectorXd> log_det_;       // Omega per T_prepaid
  std::vector<std::vector<std::uint8_t>> usable_;
};

/// The n records of highest scaled synthetic likelihood. Throws EmptyDatabase
/// when no record is usable.
NeighborSet nn_by_synthlik(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs, Index n);
NeighborSet nn_by_synthlik(const PrepaidDatabase& db, const StatVector& s_obs, double t_obs, Index n);

/// Quadratic form under a fixed pooled covariance W, factored once.
class MahalanobisMetric {
 public:
  explicit MahalanobisMetric(const Eigen::Ref<const Eigen::MatrixXd>& w);

  double operator()(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) const;

  /// Distances of every column of `samples` to `target`.
  Eigen::VectorXd to_columns(const Eigen::Ref<const Eigen::MatrixXd>& samples,
                             const Eigen::Ref<const Eigen::VectorXd>& target) const;

 private:
  Eigen::MatrixXd L_;
};

/// (s_sample - s_obs)' W^-1 (s_sample - s_obs).
double mahalanobis_eps(const Eigen::Ref<const Eigen::VectorXd>& s_sample, const Eigen::Ref<const Eigen::VectorXd>& s_obs,
                       const Eigen::Ref<const Eigen::MatrixXd>& w);

/// Affine map of the columns about their (weighted) mean so that the covariance
/// scales by t_prepaid / t_obs and the mean is unchanged.
Eigen::MatrixXd rescale_posterior(const Eigen::Ref<const Eigen::MatrixXd>& samples, double t_prepaid, double t_obs,
                                  const Eigen::Ref<const Eigen::VectorXd>& weights = Eigen::VectorXd());

}  // namespace prepaid
