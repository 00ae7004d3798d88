#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prepaid/error.hpp"

namespace prepaid {

using Index = Eigen::Index;

/// A point of the parameter space, always expressed in grid scale.
using ParameterVector = Eigen::VectorXd;

/// A vector of summary statistics laid out according to a StatSchema.
using StatVector = Eigen::VectorXd;

enum class Transform : std::uint8_t { identity = 0, log = 1 };

const char* to_string(Transform t) noexcept;

/// Bounded box of model parameters.
///
/// Bounds are given on the user scale. Each dimension carries a transform
/// mapping user values onto the grid scale, the scale in which the grid is
/// laid out uniformly and in which all distances are measured.
class ParameterSpace {
 public:
  ParameterSpace() = default;
  ParameterSpace(std::vector<std::string> names, Eigen::VectorXd user_lower, Eigen::VectorXd user_upper,
                 std::vector<Transform> transforms = {});

  Index dim() const noexcept { return static_cast<Index>(names_.size()); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Transform>& transforms() const noexcept { return transforms_; }
  const Eigen::VectorXd& user_lower() const noexcept { return user_lower_; }
  const Eigen::VectorXd& user_upper() const noexcept { return user_upper_; }

  // Grid-scale box.
  const Eigen::VectorXd& lower() const noexcept { return lower_; }
  const Eigen::VectorXd& upper() const noexcept { return upper_; }
  Eigen::VectorXd range() const { return upper_ - lower_; }

  /// Throws DomainError naming the offending dimension.
  ParameterVector to_grid(const Eigen::VectorXd& user_values) const;
  Eigen::VectorXd to_user(const ParameterVector& grid_values) const;

  bool contains(const ParameterVector& theta) const;
  Index index_of(const std::string& name) const;

  friend bool operator==(const ParameterSpace& a, const ParameterSpace& b);

 private:
  std::vector<std::string> names_;
  Eigen::VectorXd user_lower_, user_upper_;
  std::vector<Transform> transforms_;
  Eigen::VectorXd lower_, upper_;
};

ParameterVector transform_to_grid(const ParameterSpace& space, const Eigen::VectorXd& user_values);

/// Names and feasible ranges of a summary-statistic vector.
struct StatSchema {
  std::vector<std::string> names;
  Eigen::VectorXd feasible_low;
  Eigen::VectorXd feasible_high;

  StatSchema() = default;
  StatSchema(std::vector<std::string> names, Eigen::VectorXd low, Eigen::VectorXd high);

  Index size() const noexcept { return static_cast<Index>(names.size()); }
  void check(const StatVector& s) const;

  friend bool operator==(const StatSchema& a, const StatSchema& b);
};

/// Observations stored one per row (a count for a time series, an abundance
/// vector for a community frame).
struct Dataset {
  Eigen::MatrixXd rows;

  Index size() const noexcept { return rows.rows(); }
};

/// A simulator plus its summary-statistic extractor.
class Model {
 public:
  virtual ~Model() = default;

  virtual const std::string& id() const = 0;
  virtual const ParameterSpace& space() const = 0;
  virtual const StatSchema& schema() const = 0;

  /// Smallest dataset length for which summarize is defined.
  virtual Index min_length() const = 0;

  /// Deterministic in (theta, length, seed). theta is in grid scale.
  virtual Dataset simulate(const ParameterVector& theta, Index length, std::uint64_t seed) const = 0;

  /// Statistics of rows [begin, begin + count).
  virtual StatVector summarize(const Dataset& data, Index begin, Index count) const = 0;

  StatVector summarize(const Dataset& data) const { return summarize(data, 0, data.size()); }

  /// Reads the model's plain-text dataset format.
  virtual Dataset parse_dataset(std::istream& in) const = 0;
};

// ---------------------------------------------------------------------------
// Priors

struct BetaShape {
  double alpha = 1.0;
  double beta = 1.0;
};

/// Log-density over a single parameter vector (grid scale).
class Prior {
 public:
  enum class Kind { uniform_box, scaled_beta, product };

  static Prior uniform(const ParameterSpace& space);
  /// Independent Beta(alpha_k, beta_k) on (theta_k - low_k) / (high_k - low_k).
  static Prior scaled_beta(const ParameterSpace& space, std::vector<BetaShape> shapes);
  static Prior product(std::vector<Prior> factors);

  Kind kind() const noexcept { return kind_; }

  /// log p(theta); -infinity outside the support.
  double log_density(const ParameterVector& theta) const;

  /// Draws from the prior (uniform/beta kinds only).
  ParameterVector sample(std::uint64_t seed) const;

 private:
  Kind kind_ = Kind::uniform_box;
  Eigen::VectorXd lower_, upper_;
  std::vector<BetaShape> shapes_;
  std::vector<Prior> factors_;
};

/// Gaussian penalty tying selected coordinates across experimental conditions:
/// sum over conditions and tied dims of log N((theta_k^c - mean_k) / (sigma * scale_k)).
class TyingPrior {
 public:
  TyingPrior(std::vector<Index> tied_dims, double sigma_prior, Eigen::VectorXd scale = {});

  double log_density(std::span<const ParameterVector> conditions) const;

  const std::vector<Index>& tied_dims() const noexcept { return tied_; }
  double sigma() const noexcept { return sigma_; }

 private:
  std::vector<Index> tied_;
  double sigma_;
  Eigen::VectorXd scale_;
};

}  // namespace prepaid
