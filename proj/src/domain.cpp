#include "prepaid/domain.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "prepaid/rng.hpp"

namespace prepaid {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double forward(Transform t, double v) { return t == Transform::log ? std::log(v) : v; }
double inverse(Transform t, double v) { return t == Transform::log ? std::exp(v) : v; }

}  // namespace

const char* to_string(Transform t) noexcept { return t == Transform::log ? "log" : "identity"; }

ParameterSpace::ParameterSpace(std::vector<std::string> names, Eigen::VectorXd user_lower, Eigen::VectorXd user_upper,
                               std::vector<Transform> transforms)
    : names_(std::move(names)),
      user_lower_(std::move(user_lower)),
      user_upper_(std::move(user_upper)),
      transforms_(std::move(transforms)) {
  const auto k = static_cast<Index>(names_.size());
  if (k < 1) throw DomainError("parameter space needs at least one dimension");
  if (transforms_.empty()) transforms_.assign(names_.size(), Transform::identity);
  if (user_lower_.size() != k || user_upper_.size() != k || static_cast<Index>(transforms_.size()) != k)
    throw DomainError("parameter space: names, bounds and transforms differ in length");
  lower_.resize(k);
  upper_.resize(k);
  for (Index i = 0; i < k; ++i) {
    if (!(user_lower_[i] < user_upper_[i]))
      throw DomainError("parameter space: lower >= upper for '" + names_[i] + "'");
    if (transforms_[i] == Transform::log && !(user_lower_[i] > 0.0))
      throw DomainError("parameter space: log transform needs a positive lower bound for '" + names_[i] + "'");
    lower_[i] = forward(transforms_[i], user_lower_[i]);
    upper_[i] = forward(transforms_[i], user_upper_[i]);
  }
}

ParameterVector ParameterSpace::to_grid(const Eigen::VectorXd& user_values) const {
  if (user_values.size() != dim()) throw DomainError("parameter vector has the wrong dimension");
  ParameterVector out(dim());
  for (Index i = 0; i < dim(); ++i) {
    const double v = user_values[i];
    if (!(v >= user_lower_[i] && v <= user_upper_[i])) {
      std::ostringstream msg;
      msg << "parameter '" << names_[i] << "' = " << v << " outside [" << user_lower_[i] << ", " << user_upper_[i]
          << "]";
      throw DomainError(msg.str());
    }
    out[i] = forward(transforms_[i], v);
  }
  return out;
}

Eigen::VectorXd ParameterSpace::to_user(const ParameterVector& grid_values) const {
  if (grid_values.size() != dim()) throw DomainError("parameter vector has the wrong dimension");
  Eigen::VectorXd out(dim());
  for (Index i = 0; i < dim(); ++i) out[i] = inverse(transforms_[i], grid_values[i]);
  return out;
}

bool ParameterSpace::contains(const ParameterVector& theta) const {
  if (theta.size() != dim()) return false;
  return (theta.array() >= lower_.array()).all() && (theta.array() <= upper_.array()).all();
}

Index ParameterSpace::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<Index>(i);
  throw DomainError("unknown parameter '" + name + "'");
}

bool operator==(const ParameterSpace& a, const ParameterSpace& b) {
  return a.names_ == b.names_ && a.transforms_ == b.transforms_ && a.user_lower_ == b.user_lower_ &&
         a.user_upper_ == b.user_upper_;
}

ParameterVector transform_to_grid(const ParameterSpace& space, const Eigen::VectorXd& user_values) {
  return space.to_grid(user_values);
}

StatSchema::StatSchema(std::vector<std::string> n, Eigen::VectorXd low, Eigen::VectorXd high)
    : names(std::move(n)), feasible_low(std::move(low)), feasible_high(std::move(high)) {
  const auto r = static_cast<Index>(names.size());
  if (feasible_low.size() != r || feasible_high.size() != r)
    throw DomainError("statistic schema: names and ranges differ in length");
  for (Index j = 0; j < r; ++j)
    if (feasible_low[j] > feasible_high[j]) throw DomainError("statistic schema: empty range for '" + names[j] + "'");
}

void StatSchema::check(const StatVector& s) const {
  if (s.size() != size())
    throw DomainError("statistic vector has length " + std::to_string(s.size()) + ", schema expects " +
                      std::to_string(size()));
  for (Index i = 0; i < s.size(); ++i)
    if (!std::isfinite(s[i])) throw DomainError("statistic '" + names[static_cast<std::size_t>(i)] + "' is not finite");
}

bool operator==(const StatSchema& a, const StatSchema& b) {
  return a.names == b.names && a.feasible_low == b.feasible_low && a.feasible_high == b.feasible_high;
}

// ---------------------------------------------------------------------------

Prior Prior::uniform(const ParameterSpace& space) {
  Prior p;
  p.kind_ = Kind::uniform_box;
  p.lower_ = space.lower();
  p.upper_ = space.upper();
  return p;
}

Prior Prior::scaled_beta(const ParameterSpace& space, std::vector<BetaShape> shapes) {
  if (static_cast<Index>(shapes.size()) != space.dim()) throw DomainError("beta prior: one shape per dimension");
  for (const auto& s : shapes)
    if (!(s.alpha > 0.0 && s.beta > 0.0)) throw DomainError("beta prior: shapes must be positive");
  Prior p;
  p.kind_ = Kind::scaled_beta;
  p.lower_ = space.lower();
  p.upper_ = space.upper();
  p.shapes_ = std::move(shapes);
  return p;
}

Prior Prior::product(std::vector<Prior> factors) {
  if (factors.empty()) throw DomainError("product prior needs at least one factor");
  Prior p;
  p.kind_ = Kind::product;
  p.factors_ = std::move(factors);
  return p;
}

double Prior::log_density(const ParameterVector& theta) const {
  switch (kind_) {
    case Kind::product: {
      double total = 0.0;
      for (const auto& f : factors_) total += f.log_density(theta);
      return total;
    }
    case Kind::uniform_box: {
      if (theta.size() != lower_.size()) throw DomainError("prior: dimension mismatch");
      if ((theta.array() < lower_.array()).any() || (theta.array() > upper_.array()).any()) return kNegInf;
      return -(upper_ - lower_).array().log().sum();
    }
    case Kind::scaled_beta: {
      if (theta.size() != lower_.size()) throw DomainError("prior: dimension mismatch");
      double total = 0.0;
      for (Index k = 0; k < theta.size(); ++k) {
        const double width = upper_[k] - lower_[k];
        const double x = (theta[k] - lower_[k]) / width;
        if (!(x >= 0.0 && x <= 1.0)) return kNegInf;
        const auto [a, b] = shapes_[static_cast<std::size_t>(k)];
        const double log_norm = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b);
        // 0 * log(0) = 0 keeps Beta(1, 1) flat on the closed interval.
        const double lx = a == 1.0 ? 0.0 : (a - 1.0) * std::log(x);
        const double l1x = b == 1.0 ? 0.0 : (b - 1.0) * std::log1p(-x);
        total += log_norm + lx + l1x - std::log(width);
      }
      return total;
    }
  }
  return kNegInf;
}

ParameterVector Prior::sample(std::uint64_t seed) const {
  if (kind_ == Kind::product) throw DomainError("sampling a product prior is not supported");
  Rng rng(splitmix64(seed));
  ParameterVector theta(lower_.size());
  for (Index k = 0; k < theta.size(); ++k) {
    double x;
    if (kind_ == Kind::uniform_box) {
      x = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    } else {
      const auto [a, b] = shapes_[static_cast<std::size_t>(k)];
      const double ga = std::gamma_distribution<double>(a, 1.0)(rng);
      const double gb = std::gamma_distribution<double>(b, 1.0)(rng);
      x = ga / (ga + gb);
    }
    theta[k] = lower_[k] + x * (upper_[k] - lower_[k]);
  }
  return theta;
}

TyingPrior::TyingPrior(std::vector<Index> tied_dims, double sigma_prior, Eigen::VectorXd scale)
    : tied_(std::move(tied_dims)), sigma_(sigma_prior), scale_(std::move(scale)) {
  if (!(sigma_ > 0.0)) throw DomainError("tying prior: sigma_prior must be positive");
  if (tied_.empty()) throw DomainError("tying prior: no tied dimensions");
}

double TyingPrior::log_density(std::span<const ParameterVector> conditions) const {
  if (conditions.empty()) return 0.0;
  if (std::isinf(sigma_)) return 0.0;
  constexpr double log_root_2pi = 0.91893853320467274178;
  double total = 0.0;
  const double c = static_cast<double>(conditions.size());
  for (Index k : tied_) {
    const double scale = scale_.size() > 0 ? scale_[k] : 1.0;
    double mean = 0.0;
    for (const auto& theta : conditions) mean += theta[k];
    mean /= c;
    for (const auto& theta : conditions) {
      const double z = (theta[k] - mean) / (sigma_ * scale);
      total += -0.5 * z * z - log_root_2pi;
    }
  }
  return total;
}

}  // namespace prepaid
