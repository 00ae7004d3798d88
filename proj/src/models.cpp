#include "prepaid/models.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "prepaid/rng.hpp"

namespace prepaid {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> read_numbers(const std::string& line) {
  std::istringstream in(line);
  std::vector<double> out;
  std::string token;
  while (in >> token) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != token.size()) throw DomainError("dataset: cannot parse '" + token + "'");
    out.push_back(v);
  }
  return out;
}

bool is_blank_or_comment(const std::string& line) {
  const auto pos = line.find_first_not_of(" \t\r");
  return pos == std::string::npos || line[pos] == '#';
}

/// Prefix sums over species weights with O(log S) update and sampling.
class FenwickTree {
 public:
  explicit FenwickTree(std::size_t n) : tree_(n + 1, 0.0) {
    while ((std::size_t{1} << (log_ + 1)) <= n) ++log_;
  }

  void rebuild(const std::vector<double>& weights) {
    std::fill(tree_.begin(), tree_.end(), 0.0);
    for (std::size_t i = 0; i < weights.size(); ++i) {
      tree_[i + 1] += weights[i];
      const std::size_t parent = (i + 1) + ((i + 1) & (~(i + 1) + 1));
      if (parent < tree_.size()) tree_[parent] += tree_[i + 1];
    }
  }

  void add(std::size_t i, double delta) {
    for (std::size_t k = i + 1; k < tree_.size(); k += k & (~k + 1)) tree_[k] += delta;
  }

  double total() const {
    double s = 0.0;
    for (std::size_t k = tree_.size() - 1; k > 0; k -= k & (~k + 1)) s += tree_[k];
    return s;
  }

  /// Smallest index whose inclusive prefix sum exceeds target.
  std::size_t find(double target) const {
    std::size_t pos = 0;
    for (std::size_t step = std::size_t{1} << log_; step > 0; step >>= 1) {
      const std::size_t next = pos + step;
      if (next < tree_.size() && tree_[next] <= target) {
        pos = next;
        target -= tree_[next];
      }
    }
    return std::min(pos, tree_.size() - 2);
  }

 private:
  std::vector<double> tree_;
  int log_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------
// Ricker

RickerSeries simulate_ricker(const RickerParams& theta, Index length, Index burn_in, std::uint64_t seed,
                             double initial) {
  if (length < 1) throw DomainError("ricker: length must be >= 1");
  if (!(theta.r > 0.0) || !(theta.sigma >= 0.0) || !(theta.phi >= 0.0))
    throw DomainError("ricker: parameters must be positive");
  Rng rng(splitmix64(seed));
  std::normal_distribution<double> noise(0.0, 1.0);
  RickerSeries out;
  out.y.resize(static_cast<std::size_t>(length));

  double n = initial;
  auto step = [&](Index t) {
    const double e = theta.sigma > 0.0 ? theta.sigma * noise(rng) : 0.0;
    n = theta.r * n * std::exp(-n + e);
    if (!std::isfinite(n)) throw SimulationError("ricker: latent state not finite at t = " + std::to_string(t));
  };
  for (Index t = 0; t < burn_in; ++t) step(t - burn_in);
  for (Index t = 0; t < length; ++t) {
    const double rate = theta.phi * n;
    std::int64_t y = 0;
    if (rate > 0.0) y = std::poisson_distribution<std::int64_t>(rate)(rng);
    out.y[static_cast<std::size_t>(t)] = y;
    step(t);
  }
  return out;
}

RickerSummary ricker_stats(std::span<const double> y) {
  const auto T = static_cast<Index>(y.size());
  if (T < 10) throw DomainError("ricker statistics need at least 10 observations");
  RickerSummary out;
  out.stats.setZero(kRickerStatCount);

  double mean = 0.0;
  Index zeros = 0;
  for (double v : y) {
    mean += v;
    zeros += (v == 0.0);
  }
  mean /= static_cast<double>(T);
  out.stats[0] = mean;
  out.stats[1] = static_cast<double>(zeros) / static_cast<double>(T);

  for (Index lag = 1; lag <= kRickerMaxLag; ++lag) {
    double acc = 0.0;
    for (Index t = 0; t + lag < T; ++t) acc += (y[t] - mean) * (y[t + lag] - mean);
    out.stats[1 + lag] = acc / static_cast<double>(T);
  }

  // z_t on {1, z_{t-1}, z_{t-1}^2}, solved on centered moments.
  const Index n = T - 1;
  std::vector<double> z(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) z[t] = std::pow(y[t], 0.3);
  double mx = 0.0, mx2 = 0.0, mz = 0.0;
  for (Index t = 1; t < T; ++t) {
    mx += z[t - 1];
    mx2 += z[t - 1] * z[t - 1];
    mz += z[t];
  }
  mx /= static_cast<double>(n);
  mx2 /= static_cast<double>(n);
  mz /= static_cast<double>(n);
  double cxx = 0.0, cxq = 0.0, cqq = 0.0, cxz = 0.0, cqz = 0.0;
  for (Index t = 1; t < T; ++t) {
    const double dx = z[t - 1] - mx;
    const double dq = z[t - 1] * z[t - 1] - mx2;
    const double dz = z[t] - mz;
    cxx += dx * dx;
    cxq += dx * dq;
    cqq += dq * dq;
    cxz += dx * dz;
    cqz += dq * dz;
  }
  const double det = cxx * cqq - cxq * cxq;
  if (!(cxx > 0.0) || !(cqq > 0.0) || det <= 1e-10 * cxx * cqq) {
    out.degenerate_regression = true;
  } else {
    out.stats[7] = (cqq * cxz - cxq * cqz) / det;
    out.stats[8] = (cxx * cqz - cxq * cxz) / det;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trait model

double filtering_value(double trait, const TraitParams& theta) {
  const double d = trait - theta.optimum;
  return 1.0 + theta.advantage * std::exp(-d * d / (2.0 * theta.width * theta.width));
}

double regional_trait(Index species, Index species_count) {
  if (species_count < 2) return 0.0;
  return 100.0 * static_cast<double>(species) / static_cast<double>(species_count - 1);
}

Eigen::VectorXd CommunityState::abundance() const {
  Eigen::VectorXd a = Eigen::VectorXd::Zero(species_count);
  for (auto k : membership) a[k] += 1.0;
  return a;
}

std::vector<CommunityState> simulate_trait(const TraitParams& theta, Index community_size, Index species_count,
                                           Index steps, Index thin, Index burn_in, std::uint64_t seed) {
  if (community_size < 2 || species_count < 2) throw DomainError("trait: J and S must be >= 2");
  if (!(theta.immigration > 0.0) || !(theta.advantage >= 0.0) || !(theta.width > 0.0))
    throw DomainError("trait: I and sigma must be positive, A nonnegative");
  if (steps < 0 || burn_in < 0) throw DomainError("trait: negative step count");
  if (steps > 0 && (thin < 1 || steps < thin)) throw DomainError("trait: need steps >= thin >= 1");

  const auto J = static_cast<std::size_t>(community_size);
  const auto S = static_cast<std::size_t>(species_count);
  Rng rng(splitmix64(seed));
  std::uniform_int_distribution<std::size_t> pick_individual(0, J - 1);
  std::uniform_int_distribution<std::size_t> pick_species(0, S - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<double> fitness(S);
  for (std::size_t k = 0; k < S; ++k) fitness[k] = filtering_value(regional_trait(static_cast<Index>(k), species_count), theta);

  CommunityState state;
  state.species_count = species_count;
  state.membership.resize(J);
  std::vector<std::int64_t> counts(S, 0);
  for (auto& m : state.membership) {
    m = static_cast<std::int32_t>(pick_species(rng));
    ++counts[static_cast<std::size_t>(m)];
  }

  FenwickTree tree(S);
  std::vector<double> weights(S);
  auto rebuild = [&] {
    for (std::size_t k = 0; k < S; ++k) weights[k] = static_cast<double>(counts[k]) * fitness[k];
    tree.rebuild(weights);
  };
  rebuild();

  const double p_immigrant = theta.immigration / (theta.immigration + static_cast<double>(J) + 1.0);
  auto death = [&] {
    const std::size_t i = pick_individual(rng);
    const auto old = static_cast<std::size_t>(state.membership[i]);
    --counts[old];
    tree.add(old, -fitness[old]);
    std::size_t born;
    if (unit(rng) < p_immigrant) {
      born = pick_species(rng);
    } else {
      born = tree.find(unit(rng) * tree.total());
      // Rounding in the prefix sums can land on an emptied species.
      while (counts[born] == 0) born = (born + 1) % S;
    }
    state.membership[i] = static_cast<std::int32_t>(born);
    ++counts[born];
    tree.add(born, fitness[born]);
  };

  for (Index d = 0; d < burn_in; ++d) {
    death();
    if ((d + 1) % community_size == 0) rebuild();
  }
  rebuild();

  std::vector<CommunityState> frames;
  if (steps == 0) {
    frames.push_back(state);
    return frames;
  }
  frames.reserve(static_cast<std::size_t>(steps / thin));
  for (Index d = 1; d <= steps; ++d) {
    death();
    if (d % thin == 0) {
      frames.push_back(state);
      rebuild();
    }
  }
  return frames;
}

TraitSummary trait_frame_stats(const Eigen::Ref<const Eigen::VectorXd>& abundance) {
  const Index S = abundance.size();
  TraitSummary out;
  out.stats.setZero(kTraitStatCount);
  const double J = abundance.sum();
  if (!(J > 0.0)) throw DomainError("trait statistics: empty community frame");
  double richness = 0.0, entropy = 0.0, mean = 0.0;
  for (Index k = 0; k < S; ++k) {
    const double a = abundance[k];
    if (a <= 0.0) continue;
    richness += 1.0;
    const double p = a / J;
    entropy -= p * std::log(p);
    mean += a * regional_trait(k, S);
  }
  mean /= J;
  double m2 = 0.0, m3 = 0.0;
  for (Index k = 0; k < S; ++k) {
    const double a = abundance[k];
    if (a <= 0.0) continue;
    const double d = regional_trait(k, S) - mean;
    m2 += a * d * d;
    m3 += a * d * d * d;
  }
  m2 /= J;
  m3 /= J;
  out.stats[0] = richness;
  out.stats[1] = entropy;
  out.stats[2] = mean;
  if (richness <= 1.0 || !(m2 > 0.0)) {
    out.degenerate_skewness = true;
  } else {
    out.stats[3] = m3 / std::pow(m2, 1.5);
  }
  return out;
}

TraitSummary trait_stats(std::span<const CommunityState> frames) {
  if (frames.empty()) throw DomainError("trait statistics need at least one frame");
  TraitSummary out;
  out.stats.setZero(kTraitStatCount);
  for (const auto& f : frames) {
    const auto one = trait_frame_stats(f.abundance());
    out.stats += one.stats;
    out.degenerate_skewness = out.degenerate_skewness || one.degenerate_skewness;
  }
  out.stats /= static_cast<double>(frames.size());
  return out;
}

// ---------------------------------------------------------------------------
// Toy

double simulate_toy(double mu, double s, Index length, ToyStatistic statistic, std::uint64_t seed) {
  if (!(s > 0.0)) throw DomainError("toy: s must be positive");
  if (length < 1) throw DomainError("toy: length must be >= 1");
  Rng rng(splitmix64(seed));
  std::normal_distribution<double> draw(mu, s);
  double sum = 0.0;
  for (Index i = 0; i < length; ++i) sum += draw(rng);
  const double mean = sum / static_cast<double>(length);
  return statistic == ToyStatistic::mean ? mean : mean * mean;
}

// ---------------------------------------------------------------------------
// Models

namespace {

StatSchema ricker_schema() {
  Eigen::VectorXd lo(kRickerStatCount), hi(kRickerStatCount);
  lo << 0.0, 0.0, -kInf, -kInf, -kInf, -kInf, -kInf, -kInf, -kInf;
  hi << kInf, 1.0, kInf, kInf, kInf, kInf, kInf, kInf, kInf;
  return StatSchema({"mean", "zero_fraction", "acov1", "acov2", "acov3", "acov4", "acov5", "ar_linear", "ar_quadratic"},
                    lo, hi);
}

ParameterSpace ricker_default_space() {
  return ParameterSpace({"r", "sigma", "phi"}, Eigen::Vector3d(1.0, 0.05, 0.0), Eigen::Vector3d(90.0, 0.7, 20.0));
}

}  // namespace

RickerModel::RickerModel() : RickerModel("ricker", ricker_default_space()) {}

RickerModel::RickerModel(std::string id, ParameterSpace space)
    : id_(std::move(id)), space_(std::move(space)), schema_(ricker_schema()) {
  if (space_.dim() != 3) throw DomainError("ricker model: space must have 3 dimensions (r, sigma, phi)");
}

RickerModel RickerModel::online() {
  return RickerModel("ricker-online",
                     ParameterSpace({"r", "sigma", "phi"}, Eigen::Vector3d(1.0, 0.05, std::exp(-2.0)),
                                    Eigen::Vector3d(200.0, 0.7, std::exp(7.0)),
                                    {Transform::log, Transform::identity, Transform::log}));
}

RickerParams RickerModel::params(const ParameterVector& theta) const {
  const Eigen::VectorXd u = space_.to_user(theta);
  return {u[0], u[1], u[2]};
}

Dataset RickerModel::simulate(const ParameterVector& theta, Index length, std::uint64_t seed) const {
  const auto series = simulate_ricker(params(theta), length, kBurnIn, seed);
  Dataset d;
  d.rows.resize(length, 1);
  for (Index t = 0; t < length; ++t) d.rows(t, 0) = static_cast<double>(series.y[static_cast<std::size_t>(t)]);
  return d;
}

StatVector RickerModel::summarize(const Dataset& data, Index begin, Index count) const {
  if (begin < 0 || count < 0 || begin + count > data.size()) throw DomainError("ricker: segment out of range");
  return ricker_stats(std::span<const double>(data.rows.data() + begin, static_cast<std::size_t>(count))).stats;
}

Dataset RickerModel::parse_dataset(std::istream& in) const {
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    if (is_blank_or_comment(line)) continue;
    const auto nums = read_numbers(line);
    if (nums.size() != 1) throw DomainError("ricker dataset: expected one count per line");
    const double v = nums.front();
    if (v < 0.0 || v != std::floor(v)) throw DomainError("ricker dataset: counts must be nonnegative integers");
    values.push_back(v);
  }
  Dataset d;
  d.rows = Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Index>(values.size()));
  return d;
}

namespace {

ParameterSpace trait_space() {
  Eigen::Vector4d lo(std::exp(3.0), 0.1, -25.0, 0.5);
  Eigen::Vector4d hi(std::exp(5.0), 5.0, 125.0, 25.0);
  return ParameterSpace({"I", "A", "h", "sigma"}, lo, hi,
                        {Transform::log, Transform::log, Transform::identity, Transform::log});
}

}  // namespace

TraitModel::TraitModel(Index community_size, Index species_count)
    : community_size_(community_size), species_count_(species_count), space_(trait_space()) {
  if (community_size < 2 || species_count < 2) throw DomainError("trait model: J and S must be >= 2");
  const double m = static_cast<double>(std::min(community_size, species_count));
  Eigen::Vector4d lo(1.0, 0.0, 0.0, -kInf);
  Eigen::Vector4d hi(m, std::log(m), 100.0, kInf);
  schema_ = StatSchema({"richness", "shannon", "trait_mean", "trait_skewness"}, lo, hi);
}

TraitParams TraitModel::params(const ParameterVector& theta) const {
  const Eigen::VectorXd u = space_.to_user(theta);
  return {u[0], u[1], u[2], u[3]};
}

Dataset TraitModel::simulate(const ParameterVector& theta, Index length, std::uint64_t seed) const {
  if (length < 1) throw DomainError("trait: length must be >= 1");
  const auto frames = simulate_trait(params(theta), community_size_, species_count_, length * community_size_,
                                     community_size_, 100 * community_size_, seed);
  Dataset d;
  d.rows.setZero(length, species_count_);
  for (Index f = 0; f < length; ++f)
    for (auto k : frames[static_cast<std::size_t>(f)].membership) d.rows(f, k) += 1.0;
  return d;
}

StatVector TraitModel::summarize(const Dataset& data, Index begin, Index count) const {
  if (begin < 0 || count < 1 || begin + count > data.size()) throw DomainError("trait: segment out of range");
  if (data.rows.cols() != species_count_) throw DomainError("trait: frame width differs from species count");
  StatVector acc = StatVector::Zero(kTraitStatCount);
  for (Index f = begin; f < begin + count; ++f) acc += trait_frame_stats(data.rows.row(f).transpose()).stats;
  return acc / static_cast<double>(count);
}

Dataset TraitModel::parse_dataset(std::istream& in) const {
  std::vector<std::vector<double>> frames;
  std::string line;
  while (std::getline(in, line)) {
    if (is_blank_or_comment(line)) continue;
    auto nums = read_numbers(line);
    if (static_cast<Index>(nums.size()) != species_count_)
      throw DomainError("trait dataset: each frame needs " + std::to_string(species_count_) + " abundances");
    for (double v : nums)
      if (v < 0.0) throw DomainError("trait dataset: abundances must be nonnegative");
    frames.push_back(std::move(nums));
  }
  Dataset d;
  d.rows.resize(static_cast<Index>(frames.size()), species_count_);
  for (std::size_t f = 0; f < frames.size(); ++f)
    for (Index k = 0; k < species_count_; ++k) d.rows(static_cast<Index>(f), k) = frames[f][static_cast<std::size_t>(k)];
  return d;
}

GaussianMeanModel::GaussianMeanModel(std::string id, ParameterSpace space, double noise_sd)
    : id_(std::move(id)), space_(std::move(space)), noise_sd_(noise_sd) {
  if (!(noise_sd_ > 0.0)) throw DomainError("gaussian model: noise sd must be positive");
  std::vector<std::string> names;
  for (const auto& n : space_.names()) names.push_back("mean_" + n);
  schema_ = StatSchema(std::move(names), Eigen::VectorXd::Constant(space_.dim(), -kInf),
                       Eigen::VectorXd::Constant(space_.dim(), kInf));
}

GaussianMeanModel GaussianMeanModel::toy() {
  return GaussianMeanModel("toy", ParameterSpace({"mu"}, Eigen::VectorXd::Constant(1, -5.0), Eigen::VectorXd::Constant(1, 5.0)),
                           1.0);
}

Dataset GaussianMeanModel::simulate(const ParameterVector& theta, Index length, std::uint64_t seed) const {
  if (length < 1) throw DomainError("gaussian model: length must be >= 1");
  const Eigen::VectorXd mu = space_.to_user(theta);
  Rng rng(splitmix64(seed));
  std::normal_distribution<double> z(0.0, 1.0);
  Dataset d;
  d.rows.resize(length, space_.dim());
  for (Index t = 0; t < length; ++t)
    for (Index k = 0; k < space_.dim(); ++k) d.rows(t, k) = mu[k] + noise_sd_ * z(rng);
  return d;
}

StatVector GaussianMeanModel::summarize(const Dataset& data, Index begin, Index count) const {
  if (begin < 0 || count < 1 || begin + count > data.size()) throw DomainError("gaussian model: segment out of range");
  return data.rows.middleRows(begin, count).colwise().mean().transpose();
}

Dataset GaussianMeanModel::parse_dataset(std::istream& in) const {
  std::vector<double> values;
  std::string line;
  Index rows = 0;
  while (std::getline(in, line)) {
    if (is_blank_or_comment(line)) continue;
    const auto nums = read_numbers(line);
    if (static_cast<Index>(nums.size()) != space_.dim()) throw DomainError("gaussian dataset: wrong number of columns");
    values.insert(values.end(), nums.begin(), nums.end());
    ++rows;
  }
  Dataset d;
  d.rows = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(values.data(), rows,
                                                                                              space_.dim());
  return d;
}

std::vector<std::string> model_ids() { return {"ricker", "ricker-online", "trait", "toy"}; }

std::unique_ptr<Model> make_model(std::string_view id) {
  if (id == "ricker") return std::make_unique<RickerModel>();
  if (id == "ricker-online") return std::make_unique<RickerModel>(RickerModel::online());
  if (id == "trait") return std::make_unique<TraitModel>();
  if (id == "toy") return std::make_unique<GaussianMeanModel>(GaussianMeanModel::toy());
  std::string valid;
  for (const auto& m : model_ids()) valid += (valid.empty() ? "" : ", ") + m;
  throw DomainError("unknown model '" + std::string(id) + "' (valid: " + valid + ")");
}

}  // namespace prepaid
