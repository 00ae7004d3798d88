#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prepaid/domain.hpp"

namespace prepaid {

// ---------------------------------------------------------------------------
// Ricker map with Poisson observations

struct RickerParams {
  double r = 0.0;      // growth rate
  double sigma = 0.0;  // process-noise sd
  double phi = 0.0;    // observation scaling
};

struct RickerSeries {
  std::vector<std::int64_t> y;
};

/// N_{t+1} = r N_t exp(-N_t + e_t), e_t ~ N(0, sigma^2), y_t ~ Poisson(phi N_t).
/// The first burn_in latent steps are discarded. sigma = 0 is accepted and
/// gives the deterministic map.
RickerSeries simulate_ricker(const RickerParams& theta, Index length, Index burn_in, std::uint64_t seed,
                             double initial = 1.0);

struct RickerSummary {
  StatVector stats;
  bool degenerate_regression = false;
};

/// [mean, zero fraction, autocovariances at lags 1..5 (denominator T),
///  two slope coefficients of z_t on {1, z_{t-1}, z_{t-1}^2} with z = y^0.3].
RickerSummary ricker_stats(std::span<const double> y);

inline constexpr Index kRickerStatCount = 9;
inline constexpr Index kRickerMaxLag = 5;

// ---------------------------------------------------------------------------
// Trait-based community dynamics

struct TraitParams {
  double immigration = 0.0;  // I
  double advantage = 0.0;    // A
  double optimum = 0.0;      // h
  double width = 1.0;        // sigma of the filter
};

/// F(u) = 1 + A exp(-(u - h)^2 / (2 sigma^2)).
double filtering_value(double trait, const TraitParams& theta);

/// Evenly spaced regional trait of species k out of S on [0, 100].
double regional_trait(Index species, Index species_count);

struct CommunityState {
  std::vector<std::int32_t> membership;  // species index of each of the J individuals
  Index species_count = 0;

  Eigen::VectorXd abundance() const;
};

/// Death-replacement dynamics. Each death is replaced by an immigrant drawn
/// uniformly from the regional pool with probability I / (I + J + 1), otherwise
/// by the offspring of a surviving local individual picked with probability
/// proportional to F(u). After burn_in deaths a frame is recorded every `thin`
/// deaths; steps = 0 returns the current community as the only frame.
std::vector<CommunityState> simulate_trait(const TraitParams& theta, Index community_size, Index species_count,
                                           Index steps, Index thin, Index burn_in, std::uint64_t seed);

struct TraitSummary {
  StatVector stats;
  bool degenerate_skewness = false;
};

/// [richness, Shannon entropy, mean trait, trait skewness] of one frame given as
/// species abundances; skewness is the biased standardized third moment over individuals.
TraitSummary trait_frame_stats(const Eigen::Ref<const Eigen::VectorXd>& abundance);

/// Across-frame average of trait_frame_stats.
TraitSummary trait_stats(std::span<const CommunityState> frames);

inline constexpr Index kTraitStatCount = 4;

// ---------------------------------------------------------------------------
// Toy: mean of a normal

enum class ToyStatistic { mean, mean_squared };

/// Draws `length` iid N(mu, s^2) values and returns their mean or squared mean.
double simulate_toy(double mu, double s, Index length, ToyStatistic statistic, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Model implementations

class RickerModel final : public Model {
 public:
  static constexpr Index kBurnIn = 50;

  /// Default box: r in [1, 90], sigma in [0.05, 0.7], phi in [0, 20].
  RickerModel();
  RickerModel(std::string id, ParameterSpace space);

  /// log r in [log 1, log 200], sigma in [0.05, 0.7], log phi in [-2, 7].
  static RickerModel online();

  const std::string& id() const override { return id_; }
  const ParameterSpace& space() const override { return space_; }
  const StatSchema& schema() const override { return schema_; }
  Index min_length() const override { return 10; }
  Dataset simulate(const ParameterVector& theta, Index length, std::uint64_t seed) const override;
  StatVector summarize(const Dataset& data, Index begin, Index count) const override;
  using Model::summarize;
  Dataset parse_dataset(std::istream& in) const override;

  RickerParams params(const ParameterVector& theta) const;

 private:
  std::string id_;
  ParameterSpace space_;
  StatSchema schema_;
};

class TraitModel final : public Model {
 public:
  /// Box on (log I, log A, h, log sigma): I in [e^3, e^5], A in [0.1, 5],
  /// h in [-25, 125], sigma in [0.5, 25].
  explicit TraitModel(Index community_size = 500, Index species_count = 1000);

  const std::string& id() const override { return id_; }
  const ParameterSpace& space() const override { return space_; }
  const StatSchema& schema() const override { return schema_; }
  Index min_length() const override { return 1; }
  /// `length` frames, one every J deaths after 100 J burn-in deaths.
  Dataset simulate(const ParameterVector& theta, Index length, std::uint64_t seed) const override;
  StatVector summarize(const Dataset& data, Index begin, Index count) const override;
  using Model::summarize;
  Dataset parse_dataset(std::istream& in) const override;

  TraitParams params(const ParameterVector& theta) const;
  Index community_size() const noexcept { return community_size_; }
  Index species_count() const noexcept { return species_count_; }

 private:
  std::string id_ = "trait";
  Index community_size_;
  Index species_count_;
  ParameterSpace space_;
  StatSchema schema_;
};

/// Observations are iid N(theta, s^2 I); the statistic is the sample mean.
/// With one dimension this is the toy model of situation 1.
class GaussianMeanModel final : public Model {
 public:
  GaussianMeanModel(std::string id, ParameterSpace space, double noise_sd);

  /// One dimension, mu in [-5, 5], s = 1.
  static GaussianMeanModel toy();

  const std::string& id() const override { return id_; }
  const ParameterSpace& space() const override { return space_; }
  const StatSchema& schema() const override { return schema_; }
  Index min_length() const override { return 1; }
  Dataset simulate(const ParameterVector& theta, Index length, std::uint64_t seed) const override;
  StatVector summarize(const Dataset& data, Index begin, Index count) const override;
  using Model::summarize;
  Dataset parse_dataset(std::istream& in) const override;

  double noise_sd() const noexcept { return noise_sd_; }

 private:
  std::string id_;
  ParameterSpace space_;
  StatSchema schema_;
  double noise_sd_;
};

/// Built-in model ids: "ricker", "ricker-online", "trait", "toy".
std::vector<std::string> model_ids();

/// Throws DomainError for an unknown id.
std::unique_ptr<Model> make_model(std::string_view id);

}  // namespace prepaid
