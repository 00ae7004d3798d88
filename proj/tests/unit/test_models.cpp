#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/QR>

#include "prepaid/error.hpp"
#include "prepaid/models.hpp"

using namespace prepaid;

namespace {

std::vector<double> as_double(const RickerSeries& s) { return {s.y.begin(), s.y.end()}; }

}  // namespace

TEST_CASE("ricker autocovariances match the brute-force double sum") {
  const auto series = simulate_ricker({44.7, 0.3, 10.0}, 500, 50, 3);
  const auto y = as_double(series);
  const auto stats = ricker_stats(y).stats;
  const auto T = static_cast<Index>(y.size());
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(T);
  CHECK(stats[0] == doctest::Approx(mean).epsilon(1e-14));
  for (Index lag = 1; lag <= kRickerMaxLag; ++lag) {
    double acc = 0.0;
    for (Index i = 0; i < T; ++i)
      for (Index j = 0; j < T; ++j)
        if (j - i == lag) acc += (y[i] - mean) * (y[j] - mean);
    const double oracle = acc / static_cast<double>(T);
    CHECK(std::abs(stats[1 + lag] - oracle) <= 1e-10 * std::max(1.0, std::abs(oracle)));
  }
  const double zeros = static_cast<double>(std::count(y.begin(), y.end(), 0.0)) / static_cast<double>(T);
  CHECK(stats[1] == zeros);
}

TEST_CASE("ricker slope statistics match a QR least-squares fit") {
  const auto y = as_double(simulate_ricker({20.0, 0.4, 8.0}, 400, 50, 17));
  const auto T = static_cast<Index>(y.size());
  Eigen::MatrixXd design(T - 1, 3);
  Eigen::VectorXd target(T - 1);
  for (Index t = 1; t < T; ++t) {
    const double z = std::pow(y[t - 1], 0.3);
    design.row(t - 1) << 1.0, z, z * z;
    target[t - 1] = std::pow(y[t], 0.3);
  }
  const Eigen::VectorXd beta = design.colPivHouseholderQr().solve(target);
  const auto stats = ricker_stats(y).stats;
  CHECK(stats[7] == doctest::Approx(beta[1]).epsilon(1e-9));
  CHECK(stats[8] == doctest::Approx(beta[2]).epsilon(1e-9));
}

TEST_CASE("ricker statistics need ten observations and flag a constant series") {
  std::vector<double> short_series(9, 1.0);
  CHECK_THROWS_AS(ricker_stats(short_series), DomainError);
  std::vector<double> flat(50, 0.0);
  const auto s = ricker_stats(flat);
  CHECK(s.degenerate_regression);
  CHECK(s.stats.allFinite());
}

TEST_CASE("ricker simulation is deterministic per seed") {
  const auto a = simulate_ricker({30.0, 0.3, 10.0}, 200, 50, 5);
  const auto b = simulate_ricker({30.0, 0.3, 10.0}, 200, 50, 5);
  const auto c = simulate_ricker({30.0, 0.3, 10.0}, 200, 50, 6);
  CHECK(a.y == b.y);
  CHECK(a.y != c.y);
  CHECK(a.y.size() == 200);
  const auto silent = simulate_ricker({30.0, 0.3, 0.0}, 100, 50, 5);
  CHECK(std::all_of(silent.y.begin(), silent.y.end(), [](std::int64_t v) { return v == 0; }));
}

TEST_CASE("ricker model summarizes segments and parses counts") {
  RickerModel model;
  CHECK(model.space().dim() == 3);
  CHECK(model.schema().size() == kRickerStatCount);
  const auto theta = model.space().to_grid(Eigen::Vector3d(44.7, 0.3, 10.0));
  const auto data = model.simulate(theta, 300, 9);
  CHECK(data.size() == 300);
  std::vector<double> seg(data.rows.data() + 100, data.rows.data() + 200);
  CHECK((model.summarize(data, 100, 100) - ricker_stats(seg).stats).norm() == 0.0);

  std::istringstream good("# counts\n3\n0\n12\n\n7\n5\n1\n0\n2\n4\n9\n");
  CHECK(model.parse_dataset(good).size() == 10);
  std::istringstream bad("3\n-1\n");
  CHECK_THROWS(model.parse_dataset(bad));
  std::istringstream junk("3\nabc\n");
  CHECK_THROWS(model.parse_dataset(junk));
}

TEST_CASE("trait frame statistics match the per-individual definitions") {
  const Index S = 30;
  Eigen::VectorXd abundance = Eigen::VectorXd::Zero(S);
  abundance[2] = 5;
  abundance[7] = 1;
  abundance[11] = 9;
  abundance[29] = 3;
  std::vector<double> traits;
  for (Index k = 0; k < S; ++k)
    for (int i = 0; i < static_cast<int>(abundance[k]); ++i) traits.push_back(regional_trait(k, S));
  const double J = static_cast<double>(traits.size());
  const double mean = std::accumulate(traits.begin(), traits.end(), 0.0) / J;
  double m2 = 0.0, m3 = 0.0;
  for (double u : traits) {
    m2 += (u - mean) * (u - mean) / J;
    m3 += (u - mean) * (u - mean) * (u - mean) / J;
  }
  double entropy = 0.0;
  for (Index k = 0; k < S; ++k)
    if (abundance[k] > 0) entropy -= abundance[k] / J * std::log(abundance[k] / J);

  const auto s = trait_frame_stats(abundance);
  CHECK(s.stats[0] == 4.0);
  CHECK(s.stats[1] == doctest::Approx(entropy).epsilon(1e-12));
  CHECK(s.stats[2] == doctest::Approx(mean).epsilon(1e-12));
  CHECK(s.stats[3] == doctest::Approx(m3 / std::pow(m2, 1.5)).epsilon(1e-10));
  CHECK_FALSE(s.degenerate_skewness);

  Eigen::VectorXd single = Eigen::VectorXd::Zero(S);
  single[4] = 10;
  CHECK(trait_frame_stats(single).degenerate_skewness);
}

TEST_CASE("trait filter and regional pool") {
  TraitParams p{50.0, 2.0, 40.0, 5.0};
  CHECK(filtering_value(40.0, p) == doctest::Approx(3.0));
  CHECK(filtering_value(45.0, p) == doctest::Approx(1.0 + 2.0 * std::exp(-0.5)));
  CHECK(regional_trait(0, 11) == doctest::Approx(0.0));
  CHECK(regional_trait(10, 11) == doctest::Approx(100.0));
  CHECK(regional_trait(5, 11) == doctest::Approx(50.0));
}

TEST_CASE("trait simulation keeps the community size") {
  TraitParams p{100.0, 1.0, 50.0, 10.0};
  const auto frames = simulate_trait(p, 80, 40, 800, 80, 400, 21);
  CHECK(frames.size() == 10);
  for (const auto& f : frames) {
    CHECK(f.membership.size() == 80);
    CHECK(f.abundance().sum() == doctest::Approx(80.0));
  }
  const auto again = simulate_trait(p, 80, 40, 800, 80, 400, 21);
  CHECK(frames.back().membership == again.back().membership);
}

TEST_CASE("trait model parses abundance frames") {
  TraitModel model(20, 5);
  std::istringstream in("1 2 3 4 10\n0 0 5 5 10\n");
  const auto d = model.parse_dataset(in);
  CHECK(d.size() == 2);
  CHECK(model.summarize(d).size() == kTraitStatCount);
  std::istringstream wrong("1 2 3\n");
  CHECK_THROWS(model.parse_dataset(wrong));
}

TEST_CASE("toy mean simulation is centered on mu") {
  const double m = simulate_toy(1.5, 2.0, 400000, ToyStatistic::mean, 4);
  CHECK(std::abs(m - 1.5) < 5.0 * 2.0 / std::sqrt(400000.0));
  const double sq = simulate_toy(1.5, 2.0, 400000, ToyStatistic::mean_squared, 4);
  CHECK(sq == doctest::Approx(m * m));
}

TEST_CASE("model registry") {
  const auto ids = model_ids();
  CHECK(ids.size() == 4);
  for (const auto& id : ids) CHECK(make_model(id)->id() == id);
  CHECK_THROWS_AS(make_model("nope"), DomainError);
  const auto online = make_model("ricker-online");
  CHECK(online->space().transforms()[0] == Transform::log);
}
