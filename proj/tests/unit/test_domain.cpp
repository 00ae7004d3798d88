#include <doctest.h>

#include <atomic>
#include <cmath>
#include <set>

#include <boost/math/distributions/beta.hpp>

#include "prepaid/domain.hpp"
#include "prepaid/error.hpp"
#include "prepaid/parallel.hpp"
#include "prepaid/rng.hpp"

using namespace prepaid;

namespace {

ParameterSpace mixed_space() {
  return ParameterSpace({"r", "sigma", "phi"}, Eigen::Vector3d(1.0, 0.05, 0.5), Eigen::Vector3d(200.0, 0.7, 50.0),
                        {Transform::log, Transform::identity, Transform::log});
}

}  // namespace

TEST_CASE("space maps user values to the grid scale and back") {
  const auto space = mixed_space();
  CHECK(space.lower()[0] == doctest::Approx(0.0));
  CHECK(space.upper()[0] == doctest::Approx(std::log(200.0)));
  CHECK(space.lower()[1] == 0.05);
  const Eigen::Vector3d user(44.0, 0.3, 10.0);
  const auto grid = space.to_grid(user);
  CHECK(grid[0] == doctest::Approx(std::log(44.0)));
  CHECK(grid[1] == 0.3);
  CHECK((space.to_user(grid) - user).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(space.contains(grid));
  CHECK(space.index_of("phi") == 2);
  CHECK_THROWS_AS(space.index_of("nope"), DomainError);
}

TEST_CASE("space rejects out-of-box values naming the dimension") {
  const auto space = mixed_space();
  try {
    space.to_grid(Eigen::Vector3d(44.0, 0.9, 10.0));
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("sigma") != std::string::npos);
  }
  CHECK_THROWS_AS(space.to_grid(Eigen::Vector2d(1.0, 1.0)), DomainError);
  CHECK_FALSE(space.contains(Eigen::Vector3d(-1.0, 0.3, 1.0)));
}

TEST_CASE("space construction validates bounds") {
  CHECK_THROWS_AS(ParameterSpace({"a"}, Eigen::VectorXd::Constant(1, 2.0), Eigen::VectorXd::Constant(1, 1.0)),
                  DomainError);
  CHECK_THROWS_AS(ParameterSpace({"a"}, Eigen::VectorXd::Constant(1, 0.0), Eigen::VectorXd::Constant(1, 1.0),
                                 {Transform::log}),
                  DomainError);
}

TEST_CASE("schema check rejects wrong size and non-finite values") {
  StatSchema schema({"m", "v"}, Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(1.0, 10.0));
  CHECK_NOTHROW(schema.check(Eigen::Vector2d(0.5, 2.0)));
  CHECK_THROWS_AS(schema.check(Eigen::Vector3d(0.5, 2.0, 1.0)), DomainError);
  CHECK_THROWS_AS(schema.check(Eigen::Vector2d(std::nan(""), 2.0)), DomainError);
}

TEST_CASE("uniform prior is flat inside the box") {
  const auto space = mixed_space();
  const auto prior = Prior::uniform(space);
  const double expected = -std::log(space.range().prod());
  CHECK(prior.log_density(space.to_grid(Eigen::Vector3d(5.0, 0.2, 3.0))) == doctest::Approx(expected));
  CHECK(prior.log_density(space.to_grid(Eigen::Vector3d(150.0, 0.6, 40.0))) == doctest::Approx(expected));
  CHECK(std::isinf(prior.log_density(Eigen::Vector3d(-1.0, 0.2, 1.0))));
}

TEST_CASE("scaled beta prior matches the beta density") {
  const auto space = mixed_space();
  const std::vector<BetaShape> shapes{{2.0, 5.0}, {1.0, 1.0}, {3.0, 2.0}};
  const auto prior = Prior::scaled_beta(space, shapes);
  const Eigen::Vector3d theta = space.lower() + 0.3 * space.range();
  double expected = 0.0;
  for (Index k = 0; k < 3; ++k) {
    boost::math::beta_distribution<double> d(shapes[static_cast<std::size_t>(k)].alpha,
                                             shapes[static_cast<std::size_t>(k)].beta);
    expected += std::log(boost::math::pdf(d, 0.3)) - std::log(space.range()[k]);
  }
  CHECK(prior.log_density(theta) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("prior samples are reproducible and stay in the box") {
  const auto space = mixed_space();
  const auto prior = Prior::scaled_beta(space, {{2.0, 2.0}, {5.0, 1.0}, {1.0, 1.0}});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto x = prior.sample(seed);
    CHECK(space.contains(x));
    CHECK(x == prior.sample(seed));
  }
  CHECK(prior.sample(1) != prior.sample(2));
}

TEST_CASE("product prior adds factor log densities on the same space") {
  ParameterSpace a({"x"}, Eigen::VectorXd::Constant(1, -1.0), Eigen::VectorXd::Constant(1, 1.0));
  const auto p = Prior::product({Prior::uniform(a), Prior::scaled_beta(a, {{2.0, 2.0}})});
  // Beta(2,2) density at 0.75 is 6 * 0.75 * 0.25.
  const double expected = -std::log(2.0) + std::log(6.0 * 0.75 * 0.25) - std::log(2.0);
  CHECK(p.log_density(Eigen::VectorXd::Constant(1, 0.5)) == doctest::Approx(expected));
}

TEST_CASE("tying prior is a standard normal log density of scaled deviations from the mean") {
  const Eigen::Vector2d scale(2.0, 1.0);
  TyingPrior tie({0}, 0.5, scale);
  std::vector<ParameterVector> c{Eigen::Vector2d(1.0, 7.0), Eigen::Vector2d(2.0, -3.0), Eigen::Vector2d(4.5, 0.0)};
  const double mean = (1.0 + 2.0 + 4.5) / 3.0;
  double expected = 0.0;
  for (const auto& x : c) {
    const double sd = 0.5 * 2.0;
    const double z = (x[0] - mean) / sd;
    expected += -0.5 * z * z - 0.5 * std::log(2.0 * M_PI);
  }
  CHECK(tie.log_density(c) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(TyingPrior({0}, 0.0, scale), DomainError);
  CHECK_THROWS_AS(TyingPrior({0}, -1.0, scale), DomainError);
}

TEST_CASE("stream seeds are deterministic and distinct") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 1000; ++s) seen.insert(stream_seed(42, s));
  CHECK(seen.size() == 1000);
  CHECK(stream_seed(42, 7) == stream_seed(42, 7));
  CHECK(stream_seed(42, 7) != stream_seed(43, 7));
  auto a = make_rng(9, 3);
  auto b = make_rng(9, 3);
  CHECK(a() == b());
}

TEST_CASE("parallel_for visits every index once and rethrows") {
  std::vector<int> hits(1000, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  CHECK_THROWS_AS(parallel_for(100, 3,
                               [](std::size_t i) {
                                 if (i == 17) throw NumericError("boom");
                               }),
                  NumericError);
}
