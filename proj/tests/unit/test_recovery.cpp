#include <doctest.h>

#include <cmath>
#include <sstream>

#include "prepaid/error.hpp"
#include "prepaid/recovery.hpp"
#include "support.hpp"

using namespace prepaid;

TEST_CASE("test sets respect the trimmed box and the seed") {
  const auto space = support::plane_model().space();
  TestSpec spec;
  spec.count = 200;
  spec.trim = 0.1;
  const auto a = draw_test_set(space, spec, 5);
  const Eigen::VectorXd lo = space.lower() + 0.1 * space.range();
  const Eigen::VectorXd hi = space.upper() - 0.1 * space.range();
  for (Index j = 0; j < a.cols(); ++j) {
    CHECK((a.col(j).array() > lo.array()).all());
    CHECK((a.col(j).array() < hi.array()).all());
  }
  CHECK(a == draw_test_set(space, spec, 5));
  CHECK(a != draw_test_set(space, spec, 6));
  spec.trim = 0.5;
  CHECK_THROWS_AS(draw_test_set(space, spec, 5), DomainError);
}

TEST_CASE("row summaries by hand") {
  const auto space = support::plane_model().space();
  std::vector<RecoveryRow> rows(4);
  const double errs[4][2] = {{0.1, -0.2}, {-0.3, 0.0}, {0.2, 0.4}, {0.0, 0.0}};
  for (int i = 0; i < 4; ++i) {
    rows[i].truth = Eigen::Vector2d(0.0, std::log(2.0));
    rows[i].estimate = rows[i].truth + Eigen::Vector2d(errs[i][0], errs[i][1]);
    rows[i].seconds = i + 1.0;
    ConfidenceSet ci;
    ci.intervals = {{-1.0, 1.0}, {i < 2 ? 1.5 : 2.5, 3.0}};
    rows[i].ci = ci;
  }
  rows[3].error = "failed";
  std::vector<const RecoveryRow*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  const auto s = summarize_rows(ptrs, space);
  CHECK(s.items == 3);
  CHECK(s.failures == 1);
  CHECK(s.rmse[0] == doctest::Approx(std::sqrt((0.01 + 0.09 + 0.04) / 3.0)));
  CHECK(s.mae[1] == doctest::Approx(0.2));
  CHECK(s.median_abs_error[0] == doctest::Approx(0.2));
  CHECK(s.median_abs_error[1] == doctest::Approx(0.2));
  CHECK(s.coverage[0] == 1.0);
  CHECK(s.coverage[1] == doctest::Approx(2.0 / 3.0));
  CHECK(s.mean_seconds == doctest::Approx(2.0));
}

TEST_CASE("recovery study output does not depend on workers") {
  const auto model = support::plane_model();
  const auto db = support::plane_database(1500, 5, 8);
  const LikelihoodIndex index(db, 1);
  TestSpec spec;
  spec.count = 6;
  spec.t_obs = {100.0, 400.0};
  RecoveryOptions o;
  o.methods = {Method::grid_ml, Method::lin_ml};
  o.workers = 1;
  const auto serial = recovery_study(index, model, spec, o, 3);
  o.workers = 3;
  const auto parallel = recovery_study(index, model, spec, o, 3);
  REQUIRE(serial.rows.size() == 24);
  CHECK(serial.summaries.size() == 4);
  for (std::size_t i = 0; i < serial.rows.size(); ++i) {
    CHECK(serial.rows[i].estimate == parallel.rows[i].estimate);
    CHECK(serial.rows[i].truth == parallel.rows[i].truth);
  }
  const auto& s = serial.summary(Method::grid_ml, 400.0);
  CHECK(s.items == 6);
  CHECK(s.rmse[0] < 0.5);
  std::ostringstream csv;
  write_recovery_csv(serial, csv);
  CHECK(csv.str().rfind("item,t_obs,method,true_a,true_b,est_a,est_b", 0) == 0);
  CHECK(recovery_json(serial).contains("summaries"));

  o.methods = {Method::grid_map};
  CHECK_THROWS_AS(recovery_study(index, model, spec, o, 3), DomainError);
}
