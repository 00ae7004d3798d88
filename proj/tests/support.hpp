#pragma once

#include <vector>

#include "prepaid/grid.hpp"
#include "prepaid/models.hpp"

namespace support {

using prepaid::Index;

/// 1-D Gaussian-mean model on [-5, 5] with unit noise.
inline prepaid::PrepaidDatabase toy_database(Index points = 2000, Index t_sim = 10000,
                                             std::vector<Index> t_prepaid = {100, 1000}, Index samples = 10,
                                             std::uint64_t seed = 11) {
  const auto model = prepaid::GaussianMeanModel::toy();
  prepaid::BuildOptions o;
  o.points = points;
  o.t_sim = t_sim;
  o.t_prepaid = std::move(t_prepaid);
  o.samples = samples;
  o.seed = seed;
  o.workers = 1;
  return prepaid::build_database(model, o);
}

/// Two-dimensional Gaussian mean with a log-scaled second coordinate.
inline prepaid::GaussianMeanModel plane_model() {
  return prepaid::GaussianMeanModel(
      "plane", prepaid::ParameterSpace({"a", "b"}, Eigen::Vector2d(-2.0, 0.5), Eigen::Vector2d(2.0, 4.0),
                                       {prepaid::Transform::identity, prepaid::Transform::log}),
      1.0);
}

inline prepaid::PrepaidDatabase plane_database(Index points = 3000, Index samples = 20, std::uint64_t seed = 5) {
  const auto model = plane_model();
  prepaid::BuildOptions o;
  o.points = points;
  o.t_sim = 2000;
  o.t_prepaid = {100};
  o.samples = samples;
  o.seed = seed;
  o.workers = 1;
  return prepaid::build_database(model, o);
}

}  // namespace support
