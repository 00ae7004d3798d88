#include "prepaid/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "prepaid/learn.hpp"
#include "prepaid/parallel.hpp"
#include "prepaid/rng.hpp"

namespace prepaid {

namespace {

constexpr double kMinSlope = 1e-12;
// Half-width of the simulated grid window, in sd of the grid statistic noise.
constexpr double kNoiseSpan = 10.0;

}  // namespace

SelectionMoments toy_selection_moments(double delta, Index n, double mu_first) {
  if (!(delta > 0.0)) throw DomainError("gap must be > 0");
  if (n < 1) throw DomainError("neighbor count must be >= 1");
  const auto nn = static_cast<double>(n);
  SelectionMoments m;
  m.mean = mu_first + delta * (nn - 1.0) / 2.0;
  m.variance = delta * delta * (nn - 1.0) * (nn + 1.0) / 12.0;
  m.sd = std::sqrt(m.variance);
  return m;
}

void ToyConfig::validate() const {
  if (!(delta > 0.0)) throw DomainError("toy: gap must be > 0");
  if (n < 2) throw DomainError("toy: N must be >= 2");
  if (!(t_sim >= 1.0)) throw DomainError("toy: T_sim must be >= 1");
  if (!(t_obs >= 1.0)) throw DomainError("toy: T_obs must be >= 1");
  if (!(s > 0.0)) throw DomainError("toy: s must be > 0");
  if (situation != 1 && situation != 2) throw DomainError("toy: situation must be 1 or 2");
}

EstimatorMoments toy_estimator_moments(const ToyConfig& c) {
  c.validate();
  if (c.situation != 1) throw DomainError("closed-form moments exist for situation 1 only");
  const double s2 = c.s * c.s;
  const double d2 = c.delta * c.delta;
  const auto n = static_cast<double>(c.n);
  const double n3 = n * n * n;
  EstimatorMoments m;
  m.mean = c.mu - (c.alpha / c.t_sim) * 12.0 * s2 / (d2 * n3);
  m.variance = s2 / c.t_obs + s2 / (c.t_sim * n) + 12.0 * s2 * c.alpha * c.alpha / (c.t_sim * d2 * n3 * n) +
               36.0 * s2 * s2 / (c.t_sim * c.t_obs * d2 * n3) +
               144.0 * s2 * s2 * s2 / (c.t_sim * c.t_sim * c.t_obs * d2 * d2 * n3 * n3);
  return m;
}

ToyCell toy_cell(const ToyConfig& c, Index replications, std::uint64_t seed) {
  c.validate();
  if (replications < 1) throw DomainError("toy: replications must be >= 1");
  Rng rng(splitmix64(seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double obs_sd = c.s / std::sqrt(c.t_obs);
  const double sim_sd = c.s / std::sqrt(c.t_sim);
  const auto n = static_cast<std::size_t>(c.n);
  const double half_width = 2.0 * static_cast<double>(c.n) * c.delta + kNoiseSpan * sim_sd + c.delta;

  std::vector<double> errors;
  errors.reserve(static_cast<std::size_t>(replications));
  Index excluded = 0;
  std::vector<double> mu_grid, stat_grid;
  std::vector<std::size_t> order;
  for (Index rep = 0; rep < replications; ++rep) {
    const double ybar = c.mu + obs_sd * normal(rng);
    const double stat_obs = c.situation == 1 ? ybar : ybar * ybar;
    const double center = c.situation == 1 ? ybar : std::abs(ybar);
    const double shift = c.delta * unit(rng);
    double lo = center - half_width;
    if (c.situation == 2) lo = std::max(lo, 0.0);
    const double first = std::ceil((lo - shift) / c.delta);
    const double last = std::floor((center + half_width - shift) / c.delta);
    mu_grid.clear();
    stat_grid.clear();
    for (double j = first; j <= last; j += 1.0) {
      const double mu_j = shift + j * c.delta;
      if (c.situation == 2 && mu_j < 0.0) continue;
      const double ysim = mu_j + sim_sd * normal(rng);
      mu_grid.push_back(mu_j);
      stat_grid.push_back(c.situation == 1 ? ysim : ysim * ysim);
    }
    if (mu_grid.size() < n) throw DomainError("toy: grid window holds fewer than N points");
    order.resize(mu_grid.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n - 1), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return std::abs(stat_grid[a] - stat_obs) < std::abs(stat_grid[b] - stat_obs);
                     });
    Eigen::MatrixXd X(1, c.n);
    Eigen::VectorXd y(c.n);
    for (std::size_t i = 0; i < n; ++i) {
      X(0, static_cast<Index>(i)) = mu_grid[order[i]];
      y[static_cast<Index>(i)] = stat_grid[order[i]];
    }
    Eigen::VectorXd beta;
    try {
      beta = linear_fit(X, y);
    } catch (const NumericError&) {
      ++excluded;
      continue;
    }
    if (std::abs(beta[1]) < kMinSlope) {
      ++excluded;
      continue;
    }
    errors.push_back((stat_obs - beta[0]) / beta[1] - c.mu);
  }

  ToyCell cell;
  cell.delta = c.delta;
  cell.n = c.n;
  cell.excluded = excluded;
  cell.replications = static_cast<Index>(errors.size());
  if (errors.empty()) return cell;
  const double m = static_cast<double>(errors.size());
  double sum = 0.0, sum_sq = 0.0;
  for (double e : errors) {
    sum += e;
    sum_sq += e * e;
  }
  cell.bias = sum / m;
  cell.mse = sum_sq / m;
  cell.rmse = std::sqrt(cell.mse);
  double var_e = 0.0, var_e2 = 0.0;
  for (double e : errors) {
    var_e += (e - cell.bias) * (e - cell.bias);
    var_e2 += (e * e - cell.mse) * (e * e - cell.mse);
  }
  if (errors.size() > 1) {
    cell.bias_se = std::sqrt(var_e / (m - 1.0) / m);
    cell.mse_se = std::sqrt(var_e2 / (m - 1.0) / m);
  }
  return cell;
}

std::vector<double> default_toy_deltas() {
  std::vector<double> out;
  for (int i = 0; i <= 12; ++i) out.push_back(std::pow(10.0, -4.0 + 0.25 * i));
  return out;
}

std::vector<Index> default_toy_ns() { return {10, 30, 100, 300}; }

const ToyCell& ToyStudy::cell(std::size_t delta_index, std::size_t n_index) const {
  return cells.at(n_index * deltas.size() + delta_index);
}

ToyStudy toy_rmse_study(const ToyStudyOptions& o) {
  if (o.replications < 100) throw DomainError("toy study needs at least 100 replications");
  if (o.deltas.empty() || o.ns.empty()) throw DomainError("toy study needs at least one gap and one N");
  ToyStudy study;
  study.situation = o.situation;
  study.deltas = o.deltas;
  study.ns = o.ns;
  study.cells.resize(o.deltas.size() * o.ns.size());
  parallel_for(study.cells.size(), o.workers == 0 ? default_workers() : o.workers, [&](std::size_t i) {
    ToyConfig c;
    c.mu = o.mu;
    c.s = o.s;
    c.t_obs = o.t_obs;
    c.t_sim = o.t_sim;
    c.situation = o.situation;
    c.delta = o.deltas[i % o.deltas.size()];
    c.n = o.ns[i / o.deltas.size()];
    study.cells[i] = toy_cell(c, o.replications, stream_seed(o.seed, i));
  });
  return study;
}

void write_toy_csv(const ToyStudy& study, std::ostream& out) {
  out << "delta,n,replications,excluded,bias,bias_se,mse,mse_se,rmse\n";
  out.precision(12);
  for (const auto& c : study.cells)
    out << c.delta << ',' << c.n << ',' << c.replications << ',' << c.excluded << ',' << c.bias << ',' << c.bias_se
        << ',' << c.mse << ',' << c.mse_se << ',' << c.rmse << '\n';
}

void write_toy_matrix(const ToyStudy& study, std::ostream& out) {
  out.precision(12);
  out << study.deltas.size();
  for (double d : study.deltas) out << ' ' << d;
  out << '\n';
  for (std::size_t ni = 0; ni < study.ns.size(); ++ni) {
    out << study.ns[ni];
    for (std::size_t di = 0; di < study.deltas.size(); ++di) out << ' ' << study.cell(di, ni).rmse;
    out << '\n';
  }
}

}  // namespace prepaid
