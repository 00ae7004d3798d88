#include "prepaid/grid.hpp"

#include <array>
#include <cmath>

#include "prepaid/parallel.hpp"
#include "prepaid/rng.hpp"

namespace prepaid {

namespace {

constexpr std::array<std::uint64_t, 16> kPrimes{2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};

double radical_inverse(std::uint64_t index, std::uint64_t base) {
  double result = 0.0;
  double f = 1.0 / static_cast<double>(base);
  double scale = f;
  while (index > 0) {
    result += static_cast<double>(index % base) * scale;
    index /= base;
    scale *= f;
  }
  return result;
}

}  // namespace

Eigen::VectorXd halton_point(std::uint64_t index, Index dims) {
  if (dims < 1 || dims > static_cast<Index>(kPrimes.size())) throw DomainError("halton: dimension must be in [1, 16]");
  Eigen::VectorXd u(dims);
  for (Index k = 0; k < dims; ++k) u[k] = radical_inverse(index, kPrimes[static_cast<std::size_t>(k)]);
  return u;
}

Eigen::MatrixXd design_grid(const ParameterSpace& space, Index count, const HaltonOptions& options) {
  if (count < 1) throw DomainError("design_grid: need at least one point");
  if (options.leap < 1) throw DomainError("design_grid: leap must be >= 1");
  const Index K = space.dim();
  Eigen::MatrixXd points(K, count);
  const Eigen::VectorXd lo = space.lower();
  const Eigen::VectorXd range = space.range();
  for (Index i = 0; i < count; ++i) {
    const std::uint64_t index = 1 + options.burn + static_cast<std::uint64_t>(i) * options.leap;
    points.col(i) = lo + range.cwiseProduct(halton_point(index, K));
  }
  return points;
}

Eigen::VectorXd expected_gap(const ParameterSpace& space, Index count) {
  if (count < 1) throw DomainError("expected_gap: need at least one point");
  return space.range() / std::pow(static_cast<double>(count), 1.0 / static_cast<double>(space.dim()));
}

Eigen::VectorXd pack_lower(const Eigen::Ref<const Eigen::MatrixXd>& symmetric) {
  const Index r = symmetric.rows();
  Eigen::VectorXd out(packed_size(r));
  Index n = 0;
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j <= i; ++j) out[n++] = symmetric(i, j);
  return out;
}

Eigen::MatrixXd unpack_lower(const Eigen::Ref<const Eigen::VectorXd>& packed, Index r) {
  if (packed.size() != packed_size(r)) throw DomainError("unpack_lower: size mismatch");
  Eigen::MatrixXd out(r, r);
  Index n = 0;
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j <= i; ++j) out(i, j) = out(j, i) = packed[n++];
  return out;
}

Eigen::MatrixXd sample_covariance(const Eigen::Ref<const Eigen::MatrixXd>& columns) {
  const Index n = columns.cols();
  if (n < 2) throw DomainError("sample covariance needs at least two columns");
  const Eigen::MatrixXd centered = columns.colwise() - columns.rowwise().mean();
  Eigen::MatrixXd cov = centered * centered.transpose() / static_cast<double>(n - 1);
  // Exact symmetry regardless of the product kernel's summation order.
  return 0.5 * (cov + cov.transpose());
}

// ---------------------------------------------------------------------------

Index PrepaidDatabase::usable_count() const {
  Index n = 0;
  for (auto f : flags) n += (f & kFlagFailed) == 0;
  return n;
}

Eigen::MatrixXd PrepaidDatabase::covariance(Index p, std::size_t t) const {
  return unpack_lower(cov[t].col(p), stat_count());
}

GridRecord PrepaidDatabase::record(Index p) const {
  GridRecord r;
  r.theta = theta.col(p);
  r.mu = mu.col(p);
  for (std::size_t t = 0; t < header.t_prepaid.size(); ++t) {
    r.covariance.push_back(covariance(p, t));
    if (header.samples_per_record > 0) r.samples.emplace_back(sample_block(p, t));
  }
  r.failed = failed(p);
  return r;
}

std::size_t PrepaidDatabase::t_index(Index t_prepaid) const {
  for (std::size_t t = 0; t < header.t_prepaid.size(); ++t)
    if (header.t_prepaid[t] == t_prepaid) return t;
  throw DomainError("T_prepaid " + std::to_string(t_prepaid) + " is not stored in the database");
}

void PrepaidDatabase::validate() const {
  const Index K = header.space.dim();
  const Index R = header.schema.size();
  const Index omega = theta.cols();
  const auto nt = header.t_prepaid.size();
  const Index M = header.samples_per_record;
  auto fail = [](const std::string& what) { throw DomainError("database inconsistent: " + what); };
  if (theta.rows() != K) fail("theta rows differ from K");
  if (mu.rows() != R || mu.cols() != omega) fail("mu shape");
  if (cov.size() != nt) fail("covariance block count");
  for (const auto& c : cov)
    if (c.rows() != packed_size(R) || c.cols() != omega) fail("covariance shape");
  if (M > 0) {
    if (samples.size() != nt) fail("sample block count");
    for (const auto& s : samples)
      if (s.rows() != R || s.cols() != M * omega) fail("sample shape");
  } else if (!samples.empty()) {
    fail("samples present with M = 0");
  }
  if (static_cast<Index>(flags.size()) != omega) fail("flag count");
  if (nt == 0) fail("no T_prepaid");
}

// ---------------------------------------------------------------------------

GridRecord simulate_record(const Model& model, const ParameterVector& theta, const BuildOptions& options,
                           std::uint64_t seed) {
  const Dataset data = model.simulate(theta, options.t_sim, seed);
  GridRecord rec;
  rec.theta = theta;
  rec.mu = model.summarize(data);
  if (!rec.mu.allFinite()) throw SimulationError("non-finite mean statistics");
  const Index R = rec.mu.size();
  for (Index tp : options.t_prepaid) {
    const Index segments = options.t_sim / tp;
    Eigen::MatrixXd stats(R, segments);
    for (Index s = 0; s < segments; ++s) stats.col(s) = model.summarize(data, s * tp, tp);
    if (!stats.allFinite()) throw SimulationError("non-finite segment statistics");
    rec.covariance.push_back(sample_covariance(stats));
    if (options.samples > 0) rec.samples.emplace_back(stats.leftCols(options.samples));
  }
  return rec;
}

PrepaidDatabase build_database(const Model& model, const BuildOptions& options) {
  if (options.points < 1) throw DomainError("build: need at least one grid point");
  if (options.t_prepaid.empty()) throw DomainError("build: empty T_prepaid list");
  if (options.samples < 0) throw DomainError("build: M must be >= 0");
  for (Index tp : options.t_prepaid) {
    if (tp < model.min_length())
      throw DomainError("build: T_prepaid " + std::to_string(tp) + " below the model minimum length");
    if (options.t_sim % tp != 0)
      throw DomainError("build: T_sim must be divisible by every T_prepaid (" + std::to_string(tp) + ")");
    if (options.t_sim / tp < 2) throw DomainError("build: need at least two segments per T_prepaid");
    if (options.samples > options.t_sim / tp)
      throw DomainError("build: M exceeds the segment count for T_prepaid " + std::to_string(tp));
  }

  PrepaidDatabase db;
  db.header.model_id = model.id();
  db.header.space = model.space();
  db.header.schema = model.schema();
  db.header.t_sim = options.t_sim;
  db.header.t_prepaid = options.t_prepaid;
  db.header.samples_per_record = options.samples;
  db.header.build_seed = options.seed;
  db.header.halton = options.halton;

  const Index omega = options.points;
  const Index R = model.schema().size();
  const Index M = options.samples;
  db.theta = design_grid(model.space(), omega, options.halton);
  db.mu.setZero(R, omega);
  db.cov.assign(options.t_prepaid.size(), Eigen::MatrixXd::Zero(packed_size(R), omega));
  if (M > 0) db.samples.assign(options.t_prepaid.size(), Eigen::MatrixXd::Zero(R, M * omega));
  db.flags.assign(static_cast<std::size_t>(omega), 0);

  const unsigned workers = options.workers == 0 ? default_workers() : options.workers;
  parallel_for(static_cast<std::size_t>(omega), workers, [&](std::size_t i) {
    const auto p = static_cast<Index>(i);
    GridRecord rec;
    try {
      rec = simulate_record(model, db.theta.col(p), options, stream_seed(options.seed, i));
    } catch (const SimulationError&) {
      db.flags[i] = PrepaidDatabase::kFlagFailed;
      return;
    }
    db.mu.col(p) = rec.mu;
    for (std::size_t t = 0; t < options.t_prepaid.size(); ++t) {
      db.cov[t].col(p) = pack_lower(rec.covariance[t]);
      if (M > 0) db.samples[t].middleCols(p * M, M) = rec.samples[t];
    }
  });
  return db;
}

}  // namespace prepaid
