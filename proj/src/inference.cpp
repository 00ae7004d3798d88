#include "prepaid/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "prepaid/parallel.hpp"

namespace prepaid {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kJitterSteps[] = {0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6};
// A pivot whose square falls below this fraction of the diagonal scale is
// treated as a numerical zero.
constexpr double kPivotFloor = 1e-13;

/// Squared norm of L^-1 d with L stored packed (lower triangle, row order).
double packed_solve_norm(const double* packed, const double* d, Index r, double* work) {
  double q = 0.0;
  Index n = 0;
  for (Index i = 0; i < r; ++i) {
    double acc = d[i];
    for (Index j = 0; j < i; ++j) acc -= packed[n++] * work[j];
    work[i] = acc / packed[n++];
    q += work[i] * work[i];
  }
  return q;
}

}  // namespace

RegularizedCholesky regularized_cholesky(const Eigen::Ref<const Eigen::MatrixXd>& sigma, const std::string& context) {
  const Index r = sigma.rows();
  if (r != sigma.cols() || r == 0) throw DomainError(context + ": covariance must be square and nonempty");
  if (!sigma.allFinite()) throw NumericError(context + ": covariance has non-finite entries");
  const double scale = sigma.diagonal().mean();
  if (!(scale > 0.0)) throw NumericError(context + ": covariance has no positive variance");
  Eigen::MatrixXd work;
  for (double lambda : kJitterSteps) {
    work = sigma;
    const double jitter = lambda * scale;
    work.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(work);
    if (llt.info() != Eigen::Success) continue;
    Eigen::MatrixXd L = llt.matrixL();
    const Eigen::ArrayXd d = L.diagonal().array();
    if (!d.allFinite() || (d.square() < kPivotFloor * scale).any()) continue;
    return {std::move(L), 2.0 * d.log().sum(), jitter};
  }
  throw NumericError(context + ": covariance not factorizable after jitter up to 1e-6 * mean(diag)");
}

double synthetic_loglik(const StatVector& s_obs, const StatVector& mu, const Eigen::Ref<const Eigen::MatrixXd>& sigma) {
  if (s_obs.size() != mu.size() || mu.size() != sigma.rows()) throw DomainError("synthetic_loglik: size mismatch");
  const auto f = regularized_cholesky(sigma);
  const Eigen::VectorXd z = f.L.triangularView<Eigen::Lower>().solve(s_obs - mu);
  return -0.5 * z.squaredNorm() - 0.5 * f.log_det;
}

Eigen::MatrixXd scale_cov(const Eigen::Ref<const Eigen::MatrixXd>& sigma, double t_prepaid, double t_obs) {
  if (!(t_obs > 0.0) || !(t_prepaid > 0.0)) throw DomainError("scale_cov: lengths must be positive");
  return (t_prepaid / t_obs) * sigma;
}

std::size_t select_t_prepaid(std::span<const Index> t_prepaid, double t_obs) {
  if (t_prepaid.empty()) throw DomainError("no T_prepaid available");
  if (!(t_obs >= 1.0)) throw DomainError("T_obs must be >= 1");
  std::size_t best = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < t_prepaid.size(); ++i) {
    const double gap = std::abs(std::log(static_cast<double>(t_prepaid[i])) - std::log(t_obs));
    if (gap < best_gap) {
      best_gap = gap;
      best = i;
    }
  }
  return best;
}

std::vector<Index> top_n(const Eigen::Ref<const Eigen::VectorXd>& scores, Index n) {
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(scores.size()));
  for (Index p = 0; p < scores.size(); ++p)
    if (scores[p] > kNegInf) order.push_back(p);
  const auto take = static_cast<std::size_t>(std::clamp<Index>(n, 0, static_cast<Index>(order.size())));
  auto better = [&](Index a, Index b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), better);
  order.resize(take);
  return order;
}

// ---------------------------------------------------------------------------

LikelihoodIndex::LikelihoodIndex(const PrepaidDatabase& db, unsigned workers) : db_(&db), r_(db.stat_count()) {
  db.validate();
  const auto nt = db.header.t_prepaid.size();
  const Index omega = db.size();
  packed_.assign(nt, Eigen::MatrixXd::Zero(packed_size(r_), omega));
  log_det_.assign(nt, Eigen::VectorXd::Zero(omega));
  usable_.assign(nt, std::vector<std::uint8_t>(static_cast<std::size_t>(omega), 0));
  parallel_for(static_cast<std::size_t>(omega), workers == 0 ? default_workers() : workers, [&](std::size_t i) {
    const auto p = static_cast<Index>(i);
    if (db.failed(p)) return;
    for (std::size_t t = 0; t < nt; ++t) {
      try {
        const auto f = regularized_cholesky(db.covariance(p, t));
        packed_[t].col(p) = pack_lower(f.L);
        log_det_[t][p] = f.log_det;
        usable_[t][i] = 1;
      } catch (const NumericError&) {
        // The record stays unusable at this T_prepaid.
      }
    }
  });
}

Index LikelihoodIndex::usable_count(std::size_t t) const {
  return static_cast<Index>(std::count(usable_[t].begin(), usable_[t].end(), std::uint8_t{1}));
}

double LikelihoodIndex::loglik(Index p, const StatVector& s_obs, double t_obs, std::size_t t) const {
  if (s_obs.size() != r_) throw DomainError("statistic vector length differs from the database schema");
  if (!usable(p, t)) return kNegInf;
  const double c = static_cast<double>(db_->header.t_prepaid[t]) / t_obs;
  Eigen::VectorXd d = s_obs - db_->mu.col(p);
  Eigen::VectorXd work(r_);
  const double q = packed_solve_norm(packed_[t].col(p).data(), d.data(), r_, work.data());
  return -0.5 * q / c - 0.5 * (static_cast<double>(r_) * std::log(c) + log_det_[t][p]);
}

Eigen::VectorXd LikelihoodIndex::logliks(const StatVector& s_obs, double t_obs, std::size_t* t_used,
                                         unsigned workers) const {
  if (s_obs.size() != r_) throw DomainError("statistic vector length differs from the database schema");
  if (!s_obs.allFinite()) throw DomainError("observed statistics must be finite");
  const std::size_t t = select_t_prepaid(db_->header.t_prepaid, t_obs);
  if (t_used) *t_used = t;
  const Index omega = db_->size();
  const double c = static_cast<double>(db_->header.t_prepaid[t]) / t_obs;
  const double offset = static_cast<double>(r_) * std::log(c);
  Eigen::VectorXd out(omega);
  constexpr std::size_t kChunk = 4096;
  const std::size_t chunks = (static_cast<std::size_t>(omega) + kChunk - 1) / kChunk;
  parallel_for(chunks, workers == 0 ? default_workers() : workers, [&](std::size_t chunk) {
    Eigen::VectorXd d(r_), work(r_);
    const auto begin = static_cast<Index>(chunk * kChunk);
    const Index end = std::min<Index>(omega, begin + static_cast<Index>(kChunk));
    for (Index p = begin; p < end; ++p) {
      if (!usable(p, t)) {
        out[p] = kNegInf;
        continue;
      }
      d = s_obs - db_->mu.col(p);
      const double q = packed_solve_norm(packed_[t].col(p).data(), d.data(), r_, work.data());
      out[p] = -0.5 * q / c - 0.5 * (offset + log_det_[t][p]);
    }
  });
  return out;
}

Eigen::MatrixXd LikelihoodIndex::factor(Index p, std::size_t t) const {
  return unpack_lower(packed_[t].col(p), r_).triangularView<Eigen::Lower>();
}

NeighborSet nn_by_synthlik(const LikelihoodIndex& index, const StatVector& s_obs, double t_obs, Index n) {
  NeighborSet out;
  const Eigen::VectorXd scores = index.logliks(s_obs, t_obs, &out.t_index);
  if (index.usable_count(out.t_index) == 0) throw EmptyDatabase("no usable grid point in the database");
  if (n < 1) throw DomainError("neighbor count must be >= 1");
  out.indices = top_n(scores, n);
  out.scores.reserve(out.indices.size());
  for (Index p : out.indices) out.scores.push_back(scores[p]);
  return out;
}

NeighborSet nn_by_synthlik(const PrepaidDatabase& db, const StatVector& s_obs, double t_obs, Index n) {
  return nn_by_synthlik(LikelihoodIndex(db), s_obs, t_obs, n);
}

// ---------------------------------------------------------------------------

MahalanobisMetric::MahalanobisMetric(const Eigen::Ref<const Eigen::MatrixXd>& w)
    : L_(regularized_cholesky(w, "pooled covariance").L) {}

double MahalanobisMetric::operator()(const Eigen::Ref<const Eigen::VectorXd>& a,
                                     const Eigen::Ref<const Eigen::VectorXd>& b) const {
  if (a.size() != L_.rows() || b.size() != L_.rows()) throw DomainError("mahalanobis: size mismatch");
  return L_.triangularView<Eigen::Lower>().solve(a - b).squaredNorm();
}

Eigen::VectorXd MahalanobisMetric::to_columns(const Eigen::Ref<const Eigen::MatrixXd>& samples,
                                              const Eigen::Ref<const Eigen::VectorXd>& target) const {
  if (samples.rows() != L_.rows() || target.size() != L_.rows()) throw DomainError("mahalanobis: size mismatch");
  const Eigen::MatrixXd z = L_.triangularView<Eigen::Lower>().solve(samples.colwise() - target);
  return z.colwise().squaredNorm().transpose();
}

double mahalanobis_eps(const Eigen::Ref<const Eigen::VectorXd>& s_sample, const Eigen::Ref<const Eigen::VectorXd>& s_obs,
                       const Eigen::Ref<const Eigen::MatrixXd>& w) {
  return MahalanobisMetric(w)(s_sample, s_obs);
}

Eigen::MatrixXd rescale_posterior(const Eigen::Ref<const Eigen::MatrixXd>& samples, double t_prepaid, double t_obs,
                                  const Eigen::Ref<const Eigen::VectorXd>& weights) {
  if (samples.cols() < 2) throw DomainError("rescale_posterior needs at least two samples");
  if (!(t_prepaid > 0.0) || !(t_obs > 0.0)) throw DomainError("rescale_posterior: lengths must be positive");
  Eigen::VectorXd mean;
  if (weights.size() == 0) {
    mean = samples.rowwise().mean();
  } else {
    if (weights.size() != samples.cols()) throw DomainError("rescale_posterior: one weight per sample");
    mean = samples * weights / weights.sum();
  }
  const double factor = std::sqrt(t_prepaid / t_obs);
  Eigen::MatrixXd out = (samples.colwise() - mean) * factor;
  out.colwise() += mean;
  return out;
}

}  // namespace prepaid
