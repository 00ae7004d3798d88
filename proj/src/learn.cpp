#include "prepaid/learn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "prepaid/rng.hpp"

namespace prepaid {

namespace {

Eigen::MatrixXd squared_distances(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b) {
  Eigen::MatrixXd d = (-2.0 * a.transpose() * b).eval();
  d.colwise() += a.colwise().squaredNorm().transpose();
  d.rowwise() += b.colwise().squaredNorm();
  return d.cwiseMax(0.0);
}

Eigen::MatrixXd gaussian_kernel(const Eigen::MatrixXd& sq, double bandwidth) {
  return (sq.array() * (-0.5 / (bandwidth * bandwidth))).exp().matrix();
}

struct DualSolution {
  Eigen::MatrixXd alpha;    // N x outputs
  Eigen::RowVectorXd bias;  // outputs
};

/// Solves [0 1'; 1 K + I/reg] [b; alpha] = [0; y] for every column of targets (N x outputs).
DualSolution solve_dual(const Eigen::MatrixXd& kernel, const Eigen::MatrixXd& targets, double reg) {
  const Index n = kernel.rows();
  Eigen::MatrixXd system = kernel;
  system.diagonal().array() += 1.0 / reg;
  Eigen::LLT<Eigen::MatrixXd> llt(system);
  if (llt.info() != Eigen::Success) throw NumericError("lssvm: kernel system is not positive definite");
  const Eigen::VectorXd eta = llt.solve(Eigen::VectorXd::Ones(n));
  const Eigen::MatrixXd nu = llt.solve(targets);
  DualSolution out;
  out.bias = nu.colwise().sum() / eta.sum();
  out.alpha = nu - eta * out.bias;
  if (!out.alpha.allFinite() || !out.bias.allFinite()) throw NumericError("lssvm: non-finite dual solution");
  return out;
}

/// Cross-validated squared error for every (bandwidth, reg) candidate and output.
/// Z: standardized K x N; Y: outputs x N. Returns outputs x candidates.
Eigen::MatrixXd cv_errors(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& Y, const std::vector<double>& bandwidths,
                          const std::vector<double>& regs, int folds) {
  const Index n = Z.cols();
  if (folds < 2 || n < folds) throw DomainError("lssvm_tune: need N >= folds >= 2");
  const Eigen::MatrixXd sq = squared_distances(Z, Z);
  const auto n_cand = static_cast<Index>(bandwidths.size() * regs.size());
  Eigen::MatrixXd err = Eigen::MatrixXd::Zero(Y.rows(), n_cand);
  std::vector<std::vector<Index>> train(static_cast<std::size_t>(folds)), test(static_cast<std::size_t>(folds));
  for (Index i = 0; i < n; ++i)
    for (int f = 0; f < folds; ++f) (i % folds == f ? test : train)[static_cast<std::size_t>(f)].push_back(i);

  for (std::size_t bi = 0; bi < bandwidths.size(); ++bi) {
    const Eigen::MatrixXd kernel = gaussian_kernel(sq, bandwidths[bi]);
    for (int f = 0; f < folds; ++f) {
      const auto& tr = train[static_cast<std::size_t>(f)];
      const auto& te = test[static_cast<std::size_t>(f)];
      const Eigen::MatrixXd k_train = kernel(tr, tr);
      const Eigen::MatrixXd k_cross = kernel(te, tr);
      const Eigen::MatrixXd y_train = Y(Eigen::all, tr).transpose();
      const Eigen::MatrixXd y_test = Y(Eigen::all, te).transpose();
      for (std::size_t ri = 0; ri < regs.size(); ++ri) {
        const auto c = static_cast<Index>(bi * regs.size() + ri);
        try {
          const auto sol = solve_dual(k_train, y_train, regs[ri]);
          Eigen::MatrixXd pred = k_cross * sol.alpha;
          pred.rowwise() += sol.bias;
          err.col(c) += (pred - y_test).colwise().squaredNorm().transpose();
        } catch (const NumericError&) {
          err.col(c).setConstant(std::numeric_limits<double>::infinity());
        }
      }
    }
  }
  return err;
}

}  // namespace

// ---------------------------------------------------------------------------

Standardizer Standardizer::fit(const Eigen::Ref<const Eigen::MatrixXd>& points) {
  if (points.cols() < 1) throw DomainError("standardizer: no points");
  Standardizer s;
  s.mean = points.rowwise().mean();
  const Eigen::MatrixXd centered = points.colwise() - s.mean;
  const double denom = std::max<double>(1.0, static_cast<double>(points.cols() - 1));
  s.scale = (centered.rowwise().squaredNorm() / denom).cwiseSqrt();
  for (Index k = 0; k < s.scale.size(); ++k)
    if (!(s.scale[k] > 0.0)) s.scale[k] = 1.0;
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::Ref<const Eigen::MatrixXd>& points) const {
  return (points.colwise() - mean).array().colwise() / scale.array();
}

Eigen::VectorXd Standardizer::apply_one(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  return (x - mean).cwiseQuotient(scale);
}

double median_pairwise_distance(const Eigen::Ref<const Eigen::MatrixXd>& points) {
  const Index n = points.cols();
  if (n < 2) return 0.0;
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) d.push_back((points.col(i) - points.col(j)).norm());
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  if (d.size() % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(d.begin(), mid);
  return 0.5 * (lower + upper);
}

// ---------------------------------------------------------------------------

KernelSurrogate KernelSurrogate::fit(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::MatrixXd>& Y,
                                     const std::vector<LssvmHyper>& hyper) {
  const Index n = X.cols();
  if (n < 3) throw DomainError("lssvm: need at least 3 training points");
  if (Y.cols() != n) throw DomainError("lssvm: one target column per training point");
  if (static_cast<Index>(hyper.size()) != Y.rows()) throw DomainError("lssvm: one hyperparameter pair per output");
  for (const auto& h : hyper)
    if (!(h.bandwidth > 0.0) || !(h.reg > 0.0)) throw DomainError("lssvm: bandwidth and reg must be positive");

  KernelSurrogate s;
  s.standardizer_ = Standardizer::fit(X);
  s.z_ = s.standardizer_.apply(X);
  s.hyper_ = hyper;
  const Eigen::MatrixXd sq = squared_distances(s.z_, s.z_);
  for (std::size_t r = 0; r < hyper.size(); ++r) {
    const auto it = std::find(s.distinct_bandwidths_.begin(), s.distinct_bandwidths_.end(), hyper[r].bandwidth);
    s.bandwidth_slot_.push_back(static_cast<std::size_t>(it - s.distinct_bandwidths_.begin()));
    if (it == s.distinct_bandwidths_.end()) s.distinct_bandwidths_.push_back(hyper[r].bandwidth);
    const auto sol = solve_dual(gaussian_kernel(sq, hyper[r].bandwidth), Y.row(static_cast<Index>(r)).transpose(),
                                hyper[r].reg);
    s.alpha_.push_back(sol.alpha.col(0));
    s.bias_.push_back(sol.bias[0]);
  }
  return s;
}

Eigen::VectorXd KernelSurrogate::predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const Eigen::VectorXd z = standardizer_.apply_one(x);
  const Eigen::ArrayXd sq = (z_.colwise() - z).colwise().squaredNorm().transpose().array();
  std::vector<Eigen::VectorXd> kernels;
  kernels.reserve(distinct_bandwidths_.size());
  for (double h : distinct_bandwidths_) kernels.emplace_back((sq * (-0.5 / (h * h))).exp().matrix());
  Eigen::VectorXd out(outputs());
  for (Index r = 0; r < outputs(); ++r) {
    const auto idx = static_cast<std::size_t>(r);
    out[r] = kernels[bandwidth_slot_[idx]].dot(alpha_[idx]) + bias_[idx];
  }
  return out;
}

double KernelSurrogate::predict(Index output, const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const auto idx = static_cast<std::size_t>(output);
  const double h = hyper_[idx].bandwidth;
  const Eigen::VectorXd z = standardizer_.apply_one(x);
  const Eigen::ArrayXd sq = (z_.colwise() - z).colwise().squaredNorm().transpose().array();
  return (sq * (-0.5 / (h * h))).exp().matrix().dot(alpha_[idx]) + bias_[idx];
}

KernelSurrogate lssvm_fit(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::VectorXd>& y,
                          double bandwidth, double reg) {
  return KernelSurrogate::fit(X, y.transpose(), {LssvmHyper{bandwidth, reg}});
}

LssvmHyper lssvm_tune(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::VectorXd>& y,
                      const std::vector<double>& bandwidths, const std::vector<double>& regs, int folds) {
  if (bandwidths.empty() || regs.empty()) throw DomainError("lssvm_tune: empty candidate grid");
  const Eigen::MatrixXd Z = Standardizer::fit(X).apply(X);
  const Eigen::MatrixXd err = cv_errors(Z, y.transpose(), bandwidths, regs, folds);
  Index best = 0;
  for (Index c = 1; c < err.cols(); ++c)
    if (err(0, c) < err(0, best)) best = c;
  const auto b = static_cast<std::size_t>(best);
  return {bandwidths[b / regs.size()], regs[b % regs.size()]};
}

KernelSurrogate fit_tuned_surrogate(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::MatrixXd>& Y,
                                    const TuneGrid& grid) {
  if (X.cols() != Y.cols()) throw DomainError("surrogate: one target column per training point");
  const Eigen::MatrixXd Z = Standardizer::fit(X).apply(X);
  double base = median_pairwise_distance(Z);
  if (!(base > 0.0)) base = 1.0;
  std::vector<double> bandwidths;
  for (double f : grid.bandwidth_factors) bandwidths.push_back(f * base);
  const Eigen::MatrixXd err = cv_errors(Z, Y, bandwidths, grid.regs, grid.folds);
  std::vector<LssvmHyper> hyper;
  for (Index r = 0; r < Y.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < err.cols(); ++c)
      if (err(r, c) < err(r, best)) best = c;
    const auto b = static_cast<std::size_t>(best);
    hyper.push_back({bandwidths[b / grid.regs.size()], grid.regs[b % grid.regs.size()]});
  }
  return KernelSurrogate::fit(X, Y, hyper);
}

// ---------------------------------------------------------------------------

Eigen::VectorXd linear_fit(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::VectorXd>& y) {
  const Index K = X.rows();
  const Index n = X.cols();
  if (n <= K + 1) throw DomainError("linear_fit: need more than K + 1 points");
  if (y.size() != n) throw DomainError("linear_fit: one target per point");
  Eigen::MatrixXd design(n, K + 1);
  design.col(0).setOnes();
  design.rightCols(K) = X.transpose();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < K + 1) throw NumericError("linear_fit: rank-deficient design");
  return qr.solve(y);
}

LinearSurrogate LinearSurrogate::fit(const Eigen::Ref<const Eigen::MatrixXd>& X, const Eigen::Ref<const Eigen::MatrixXd>& Y) {
  LinearSurrogate s;
  s.coef_.resize(X.rows() + 1, Y.rows());
  for (Index r = 0; r < Y.rows(); ++r) s.coef_.col(r) = linear_fit(X, Y.row(r).transpose());
  return s;
}

Eigen::VectorXd LinearSurrogate::predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  return coef_.row(0).transpose() + coef_.bottomRows(coef_.rows() - 1).transpose() * x;
}

StatVector clamp_predictions(const StatVector& s, const StatSchema& schema) {
  schema.check(s);
  return s.cwiseMax(schema.feasible_low).cwiseMin(schema.feasible_high);
}

// ---------------------------------------------------------------------------

std::vector<std::vector<Index>> hcluster(const Eigen::Ref<const Eigen::MatrixXd>& points, Index max_cluster_size) {
  if (max_cluster_size < 2) throw DomainError("hcluster: cap must be >= 2");
  const Index n = points.cols();
  if (n == 0) return {};
  if (n <= max_cluster_size) {
    std::vector<Index> all(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    return {all};
  }

  const Eigen::MatrixXd z = Standardizer::fit(points).apply(points);
  Eigen::MatrixXd d = squared_distances(z, z);
  // Nodes 0..n-1 are leaves; node n + m is the m-th merge.
  std::vector<Index> size(static_cast<std::size_t>(2 * n - 1), 1);
  std::vector<std::pair<Index, Index>> children(static_cast<std::size_t>(2 * n - 1), {-1, -1});
  std::vector<Index> slot_node(static_cast<std::size_t>(n));
  std::vector<bool> active(static_cast<std::size_t>(n), true);
  for (Index i = 0; i < n; ++i) slot_node[static_cast<std::size_t>(i)] = i;

  for (Index m = 0; m < n - 1; ++m) {
    Index bi = -1, bj = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) {
      if (!active[static_cast<std::size_t>(i)]) continue;
      for (Index j = i + 1; j < n; ++j) {
        if (!active[static_cast<std::size_t>(j)]) continue;
        if (d(i, j) < best) {
          best = d(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    const Index ni = size[static_cast<std::size_t>(slot_node[static_cast<std::size_t>(bi)])];
    const Index nj = size[static_cast<std::size_t>(slot_node[static_cast<std::size_t>(bj)])];
    for (Index k = 0; k < n; ++k) {
      if (!active[static_cast<std::size_t>(k)] || k == bi || k == bj) continue;
      const auto nk = static_cast<double>(size[static_cast<std::size_t>(slot_node[static_cast<std::size_t>(k)])]);
      const double merged = ((static_cast<double>(ni) + nk) * d(k, bi) + (static_cast<double>(nj) + nk) * d(k, bj) -
                             nk * d(bi, bj)) /
                            (static_cast<double>(ni + nj) + nk);
      d(k, bi) = d(bi, k) = merged;
    }
    const Index node = n + m;
    size[static_cast<std::size_t>(node)] = ni + nj;
    children[static_cast<std::size_t>(node)] = {slot_node[static_cast<std::size_t>(bi)],
                                                slot_node[static_cast<std::size_t>(bj)]};
    slot_node[static_cast<std::size_t>(bi)] = node;
    active[static_cast<std::size_t>(bj)] = false;
  }

  std::vector<Index> clusters{2 * n - 2};
  for (;;) {
    auto largest = std::max_element(clusters.begin(), clusters.end(), [&](Index a, Index b) {
      return size[static_cast<std::size_t>(a)] < size[static_cast<std::size_t>(b)];
    });
    if (size[static_cast<std::size_t>(*largest)] <= max_cluster_size) break;
    const auto [left, right] = children[static_cast<std::size_t>(*largest)];
    *largest = left;
    clusters.push_back(right);
  }

  std::vector<std::vector<Index>> out;
  for (Index root : clusters) {
    std::vector<Index> members, stack{root};
    while (!stack.empty()) {
      const Index node = stack.back();
      stack.pop_back();
      if (node < n) {
        members.push_back(node);
      } else {
        stack.push_back(children[static_cast<std::size_t>(node)].first);
        stack.push_back(children[static_cast<std::size_t>(node)].second);
      }
    }
    std::sort(members.begin(), members.end());
    out.push_back(std::move(members));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return out;
}

// ---------------------------------------------------------------------------

double Ellipsoid::membership(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const Eigen::VectorXd d = x - center;
  return d.dot(shape * d);
}

double unit_ball_volume(Index dims) {
  const double k = static_cast<double>(dims);
  return std::exp(0.5 * k * std::log(std::numbers::pi) - std::lgamma(0.5 * k + 1.0));
}

double ellipsoid_volume(const Ellipsoid& e) {
  Eigen::LLT<Eigen::MatrixXd> llt(e.shape);
  if (llt.info() != Eigen::Success) throw DegenerateGeometry("ellipsoid shape is not positive definite");
  const double log_det = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  return unit_ball_volume(e.shape.rows()) * std::exp(-0.5 * log_det);
}

MveeResult mvee_detailed(const Eigen::Ref<const Eigen::MatrixXd>& points, double tolerance, int max_iterations) {
  const Index K = points.rows();
  const Index n = points.cols();
  if (n < K + 1) throw DegenerateGeometry("mvee: need at least K + 1 points");
  {
    const Eigen::MatrixXd centered = points.colwise() - points.rowwise().mean();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(centered.transpose());
    qr.setThreshold(1e-10);
    if (qr.rank() < K) throw DegenerateGeometry("mvee: points are affinely dependent");
  }

  Eigen::MatrixXd q(K + 1, n);
  q.topRows(K) = points;
  q.row(K).setOnes();
  const double d = static_cast<double>(K);
  const double log_ball = std::log(unit_ball_volume(K));

  // Start on the extreme points along the principal axes.
  Eigen::VectorXd u = Eigen::VectorXd::Zero(n);
  {
    const Eigen::MatrixXd centered = points.colwise() - points.rowwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centered * centered.transpose());
    for (Index k = 0; k < K; ++k) {
      const Eigen::RowVectorXd proj = eig.eigenvectors().col(k).transpose() * points;
      Index lo = 0, hi = 0;
      proj.minCoeff(&lo);
      proj.maxCoeff(&hi);
      u[lo] = 1.0;
      u[hi] = 1.0;
    }
    u /= u.sum();
    Eigen::LLT<Eigen::MatrixXd> check(q * u.asDiagonal() * q.transpose());
    if (check.info() != Eigen::Success || !(check.matrixL().toDenseMatrix().diagonal().minCoeff() > 1e-12))
      u.setConstant(1.0 / static_cast<double>(n));
  }

  MveeResult out;
  Eigen::VectorXd best_u = u;
  double best_log_vol = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iterations; ++it) {
    const Eigen::MatrixXd x = q * u.asDiagonal() * q.transpose();
    Eigen::LLT<Eigen::MatrixXd> llt(x);
    if (llt.info() != Eigen::Success) throw DegenerateGeometry("mvee: moment matrix became singular");
    const Eigen::MatrixXd L = llt.matrixL();
    const double log_det = 2.0 * L.diagonal().array().log().sum();
    const Eigen::VectorXd m = L.triangularView<Eigen::Lower>().solve(q).colwise().squaredNorm().transpose();
    Index j = 0;
    const double m_max = m.maxCoeff(&j);
    Index i = -1;
    double m_min = std::numeric_limits<double>::infinity();
    for (Index p = 0; p < n; ++p)
      if (u[p] > 0.0 && m[p] < m_min) {
        m_min = m[p];
        i = p;
      }
    // Enclosing ellipsoid of this iterate: (p - c)' S^-1 (p - c) <= m_max - 1, with det S = det X.
    const double log_vol = log_ball + 0.5 * (log_det + d * std::log(std::max(m_max - 1.0, 1e-300)));
    if (log_vol < best_log_vol) {
      best_log_vol = log_vol;
      best_u = u;
    }
    out.log_det_trace.push_back(log_det);
    out.volume_trace.push_back(std::exp(best_log_vol));
    out.iterations = it + 1;

    const double gap_up = m_max / (d + 1.0) - 1.0;
    const double gap_down = 1.0 - m_min / (d + 1.0);
    if (std::max(gap_up, gap_down) < tolerance) break;
    if (gap_up >= gap_down) {
      const double step = (m_max - d - 1.0) / ((d + 1.0) * (m_max - 1.0));
      u *= 1.0 - step;
      u[j] += step;
    } else {
      // Away step: shift weight off the least active support point.
      const double drop = u[i] / (1.0 - u[i]);
      const double step = m_min > 1.0 ? std::min((d + 1.0 - m_min) / ((d + 1.0) * (m_min - 1.0)), drop) : drop;
      u *= 1.0 + step;
      u[i] -= step;
      if (step == drop) u[i] = 0.0;
    }
  }

  const Eigen::VectorXd c = points * best_u;
  const Eigen::MatrixXd s = points * best_u.asDiagonal() * points.transpose() - c * c.transpose();
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success) throw DegenerateGeometry("mvee: scatter matrix is singular");
  Eigen::MatrixXd a = llt.solve(Eigen::MatrixXd::Identity(K, K));
  a = 0.5 * (a + a.transpose());
  const Eigen::MatrixXd centered = points.colwise() - c;
  const double reach = (centered.array() * (a * centered).array()).colwise().sum().maxCoeff();
  if (!(reach > 0.0) || !std::isfinite(reach)) throw DegenerateGeometry("mvee: degenerate final ellipsoid");
  out.ellipsoid.center = c;
  out.ellipsoid.shape = a / reach;
  return out;
}

Ellipsoid mvee(const Eigen::Ref<const Eigen::MatrixXd>& points, double tolerance) {
  return mvee_detailed(points, tolerance).ellipsoid;
}

Eigen::MatrixXd ellipsoid_sample(const Ellipsoid& e, Index n, std::uint64_t seed) {
  const Index K = e.center.size();
  Eigen::LLT<Eigen::MatrixXd> llt(e.shape);
  if (llt.info() != Eigen::Success) throw DegenerateGeometry("ellipsoid shape is not positive definite");
  Rng rng(splitmix64(seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::MatrixXd ball(K, n);
  for (Index i = 0; i < n; ++i) {
    Eigen::VectorXd g(K);
    for (Index k = 0; k < K; ++k) g[k] = normal(rng);
    const double radius = std::pow(unit(rng), 1.0 / static_cast<double>(K));
    ball.col(i) = g * (radius / g.norm());
  }
  // A = L L'; x = c + L'^-1 z maps the unit ball onto the ellipsoid.
  Eigen::MatrixXd out = llt.matrixU().solve(ball);
  out.colwise() += e.center;
  return out;
}

}  // namespace prepaid
