#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "prepaid/domain.hpp"

namespace prepaid {

/// Radical inverse of `index` in the first K prime bases. K <= 16.
Eigen::VectorXd halton_point(std::uint64_t index, Index dims);

struct HaltonOptions {
  std::uint64_t burn = 20;  // sequence points skipped before the first grid point
  std::uint64_t leap = 1;   // stride between consecutive grid points

  friend bool operator==(const HaltonOptions&, const HaltonOptions&) = default;
};

/// K x count matrix of grid-scale points; column i is halton_point(1 + burn + i * leap)
/// mapped affinely onto the box.
Eigen::MatrixXd design_grid(const ParameterSpace& space, Index count, const HaltonOptions& options = {});

/// Per-dimension expected spacing range_k / count^(1/K) on the grid scale.
Eigen::VectorXd expected_gap(const ParameterSpace& space, Index count);

// ---------------------------------------------------------------------------

inline Index packed_size(Index r) { return r * (r + 1) / 2; }

/// Lower triangle in row order: (0,0), (1,0), (1,1), (2,0), ...
Eigen::VectorXd pack_lower(const Eigen::Ref<const Eigen::MatrixXd>& symmetric);
Eigen::MatrixXd unpack_lower(const Eigen::Ref<const Eigen::VectorXd>& packed, Index r);

/// Sample covariance (denominator n - 1) of the columns of `columns`.
Eigen::MatrixXd sample_covariance(const Eigen::Ref<const Eigen::MatrixXd>& columns);

struct DatabaseHeader {
  std::string model_id;
  ParameterSpace space;
  StatSchema schema;
  Index t_sim = 0;
  std::vector<Index> t_prepaid;
  Index samples_per_record = 0;  // M, shared by every T_prepaid
  std::uint64_t build_seed = 0;
  HaltonOptions halton;

  friend bool operator==(const DatabaseHeader&, const DatabaseHeader&) = default;
};

struct GridRecord {
  ParameterVector theta;
  StatVector mu;
  std::vector<Eigen::MatrixXd> covariance;  // one per T_prepaid
  std::vector<Eigen::MatrixXd> samples;     // one R x M block per T_prepaid
  bool failed = false;
};

/// Column-per-record storage of the prepaid grid.
struct PrepaidDatabase {
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr std::uint8_t kFlagFailed = 1;

  DatabaseHeader header;
  Eigen::MatrixXd theta;                  // K x Omega, grid scale
  Eigen::MatrixXd mu;                     // R x Omega
  std::vector<Eigen::MatrixXd> cov;       // per T_prepaid: packed_size(R) x Omega
  std::vector<Eigen::MatrixXd> samples;   // per T_prepaid: R x (M * Omega), record p owns columns [pM, pM + M)
  std::vector<std::uint8_t> flags;        // Omega

  Index size() const noexcept { return theta.cols(); }
  Index dim() const noexcept { return theta.rows(); }
  Index stat_count() const noexcept { return mu.rows(); }
  Index samples_per_record() const noexcept { return header.samples_per_record; }
  bool failed(Index p) const { return (flags[static_cast<std::size_t>(p)] & kFlagFailed) != 0; }
  Index usable_count() const;

  Eigen::MatrixXd covariance(Index p, std::size_t t_index) const;
  auto sample_block(Index p, std::size_t t_index) const {
    return samples[t_index].middleCols(p * header.samples_per_record, header.samples_per_record);
  }
  GridRecord record(Index p) const;

  /// Index into header.t_prepaid; throws DomainError if absent.
  std::size_t t_index(Index t_prepaid) const;

  /// Checks that every block's shape agrees with the header.
  void validate() const;

  /// Header and payload equal bit for bit.
  friend bool operator==(const PrepaidDatabase& a, const PrepaidDatabase& b);
};

class Model;

struct BuildOptions {
  Index points = 1000;
  Index t_sim = 1000;
  std::vector<Index> t_prepaid{100};
  Index samples = 0;  // M
  std::uint64_t seed = 1;
  unsigned workers = 0;  // 0: hardware concurrency
  HaltonOptions halton;
};

/// Simulates every grid point once at length t_sim. mu comes from the whole
/// series; for each T_prepaid the covariance and the first M samples come from
/// the t_sim / T_prepaid disjoint segments. Output does not depend on `workers`.
PrepaidDatabase build_database(const Model& model, const BuildOptions& options);

/// Per-record statistics of one point, as stored by build_database.
/// Throws on simulation failure.
GridRecord simulate_record(const Model& model, const ParameterVector& theta, const BuildOptions& options,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// PPDB persistence

std::vector<std::uint8_t> serialize_database(const PrepaidDatabase& db);
PrepaidDatabase deserialize_database(const std::vector<std::uint8_t>& bytes);

/// Writes the binary file and a "<path>.json" sidecar with the header fields.
void save_database(const PrepaidDatabase& db, const std::filesystem::path& path);
PrepaidDatabase load_database(const std::filesystem::path& path);

std::string header_json(const PrepaidDatabase& db);

/// CRC-64/XZ.
std::uint64_t crc64(const std::uint8_t* data, std::size_t size);

}  // namespace prepaid
