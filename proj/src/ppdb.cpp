#include <bit>
#include <cstring>
#include <fstream>

#include <boost/crc.hpp>
#include <json.hpp>

#include "prepaid/grid.hpp"

namespace prepaid {

namespace {

constexpr char kMagic[4] = {'P', 'P', 'D', 'B'};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void bytes(const std::vector<std::uint8_t>& b) { out_.insert(out_.end(), b.begin(), b.end()); }

  std::size_t size() const { return out_.size(); }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n, const char* what) const {
    if (size_ - pos_ < n)
      throw FormatError(FormatError::Kind::truncated, std::string("PPDB truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

Index record_stride(Index K, Index R, std::size_t nt, Index M) {
  return K + R + static_cast<Index>(nt) * (packed_size(R) + M * R);
}

std::vector<std::uint8_t> encode_header(const DatabaseHeader& h, Index omega) {
  ByteWriter w;
  const Index K = h.space.dim();
  const Index R = h.schema.size();
  w.str(h.model_id);
  w.u32(static_cast<std::uint32_t>(K));
  w.u32(static_cast<std::uint32_t>(R));
  w.u64(static_cast<std::uint64_t>(omega));
  w.u64(static_cast<std::uint64_t>(h.t_sim));
  w.u32(static_cast<std::uint32_t>(h.t_prepaid.size()));
  for (Index t : h.t_prepaid) w.u64(static_cast<std::uint64_t>(t));
  w.u64(static_cast<std::uint64_t>(h.samples_per_record));
  w.u64(h.build_seed);
  w.u64(h.halton.burn);
  w.u64(h.halton.leap);
  for (Index k = 0; k < K; ++k) {
    w.str(h.space.names()[static_cast<std::size_t>(k)]);
    w.u8(static_cast<std::uint8_t>(h.space.transforms()[static_cast<std::size_t>(k)]));
    w.f64(h.space.user_lower()[k]);
    w.f64(h.space.user_upper()[k]);
  }
  for (Index j = 0; j < R; ++j) {
    w.str(h.schema.names[static_cast<std::size_t>(j)]);
    w.f64(h.schema.feasible_low[j]);
    w.f64(h.schema.feasible_high[j]);
  }
  return std::move(w.data());
}

[[noreturn]] void inconsistent(const std::string& what) {
  throw FormatError(FormatError::Kind::inconsistent, "PPDB inconsistent: " + what);
}

void check_crc(const std::uint8_t* data, std::size_t size, std::uint64_t stored, const char* section) {
  if (crc64(data, size) != stored)
    throw FormatError(FormatError::Kind::checksum_mismatch, std::string("PPDB checksum mismatch in ") + section);
}

}  // namespace

std::uint64_t crc64(const std::uint8_t* data, std::size_t size) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  crc.process_bytes(data, size);
  return crc.checksum();
}

std::vector<std::uint8_t> serialize_database(const PrepaidDatabase& db) {
  db.validate();
  const auto& h = db.header;
  const Index K = db.dim();
  const Index R = db.stat_count();
  const Index omega = db.size();
  const Index M = h.samples_per_record;
  const auto nt = h.t_prepaid.size();

  ByteWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(PrepaidDatabase::kFormatVersion);

  const auto header = encode_header(h, omega);
  w.u64(header.size());
  w.bytes(header);
  w.u64(crc64(header.data(), header.size()));

  w.u64(static_cast<std::uint64_t>(omega));
  w.bytes(db.flags);
  w.u64(crc64(db.flags.data(), db.flags.size()));

  const Index stride = record_stride(K, R, nt, M);
  w.u64(static_cast<std::uint64_t>(stride));
  const std::size_t start = w.size();
  for (Index p = 0; p < omega; ++p) {
    for (Index k = 0; k < K; ++k) w.f64(db.theta(k, p));
    for (Index j = 0; j < R; ++j) w.f64(db.mu(j, p));
    for (std::size_t t = 0; t < nt; ++t)
      for (Index i = 0; i < packed_size(R); ++i) w.f64(db.cov[t](i, p));
    for (std::size_t t = 0; t < nt && M > 0; ++t)
      for (Index m = 0; m < M; ++m)
        for (Index j = 0; j < R; ++j) w.f64(db.samples[t](j, p * M + m));
  }
  w.u64(crc64(w.data().data() + start, w.size() - start));
  return std::move(w.data());
}

PrepaidDatabase deserialize_database(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes.data(), bytes.size());
  if (bytes.size() < 4) throw FormatError(FormatError::Kind::truncated, "PPDB truncated before the magic");
  if (std::memcmp(in.take(4, "magic"), kMagic, 4) != 0)
    throw FormatError(FormatError::Kind::bad_magic, "not a PPDB file (bad magic)");
  const std::uint32_t version = in.u32("version");
  if (version != PrepaidDatabase::kFormatVersion)
    throw FormatError(FormatError::Kind::unsupported_version,
                      "unsupported PPDB version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(PrepaidDatabase::kFormatVersion) + ")");

  const std::uint64_t header_size = in.u64("header length");
  if (header_size > in.remaining()) throw FormatError(FormatError::Kind::truncated, "PPDB truncated in header");
  const std::uint8_t* header_bytes = in.take(header_size, "header");
  check_crc(header_bytes, header_size, in.u64("header checksum"), "header");

  PrepaidDatabase db;
  auto& h = db.header;
  ByteReader hr(header_bytes, header_size);
  Index omega = 0;
  try {
    h.model_id = hr.str("model id");
    const Index K = hr.u32("K");
    const Index R = hr.u32("R");
    omega = static_cast<Index>(hr.u64("record count"));
    h.t_sim = static_cast<Index>(hr.u64("T_sim"));
    const std::uint32_t nt = hr.u32("T_prepaid count");
    for (std::uint32_t t = 0; t < nt; ++t) h.t_prepaid.push_back(static_cast<Index>(hr.u64("T_prepaid")));
    h.samples_per_record = static_cast<Index>(hr.u64("M"));
    h.build_seed = hr.u64("build seed");
    h.halton.burn = hr.u64("halton burn");
    h.halton.leap = hr.u64("halton leap");
    if (K < 1 || K > 64 || R < 1 || R > 4096 || nt < 1) inconsistent("implausible dimensions");
    std::vector<std::string> names;
    std::vector<Transform> transforms;
    Eigen::VectorXd lo(K), hi(K);
    for (Index k = 0; k < K; ++k) {
      names.push_back(hr.str("parameter name"));
      const auto tr = hr.u8("transform");
      if (tr > 1) inconsistent("unknown transform tag");
      transforms.push_back(static_cast<Transform>(tr));
      lo[k] = hr.f64("lower bound");
      hi[k] = hr.f64("upper bound");
    }
    std::vector<std::string> stat_names;
    Eigen::VectorXd flo(R), fhi(R);
    for (Index j = 0; j < R; ++j) {
      stat_names.push_back(hr.str("statistic name"));
      flo[j] = hr.f64("feasible low");
      fhi[j] = hr.f64("feasible high");
    }
    if (hr.remaining() != 0) inconsistent("trailing bytes in header");
    h.space = ParameterSpace(std::move(names), lo, hi, std::move(transforms));
    h.schema = StatSchema(std::move(stat_names), flo, fhi);
  } catch (const DomainError& e) {
    inconsistent(e.what());
  }

  const Index K = h.space.dim();
  const Index R = h.schema.size();
  const Index M = h.samples_per_record;
  const auto nt = h.t_prepaid.size();

  const auto flag_count = static_cast<Index>(in.u64("flag count"));
  if (flag_count != omega) inconsistent("flag count differs from the header record count");
  const std::uint8_t* flags = in.take(static_cast<std::size_t>(omega), "flags");
  check_crc(flags, static_cast<std::size_t>(omega), in.u64("flag checksum"), "flags");

  const auto stride = static_cast<Index>(in.u64("record stride"));
  if (stride != record_stride(K, R, nt, M)) inconsistent("record stride differs from header dimensions");
  const std::size_t payload = static_cast<std::size_t>(stride) * static_cast<std::size_t>(omega) * 8;
  if (payload / 8 / static_cast<std::size_t>(std::max<Index>(stride, 1)) != static_cast<std::size_t>(omega) ||
      payload > in.remaining())
    throw FormatError(FormatError::Kind::truncated, "PPDB truncated in records");
  const std::uint8_t* records = in.take(payload, "records");
  check_crc(records, payload, in.u64("record checksum"), "records");
  if (in.remaining() != 0) inconsistent("trailing bytes after records");

  db.flags.assign(flags, flags + omega);
  db.theta.resize(K, omega);
  db.mu.resize(R, omega);
  db.cov.assign(nt, Eigen::MatrixXd(packed_size(R), omega));
  if (M > 0) db.samples.assign(nt, Eigen::MatrixXd(R, M * omega));
  ByteReader rr(records, payload);
  for (Index p = 0; p < omega; ++p) {
    for (Index k = 0; k < K; ++k) db.theta(k, p) = rr.f64("theta");
    for (Index j = 0; j < R; ++j) db.mu(j, p) = rr.f64("mu");
    for (std::size_t t = 0; t < nt; ++t)
      for (Index i = 0; i < packed_size(R); ++i) db.cov[t](i, p) = rr.f64("covariance");
    for (std::size_t t = 0; t < nt && M > 0; ++t)
      for (Index m = 0; m < M; ++m)
        for (Index j = 0; j < R; ++j) db.samples[t](j, p * M + m) = rr.f64("sample");
  }
  return db;
}

bool operator==(const PrepaidDatabase& a, const PrepaidDatabase& b) {
  return serialize_database(a) == serialize_database(b);
}

std::string header_json(const PrepaidDatabase& db) {
  const auto& h = db.header;
  nlohmann::ordered_json j;
  j["format"] = "PPDB";
  j["version"] = PrepaidDatabase::kFormatVersion;
  j["model_id"] = h.model_id;
  j["K"] = h.space.dim();
  j["R"] = h.schema.size();
  j["omega"] = db.size();
  j["usable"] = db.usable_count();
  j["t_sim"] = h.t_sim;
  j["t_prepaid"] = h.t_prepaid;
  j["samples_per_record"] = h.samples_per_record;
  j["build_seed"] = h.build_seed;
  j["halton"] = {{"burn", h.halton.burn}, {"leap", h.halton.leap}};
  auto& params = j["parameters"] = nlohmann::ordered_json::array();
  for (Index k = 0; k < h.space.dim(); ++k)
    params.push_back({{"name", h.space.names()[static_cast<std::size_t>(k)]},
                      {"transform", to_string(h.space.transforms()[static_cast<std::size_t>(k)])},
                      {"lower", h.space.user_lower()[k]},
                      {"upper", h.space.user_upper()[k]}});
  auto& stats = j["statistics"] = nlohmann::ordered_json::array();
  for (Index r = 0; r < h.schema.size(); ++r) {
    auto bound = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
    stats.push_back({{"name", h.schema.names[static_cast<std::size_t>(r)]},
                     {"feasible_low", bound(h.schema.feasible_low[r])},
                     {"feasible_high", bound(h.schema.feasible_high[r])}});
  }
  return j.dump(2);
}

void save_database(const PrepaidDatabase& db, const std::filesystem::path& path) {
  const auto bytes = serialize_database(db);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io, "write failed for '" + path.string() + "'");
  }
  std::ofstream side(path.string() + ".json", std::ios::trunc);
  if (!side) throw FormatError(FormatError::Kind::io, "cannot write sidecar for '" + path.string() + "'");
  side << header_json(db) << '\n';
}

PrepaidDatabase load_database(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_database(bytes);
}

}  // namespace prepaid
