#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "prepaid/estimators.hpp"

namespace prepaid {

using Json = nlohmann::ordered_json;

struct CatalogEntry {
  std::string model_id;
  std::string source;  // file the database came from, if any
  std::shared_ptr<const PrepaidDatabase> db;
  std::shared_ptr<const LikelihoodIndex> index;
  std::shared_ptr<const Model> model;  // null when the id has no registered simulator
};

/// Immutable set of databases keyed by model id.
class Catalog {
 public:
  /// Adds a database; the simulator comes from the registry unless given.
  /// Throws DomainError on a duplicate model id.
  void add(std::shared_ptr<const PrepaidDatabase> db, std::string source = {},
           std::shared_ptr<const Model> model = nullptr);
  void load(const std::filesystem::path& path);
  /// Loads every *.ppdb file of the directory, in name order.
  void load_directory(const std::filesystem::path& dir);

  const CatalogEntry* find(std::string_view model_id) const;
  const std::vector<CatalogEntry>& entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }

 private:
  std::vector<CatalogEntry> entries_;
};

struct EstimateRequest {
  std::string model;
  std::optional<std::string> method;          // default depends on the model
  std::optional<std::string> data;            // model text format
  std::optional<std::vector<double>> statistics;
  std::optional<double> t_obs;                // required with statistics
  std::optional<Json> prior;                  // grid-map only
  Index neighbors = 100;
  Index bootstrap = 0;                        // replicates for point methods; 0 disables
  double level = 0.95;
  std::uint64_t seed = 1;
  bool include_posterior = false;
};

struct FieldError {
  std::string field;
  std::string message;
};

/// Invalid request, reported per field.
class RequestError : public Error {
 public:
  explicit RequestError(std::vector<FieldError> fields);
  RequestError(std::string field, std::string message);
  const std::vector<FieldError>& fields() const noexcept { return fields_; }

 private:
  std::vector<FieldError> fields_;
};

/// The requested model has no database in the catalog.
class UnknownModel : public Error {
 public:
  using Error::Error;
};

/// Parses the JSON body; `data_base64` is accepted in place of `data`.
EstimateRequest parse_request(const nlohmann::json& body);
Json request_to_json(const EstimateRequest& request);

/// Method used when the request names none.
Method default_method(std::string_view model_id);

/// The single estimation path behind both the CLI and the HTTP service.
Json run_estimate(const Catalog& catalog, const EstimateRequest& request);

Json result_to_json(const EstimationResult& result, const ParameterSpace& space, double t_obs,
                    bool include_posterior = false);
Json models_json(const Catalog& catalog);
Json error_json(const RequestError& e);

/// Prior from {"kind": "uniform"} or {"kind": "scaled-beta", "shapes": [[a, b], ...]}.
Prior prior_from_json(const nlohmann::json& j, const ParameterSpace& space);

std::string base64_decode(const std::string& text);

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;               // 0 picks a free port
  unsigned threads = 4;          // worker pool size
  std::size_t max_queued = 64;   // pending requests beyond which connections are refused
  int timeout_seconds = 60;      // socket read/write timeout
};

/// HTTP front end: GET /v1/health, GET /v1/models, POST /v1/estimate.
class Server {
 public:
  Server(std::shared_ptr<const Catalog> catalog, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();
  int port() const noexcept { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::shared_ptr<const Catalog> catalog_;
  ServerOptions options_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace prepaid
