#include "prepaid/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <mutex>
#include <set>
#include <sstream>

#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <httplib.h>

#include "prepaid/models.hpp"
#include "prepaid/parallel.hpp"

namespace prepaid {

namespace {

Json finite_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

std::string next_diagnostic_id() {
  static std::atomic<std::uint64_t> counter{0};
  const auto now = static_cast<std::uint64_t>(std::chrono::system_clock::now().time_since_epoch().count());
  std::ostringstream out;
  out << std::hex << splitmix64(now ^ counter.fetch_add(1));
  return out.str();
}

bool point_method(Method m) {
  return m == Method::grid_ml || m == Method::svm_ml || m == Method::lin_ml || m == Method::grid_map;
}

const std::set<std::string> kRequestFields{"model",     "method", "data",  "data_base64", "statistics",
                                           "t_obs",     "prior",  "neighbors", "bootstrap", "level",
                                           "seed",      "include_posterior"};

}  // namespace

// ---------------------------------------------------------------------------

void Catalog::add(std::shared_ptr<const PrepaidDatabase> db, std::string source, std::shared_ptr<const Model> model) {
  if (!db) throw DomainError("catalog: null database");
  const std::string& id = db->header.model_id;
  if (find(id)) throw DomainError("catalog: a database for model '" + id + "' is already loaded");
  if (!model) {
    try {
      model = make_model(id);
    } catch (const DomainError&) {
      // Statistics-only requests still work without a simulator.
    }
  }
  if (model && !(model->space() == db->header.space && model->schema() == db->header.schema))
    throw DomainError("catalog: database for '" + id + "' does not match the registered model's space or schema");
  CatalogEntry entry;
  entry.model_id = id;
  entry.source = std::move(source);
  entry.index = std::make_shared<const LikelihoodIndex>(*db, default_workers());
  entry.db = std::move(db);
  entry.model = std::move(model);
  entries_.push_back(std::move(entry));
}

void Catalog::load(const std::filesystem::path& path) {
  add(std::make_shared<const PrepaidDatabase>(load_database(path)), path.string());
}

void Catalog::load_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DomainError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppdb") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) load(f);
}

const CatalogEntry* Catalog::find(std::string_view model_id) const {
  for (const auto& e : entries_)
    if (e.model_id == model_id) return &e;
  return nullptr;
}

// ---------------------------------------------------------------------------

RequestError::RequestError(std::vector<FieldError> fields)
    : Error([&] {
        std::string msg = "invalid request";
        for (const auto& f : fields) msg += "; " + f.field + ": " + f.message;
        return msg;
      }()),
      fields_(std::move(fields)) {}

RequestError::RequestError(std::string field, std::string message)
    : RequestError(std::vector<FieldError>{{std::move(field), std::move(message)}}) {}

std::string base64_decode(const std::string& text) {
  using namespace boost::archive::iterators;
  using Decoder = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
  std::string clean;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  if (clean.size() % 4 != 0) throw DomainError("base64 text length must be a multiple of 4");
  std::size_t padding = 0;
  while (!clean.empty() && clean.back() == '=') {
    clean.pop_back();
    ++padding;
  }
  if (padding > 2) throw DomainError("malformed base64 padding");
  for (char c : clean)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '+' && c != '/')
      throw DomainError("invalid base64 character");
  clean.append(padding, 'A');
  std::string out(Decoder(clean.begin()), Decoder(clean.end()));
  out.resize(out.size() - padding);
  return out;
}

EstimateRequest parse_request(const nlohmann::json& body) {
  std::vector<FieldError> errors;
  EstimateRequest r;
  if (!body.is_object()) throw RequestError("body", "must be a JSON object");
  for (const auto& [key, value] : body.items())
    if (!kRequestFields.count(key)) errors.push_back({key, "unknown field"});

  auto integer = [&](const char* key, Index min_value, Index& out) {
    if (!body.contains(key)) return;
    const auto& v = body.at(key);
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
      errors.push_back({key, "must be an integer"});
    } else if (v.get<long long>() < min_value) {
      errors.push_back({key, "must be >= " + std::to_string(min_value)});
    } else {
      out = static_cast<Index>(v.get<long long>());
    }
  };

  if (!body.contains("model")) errors.push_back({"model", "is required"});
  else if (!body.at("model").is_string()) errors.push_back({"model", "must be a string"});
  else r.model = body.at("model").get<std::string>();

  if (body.contains("method")) {
    if (!body.at("method").is_string()) {
      errors.push_back({"method", "must be a string"});
    } else {
      r.method = body.at("method").get<std::string>();
      try {
        parse_method(*r.method);
      } catch (const UnsupportedMethod& e) {
        errors.push_back({"method", e.what()});
      }
    }
  }

  const bool has_data = body.contains("data"), has_b64 = body.contains("data_base64");
  if (has_data && has_b64) errors.push_back({"data_base64", "give data or data_base64, not both"});
  if (has_data) {
    if (!body.at("data").is_string()) errors.push_back({"data", "must be a string"});
    else r.data = body.at("data").get<std::string>();
  }
  if (has_b64) {
    if (!body.at("data_base64").is_string()) {
      errors.push_back({"data_base64", "must be a string"});
    } else {
      try {
        r.data = base64_decode(body.at("data_base64").get<std::string>());
      } catch (const DomainError& e) {
        errors.push_back({"data_base64", e.what()});
      }
    }
  }
  if (body.contains("statistics")) {
    const auto& s = body.at("statistics");
    if (!s.is_array() || s.empty()) {
      errors.push_back({"statistics", "must be a nonempty array of numbers"});
    } else {
      std::vector<double> v;
      for (const auto& x : s) {
        if (!x.is_number()) {
          errors.push_back({"statistics", "must contain only numbers"});
          break;
        }
        v.push_back(x.get<double>());
      }
      if (v.size() == s.size()) r.statistics = std::move(v);
    }
  }
  const bool any_data = has_data || has_b64;
  if (any_data == body.contains("statistics"))
    errors.push_back({"statistics", "exactly one of data and statistics is required"});
  if (body.contains("t_obs")) {
    const auto& t = body.at("t_obs");
    if (!t.is_number()) errors.push_back({"t_obs", "must be a number"});
    else if (!(t.get<double>() >= 1.0)) errors.push_back({"t_obs", "must be >= 1"});
    else r.t_obs = t.get<double>();
    if (any_data) errors.push_back({"t_obs", "is taken from the data length; omit it with data"});
  } else if (body.contains("statistics")) {
    errors.push_back({"t_obs", "is required with statistics"});
  }
  if (body.contains("prior")) {
    if (!body.at("prior").is_object()) errors.push_back({"prior", "must be an object"});
    else r.prior = Json::parse(body.at("prior").dump());
  }
  integer("neighbors", 1, r.neighbors);
  integer("bootstrap", 0, r.bootstrap);
  if (body.contains("level")) {
    const auto& l = body.at("level");
    if (!l.is_number() || !(l.get<double>() > 0.0 && l.get<double>() < 1.0))
      errors.push_back({"level", "must be a number in (0, 1)"});
    else r.level = l.get<double>();
  }
  if (body.contains("seed")) {
    const auto& s = body.at("seed");
    if (s.is_number_unsigned()) r.seed = s.get<std::uint64_t>();
    else if (s.is_number_integer() && s.get<long long>() >= 0) r.seed = static_cast<std::uint64_t>(s.get<long long>());
    else errors.push_back({"seed", "must be a nonnegative integer"});
  }
  if (body.contains("include_posterior")) {
    if (!body.at("include_posterior").is_boolean()) errors.push_back({"include_posterior", "must be a boolean"});
    else r.include_posterior = body.at("include_posterior").get<bool>();
  }
  if (!errors.empty()) throw RequestError(std::move(errors));
  return r;
}

Json request_to_json(const EstimateRequest& r) {
  Json j;
  j["model"] = r.model;
  if (r.method) j["method"] = *r.method;
  if (r.data) j["data"] = *r.data;
  if (r.statistics) j["statistics"] = *r.statistics;
  if (r.t_obs) j["t_obs"] = *r.t_obs;
  if (r.prior) j["prior"] = *r.prior;
  j["neighbors"] = r.neighbors;
  j["bootstrap"] = r.bootstrap;
  j["level"] = r.level;
  j["seed"] = r.seed;
  if (r.include_posterior) j["include_posterior"] = true;
  return j;
}

Method default_method(std::string_view model_id) {
  if (model_id.rfind("ricker", 0) == 0) return Method::svm_ml;
  if (model_id == "trait") return Method::abc_grid_pm;
  return Method::grid_ml;
}

Prior prior_from_json(const nlohmann::json& j, const ParameterSpace& space) {
  const std::string kind = j.value("kind", std::string());
  if (kind == "uniform") return Prior::uniform(space);
  if (kind == "scaled-beta") {
    if (!j.contains("shapes") || !j.at("shapes").is_array()) throw DomainError("scaled-beta prior needs shapes");
    std::vector<BetaShape> shapes;
    for (const auto& s : j.at("shapes")) {
      if (!s.is_array() || s.size() != 2 || !s[0].is_number() || !s[1].is_number())
        throw DomainError("each shape must be [alpha, beta]");
      shapes.push_back({s[0].get<double>(), s[1].get<double>()});
    }
    return Prior::scaled_beta(space, std::move(shapes));
  }
  throw DomainError("prior kind must be 'uniform' or 'scaled-beta'");
}

Json result_to_json(const EstimationResult& r, const ParameterSpace& space, double t_obs, bool include_posterior) {
  Json j;
  j["method"] = method_tag(r.method);
  Json theta = Json::object();
  for (std::size_t d = 0; d < space.names().size(); ++d) theta[space.names()[d]] = r.theta[static_cast<Index>(d)];
  j["theta"] = std::move(theta);
  j["theta_grid"] = std::vector<double>(r.theta_grid.data(), r.theta_grid.data() + r.theta_grid.size());
  if (r.ci) {
    Json ci;
    ci["level"] = r.ci->level;
    ci["kind"] = r.ci->kind;
    Json iv = Json::object();
    for (std::size_t d = 0; d < r.ci->intervals.size(); ++d)
      iv[space.names()[d]] = {finite_or_null(r.ci->intervals[d].low), finite_or_null(r.ci->intervals[d].high)};
    ci["intervals"] = std::move(iv);
    ci["contains_estimate"] = r.ci->contains_estimate;
    ci["replicates"] = r.ci->replicates;
    ci["failures"] = r.ci->failures;
    ci["svm_mode"] = r.ci->svm_mode;
    j["ci"] = std::move(ci);
  }
  if (r.posterior) {
    Json post;
    post["size"] = r.posterior->theta.cols();
    if (include_posterior) {
      Json samples = Json::array();
      for (Index i = 0; i < r.posterior->theta.cols(); ++i) {
        const Eigen::VectorXd u = space.to_user(r.posterior->theta.col(i));
        samples.push_back({{"theta", std::vector<double>(u.data(), u.data() + u.size())},
                           {"weight", r.posterior->weights[i]},
                           {"epsilon", r.posterior->epsilon[i]}});
      }
      post["samples"] = std::move(samples);
    }
    j["posterior"] = std::move(post);
  }
  Json diag;
  diag["objective"] = finite_or_null(r.diagnostics.objective);
  diag["neighbors"] = r.diagnostics.neighbors;
  Json scores = Json::array();
  for (double s : r.diagnostics.neighbor_scores) scores.push_back(finite_or_null(s));
  diag["neighbor_scores"] = std::move(scores);
  diag["t_prepaid"] = r.diagnostics.t_prepaid;
  diag["t_obs"] = t_obs;
  diag["flags"] = r.diagnostics.flags;
  diag["subset_size"] = r.diagnostics.subset_size;
  diag["iterations"] = r.diagnostics.iterations;
  diag["wall_seconds"] = r.diagnostics.wall_seconds;
  j["diagnostics"] = std::move(diag);
  return j;
}

Json run_estimate(const Catalog& catalog, const EstimateRequest& request) {
  const CatalogEntry* entry = catalog.find(request.model);
  if (!entry) {
    std::string loaded;
    for (const auto& e : catalog.entries()) loaded += (loaded.empty() ? "" : ", ") + e.model_id;
    throw UnknownModel("no database for model '" + request.model + "' (loaded: " + loaded + ")");
  }
  const auto& db = *entry->db;
  const auto& index = *entry->index;
  const auto& space = db.header.space;
  const Method method = request.method ? parse_method(*request.method) : default_method(entry->model_id);
  if (method == Method::multi_condition)
    throw RequestError("method", "multicond needs several conditions; it is available from the library only");

  StatVector s;
  double t_obs = 0.0;
  if (request.statistics) {
    if (static_cast<Index>(request.statistics->size()) != db.stat_count())
      throw RequestError("statistics", "expected " + std::to_string(db.stat_count()) + " values (" +
                                             std::to_string(request.statistics->size()) + " given)");
    s = Eigen::Map<const Eigen::VectorXd>(request.statistics->data(), db.stat_count());
    if (!s.allFinite()) throw RequestError("statistics", "values must be finite");
    t_obs = *request.t_obs;
  } else if (request.data) {
    if (!entry->model) throw RequestError("data", "model has no registered parser; send statistics instead");
    Dataset data;
    try {
      std::istringstream in(*request.data);
      data = entry->model->parse_dataset(in);
    } catch (const DomainError& e) {
      throw RequestError("data", e.what());
    }
    if (data.size() < entry->model->min_length())
      throw RequestError("data", "needs at least " + std::to_string(entry->model->min_length()) + " observations");
    try {
      s = entry->model->summarize(data);
    } catch (const DomainError& e) {
      throw RequestError("data", e.what());
    }
    t_obs = static_cast<double>(data.size());
  } else {
    throw RequestError("statistics", "exactly one of data and statistics is required");
  }
  if (request.neighbors > db.size())
    throw RequestError("neighbors", "exceeds the database size " + std::to_string(db.size()));
  if (request.bootstrap > 0 && point_method(method) && !entry->model)
    throw RequestError("bootstrap", "model has no registered simulator");
  if (request.bootstrap == 1) throw RequestError("bootstrap", "must be 0 or >= 2");
  if (request.prior && method != Method::grid_map) throw RequestError("prior", "only used by grid-map");

  EstimationResult result;
  GridOptions grid;
  grid.report_neighbors = request.neighbors;
  switch (method) {
    case Method::grid_ml:
      result = estimate_grid_ml(index, s, t_obs, grid);
      break;
    case Method::svm_ml:
    case Method::lin_ml: {
      SurrogateOptions so;
      so.neighbors = request.neighbors;
      so.seed = request.seed;
      result = method == Method::svm_ml ? estimate_svm_ml(index, s, t_obs, so) : estimate_lin_ml(index, s, t_obs, so);
      break;
    }
    case Method::grid_map: {
      Prior prior = Prior::uniform(space);
      if (request.prior) {
        try {
          prior = prior_from_json(*request.prior, space);
        } catch (const DomainError& e) {
          throw RequestError("prior", e.what());
        }
      }
      result = estimate_grid_map(index, s, t_obs, prior, grid);
      break;
    }
    case Method::sl_grid_pm:
      result = posterior_mean_sl(index, s, t_obs, request.level);
      break;
    case Method::abc_grid_pm:
    case Method::abc_svm_pm: {
      if (db.samples_per_record() == 0)
        throw RequestError("method", std::string(method_name(method)) + " needs a database with replicate samples");
      AbcOptions ao;
      ao.level = request.level;
      ao.seed = request.seed;
      result = method == Method::abc_grid_pm ? abc_grid_pm(index, s, t_obs, ao) : abc_svm_pm(index, s, t_obs, ao);
      break;
    }
    case Method::multi_condition:
      break;
  }
  if (request.bootstrap > 0 && point_method(method)) {
    BootstrapOptions bo;
    bo.replicates = request.bootstrap;
    bo.level = request.level;
    bo.seed = request.seed;
    bo.surrogate.seed = request.seed;
    bo.surrogate.neighbors = request.neighbors;
    result.ci = bootstrap_ci(index, *entry->model, s, result.theta_grid, t_obs, bo).ci;
  }
  Json out;
  out["model"] = entry->model_id;
  out["statistics"] = std::vector<double>(s.data(), s.data() + s.size());
  out.update(result_to_json(result, space, t_obs, request.include_posterior));
  return out;
}

Json models_json(const Catalog& catalog) {
  Json list = Json::array();
  for (const auto& e : catalog.entries()) {
    const auto& h = e.db->header;
    Json m;
    m["id"] = e.model_id;
    Json params = Json::array();
    for (Index d = 0; d < h.space.dim(); ++d)
      params.push_back({{"name", h.space.names()[d]},
                        {"transform", to_string(h.space.transforms()[d])},
                        {"lower", h.space.user_lower()[d]},
                        {"upper", h.space.user_upper()[d]}});
    m["parameters"] = std::move(params);
    Json stats = Json::array();
    for (std::size_t r = 0; r < h.schema.names.size(); ++r)
      stats.push_back({{"name", h.schema.names[r]},
                       {"low", finite_or_null(h.schema.feasible_low[static_cast<Index>(r)])},
                       {"high", finite_or_null(h.schema.feasible_high[static_cast<Index>(r)])}});
    m["statistics"] = std::move(stats);
    m["omega"] = e.db->size();
    m["usable"] = e.db->usable_count();
    m["t_sim"] = h.t_sim;
    m["t_prepaid"] = h.t_prepaid;
    m["samples_per_record"] = h.samples_per_record;
    m["default_method"] = method_name(default_method(e.model_id));
    m["can_simulate"] = e.model != nullptr;
    list.push_back(std::move(m));
  }
  Json out;
  out["models"] = std::move(list);
  return out;
}

Json error_json(const RequestError& e) {
  Json j;
  j["error"] = "invalid request";
  Json fields = Json::array();
  for (const auto& f : e.fields()) fields.push_back({{"field", f.field}, {"message", f.message}});
  j["fields"] = std::move(fields);
  return j;
}

// ---------------------------------------------------------------------------

struct Server::Impl {
  httplib::Server http;
};

Server::Server(std::shared_ptr<const Catalog> catalog, ServerOptions options)
    : impl_(std::make_unique<Impl>()), catalog_(std::move(catalog)), options_(std::move(options)) {
  if (!catalog_ || catalog_->empty()) throw DomainError("server needs at least one loaded database");
  auto& http = impl_->http;
  const unsigned threads = std::max(1u, options_.threads);
  const std::size_t queued = options_.max_queued;
  http.new_task_queue = [threads, queued] { return new httplib::ThreadPool(threads, queued); };
  http.set_read_timeout(options_.timeout_seconds, 0);
  http.set_write_timeout(options_.timeout_seconds, 0);
  http.set_payload_max_length(64u << 20);

  auto send = [](httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  auto catalog_ptr = catalog_;
  http.Get("/v1/health", [send, catalog_ptr](const httplib::Request&, httplib::Response& res) {
    send(res, 200, Json{{"status", "ok"}, {"models", catalog_ptr->entries().size()}});
  });
  http.Get("/v1/models", [send, catalog_ptr](const httplib::Request&, httplib::Response& res) {
    send(res, 200, models_json(*catalog_ptr));
  });
  http.Post("/v1/estimate", [send, catalog_ptr](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error& e) {
      send(res, 400, error_json(RequestError("body", std::string("malformed JSON: ") + e.what())));
      return;
    }
    try {
      send(res, 200, run_estimate(*catalog_ptr, parse_request(body)));
    } catch (const RequestError& e) {
      send(res, 400, error_json(e));
    } catch (const UnknownModel& e) {
      send(res, 404, Json{{"error", "unknown model"}, {"message", e.what()}});
    } catch (const UnsupportedMethod& e) {
      send(res, 400, error_json(RequestError("method", e.what())));
    } catch (const std::exception& e) {
      send(res, 500, Json{{"error", "estimation failed"}, {"message", e.what()}, {"diagnostic_id", next_diagnostic_id()}});
    }
  });
}

Server::~Server() { stop(); }

int Server::start() {
  auto& http = impl_->http;
  if (options_.port == 0) {
    port_ = http.bind_to_any_port(options_.host);
  } else {
    if (!http.bind_to_port(options_.host, options_.port)) port_ = -1;
    else port_ = options_.port;
  }
  if (port_ <= 0) throw Error("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  thread_ = std::thread([this] { impl_->http.listen_after_bind(); });
  http.wait_until_ready();
  return port_;
}

void Server::run() {
  auto& http = impl_->http;
  port_ = options_.port;
  if (!http.listen(options_.host, options_.port))
    throw Error("cannot listen on " + options_.host + ":" + std::to_string(options_.port));
}

void Server::stop() {
  if (impl_) impl_->http.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace prepaid
