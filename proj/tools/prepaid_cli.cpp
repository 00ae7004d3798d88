#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "prepaid/grid.hpp"
#include "prepaid/models.hpp"
#include "prepaid/parallel.hpp"
#include "prepaid/recovery.hpp"
#include "prepaid/service.hpp"
#include "prepaid/theory.hpp"

using namespace prepaid;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

void require_known_model(const std::string& id) {
  const auto ids = model_ids();
  if (std::find(ids.begin(), ids.end(), id) == ids.end())
    throw UsageError("unknown model '" + id + "'; valid models: " + join(ids));
}

Method require_method(const std::string& name) {
  try {
    return parse_method(name);
  } catch (const UnsupportedMethod&) {
    throw UsageError("unknown method '" + name + "'; valid methods: " + join(method_names()));
  }
}

std::string read_text(const std::string& path) {
  if (path == "-") {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    return ss.str();
  }
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::shared_ptr<Catalog> open_catalog(const std::vector<std::string>& paths) {
  auto catalog = std::make_shared<Catalog>();
  if (!paths.empty()) {
    for (const auto& p : paths) catalog->load(p);
  } else if (const char* dir = std::getenv("PREPAID_DB_DIR"); dir && *dir) {
    catalog->load_directory(dir);
  }
  if (catalog->empty()) throw UsageError("no database: pass --db or set PREPAID_DB_DIR");
  return catalog;
}

void write_file(const std::string& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::io, "cannot open '" + path + "' for writing");
  body(out);
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

// ---------------------------------------------------------------------------

struct BuildArgs {
  std::string model, out;
  Index points = 1000, t_sim = 1000, samples = 0;
  std::vector<Index> t_prepaid{100};
  std::uint64_t seed = 1, burn = 20, leap = 1;
  unsigned workers = 0;
};

int cmd_build(const BuildArgs& a, bool json) {
  require_known_model(a.model);
  const auto model = make_model(a.model);
  BuildOptions o;
  o.points = a.points;
  o.t_sim = a.t_sim;
  o.t_prepaid = a.t_prepaid;
  o.samples = a.samples;
  o.seed = a.seed;
  o.workers = a.workers;
  o.halton = {a.burn, a.leap};
  const auto start = std::chrono::steady_clock::now();
  const auto db = build_database(*model, o);
  save_database(db, a.out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (json) {
    Json j = Json::parse(header_json(db));
    j["path"] = a.out;
    j["seconds"] = secs;
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << "wrote " << a.out << ": " << db.size() << " records (" << db.usable_count() << " usable) in "
              << std::fixed << std::setprecision(1) << secs << " s\n";
  }
  return 0;
}

struct EstimateArgs {
  std::vector<std::string> db;
  std::string model, method, data, prior;
  std::vector<double> stats;
  double t_obs = 0.0;
  Index neighbors = 100, bootstrap = 0;
  double level = 0.95;
  std::uint64_t seed = 1;
  bool posterior = false;
};

int cmd_estimate(const EstimateArgs& a, bool json) {
  if (a.data.empty() == a.stats.empty()) throw UsageError("give exactly one of --data and --stats");
  if (!a.stats.empty() && !(a.t_obs >= 1.0)) throw UsageError("--stats requires --tobs >= 1");
  if (!a.data.empty() && a.t_obs != 0.0) throw UsageError("--tobs applies to --stats only");
  if (!a.method.empty()) require_method(a.method);
  const auto catalog = open_catalog(a.db);

  EstimateRequest r;
  if (!a.model.empty()) {
    r.model = a.model;
  } else if (catalog->entries().size() == 1) {
    r.model = catalog->entries().front().model_id;
  } else {
    std::vector<std::string> ids;
    for (const auto& e : catalog->entries()) ids.push_back(e.model_id);
    throw UsageError("several databases loaded; choose --model from: " + join(ids));
  }
  if (!catalog->find(r.model)) {
    std::vector<std::string> ids;
    for (const auto& e : catalog->entries()) ids.push_back(e.model_id);
    throw UsageError("unknown model '" + r.model + "'; loaded models: " + join(ids));
  }
  if (!a.method.empty()) r.method = a.method;
  if (!a.data.empty()) r.data = read_text(a.data);
  if (!a.stats.empty()) {
    r.statistics = a.stats;
    r.t_obs = a.t_obs;
  }
  if (!a.prior.empty()) r.prior = Json::parse(a.prior);
  r.neighbors = a.neighbors;
  r.bootstrap = a.bootstrap;
  r.level = a.level;
  r.seed = a.seed;
  r.include_posterior = a.posterior;

  const Json out = run_estimate(*catalog, r);
  if (json) {
    std::cout << out.dump(2) << '\n';
    return 0;
  }
  std::cout << out["model"].get<std::string>() << " / " << out["method"].get<std::string>() << '\n';
  std::cout << std::setprecision(6);
  for (const auto& [name, value] : out["theta"].items()) {
    std::cout << "  " << std::left << std::setw(12) << name << value.get<double>();
    if (out.contains("ci")) {
      const auto& iv = out["ci"]["intervals"][name];
      std::cout << "  [" << iv[0].get<double>() << ", " << iv[1].get<double>() << "]";
    }
    std::cout << '\n';
  }
  const auto& d = out["diagnostics"];
  std::cout << "  objective " << d["objective"] << ", T_prepaid " << d["t_prepaid"] << ", "
            << d["wall_seconds"].get<double>() << " s\n";
  if (!d["flags"].empty()) std::cout << "  flags: " << d["flags"].dump() << '\n';
  return 0;
}

struct RecoverArgs {
  std::string db, methods = "grid-ml", map_prior, csv, report;
  Index count = 50, bootstrap = 0;
  std::vector<double> t_obs{1000.0};
  double trim = 0.01, level = 0.95;
  std::uint64_t seed = 1;
  unsigned workers = 0;
};

int cmd_recover(const RecoverArgs& a, bool json) {
  const auto catalog = open_catalog(a.db.empty() ? std::vector<std::string>{} : std::vector<std::string>{a.db});
  if (catalog->entries().size() != 1) throw UsageError("recover needs exactly one database");
  const auto& entry = catalog->entries().front();
  if (!entry.model) throw UsageError("no simulator registered for model '" + entry.model_id + "'");

  RecoveryOptions o;
  o.methods.clear();
  std::stringstream ss(a.methods);
  for (std::string m; std::getline(ss, m, ',');)
    if (!m.empty()) o.methods.push_back(require_method(m));
  if (o.methods.empty()) throw UsageError("--methods is empty");
  const auto& space = entry.db->header.space;
  if (!a.map_prior.empty()) o.map_prior = prior_from_json(nlohmann::json::parse(a.map_prior), space);
  for (Method m : o.methods) {
    if (m == Method::multi_condition) throw UsageError("multicond is not available in recover");
    if (m == Method::grid_map && !o.map_prior) o.map_prior = Prior::uniform(space);
  }
  o.surrogate.seed = a.seed;
  o.abc.seed = a.seed;
  o.bootstrap = a.bootstrap > 0;
  o.boot.replicates = a.bootstrap;
  o.boot.level = a.level;
  o.boot.seed = a.seed;
  o.abc.level = a.level;
  o.workers = a.workers == 0 ? default_workers() : a.workers;

  TestSpec spec;
  spec.count = a.count;
  spec.t_obs = a.t_obs;
  spec.trim = a.trim;
  const auto report = recovery_study(*entry.index, *entry.model, spec, o, a.seed);
  if (!a.csv.empty()) write_file(a.csv, [&](std::ostream& out) { write_recovery_csv(report, out); });
  const auto j = recovery_json(report);
  if (!a.report.empty()) write_file(a.report, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
  if (json) {
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::cout << std::setprecision(4);
  for (const auto& s : report.summaries) {
    std::cout << method_tag(s.method) << " T_obs=" << s.t_obs << " items=" << s.items << " failed=" << s.failures
              << '\n';
    for (Index k = 0; k < space.dim(); ++k) {
      std::cout << "  " << std::left << std::setw(12) << space.names()[static_cast<std::size_t>(k)] << " rmse "
                << s.rmse[k] << "  mae " << s.mae[k];
      if (!std::isnan(s.coverage[k])) std::cout << "  coverage " << s.coverage[k];
      std::cout << '\n';
    }
  }
  return 0;
}

struct ToyArgs {
  int situation = 1;
  std::vector<double> deltas;
  std::vector<Index> ns;
  Index replications = 1000;
  std::uint64_t seed = 1;
  double mu = std::numeric_limits<double>::quiet_NaN(), s = 1.0, t_obs = 100.0, t_sim = 1000.0;
  unsigned workers = 0;
  std::string csv, matrix;
};

int cmd_toy(const ToyArgs& a, bool json) {
  ToyStudyOptions o;
  o.situation = a.situation;
  o.deltas = a.deltas.empty() ? default_toy_deltas() : a.deltas;
  o.ns = a.ns.empty() ? default_toy_ns() : a.ns;
  o.replications = a.replications;
  o.seed = a.seed;
  o.mu = std::isnan(a.mu) ? (a.situation == 2 ? 1.0 : 0.0) : a.mu;
  o.s = a.s;
  o.t_obs = a.t_obs;
  o.t_sim = a.t_sim;
  o.workers = a.workers == 0 ? default_workers() : a.workers;
  const auto study = toy_rmse_study(o);
  if (!a.csv.empty()) write_file(a.csv, [&](std::ostream& out) { write_toy_csv(study, out); });
  if (!a.matrix.empty()) write_file(a.matrix, [&](std::ostream& out) { write_toy_matrix(study, out); });

  auto predicted = [&](const ToyCell& c) {
    if (a.situation != 1) return std::numeric_limits<double>::quiet_NaN();
    ToyConfig cfg;
    cfg.mu = o.mu;
    cfg.s = o.s;
    cfg.t_obs = o.t_obs;
    cfg.t_sim = o.t_sim;
    cfg.delta = c.delta;
    cfg.n = c.n;
    return toy_estimator_moments(cfg).mse(o.mu);
  };
  if (json) {
    Json j;
    j["situation"] = study.situation;
    j["mu"] = o.mu;
    j["replications"] = o.replications;
    auto& cells = j["cells"] = Json::array();
    for (const auto& c : study.cells) {
      Json cell{{"delta", c.delta}, {"n", c.n},          {"replications", c.replications},
                {"excluded", c.excluded}, {"bias", c.bias}, {"bias_se", c.bias_se},
                {"mse", c.mse},          {"mse_se", c.mse_se}, {"rmse", c.rmse}};
      const double p = predicted(c);
      if (!std::isnan(p)) cell["predicted_mse"] = p;
      cells.push_back(std::move(cell));
    }
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  write_toy_csv(study, std::cout);
  return 0;
}

struct ServeArgs {
  std::vector<std::string> db;
  std::string host = "127.0.0.1";
  int port = 8080, timeout = 60;
  unsigned threads = 4;
  std::size_t max_queued = 64;
};

int cmd_serve(const ServeArgs& a) {
  const auto catalog = open_catalog(a.db);
  ServerOptions o;
  o.host = a.host;
  o.port = a.port;
  o.threads = a.threads;
  o.timeout_seconds = a.timeout;
  o.max_queued = a.max_queued;
  Server server(catalog, o);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const int port = server.start();
  std::cout << "listening on http://" << a.host << ':' << port << std::endl;
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return 0;
}

int cmd_inspect(const std::string& path, bool json) {
  const auto db = load_database(path);
  db.validate();
  if (json) {
    std::cout << header_json(db) << '\n';
    return 0;
  }
  const auto& h = db.header;
  std::cout << path << ": model " << h.model_id << ", " << db.size() << " records (" << db.usable_count()
            << " usable), K=" << db.dim() << ", R=" << db.stat_count() << ", T_sim=" << h.t_sim << ", M="
            << h.samples_per_record << ", T_prepaid";
  for (Index t : h.t_prepaid) std::cout << ' ' << t;
  std::cout << '\n';
  for (Index k = 0; k < h.space.dim(); ++k)
    std::cout << "  " << h.space.names()[static_cast<std::size_t>(k)] << " [" << h.space.user_lower()[k] << ", "
              << h.space.user_upper()[k] << "]\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prepaid-grid parameter estimation for simulation models"};
  app.require_subcommand(1);
  app.fallthrough();
  bool json = false;
  app.add_flag("--json", json, "Machine-readable JSON on stdout");

  BuildArgs build;
  auto* b = app.add_subcommand("build-grid", "Simulate a Halton grid and write a PPDB file");
  b->add_option("--model", build.model, "Model id (" + join(model_ids()) + ")")->required();
  b->add_option("--points", build.points, "Grid size")->capture_default_str();
  b->add_option("--tsim", build.t_sim, "Simulated length per grid point")->capture_default_str();
  b->add_option("--tprepaid", build.t_prepaid, "Segment lengths for covariances and samples")
      ->delimiter(',')
      ->capture_default_str();
  b->add_option("--samples", build.samples, "Statistic samples stored per record and T_prepaid");
  b->add_option("--seed", build.seed, "Build seed")->capture_default_str();
  b->add_option("--burn", build.burn, "Halton points skipped")->capture_default_str();
  b->add_option("--leap", build.leap, "Halton stride")->capture_default_str();
  b->add_option("--workers", build.workers, "Threads (0 = all cores)");
  b->add_option("--out", build.out, "Output .ppdb path")->required();

  EstimateArgs est;
  auto* e = app.add_subcommand(
      "estimate",
      "Estimate parameters of one dataset.\n"
      "Dataset text: one observation per line; ricker: an integer count; trait: the\n"
      "whitespace-separated species abundances of one frame; toy: a real number.");
  e->add_option("--db", est.db, "PPDB file (repeatable; default: every *.ppdb in $PREPAID_DB_DIR)");
  e->add_option("--model", est.model, "Model id; needed when several databases are loaded");
  e->add_option("--method", est.method, "One of: " + join(method_names()));
  auto* data = e->add_option("--data", est.data, "Dataset file ('-' for stdin)");
  auto* stats = e->add_option("--stats", est.stats, "Precomputed statistics, comma separated")->delimiter(',');
  data->excludes(stats);
  stats->excludes(data);
  e->add_option("--tobs", est.t_obs, "Dataset length behind --stats");
  e->add_option("--neighbors", est.neighbors, "Nearest grid points used")->capture_default_str();
  e->add_option("--bootstrap", est.bootstrap, "Bootstrap replicates for a CI (0 = none)");
  e->add_option("--level", est.level, "CI level")->capture_default_str();
  e->add_option("--seed", est.seed, "Seed")->capture_default_str();
  e->add_option("--prior", est.prior, "Prior JSON for grid-map");
  e->add_flag("--posterior", est.posterior, "Include posterior samples in the output");

  RecoverArgs rec;
  auto* r = app.add_subcommand("recover", "Parameter-recovery study against simulated test sets");
  r->add_option("--db", rec.db, "PPDB file (default: $PREPAID_DB_DIR)");
  r->add_option("--methods", rec.methods, "Comma-separated methods")->capture_default_str();
  r->add_option("--count", rec.count, "Test items")->capture_default_str();
  r->add_option("--tobs", rec.t_obs, "Dataset lengths")->delimiter(',')->capture_default_str();
  r->add_option("--trim", rec.trim, "Boundary trim, fraction of each range")->capture_default_str();
  r->add_option("--bootstrap", rec.bootstrap, "Bootstrap replicates for point methods (0 = none)");
  r->add_option("--level", rec.level, "CI level")->capture_default_str();
  r->add_option("--map-prior", rec.map_prior, "Prior JSON for grid-map (default uniform)");
  r->add_option("--seed", rec.seed, "Seed")->capture_default_str();
  r->add_option("--workers", rec.workers, "Threads (0 = all cores)");
  r->add_option("--csv", rec.csv, "Per-item CSV output");
  r->add_option("--report", rec.report, "Summary JSON output");

  ToyArgs toy;
  auto* t = app.add_subcommand("toy-study", "RMSE of the local-regression estimator on the Gaussian toy");
  t->add_option("--situation", toy.situation, "1: statistic ybar; 2: ybar^2")->check(CLI::IsMember({1, 2}));
  t->add_option("--deltas", toy.deltas, "Grid gaps (default 13 log-spaced over 1e-4..1e-1)")->delimiter(',');
  t->add_option("--ns", toy.ns, "Neighbor counts (default 10,30,100,300)")->delimiter(',');
  t->add_option("--replications", toy.replications, "Replications per cell")->capture_default_str();
  t->add_option("--seed", toy.seed, "Seed")->capture_default_str();
  t->add_option("--mu", toy.mu, "True mean (default 0, or 1 in situation 2)");
  t->add_option("--s", toy.s, "Observation sd")->capture_default_str();
  t->add_option("--tobs", toy.t_obs, "Observed length")->capture_default_str();
  t->add_option("--tsim", toy.t_sim, "Simulated length per grid point")->capture_default_str();
  t->add_option("--workers", toy.workers, "Threads (0 = all cores)");
  t->add_option("--csv", toy.csv, "CSV output");
  t->add_option("--matrix", toy.matrix, "gnuplot matrix output");

  ServeArgs srv;
  auto* s = app.add_subcommand("serve", "HTTP estimation service");
  s->add_option("--db", srv.db, "PPDB file (repeatable; default: every *.ppdb in $PREPAID_DB_DIR)");
  s->add_option("--host", srv.host, "Bind address")->capture_default_str();
  s->add_option("--port", srv.port, "Port (0 = any free port)")->capture_default_str();
  s->add_option("--threads", srv.threads, "Worker threads")->capture_default_str();
  s->add_option("--max-queued", srv.max_queued, "Pending requests before refusing")->capture_default_str();
  s->add_option("--timeout", srv.timeout, "Socket timeout, seconds")->capture_default_str();

  std::string inspect_path;
  auto* i = app.add_subcommand("inspect", "Print a PPDB header after verifying the file");
  i->add_option("db", inspect_path, "PPDB file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*b) return cmd_build(build, json);
    if (*e) return cmd_estimate(est, json);
    if (*r) return cmd_recover(rec, json);
    if (*t) return cmd_toy(toy, json);
    if (*s) return cmd_serve(srv);
    if (*i) return cmd_inspect(inspect_path, json);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const RequestError& err) {
    std::cerr << "error: " << err.what() << '\n';
    for (const auto& f : err.fields()) std::cerr << "  " << f.field << ": " << f.message << '\n';
    return 2;
  } catch (const UnknownModel& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const UnsupportedMethod& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& err) {
    std::cerr << "error: bad JSON argument: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
