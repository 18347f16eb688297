#include "dcpref/service/session_service.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <unordered_map>

#include "dcpref/errors.hpp"
#include "dcpref/itinerary.hpp"

namespace dcpref::service {

namespace {

std::string now_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::string random_id() {
  std::random_device rd;
  std::uniform_int_distribution<unsigned> hex(0, 15);
  std::string s = "s";
  for (int i = 0; i < 16; ++i) s += "0123456789abcdef"[hex(rd)];
  return s;
}

ServiceError invalid(const std::string& field, const std::string& message) {
  return ServiceError(400, "validation_error", message, Json{{"field", field}});
}

const char* phase_name(QueryPhase p) {
  switch (p) {
    case QueryPhase::phase1: return "phase1";
    case QueryPhase::phase2: return "phase2";
    case QueryPhase::active: return "active";
  }
  return "active";
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, std::size_t line, const std::string& column) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw ServiceError(400, "parse_error", "line " + std::to_string(line) + ": invalid number '" + s + "'",
                     Json{{"field", "instances_csv"}, {"line", line}, {"column", column}});
}

// Converts a CSV upload into the JSON instance list. The itinerary schema
// (id plus the 17 itinerary columns) derives nests from the features.
Json csv_to_instances(const std::string& text, Json& feature_names) {
  std::istringstream in(text);
  std::string header_line;
  std::size_t line_no = 0;
  while (std::getline(in, header_line)) {
    ++line_no;
    if (header_line.find_first_not_of(" \t\r") != std::string::npos) break;
  }
  const auto header = split_line(header_line);
  const auto& itin = itinerary_feature_names();
  const bool itinerary_schema =
      header.size() == itin.size() + 1 && header[0] == "id" && std::equal(itin.begin(), itin.end(), header.begin() + 1);
  Json out = Json::array();
  if (itinerary_schema) {
    std::istringstream again(text);
    std::vector<Itinerary> its;
    try {
      its = parse_itineraries(again);
    } catch (const ParseError& e) {
      throw ServiceError(400, "parse_error", e.what(), Json{{"field", "instances_csv"}, {"line", e.line()}});
    } catch (const ValidationError& e) {
      throw invalid("instances_csv", e.what());
    }
    feature_names = Json(std::vector<std::string>(itin.begin(), itin.end()));
    for (const auto& it : its) {
      std::vector<double> f(it.features.data(), it.features.data() + it.features.size());
      out.push_back({{"id", it.id}, {"nest", it.nest}, {"name", "itinerary " + std::to_string(it.id)}, {"features", f}});
    }
    return out;
  }
  const auto id_col = std::find(header.begin(), header.end(), "id");
  const auto nest_col = std::find(header.begin(), header.end(), "nest");
  if (id_col == header.end() || nest_col == header.end()) {
    throw ServiceError(400, "parse_error", "line " + std::to_string(line_no) + ": header needs id and nest columns",
                       Json{{"field", "instances_csv"}, {"line", line_no}});
  }
  const auto name_col = std::find(header.begin(), header.end(), "name");
  std::vector<std::size_t> feature_cols;
  feature_names = Json::array();
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "id" || header[c] == "nest" || header[c] == "name") continue;
    feature_cols.push_back(c);
    feature_names.push_back(header[c]);
  }
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw ServiceError(400, "parse_error",
                         "line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) + " columns",
                         Json{{"field", "instances_csv"}, {"line", line_no}});
    }
    Json inst;
    const double id = parse_number(cells[static_cast<std::size_t>(id_col - header.begin())], line_no, "id");
    if (id != std::floor(id)) {
      throw ServiceError(400, "parse_error", "line " + std::to_string(line_no) + ": id must be an integer",
                         Json{{"field", "instances_csv"}, {"line", line_no}});
    }
    inst["id"] = static_cast<long long>(id);
    inst["nest"] = cells[static_cast<std::size_t>(nest_col - header.begin())];
    if (name_col != header.end()) inst["name"] = cells[static_cast<std::size_t>(name_col - header.begin())];
    std::vector<double> f;
    for (std::size_t c : feature_cols) f.push_back(parse_number(cells[c], line_no, header[c]));
    inst["features"] = f;
    out.push_back(inst);
  }
  return out;
}

LoopConfig parse_config(const Json& cfg, std::uint64_t seed) {
  LoopConfig lc;
  lc.budget = 20;
  lc.seed = seed;
  try {
    if (cfg.contains("surrogate")) lc.surrogate = surrogate_kind_from_string(cfg.at("surrogate").get<std::string>());
    if (cfg.contains("acquisition")) {
      lc.acquisition = acquisition_kind_from_string(cfg.at("acquisition").get<std::string>());
    }
    if (cfg.contains("budget")) lc.budget = cfg.at("budget").get<int>();
    if (cfg.contains("zeta")) lc.zeta = cfg.at("zeta").get<double>();
    if (cfg.contains("max_iterations")) lc.surrogate_config.adam.max_iterations = cfg.at("max_iterations").get<int>();
    if (cfg.contains("termination")) {
      const auto t = cfg.at("termination").get<std::string>();
      if (t == "threshold_or_budget") {
        lc.termination = TerminationRule::threshold_or_budget;
      } else if (t == "incumbent_in_pool") {
        lc.termination = TerminationRule::incumbent_in_pool;
      } else {
        throw invalid("config.termination", "unknown termination rule '" + t + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw invalid("config", e.what());
  } catch (const dcpref::Error& e) {
    throw invalid("config", e.what());
  }
  if (lc.budget < 0) throw invalid("config.budget", "budget must be non-negative");
  if (lc.zeta < 0.0) throw invalid("config.zeta", "zeta must be non-negative");
  if (lc.surrogate_config.adam.max_iterations < 1) throw invalid("config.max_iterations", "must be positive");
  return lc;
}

}  // namespace

ServiceError::ServiceError(int status, std::string code, const std::string& message, Json details)
    : std::runtime_error(message), status_(status), code_(std::move(code)), details_(std::move(details)) {}

Json ServiceError::body() const {
  return Json{{"error", code_}, {"message", what()}, {"details", details_}};
}

struct SessionService::Entry {
  struct Outstanding {
    InstanceId first = 0;
    InstanceId second = 0;
    std::string token;
    QueryPhase phase = QueryPhase::phase1;
  };

  std::string id;
  Json create_event;
  Json feature_names;
  std::vector<long long> external_ids;
  std::vector<std::string> names;
  std::vector<Json> nest_labels;
  std::vector<std::vector<double>> raw_features;
  std::unordered_map<long long, InstanceId> internal_of;
  std::unique_ptr<Session> session;
  FitMode fit_mode = FitMode::async;

  std::string status = "awaiting_answer";
  std::optional<Outstanding> query;
  std::optional<Proposal> proposal;
  std::shared_ptr<const Surrogate> latest_model;
  int tokens_issued = 0;
  std::map<std::string, Json> answered;
  Json history = Json::array();
  std::string created_at;
  std::string updated_at;
  std::string error;

  mutable std::mutex mutex;
  mutable std::condition_variable idle;
  std::thread fit_thread;

  Json instance_json(InstanceId i) const {
    const auto k = static_cast<std::size_t>(i);
    return Json{{"id", external_ids[k]}, {"name", names[k]}, {"nest", nest_labels[k]}, {"features", raw_features[k]}};
  }

  void issue(InstanceId a, InstanceId b, QueryPhase phase) {
    query = Outstanding{a, b, "q" + std::to_string(++tokens_issued), phase};
    status = "awaiting_answer";
  }

  Json query_json() const {
    if (!query) return nullptr;
    return Json{{"token", query->token},
                {"phase", phase_name(query->phase)},
                {"first", instance_json(query->first)},
                {"second", instance_json(query->second)}};
  }

  Json x_best_json() const {
    if (!session->initialized()) return nullptr;
    return instance_json(session->x_best());
  }

  Json response() const {
    Json r{{"session_id", id}, {"status", status}};
    r["query"] = query_json();
    if (status == "converged" || status == "exhausted") r["x_best"] = x_best_json();
    if (!error.empty()) r["message"] = error;
    return r;
  }
};

SessionService::SessionService(ServiceOptions options) : options_(std::move(options)) {
  if (!options_.data_dir.empty()) std::filesystem::create_directories(options_.data_dir);
}

SessionService::~SessionService() {
  std::lock_guard lk(registry_mutex_);
  for (auto& [_, e] : sessions_) {
    if (e->fit_thread.joinable()) e->fit_thread.join();
  }
}

std::shared_ptr<SessionService::Entry> SessionService::find(const std::string& id) const {
  std::lock_guard lk(registry_mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "not_found", "unknown session '" + id + "'");
  return it->second;
}

std::vector<std::string> SessionService::session_ids() const {
  std::lock_guard lk(registry_mutex_);
  std::vector<std::string> out;
  for (const auto& [id, _] : sessions_) out.push_back(id);
  return out;
}

void SessionService::append_event(Entry& e, const Json& event) {
  if (options_.data_dir.empty()) return;
  std::ofstream f(options_.data_dir / (e.id + ".jsonl"), std::ios::app | std::ios::binary);
  if (!f) throw ServiceError(500, "storage_error", "cannot write the session log");
  f << event.dump() << '\n';
}

std::shared_ptr<SessionService::Entry> SessionService::build(const std::string& id, const Json& create_event) {
  auto e = std::make_shared<Entry>();
  e->id = id;
  e->create_event = create_event;
  e->created_at = e->updated_at = create_event.value("ts", std::string());
  const Json& instances = create_event.at("instances");
  const Json& cfg = create_event.at("config");
  e->feature_names = create_event.at("feature_names");
  e->fit_mode = cfg.value("fit_mode", std::string("async")) == "sync" ? FitMode::sync : FitMode::async;

  std::vector<Instance> pool;
  std::vector<Json> nest_keys;
  std::size_t dim = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const Json& inst = instances[i];
    const std::string where = "instances[" + std::to_string(i) + "]";
    if (!inst.is_object() || !inst.contains("id") || !inst.contains("features") || !inst.contains("nest")) {
      throw invalid(where, "each instance needs id, nest and features");
    }
    if (!inst.at("id").is_number_integer()) throw invalid(where + ".id", "id must be an integer");
    const long long ext = inst.at("id").get<long long>();
    if (e->internal_of.count(ext)) throw invalid(where + ".id", "duplicate instance id " + std::to_string(ext));
    const Json& feats = inst.at("features");
    if (!feats.is_array() || feats.empty()) throw invalid(where + ".features", "features must be a non-empty array");
    std::vector<double> f;
    for (const auto& v : feats) {
      if (!v.is_number()) throw invalid(where + ".features", "features must be numbers");
      f.push_back(v.get<double>());
    }
    if (i == 0) dim = f.size();
    if (f.size() != dim) throw invalid(where + ".features", "all instances need the same number of features");
    const Json nest = inst.at("nest");
    if (!nest.is_string() && !nest.is_number_integer()) throw invalid(where + ".nest", "nest must be a string or integer");
    auto pos = std::find(nest_keys.begin(), nest_keys.end(), nest);
    if (pos == nest_keys.end()) {
      nest_keys.push_back(nest);
      pos = nest_keys.end() - 1;
    }
    const auto internal = static_cast<InstanceId>(i);
    e->internal_of[ext] = internal;
    e->external_ids.push_back(ext);
    e->names.push_back(inst.contains("name") && inst.at("name").is_string() ? inst.at("name").get<std::string>()
                                                                            : std::to_string(ext));
    e->nest_labels.push_back(nest);
    e->raw_features.push_back(f);
    pool.push_back({internal, Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size())),
                    static_cast<NestId>(pos - nest_keys.begin())});
  }
  if (pool.size() < 2) throw invalid("instances", "at least two instances are required");
  if (e->feature_names.is_null() || e->feature_names.empty()) {
    e->feature_names = Json::array();
    for (std::size_t k = 0; k < dim; ++k) e->feature_names.push_back("x" + std::to_string(k + 1));
  }
  if (e->feature_names.size() != dim) throw invalid("feature_names", "feature_names must match the feature count");

  const LoopConfig lc = parse_config(cfg, create_event.at("seed").get<std::uint64_t>());
  try {
    e->session = std::make_unique<Session>(std::move(pool), static_cast<int>(nest_keys.size()), lc);
  } catch (const ConfigurationError& err) {
    throw invalid("instances", err.what());
  }
  const auto q = e->session->pending_init_query();
  e->issue(q->first, q->second, q->phase);
  return e;
}

Json SessionService::create(const Json& body) {
  if (!body.is_object()) throw invalid("body", "request body must be a JSON object");
  Json event{{"type", "create"}, {"ts", now_utc()}};
  Json feature_names = body.value("feature_names", Json());
  if (body.contains("instances_csv")) {
    if (!body.at("instances_csv").is_string()) throw invalid("instances_csv", "instances_csv must be a string");
    Json derived;
    event["instances"] = csv_to_instances(body.at("instances_csv").get<std::string>(), derived);
    if (feature_names.is_null()) feature_names = derived;
  } else if (body.contains("instances")) {
    if (!body.at("instances").is_array()) throw invalid("instances", "instances must be an array");
    event["instances"] = body.at("instances");
  } else {
    throw invalid("instances", "provide instances or instances_csv");
  }
  event["feature_names"] = feature_names;
  Json cfg = body.value("config", Json::object());
  if (!cfg.is_object()) throw invalid("config", "config must be an object");
  if (!cfg.contains("fit_mode")) cfg["fit_mode"] = options_.default_fit_mode == FitMode::sync ? "sync" : "async";
  const std::string mode = cfg.value("fit_mode", std::string());
  if (mode != "sync" && mode != "async") throw invalid("config.fit_mode", "fit_mode must be sync or async");
  event["config"] = cfg;
  std::uint64_t seed = 0;
  if (cfg.contains("seed")) {
    if (!cfg.at("seed").is_number_unsigned() && !cfg.at("seed").is_number_integer()) {
      throw invalid("config.seed", "seed must be a non-negative integer");
    }
    seed = cfg.at("seed").get<std::uint64_t>();
  } else {
    std::random_device rd;
    seed = (static_cast<std::uint64_t>(rd()) << 32) | rd();
  }
  event["seed"] = seed;

  std::string id;
  {
    std::lock_guard lk(registry_mutex_);
    do id = random_id();
    while (sessions_.count(id));
  }
  auto e = build(id, event);
  {
    std::lock_guard lk(e->mutex);
    append_event(*e, event);
  }
  Json r = e->response();
  std::lock_guard lk(registry_mutex_);
  sessions_[id] = e;
  return r;
}

Json SessionService::answer(const std::string& id, const Json& body) {
  auto e = find(id);
  std::unique_lock lk(e->mutex);
  if (!body.is_object() || !body.contains("query_token") || !body.at("query_token").is_string()) {
    throw invalid("query_token", "query_token is required");
  }
  if (!body.contains("winner_id") || !body.at("winner_id").is_number_integer()) {
    throw invalid("winner_id", "winner_id must be an integer");
  }
  const std::string token = body.at("query_token").get<std::string>();
  if (const auto it = e->answered.find(token); it != e->answered.end()) {
    if (it->second.at("winner_id") != body.at("winner_id")) {
      throw ServiceError(409, "conflict", "query " + token + " was already answered differently");
    }
    return it->second.at("response");
  }
  if (!e->query || e->query->token != token) {
    Json details{{"status", e->status}};
    if (e->query) details["current_token"] = e->query->token;
    throw ServiceError(409, "stale_query", "query token '" + token + "' is not the outstanding query", details);
  }
  const std::string ts = now_utc();
  Json event{{"type", "answer"}, {"ts", ts}, {"query_token", token}, {"winner_id", body.at("winner_id")}};
  Json r = apply_answer(*e, body, ts);
  append_event(*e, event);
  // Recorded before the fit so a retried request replays instead of conflicting.
  e->answered[token] = Json{{"winner_id", body.at("winner_id")}, {"response", r}};
  if (e->status == "fitting") {
    lk.unlock();
    start_fit(e, false);
    lk.lock();
    if (e->fit_mode == FitMode::sync) r = e->response();
  }
  e->answered[token] = Json{{"winner_id", body.at("winner_id")}, {"response", r}};
  return r;
}

// Applies a validated answer under the entry lock. Leaves status "fitting"
// when a surrogate fit must run before the next query.
Json SessionService::apply_answer(Entry& e, const Json& body, const std::string& ts) {
  const long long ext = body.at("winner_id").get<long long>();
  const auto it = e.internal_of.find(ext);
  const auto& q = *e.query;
  if (it == e.internal_of.end() || (it->second != q.first && it->second != q.second)) {
    throw invalid("winner_id", "winner " + std::to_string(ext) + " is not part of the outstanding pair");
  }
  const InstanceId winner = it->second;
  const InstanceId loser = winner == q.first ? q.second : q.first;
  e.history.push_back(Json{{"winner_id", e.external_ids[static_cast<std::size_t>(winner)]},
                           {"loser_id", e.external_ids[static_cast<std::size_t>(loser)]},
                           {"phase", phase_name(q.phase)},
                           {"query_token", q.token}});
  e.updated_at = ts;
  Session& s = *e.session;
  if (q.phase == QueryPhase::active) {
    s.commit(*e.proposal, winner);
    e.proposal.reset();
  } else {
    s.answer_init(winner);
  }
  e.query.reset();
  if (!s.initialized()) {
    const auto next = s.pending_init_query();
    e.issue(next->first, next->second, next->phase);
  } else if (s.status() == SessionStatus::active) {
    e.status = "fitting";
  } else {
    e.status = s.status() == SessionStatus::converged ? "converged" : "exhausted";
  }
  return e.response();
}

void SessionService::start_fit(const std::shared_ptr<Entry>& e, bool replaying) {
  auto work = [this, e, replaying]() {
    std::optional<Proposal> prop;
    std::string err;
    try {
      prop = e->session->propose();
    } catch (const std::exception& ex) {
      err = ex.what();
    }
    std::lock_guard lk(e->mutex);
    if (!prop) {
      e->status = "failed";
      e->error = "surrogate fit failed: " + err;
    } else if (prop->terminate) {
      e->session->conclude(*prop);
      if (prop->surrogate) e->latest_model = prop->surrogate;
      e->status = e->session->status() == SessionStatus::converged ? "converged" : "exhausted";
    } else {
      e->latest_model = prop->surrogate;
      e->issue(prop->candidate, prop->incumbent, QueryPhase::active);
      e->proposal = std::move(prop);
    }
    if (!replaying) {
      Json ev{{"type", "fit"}, {"ts", now_utc()}, {"status", e->status}};
      if (e->proposal) {
        ev["candidate_id"] = e->external_ids[static_cast<std::size_t>(e->proposal->candidate)];
        ev["incumbent_id"] = e->external_ids[static_cast<std::size_t>(e->proposal->incumbent)];
        ev["acquisition_value"] = e->proposal->value;
      }
      if (!e->error.empty()) ev["error"] = e->error;
      try {
        append_event(*e, ev);
      } catch (const std::exception& ex) {
        std::cerr << "session " << e->id << ": " << ex.what() << '\n';
      }
    }
    e->idle.notify_all();
  };
  if (e->fit_thread.joinable()) e->fit_thread.join();
  if (replaying || e->fit_mode == FitMode::sync) {
    work();
  } else {
    e->fit_thread = std::thread(work);
  }
}

void SessionService::wait_idle(const std::string& id) const {
  auto e = find(id);
  std::unique_lock lk(e->mutex);
  e->idle.wait(lk, [&] { return e->status != "fitting"; });
}

Json SessionService::state(const std::string& id) const {
  auto e = find(id);
  std::lock_guard lk(e->mutex);
  const Session& s = *e->session;
  Json r{{"session_id", e->id}, {"status", e->status}};
  r["phase"] = s.initialized() ? "active" : "initialization";
  r["answered_queries"] = e->history.size();
  r["active_queries"] = s.trace().size();
  r["budget"] = s.config().budget;
  r["surrogate"] = to_string(s.config().surrogate);
  r["acquisition"] = to_string(s.config().acquisition);
  r["instance_count"] = s.instances().size();
  r["feature_names"] = e->feature_names;
  r["x_best"] = e->x_best_json();
  r["query"] = e->query_json();
  r["history"] = e->history;
  Json est = Json::array();
  if (e->latest_model && e->latest_model->fitted()) {
    const SurrogateState& st = e->latest_model->state();
    for (std::size_t k = 0; k < st.ids.size(); ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      est.push_back(Json{{"id", e->external_ids[static_cast<std::size_t>(st.ids[k])]},
                         {"mean", st.u_star(kk)},
                         {"variance", st.covariance(kk, kk)}});
    }
  }
  r["estimates"] = est;
  r["created_at"] = e->created_at;
  r["updated_at"] = e->updated_at;
  if (!e->error.empty()) r["message"] = e->error;
  return r;
}

void SessionService::recover() {
  if (options_.data_dir.empty()) return;
  std::vector<std::filesystem::path> logs;
  for (const auto& f : std::filesystem::directory_iterator(options_.data_dir)) {
    if (f.is_regular_file() && f.path().extension() == ".jsonl") logs.push_back(f.path());
  }
  std::sort(logs.begin(), logs.end());
  for (const auto& path : logs) {
    const std::string id = path.stem().string();
    try {
      std::ifstream in(path);
      std::string line;
      std::shared_ptr<Entry> e;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const Json ev = Json::parse(line);
        const std::string type = ev.at("type").get<std::string>();
        if (type == "create") {
          e = build(id, ev);
        } else if (type == "answer" && e) {
          std::unique_lock lk(e->mutex);
          const std::string token = ev.at("query_token").get<std::string>();
          Json r = apply_answer(*e, ev, ev.at("ts").get<std::string>());
          if (e->status == "fitting") {
            lk.unlock();
            start_fit(e, true);
            lk.lock();
            if (e->fit_mode == FitMode::sync) r = e->response();
          }
          e->answered[token] = Json{{"winner_id", ev.at("winner_id")}, {"response", r}};
        }
      }
      if (!e) continue;
      // A fit interrupted by a restart runs again here.
      if (e->status == "fitting") start_fit(e, true);
      std::lock_guard lk(registry_mutex_);
      sessions_[id] = e;
    } catch (const std::exception& ex) {
      std::cerr << "skipping session log " << path << ": " << ex.what() << '\n';
    }
  }
}

}  // namespace dcpref::service
