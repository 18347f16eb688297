#pragma once

// Live elicitation sessions: payload validation, the query/answer protocol
// with idempotent tokens, background surrogate fits and a JSON-lines event
// log per session that can be replayed after a restart.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcpref/active_loop.hpp"

namespace dcpref::service {

using Json = nlohmann::json;

/// Error with an HTTP status and a JSON body {error, message, details}.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message, Json details = Json::object());
  int status() const noexcept { return status_; }
  Json body() const;

 private:
  int status_;
  std::string code_;
  Json details_;
};

enum class FitMode { async, sync };

struct ServiceOptions {
  std::filesystem::path data_dir;  // empty: no persistence
  FitMode default_fit_mode = FitMode::async;
};

class SessionService {
 public:
  explicit SessionService(ServiceOptions options);
  ~SessionService();
  SessionService(const SessionService&) = delete;
  SessionService& operator=(const SessionService&) = delete;

  /// Body: {"instances": [...]} or {"instances_csv": "..."}, plus optional
  /// "feature_names" and "config". Returns {session_id, status, query}.
  Json create(const Json& body);
  /// Body: {"winner_id", "query_token"}. Returns {status, query?, x_best?}.
  Json answer(const std::string& id, const Json& body);
  Json state(const std::string& id) const;

  /// Loads every session log found in the data directory.
  void recover();
  /// Blocks until no background fit is running for the session.
  void wait_idle(const std::string& id) const;
  std::vector<std::string> session_ids() const;

 private:
  struct Entry;
  std::shared_ptr<Entry> find(const std::string& id) const;
  std::shared_ptr<Entry> build(const std::string& id, const Json& create_event);
  Json apply_answer(Entry& e, const Json& body, const std::string& ts);
  void start_fit(const std::shared_ptr<Entry>& e, bool replaying);
  void append_event(Entry& e, const Json& event);

  ServiceOptions options_;
  mutable std::mutex registry_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
};

}  // namespace dcpref::service
