#include "dcpref/service/http_api.hpp"

#include <iostream>

#include "dcpref/errors.hpp"

namespace dcpref::service {

namespace {

void send_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Handler>
void guarded(httplib::Response& res, Handler&& handler) {
  try {
    handler();
  } catch (const ServiceError& e) {
    send_json(res, e.status(), e.body());
  } catch (const nlohmann::json::parse_error& e) {
    send_json(res, 400, Json{{"error", "invalid_json"}, {"message", e.what()}, {"details", Json::object()}});
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    send_json(res, 500, Json{{"error", "internal"}, {"message", e.what()}, {"details", Json::object()}});
  }
}

}  // namespace

std::pair<std::string, int> parse_bind_address(const std::string& text) {
  std::string host = "127.0.0.1";
  std::string port = text;
  if (const auto colon = text.rfind(':'); colon != std::string::npos) {
    host = text.substr(0, colon);
    port = text.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    const int p = std::stoi(port, &used);
    if (used != port.size() || p < 0 || p > 65535 || host.empty()) throw std::invalid_argument("port");
    return {host, p};
  } catch (const std::exception&) {
    throw ConfigurationError("invalid bind address '" + text + "' (expected host:port)");
  }
}

void register_routes(httplib::Server& server, SessionService& service) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, Json{{"status", "ok"}});
  });

  server.Post("/sessions", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 201, service.create(Json::parse(req.body))); });
  });

  server.Post(R"(/sessions/([A-Za-z0-9_-]+)/answer)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.answer(req.matches[1], Json::parse(req.body))); });
  });

  server.Get(R"(/sessions/([A-Za-z0-9_-]+)/state)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.state(req.matches[1])); });
  });
}

}  // namespace dcpref::service
