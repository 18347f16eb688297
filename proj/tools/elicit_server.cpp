// HTTP server for live elicitation sessions.
//
// DCPREF_BIND      host:port to listen on (default 127.0.0.1:8080)
// DCPREF_SESSIONS  directory for session event logs (default ./sessions)

#include <cstdlib>
#include <iostream>

#include "dcpref/service/http_api.hpp"

int main() {
  using namespace dcpref::service;
  const char* bind = std::getenv("DCPREF_BIND");
  const char* dir = std::getenv("DCPREF_SESSIONS");
  try {
    const auto [host, port] = parse_bind_address(bind ? bind : "127.0.0.1:8080");
    ServiceOptions opt;
    opt.data_dir = dir ? dir : "sessions";
    SessionService service(opt);
    service.recover();
    httplib::Server server;
    register_routes(server, service);
    std::cerr << "listening on " << host << ':' << port << ", " << service.session_ids().size()
              << " sessions recovered from " << opt.data_dir << '\n';
    if (!server.listen(host, port)) {
      std::cerr << "cannot listen on " << host << ':' << port << '\n';
      return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
