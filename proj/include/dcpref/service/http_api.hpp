#pragma once

#include <string>
#include <utility>

// Eigen must be parsed before httplib: <resolv.h> defines a `_res` macro
// that collides with Eigen parameter names.
#include "dcpref/service/session_service.hpp"

#include <httplib.h>

namespace dcpref::service {

/// Installs the session routes and /healthz on `server`.
void register_routes(httplib::Server& server, SessionService& service);

/// Splits "host:port"; a bare port binds 127.0.0.1. Throws ConfigurationError.
std::pair<std::string, int> parse_bind_address(const std::string& text);

}  // namespace dcpref::service
