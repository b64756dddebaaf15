#pragma once

// Live transport over cpp-httplib. Kept apart from http_backend.hpp so only
// translation units that talk to a real server pay for httplib.

#include <memory>
#include <string>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include "qchunk/errors.hpp"
#include "qchunk/http_backend.hpp"

namespace qchunk::http {

class HttplibTransport final : public Transport {
 public:
  // `base_url` is scheme://host[:port][/prefix]; the prefix is prepended to
  // every request path.
  HttplibTransport(const std::string& base_url, double timeout_seconds)
      : timeout_(timeout_seconds) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos)
      throw ConfigError("MODEL_API_BASE must include a scheme: " + base_url);
    const auto path_start = base_url.find('/', scheme_end + 3);
    origin_ = base_url.substr(0, path_start);
    if (path_start != std::string::npos) {
      prefix_ = base_url.substr(path_start);
      while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    }
  }

  Response post(const Request& request) override {
    httplib::Client cli(origin_);
    const auto secs = static_cast<time_t>(timeout_);
    const auto usecs = static_cast<time_t>((timeout_ - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    std::string content_type = "application/json";
    for (const auto& [k, v] : request.headers) {
      if (k == "Content-Type") content_type = v;
      else headers.emplace(k, v);
    }
    auto res = cli.Post(prefix_ + request.path, headers, request.body, content_type);
    if (!res)
      throw BackendError("transport error: " + httplib::to_string(res.error()), true);
    return {res->status, res->body};
  }

 private:
  std::string origin_;
  std::string prefix_;
  double timeout_;
};

}  // namespace qchunk::http
