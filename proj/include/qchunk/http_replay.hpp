#pragma once

// Fixture transports. A fixture is one JSON file holding a request/response
// pair:
//
//   {"request":  {"path": "/v1/embeddings", "match": {"model": "m"}},
//    "response": {"status": 200, "body": {...}}}
//
// `match` (optional) lists top-level request body fields that must be equal.
// ReplayTransport serves fixtures in file-name order, each at most once,
// and keeps every request it saw for inspection. RecordingTransport wraps a
// live transport and writes the pairs it observes.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qchunk/errors.hpp"
#include "qchunk/http_backend.hpp"

namespace qchunk::http {

struct Fixture {
  std::string name;
  std::string path;
  nlohmann::json match = nlohmann::json::object();
  Response response;
};

inline Fixture parse_fixture(const nlohmann::json& j, std::string name = {}) {
  Fixture f;
  f.name = std::move(name);
  const auto& req = j.at("request");
  f.path = req.at("path").get<std::string>();
  if (req.contains("match")) f.match = req["match"];
  const auto& res = j.at("response");
  f.response.status = res.value("status", 200);
  const auto& body = res.at("body");
  f.response.body = body.is_string() ? body.get<std::string>() : body.dump();
  return f;
}

class ReplayTransport final : public Transport {
 public:
  explicit ReplayTransport(std::vector<Fixture> fixtures) : fixtures_(std::move(fixtures)) {
    used_.assign(fixtures_.size(), false);
  }

  // Loads every *.json file under `dir`, ordered by file name.
  static std::shared_ptr<ReplayTransport> from_directory(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<Fixture> out;
    for (const auto& f : files) {
      std::ifstream in(f);
      if (!in) throw IoError("cannot open fixture " + f.string());
      try {
        out.push_back(parse_fixture(nlohmann::json::parse(in), f.filename().string()));
      } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad fixture " + f.string() + ": " + e.what());
      }
    }
    return std::make_shared<ReplayTransport>(std::move(out));
  }

  Response post(const Request& request) override {
    std::lock_guard lock(mutex_);
    requests_.push_back(request);
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(request.body);
    } catch (const nlohmann::json::parse_error&) {
      body = nlohmann::json::object();
    }
    for (std::size_t i = 0; i < fixtures_.size(); ++i) {
      if (used_[i] || fixtures_[i].path != request.path) continue;
      bool ok = true;
      for (const auto& [k, v] : fixtures_[i].match.items())
        if (!body.contains(k) || body[k] != v) ok = false;
      if (!ok) continue;
      used_[i] = true;
      return fixtures_[i].response;
    }
    throw BackendError("no fixture left for " + request.path, false);
  }

  std::vector<Request> requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
  }

 private:
  std::vector<Fixture> fixtures_;
  std::vector<bool> used_;
  std::vector<Request> requests_;
  mutable std::mutex mutex_;
};

class RecordingTransport final : public Transport {
 public:
  RecordingTransport(std::shared_ptr<Transport> inner, std::filesystem::path dir)
      : inner_(std::move(inner)), dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  Response post(const Request& request) override {
    Response res = inner_->post(request);
    nlohmann::json body_json = nlohmann::json::parse(res.body, nullptr, false);
    nlohmann::json req_json = nlohmann::json::parse(request.body, nullptr, false);
    nlohmann::json match = nlohmann::json::object();
    if (req_json.is_object() && req_json.contains("model")) match["model"] = req_json["model"];
    nlohmann::json fixture = {
        {"request", {{"path", request.path}, {"match", match}, {"body", req_json}}},
        {"response",
         {{"status", res.status},
          {"body", body_json.is_discarded() ? nlohmann::json(res.body) : body_json}}}};
    std::lock_guard lock(mutex_);
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.json", counter_++);
    std::ofstream(dir_ / name) << fixture.dump(2) << "\n";
    return res;
  }

 private:
  std::shared_ptr<Transport> inner_;
  std::filesystem::path dir_;
  std::mutex mutex_;
  std::size_t counter_ = 0;
};

}  // namespace qchunk::http
