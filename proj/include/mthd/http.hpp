#pragma once

#include <memory>
#include <string>

#include "httplib.h"

#include "mthd/server.hpp"
#include "mthd/simulator.hpp"

namespace mthd::server {

inline HttpRequest from_httplib(const httplib::Request& req) {
  HttpRequest r;
  r.method = req.method;
  r.path = req.path;
  for (const auto& [k, v] : req.params) r.query.emplace(k, v);
  r.body = req.body;
  r.origin = req.get_header_value("Origin");
  return r;
}

inline void to_httplib(const HttpResponse& in, httplib::Response& out) {
  out.status = in.status;
  for (const auto& [k, v] : in.headers)
    if (k != "Content-Type") out.set_header(k, v);
  if (in.status != 204) {
    auto it = in.headers.find("Content-Type");
    out.set_content(in.body, it != in.headers.end() ? it->second : "application/json");
  }
}

/// Binds every API route of `service` onto an httplib server.
inline void bind_routes(httplib::Server& http, Service& service, const std::string& static_dir = {}) {
  auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
    to_httplib(service.handle(from_httplib(req)), res);
  };
  http.Get(R"(/api/.*)", forward);
  http.Post(R"(/api/.*)", forward);
  http.Options(R"(/api/.*)", forward);
  if (!static_dir.empty()) http.set_mount_point("/", static_dir);
}

/// Owns an httplib server running on a background thread; used by tests and
/// the simulator's end-to-end mode.
class BackgroundServer {
 public:
  BackgroundServer(Service& service, const std::string& host = "127.0.0.1") {
    bind_routes(http_, service);
    port_ = http_.bind_to_any_port(host);
    if (port_ <= 0) throw IoError("cannot bind a port on " + host);
    thread_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
  }
  ~BackgroundServer() {
    http_.stop();
    if (thread_.joinable()) thread_.join();
  }
  BackgroundServer(const BackgroundServer&) = delete;
  BackgroundServer& operator=(const BackgroundServer&) = delete;

  int port() const { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server http_;
  int port_ = 0;
  std::thread thread_;
};

/// Blocks serving until the process is stopped.
inline int run(const ServerConfig& cfg) {
  auto service = make_service(cfg);
  httplib::Server http;
  bind_routes(http, *service, cfg.static_dir);
  if (!http.listen(cfg.host, cfg.port)) throw IoError("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
  return 0;
}

/// Simulator engine that goes through the wire protocol.
class RemoteEngine : public sim::Engine {
 public:
  RemoteEngine(const std::string& url, TaskKind task) : client_(url), task_(task) {
    client_.set_read_timeout(600, 0);
  }

  std::string start(const std::string& source) override {
    Json reply = post("/api/translate", {{"task", to_string(task_)}, {"source", source}});
    session_id_ = reply.at("session_id").get<std::string>();
    return reply.at("hypothesis").get<std::string>();
  }

  std::string correct(const std::string& prefix) override {
    return post("/api/correct", {{"session_id", session_id_}, {"prefix", prefix}}).at("hypothesis").get<std::string>();
  }

  void finish(const std::string& target, bool learn) override {
    Json body{{"session_id", session_id_}, {"target", target}, {"learn", learn}};
    auto res = client_.Post("/api/validate", body.dump(), "application/json");
    if (!res) throw IoError("validate request failed: " + httplib::to_string(res.error()));
    // a diverged adaptation still closes the session
    if (res->status != 200 && res->status != 500) raise(*res);
  }

 private:
  Json post(const std::string& path, const Json& body) {
    auto res = client_.Post(path, body.dump(), "application/json");
    if (!res) throw IoError(path + " request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) raise(*res);
    return Json::parse(res->body);
  }

  [[noreturn]] static void raise(const httplib::Response& res) {
    std::string code = "http_error", message = res.body;
    try {
      Json j = Json::parse(res.body);
      code = j.at("error").at("code").get<std::string>();
      message = j.at("error").at("message").get<std::string>();
    } catch (const Json::exception&) {
    }
    throw ApiError(res.status, code, message);
  }

  httplib::Client client_;
  TaskKind task_;
  std::string session_id_;
};

}  // namespace mthd::server
