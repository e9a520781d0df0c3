#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "mthd/adaptation.hpp"
#include "mthd/decoding.hpp"
#include "mthd/error.hpp"
#include "mthd/seq2seq.hpp"

namespace mthd::server {

using Json = nlohmann::json;
using Clock = std::chrono::steady_clock;

/// Error that maps directly onto an HTTP status and wire error code.
class ApiError : public Error {
 public:
  ApiError(int status, std::string code, const std::string& message)
      : Error(std::move(code), message), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

/// Reader/writer lock that admits waiters in arrival order: a writer waits
/// for earlier readers to drain, and later readers queue behind it.
class FifoSharedMutex {
 public:
  void lock_shared() {
    std::unique_lock lk(m_);
    const std::uint64_t ticket = next_++;
    cv_.wait(lk, [&] { return serving_ == ticket && !writer_; });
    ++readers_;
    ++serving_;
    cv_.notify_all();
  }

  void unlock_shared() {
    std::lock_guard lk(m_);
    --readers_;
    cv_.notify_all();
  }

  void lock() {
    std::unique_lock lk(m_);
    const std::uint64_t ticket = next_++;
    cv_.wait(lk, [&] { return serving_ == ticket && !writer_ && readers_ == 0; });
    writer_ = true;
    ++serving_;
  }

  void unlock() {
    std::lock_guard lk(m_);
    writer_ = false;
    cv_.notify_all();
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::uint64_t next_ = 0;
  std::uint64_t serving_ = 0;
  std::size_t readers_ = 0;
  bool writer_ = false;
};

struct TaskSetup {
  std::optional<Model> model;
  std::optional<std::vector<std::string>> sentences;
};

struct ServiceOptions {
  std::chrono::seconds session_ttl{30 * 60};
  std::size_t beam_width = 6;
  AdaptationConfig adaptation;
  std::string validated_log;  // empty: samples are not persisted
  std::vector<std::string> cors_allowlist;
  std::function<Clock::time_point()> clock = [] { return Clock::now(); };
  std::function<std::string()> timestamp = [] { return utc_timestamp(); };
};

struct HttpRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
  std::string origin;
};

struct HttpResponse {
  int status = 200;
  std::string body;
  std::map<std::string, std::string> headers;
};

struct Session {
  std::string id;
  TaskKind task;
  std::string source;
  std::string current_hypothesis;
  Clock::time_point created;
  Clock::time_point touched;
  std::mutex lock;
};

/// Translate / correct / validate service over per-task models.
///
/// Decoding takes a shared lease on the task model; validation with learning
/// takes an exclusive one. Sessions are in memory only.
class Service {
 public:
  Service(ServiceOptions options, std::map<TaskKind, TaskSetup> tasks) : options_(std::move(options)) {
    for (auto& [kind, setup] : tasks) {
      auto slot = std::make_unique<TaskSlot>();
      slot->model = std::move(setup.model);
      slot->sentences = std::move(setup.sentences);
      if (slot->model && slot->model->config.mode != task_mode(kind)) {
        throw ConfigError(to_string(kind) + " needs a " + to_string(task_mode(kind)) + "-mode model, got " +
                          to_string(slot->model->config.mode));
      }
      tasks_.emplace(kind, std::move(slot));
    }
    std::random_device rd;
    id_rng_.seed((static_cast<std::uint64_t>(rd()) << 32) ^ rd());
  }

  const ServiceOptions& options() const { return options_; }

  // -- typed operations ----------------------------------------------------

  std::vector<std::string> list_sentences(TaskKind task) const {
    const TaskSlot* slot = find_slot(task);
    if (!slot || !slot->sentences)
      throw ApiError(404, "task_unavailable", "no sentence list is configured for " + to_string(task));
    return *slot->sentences;
  }

  struct TranslateResult {
    std::string session_id;
    std::string hypothesis;
  };

  TranslateResult translate(TaskKind task, const std::string& source) {
    if (source.empty()) throw ApiError(400, "empty_source", "source must not be empty");
    TaskSlot& slot = model_slot(task);
    std::string hypothesis;
    {
      std::shared_lock lease(slot.lease);
      const TokenIds ids = tokenize(source, slot.model->source_vocab);
      if (ids.size() > ModelConfig::kMaxSourceTokens) {
        throw ApiError(400, "source_too_long",
                       "source has " + std::to_string(ids.size()) + " tokens, limit is " +
                           std::to_string(ModelConfig::kMaxSourceTokens));
      }
      hypothesis = mthd::translate(*slot.model, source, options_.beam_width).text;
    }
    auto session = std::make_shared<Session>();
    session->task = task;
    session->source = source;
    session->current_hypothesis = hypothesis;
    session->created = session->touched = options_.clock();
    {
      std::lock_guard lk(sessions_mutex_);
      purge_expired_locked(session->created);
      do {
        session->id = new_session_id();
      } while (sessions_.count(session->id));
      sessions_.emplace(session->id, session);
    }
    return {session->id, hypothesis};
  }

  std::string correct(const std::string& session_id, const std::string& prefix,
                      const std::optional<std::string>& source = std::nullopt) {
    if (prefix.empty()) throw ApiError(400, "empty_prefix", "prefix must not be empty");
    auto session = find_session(session_id);
    std::lock_guard session_lock(session->lock);
    if (source && *source != session->source)
      throw ApiError(400, "source_mismatch", "source does not match the session's sentence");
    TaskSlot& slot = model_slot(session->task);
    std::string hypothesis;
    {
      std::shared_lock lease(slot.lease);
      hypothesis = mthd::correct(*slot.model, session->source, Feedback{prefix}, options_.beam_width).text;
    }
    session->current_hypothesis = hypothesis;
    session->touched = options_.clock();
    return hypothesis;
  }

  struct ValidateResult {
    bool learned = false;
    std::size_t steps = 0;
    std::optional<double> final_loss;
    std::optional<std::string> error_code;
    std::string error_message;
  };

  ValidateResult validate(const std::string& session_id, const std::string& target, bool learn) {
    if (target.empty()) throw ApiError(400, "empty_target", "target must not be empty");
    std::shared_ptr<Session> session;
    {
      std::lock_guard lk(sessions_mutex_);
      session = find_session_locked(session_id);
      sessions_.erase(session_id);
    }
    std::lock_guard session_lock(session->lock);

    ValidatedSample sample{session->task, session->source, target, options_.timestamp(), learn};
    if (!options_.validated_log.empty()) {
      std::lock_guard lk(log_mutex_);
      append_validated(sample, options_.validated_log);
    }
    ValidateResult result;
    if (!learn) return result;

    TaskSlot& slot = model_slot(session->task);
    std::unique_lock lease(slot.lease);
    try {
      const AdaptationReport report = adapt(*slot.model, sample, options_.adaptation);
      result.learned = true;
      result.steps = report.steps();
      result.final_loss = report.final_loss();
    } catch (const DivergenceError& e) {
      result.error_code = e.code();
      result.error_message = e.what();
    }
    slot.checksum.reset();
    return result;
  }

  Json health() {
    Json tasks = Json::array();
    Json checksums = Json::object();
    for (auto& [kind, slot] : tasks_) {
      if (!slot->model) continue;
      tasks.push_back(to_string(kind));
      std::shared_lock lease(slot->lease);
      std::lock_guard lk(slot->checksum_mutex);
      if (!slot->checksum) slot->checksum = model_checksum(*slot->model);
      checksums[to_string(kind)] = hex64(*slot->checksum);
    }
    const bool all = tasks.size() == 2;
    return {{"status", all ? "ok" : (tasks.empty() ? "unavailable" : "degraded")},
            {"tasks", tasks},
            {"checksums", checksums}};
  }

  /// Runs `f` with exclusive access to a task model (tests, persistence).
  template <typename F>
  decltype(auto) with_model(TaskKind task, F&& f) {
    TaskSlot& slot = model_slot(task);
    std::unique_lock lease(slot.lease);
    slot.checksum.reset();
    return std::forward<F>(f)(*slot.model);
  }

  std::size_t session_count() {
    std::lock_guard lk(sessions_mutex_);
    return sessions_.size();
  }

  // -- wire protocol -------------------------------------------------------

  HttpResponse handle(const HttpRequest& request) {
    HttpResponse response;
    try {
      if (request.method == "OPTIONS") {
        response.status = 204;
      } else {
        response = route(request);
      }
    } catch (const ApiError& e) {
      response = error_response(e.status(), e.code(), e.what());
    } catch (const Json::exception& e) {
      response = error_response(400, "bad_request", std::string("malformed request: ") + e.what());
    } catch (const Error& e) {
      response = error_response(500, e.code(), e.what());
    } catch (const std::exception& e) {
      response = error_response(500, "internal_error", e.what());
    }
    if (response.status != 204) response.headers["Content-Type"] = "application/json; charset=utf-8";
    apply_cors(request, response);
    return response;
  }

  static HttpResponse error_response(int status, const std::string& code, const std::string& message) {
    return {status, Json{{"error", {{"code", code}, {"message", message}}}}.dump(), {}};
  }

 private:
  struct TaskSlot {
    std::optional<Model> model;
    std::optional<std::vector<std::string>> sentences;
    FifoSharedMutex lease;
    std::mutex checksum_mutex;
    std::optional<std::uint64_t> checksum;
  };

  static TaskKind parse_task_or_throw(const std::string& name) {
    auto task = parse_task(name);
    if (!task) throw ApiError(404, "unknown_task", "unknown task '" + name + "'");
    return *task;
  }

  static Json parse_body(const HttpRequest& request) {
    Json body = Json::parse(request.body);
    if (!body.is_object()) throw ApiError(400, "bad_request", "request body must be a JSON object");
    return body;
  }

  static std::string required_string(const Json& body, const char* field) {
    auto it = body.find(field);
    if (it == body.end() || !it->is_string())
      throw ApiError(400, "bad_request", std::string("field '") + field + "' must be a string");
    return it->get<std::string>();
  }

  HttpResponse route(const HttpRequest& request) {
    const std::string& path = request.path;
    const bool get = request.method == "GET";
    const bool post = request.method == "POST";
    if (path == "/api/health" && get) return {200, health().dump(), {}};
    if (path == "/api/sentences" && get) {
      auto it = request.query.find("task");
      if (it == request.query.end()) throw ApiError(400, "bad_request", "query parameter 'task' is required");
      return {200, Json{{"sentences", list_sentences(parse_task_or_throw(it->second))}}.dump(), {}};
    }
    if (path == "/api/translate" && post) {
      const Json body = parse_body(request);
      const TaskKind task = parse_task_or_throw(required_string(body, "task"));
      auto result = translate(task, required_string(body, "source"));
      return {200, Json{{"session_id", result.session_id}, {"hypothesis", result.hypothesis}}.dump(), {}};
    }
    if (path == "/api/correct" && post) {
      const Json body = parse_body(request);
      std::optional<std::string> source;
      if (body.contains("source")) source = required_string(body, "source");
      const std::string session_id = required_string(body, "session_id");
      return {200, Json{{"hypothesis", correct(session_id, required_string(body, "prefix"), source)}}.dump(), {}};
    }
    if (path == "/api/validate" && post) {
      const Json body = parse_body(request);
      bool learn = false;
      if (body.contains("learn")) {
        if (!body["learn"].is_boolean()) throw ApiError(400, "bad_request", "field 'learn' must be a boolean");
        learn = body["learn"].get<bool>();
      }
      const std::string session_id = required_string(body, "session_id");
      auto result = validate(session_id, required_string(body, "target"), learn);
      Json out{{"learned", result.learned},
               {"steps", result.steps},
               {"final_loss", result.final_loss ? Json(*result.final_loss) : Json(nullptr)}};
      if (result.error_code) {
        out["error"] = {{"code", *result.error_code}, {"message", result.error_message}};
        return {500, out.dump(), {}};
      }
      return {200, out.dump(), {}};
    }
    if (path.starts_with("/api/")) {
      const bool known = path == "/api/health" || path == "/api/sentences" || path == "/api/translate" ||
                         path == "/api/correct" || path == "/api/validate";
      if (known) throw ApiError(405, "method_not_allowed", request.method + " is not supported on " + path);
    }
    throw ApiError(404, "not_found", "no endpoint at " + path);
  }

  void apply_cors(const HttpRequest& request, HttpResponse& response) const {
    if (request.origin.empty()) return;
    const auto& allow = options_.cors_allowlist;
    const bool wildcard = std::find(allow.begin(), allow.end(), "*") != allow.end();
    if (!wildcard && std::find(allow.begin(), allow.end(), request.origin) == allow.end()) return;
    response.headers["Access-Control-Allow-Origin"] = request.origin;
    response.headers["Vary"] = "Origin";
    response.headers["Access-Control-Allow-Methods"] = "GET, POST, OPTIONS";
    response.headers["Access-Control-Allow-Headers"] = "Content-Type";
  }

  const TaskSlot* find_slot(TaskKind task) const {
    auto it = tasks_.find(task);
    return it == tasks_.end() ? nullptr : it->second.get();
  }

  TaskSlot& model_slot(TaskKind task) {
    auto it = tasks_.find(task);
    if (it == tasks_.end() || !it->second->model)
      throw ApiError(404, "task_unavailable", "no model is loaded for " + to_string(task));
    return *it->second;
  }

  std::shared_ptr<Session> find_session(const std::string& id) {
    std::lock_guard lk(sessions_mutex_);
    return find_session_locked(id);
  }

  std::shared_ptr<Session> find_session_locked(const std::string& id) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ApiError(404, "session_not_found", "unknown or expired session '" + id + "'");
    if (options_.clock() - it->second->touched > options_.session_ttl) {
      sessions_.erase(it);
      throw ApiError(404, "session_not_found", "unknown or expired session '" + id + "'");
    }
    return it->second;
  }

  void purge_expired_locked(Clock::time_point now) {
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if (now - it->second->touched > options_.session_ttl)
        it = sessions_.erase(it);
      else
        ++it;
    }
  }

  std::string new_session_id() {
    char buf[33];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(id_rng_()),
                  static_cast<unsigned long long>(id_rng_()));
    return buf;
  }

  ServiceOptions options_;
  std::map<TaskKind, std::unique_ptr<TaskSlot>> tasks_;
  std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex log_mutex_;
  std::mt19937_64 id_rng_;
};

// ---------------------------------------------------------------------------
// Configuration

struct TaskFiles {
  std::string checkpoint;
  std::string sentences;
};

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::chrono::seconds session_ttl{30 * 60};
  std::size_t beam_width = 6;
  AdaptationConfig adaptation;
  std::string validated_log = "validated.jsonl";
  bool replay_log_on_start = false;
  std::vector<std::string> cors_allowlist;
  std::string static_dir;
  std::map<TaskKind, TaskFiles> tasks;
};

/// Parses the JSON config. Relative paths resolve against `base_dir`.
inline ServerConfig parse_server_config(const std::string& text, const std::filesystem::path& base_dir = ".") {
  ServerConfig cfg;
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  auto resolve = [&](const std::string& p) -> std::string {
    if (p.empty()) return p;
    std::filesystem::path path(p);
    return path.is_absolute() ? p : (base_dir / path).lexically_normal().string();
  };
  try {
    cfg.host = j.value("host", cfg.host);
    cfg.port = j.value("port", cfg.port);
    cfg.session_ttl = std::chrono::seconds(j.value("session_ttl_seconds", 1800));
    cfg.beam_width = j.value("beam_width", cfg.beam_width);
    if (j.contains("adaptation")) {
      const auto& a = j["adaptation"];
      cfg.adaptation.steps = a.value("steps", cfg.adaptation.steps);
      cfg.adaptation.learning_rate = a.value("learning_rate", cfg.adaptation.learning_rate);
    }
    cfg.validated_log = resolve(j.value("validated_log", cfg.validated_log));
    cfg.replay_log_on_start = j.value("replay_log_on_start", false);
    cfg.cors_allowlist = j.value("cors_allowlist", std::vector<std::string>{});
    cfg.static_dir = resolve(j.value("static_dir", std::string{}));
    if (j.contains("tasks")) {
      for (const auto& [name, files] : j["tasks"].items()) {
        auto task = parse_task(name);
        if (!task) throw ConfigError("unknown task '" + name + "' in config");
        cfg.tasks[*task] = {resolve(files.value("checkpoint", std::string{})),
                            resolve(files.value("sentences", std::string{}))};
      }
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (cfg.beam_width == 0) throw ConfigError("beam_width must be at least 1");
  if (!(cfg.adaptation.learning_rate > 0)) throw ConfigError("adaptation.learning_rate must be positive");
  return cfg;
}

inline ServerConfig load_server_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_server_config(ss.str(), std::filesystem::path(path).parent_path());
}

/// MTHD_CONFIG, when set, wins over the path given on the command line.
inline std::string resolve_config_path(const std::string& cli_path) {
  if (const char* env = std::getenv("MTHD_CONFIG"); env && *env) return env;
  return cli_path;
}

inline std::unique_ptr<Service> make_service(const ServerConfig& cfg) {
  std::map<TaskKind, TaskSetup> tasks;
  for (const auto& [kind, files] : cfg.tasks) {
    TaskSetup setup;
    if (!files.checkpoint.empty()) setup.model = load_checkpoint(files.checkpoint);
    if (!files.sentences.empty()) setup.sentences = read_lines(files.sentences);
    if (setup.sentences) {
      auto& s = *setup.sentences;
      s.erase(std::remove(s.begin(), s.end(), std::string{}), s.end());
    }
    if (setup.model && cfg.replay_log_on_start && !cfg.validated_log.empty())
      replay_validated(*setup.model, kind, read_validated(cfg.validated_log), cfg.adaptation);
    tasks.emplace(kind, std::move(setup));
  }
  ServiceOptions opts;
  opts.session_ttl = cfg.session_ttl;
  opts.beam_width = cfg.beam_width;
  opts.adaptation = cfg.adaptation;
  opts.validated_log = cfg.validated_log;
  opts.cors_allowlist = cfg.cors_allowlist;
  return std::make_unique<Service>(std::move(opts), std::move(tasks));
}

}  // namespace mthd::server
