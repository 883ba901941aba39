#pragma once

#include <cstddef>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "keyfield/error.hpp"
#include "keyfield/pipeline.hpp"

namespace keyfield {

struct ServiceConfig {
  std::string host = "0.0.0.0";
  int port = 8080;
  std::string session_dir = "sessions";
  std::size_t max_upload_bytes = 10u * 1024u * 1024u;
  std::string cors_origin = "*";

  // Reads PORT, SESSION_DIR, MAX_UPLOAD_MB and CORS_ORIGIN.
  static ServiceConfig from_env();
};

// 128 random bits, URL-safe base64 without padding (22 characters).
std::string new_session_id();
bool is_session_id(std::string_view text);

/// On-disk store: <root>/<session_id>/session.json, image.<ext>,
/// overlays/<query_id>.png. Every file is written via write-rename.
class SessionStore {
 public:
  explicit SessionStore(std::string root);

  // Blobs first, session.json last, so a reader never sees a record whose
  // overlay is missing.
  void save(const Session& session) const;
  // Throws Error(not_found) for unknown ids.
  Session load(const std::string& session_id) const;
  bool exists(const std::string& session_id) const;
  std::optional<Bytes> overlay(const std::string& session_id, const std::string& query_id) const;

  const std::string& root() const noexcept { return root_; }

 private:
  std::string dir(const std::string& session_id) const;
  std::string root_;
};

nlohmann::json api_error_json(const Error& error);
nlohmann::json query_json(const Session& session, const QueryRecord& record);
nlohmann::json session_view_json(const Session& session);

/// HTTP front end. Handlers run concurrently; queries against one session
/// are serialized by a per-session mutex.
class Service {
 public:
  Service(Pipeline pipeline, ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Blocks until stop() is called. Returns false when binding fails.
  bool listen();
  // Binds an ephemeral port on `host` and returns it; pair with
  // listen_after_bind().
  int bind_to_any_port(const std::string& host = "127.0.0.1");
  bool listen_after_bind();
  void wait_until_ready() const;
  void stop();

  const ServiceConfig& config() const noexcept { return config_; }

 private:
  struct Impl;
  Pipeline pipeline_;
  ServiceConfig config_;
  SessionStore store_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace keyfield
