#include "keyfield/service.hpp"

#include <cstdlib>
#include <filesystem>
#include <map>
#include <regex>

#include <httplib.h>
#include <openssl/rand.h>

namespace keyfield {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : std::move(fallback);
}

const char* const kImageNames[] = {"image.png", "image.jpg"};

}  // namespace

ServiceConfig ServiceConfig::from_env() {
  ServiceConfig c;
  try {
    c.port = std::stoi(env_or("PORT", std::to_string(c.port)));
    const double mb = std::stod(env_or("MAX_UPLOAD_MB", "10"));
    if (mb <= 0) throw std::invalid_argument("MAX_UPLOAD_MB");
    c.max_upload_bytes = static_cast<std::size_t>(mb * 1024.0 * 1024.0);
  } catch (const std::exception&) {
    throw Error(ErrorCode::invalid_input, "PORT and MAX_UPLOAD_MB must be positive numbers");
  }
  c.session_dir = env_or("SESSION_DIR", c.session_dir);
  c.cors_origin = env_or("CORS_ORIGIN", c.cors_origin);
  return c;
}

std::string new_session_id() {
  std::uint8_t raw[16];
  if (RAND_bytes(raw, sizeof raw) != 1) {
    throw Error(ErrorCode::internal, "random number generator unavailable");
  }
  std::string id = base64_encode(raw);
  for (char& ch : id) {
    if (ch == '+') ch = '-';
    if (ch == '/') ch = '_';
  }
  while (!id.empty() && id.back() == '=') id.pop_back();
  return id;
}

bool is_session_id(std::string_view text) {
  static const std::regex pattern("[A-Za-z0-9_-]{22}");
  return std::regex_match(text.begin(), text.end(), pattern);
}

// ---------------------------------------------------------------------------
// SessionStore
// ---------------------------------------------------------------------------

SessionStore::SessionStore(std::string root) : root_(std::move(root)) {
  fs::create_directories(root_);
}

std::string SessionStore::dir(const std::string& session_id) const {
  if (!is_session_id(session_id)) {
    throw Error(ErrorCode::not_found, "unknown session " + session_id);
  }
  return (fs::path(root_) / session_id).string();
}

bool SessionStore::exists(const std::string& session_id) const {
  return is_session_id(session_id) &&
         fs::exists(fs::path(root_) / session_id / "session.json");
}

void SessionStore::save(const Session& session) const {
  const fs::path base = dir(session.session_id);
  fs::create_directories(base / "overlays");
  const char* image_name =
      sniff_format(session.image) == ImageFormat::jpeg ? kImageNames[1] : kImageNames[0];
  if (!fs::exists(base / image_name)) write_file_atomic((base / image_name).string(), session.image);
  for (const auto& record : session.history) {
    if (record.result.annotated_image.empty()) continue;
    const fs::path overlay = base / "overlays" / (record.query_id + ".png");
    if (!fs::exists(overlay)) write_file_atomic(overlay.string(), record.result.annotated_image);
  }
  write_file_atomic((base / "session.json").string(), session_to_json(session).dump(2) + "\n");
}

Session SessionStore::load(const std::string& session_id) const {
  if (!exists(session_id)) throw Error(ErrorCode::not_found, "unknown session " + session_id);
  const fs::path base = dir(session_id);
  Bytes image;
  for (const char* name : kImageNames) {
    if (fs::exists(base / name)) {
      image = read_file((base / name).string());
      break;
    }
  }
  const Bytes meta = read_file((base / "session.json").string());
  try {
    return session_from_json(json::parse(meta.begin(), meta.end()), std::move(image));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::internal, "corrupt session archive: " + std::string(e.what()));
  }
}

std::optional<Bytes> SessionStore::overlay(const std::string& session_id,
                                           const std::string& query_id) const {
  static const std::regex qid_pattern("q[0-9]+");
  if (!exists(session_id) || !std::regex_match(query_id, qid_pattern)) return std::nullopt;
  const fs::path path = fs::path(dir(session_id)) / "overlays" / (query_id + ".png");
  if (!fs::exists(path)) return std::nullopt;
  return read_file(path.string());
}

// ---------------------------------------------------------------------------
// JSON views
// ---------------------------------------------------------------------------

json api_error_json(const Error& error) {
  return {{"code", to_string(error.code())},
          {"message", error.what()},
          {"stage", error.stage().empty() ? json(nullptr) : json(error.stage())}};
}

json query_json(const Session& session, const QueryRecord& record) {
  const bool highlight = record.result.has_highlight();
  return {{"query_id", record.query_id},
          {"question", record.question},
          {"outcome", to_string(record.outcome)},
          {"answer_text", record.result.answer_text},
          {"has_highlight", highlight},
          {"overlay_url", highlight ? json("/sessions/" + session.session_id + "/queries/" +
                                           record.query_id + "/overlay")
                                    : json(nullptr)},
          {"segments", record.result.selected_segments},
          {"target_object",
           record.target_object ? json(*record.target_object) : json(nullptr)},
          {"diagnostic", record.diagnostic}};
}

json session_view_json(const Session& session) {
  json objects = json::array();
  for (const auto& o : session.objects) objects.push_back(object_summary_json(o));
  json queries = json::array();
  for (const auto& r : session.history) queries.push_back(query_json(session, r));
  return {{"session_id", session.session_id},
          {"scene_caption", session.scene_caption},
          {"image", {{"width", session.width}, {"height", session.height}}},
          {"objects", objects},
          {"queries", queries}};
}

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

struct Service::Impl {
  httplib::Server server;
  std::mutex locks_mutex;
  std::map<std::string, std::shared_ptr<std::mutex>> locks;

  std::shared_ptr<std::mutex> lock_for(const std::string& id) {
    std::lock_guard guard(locks_mutex);
    auto& slot = locks[id];
    if (!slot) slot = std::make_shared<std::mutex>();
    return slot;
  }
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const Error& error) {
  send_json(res, http_status(error.code()), api_error_json(error));
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const Error& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send_error(res, Error(ErrorCode::internal, e.what()));
    }
  };
}

}  // namespace

Service::Service(Pipeline pipeline, ServiceConfig config)
    : pipeline_(std::move(pipeline)),
      config_(std::move(config)),
      store_(config_.session_dir),
      impl_(std::make_unique<Impl>()) {
  auto& srv = impl_->server;
  // Oversized uploads are rejected in the handler so the body is an ApiError;
  // the transport cap only bounds memory.
  srv.set_payload_max_length(config_.max_upload_bytes * 2 + 1024 * 1024);

  const std::string origin = config_.cors_origin;
  srv.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
  });
  srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    const ErrorCode code = res.status == 404 ? ErrorCode::not_found
                           : res.status == 413 ? ErrorCode::invalid_input
                           : res.status < 500 ? ErrorCode::invalid_input
                                              : ErrorCode::internal;
    const std::string message = res.status == 404 ? "no route for " + req.method + " " + req.path
                                                   : "request rejected";
    res.set_content(api_error_json(Error(code, message)).dump(), "application/json");
    return httplib::Server::HandlerResponse::Handled;
  });

  srv.Get("/healthz", guarded([this](const httplib::Request&, httplib::Response& res) {
    const auto& b = pipeline_.backends();
    const BackendStatus states[] = {b.segmenter->health(), b.captioner->health(),
                                    b.chat->health()};
    bool all_ok = true;
    for (BackendStatus s : states) all_ok = all_ok && s == BackendStatus::ok;
    send_json(res, 200,
              {{"status", all_ok ? "ok" : "degraded"},
               {"backends", {{"segmenter", to_string(states[0])},
                             {"captioner", to_string(states[1])},
                             {"chat", to_string(states[2])}}}});
  }));

  srv.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
    std::string upload;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) {
        throw Error(ErrorCode::invalid_input, "multipart field \"image\" is required");
      }
      upload = req.get_file_value("image").content;
    } else {
      upload = req.body;
    }
    if (upload.empty()) throw Error(ErrorCode::invalid_input, "uploaded image is empty");
    if (upload.size() > config_.max_upload_bytes) {
      throw Error(ErrorCode::invalid_input, "uploaded image exceeds the size limit");
    }
    const Bytes image(upload.begin(), upload.end());
    Session session = pipeline_.detect_objects(image);
    session.session_id = new_session_id();
    store_.save(session);
    json objects = json::array();
    for (const auto& o : session.objects) objects.push_back(object_summary_json(o));
    send_json(res, 201,
              {{"session_id", session.session_id},
               {"scene_caption", session.scene_caption},
               {"objects", objects}});
  }));

  srv.Get(R"(/sessions/([^/]+))",
          guarded([this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, session_view_json(store_.load(req.matches[1])));
          }));

  srv.Post(R"(/sessions/([^/]+)/queries)",
           guarded([this](const httplib::Request& req, httplib::Response& res) {
             const std::string id = req.matches[1];
             if (!store_.exists(id)) throw Error(ErrorCode::not_found, "unknown session " + id);
             json body;
             try {
               body = json::parse(req.body);
             } catch (const json::exception&) {
               throw Error(ErrorCode::invalid_input, "request body must be JSON");
             }
             if (!body.is_object() || !body.contains("question") ||
                 !body["question"].is_string()) {
               throw Error(ErrorCode::invalid_input, "\"question\" must be a string");
             }
             const std::string question = body["question"].get<std::string>();

             auto lock = impl_->lock_for(id);
             std::lock_guard guard(*lock);
             Session session = store_.load(id);
             const QueryRecord record = pipeline_.answer_query(session, question);
             store_.save(session);

             json view = query_json(session, record);
             const std::string stage = record.stage1 ? "stage2" : "stage1";
             if (record.outcome == QueryOutcome::backend_failure) {
               send_error(res, Error(ErrorCode::backend_unavailable, record.diagnostic, stage));
               return;
             }
             if (record.outcome == QueryOutcome::parse_failure) {
               view.update(api_error_json(Error(ErrorCode::parse_failure, record.diagnostic, stage)));
               send_json(res, 422, view);
               return;
             }
             send_json(res, 200, view);
           }));

  srv.Get(R"(/sessions/([^/]+)/queries/([^/]+))",
          guarded([this](const httplib::Request& req, httplib::Response& res) {
            const Session session = store_.load(req.matches[1]);
            const std::string qid = req.matches[2];
            for (const auto& r : session.history) {
              if (r.query_id == qid) {
                send_json(res, 200, query_json(session, r));
                return;
              }
            }
            throw Error(ErrorCode::not_found, "unknown query " + qid);
          }));

  srv.Get(R"(/sessions/([^/]+)/queries/([^/]+)/overlay)",
          guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            if (!store_.exists(id)) throw Error(ErrorCode::not_found, "unknown session " + id);
            const auto png = store_.overlay(id, req.matches[2]);
            if (!png) {
              throw Error(ErrorCode::not_found, "no overlay for query " + req.matches[2].str());
            }
            res.status = 200;
            res.set_content(std::string(png->begin(), png->end()), "image/png");
          }));
}

Service::~Service() { stop(); }

bool Service::listen() { return impl_->server.listen(config_.host, config_.port); }

int Service::bind_to_any_port(const std::string& host) {
  return impl_->server.bind_to_any_port(host);
}

bool Service::listen_after_bind() { return impl_->server.listen_after_bind(); }

void Service::wait_until_ready() const { impl_->server.wait_until_ready(); }

void Service::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace keyfield
