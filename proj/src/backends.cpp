#include "keyfield/backends.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <set>

#include "keyfield/error.hpp"

namespace keyfield {

std::string_view to_string(Role role) {
  switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "user";
}

Role role_from_string(std::string_view name) {
  if (name == "system") return Role::system;
  if (name == "user") return Role::user;
  if (name == "assistant") return Role::assistant;
  throw Error(ErrorCode::invalid_input, "unknown chat role '" + std::string(name) + "'");
}

void validate_messages(const ChatMessages& messages) {
  if (messages.empty()) throw Error(ErrorCode::invalid_input, "chat request has no messages");
  if (messages.front().role != Role::system) {
    throw Error(ErrorCode::invalid_input, "first chat message must have the system role");
  }
}

std::string normalize_whitespace(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (const char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

std::string request_hash(const ChatMessages& messages) {
  std::string canonical;
  for (const auto& m : messages) {
    canonical += to_string(m.role);
    canonical += '\x1f';
    canonical += normalize_whitespace(m.content);
    canonical += '\x1e';
  }
  return sha256_hex(canonical);
}

nlohmann::json messages_to_json(const ChatMessages& messages) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : messages) {
    arr.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  }
  return arr;
}

ChatMessages messages_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::invalid_input, "messages must be an array");
  ChatMessages out;
  for (const auto& m : j) {
    out.push_back({role_from_string(m.at("role").get<std::string>()),
                   m.at("content").get<std::string>()});
  }
  return out;
}

std::string single_line(std::string_view text) {
  std::string out(text);
  std::replace(out.begin(), out.end(), '\n', ' ');
  std::replace(out.begin(), out.end(), '\r', ' ');
  const auto b = out.find_first_not_of(' ');
  if (b == std::string::npos) return {};
  const auto e = out.find_last_not_of(' ');
  return out.substr(b, e - b + 1);
}

std::string_view to_string(BackendStatus status) {
  switch (status) {
    case BackendStatus::ok: return "ok";
    case BackendStatus::unconfigured: return "unconfigured";
    case BackendStatus::down: return "down";
  }
  return "down";
}

// ---------------------------------------------------------------------------
// Transcripts and fixtures
// ---------------------------------------------------------------------------

nlohmann::json transcripts_to_json(std::span<const Transcript> transcripts) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : transcripts) {
    arr.push_back({{"request_hash", t.request_hash},
                   {"messages", messages_to_json(t.messages)},
                   {"reply", t.reply}});
  }
  return arr;
}

std::vector<Transcript> transcripts_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::invalid_input, "transcripts must be an array");
  std::vector<Transcript> out;
  for (const auto& t : j) {
    out.push_back({t.at("request_hash").get<std::string>(), messages_from_json(t.at("messages")),
                   t.at("reply").get<std::string>()});
  }
  return out;
}

std::string region_key(const std::optional<BBox>& region) {
  if (!region) return "full";
  return std::to_string(region->x1) + "," + std::to_string(region->y1) + "," +
         std::to_string(region->x2) + "," + std::to_string(region->y2);
}

namespace {

nlohmann::json read_json_file(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path.string());
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_input, "malformed fixture file " + path.string() + ": " + e.what());
  }
}

}  // namespace

std::shared_ptr<const FixtureStore> FixtureStore::load(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) {
    throw Error(ErrorCode::invalid_input, "fixture directory not found: " + dir);
  }
  std::vector<fs::path> case_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "image.png")) {
      case_dirs.push_back(entry.path());
    }
  }
  std::sort(case_dirs.begin(), case_dirs.end());

  auto store = std::make_shared<FixtureStore>();
  for (const auto& path : case_dirs) {
    FixtureCase fc;
    fc.name = path.filename().string();
    const Bytes image = read_file((path / "image.png").string());
    const RgbImage decoded = decode_image(image);
    fc.image_digest = sha256_hex(image);
    fc.width = decoded.cols();
    fc.height = decoded.rows();
    if (fs::exists(path / "segments.png")) {
      fc.segments = decode_gray_png(read_file((path / "segments.png").string()));
      if (fc.segments.rows() != fc.height || fc.segments.cols() != fc.width) {
        throw Error(ErrorCode::invalid_input,
                    "fixture " + fc.name + ": segments.png does not match image dimensions");
      }
    } else {
      fc.segments = Grid<std::uint8_t>(fc.height, fc.width, 0);
    }
    if (fs::exists(path / "captions.json")) {
      fc.captions = read_json_file(path / "captions.json").get<std::map<std::string, std::string>>();
    }
    if (fs::exists(path / "transcripts.json")) {
      for (auto& t : transcripts_from_json(read_json_file(path / "transcripts.json"))) {
        const std::string actual = request_hash(t.messages);
        if (actual != t.request_hash) {
          throw Error(ErrorCode::invalid_input,
                      "fixture " + fc.name + ": transcript hash " + t.request_hash +
                          " does not match its messages (" + actual +
                          "); the prompt changed, regenerate the fixture");
        }
        const auto [it, inserted] = store->replies_.emplace(t.request_hash, t.reply);
        if (!inserted && it->second != t.reply) {
          throw Error(ErrorCode::invalid_input,
                      "fixture " + fc.name + ": conflicting replies for request " + t.request_hash);
        }
      }
    }
    if (store->by_digest_.contains(fc.image_digest)) {
      throw Error(ErrorCode::invalid_input, "fixture " + fc.name + " duplicates another image");
    }
    store->by_digest_.emplace(fc.image_digest, store->cases_.size());
    store->cases_.push_back(std::move(fc));
  }
  return store;
}

const FixtureCase* FixtureStore::find_image(const std::string& digest) const {
  const auto it = by_digest_.find(digest);
  return it == by_digest_.end() ? nullptr : &cases_[it->second];
}

const std::string* FixtureStore::find_reply(const std::string& hash) const {
  const auto it = replies_.find(hash);
  return it == replies_.end() ? nullptr : &it->second;
}

std::vector<RawSegment> MockSegmenter::segment(std::span<const std::uint8_t> image) {
  const RgbImage decoded = decode_image(image);
  const std::string digest = sha256_hex(image);
  const FixtureCase* fc = store_->find_image(digest);
  if (!fc) {
    throw Error(ErrorCode::backend_unavailable,
                "mock segmenter has no fixture for image " + digest.substr(0, 16));
  }
  if (fc->width != decoded.cols() || fc->height != decoded.rows()) {
    throw Error(ErrorCode::internal, "fixture dimensions disagree with the image");
  }
  std::set<int> labels;
  for (const auto v : fc->segments.data()) {
    if (v != 0) labels.insert(v);
  }
  std::vector<RawSegment> out;
  for (const int label : labels) {
    Mask m(fc->height, fc->width, 0);
    const auto src = fc->segments.data();
    const auto dst = m.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] == label ? 1 : 0;
    out.push_back(make_segment(static_cast<int>(out.size()) + 1, std::move(m)));
  }
  return out;
}

CaptionResult MockCaptioner::caption(std::span<const std::uint8_t> image,
                                     const std::optional<BBox>& region) {
  const RgbImage decoded = decode_image(image);
  if (region && (!region->valid() || region->x1 < 0 || region->y1 < 0 ||
                 region->x2 >= decoded.cols() || region->y2 >= decoded.rows())) {
    throw Error(ErrorCode::invalid_input, "caption region outside image bounds");
  }
  const std::string digest = sha256_hex(image);
  const FixtureCase* fc = store_->find_image(digest);
  if (!fc) {
    throw Error(ErrorCode::backend_unavailable,
                "mock captioner has no fixture for image " + digest.substr(0, 16));
  }
  const std::string key = region_key(region);
  const auto it = fc->captions.find(key);
  if (it == fc->captions.end()) {
    throw Error(ErrorCode::backend_unavailable,
                "mock captioner has no caption for region " + key + " in fixture " + fc->name);
  }
  return {single_line(it->second), std::nullopt};
}

ChatExchange MockChat::complete(const ChatMessages& messages) {
  validate_messages(messages);
  const std::string hash = request_hash(messages);
  const std::string* reply = store_->find_reply(hash);
  if (!reply) {
    throw Error(ErrorCode::backend_unavailable,
                "mock chat has no recorded transcript for request " + hash);
  }
  return {messages, *reply, 0.0, 0};
}

Backends make_mock_backends(const std::string& fixture_dir) {
  auto store = FixtureStore::load(fixture_dir);
  return {std::make_shared<MockSegmenter>(store), std::make_shared<MockCaptioner>(store),
          std::make_shared<MockChat>(store)};
}

ChatExchange RecordingChat::complete(const ChatMessages& messages) {
  ChatExchange exchange = inner_->complete(messages);
  std::lock_guard lock(mutex_);
  recorded_.push_back({request_hash(messages), messages, exchange.reply});
  return exchange;
}

std::vector<Transcript> RecordingChat::transcripts() const {
  std::lock_guard lock(mutex_);
  return recorded_;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

BackendMode parse_backend_mode(std::string_view text) {
  if (text == "mock") return BackendMode::mock;
  if (text == "live") return BackendMode::live;
  throw Error(ErrorCode::invalid_input,
              "backend mode must be 'live' or 'mock', got '" + std::string(text) + "'");
}

namespace {
std::string env_or(const char* name, std::string fallback = {}) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::move(fallback);
}
}  // namespace

BackendConfig BackendConfig::from_env() {
  BackendConfig cfg;
  cfg.mode = parse_backend_mode(env_or("BACKEND_MODE", "mock"));
  cfg.fixture_dir = env_or("FIXTURE_DIR");
  cfg.live.chat_endpoint = env_or("CHAT_ENDPOINT");
  cfg.live.chat_api_key = env_or("CHAT_API_KEY");
  cfg.live.chat_model = env_or("CHAT_MODEL", cfg.live.chat_model);
  cfg.live.caption_endpoint = env_or("CAPTION_ENDPOINT");
  cfg.live.caption_api_key = env_or("CAPTION_API_KEY");
  cfg.live.segmenter_endpoint = env_or("SEGMENTER_ENDPOINT");
  return cfg;
}

Backends make_backends(const BackendConfig& config) {
  if (config.mode == BackendMode::mock) {
    if (config.fixture_dir.empty()) {
      throw Error(ErrorCode::invalid_input, "mock backends require a fixture directory");
    }
    return make_mock_backends(config.fixture_dir);
  }
  return make_live_backends(config.live);
}

}  // namespace keyfield
