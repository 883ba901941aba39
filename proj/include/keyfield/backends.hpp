#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "keyfield/grid.hpp"
#include "keyfield/image.hpp"
#include "keyfield/mask_engine.hpp"

namespace keyfield {

// ---------------------------------------------------------------------------
// Wire types
// ---------------------------------------------------------------------------

enum class Role { system, user, assistant };

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);

struct ChatMessage {
  Role role = Role::user;
  std::string content;
  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

using ChatMessages = std::vector<ChatMessage>;

/// One request/response round with a chat model.
struct ChatExchange {
  ChatMessages messages;
  std::string reply;
  double latency_ms = 0.0;
  int retries = 0;
};

// Throws Error(invalid_input) unless messages are nonempty and start with a
// system message.
void validate_messages(const ChatMessages& messages);

// Collapses whitespace runs to one space and trims both ends.
std::string normalize_whitespace(std::string_view text);

// Content hash used to key recorded transcripts. Insensitive to whitespace
// layout, sensitive to every other byte and to message roles/order.
std::string request_hash(const ChatMessages& messages);

nlohmann::json messages_to_json(const ChatMessages& messages);
ChatMessages messages_from_json(const nlohmann::json& j);

struct CaptionResult {
  std::string text;
  std::optional<double> confidence;
};

// Newlines folded to spaces and the result trimmed.
std::string single_line(std::string_view text);

enum class BackendStatus { ok, unconfigured, down };
std::string_view to_string(BackendStatus status);

// ---------------------------------------------------------------------------
// Adapter interfaces
// ---------------------------------------------------------------------------

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  // Segment ids are assigned 1..N in returned order.
  virtual std::vector<RawSegment> segment(std::span<const std::uint8_t> image) = 0;
  virtual BackendStatus health() = 0;
};

class Captioner {
 public:
  virtual ~Captioner() = default;
  // Captions the bbox crop, or the whole image when `region` is empty.
  virtual CaptionResult caption(std::span<const std::uint8_t> image,
                                const std::optional<BBox>& region) = 0;
  virtual BackendStatus health() = 0;
};

class ChatModel {
 public:
  virtual ~ChatModel() = default;
  // Returns the raw reply text verbatim.
  virtual ChatExchange complete(const ChatMessages& messages) = 0;
  virtual BackendStatus health() = 0;
};

struct Backends {
  std::shared_ptr<Segmenter> segmenter;
  std::shared_ptr<Captioner> captioner;
  std::shared_ptr<ChatModel> chat;
};

// ---------------------------------------------------------------------------
// Fixture-backed mocks
// ---------------------------------------------------------------------------

struct Transcript {
  std::string request_hash;
  ChatMessages messages;
  std::string reply;
};

nlohmann::json transcripts_to_json(std::span<const Transcript> transcripts);
std::vector<Transcript> transcripts_from_json(const nlohmann::json& j);

// "full" for the whole image, otherwise "x1,y1,x2,y2".
std::string region_key(const std::optional<BBox>& region);

struct FixtureCase {
  std::string name;
  std::string image_digest;
  int width = 0;
  int height = 0;
  Grid<std::uint8_t> segments;  // label map, 0 = unsegmented
  std::map<std::string, std::string> captions;
};

/// Immutable tables loaded from a fixture directory:
///   <dir>/<case>/image.png, segments.png, captions.json, transcripts.json
class FixtureStore {
 public:
  static std::shared_ptr<const FixtureStore> load(const std::string& dir);

  const FixtureCase* find_image(const std::string& digest) const;
  const std::string* find_reply(const std::string& hash) const;
  const std::vector<FixtureCase>& cases() const noexcept { return cases_; }
  std::size_t transcript_count() const noexcept { return replies_.size(); }

 private:
  std::vector<FixtureCase> cases_;
  std::map<std::string, std::size_t> by_digest_;
  std::map<std::string, std::string> replies_;
};

class MockSegmenter final : public Segmenter {
 public:
  explicit MockSegmenter(std::shared_ptr<const FixtureStore> store) : store_(std::move(store)) {}
  std::vector<RawSegment> segment(std::span<const std::uint8_t> image) override;
  BackendStatus health() override { return BackendStatus::ok; }

 private:
  std::shared_ptr<const FixtureStore> store_;
};

class MockCaptioner final : public Captioner {
 public:
  explicit MockCaptioner(std::shared_ptr<const FixtureStore> store) : store_(std::move(store)) {}
  CaptionResult caption(std::span<const std::uint8_t> image,
                        const std::optional<BBox>& region) override;
  BackendStatus health() override { return BackendStatus::ok; }

 private:
  std::shared_ptr<const FixtureStore> store_;
};

class MockChat final : public ChatModel {
 public:
  explicit MockChat(std::shared_ptr<const FixtureStore> store) : store_(std::move(store)) {}
  ChatExchange complete(const ChatMessages& messages) override;
  BackendStatus health() override { return BackendStatus::ok; }

 private:
  std::shared_ptr<const FixtureStore> store_;
};

Backends make_mock_backends(const std::string& fixture_dir);

/// Decorator capturing every successful exchange in the transcript format
/// the mock chat consumes.
class RecordingChat final : public ChatModel {
 public:
  explicit RecordingChat(std::shared_ptr<ChatModel> inner) : inner_(std::move(inner)) {}
  ChatExchange complete(const ChatMessages& messages) override;
  BackendStatus health() override { return inner_->health(); }
  std::vector<Transcript> transcripts() const;

 private:
  std::shared_ptr<ChatModel> inner_;
  mutable std::mutex mutex_;
  std::vector<Transcript> recorded_;
};

// ---------------------------------------------------------------------------
// Live clients
// ---------------------------------------------------------------------------

struct RetryPolicy {
  int max_retries = 2;
  std::chrono::milliseconds base_delay{250};
};

struct LiveConfig {
  std::string chat_endpoint;
  std::string chat_api_key;
  std::string chat_model = "gpt-4";
  std::string caption_endpoint;
  std::string caption_api_key;
  std::string segmenter_endpoint;
  int max_in_flight = 4;
  std::chrono::milliseconds timeout{60000};
  RetryPolicy retry;
};

enum class BackendMode { live, mock };

struct BackendConfig {
  BackendMode mode = BackendMode::mock;
  std::string fixture_dir;
  LiveConfig live;

  // Reads BACKEND_MODE, FIXTURE_DIR, CHAT_ENDPOINT, CHAT_API_KEY, CHAT_MODEL,
  // CAPTION_ENDPOINT, CAPTION_API_KEY, SEGMENTER_ENDPOINT.
  static BackendConfig from_env();
};

BackendMode parse_backend_mode(std::string_view text);

Backends make_live_backends(const LiveConfig& config);
Backends make_backends(const BackendConfig& config);

}  // namespace keyfield
