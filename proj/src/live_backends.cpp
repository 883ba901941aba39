// HTTP clients for the segmenter service, the caption service and a
// chat-completions endpoint.
#include <httplib.h>

#include <semaphore>
#include <thread>

#include "keyfield/backends.hpp"
#include "keyfield/error.hpp"

namespace keyfield {
namespace {

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;    // always starts with '/'
};

Url split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::invalid_input, "endpoint must be an absolute URL: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

std::string join_path(const std::string& base, std::string_view suffix) {
  std::string out = base;
  while (!out.empty() && out.back() == '/') out.pop_back();
  out += suffix;
  return out;
}

class InFlightLimiter {
 public:
  explicit InFlightLimiter(int limit) : sem_(std::max(1, limit)) {}
  class Permit {
   public:
    explicit Permit(std::counting_semaphore<>& s) : s_(s) { s_.acquire(); }
    ~Permit() { s_.release(); }
    Permit(const Permit&) = delete;
    Permit& operator=(const Permit&) = delete;

   private:
    std::counting_semaphore<>& s_;
  };
  Permit acquire() { return Permit(sem_); }

 private:
  std::counting_semaphore<> sem_;
};

struct HttpOutcome {
  httplib::Result result;
  int retries = 0;
};

bool retryable(const httplib::Result& r) {
  return !r || r->status >= 500 || r->status == 429;
}

// Issues `send` with the retry policy applied to transport failures only.
template <typename Send>
HttpOutcome send_with_retry(const RetryPolicy& policy, const std::string& what, Send&& send) {
  int attempt = 0;
  for (;;) {
    httplib::Result r = send();
    if (!retryable(r)) return {std::move(r), attempt};
    if (attempt >= policy.max_retries) {
      const std::string detail =
          r ? "HTTP " + std::to_string(r->status) : httplib::to_string(r.error());
      throw Error(ErrorCode::backend_unavailable,
                  what + " unavailable after " + std::to_string(attempt) + " retries: " + detail);
    }
    std::this_thread::sleep_for(policy.base_delay * (1 << attempt));
    ++attempt;
  }
}

std::unique_ptr<httplib::Client> make_client(const Url& url, std::chrono::milliseconds timeout) {
  auto client = std::make_unique<httplib::Client>(url.origin);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
  client->set_connection_timeout(secs.count(), usecs.count());
  client->set_read_timeout(secs.count(), usecs.count());
  client->set_write_timeout(secs.count(), usecs.count());
  return client;
}

BackendStatus probe(const std::string& endpoint, const std::string& path,
                    std::chrono::milliseconds timeout, bool require_ok) {
  if (endpoint.empty()) return BackendStatus::unconfigured;
  try {
    const Url url = split_url(endpoint);
    auto client = make_client(url, timeout);
    auto r = client->Get(path.empty() ? url.path : path);
    if (!r) return BackendStatus::down;
    if (require_ok && r->status != 200) return BackendStatus::down;
    return BackendStatus::ok;
  } catch (const Error&) {
    return BackendStatus::down;
  }
}

std::string content_type_of(std::span<const std::uint8_t> image) {
  switch (sniff_format(image)) {
    case ImageFormat::png: return "image/png";
    case ImageFormat::jpeg: return "image/jpeg";
    case ImageFormat::unknown: break;
  }
  return "application/octet-stream";
}

// Decodes a column-major uncompressed RLE mask ({"size": [h, w], "counts": [...]}),
// runs alternating between 0 and 1 and starting with 0.
Mask decode_rle(const nlohmann::json& rle, int height, int width) {
  const auto size = rle.at("size").get<std::vector<int>>();
  if (size.size() != 2 || size[0] != height || size[1] != width) {
    throw Error(ErrorCode::backend_unavailable,
                "segmenter returned a mask whose size differs from the image");
  }
  Mask mask(height, width, 0);
  std::int64_t offset = 0;
  const std::int64_t total = static_cast<std::int64_t>(height) * width;
  bool value = false;
  for (const auto& c : rle.at("counts")) {
    const std::int64_t run = c.get<std::int64_t>();
    if (run < 0 || offset + run > total) {
      throw Error(ErrorCode::backend_unavailable, "segmenter returned a malformed RLE mask");
    }
    if (value) {
      for (std::int64_t i = offset; i < offset + run; ++i) {
        mask.at(static_cast<int>(i % height), static_cast<int>(i / height)) = 1;
      }
    }
    offset += run;
    value = !value;
  }
  if (offset != total) {
    throw Error(ErrorCode::backend_unavailable, "segmenter RLE mask does not cover the image");
  }
  return mask;
}

class HttpSegmenter final : public Segmenter {
 public:
  explicit HttpSegmenter(LiveConfig cfg) : cfg_(std::move(cfg)), limiter_(cfg_.max_in_flight) {}

  std::vector<RawSegment> segment(std::span<const std::uint8_t> image) override {
    const RgbImage decoded = decode_image(image);
    if (cfg_.segmenter_endpoint.empty()) {
      throw Error(ErrorCode::backend_unavailable, "SEGMENTER_ENDPOINT is not configured");
    }
    const Url url = split_url(cfg_.segmenter_endpoint);
    const std::string body(image.begin(), image.end());
    auto permit = limiter_.acquire();
    auto outcome = send_with_retry(cfg_.retry, "segmenter", [&] {
      auto client = make_client(url, cfg_.timeout);
      return client->Post(join_path(url.path, "/segment"), body, content_type_of(image));
    });
    const auto& res = outcome.result;
    if (res->status != 200) {
      throw Error(ErrorCode::backend_unavailable,
                  "segmenter rejected the request: HTTP " + std::to_string(res->status));
    }
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::backend_unavailable, "segmenter returned malformed JSON");
    }
    std::vector<RawSegment> out;
    for (const auto& m : reply.at("masks")) {
      Mask mask = decode_rle(m, decoded.rows(), decoded.cols());
      if (count_nonzero(mask) == 0) continue;
      out.push_back(make_segment(static_cast<int>(out.size()) + 1, std::move(mask)));
    }
    return out;
  }

  BackendStatus health() override {
    if (cfg_.segmenter_endpoint.empty()) return BackendStatus::unconfigured;
    return probe(cfg_.segmenter_endpoint,
                 join_path(split_url(cfg_.segmenter_endpoint).path, "/health"), cfg_.timeout,
                 true);
  }

 private:
  LiveConfig cfg_;
  InFlightLimiter limiter_;
};

// Image Analysis 4.0 "caption" feature.
class VisionCaptioner final : public Captioner {
 public:
  explicit VisionCaptioner(LiveConfig cfg) : cfg_(std::move(cfg)), limiter_(cfg_.max_in_flight) {}

  CaptionResult caption(std::span<const std::uint8_t> image,
                        const std::optional<BBox>& region) override {
    const RgbImage decoded = decode_image(image);
    if (cfg_.caption_endpoint.empty()) {
      throw Error(ErrorCode::backend_unavailable, "CAPTION_ENDPOINT is not configured");
    }
    const Bytes payload = region ? encode_png(crop(decoded, *region))
                                 : Bytes(image.begin(), image.end());
    const Url url = split_url(cfg_.caption_endpoint);
    const std::string path =
        join_path(url.path, "/computervision/imageanalysis:analyze") +
        "?api-version=2023-10-01&features=caption";
    const std::string body(payload.begin(), payload.end());
    auto permit = limiter_.acquire();

    // An empty caption is retried once before giving up.
    for (int attempt = 0; attempt < 2; ++attempt) {
      auto outcome = send_with_retry(cfg_.retry, "captioner", [&] {
        auto client = make_client(url, cfg_.timeout);
        httplib::Headers headers{{"Ocp-Apim-Subscription-Key", cfg_.caption_api_key}};
        return client->Post(path, headers, body, "application/octet-stream");
      });
      const auto& res = outcome.result;
      if (res->status != 200) {
        throw Error(ErrorCode::backend_unavailable,
                    "captioner rejected the request: HTTP " + std::to_string(res->status));
      }
      try {
        const auto reply = nlohmann::json::parse(res->body);
        const auto& result = reply.at("captionResult");
        CaptionResult out{single_line(result.value("text", std::string())), std::nullopt};
        if (result.contains("confidence")) out.confidence = result.at("confidence").get<double>();
        if (!out.text.empty()) return out;
      } catch (const nlohmann::json::exception&) {
        throw Error(ErrorCode::backend_unavailable, "captioner returned malformed JSON");
      }
    }
    throw Error(ErrorCode::backend_unavailable, "captioner returned an empty caption twice");
  }

  BackendStatus health() override {
    return probe(cfg_.caption_endpoint, {}, cfg_.timeout, false);
  }

 private:
  LiveConfig cfg_;
  InFlightLimiter limiter_;
};

class ChatCompletionsClient final : public ChatModel {
 public:
  explicit ChatCompletionsClient(LiveConfig cfg)
      : cfg_(std::move(cfg)), limiter_(cfg_.max_in_flight) {}

  ChatExchange complete(const ChatMessages& messages) override {
    validate_messages(messages);
    if (cfg_.chat_endpoint.empty()) {
      throw Error(ErrorCode::backend_unavailable, "CHAT_ENDPOINT is not configured");
    }
    const Url url = split_url(cfg_.chat_endpoint);
    const nlohmann::json request = {
        {"model", cfg_.chat_model},
        {"messages", messages_to_json(messages)},
        {"temperature", 0},
    };
    const std::string body = request.dump();
    auto permit = limiter_.acquire();
    const auto start = std::chrono::steady_clock::now();
    auto outcome = send_with_retry(cfg_.retry, "chat model", [&] {
      auto client = make_client(url, cfg_.timeout);
      httplib::Headers headers;
      if (!cfg_.chat_api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + cfg_.chat_api_key);
      }
      return client->Post(url.path, headers, body, "application/json");
    });
    const auto& res = outcome.result;
    if (res->status != 200) {
      throw Error(ErrorCode::backend_unavailable,
                  "chat model rejected the request: HTTP " + std::to_string(res->status));
    }
    ChatExchange exchange;
    exchange.messages = messages;
    exchange.retries = outcome.retries;
    exchange.latency_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - start)
                              .count();
    try {
      const auto reply = nlohmann::json::parse(res->body);
      exchange.reply = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::backend_unavailable, "chat model returned a malformed response");
    }
    return exchange;
  }

  BackendStatus health() override { return probe(cfg_.chat_endpoint, {}, cfg_.timeout, false); }

 private:
  LiveConfig cfg_;
  InFlightLimiter limiter_;
};

}  // namespace

Backends make_live_backends(const LiveConfig& config) {
  return {std::make_shared<HttpSegmenter>(config), std::make_shared<VisionCaptioner>(config),
          std::make_shared<ChatCompletionsClient>(config)};
}

}  // namespace keyfield
