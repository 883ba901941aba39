#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "keyfield/backends.hpp"
#include "keyfield/error.hpp"
#include "keyfield/pipeline.hpp"
#include "keyfield/prompts.hpp"
#include "test_support.hpp"

using namespace keyfield;
namespace fs = std::filesystem;

namespace {

// httplib server on an ephemeral loopback port for the lifetime of the object.
class LocalServer {
 public:
  LocalServer() = default;
  ~LocalServer() {
    server.stop();
    if (thread_.joinable()) thread_.join();
  }
  void start() {
    port_ = server.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  std::string url(const std::string& path = "") const {
    return "http://127.0.0.1:" + std::to_string(port_) + path;
  }

  httplib::Server server;

 private:
  int port_ = 0;
  std::thread thread_;
};

LiveConfig fast_config() {
  LiveConfig c;
  c.retry.base_delay = std::chrono::milliseconds(1);
  c.timeout = std::chrono::milliseconds(2000);
  return c;
}

const ChatMessages kMessages{{Role::system, "sys"}, {Role::user, "hello"}};

std::string chat_body(const std::string& content) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}
      .dump();
}

void copy_fixtures(const fs::path& to) {
  fs::copy(test::fixture_dir(), to, fs::copy_options::recursive);
}

}  // namespace

// ---------------------------------------------------------------------------
// Wire helpers
// ---------------------------------------------------------------------------

TEST(RequestHash, IgnoresWhitespaceLayoutOnly) {
  const ChatMessages a{{Role::system, "a  b\n c"}, {Role::user, "q"}};
  const ChatMessages b{{Role::system, " a b c "}, {Role::user, "q"}};
  const ChatMessages role{{Role::system, "a b c"}, {Role::assistant, "q"}};
  const ChatMessages order{{Role::user, "q"}, {Role::system, "a b c"}};
  const ChatMessages text{{Role::system, "a b C"}, {Role::user, "q"}};
  EXPECT_EQ(request_hash(a), request_hash(b));
  EXPECT_NE(request_hash(a), request_hash(role));
  EXPECT_NE(request_hash(a), request_hash(order));
  EXPECT_NE(request_hash(a), request_hash(text));
  EXPECT_EQ(request_hash(a).size(), 64u);
}

TEST(ChatMessagesJson, RoundTrip) {
  const ChatMessages m{{Role::system, "s"}, {Role::user, "u"}, {Role::assistant, "a"}};
  EXPECT_EQ(messages_from_json(messages_to_json(m)), m);
  EXPECT_THROW(role_from_string("robot"), Error);
}

TEST(ValidateMessages, RequiresLeadingSystemMessage) {
  EXPECT_THROW(validate_messages({}), Error);
  EXPECT_THROW(validate_messages({{Role::user, "q"}}), Error);
  EXPECT_NO_THROW(validate_messages(kMessages));
}

TEST(SingleLine, FoldsNewlines) { EXPECT_EQ(single_line("  a\nb \r\n"), "a b"); }

// ---------------------------------------------------------------------------
// Fixture-backed mocks
// ---------------------------------------------------------------------------

TEST(FixtureStore, LoadsCommittedCases) {
  const auto store = FixtureStore::load(test::fixture_dir().string());
  ASSERT_EQ(store->cases().size(), 4u);
  EXPECT_EQ(store->cases()[0].name, "blank");
  EXPECT_EQ(store->cases()[2].name, "door");
  EXPECT_EQ(store->cases()[2].width, 240);
  EXPECT_EQ(store->cases()[2].height, 440);
  EXPECT_GT(store->transcript_count(), 0u);
}

TEST(MockBackends, DoorSegmentsAndCaptions) {
  const Backends b = make_mock_backends(test::fixture_dir().string());
  const Bytes door = read_file((test::fixture_dir() / "door" / "image.png").string());
  const auto segs = b.segmenter->segment(door);
  ASSERT_EQ(segs.size(), 9u);
  for (std::size_t i = 0; i < segs.size(); ++i) EXPECT_EQ(segs[i].id, static_cast<int>(i) + 1);
  EXPECT_EQ(segs[1].area, 840);  // handle
  EXPECT_EQ(segs[8].area, 3);    // speck
  EXPECT_EQ(b.captioner->caption(door, std::nullopt).text, "a close-up of a black door");
  EXPECT_EQ(b.captioner->caption(door, BBox{37, 20, 202, 419}).text, "a black door with a handle");
  EXPECT_THROW(b.captioner->caption(door, BBox{0, 0, 5, 5}), Error);
  EXPECT_EQ(b.segmenter->health(), BackendStatus::ok);
}

TEST(MockBackends, UnknownImageIsBackendUnavailable) {
  const Backends b = make_mock_backends(test::fixture_dir().string());
  const Bytes other = encode_png(RgbImage(3, 3, Rgb{1, 2, 3}));
  try {
    b.segmenter->segment(other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::backend_unavailable);
  }
  EXPECT_THROW(b.segmenter->segment(Bytes{1, 2, 3}), Error);
}

TEST(MockBackends, DoorStage1RequestReplaysReferenceReply) {
  const Backends b = make_mock_backends(test::fixture_dir().string());
  const Pipeline p(b);
  const Session s = p.detect_objects(read_file((test::fixture_dir() / "door" / "image.png").string()));
  const auto messages = build_stage1_prompt(s.scene_caption, std::span<const SemanticObject>(s.objects),
                                            "where can I kick the door open?");
  EXPECT_EQ(b.chat->complete(messages).reply, test::golden("stage1_reply.txt"));
  try {
    b.chat->complete(kMessages);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::backend_unavailable);
  }
}

TEST(FixtureStore, StaleTranscriptHashIsRejected) {
  test::ScratchDir dir("stale");
  copy_fixtures(dir.path() / "fx");
  const fs::path t = dir.path() / "fx" / "door" / "transcripts.json";
  auto j = nlohmann::json::parse(test::read_text(t));
  j[0]["messages"][0]["content"] = j[0]["messages"][0]["content"].get<std::string>() + " edited";
  std::ofstream(t) << j.dump(2);
  try {
    FixtureStore::load((dir.path() / "fx").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("regenerate"), std::string::npos);
  }
}

TEST(FixtureStore, ConflictingRepliesAreRejected) {
  test::ScratchDir dir("conflict");
  copy_fixtures(dir.path() / "fx");
  const fs::path t = dir.path() / "fx" / "door" / "transcripts.json";
  auto j = nlohmann::json::parse(test::read_text(t));
  auto dup = j[0];
  dup["reply"] = "something else";
  j.push_back(dup);
  std::ofstream(t) << j.dump(2);
  EXPECT_THROW(FixtureStore::load((dir.path() / "fx").string()), Error);
}

TEST(FixtureStore, MissingDirectory) {
  EXPECT_THROW(FixtureStore::load("/nonexistent/fixtures"), Error);
  BackendConfig cfg;
  cfg.mode = BackendMode::mock;
  try {
    make_backends(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_input);
  }
}

TEST(RecordingChat, RecordedTranscriptsReplayThroughMock) {
  test::ScratchDir dir("record");
  const fs::path fx = dir.path() / "fx" / "one";
  fs::create_directories(fx);
  const RgbImage img(4, 4, Rgb{9, 9, 9});
  write_file_atomic((fx / "image.png").string(), encode_png(img));

  class Echo final : public ChatModel {
   public:
    ChatExchange complete(const ChatMessages& m) override { return {m, "echo " + m.back().content, 0, 0}; }
    BackendStatus health() override { return BackendStatus::ok; }
  };
  RecordingChat rec(std::make_shared<Echo>());
  rec.complete(kMessages);
  const auto transcripts = rec.transcripts();
  ASSERT_EQ(transcripts.size(), 1u);
  write_file_atomic((fx / "transcripts.json").string(), transcripts_to_json(transcripts).dump(2));

  const Backends b = make_mock_backends((dir.path() / "fx").string());
  EXPECT_EQ(b.chat->complete(kMessages).reply, "echo hello");
}

// ---------------------------------------------------------------------------
// Live clients against local servers
// ---------------------------------------------------------------------------

TEST(LiveChat, RetriesTransientFailuresThenSucceeds) {
  LocalServer srv;
  std::atomic<int> calls{0};
  nlohmann::json seen;
  std::string auth;
  srv.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (++calls <= 2) {
      res.status = 503;
      return;
    }
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(chat_body("{\"Answer\": \"Yes\"}"), "application/json");
  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.chat_endpoint = srv.url("/v1/chat/completions");
  cfg.chat_api_key = "k123";
  const Backends b = make_live_backends(cfg);
  const ChatExchange ex = b.chat->complete(kMessages);
  EXPECT_EQ(ex.reply, "{\"Answer\": \"Yes\"}");
  EXPECT_EQ(ex.retries, 2);
  EXPECT_EQ(calls.load(), 3);
  EXPECT_EQ(seen["model"], "gpt-4");
  EXPECT_EQ(seen["temperature"], 0);
  EXPECT_EQ(messages_from_json(seen["messages"]), kMessages);
  EXPECT_EQ(auth, "Bearer k123");
  EXPECT_EQ(b.chat->health(), BackendStatus::ok);
}

TEST(LiveChat, GivesUpAfterRetryBudget) {
  LocalServer srv;
  std::atomic<int> calls{0};
  srv.server.Post("/chat", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.chat_endpoint = srv.url("/chat");
  try {
    make_live_backends(cfg).chat->complete(kMessages);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::backend_unavailable);
    EXPECT_NE(std::string(e.what()).find("2 retries"), std::string::npos);
  }
  EXPECT_EQ(calls.load(), 3);
}

TEST(LiveChat, ClientErrorsAreNotRetried) {
  LocalServer srv;
  std::atomic<int> calls{0};
  srv.server.Post("/chat", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 400;
  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.chat_endpoint = srv.url("/chat");
  EXPECT_THROW(make_live_backends(cfg).chat->complete(kMessages), Error);
  EXPECT_EQ(calls.load(), 1);
}

TEST(LiveChat, ReplyReturnedVerbatim) {
  LocalServer srv;
  const std::string raw = test::golden("stage2_reply.txt");
  srv.server.Post("/chat", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(chat_body(raw), "application/json");
  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.chat_endpoint = srv.url("/chat");
  EXPECT_EQ(make_live_backends(cfg).chat->complete(kMessages).reply, raw);
}

TEST(LiveChat, UnreachableEndpoint) {
  LiveConfig cfg = fast_config();
  cfg.chat_endpoint = "http://127.0.0.1:1/chat";
  cfg.timeout = std::chrono::milliseconds(300);
  const Backends b = make_live_backends(cfg);
  EXPECT_THROW(b.chat->complete(kMessages), Error);
  EXPECT_EQ(b.chat->health(), BackendStatus::down);
}

TEST(LiveSegmenter, DecodesColumnMajorRle) {
  LocalServer srv;
  std::string content_type;
  // 2 rows x 3 cols; column-major order is (0,0),(1,0),(0,1),(1,1),(0,2),(1,2).
  srv.server.Post("/sam/segment", [&](const httplib::Request& req, httplib::Response& res) {
    content_type = req.get_header_value("Content-Type");
    res.set_content(R"({"masks": [{"size": [2, 3], "counts": [1, 2, 3]},
                                  {"size": [2, 3], "counts": [6]}]})",
                    "application/json");
  });
  srv.server.Get("/sam/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.segmenter_endpoint = srv.url("/sam");
  const Backends b = make_live_backends(cfg);
  const auto segs = b.segmenter->segment(encode_png(RgbImage(2, 3, Rgb{0, 0, 0})));
  ASSERT_EQ(segs.size(), 1u);  // the all-zero mask is dropped
  EXPECT_EQ(content_type, "image/png");
  const Mask& m = segs[0].mask;
  EXPECT_EQ(m.at(1, 0), 1);
  EXPECT_EQ(m.at(0, 1), 1);
  EXPECT_EQ(m.at(0, 0), 0);
  EXPECT_EQ(m.at(1, 1), 0);
  EXPECT_EQ(segs[0].area, 2);
  EXPECT_EQ(b.segmenter->health(), BackendStatus::ok);
}

TEST(LiveSegmenter, MalformedMasksAreBackendErrors) {
  LocalServer srv;
  srv.server.Post("/segment", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"masks": [{"size": [5, 5], "counts": [25]}]})", "application/json");
  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.segmenter_endpoint = srv.url();
  try {
    make_live_backends(cfg).segmenter->segment(encode_png(RgbImage(2, 3, Rgb{0, 0, 0})));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::backend_unavailable);
  }
}

TEST(LiveSegmenter, SlowHealthProbeIsDown) {
  LocalServer srv;
  srv.server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(800));
    res.set_content("late", "text/plain");
  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.segmenter_endpoint = srv.url();
  cfg.timeout = std::chrono::milliseconds(200);
  EXPECT_EQ(make_live_backends(cfg).segmenter->health(), BackendStatus::down);
}

TEST(LiveCaptioner, RetriesEmptyCaptionOnce) {
  LocalServer srv;
  std::atomic<int> calls{0};
  std::string key, query;
  srv.server.Post("/computervision/imageanalysis:analyze",
                  [&](const httplib::Request& req, httplib::Response& res) {
                    key = req.get_header_value("Ocp-Apim-Subscription-Key");
                    query = req.get_param_value("features");
                    const std::string text = ++calls == 1 ? "" : "a black\ndoor";
                    res.set_content(nlohmann::json{{"captionResult",
                                                    {{"text", text}, {"confidence", 0.75}}}}
                                        .dump(),
                                    "application/json");
                  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.caption_endpoint = srv.url();
  cfg.caption_api_key = "vision-key";
  const auto c = make_live_backends(cfg).captioner->caption(
      encode_png(RgbImage(8, 8, Rgb{1, 1, 1})), BBox{1, 1, 4, 4});
  EXPECT_EQ(c.text, "a black door");
  EXPECT_EQ(c.confidence, 0.75);
  EXPECT_EQ(calls.load(), 2);
  EXPECT_EQ(key, "vision-key");
  EXPECT_EQ(query, "caption");
}

TEST(LiveCaptioner, EmptyTwiceIsAnError) {
  LocalServer srv;
  srv.server.Post("/computervision/imageanalysis:analyze",
                  [&](const httplib::Request&, httplib::Response& res) {
                    res.set_content(R"({"captionResult": {"text": ""}})", "application/json");
                  });
  srv.start();
  LiveConfig cfg = fast_config();
  cfg.caption_endpoint = srv.url();
  EXPECT_THROW(make_live_backends(cfg).captioner->caption(encode_png(RgbImage(2, 2, Rgb{})),
                                                          std::nullopt),
               Error);
}

TEST(LiveBackends, UnconfiguredEndpointsReportUnconfigured) {
  const Backends b = make_live_backends(fast_config());
  EXPECT_EQ(b.segmenter->health(), BackendStatus::unconfigured);
  EXPECT_EQ(b.captioner->health(), BackendStatus::unconfigured);
  EXPECT_EQ(b.chat->health(), BackendStatus::unconfigured);
  EXPECT_THROW(b.chat->complete(kMessages), Error);
}

TEST(BackendConfig, ReadsEnvironment) {
  setenv("BACKEND_MODE", "live", 1);
  setenv("CHAT_ENDPOINT", "http://example.invalid/chat", 1);
  setenv("CHAT_MODEL", "other-model", 1);
  const BackendConfig cfg = BackendConfig::from_env();
  EXPECT_EQ(cfg.mode, BackendMode::live);
  EXPECT_EQ(cfg.live.chat_endpoint, "http://example.invalid/chat");
  EXPECT_EQ(cfg.live.chat_model, "other-model");
  setenv("BACKEND_MODE", "bogus", 1);
  EXPECT_THROW(BackendConfig::from_env(), Error);
  unsetenv("BACKEND_MODE");
  unsetenv("CHAT_ENDPOINT");
  unsetenv("CHAT_MODEL");
  EXPECT_EQ(BackendConfig::from_env().mode, BackendMode::mock);
}
