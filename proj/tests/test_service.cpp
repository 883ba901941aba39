#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <thread>

#include <httplib.h>

#include "keyfield/service.hpp"
#include "test_support.hpp"

using namespace keyfield;
using nlohmann::json;

namespace {

const std::string kKick = "where can I kick the door open?";

std::string fixture_bytes(const std::string& name) {
  return test::read_text(test::fixture_dir() / name / "image.png");
}

class Running {
 public:
  explicit Running(const std::string& session_dir) {
    ServiceConfig cfg;
    cfg.session_dir = session_dir;
    cfg.max_upload_bytes = 1u << 20;
    service_ = std::make_unique<Service>(
        Pipeline(make_mock_backends(test::fixture_dir().string())), cfg);
    port_ = service_->bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { service_->listen_after_bind(); });
    service_->wait_until_ready();
  }
  ~Running() {
    service_->stop();
    thread_.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(10, 0);
    return c;
  }

 private:
  std::unique_ptr<Service> service_;
  std::thread thread_;
  int port_ = 0;
};

httplib::Result upload(httplib::Client& c, const std::string& bytes) {
  httplib::MultipartFormDataItems items{{"image", bytes, "image.png", "image/png"}};
  return c.Post("/sessions", items);
}

httplib::Result ask(httplib::Client& c, const std::string& sid, const std::string& question) {
  return c.Post("/sessions/" + sid + "/queries", json{{"question", question}}.dump(),
                "application/json");
}

std::string create_door(httplib::Client& c) {
  auto res = upload(c, fixture_bytes("door"));
  EXPECT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  return json::parse(res->body).at("session_id").get<std::string>();
}

void expect_api_error(const httplib::Result& res, int status, const std::string& code) {
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, status) << res->body;
  const json j = json::parse(res->body);
  EXPECT_EQ(j.at("code"), code) << res->body;
  EXPECT_TRUE(j.at("message").is_string());
  EXPECT_TRUE(j.contains("stage"));
}

}  // namespace

TEST(SessionIds, RandomAndWellFormed) {
  std::set<std::string> seen;
  for (int i = 0; i < 200; ++i) {
    const std::string id = new_session_id();
    EXPECT_TRUE(is_session_id(id)) << id;
    seen.insert(id);
  }
  EXPECT_EQ(seen.size(), 200u);
  EXPECT_FALSE(is_session_id("../../etc/passwd"));
  EXPECT_FALSE(is_session_id("short"));
}

TEST(SessionStore, UnknownAndMalformedIds) {
  test::ScratchDir dir("store");
  SessionStore store(dir.path().string());
  EXPECT_FALSE(store.exists("AAAAAAAAAAAAAAAAAAAAAA"));
  try {
    store.load("AAAAAAAAAAAAAAAAAAAAAA");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_found);
  }
  EXPECT_THROW(store.load("../x"), Error);
  EXPECT_FALSE(store.overlay("AAAAAAAAAAAAAAAAAAAAAA", "../q0"));
}

TEST(Service, KickFlowEndToEnd) {
  test::ScratchDir dir("svc");
  Running svc(dir.path().string());
  auto c = svc.client();

  auto created = upload(c, fixture_bytes("door"));
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 201);
  const json cj = json::parse(created->body);
  const std::string sid = cj.at("session_id");
  EXPECT_TRUE(is_session_id(sid));
  EXPECT_EQ(cj.at("scene_caption"), "a close-up of a black door");
  ASSERT_EQ(cj.at("objects").size(), 1u);
  EXPECT_EQ(cj["objects"][0]["descriptor"], "a black door with a handle");

  auto answered = ask(c, sid, kKick);
  ASSERT_TRUE(answered);
  ASSERT_EQ(answered->status, 200) << answered->body;
  const json q = json::parse(answered->body);
  EXPECT_EQ(q.at("query_id"), "q0");
  EXPECT_EQ(q.at("outcome"), "highlighted");
  EXPECT_EQ(q.at("answer_text"),
            "The region where the door can be kicked open is at the bottom half of the door.");
  EXPECT_EQ(q.at("has_highlight"), true);
  EXPECT_EQ(q.at("segments"), json::parse("[2, 3, 4, 5, 7]"));
  const std::string overlay_url = q.at("overlay_url");
  EXPECT_EQ(overlay_url, "/sessions/" + sid + "/queries/q0/overlay");

  auto overlay = c.Get(overlay_url);
  ASSERT_TRUE(overlay);
  EXPECT_EQ(overlay->status, 200);
  EXPECT_EQ(overlay->get_header_value("Content-Type"), "image/png");
  const Bytes png(overlay->body.begin(), overlay->body.end());
  const RgbImage img = decode_image(png);
  EXPECT_EQ(img.cols(), 240);
  EXPECT_EQ(img.rows(), 440);

  auto fetched = c.Get("/sessions/" + sid + "/queries/q0");
  ASSERT_TRUE(fetched);
  EXPECT_EQ(fetched->status, 200);
  EXPECT_EQ(json::parse(fetched->body), q);

  auto view = c.Get("/sessions/" + sid);
  ASSERT_TRUE(view);
  const json v = json::parse(view->body);
  EXPECT_EQ(v.at("image"), json::parse(R"({"width": 240, "height": 440})"));
  EXPECT_EQ(v.at("queries").size(), 1u);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / sid / "session.json"));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / sid / "overlays" / "q0.png"));
}

TEST(Service, RefusalHasNoOverlay) {
  test::ScratchDir dir("svc");
  Running svc(dir.path().string());
  auto c = svc.client();
  const std::string sid = create_door(c);
  auto res = ask(c, sid, "is there an umbrella next to the door?");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const json q = json::parse(res->body);
  EXPECT_EQ(q.at("outcome"), "refused");
  EXPECT_EQ(q.at("has_highlight"), false);
  EXPECT_TRUE(q.at("overlay_url").is_null());
  auto overlay = c.Get("/sessions/" + sid + "/queries/q0/overlay");
  expect_api_error(overlay, 404, "not_found");
}

TEST(Service, InputErrors) {
  test::ScratchDir dir("svc");
  Running svc(dir.path().string());
  auto c = svc.client();

  expect_api_error(upload(c, ""), 400, "invalid_input");
  expect_api_error(c.Post("/sessions", "", "application/octet-stream"), 400, "invalid_input");
  expect_api_error(upload(c, "not an image"), 400, "invalid_input");
  expect_api_error(upload(c, std::string((1u << 20) + 1, 'x')), 400, "invalid_input");

  const std::string sid = create_door(c);
  expect_api_error(ask(c, sid, ""), 400, "invalid_input");
  expect_api_error(ask(c, sid, "   "), 400, "invalid_input");
  expect_api_error(c.Post("/sessions/" + sid + "/queries", "{", "application/json"), 400,
                   "invalid_input");
  expect_api_error(c.Post("/sessions/" + sid + "/queries", R"({"question": 3})",
                          "application/json"),
                   400, "invalid_input");

  expect_api_error(c.Get("/sessions/AAAAAAAAAAAAAAAAAAAAAA"), 404, "not_found");
  expect_api_error(ask(c, "AAAAAAAAAAAAAAAAAAAAAA", kKick), 404, "not_found");
  expect_api_error(c.Get("/sessions/" + sid + "/queries/q7"), 404, "not_found");
  expect_api_error(c.Get("/nowhere"), 404, "not_found");

  // Failed queries leave no record behind.
  auto view = c.Get("/sessions/" + sid);
  EXPECT_EQ(json::parse(view->body).at("queries").size(), 0u);
}

TEST(Service, UnparseableModelOutputIs422) {
  test::ScratchDir dir("svc");
  Running svc(dir.path().string());
  auto c = svc.client();
  const std::string sid = create_door(c);
  auto res = ask(c, sid, "describe the door in one word");
  expect_api_error(res, 422, "parse_failure");
  const json q = json::parse(res->body);
  EXPECT_EQ(q.at("outcome"), "parse_failure");
  EXPECT_EQ(q.at("has_highlight"), false);
  // The record is kept and can be fetched.
  auto again = c.Get("/sessions/" + sid + "/queries/q0");
  ASSERT_TRUE(again);
  EXPECT_EQ(again->status, 200);
}

TEST(Service, SegmenterOutageIs502) {
  test::ScratchDir dir("svc");
  Running svc(dir.path().string());
  auto c = svc.client();
  const Bytes unknown = encode_png(RgbImage(8, 8, Rgb{1, 2, 3}));
  auto res = upload(c, std::string(unknown.begin(), unknown.end()));
  expect_api_error(res, 502, "backend_unavailable");
  EXPECT_EQ(json::parse(res->body).at("stage"), "segment");
}

TEST(Service, HealthAndCors) {
  test::ScratchDir dir("svc");
  Running svc(dir.path().string());
  auto c = svc.client();
  auto health = c.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(json::parse(health->body),
            json::parse(R"({"status": "ok", "backends": {"segmenter": "ok",
                            "captioner": "ok", "chat": "ok"}})"));
  EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "*");

  auto pre = c.Options("/sessions");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Origin"), "*");
  EXPECT_NE(pre->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
}

TEST(Service, ConcurrentQueriesOnOneSessionAreSerialized) {
  test::ScratchDir dir("svc");
  Running svc(dir.path().string());
  auto c0 = svc.client();
  const std::string sid = create_door(c0);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) {
    threads.emplace_back([&] {
      auto c = svc.client();
      auto res = ask(c, sid, kKick);
      EXPECT_TRUE(res && res->status == 200);
    });
  }
  for (auto& t : threads) t.join();
  const json v = json::parse(c0.Get("/sessions/" + sid)->body);
  std::set<std::string> ids;
  for (const auto& q : v.at("queries")) ids.insert(q.at("query_id").get<std::string>());
  EXPECT_EQ(ids, (std::set<std::string>{"q0", "q1", "q2", "q3"}));
}

TEST(Service, RestartServesIdenticalBytes) {
  test::ScratchDir dir("svc");
  std::string sid;
  std::vector<std::string> urls;
  std::vector<std::string> before;
  {
    Running svc(dir.path().string());
    auto c = svc.client();
    sid = create_door(c);
    ask(c, sid, kKick);
    ask(c, sid, "is there an umbrella next to the door?");
    urls = {"/sessions/" + sid, "/sessions/" + sid + "/queries/q0",
            "/sessions/" + sid + "/queries/q1", "/sessions/" + sid + "/queries/q0/overlay"};
    for (const auto& u : urls) before.push_back(c.Get(u)->body);
  }
  Running svc(dir.path().string());
  auto c = svc.client();
  for (std::size_t i = 0; i < urls.size(); ++i) {
    auto res = c.Get(urls[i]);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200) << urls[i];
    EXPECT_EQ(res->body, before[i]) << urls[i];
  }
  // History keeps growing after the restart.
  auto next = ask(c, sid, "where should I knock on the door?");
  ASSERT_TRUE(next);
  EXPECT_EQ(json::parse(next->body).at("query_id"), "q2");
}

TEST(ServiceConfig, FromEnvironment) {
  setenv("PORT", "9123", 1);
  setenv("SESSION_DIR", "/tmp/kf-sessions", 1);
  setenv("MAX_UPLOAD_MB", "3", 1);
  const ServiceConfig cfg = ServiceConfig::from_env();
  EXPECT_EQ(cfg.port, 9123);
  EXPECT_EQ(cfg.session_dir, "/tmp/kf-sessions");
  EXPECT_EQ(cfg.max_upload_bytes, 3u * 1024u * 1024u);
  unsetenv("PORT");
  unsetenv("SESSION_DIR");
  unsetenv("MAX_UPLOAD_MB");
}
