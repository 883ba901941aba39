// Regenerates the mock-backend fixtures (door, mug, cake, blank).
//
// Each case is drawn procedurally, its chat replies are scripted per
// question, and the exchanges are captured through RecordingChat so the
// stored request hashes always match the current prompt templates.

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "keyfield/backends.hpp"
#include "keyfield/error.hpp"
#include "keyfield/pipeline.hpp"

namespace fs = std::filesystem;
using namespace keyfield;
using nlohmann::ordered_json;

namespace {

struct Rect {
  int x1, y1, x2, y2;  // inclusive
};

struct Scene {
  RgbImage image;
  Grid<std::uint8_t> labels;

  Scene(int width, int height, Rgb background)
      : image(height, width, background), labels(height, width, 0) {}

  void paint(const Rect& r, Rgb color, std::uint8_t label) {
    for (int y = r.y1; y <= r.y2; ++y) {
      for (int x = r.x1; x <= r.x2; ++x) {
        image.at(y, x) = color;
        labels.at(y, x) = label;
      }
    }
  }
};

// Replies keyed by the stage and the question text the prompt carries.
class ScriptedChat final : public ChatModel {
 public:
  void on_stage1(const std::string& question, std::string reply) {
    stage1_[question] = std::move(reply);
  }
  void on_stage2(const std::string& follow_up, std::string reply) {
    stage2_[follow_up] = std::move(reply);
  }

  ChatExchange complete(const ChatMessages& messages) override {
    const std::string& first_user = messages.at(1).content;
    const bool stage1 = messages.front().content.starts_with("You are an expert in logic");
    const std::string prefix = stage1 ? "Question: " : "Question:";
    if (!first_user.starts_with(prefix)) {
      throw Error(ErrorCode::internal, "unexpected prompt shape");
    }
    const std::string key = first_user.substr(prefix.size());
    const auto& table = stage1 ? stage1_ : stage2_;
    const auto it = table.find(key);
    if (it == table.end()) {
      throw Error(ErrorCode::internal, "no scripted reply for: " + key);
    }
    return {messages, it->second, 0.0, 0};
  }
  BackendStatus health() override { return BackendStatus::ok; }

 private:
  std::map<std::string, std::string> stage1_;
  std::map<std::string, std::string> stage2_;
};

struct CaseSpec {
  std::string name;
  Scene scene;
  std::string scene_caption;
  std::map<std::string, std::string> object_captions;  // region key -> caption
  std::vector<std::string> questions;
  std::function<void(ScriptedChat&, const Session&)> script;
};

std::string read_text(const fs::path& path) {
  const Bytes b = read_file(path.string());
  return {b.begin(), b.end()};
}

std::string json_text(const ordered_json& j) { return j.dump(2) + "\n"; }

std::string stage1_reply(const std::string& answer, const std::string& reply,
                         const std::vector<std::pair<int, std::string>>& objects,
                         const std::vector<BBox>& positions) {
  ordered_json j;
  j["Answer"] = answer;
  j["Reply"] = reply;
  j["Objects name"] = ordered_json::array();
  for (const auto& [id, q] : objects) j["Objects name"].push_back({id, q});
  j["Position"] = ordered_json::array();
  for (const auto& b : positions) j["Position"].push_back({b.x1, b.y1, b.x2, b.y2});
  return j.dump();
}

const SemanticObject& object_with_member(const Session& session, int raw_id) {
  for (const auto& o : session.objects) {
    for (const int m : o.member_segments) {
      if (m == raw_id) return o;
    }
  }
  throw Error(ErrorCode::internal, "segment " + std::to_string(raw_id) + " not composed");
}

int label_of(const SemanticObject& object, int raw_id) {
  for (std::size_t i = 0; i < object.member_segments.size(); ++i) {
    if (object.member_segments[i] == raw_id) return static_cast<int>(i) + 1;
  }
  throw Error(ErrorCode::internal, "segment " + std::to_string(raw_id) + " not in object");
}

// 240x440 door photo; the door occupies x 37..202, y 20..419.
CaseSpec door_case(const fs::path& golden) {
  CaseSpec c{"door", Scene(240, 440, {200, 198, 190}), "a close-up of a black door", {}, {}, {}};
  const int ox = 37, oy = 20;
  auto local = [&](int x1, int y1, int x2, int y2) {
    return Rect{ox + x1, oy + y1, ox + x2, oy + y2};
  };
  Scene& s = c.scene;
  s.paint(local(0, 0, 165, 399), {22, 22, 24}, 1);        // panel
  s.paint(local(128, 170, 141, 229), {172, 172, 178}, 2);  // handle
  s.paint(local(129, 240, 138, 251), {184, 152, 64}, 3);   // lock
  s.paint(local(18, 290, 147, 329), {62, 62, 66}, 4);      // kick band
  s.paint(local(18, 330, 77, 364), {46, 46, 52}, 5);       // left plate
  s.paint(local(78, 330, 88, 364), {92, 92, 98}, 6);       // divider
  s.paint(local(89, 330, 147, 364), {46, 46, 52}, 7);      // right plate
  s.paint(local(18, 365, 147, 382), {36, 36, 40}, 8);      // bottom strip
  s.paint({5, 5, 6, 5}, {120, 60, 60}, 9);                 // speck, below the area floor
  s.paint({5, 6, 5, 6}, {120, 60, 60}, 9);
  c.object_captions[region_key(BBox{37, 20, 202, 419})] = "a black door with a handle";

  const std::string kick = "where can I kick the door open?";
  const std::string knock = "where should I knock on the door?";
  const std::string umbrella = "is there an umbrella next to the door?";
  const std::string garbled = "describe the door in one word";
  c.questions = {kick, knock, umbrella, garbled};
  const std::string s1 = read_text(golden / "stage1_reply.txt");
  const std::string s2 = read_text(golden / "stage2_reply.txt");
  c.script = [=](ScriptedChat& chat, const Session& session) {
    const BBox door = session.objects.at(0).bbox;
    chat.on_stage1(kick, s1);
    chat.on_stage2("Can you specify the region where you can be kicked open?", s2);
    const std::string knock_follow_up = "Which part of the door is meant for knocking?";
    chat.on_stage1(knock, stage1_reply("No", "Knocking is usually done on the upper middle of a door.",
                                       {{0, knock_follow_up}}, {door}));
    chat.on_stage2(knock_follow_up,
                   "{'answer': 'Knock on the upper middle of the door panel.', "
                   "'whole segments': 'No', 'which segment': [], "
                   "'target position': [[2, 3, 5, 6]]}");
    chat.on_stage1(umbrella, stage1_reply("No", "There is no umbrella in the image.", {}, {}));
    chat.on_stage1(garbled, "Solid.");
  };
  return c;
}

// 320x240 desk: a mug with a sticker and a handle, and a phone.
CaseSpec mug_case() {
  CaseSpec c{"mug", Scene(320, 240, {236, 232, 224}), "a mug and a phone on a desk", {}, {}, {}};
  Scene& s = c.scene;
  // The mug silhouette spans the handle's bounding area as well.
  s.paint({80, 60, 229, 199}, {236, 232, 224}, 1);
  s.paint({80, 60, 179, 199}, {236, 150, 180}, 1);  // body
  s.paint({180, 90, 229, 169}, {236, 150, 180}, 2);  // handle ring
  s.paint({180, 105, 214, 154}, {236, 232, 224}, 1);
  s.paint({105, 100, 154, 149}, {250, 210, 60}, 3);  // sticker
  s.paint({250, 40, 299, 209}, {18, 18, 20}, 4);     // phone
  c.object_captions[region_key(BBox{80, 60, 229, 199})] =
      "A pink mug with a cartoon character on it.";
  c.object_captions[region_key(BBox{250, 40, 299, 209})] = "A black rectangular object.";

  const std::string grab = "Grab the mug";
  c.questions = {grab};
  c.script = [=](ScriptedChat& chat, const Session& session) {
    const SemanticObject& mug = object_with_member(session, 2);
    const std::string follow_up = "Which part of the mug may solve the request?";
    chat.on_stage1(grab, stage1_reply("No", "You can grab the mug by its handle.",
                                      {{mug.object_id, follow_up}}, {mug.bbox}));
    chat.on_stage2(follow_up, "{'answer': 'Hold the mug by its handle.', "
                              "'whole segments': 'Yes', 'which segment': [" +
                                  std::to_string(label_of(mug, 2)) +
                                  "], 'target position': []}");
  };
  return c;
}

// 300x200 table top with a cake and a plate; nothing else.
CaseSpec cake_case() {
  CaseSpec c{"cake", Scene(300, 200, {120, 84, 52}), "a cake next to a plate on a table", {}, {}, {}};
  Scene& s = c.scene;
  s.paint({40, 50, 159, 159}, {250, 240, 230}, 1);   // cake
  s.paint({45, 55, 154, 74}, {200, 60, 90}, 2);      // icing
  s.paint({190, 90, 269, 159}, {230, 230, 235}, 3);  // plate
  c.object_captions[region_key(BBox{40, 50, 159, 159})] = "a white cake with red icing";
  c.object_captions[region_key(BBox{190, 90, 269, 159})] = "an empty white plate";

  const std::string cake = "where is the cake?";
  const std::string umbrella = "where is the umbrella?";
  c.questions = {cake, umbrella};
  c.script = [=](ScriptedChat& chat, const Session& session) {
    const SemanticObject& obj = object_with_member(session, 1);
    chat.on_stage1(cake, stage1_reply("Yes", "The cake is on the left side of the table.",
                                      {{obj.object_id, "Where is the cake?"}}, {obj.bbox}));
    chat.on_stage1(umbrella, stage1_reply("No", "There is no umbrella in the image.", {}, {}));
  };
  return c;
}

// A single pixel with nothing to segment.
CaseSpec blank_case() {
  CaseSpec c{"blank", Scene(1, 1, {255, 255, 255}), "a white background", {}, {}, {}};
  c.questions = {"where is the door?"};
  c.script = [](ScriptedChat&, const Session&) {};
  return c;
}

void write_case_inputs(const fs::path& dir, const CaseSpec& c) {
  fs::create_directories(dir);
  write_file_atomic((dir / "image.png").string(), encode_png(c.scene.image));
  write_file_atomic((dir / "segments.png").string(), encode_gray_png(c.scene.labels));
  ordered_json captions = ordered_json::object();
  captions["full"] = c.scene_caption;
  for (const auto& [key, text] : c.object_captions) captions[key] = text;
  write_file_atomic((dir / "captions.json").string(), json_text(captions));
  write_file_atomic((dir / "transcripts.json").string(), std::string("[]\n"));
}

void record_case(const fs::path& root, const CaseSpec& c) {
  const Backends mocks = make_mock_backends(root.string());
  auto scripted = std::make_shared<ScriptedChat>();
  auto recorder = std::make_shared<RecordingChat>(scripted);
  const Pipeline pipeline(Backends{mocks.segmenter, mocks.captioner, recorder});

  const Bytes image = read_file((root / c.name / "image.png").string());
  Session session = pipeline.detect_objects(image);
  c.script(*scripted, session);
  for (const auto& q : c.questions) {
    const QueryRecord r = pipeline.answer_query(session, q);
    std::cerr << c.name << ": \"" << q << "\" -> " << to_string(r.outcome) << "\n";
  }
  write_file_atomic((root / c.name / "transcripts.json").string(),
                    transcripts_to_json(recorder->transcripts()).dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regenerate mock-backend fixtures"};
  std::string out = "fixtures";
  std::string golden = "tests/data/golden";
  app.add_option("--out", out, "Fixture root directory")->capture_default_str();
  app.add_option("--golden", golden, "Directory holding the reference chat replies")
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<CaseSpec> cases;
    cases.push_back(door_case(golden));
    cases.push_back(mug_case());
    cases.push_back(cake_case());
    cases.push_back(blank_case());
    // Inputs for every case must exist before the mock store is loaded.
    for (const auto& c : cases) write_case_inputs(fs::path(out) / c.name, c);
    for (const auto& c : cases) record_case(out, c);
  } catch (const std::exception& e) {
    std::cerr << "make_fixtures: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
