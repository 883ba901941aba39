#include "keyfield/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

#include "keyfield/error.hpp"
#include "keyfield/tolerant_json.hpp"

namespace keyfield {

namespace resources {
std::string_view find_prompt(std::string_view name);  // generated
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
  for (std::size_t pos = text_.find("{{"); pos != std::string::npos;
       pos = text_.find("{{", pos + 2)) {
    const auto end = text_.find("}}", pos + 2);
    if (end == std::string::npos) throw Error(ErrorCode::internal, "unterminated template slot");
    slots_.push_back(text_.substr(pos + 2, end - pos - 2));
  }
}

PromptTemplate PromptTemplate::named(std::string_view resource) {
  const std::string_view text = resources::find_prompt(resource);
  if (text.data() == nullptr) {
    throw Error(ErrorCode::internal, "unknown prompt template " + std::string(resource));
  }
  return PromptTemplate(std::string(text));
}

std::string PromptTemplate::render(const std::map<std::string, std::string>& values) const {
  for (const auto& [name, value] : values) {
    if (std::find(slots_.begin(), slots_.end(), name) == slots_.end()) {
      throw Error(ErrorCode::internal, "template has no slot named " + name);
    }
  }
  std::string out;
  std::size_t pos = 0;
  for (;;) {
    const auto open = text_.find("{{", pos);
    if (open == std::string::npos) break;
    const auto close = text_.find("}}", open + 2);
    out.append(text_, pos, open - pos);
    const std::string name = text_.substr(open + 2, close - open - 2);
    const auto it = values.find(name);
    if (it == values.end()) throw Error(ErrorCode::internal, "no value for template slot " + name);
    out += it->second;
    pos = close + 2;
  }
  out.append(text_, pos, std::string::npos);
  return out;
}

namespace {

const PromptTemplate& stage1_system() {
  static const PromptTemplate t = PromptTemplate::named("stage1_system.v1.txt");
  return t;
}
const PromptTemplate& stage1_object_line() {
  static const PromptTemplate t = PromptTemplate::named("stage1_object_line.v1.txt");
  return t;
}
const PromptTemplate& stage1_user() {
  static const PromptTemplate t = PromptTemplate::named("stage1_user.v1.txt");
  return t;
}
const PromptTemplate& stage2_system() {
  static const PromptTemplate t = PromptTemplate::named("stage2_system.v1.txt");
  return t;
}
const PromptTemplate& stage2_user_question() {
  static const PromptTemplate t = PromptTemplate::named("stage2_user_question.v1.txt");
  return t;
}
const PromptTemplate& stage2_user_matrix() {
  static const PromptTemplate t = PromptTemplate::named("stage2_user_matrix.v1.txt");
  return t;
}
const std::string& correction_text() {
  static const std::string t = PromptTemplate::named("correction.v1.txt").render({});
  return t;
}

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

PromptObject to_prompt_object(const SemanticObject& object) {
  return {object.object_id, object.descriptor,
          {object.bbox.x1, object.bbox.y1, object.bbox.x2, object.bbox.y2}};
}

ChatMessages build_stage1_prompt(std::string_view scene_caption,
                                 std::span<const PromptObject> objects,
                                 std::string_view question) {
  if (objects.empty()) {
    throw Error(ErrorCode::invalid_input, "stage 1 requires at least one detected object");
  }
  if (blank(question)) throw Error(ErrorCode::invalid_input, "question must not be empty");
  std::string list;
  for (const auto& o : objects) {
    if (!list.empty()) list += '\n';
    list += stage1_object_line().render({{"id", std::to_string(o.id)},
                                         {"descriptor", o.descriptor},
                                         {"x1", std::to_string(o.position[0])},
                                         {"y1", std::to_string(o.position[1])},
                                         {"x2", std::to_string(o.position[2])},
                                         {"y2", std::to_string(o.position[3])}});
  }
  return {
      {Role::system,
       stage1_system().render({{"scene_caption", std::string(scene_caption)}, {"object_list", list}})},
      {Role::user, stage1_user().render({{"question", std::string(question)}})},
  };
}

ChatMessages build_stage1_prompt(std::string_view scene_caption,
                                 std::span<const SemanticObject> objects,
                                 std::string_view question) {
  std::vector<PromptObject> list;
  list.reserve(objects.size());
  for (const auto& o : objects) list.push_back(to_prompt_object(o));
  return build_stage1_prompt(scene_caption, list, question);
}

ChatMessages build_stage2_prompt(std::string_view descriptor, std::string_view follow_up,
                                 std::string_view matrix_text, std::string_view ocr_text) {
  if (matrix_text.empty()) throw Error(ErrorCode::invalid_input, "matrix text must not be empty");
  return {
      {Role::system, stage2_system().render({{"descriptor", std::string(descriptor)}})},
      {Role::user, stage2_user_question().render({{"follow_up", std::string(follow_up)}})},
      {Role::user, stage2_user_matrix().render(
                       {{"matrix", std::string(matrix_text)}, {"ocr_text", std::string(ocr_text)}})},
  };
}

// ---------------------------------------------------------------------------
// Reply parsing
// ---------------------------------------------------------------------------

std::string_view to_string(YesNo v) { return v == YesNo::yes ? "Yes" : "No"; }

namespace {

using Json = nlohmann::ordered_json;

Error schema_error(const std::string& message) {
  return Error(ErrorCode::parse_failure, "reply does not follow the schema: " + message);
}

// Lowercase alphanumerics only: "Objects name", "objects_name" and
// "OBJECTS-NAME:" all become "objectsname".
std::string canonical_key(std::string_view key) {
  std::string out;
  for (const unsigned char c : key) {
    if (std::isalnum(c)) out += static_cast<char>(std::tolower(c));
  }
  return out;
}

std::map<std::string, Json> canonical_members(const Json& obj) {
  std::map<std::string, Json> out;
  for (const auto& [key, value] : obj.items()) out[canonical_key(key)] = value;
  return out;
}

const Json& require(const std::map<std::string, Json>& members, const std::string& key,
                    std::string_view display) {
  const auto it = members.find(key);
  if (it == members.end()) throw schema_error("missing key \"" + std::string(display) + "\"");
  return it->second;
}

const Json* optional_member(const std::map<std::string, Json>& members, const std::string& key) {
  const auto it = members.find(key);
  return it == members.end() || it->second.is_null() ? nullptr : &it->second;
}

YesNo to_yes_no(const Json& v, std::string_view key) {
  if (v.is_boolean()) return v.get<bool>() ? YesNo::yes : YesNo::no;
  if (v.is_string()) {
    const std::string word = canonical_key(v.get<std::string>());
    if (word == "yes" || word == "true") return YesNo::yes;
    if (word == "no" || word == "false") return YesNo::no;
  }
  throw schema_error("\"" + std::string(key) + "\" must be Yes or No, got " + v.dump());
}

int to_int(const Json& v, std::string_view key) {
  if (v.is_number_integer()) return v.get<int>();
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (std::floor(d) == d && std::abs(d) < 1e9) return static_cast<int>(d);
  }
  if (v.is_string()) {
    const std::string s = normalize_whitespace(v.get<std::string>());
    int out = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (!s.empty() && res.ec == std::errc{} && res.ptr == s.data() + s.size()) return out;
  }
  throw schema_error("\"" + std::string(key) + "\" expects integers, got " + v.dump());
}

std::string to_text(const Json& v, std::string_view key) {
  if (v.is_string()) return normalize_whitespace(v.get<std::string>());
  if (v.is_number()) return v.dump();
  throw schema_error("\"" + std::string(key) + "\" must be text");
}

const Json& require_array(const Json& v, std::string_view key) {
  if (!v.is_array()) throw schema_error("\"" + std::string(key) + "\" must be a list");
  return v;
}

Json extract(std::string_view reply) { return tolerant_json_extract(reply); }

}  // namespace

Stage1Reply parse_stage1(std::string_view text) {
  const auto members = canonical_members(extract(text));
  Stage1Reply out;
  out.answer = to_yes_no(require(members, "answer", "Answer"), "Answer");
  out.reply = to_text(require(members, "reply", "Reply"), "Reply");

  if (const Json* objects = optional_member(members, "objectsname")) {
    for (const auto& entry : require_array(*objects, "Objects name")) {
      if (!entry.is_array() || entry.size() < 2) {
        throw schema_error("each \"Objects name\" entry must be [object id, question]");
      }
      out.objects.push_back({to_int(entry[0], "Objects name"), to_text(entry[1], "Objects name")});
    }
  }
  if (const Json* positions = optional_member(members, "position")) {
    for (const auto& entry : require_array(*positions, "Position")) {
      if (!entry.is_array() || entry.size() != 4) {
        throw schema_error("each \"Position\" entry must be [x1,y1,x2,y2]");
      }
      out.positions.push_back(BBox{to_int(entry[0], "Position"), to_int(entry[1], "Position"),
                                   to_int(entry[2], "Position"), to_int(entry[3], "Position")}
                                  .normalized());
    }
  }
  if (out.objects.size() != out.positions.size()) {
    throw schema_error("\"Objects name\" and \"Position\" must have the same length");
  }
  return out;
}

Stage2Reply parse_stage2(std::string_view text) {
  const auto members = canonical_members(extract(text));
  Stage2Reply out;
  out.answer = to_text(require(members, "answer", "answer"), "answer");
  out.whole_segments =
      to_yes_no(require(members, "wholesegments", "whole segments"), "whole segments");

  if (const Json* which = optional_member(members, "whichsegment")) {
    if (which->is_array()) {
      for (const auto& v : *which) out.which_segment.push_back(to_int(v, "which segment"));
    } else {
      out.which_segment.push_back(to_int(*which, "which segment"));
    }
  }
  if (const Json* target = optional_member(members, "targetposition")) {
    for (const auto& entry : require_array(*target, "target position")) {
      if (!entry.is_array() || (entry.size() != 2 && entry.size() != 4)) {
        throw schema_error("\"target position\" entries must be [x,y] or [x1,y1,x2,y2]");
      }
      if (entry.size() == 2) {
        out.target_position.emplace_back(
            MatrixPoint{to_int(entry[0], "target position"), to_int(entry[1], "target position")});
      } else {
        out.target_position.emplace_back(
            MatrixRect{to_int(entry[0], "target position"), to_int(entry[1], "target position"),
                       to_int(entry[2], "target position"), to_int(entry[3], "target position")});
      }
    }
  }
  if (out.whole_segments == YesNo::yes && out.which_segment.empty()) {
    throw schema_error("\"whole segments\" is Yes but \"which segment\" is empty");
  }
  if (out.whole_segments == YesNo::no && out.target_position.empty()) {
    throw schema_error("\"whole segments\" is No but \"target position\" is empty");
  }
  return out;
}

nlohmann::json stage1_to_json(const Stage1Reply& reply) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : reply.objects) objects.push_back({o.object_id, o.follow_up_question});
  nlohmann::json positions = nlohmann::json::array();
  for (const auto& b : reply.positions) positions.push_back({b.x1, b.y1, b.x2, b.y2});
  return {{"Answer", to_string(reply.answer)},
          {"Reply", reply.reply},
          {"Objects name", objects},
          {"Position", positions}};
}

nlohmann::json stage2_to_json(const Stage2Reply& reply) {
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : reply.target_position) {
    if (const auto* p = std::get_if<MatrixPoint>(&r)) {
      regions.push_back({p->x, p->y});
    } else {
      const auto& q = std::get<MatrixRect>(r);
      regions.push_back({q.x1, q.y1, q.x2, q.y2});
    }
  }
  return {{"answer", reply.answer},
          {"whole segments", to_string(reply.whole_segments)},
          {"which segment", reply.which_segment},
          {"target position", regions}};
}

std::string emit_stage1(const Stage1Reply& reply) { return stage1_to_json(reply).dump(); }
std::string emit_stage2(const Stage2Reply& reply) { return stage2_to_json(reply).dump(); }

// ---------------------------------------------------------------------------
// Corrective re-prompt loop
// ---------------------------------------------------------------------------

namespace {

template <typename Reply, typename Parse>
StageOutcome<Reply> run_stage(ChatModel& chat, const ChatMessages& initial, Parse parse) {
  StageOutcome<Reply> outcome;
  ChatMessages messages = initial;
  for (int attempt = 0; attempt <= kMaxCorrectiveReprompts; ++attempt) {
    ChatExchange exchange = chat.complete(messages);
    outcome.exchanges.push_back(exchange);
    try {
      outcome.reply = parse(exchange.reply);
      outcome.failure.clear();
      return outcome;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::parse_failure) throw;
      outcome.failure = e.what();
    }
    messages.push_back({Role::assistant, exchange.reply});
    messages.push_back({Role::user, correction_text()});
  }
  return outcome;
}

}  // namespace

StageOutcome<Stage1Reply> run_stage1(ChatModel& chat, const ChatMessages& messages) {
  return run_stage<Stage1Reply>(chat, messages, [](std::string_view r) { return parse_stage1(r); });
}

StageOutcome<Stage2Reply> run_stage2(ChatModel& chat, const ChatMessages& messages) {
  return run_stage<Stage2Reply>(chat, messages, [](std::string_view r) { return parse_stage2(r); });
}

}  // namespace keyfield
