#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "keyfield/backends.hpp"
#include "keyfield/mask_engine.hpp"

namespace keyfield {

/// A text template with `{{name}}` slots. Rendering is single-pass: slot
/// values are inserted verbatim and never re-expanded.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string text);

  // Loads a template embedded from resources/prompts.
  static PromptTemplate named(std::string_view resource);

  // Throws Error(internal) when a slot is missing from `values` or a value is
  // supplied for a slot the template does not have.
  std::string render(const std::map<std::string, std::string>& values) const;

  const std::string& text() const noexcept { return text_; }
  const std::vector<std::string>& slots() const noexcept { return slots_; }

 private:
  std::string text_;
  std::vector<std::string> slots_;
};

// One entry of the stage-1 object list. `position` is printed in the given
// order.
struct PromptObject {
  int id = 0;
  std::string descriptor;
  std::array<int, 4> position{};
};

PromptObject to_prompt_object(const SemanticObject& object);

ChatMessages build_stage1_prompt(std::string_view scene_caption,
                                 std::span<const PromptObject> objects,
                                 std::string_view question);
ChatMessages build_stage1_prompt(std::string_view scene_caption,
                                 std::span<const SemanticObject> objects,
                                 std::string_view question);

ChatMessages build_stage2_prompt(std::string_view descriptor, std::string_view follow_up,
                                 std::string_view matrix_text, std::string_view ocr_text = {});

enum class YesNo { yes, no };
std::string_view to_string(YesNo v);

struct ObjectQuery {
  int object_id = 0;
  std::string follow_up_question;
  friend bool operator==(const ObjectQuery&, const ObjectQuery&) = default;
};

struct Stage1Reply {
  YesNo answer = YesNo::no;
  std::string reply;
  std::vector<ObjectQuery> objects;
  std::vector<BBox> positions;  // canonical (x1, y1, x2, y2)
  friend bool operator==(const Stage1Reply&, const Stage1Reply&) = default;
};

struct Stage2Reply {
  std::string answer;
  YesNo whole_segments = YesNo::yes;
  std::vector<int> which_segment;
  std::vector<MatrixRegion> target_position;
  friend bool operator==(const Stage2Reply&, const Stage2Reply&) = default;
};

// Both parsers throw Error(parse_failure) for unrecoverable JSON and for
// schema violations; the message names the offending key.
Stage1Reply parse_stage1(std::string_view reply);
Stage2Reply parse_stage2(std::string_view reply);

// Strict JSON renderings using the reply schemas' key spellings.
std::string emit_stage1(const Stage1Reply& reply);
std::string emit_stage2(const Stage2Reply& reply);

nlohmann::json stage1_to_json(const Stage1Reply& reply);
nlohmann::json stage2_to_json(const Stage2Reply& reply);

inline constexpr int kMaxCorrectiveReprompts = 2;

template <typename Reply>
struct StageOutcome {
  std::optional<Reply> reply;
  std::vector<ChatExchange> exchanges;
  std::string failure;  // last parse error when `reply` is empty
};

// Sends `messages`; on a parse failure appends the bad reply plus a
// corrective user message and retries, for at most 1 + kMaxCorrectiveReprompts
// calls. Transport errors propagate as Error(backend_unavailable).
StageOutcome<Stage1Reply> run_stage1(ChatModel& chat, const ChatMessages& messages);
StageOutcome<Stage2Reply> run_stage2(ChatModel& chat, const ChatMessages& messages);

}  // namespace keyfield
