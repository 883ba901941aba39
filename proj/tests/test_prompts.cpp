#include <gtest/gtest.h>

#include <deque>
#include <random>

#include "keyfield/error.hpp"
#include "keyfield/mask_engine.hpp"
#include "keyfield/prompts.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace keyfield;
using keyfield::test::golden;
using keyfield::test::random_stage1;
using keyfield::test::random_stage2;

namespace {

const std::string kScene = "a close-up of a black door";
const std::string kDescriptor = "a black door with a handle";
const std::string kKickAnswer =
    "The region where the door can be kicked open is at the bottom half of the door.";

// Replays queued replies and records every request.
class QueueChat final : public ChatModel {
 public:
  explicit QueueChat(std::deque<std::string> replies) : replies_(std::move(replies)) {}
  ChatExchange complete(const ChatMessages& messages) override {
    requests.push_back(messages);
    if (replies_.empty()) throw Error(ErrorCode::backend_unavailable, "no more replies");
    std::string r = replies_.front();
    replies_.pop_front();
    return {messages, r, 0.0, 0};
  }
  BackendStatus health() override { return BackendStatus::ok; }
  std::vector<ChatMessages> requests;

 private:
  std::deque<std::string> replies_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Templates and prompt assembly
// ---------------------------------------------------------------------------

TEST(PromptTemplate, RendersSlotsOnce) {
  const PromptTemplate t("A {{x}} and {{y}}");
  EXPECT_EQ(t.render({{"x", "{{y}}"}, {"y", "2"}}), "A {{y}} and 2");
  EXPECT_EQ(t.slots(), (std::vector<std::string>{"x", "y"}));
}

TEST(PromptTemplate, MissingOrExtraSlotIsAnError) {
  const PromptTemplate t("{{a}}");
  EXPECT_THROW(t.render({}), Error);
  EXPECT_THROW(t.render({{"a", "1"}, {"b", "2"}}), Error);
  EXPECT_THROW(PromptTemplate::named("no_such_template"), Error);
}

TEST(Stage1Prompt, MatchesReferenceBytes) {
  const PromptObject door{0, kDescriptor, {2, 167, 1, 400}};
  const ChatMessages m =
      build_stage1_prompt(kScene, std::span<const PromptObject>(&door, 1), "where can I kick the door open?");
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].role, Role::system);
  EXPECT_EQ(m[0].content, golden("stage1_system.txt"));
  EXPECT_EQ(m[1].role, Role::user);
  EXPECT_EQ(m[1].content, golden("stage1_user.txt"));
}

TEST(Stage2Prompt, MatchesReferenceBytes) {
  const std::string matrix = mask::serialize_matrix(mask::parse_matrix(golden("door_matrix.txt")));
  const ChatMessages m = build_stage2_prompt(
      kDescriptor, "Can you show me the specific region where I can kick open the door?", matrix);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[0].role, Role::system);
  EXPECT_EQ(m[0].content, golden("stage2_system.txt"));
  EXPECT_EQ(m[1].role, Role::user);
  EXPECT_EQ(m[1].content, golden("stage2_user_question.txt"));
  EXPECT_EQ(m[2].role, Role::user);
  EXPECT_EQ(m[2].content, golden("stage2_user_matrix.txt"));
}

TEST(Stage1Prompt, ListsObjectsOnePerLine) {
  const PromptObject objs[] = {{0, "a mug", {1, 2, 3, 4}}, {1, "a phone", {5, 6, 7, 8}}};
  const auto m = build_stage1_prompt("a desk", objs, "Grab the mug");
  EXPECT_NE(m[0].content.find("[id] 0[Description]:a mug, Position:[1, 2, 3, 4]\n"
                              "[id] 1[Description]:a phone, Position:[5, 6, 7, 8]\n"),
            std::string::npos);
  EXPECT_EQ(m[1].content, "Question: Grab the mug");
}

TEST(Stage1Prompt, RejectsEmptyInputs) {
  const PromptObject o{0, "x", {0, 0, 1, 1}};
  EXPECT_THROW(build_stage1_prompt("s", std::span<const PromptObject>(), "q"), Error);
  EXPECT_THROW(build_stage1_prompt("s", std::span<const PromptObject>(&o, 1), "  "), Error);
  EXPECT_THROW(build_stage2_prompt("d", "q", ""), Error);
}

TEST(Stage1Prompt, SemanticObjectsUseCanonicalBox) {
  SemanticObject obj;
  obj.object_id = 3;
  obj.descriptor = "a cup";
  obj.bbox = {4, 5, 6, 7};
  const auto m = build_stage1_prompt("s", std::span<const SemanticObject>(&obj, 1), "q");
  EXPECT_NE(m[0].content.find("[id] 3[Description]:a cup, Position:[4, 5, 6, 7]"),
            std::string::npos);
}

TEST(Stage2Prompt, OcrTextSlot) {
  const auto m = build_stage2_prompt("a sign", "read it", "[\n[1]]", "EXIT");
  EXPECT_EQ(m[2].content, "Shape matrix:\n[\n[1]]\nText and position:[EXIT]");
}

// ---------------------------------------------------------------------------
// Reply parsing
// ---------------------------------------------------------------------------

TEST(ParseStage1, ReferenceReply) {
  const Stage1Reply r = parse_stage1(golden("stage1_reply.txt"));
  EXPECT_EQ(r.answer, YesNo::no);
  EXPECT_EQ(r.reply,
            "The image only provides information about a black door with a handle, but it does "
            "not specify any region where you can kick open the door.");
  ASSERT_EQ(r.objects.size(), 1u);
  EXPECT_EQ(r.objects[0],
            (ObjectQuery{0, "Can you specify the region where you can be kicked open?"}));
  ASSERT_EQ(r.positions.size(), 1u);
  EXPECT_EQ(r.positions[0], (BBox{1, 167, 2, 400}));
}

TEST(ParseStage2, ReferenceReply) {
  const Stage2Reply r = parse_stage2(golden("stage2_reply.txt"));
  EXPECT_EQ(r.answer, kKickAnswer);
  EXPECT_EQ(r.whole_segments, YesNo::yes);
  EXPECT_EQ(r.which_segment, (std::vector<int>{2, 3, 4, 5, 7}));
  EXPECT_TRUE(r.target_position.empty());
}

TEST(ParseStage1, RequiredKeysAndShapes) {
  EXPECT_THROW(parse_stage1(R"({"Reply": "x"})"), Error);
  EXPECT_THROW(parse_stage1(R"({"Answer": "Maybe", "Reply": "x"})"), Error);
  EXPECT_THROW(parse_stage1(R"({"Answer": "No", "Reply": "x", "Objects name": [[0, "q"]]})"),
               Error);
  EXPECT_THROW(parse_stage1(R"({"Answer": "No", "Reply": "x", "Position": [[1, 2, 3]],
                               "Objects name": [[0, "q"]]})"),
               Error);
  const auto r = parse_stage1(R"({"answer": "yes", "reply": "ok"})");
  EXPECT_EQ(r.answer, YesNo::yes);
  EXPECT_TRUE(r.objects.empty());
}

TEST(ParseStage1, MissingKeyIsNamed) {
  try {
    parse_stage1(R"({"Answer": "No"})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::parse_failure);
    EXPECT_NE(std::string(e.what()).find("Reply"), std::string::npos);
  }
}

TEST(ParseStage2, ConsistencyRules) {
  EXPECT_THROW(parse_stage2("{'answer': 'a', 'whole segments': 'Yes', 'which segment': [], "
                            "'target position': []}"),
               Error);
  EXPECT_THROW(parse_stage2("{'answer': 'a', 'whole segments': 'No', 'which segment': [], "
                            "'target position': []}"),
               Error);
  EXPECT_THROW(parse_stage2("{'answer': 'a', 'whole segments': 'No', "
                            "'target position': [[1, 2, 3]]}"),
               Error);
  const auto r = parse_stage2("{'answer': 'a', 'whole segments': 'No', 'which segment': [], "
                              "'target position': [[1, 2], [0, 17, 9, 21]]}");
  ASSERT_EQ(r.target_position.size(), 2u);
  EXPECT_EQ(r.target_position[0], MatrixRegion(MatrixPoint{1, 2}));
  EXPECT_EQ(r.target_position[1], MatrixRegion(MatrixRect{0, 17, 9, 21}));
}

TEST(ParseStage2, NumericStringsAreCoerced) {
  const auto r = parse_stage2(R"({"answer": "a", "whole segments": "Yes", "which segment": ["2", 3]})");
  EXPECT_EQ(r.which_segment, (std::vector<int>{2, 3}));
}


TEST(ParserProperty, StrictEmitThenTolerantParseIsIdentity) {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 1500; ++trial) {
    const Stage1Reply s1 = random_stage1(rng);
    ASSERT_EQ(parse_stage1(emit_stage1(s1)), s1) << emit_stage1(s1);
    const Stage2Reply s2 = random_stage2(rng);
    ASSERT_EQ(parse_stage2(emit_stage2(s2)), s2) << emit_stage2(s2);
  }
}

// ---------------------------------------------------------------------------
// Corrective re-prompts
// ---------------------------------------------------------------------------

TEST(RunStage, ReferenceRepliesNeedNoReprompt) {
  QueueChat chat({golden("stage1_reply.txt")});
  const auto out = run_stage1(chat, {{Role::system, "s"}, {Role::user, "q"}});
  ASSERT_TRUE(out.reply);
  EXPECT_EQ(chat.requests.size(), 1u);

  QueueChat chat2({golden("stage2_reply.txt")});
  const auto out2 = run_stage2(chat2, {{Role::system, "s"}, {Role::user, "q"}});
  ASSERT_TRUE(out2.reply);
  EXPECT_EQ(chat2.requests.size(), 1u);
}

TEST(RunStage, RecoversAfterCorrection) {
  QueueChat chat({"I think yes.", R"({"Answer": "Yes", "Reply": "Here."})"});
  const ChatMessages initial{{Role::system, "s"}, {Role::user, "q"}};
  const auto out = run_stage1(chat, initial);
  ASSERT_TRUE(out.reply);
  EXPECT_EQ(out.reply->reply, "Here.");
  ASSERT_EQ(chat.requests.size(), 2u);
  const ChatMessages& second = chat.requests[1];
  ASSERT_EQ(second.size(), 4u);
  EXPECT_EQ(second[2], (ChatMessage{Role::assistant, "I think yes."}));
  EXPECT_EQ(second[3].role, Role::user);
  EXPECT_EQ(second[3].content, PromptTemplate::named("correction.v1.txt").text());
}

TEST(RunStage, GivesUpAfterTwoCorrections) {
  QueueChat chat({"nope", "still nope", "nope again", "never sent"});
  const auto out = run_stage2(chat, {{Role::system, "s"}, {Role::user, "q"}});
  EXPECT_FALSE(out.reply);
  EXPECT_EQ(out.exchanges.size(), 3u);
  EXPECT_EQ(chat.requests.size(), 3u);
  EXPECT_FALSE(out.failure.empty());
}

TEST(RunStage, TransportErrorsPropagate) {
  QueueChat chat({});
  EXPECT_THROW(run_stage1(chat, {{Role::system, "s"}, {Role::user, "q"}}), Error);
}
