#include "keyfield/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "keyfield/error.hpp"

namespace keyfield {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

constexpr std::string_view kNoObjectsAnswer =
    "I cannot answer this question because no objects were detected in the image.";
constexpr std::string_view kUnparseableAnswer =
    "I could not obtain a well-formed answer from the language model for this question.";

std::string nonempty_or(const std::string& text, std::string_view fallback) {
  return normalize_whitespace(text).empty() ? std::string(fallback) : text;
}

}  // namespace

std::string_view to_string(QueryOutcome outcome) {
  switch (outcome) {
    case QueryOutcome::answered: return "answered";
    case QueryOutcome::highlighted: return "highlighted";
    case QueryOutcome::refused: return "refused";
    case QueryOutcome::parse_failure: return "parse_failure";
    case QueryOutcome::backend_failure: return "backend_failure";
    case QueryOutcome::invalid_model_output: return "invalid_model_output";
  }
  return "answered";
}

QueryOutcome query_outcome_from_string(std::string_view text) {
  for (const auto o : {QueryOutcome::answered, QueryOutcome::highlighted, QueryOutcome::refused,
                       QueryOutcome::parse_failure, QueryOutcome::backend_failure,
                       QueryOutcome::invalid_model_output}) {
    if (to_string(o) == text) return o;
  }
  throw Error(ErrorCode::invalid_input, "unknown query outcome " + std::string(text));
}

const SemanticObject* Session::find_object(int object_id) const {
  for (const auto& o : objects) {
    if (o.object_id == object_id) return &o;
  }
  return nullptr;
}

Pipeline::Pipeline(Backends backends, PipelineOptions options)
    : backends_(std::move(backends)), options_(options) {
  if (!backends_.segmenter || !backends_.captioner || !backends_.chat) {
    throw Error(ErrorCode::internal, "pipeline requires all three backends");
  }
}

Session Pipeline::detect_objects(std::span<const std::uint8_t> image) const {
  const RgbImage decoded = decode_image(image);

  Session session;
  session.image.assign(image.begin(), image.end());
  session.image_digest = sha256_hex(image);
  session.width = decoded.cols();
  session.height = decoded.rows();

  std::vector<RawSegment> segments;
  try {
    segments = backends_.segmenter->segment(image);
  } catch (const Error& e) {
    throw e.with_stage("segment");
  }
  for (const auto& s : segments) {
    if (s.mask.rows() != session.height || s.mask.cols() != session.width) {
      throw Error(ErrorCode::backend_unavailable,
                  "segmenter returned a mask that does not match the image", "segment");
    }
  }

  const std::int64_t image_area = static_cast<std::int64_t>(session.width) * session.height;
  const auto kept = mask::filter_masks(segments, image_area, options_.min_area_fraction);
  if (!kept.empty()) {
    const LabelMap labels = mask::resolve_overlaps(kept);
    session.objects = mask::compose_objects(labels, kept, options_.containment_threshold);
  }

  try {
    for (auto& object : session.objects) {
      object.descriptor = backends_.captioner->caption(image, object.bbox).text;
    }
    session.scene_caption = backends_.captioner->caption(image, std::nullopt).text;
  } catch (const Error& e) {
    throw e.with_stage("caption");
  }
  return session;
}

QueryRecord Pipeline::answer_query(Session& session, std::string_view question) const {
  if (normalize_whitespace(question).empty()) {
    throw Error(ErrorCode::invalid_input, "question must not be empty");
  }
  QueryRecord record;
  record.query_id = "q" + std::to_string(session.history.size());
  record.question = std::string(question);

  if (session.objects.empty()) {
    record.outcome = QueryOutcome::refused;
    record.result.answer_text = std::string(kNoObjectsAnswer);
    record.diagnostic = "no objects detected; retrieval skipped";
    session.history.push_back(record);
    return record;
  }

  const auto stage1_start = Clock::now();
  StageOutcome<Stage1Reply> stage1;
  try {
    stage1 = run_stage1(*backends_.chat,
                        build_stage1_prompt(session.scene_caption, session.objects, question));
  } catch (const Error& e) {
    record.timing.stage1_ms = elapsed_ms(stage1_start);
    record.outcome = QueryOutcome::backend_failure;
    record.result.answer_text = "The language model is currently unavailable.";
    record.diagnostic = std::string("stage1: ") + e.what();
    session.history.push_back(record);
    return record;
  }
  record.timing.stage1_ms = elapsed_ms(stage1_start);
  record.exchanges = stage1.exchanges;

  if (!stage1.reply) {
    record.outcome = QueryOutcome::parse_failure;
    record.result.answer_text = std::string(kUnparseableAnswer);
    record.diagnostic = "stage1: " + stage1.failure;
    session.history.push_back(record);
    return record;
  }
  record.stage1 = *stage1.reply;
  const Stage1Reply& s1 = *record.stage1;

  if (s1.answer == YesNo::yes) {
    record.outcome = QueryOutcome::answered;
    record.result.answer_text = nonempty_or(s1.reply, "Yes.");
    // The box comes from our own detection, never from model-supplied pixels.
    if (!s1.objects.empty()) {
      if (const SemanticObject* obj = session.find_object(s1.objects.front().object_id)) {
        record.target_object = obj->object_id;
        record.result.fallback_box = obj->bbox;
      } else {
        record.diagnostic = "stage1 referenced unknown object " +
                            std::to_string(s1.objects.front().object_id);
      }
    }
  } else if (s1.objects.empty()) {
    record.outcome = QueryOutcome::refused;
    record.result.answer_text = nonempty_or(s1.reply, "I cannot answer this question.");
  } else {
    record.result.answer_text = nonempty_or(s1.reply, kUnparseableAnswer);
    run_key_field_stage(session, record);
  }

  if (record.result.highlight_mask || record.result.fallback_box) {
    const auto render_start = Clock::now();
    record.result.annotated_image =
        render_overlay(session.image,
                       record.result.highlight_mask ? &*record.result.highlight_mask : nullptr,
                       record.result.fallback_box, options_.overlay);
    record.result.overlay_digest = sha256_hex(record.result.annotated_image);
    record.timing.render_ms = elapsed_ms(render_start);
  }
  session.history.push_back(record);
  return record;
}

void Pipeline::run_key_field_stage(const Session& session, QueryRecord& record) const {
  const Stage1Reply& s1 = *record.stage1;
  for (std::size_t i = 1; i < s1.objects.size(); ++i) {
    record.skipped_objects.push_back(s1.objects[i].object_id);
  }
  const ObjectQuery& target = s1.objects.front();
  const SemanticObject* object = session.find_object(target.object_id);
  if (!object) {
    record.outcome = QueryOutcome::invalid_model_output;
    record.diagnostic = "stage1 referenced unknown object " + std::to_string(target.object_id);
    return;
  }
  record.target_object = object->object_id;

  const auto stage2_start = Clock::now();
  const SpatialMatrix matrix = mask::downscale_object(*object, options_.matrix_long_side);
  StageOutcome<Stage2Reply> stage2;
  try {
    stage2 = run_stage2(*backends_.chat,
                        build_stage2_prompt(object->descriptor, target.follow_up_question,
                                            mask::serialize_matrix(matrix), ""));
  } catch (const Error& e) {
    record.timing.stage2_ms = elapsed_ms(stage2_start);
    record.outcome = QueryOutcome::backend_failure;
    record.diagnostic = std::string("stage2: ") + e.what();
    return;
  }
  record.timing.stage2_ms = elapsed_ms(stage2_start);
  record.exchanges.insert(record.exchanges.end(), stage2.exchanges.begin(),
                          stage2.exchanges.end());
  if (!stage2.reply) {
    record.outcome = QueryOutcome::parse_failure;
    record.diagnostic = "stage2: " + stage2.failure;
    return;
  }
  record.stage2 = *stage2.reply;
  const Stage2Reply& s2 = *record.stage2;

  Mask highlight;
  try {
    if (s2.whole_segments == YesNo::yes) {
      highlight = mask::upscale_selection(*object, s2.which_segment);
      const std::set<int> unique(s2.which_segment.begin(), s2.which_segment.end());
      record.result.selected_segments.assign(unique.begin(), unique.end());
    } else {
      highlight = mask::region_to_mask(*object, matrix, s2.target_position);
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::invalid_input) throw;
    record.outcome = QueryOutcome::invalid_model_output;
    record.diagnostic = std::string("stage2: ") + e.what();
    return;
  }

  if (!normalize_whitespace(s2.answer).empty()) record.result.answer_text = s2.answer;
  if (count_nonzero(highlight) == 0) {
    record.outcome = QueryOutcome::answered;
    record.diagnostic = "stage2: selected region does not overlap the object";
    return;
  }
  record.outcome = QueryOutcome::highlighted;
  record.result.highlight_mask = std::move(highlight);
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

void draw_box(RgbImage& image, const BBox& box, Rgb color, int thickness) {
  const BBox clipped{std::max(box.x1, 0), std::max(box.y1, 0),
                     std::min(box.x2, image.cols() - 1), std::min(box.y2, image.rows() - 1)};
  if (!clipped.valid()) return;
  for (int y = clipped.y1; y <= clipped.y2; ++y) {
    for (int x = clipped.x1; x <= clipped.x2; ++x) {
      const bool edge = x - box.x1 < thickness || box.x2 - x < thickness ||
                        y - box.y1 < thickness || box.y2 - y < thickness;
      if (edge) image.at(y, x) = color;
    }
  }
}

std::uint8_t blend(std::uint8_t base, std::uint8_t over, double alpha) {
  return static_cast<std::uint8_t>(std::lround((1.0 - alpha) * base + alpha * over));
}

}  // namespace

bool needs_red_box(const Mask& highlight, const OverlayStyle& style) {
  const std::int64_t area = count_nonzero(highlight);
  return area > 0 && static_cast<double>(area) <
                         style.tiny_fraction * static_cast<double>(highlight.size());
}

Bytes render_overlay(std::span<const std::uint8_t> image, const Mask* highlight,
                     const std::optional<BBox>& fallback_box, const OverlayStyle& style) {
  RgbImage canvas = decode_image(image);
  if (highlight) {
    if (highlight->rows() != canvas.rows() || highlight->cols() != canvas.cols()) {
      throw Error(ErrorCode::internal, "highlight mask does not match the image dimensions");
    }
    for (int r = 0; r < canvas.rows(); ++r) {
      for (int c = 0; c < canvas.cols(); ++c) {
        if (!highlight->at(r, c)) continue;
        Rgb& px = canvas.at(r, c);
        px = {blend(px.r, style.highlight.r, style.opacity),
              blend(px.g, style.highlight.g, style.opacity),
              blend(px.b, style.highlight.b, style.opacity)};
      }
    }
    if (needs_red_box(*highlight, style)) {
      const BBox extent = nonzero_extent(*highlight);
      const int pad = style.box_thickness + 1;
      draw_box(canvas, {extent.x1 - pad, extent.y1 - pad, extent.x2 + pad, extent.y2 + pad},
               style.box, style.box_thickness);
    }
  } else if (fallback_box) {
    draw_box(canvas, *fallback_box, style.box, style.box_thickness);
  }
  return encode_png(canvas);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

json bbox_json(const BBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

BBox bbox_from(const json& j) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

std::string label_map_png(const LabelMap& labels) {
  Grid<std::uint8_t> gray(labels.rows(), labels.cols(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto v = labels.data()[i];
    if (v < 0 || v > 255) {
      throw Error(ErrorCode::internal, "objects with more than 255 segments cannot be archived");
    }
    gray.data()[i] = static_cast<std::uint8_t>(v);
  }
  return base64_encode(encode_gray_png(gray));
}

LabelMap label_map_from_png(const std::string& b64) {
  const auto gray = decode_gray_png(base64_decode(b64));
  LabelMap out(gray.rows(), gray.cols(), 0);
  for (std::size_t i = 0; i < gray.size(); ++i) out.data()[i] = gray.data()[i];
  return out;
}

std::string mask_png(const Mask& m) {
  Grid<std::uint8_t> gray(m.rows(), m.cols(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) gray.data()[i] = m.data()[i] ? 255 : 0;
  return base64_encode(encode_gray_png(gray));
}

Mask mask_from_png(const std::string& b64) {
  auto gray = decode_gray_png(base64_decode(b64));
  for (auto& v : gray.data()) v = v ? 1 : 0;
  return gray;
}

json record_json(const QueryRecord& r) {
  json exchanges = json::array();
  for (const auto& e : r.exchanges) {
    exchanges.push_back({{"messages", messages_to_json(e.messages)}, {"reply", e.reply}});
  }
  json j = {
      {"query_id", r.query_id},
      {"question", r.question},
      {"outcome", to_string(r.outcome)},
      {"answer_text", r.result.answer_text},
      {"diagnostic", r.diagnostic},
      {"stage1", r.stage1 ? stage1_to_json(*r.stage1) : json(nullptr)},
      {"stage2", r.stage2 ? stage2_to_json(*r.stage2) : json(nullptr)},
      {"target_object", r.target_object ? json(*r.target_object) : json(nullptr)},
      {"skipped_objects", r.skipped_objects},
      {"selected_segments", r.result.selected_segments},
      {"fallback_box", r.result.fallback_box ? bbox_json(*r.result.fallback_box) : json(nullptr)},
      {"highlight_mask_png",
       r.result.highlight_mask ? json(mask_png(*r.result.highlight_mask)) : json(nullptr)},
      {"overlay_sha256",
       r.result.has_highlight() ? json(r.result.overlay_digest) : json(nullptr)},
      {"exchanges", exchanges},
  };
  return j;
}

QueryRecord record_from_json(const json& j) {
  QueryRecord r;
  r.query_id = j.at("query_id").get<std::string>();
  r.question = j.at("question").get<std::string>();
  r.outcome = query_outcome_from_string(j.at("outcome").get<std::string>());
  r.result.answer_text = j.at("answer_text").get<std::string>();
  r.diagnostic = j.at("diagnostic").get<std::string>();
  if (!j.at("stage1").is_null()) r.stage1 = parse_stage1(j.at("stage1").dump());
  if (!j.at("stage2").is_null()) r.stage2 = parse_stage2(j.at("stage2").dump());
  if (!j.at("target_object").is_null()) r.target_object = j.at("target_object").get<int>();
  r.skipped_objects = j.at("skipped_objects").get<std::vector<int>>();
  r.result.selected_segments = j.at("selected_segments").get<std::vector<int>>();
  if (!j.at("fallback_box").is_null()) r.result.fallback_box = bbox_from(j.at("fallback_box"));
  if (!j.at("highlight_mask_png").is_null()) {
    r.result.highlight_mask = mask_from_png(j.at("highlight_mask_png").get<std::string>());
  }
  if (!j.at("overlay_sha256").is_null()) {
    r.result.overlay_digest = j.at("overlay_sha256").get<std::string>();
  }
  for (const auto& e : j.at("exchanges")) {
    r.exchanges.push_back({messages_from_json(e.at("messages")), e.at("reply").get<std::string>(),
                           0.0, 0});
  }
  return r;
}

}  // namespace

json object_summary_json(const SemanticObject& object) {
  return {{"id", object.object_id},
          {"descriptor", object.descriptor},
          {"bbox", bbox_json(object.bbox)},
          {"segments", object.label_count()}};
}

json session_to_json(const Session& session) {
  json objects = json::array();
  for (const auto& o : session.objects) {
    objects.push_back({{"object_id", o.object_id},
                       {"descriptor", o.descriptor},
                       {"bbox", bbox_json(o.bbox)},
                       {"member_segments", o.member_segments},
                       {"label_map_png", label_map_png(o.label_map)}});
  }
  json history = json::array();
  for (const auto& r : session.history) history.push_back(record_json(r));
  return {{"format", "keyfield.session.v1"},
          {"session_id", session.session_id},
          {"image", {{"sha256", session.image_digest},
                     {"width", session.width},
                     {"height", session.height}}},
          {"scene_caption", session.scene_caption},
          {"objects", objects},
          {"history", history}};
}

Session session_from_json(const json& j, Bytes image) {
  if (j.value("format", std::string()) != "keyfield.session.v1") {
    throw Error(ErrorCode::invalid_input, "unsupported session archive format");
  }
  Session s;
  s.session_id = j.at("session_id").get<std::string>();
  s.image_digest = j.at("image").at("sha256").get<std::string>();
  s.width = j.at("image").at("width").get<int>();
  s.height = j.at("image").at("height").get<int>();
  if (sha256_hex(image) != s.image_digest) {
    throw Error(ErrorCode::invalid_input, "session image does not match its recorded digest");
  }
  s.image = std::move(image);
  s.scene_caption = j.at("scene_caption").get<std::string>();
  for (const auto& o : j.at("objects")) {
    SemanticObject obj;
    obj.object_id = o.at("object_id").get<int>();
    obj.descriptor = o.at("descriptor").get<std::string>();
    obj.bbox = bbox_from(o.at("bbox"));
    obj.member_segments = o.at("member_segments").get<std::vector<int>>();
    obj.label_map = label_map_from_png(o.at("label_map_png").get<std::string>());
    obj.image_width = s.width;
    obj.image_height = s.height;
    s.objects.push_back(std::move(obj));
  }
  for (const auto& r : j.at("history")) s.history.push_back(record_from_json(r));
  return s;
}

}  // namespace keyfield
