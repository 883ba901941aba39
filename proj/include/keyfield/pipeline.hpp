#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "keyfield/backends.hpp"
#include "keyfield/image.hpp"
#include "keyfield/mask_engine.hpp"
#include "keyfield/prompts.hpp"

namespace keyfield {

struct OverlayStyle {
  double opacity = 0.45;
  Rgb highlight{0, 170, 255};
  Rgb box{255, 0, 0};
  // Highlights covering less than this fraction of the image get a red box.
  double tiny_fraction = 0.01;
  int box_thickness = 2;
};

struct PipelineOptions {
  double min_area_fraction = mask::kDefaultMinAreaFraction;
  double containment_threshold = mask::kDefaultContainmentThreshold;
  int matrix_long_side = mask::kDefaultTargetLongSide;
  OverlayStyle overlay;
};

enum class QueryOutcome {
  answered,             // textual answer, possibly with a fallback box
  highlighted,          // key field localized to a pixel mask
  refused,              // the target object is not in the image
  parse_failure,        // chat replies unparseable after corrective re-prompts
  backend_failure,      // chat model unreachable
  invalid_model_output  // well-formed reply referencing unknown objects/labels/cells
};

std::string_view to_string(QueryOutcome outcome);
QueryOutcome query_outcome_from_string(std::string_view text);

struct HighlightResult {
  std::string answer_text;
  std::optional<Mask> highlight_mask;
  std::optional<BBox> fallback_box;
  std::vector<int> selected_segments;  // object-local labels
  Bytes annotated_image;               // PNG; empty when nothing is highlighted
  std::string overlay_digest;          // sha256 of annotated_image; survives archiving

  bool has_highlight() const noexcept { return !overlay_digest.empty(); }
};

struct StageTimings {
  double stage1_ms = 0.0;
  double stage2_ms = 0.0;
  double render_ms = 0.0;
};

struct QueryRecord {
  std::string query_id;
  std::string question;
  QueryOutcome outcome = QueryOutcome::answered;
  std::optional<Stage1Reply> stage1;
  std::optional<int> target_object;
  std::optional<Stage2Reply> stage2;
  std::vector<int> skipped_objects;  // further stage-1 targets, not processed
  HighlightResult result;
  std::string diagnostic;
  StageTimings timing;
  std::vector<ChatExchange> exchanges;
};

struct Session {
  std::string session_id;
  Bytes image;
  std::string image_digest;
  int width = 0;
  int height = 0;
  std::string scene_caption;
  std::vector<SemanticObject> objects;
  std::vector<QueryRecord> history;

  const SemanticObject* find_object(int object_id) const;
};

/// Three-stage flow: object detection once per image, then per query the
/// retrieval round, the optional key-field round, and overlay rendering.
class Pipeline {
 public:
  explicit Pipeline(Backends backends, PipelineOptions options = {});

  // Errors from the adapters propagate with the stage tag set to "segment"
  // or "caption".
  Session detect_objects(std::span<const std::uint8_t> image) const;

  // Appends exactly one record to session.history and returns a copy of it.
  // Chat failures degrade into the record instead of throwing.
  QueryRecord answer_query(Session& session, std::string_view question) const;

  const Backends& backends() const noexcept { return backends_; }
  const PipelineOptions& options() const noexcept { return options_; }

 private:
  void run_key_field_stage(const Session& session, QueryRecord& record) const;

  Backends backends_;
  PipelineOptions options_;
};

// Blends the mask over the image; adds a red box around a tiny mask, or draws
// `fallback_box` alone when there is no mask. Returns PNG bytes.
Bytes render_overlay(std::span<const std::uint8_t> image, const Mask* highlight,
                     const std::optional<BBox>& fallback_box, const OverlayStyle& style = {});

// Whether render_overlay would add the red box for this mask.
bool needs_red_box(const Mask& highlight, const OverlayStyle& style = {});

nlohmann::json session_to_json(const Session& session);
// `image` must match the digest recorded in `j`.
Session session_from_json(const nlohmann::json& j, Bytes image);

nlohmann::json object_summary_json(const SemanticObject& object);

}  // namespace keyfield
