#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "keyfield/grid.hpp"

namespace keyfield {

/// One binary mask produced by the segmenter. `area` is the number of set
/// pixels and is always positive for a well-formed segment.
struct RawSegment {
  int id = 0;
  Mask mask;
  std::int64_t area = 0;
};

// Builds a segment and counts its area. Throws on an empty mask.
RawSegment make_segment(int id, Mask mask);

/// An object assembled from one or more raw segments.
///
/// `label_map` covers `bbox` only. Its values are 0 (not part of the object)
/// or 1..K, where label k refers to `member_segments[k - 1]`; labels are
/// assigned in descending order of the members' pixel counts.
struct SemanticObject {
  int object_id = 0;
  LabelMap label_map;
  std::vector<int> member_segments;
  BBox bbox;
  int image_width = 0;
  int image_height = 0;
  std::string descriptor;

  int label_count() const noexcept { return static_cast<int>(member_segments.size()); }
  std::int64_t footprint_area() const { return count_nonzero(label_map); }
};

struct Ratio {
  int num = 1;
  int den = 1;
  double value() const noexcept { return static_cast<double>(num) / den; }
  friend bool operator==(const Ratio&, const Ratio&) = default;
};

/// Downscaled segment-id grid of an object. Cell (r, c) summarises the source
/// block rows [r*H/R, (r+1)*H/R) and cols [c*W/C, (c+1)*W/C) (integer
/// division), so scale_y = H/R and scale_x = W/C (stored reduced).
struct SpatialMatrix {
  Grid<std::int32_t> cells;
  Ratio scale_x;
  Ratio scale_y;
  std::map<int, int> legend;  // cell value -> member segment id
  int source_rows = 0;
  int source_cols = 0;

  int rows() const noexcept { return cells.rows(); }
  int cols() const noexcept { return cells.cols(); }
  int row_begin(int r) const noexcept;
  int col_begin(int c) const noexcept;
};

/// A point or an inclusive rectangle in matrix coordinates (x = column,
/// y = row).
struct MatrixPoint {
  int x = 0;
  int y = 0;
  friend bool operator==(const MatrixPoint&, const MatrixPoint&) = default;
};
struct MatrixRect {
  int x1 = 0;
  int y1 = 0;
  int x2 = 0;
  int y2 = 0;
  friend bool operator==(const MatrixRect&, const MatrixRect&) = default;
};
using MatrixRegion = std::variant<MatrixPoint, MatrixRect>;

namespace mask {

inline constexpr double kDefaultMinAreaFraction = 0.001;
inline constexpr double kDefaultContainmentThreshold = 0.8;
inline constexpr int kDefaultTargetLongSide = 20;

std::vector<RawSegment> filter_masks(std::span<const RawSegment> segments,
                                     std::int64_t image_area,
                                     double min_area_fraction = kDefaultMinAreaFraction);

// Per-pixel owner: the smallest-area covering segment, ties to the smaller id.
LabelMap resolve_overlaps(std::span<const RawSegment> segments);

std::vector<SemanticObject> compose_objects(
    const LabelMap& label_map, std::span<const RawSegment> segments,
    double containment_threshold = kDefaultContainmentThreshold);

SpatialMatrix downscale_label_map(const LabelMap& label_map,
                                  int target_long_side = kDefaultTargetLongSide);

// As above, with the legend filled from the object's member segment ids.
SpatialMatrix downscale_object(const SemanticObject& object,
                               int target_long_side = kDefaultTargetLongSide);

std::string serialize_matrix(const Grid<std::int32_t>& cells);
inline std::string serialize_matrix(const SpatialMatrix& matrix) {
  return serialize_matrix(matrix.cells);
}

// Inverse of serialize_matrix. Throws Error(parse_failure) on malformed text.
Grid<std::int32_t> parse_matrix(std::string_view text);

Mask upscale_selection(const SemanticObject& object, std::span<const int> selected_labels);

Mask region_to_mask(const SemanticObject& object, const SpatialMatrix& matrix,
                    std::span<const MatrixRegion> regions);

// Full-image binary mask of every nonzero pixel of the object.
Mask object_footprint(const SemanticObject& object);

}  // namespace mask
}  // namespace keyfield
