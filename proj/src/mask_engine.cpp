#include "keyfield/mask_engine.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <tuple>
#include <unordered_map>

#include "keyfield/error.hpp"

namespace keyfield {

int SpatialMatrix::row_begin(int r) const noexcept {
  return static_cast<int>(static_cast<std::int64_t>(r) * scale_y.num / scale_y.den);
}

int SpatialMatrix::col_begin(int c) const noexcept {
  return static_cast<int>(static_cast<std::int64_t>(c) * scale_x.num / scale_x.den);
}

RawSegment make_segment(int id, Mask mask) {
  const std::int64_t area = count_nonzero(mask);
  if (area <= 0) {
    throw Error(ErrorCode::invalid_input, "segment " + std::to_string(id) + " has an empty mask");
  }
  return RawSegment{id, std::move(mask), area};
}

namespace mask {

std::vector<RawSegment> filter_masks(std::span<const RawSegment> segments,
                                     std::int64_t image_area, double min_area_fraction) {
  if (!(min_area_fraction >= 0.0 && min_area_fraction < 1.0)) {
    throw Error(ErrorCode::invalid_input, "min_area_fraction must lie in [0, 1)");
  }
  const double threshold = min_area_fraction * static_cast<double>(image_area);
  std::vector<RawSegment> kept;
  for (const auto& s : segments) {
    if (static_cast<double>(s.area) >= threshold) kept.push_back(s);
  }
  return kept;
}

LabelMap resolve_overlaps(std::span<const RawSegment> segments) {
  if (segments.empty()) return {};
  const int rows = segments.front().mask.rows();
  const int cols = segments.front().mask.cols();
  for (const auto& s : segments) {
    if (s.mask.rows() != rows || s.mask.cols() != cols) {
      throw Error(ErrorCode::invalid_input,
                  "malformed segmenter output: segment " + std::to_string(s.id) +
                      " has dimensions that differ from the first mask");
    }
  }

  LabelMap labels(rows, cols, 0);
  // Ordering key of the current owner of each pixel.
  std::vector<std::pair<std::int64_t, int>> owner(labels.size(), {0, 0});
  const auto pixels = labels.data();
  for (const auto& s : segments) {
    const std::pair<std::int64_t, int> key{s.area, s.id};
    const auto m = s.mask.data();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) continue;
      if (pixels[i] == 0 || key < owner[i]) {
        pixels[i] = s.id;
        owner[i] = key;
      }
    }
  }
  return labels;
}

namespace {

struct SegmentStats {
  const RawSegment* segment = nullptr;
  BBox raw_box;
  BBox effective_box;
  std::int64_t effective_area = 0;
};

}  // namespace

std::vector<SemanticObject> compose_objects(const LabelMap& label_map,
                                            std::span<const RawSegment> segments,
                                            double containment_threshold) {
  if (!(containment_threshold > 0.5 && containment_threshold <= 1.0)) {
    throw Error(ErrorCode::invalid_input, "containment_threshold must lie in (0.5, 1]");
  }
  if (segments.empty()) return {};

  std::unordered_map<int, std::size_t> by_id;
  std::vector<SegmentStats> stats;
  for (const auto& s : segments) {
    if (!s.mask.same_shape(label_map)) {
      throw Error(ErrorCode::invalid_input, "segment mask does not match the label map");
    }
    if (by_id.contains(s.id)) {
      throw Error(ErrorCode::invalid_input, "duplicate segment id " + std::to_string(s.id));
    }
    by_id.emplace(s.id, stats.size());
    stats.push_back({&s, nonzero_extent(s.mask), BBox{label_map.cols(), label_map.rows(), -1, -1},
                     0});
  }
  for (int r = 0; r < label_map.rows(); ++r) {
    for (int c = 0; c < label_map.cols(); ++c) {
      const int id = label_map.at(r, c);
      if (id == 0) continue;
      const auto it = by_id.find(id);
      if (it == by_id.end()) {
        throw Error(ErrorCode::invalid_input,
                    "label map references unknown segment " + std::to_string(id));
      }
      auto& st = stats[it->second];
      ++st.effective_area;
      st.effective_box = bbox_union(st.effective_box, BBox{c, r, c, r});
    }
  }

  // Segments fully covered by finer segments own no pixels; they carry no
  // label and are left out of the forest.
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    if (stats[i].effective_area > 0) live.push_back(i);
  }

  // Parent: smallest strictly larger segment whose box contains enough of ours.
  std::vector<std::ptrdiff_t> parent(stats.size(), -1);
  for (const std::size_t a : live) {
    const auto& sa = stats[a];
    const double needed = containment_threshold * static_cast<double>(sa.raw_box.area());
    std::ptrdiff_t best = -1;
    for (const std::size_t b : live) {
      if (a == b) continue;
      const auto& sb = stats[b];
      if (sb.segment->area <= sa.segment->area) continue;
      if (static_cast<double>(intersection_area(sa.raw_box, sb.raw_box)) < needed) continue;
      if (best < 0 || std::tie(sb.segment->area, sb.segment->id) <
                          std::tie(stats[best].segment->area, stats[best].segment->id)) {
        best = static_cast<std::ptrdiff_t>(b);
      }
    }
    parent[a] = best;
  }

  // Areas strictly increase along parent links, so this terminates.
  auto root_of = [&](std::size_t i) {
    while (parent[i] >= 0) i = static_cast<std::size_t>(parent[i]);
    return i;
  };
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (const std::size_t i : live) groups[root_of(i)].push_back(i);

  std::vector<SemanticObject> objects;
  objects.reserve(groups.size());
  for (auto& [root, members] : groups) {
    std::sort(members.begin(), members.end(), [&](std::size_t x, std::size_t y) {
      if (stats[x].effective_area != stats[y].effective_area) {
        return stats[x].effective_area > stats[y].effective_area;
      }
      return stats[x].segment->id < stats[y].segment->id;
    });
    SemanticObject obj;
    obj.image_width = label_map.cols();
    obj.image_height = label_map.rows();
    obj.bbox = stats[members.front()].effective_box;
    std::unordered_map<int, int> relabel;
    for (std::size_t k = 0; k < members.size(); ++k) {
      const auto& st = stats[members[k]];
      obj.bbox = bbox_union(obj.bbox, st.effective_box);
      obj.member_segments.push_back(st.segment->id);
      relabel.emplace(st.segment->id, static_cast<int>(k) + 1);
    }
    obj.label_map = LabelMap(obj.bbox.height(), obj.bbox.width(), 0);
    for (int r = 0; r < obj.label_map.rows(); ++r) {
      for (int c = 0; c < obj.label_map.cols(); ++c) {
        const auto it = relabel.find(label_map.at(obj.bbox.y1 + r, obj.bbox.x1 + c));
        if (it != relabel.end()) obj.label_map.at(r, c) = it->second;
      }
    }
    objects.push_back(std::move(obj));
  }

  std::vector<std::pair<std::int64_t, int>> keys;
  for (const auto& o : objects) {
    keys.emplace_back(o.footprint_area(),
                      *std::min_element(o.member_segments.begin(), o.member_segments.end()));
  }
  std::vector<std::size_t> order(objects.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (keys[x].first != keys[y].first) return keys[x].first > keys[y].first;
    return keys[x].second < keys[y].second;
  });
  std::vector<SemanticObject> sorted;
  sorted.reserve(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    sorted.push_back(std::move(objects[order[i]]));
    sorted.back().object_id = static_cast<int>(i);
  }
  return sorted;
}

SpatialMatrix downscale_label_map(const LabelMap& label_map, int target_long_side) {
  if (label_map.rows() <= 0 || label_map.cols() <= 0) {
    throw Error(ErrorCode::invalid_input, "cannot downscale an empty label map");
  }
  if (target_long_side < 1) {
    throw Error(ErrorCode::invalid_input, "target_long_side must be at least 1");
  }
  const int h = label_map.rows();
  const int w = label_map.cols();
  const int longer = std::max(h, w);
  const int shorter = std::min(h, w);
  const int target = std::min(target_long_side, longer);
  // round(shorter * target / longer), half away from zero, in integers.
  const int scaled_short = std::max(
      1, static_cast<int>((2LL * shorter * target + longer) / (2LL * longer)));
  const int rows = h >= w ? target : scaled_short;
  const int cols = h >= w ? scaled_short : target;

  SpatialMatrix m;
  m.cells = Grid<std::int32_t>(rows, cols, 0);
  m.source_rows = h;
  m.source_cols = w;
  m.scale_x = {w / std::gcd(w, cols), cols / std::gcd(w, cols)};
  m.scale_y = {h / std::gcd(h, rows), rows / std::gcd(h, rows)};

  std::map<std::int32_t, int> counts;
  for (int r = 0; r < rows; ++r) {
    const int r0 = m.row_begin(r);
    const int r1 = m.row_begin(r + 1);
    for (int c = 0; c < cols; ++c) {
      const int c0 = m.col_begin(c);
      const int c1 = m.col_begin(c + 1);
      counts.clear();
      for (int y = r0; y < r1; ++y) {
        for (int x = c0; x < c1; ++x) ++counts[label_map.at(y, x)];
      }
      // Map iteration is ascending, so strict '>' keeps the smaller label on ties.
      std::int32_t best = 0;
      int best_count = -1;
      for (const auto& [label, count] : counts) {
        if (count > best_count) {
          best = label;
          best_count = count;
        }
      }
      m.cells.at(r, c) = best;
      if (best != 0) m.legend.emplace(best, best);
    }
  }
  return m;
}

SpatialMatrix downscale_object(const SemanticObject& object, int target_long_side) {
  SpatialMatrix m = downscale_label_map(object.label_map, target_long_side);
  for (auto& [label, member] : m.legend) {
    if (label >= 1 && label <= object.label_count()) {
      member = object.member_segments[static_cast<std::size_t>(label - 1)];
    }
  }
  return m;
}

std::string serialize_matrix(const Grid<std::int32_t>& cells) {
  std::string out = "[\n";
  for (int r = 0; r < cells.rows(); ++r) {
    if (r > 0) out += '\n';
    out += '[';
    for (int c = 0; c < cells.cols(); ++c) {
      if (c > 0) out += ' ';
      out += std::to_string(cells.at(r, c));
    }
    out += ']';
  }
  out += ']';
  return out;
}

Grid<std::int32_t> parse_matrix(std::string_view text) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> Error {
    return Error(ErrorCode::parse_failure,
                 "malformed matrix text at offset " + std::to_string(pos) + ": " + what);
  };
  auto skip_ws = [&] {
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\n' || text[pos] == '\r' ||
                                 text[pos] == '\t')) {
      ++pos;
    }
  };
  auto expect = [&](char ch) {
    skip_ws();
    if (pos >= text.size() || text[pos] != ch) throw fail(std::string("expected '") + ch + "'");
    ++pos;
  };

  std::vector<std::vector<std::int32_t>> rows;
  expect('[');
  skip_ws();
  while (pos < text.size() && text[pos] == '[') {
    ++pos;
    std::vector<std::int32_t> row;
    for (;;) {
      skip_ws();
      if (pos < text.size() && text[pos] == ']') {
        ++pos;
        break;
      }
      if (pos >= text.size() || text[pos] < '0' || text[pos] > '9') throw fail("expected digit");
      std::int64_t v = 0;
      while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') {
        v = v * 10 + (text[pos++] - '0');
        if (v > INT32_MAX) throw fail("cell value overflow");
      }
      row.push_back(static_cast<std::int32_t>(v));
    }
    if (row.empty()) throw fail("empty row");
    if (!rows.empty() && row.size() != rows.front().size()) throw fail("ragged rows");
    rows.push_back(std::move(row));
    skip_ws();
  }
  expect(']');
  skip_ws();
  if (pos != text.size()) throw fail("trailing characters");
  if (rows.empty()) throw fail("no rows");

  Grid<std::int32_t> cells(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
  for (int r = 0; r < cells.rows(); ++r) {
    for (int c = 0; c < cells.cols(); ++c) cells.at(r, c) = rows[r][c];
  }
  return cells;
}

Mask object_footprint(const SemanticObject& object) {
  Mask out(object.image_height, object.image_width, 0);
  for (int r = 0; r < object.label_map.rows(); ++r) {
    for (int c = 0; c < object.label_map.cols(); ++c) {
      if (object.label_map.at(r, c) != 0) out.at(object.bbox.y1 + r, object.bbox.x1 + c) = 1;
    }
  }
  return out;
}

Mask upscale_selection(const SemanticObject& object, std::span<const int> selected_labels) {
  std::vector<bool> wanted(static_cast<std::size_t>(object.label_count()) + 1, false);
  for (const int label : selected_labels) {
    if (label < 1 || label > object.label_count()) {
      throw Error(ErrorCode::invalid_input,
                  "segment label " + std::to_string(label) + " does not exist in object " +
                      std::to_string(object.object_id));
    }
    wanted[static_cast<std::size_t>(label)] = true;
  }
  Mask out(object.image_height, object.image_width, 0);
  for (int r = 0; r < object.label_map.rows(); ++r) {
    for (int c = 0; c < object.label_map.cols(); ++c) {
      const int label = object.label_map.at(r, c);
      if (label != 0 && wanted[static_cast<std::size_t>(label)]) {
        out.at(object.bbox.y1 + r, object.bbox.x1 + c) = 1;
      }
    }
  }
  return out;
}

Mask region_to_mask(const SemanticObject& object, const SpatialMatrix& matrix,
                    std::span<const MatrixRegion> regions) {
  if (matrix.source_rows != object.label_map.rows() ||
      matrix.source_cols != object.label_map.cols()) {
    throw Error(ErrorCode::internal, "spatial matrix was not derived from this object");
  }
  auto check = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= matrix.cols() || y >= matrix.rows()) {
      throw Error(ErrorCode::invalid_input,
                  "matrix coordinate (" + std::to_string(x) + ", " + std::to_string(y) +
                      ") lies outside the " + std::to_string(matrix.rows()) + "x" +
                      std::to_string(matrix.cols()) + " matrix");
    }
  };

  Grid<std::uint8_t> cells(matrix.rows(), matrix.cols(), 0);
  for (const auto& region : regions) {
    if (const auto* p = std::get_if<MatrixPoint>(&region)) {
      check(p->x, p->y);
      cells.at(p->y, p->x) = 1;
    } else {
      const auto& rect = std::get<MatrixRect>(region);
      check(rect.x1, rect.y1);
      check(rect.x2, rect.y2);
      for (int y = std::min(rect.y1, rect.y2); y <= std::max(rect.y1, rect.y2); ++y) {
        for (int x = std::min(rect.x1, rect.x2); x <= std::max(rect.x1, rect.x2); ++x) {
          cells.at(y, x) = 1;
        }
      }
    }
  }

  Mask out(object.image_height, object.image_width, 0);
  for (int r = 0; r < matrix.rows(); ++r) {
    for (int c = 0; c < matrix.cols(); ++c) {
      if (!cells.at(r, c)) continue;
      for (int y = matrix.row_begin(r); y < matrix.row_begin(r + 1); ++y) {
        for (int x = matrix.col_begin(c); x < matrix.col_begin(c + 1); ++x) {
          if (object.label_map.at(y, x) != 0) out.at(object.bbox.y1 + y, object.bbox.x1 + x) = 1;
        }
      }
    }
  }
  return out;
}

}  // namespace mask
}  // namespace keyfield
