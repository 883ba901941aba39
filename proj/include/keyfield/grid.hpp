#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <span>
#include <vector>

namespace keyfield {

/// Dense row-major 2-D array.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int rows, int cols, T fill = T{})
      : rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), fill) {
    assert(rows >= 0 && cols >= 0);
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  int height() const noexcept { return rows_; }
  int width() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t size() const noexcept { return data_.size(); }

  T& at(int r, int c) { return data_[index(r, c)]; }
  const T& at(int r, int c) const { return data_[index(r, c)]; }

  bool contains(int r, int c) const noexcept {
    return r >= 0 && c >= 0 && r < rows_ && c < cols_;
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::span<const T> row(int r) const {
    return std::span<const T>(data_).subspan(index(r, 0), static_cast<std::size_t>(cols_));
  }

  template <typename U>
  bool same_shape(const Grid<U>& other) const noexcept {
    return rows_ == other.rows() && cols_ == other.cols();
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t index(int r, int c) const {
    assert(contains(r, c));
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(cols_) +
           static_cast<std::size_t>(c);
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

using Mask = Grid<std::uint8_t>;      // 0 or 1 per pixel
using LabelMap = Grid<std::int32_t>;  // 0 = background

template <typename T>
std::int64_t count_nonzero(const Grid<T>& g) {
  return std::count_if(g.data().begin(), g.data().end(), [](T v) { return v != T{}; });
}

/// Inclusive pixel rectangle in (x1, y1, x2, y2) order.
struct BBox {
  int x1 = 0;
  int y1 = 0;
  int x2 = 0;
  int y2 = 0;

  int width() const noexcept { return x2 - x1 + 1; }
  int height() const noexcept { return y2 - y1 + 1; }
  std::int64_t area() const noexcept {
    return static_cast<std::int64_t>(width()) * height();
  }
  bool valid() const noexcept { return x1 <= x2 && y1 <= y2; }

  // Swaps inverted coordinates into canonical order.
  BBox normalized() const noexcept {
    return {std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2)};
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

BBox bbox_union(const BBox& a, const BBox& b);
std::int64_t intersection_area(const BBox& a, const BBox& b);

// Extent of the nonzero cells; nullopt-like empty result signalled by valid() == false.
template <typename T>
BBox nonzero_extent(const Grid<T>& g) {
  BBox box{g.cols(), g.rows(), -1, -1};
  for (int r = 0; r < g.rows(); ++r) {
    for (int c = 0; c < g.cols(); ++c) {
      if (g.at(r, c) == T{}) continue;
      box.x1 = std::min(box.x1, c);
      box.y1 = std::min(box.y1, r);
      box.x2 = std::max(box.x2, c);
      box.y2 = std::max(box.y2, r);
    }
  }
  return box;
}

}  // namespace keyfield
