#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace tsflow {

// Row-major 2D grid. Coordinates follow the apparatus convention used
// throughout this library: y is the horizontal axis (column index),
// z is the vertical axis (row index, positive downward in image space).
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    if (width < 1 || height < 1) throw std::invalid_argument("Grid: dimensions must be >= 1");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  bool in_bounds(int y, int z) const {
    return y >= 0 && y < width_ && z >= 0 && z < height_;
  }

  T& at(int y, int z) { return data_[static_cast<std::size_t>(z) * width_ + y]; }
  const T& at(int y, int z) const { return data_[static_cast<std::size_t>(z) * width_ + y]; }

  T* row(int z) { return data_.data() + static_cast<std::size_t>(z) * width_; }
  const T* row(int z) const { return data_.data() + static_cast<std::size_t>(z) * width_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool same_dims(const Grid& o) const { return width_ == o.width_ && height_ == o.height_; }

  void fill(T v) { data_.assign(data_.size(), v); }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.data_ == b.data_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

// Grayscale image, intensities in [0,1].
using GrayImage = Grid<double>;

inline bool image_valid(const GrayImage& img) {
  if (img.empty()) return false;
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = img.data()[i];
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) return false;
  }
  return true;
}

}  // namespace tsflow
