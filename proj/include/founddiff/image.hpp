#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "founddiff/errors.hpp"

namespace founddiff {

// Row-major grayscale image.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  double at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
};

// Pixel centers live on [-1, 1]^2: column j -> x, row i -> y (top row = +y).
inline double pixel_to_x(int col, int width) { return (2.0 * col + 1.0) / width - 1.0; }
inline double pixel_to_y(int row, int height) { return 1.0 - (2.0 * row + 1.0) / height; }

inline double mse(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw Error("mse: image shapes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace founddiff
