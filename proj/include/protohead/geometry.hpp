#pragma once

#include <cstdint>

#include "protohead/dataio.hpp"
#include "protohead/numerics.hpp"

namespace protohead {

struct Rect {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
};

Rect to_rect(const CropRect& c);
CropRect to_crop(const Rect& r);

// A view is a crop of the source image resampled onto a grid_h x grid_w patch grid.
struct ViewGeometry {
  Rect crop;
  std::uint32_t grid_h = 1;
  std::uint32_t grid_w = 1;
};

// Two augmented views of one sample with their crop geometry.
struct ViewPair {
  Matrix first;
  Matrix second;
  ViewGeometry geometry_first;
  ViewGeometry geometry_second;
};

// Intersection of the two crops in source coordinates; kEmptyOverlap when it
// has no area.
Rect overlap_region(const ViewGeometry& a, const ViewGeometry& b);

// Linear operator taking a patch field of view `g` (rows = patches) to
// out_h x out_w cell-centre samples of `roi`. Patch centres sit at
// (i + 0.5) / grid; samples outside the grid clamp to the edge.
SparseMap roi_align_map(const ViewGeometry& g, const Rect& roi, std::uint32_t out_h, std::uint32_t out_w);

Matrix roi_align(const Matrix& field, const ViewGeometry& g, const Rect& roi, std::uint32_t out_h, std::uint32_t out_w);
Matrix roi_align(const Matrix& field, const ViewGeometry& g, const Rect& roi, std::uint32_t out_g);

}  // namespace protohead
