#include "protohead/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "protohead/errors.hpp"

namespace protohead {
namespace {

struct Tap {
  Eigen::Index index;
  double weight;
};

// Bilinear taps along one axis for continuous grid coordinate `pos`.
void axis_taps(double pos, std::uint32_t extent, Eigen::Index& lo, Eigen::Index& hi, double& frac) {
  const double max_pos = static_cast<double>(extent) - 1.0;
  pos = std::clamp(pos, 0.0, max_pos);
  const double nearest = std::round(pos);
  if (std::abs(pos - nearest) < 1e-9) pos = nearest;
  lo = static_cast<Eigen::Index>(std::floor(pos));
  hi = std::min<Eigen::Index>(lo + 1, static_cast<Eigen::Index>(extent) - 1);
  frac = pos - static_cast<double>(lo);
}

}  // namespace

Rect to_rect(const CropRect& c) { return Rect{c.x0, c.y0, c.x1, c.y1}; }

CropRect to_crop(const Rect& r) {
  return CropRect{static_cast<float>(r.x0), static_cast<float>(r.y0), static_cast<float>(r.x1), static_cast<float>(r.y1)};
}

Rect overlap_region(const ViewGeometry& a, const ViewGeometry& b) {
  Rect r{std::max(a.crop.x0, b.crop.x0), std::max(a.crop.y0, b.crop.y0), std::min(a.crop.x1, b.crop.x1),
         std::min(a.crop.y1, b.crop.y1)};
  if (!(r.x1 > r.x0) || !(r.y1 > r.y0)) fail(ErrorCode::kEmptyOverlap, "view crops do not intersect");
  return r;
}

SparseMap roi_align_map(const ViewGeometry& g, const Rect& roi, std::uint32_t out_h, std::uint32_t out_w) {
  if (!(roi.x1 > roi.x0) || !(roi.y1 > roi.y0)) fail(ErrorCode::kEmptyOverlap, "region of interest has no area");
  if (out_h < 1 || out_w < 1) fail(ErrorCode::kShapeMismatch, "roi_align output grid must be non-empty");
  if (!(g.crop.x1 > g.crop.x0) || !(g.crop.y1 > g.crop.y0)) fail(ErrorCode::kEmptyOverlap, "view crop has no area");

  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(out_h) * out_w * 4);
  for (std::uint32_t r = 0; r < out_h; ++r) {
    const double sy = roi.y0 + (r + 0.5) / out_h * roi.height();
    const double vy = (sy - g.crop.y0) / g.crop.height();
    Eigen::Index y0, y1;
    double fy;
    axis_taps(vy * g.grid_h - 0.5, g.grid_h, y0, y1, fy);
    for (std::uint32_t c = 0; c < out_w; ++c) {
      const double sx = roi.x0 + (c + 0.5) / out_w * roi.width();
      const double vx = (sx - g.crop.x0) / g.crop.width();
      Eigen::Index x0, x1;
      double fx;
      axis_taps(vx * g.grid_w - 0.5, g.grid_w, x0, x1, fx);
      const Eigen::Index row = static_cast<Eigen::Index>(r) * out_w + c;
      const Eigen::Index w = g.grid_w;
      const Tap taps[4] = {{y0 * w + x0, (1 - fy) * (1 - fx)},
                           {y0 * w + x1, (1 - fy) * fx},
                           {y1 * w + x0, fy * (1 - fx)},
                           {y1 * w + x1, fy * fx}};
      for (const Tap& t : taps) {
        if (t.weight != 0.0) triplets.emplace_back(row, t.index, t.weight);
      }
    }
  }
  SparseMap map(static_cast<Eigen::Index>(out_h) * out_w, static_cast<Eigen::Index>(g.grid_h) * g.grid_w);
  map.setFromTriplets(triplets.begin(), triplets.end());
  return map;
}

Matrix roi_align(const Matrix& field, const ViewGeometry& g, const Rect& roi, std::uint32_t out_h, std::uint32_t out_w) {
  if (field.rows() != static_cast<Eigen::Index>(g.grid_h) * g.grid_w) {
    fail(ErrorCode::kShapeMismatch, "field rows must equal the view's patch count");
  }
  return roi_align_map(g, roi, out_h, out_w) * field;
}

Matrix roi_align(const Matrix& field, const ViewGeometry& g, const Rect& roi, std::uint32_t out_g) {
  return roi_align(field, g, roi, out_g, out_g);
}

}  // namespace protohead
