#include "protohead/geometry.hpp"
#include "test_util.hpp"

using namespace protohead;

namespace {

ViewGeometry full(std::uint32_t h, std::uint32_t w) { return ViewGeometry{Rect{}, h, w}; }

void expect_rect(const Rect& r, double x0, double y0, double x1, double y1) {
  EXPECT_NEAR(r.x0, x0, 1e-15);
  EXPECT_NEAR(r.y0, y0, 1e-15);
  EXPECT_NEAR(r.x1, x1, 1e-15);
  EXPECT_NEAR(r.y1, y1, 1e-15);
}

}  // namespace

TEST(Overlap, IdenticalRects) {
  const ViewGeometry g{Rect{0.1, 0.2, 0.7, 0.9}, 4, 4};
  expect_rect(overlap_region(g, g), 0.1, 0.2, 0.7, 0.9);
}

TEST(Overlap, PartialOverlap) {
  const ViewGeometry a{Rect{0, 0, 0.6, 0.6}, 4, 4};
  const ViewGeometry b{Rect{0.4, 0.4, 1, 1}, 4, 4};
  expect_rect(overlap_region(a, b), 0.4, 0.4, 0.6, 0.6);
}

TEST(Overlap, Disjoint) {
  const ViewGeometry a{Rect{0, 0, 0.4, 0.4}, 4, 4};
  const ViewGeometry b{Rect{0.5, 0.5, 1, 1}, 4, 4};
  EXPECT_ERROR_CODE(overlap_region(a, b), ErrorCode::kEmptyOverlap);
  const ViewGeometry touching{Rect{0.4, 0, 1, 1}, 4, 4};
  EXPECT_ERROR_CODE(overlap_region(a, touching), ErrorCode::kEmptyOverlap);
}

TEST(RoiAlign, ConstantField) {
  const Matrix field = Matrix::Constant(16, 3, 0.25);
  const ViewGeometry g{Rect{0.2, 0.1, 0.9, 0.8}, 4, 4};
  const Matrix out = roi_align(field, g, Rect{0.3, 0.3, 0.6, 0.7}, 7);
  ASSERT_EQ(out.rows(), 49);
  EXPECT_LE((out.array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(RoiAlign, IdentityAtPatchCentres) {
  const Matrix field = testutil::random_matrix(20, 2, 3);
  const Matrix out = roi_align(field, full(4, 5), Rect{}, 4, 5);
  EXPECT_LE((out - field).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RoiAlign, BilinearMidpoint) {
  Matrix field(4, 1);
  field << 1, 2, 3, 4;
  const Matrix out = roi_align(field, full(2, 2), Rect{}, 1);
  EXPECT_NEAR(out(0, 0), 2.5, 1e-15);
}

TEST(RoiAlign, Linearity) {
  const ViewGeometry g{Rect{0.05, 0.15, 0.85, 0.95}, 6, 5};
  const Rect roi{0.2, 0.25, 0.8, 0.7};
  const Matrix u = testutil::random_matrix(30, 4, 1);
  const Matrix v = testutil::random_matrix(30, 4, 2);
  const Matrix lhs = roi_align(1.7 * u - 0.3 * v, g, roi, 7);
  const Matrix rhs = 1.7 * roi_align(u, g, roi, 7) - 0.3 * roi_align(v, g, roi, 7);
  EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(RoiAlign, ConvexCombination) {
  const Matrix u = testutil::random_matrix(64, 1, 4);
  const ViewGeometry g{Rect{0.1, 0.1, 0.6, 0.9}, 8, 8};
  const Matrix out = roi_align(u, g, Rect{0.0, 0.0, 1.0, 1.0}, 9);
  EXPECT_GE(out.minCoeff(), u.minCoeff() - 1e-12);
  EXPECT_LE(out.maxCoeff(), u.maxCoeff() + 1e-12);
}

TEST(RoiAlign, MapRowsAreStochastic) {
  const ViewGeometry g{Rect{0.3, 0.2, 0.7, 0.6}, 5, 5};
  const SparseMap map = roi_align_map(g, Rect{0.35, 0.25, 0.65, 0.55}, 7, 7);
  ASSERT_EQ(map.rows(), 49);
  ASSERT_EQ(map.cols(), 25);
  const Matrix dense = Matrix(map);
  for (Eigen::Index r = 0; r < dense.rows(); ++r) {
    EXPECT_NEAR(dense.row(r).sum(), 1.0, 1e-12);
    EXPECT_GE(dense.row(r).minCoeff(), 0.0);
  }
}

TEST(RoiAlign, TwoViewsAgreeOnSharedSourceField) {
  // A field that is linear in source coordinates is reproduced exactly by
  // bilinear sampling, so two differently cropped views agree on the overlap.
  auto render = [](const ViewGeometry& g) {
    Matrix f(g.grid_h * g.grid_w, 1);
    for (std::uint32_t r = 0; r < g.grid_h; ++r) {
      for (std::uint32_t c = 0; c < g.grid_w; ++c) {
        const double x = g.crop.x0 + g.crop.width() * (c + 0.5) / g.grid_w;
        const double y = g.crop.y0 + g.crop.height() * (r + 0.5) / g.grid_h;
        f(r * g.grid_w + c, 0) = 2.0 * x - y;
      }
    }
    return f;
  };
  const ViewGeometry a{Rect{0.0, 0.0, 0.8, 0.8}, 16, 16};
  const ViewGeometry b{Rect{0.2, 0.1, 1.0, 0.9}, 16, 16};
  const Rect roi = overlap_region(a, b);
  const Rect inner{roi.x0 + 0.05, roi.y0 + 0.05, roi.x1 - 0.05, roi.y1 - 0.05};
  const Matrix ma = roi_align(render(a), a, inner, 7);
  const Matrix mb = roi_align(render(b), b, inner, 7);
  EXPECT_LE((ma - mb).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Geometry, CropConversionRoundTrip) {
  const CropRect c{0.125f, 0.25f, 0.5f, 0.875f};
  EXPECT_EQ(to_crop(to_rect(c)), c);
}
