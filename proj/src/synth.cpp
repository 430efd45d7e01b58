#include "protohead/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "protohead/errors.hpp"

namespace protohead {
namespace {

constexpr std::uint64_t kCodebookTag = 1;
constexpr std::uint64_t kStyleTag = 2;
constexpr std::uint64_t kSampleTag = 3;
constexpr std::uint64_t kPerturbTag = 4;

Eigen::RowVectorXd unit_gaussian(std::uint32_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::RowVectorXd v(dim);
  do {
    for (std::uint32_t c = 0; c < dim; ++c) v[c] = normal(rng);
  } while (v.norm() < 1e-6);
  return v / v.norm();
}

struct Placement {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
};

bool try_layout(const SynthConfig& cfg, std::mt19937_64& rng, std::vector<std::uint16_t>& ids) {
  ids.assign(static_cast<std::size_t>(cfg.grid_h) * cfg.grid_w, 0);
  for (std::uint32_t u = 1; u <= cfg.num_part_categories; ++u) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      std::uniform_int_distribution<std::uint32_t> side(cfg.min_part_side, cfg.max_part_side);
      Placement p;
      p.rows = std::min(side(rng), cfg.grid_h);
      p.cols = std::min(side(rng), cfg.grid_w);
      p.row = std::uniform_int_distribution<std::uint32_t>(0, cfg.grid_h - p.rows)(rng);
      p.col = std::uniform_int_distribution<std::uint32_t>(0, cfg.grid_w - p.cols)(rng);
      bool free = true;
      for (std::uint32_t r = p.row; r < p.row + p.rows && free; ++r) {
        for (std::uint32_t c = p.col; c < p.col + p.cols; ++c) {
          if (ids[static_cast<std::size_t>(r) * cfg.grid_w + c] != 0) {
            free = false;
            break;
          }
        }
      }
      if (!free) continue;
      for (std::uint32_t r = p.row; r < p.row + p.rows; ++r) {
        for (std::uint32_t c = p.col; c < p.col + p.cols; ++c) {
          ids[static_cast<std::size_t>(r) * cfg.grid_w + c] = static_cast<std::uint16_t>(u);
        }
      }
      placed = true;
    }
    if (!placed) return false;
  }
  return true;
}

}  // namespace

std::mt19937_64 seeded_stream(std::uint64_t base, std::uint64_t index, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

Eigen::RowVectorXd Codebook::mean(std::uint32_t category, std::uint32_t style) const {
  if (category == 0) return background;
  return parts.at(category - 1).row(style);
}

Codebook make_codebook(const SynthConfig& cfg) {
  auto rng = seeded_stream(cfg.seed, 0, kCodebookTag);
  Codebook book;
  book.background = unit_gaussian(cfg.embed_dim, rng);
  for (std::uint32_t u = 0; u < cfg.num_part_categories; ++u) {
    Matrix styles(cfg.styles_per_category, cfg.embed_dim);
    for (std::uint32_t s = 0; s < cfg.styles_per_category; ++s) styles.row(s) = unit_gaussian(cfg.embed_dim, rng);
    book.parts.push_back(std::move(styles));
  }
  return book;
}

std::vector<std::vector<std::uint32_t>> class_style_table(const SynthConfig& cfg) {
  validate(cfg);
  if (!cfg.class_styles.empty()) return cfg.class_styles;
  auto rng = seeded_stream(cfg.seed, 0, kStyleTag);
  std::uniform_int_distribution<std::uint32_t> style(0, cfg.styles_per_category - 1);
  std::set<std::vector<std::uint32_t>> used;
  std::vector<std::vector<std::uint32_t>> table;
  while (table.size() < cfg.num_classes) {
    std::vector<std::uint32_t> row(cfg.num_part_categories);
    for (auto& v : row) v = style(rng);
    if (used.insert(row).second) table.push_back(std::move(row));
  }
  return table;
}

SyntheticScene make_scene(const SynthConfig& cfg, const Codebook& codebook,
                          const std::vector<std::vector<std::uint32_t>>& table, std::uint32_t label,
                          std::mt19937_64& rng) {
  const std::uint64_t patches = static_cast<std::uint64_t>(cfg.grid_h) * cfg.grid_w;
  if (static_cast<std::uint64_t>(cfg.num_part_categories) * cfg.min_part_side * cfg.min_part_side > patches ||
      cfg.min_part_side > std::min(cfg.grid_h, cfg.grid_w)) {
    fail(ErrorCode::kInfeasibleLayout, "parts cannot fit on the patch grid");
  }
  SyntheticScene scene;
  scene.label = label;
  bool ok = false;
  for (int restart = 0; restart < 50 && !ok; ++restart) ok = try_layout(cfg, rng, scene.part_ids);
  if (!ok) fail(ErrorCode::kInfeasibleLayout, "could not place parts without overlap");

  scene.style_ids.resize(scene.part_ids.size());
  scene.clean.resize(static_cast<Eigen::Index>(patches), cfg.embed_dim);
  for (std::size_t i = 0; i < scene.part_ids.size(); ++i) {
    const std::uint32_t u = scene.part_ids[i];
    const std::uint32_t style = u == 0 ? 0 : table.at(label).at(u - 1);
    scene.style_ids[i] = static_cast<std::uint16_t>(style);
    scene.clean.row(static_cast<Eigen::Index>(i)) = codebook.mean(u, style);
  }
  return scene;
}

Matrix render(const SyntheticScene& scene, double sigma, std::mt19937_64& rng) {
  Matrix out = scene.clean;
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += noise(rng);
  }
  return out;
}

EmbeddingBundle generate_dataset(const SynthConfig& cfg) {
  validate(cfg);
  const Codebook book = make_codebook(cfg);
  const auto table = class_style_table(cfg);
  EmbeddingBundle bundle;
  bundle.grid_h = cfg.grid_h;
  bundle.grid_w = cfg.grid_w;
  bundle.embed_dim = cfg.embed_dim;
  bundle.num_views = 1;
  bundle.num_classes = cfg.num_classes;
  bundle.num_part_categories = cfg.num_part_categories;
  const std::size_t count = static_cast<std::size_t>(cfg.num_classes) * cfg.samples_per_class;
  bundle.samples.resize(count);
  for (std::size_t s = 0; s < count; ++s) {
    auto rng = seeded_stream(cfg.seed, s, kSampleTag);
    const auto label = static_cast<std::uint32_t>(s % cfg.num_classes);
    SyntheticScene scene = make_scene(cfg, book, table, label, rng);
    BundleSample& out = bundle.samples[s];
    out.label = label;
    out.part_ids = std::move(scene.part_ids);
    out.views.resize(1);
    store_view(out.views[0], render(scene, cfg.sigma_data, rng));
  }
  validate(bundle);
  return bundle;
}

ViewPair make_views(const Matrix& grid, std::uint32_t grid_h, std::uint32_t grid_w, const AugmentConfig& aug,
                    std::uint64_t seed) {
  validate(aug);
  if (grid.rows() != static_cast<Eigen::Index>(grid_h) * grid_w) fail(ErrorCode::kShapeMismatch, "grid rows differ from grid_h * grid_w");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw_crop = [&]() {
    const double area = aug.min_scale + (aug.max_scale - aug.min_scale) * unit(rng);
    const double log_aspect =
        std::log(aug.min_aspect) + (std::log(aug.max_aspect) - std::log(aug.min_aspect)) * unit(rng);
    const double aspect = std::exp(log_aspect);
    const double w = std::min(1.0, std::sqrt(area * aspect));
    const double h = std::min(1.0, std::sqrt(area / aspect));
    const double x0 = (1.0 - w) * unit(rng);
    const double y0 = (1.0 - h) * unit(rng);
    // Snap through f32 so the recorded crop is exactly what a bundle stores.
    return to_rect(to_crop(Rect{x0, y0, x0 + w, y0 + h}));
  };

  ViewPair pair;
  bool accepted = false;
  for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
    const Rect a = draw_crop();
    const Rect b = draw_crop();
    const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (ix > 0.0 && iy > 0.0 && ix * iy >= aug.min_overlap) {
      pair.geometry_first = ViewGeometry{a, grid_h, grid_w};
      pair.geometry_second = ViewGeometry{b, grid_h, grid_w};
      accepted = true;
    }
  }
  if (!accepted) fail(ErrorCode::kOverlapTooSmall, "no crop pair reached the minimum overlap in 100 draws");

  const ViewGeometry source{Rect{}, grid_h, grid_w};
  std::normal_distribution<double> normal(0.0, 1.0);
  auto finish = [&](const Rect& crop) {
    Matrix view = roi_align(grid, source, crop, grid_h, grid_w);
    for (Eigen::Index c = 0; c < view.cols(); ++c) {
      const double gain = 1.0 + aug.color_scale * (2.0 * unit(rng) - 1.0);
      const double offset = aug.color_shift * normal(rng);
      view.col(c) = view.col(c) * gain + Vector::Constant(view.rows(), offset);
    }
    if (aug.noise_sigma > 0.0) {
      for (Eigen::Index i = 0; i < view.size(); ++i) view.data()[i] += aug.noise_sigma * normal(rng);
    }
    return view;
  };
  pair.first = finish(pair.geometry_first.crop);
  pair.second = finish(pair.geometry_second.crop);
  return pair;
}

double global_embedding_std(const EmbeddingBundle& bundle) {
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t count = 0;
  for (const auto& s : bundle.samples) {
    for (const auto& v : s.views) {
      for (float x : v.embedding) {
        sum += x;
        sum_sq += static_cast<double>(x) * x;
      }
      count += v.embedding.size();
    }
  }
  if (count == 0) return 0.0;
  const double mean = sum / static_cast<double>(count);
  return std::sqrt(std::max(0.0, sum_sq / static_cast<double>(count) - mean * mean));
}

EmbeddingBundle perturb(const EmbeddingBundle& bundle, double sigma_stab, std::uint64_t seed) {
  if (sigma_stab < 0.0) fail(ErrorCode::kConfigError, "sigma_stab must be >= 0");
  EmbeddingBundle out = bundle;
  if (sigma_stab == 0.0) return out;
  const double scale = sigma_stab * global_embedding_std(bundle);
  if (!(scale > 0.0)) return out;
  for (std::size_t s = 0; s < out.samples.size(); ++s) {
    auto rng = seeded_stream(seed, s, kPerturbTag);
    std::normal_distribution<double> noise(0.0, scale);
    for (auto& v : out.samples[s].views) {
      for (float& x : v.embedding) x = static_cast<float>(x + noise(rng));
    }
  }
  return out;
}

}  // namespace protohead
