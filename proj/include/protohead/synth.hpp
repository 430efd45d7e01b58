#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "protohead/config.hpp"
#include "protohead/dataio.hpp"
#include "protohead/geometry.hpp"
#include "protohead/numerics.hpp"

namespace protohead {

// Seeded unit-norm means: one background vector and one per (category, style).
struct Codebook {
  Eigen::RowVectorXd background;
  std::vector<Matrix> parts;  // parts[u - 1].row(style)

  Eigen::RowVectorXd mean(std::uint32_t category, std::uint32_t style) const;
};

Codebook make_codebook(const SynthConfig& cfg);

// Style of every category for every class: table[d][u - 1].
std::vector<std::vector<std::uint32_t>> class_style_table(const SynthConfig& cfg);

struct SyntheticScene {
  std::uint32_t label = 0;
  std::vector<std::uint16_t> part_ids;
  std::vector<std::uint16_t> style_ids;
  Matrix clean;  // patches x embed_dim, noise-free
};

// Places every category as a non-overlapping rectangle; kInfeasibleLayout when
// placement keeps failing.
SyntheticScene make_scene(const SynthConfig& cfg, const Codebook& codebook,
                          const std::vector<std::vector<std::uint32_t>>& table, std::uint32_t label,
                          std::mt19937_64& rng);

// clean + N(0, sigma^2) per entry.
Matrix render(const SyntheticScene& scene, double sigma, std::mt19937_64& rng);

// Single-view bundle; sample s has label s % D and its own seeded stream.
EmbeddingBundle generate_dataset(const SynthConfig& cfg);

std::mt19937_64 seeded_stream(std::uint64_t base, std::uint64_t index, std::uint64_t tag);

// Two random crops (overlap >= aug.min_overlap, else kOverlapTooSmall after
// 100 draws) resampled back to the full grid, each with a channelwise gain and
// offset plus fresh noise.
ViewPair make_views(const Matrix& grid, std::uint32_t grid_h, std::uint32_t grid_w, const AugmentConfig& aug,
                    std::uint64_t seed);

// Adds N(0, (sigma_stab * s)^2) to every embedding entry, where s is the
// bundle's global embedding standard deviation.
EmbeddingBundle perturb(const EmbeddingBundle& bundle, double sigma_stab, std::uint64_t seed);

double global_embedding_std(const EmbeddingBundle& bundle);

}  // namespace protohead
