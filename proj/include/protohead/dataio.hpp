#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "protohead/numerics.hpp"
#include "protohead/param_layout.hpp"

namespace protohead {

// Normalized source-image rectangle, 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1.
struct CropRect {
  float x0 = 0.0f;
  float y0 = 0.0f;
  float x1 = 1.0f;
  float y1 = 1.0f;
  bool operator==(const CropRect&) const = default;
};

struct BundleView {
  CropRect crop;
  std::vector<float> embedding;  // patches x embed_dim, row-major
};

struct BundleSample {
  std::uint32_t label = 0;
  std::vector<BundleView> views;
  std::vector<std::uint16_t> part_ids;  // 0 = background, 1..U = part categories
};

// Patch-embedding bundle ("PEB" v1). Part ids index the patches of view 0.
struct EmbeddingBundle {
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  std::uint32_t embed_dim = 0;
  std::uint32_t num_views = 1;
  std::uint32_t num_classes = 0;
  std::uint32_t num_part_categories = 0;
  std::vector<BundleSample> samples;

  std::size_t patches() const { return static_cast<std::size_t>(grid_h) * grid_w; }
  // View embedding widened to double precision.
  Matrix view_matrix(std::size_t sample, std::size_t view = 0) const;
};

inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr std::size_t kBundleHeaderBytes = 36;

// Expected file size for the bundle's declared dimensions.
std::uint64_t bundle_file_size(const EmbeddingBundle& bundle);

// Throws kInvariantViolation / kNonFiniteValue.
void validate(const EmbeddingBundle& bundle);

std::vector<std::uint8_t> serialize_bundle(const EmbeddingBundle& bundle);
EmbeddingBundle parse_bundle(const std::vector<std::uint8_t>& bytes);
void write_bundle(const EmbeddingBundle& bundle, const std::string& path);
EmbeddingBundle read_bundle(const std::string& path);

// Copies widened embeddings back into single-precision storage.
void store_view(BundleView& view, const Matrix& embedding);

struct NamedTensor {
  std::string name;
  TensorShape shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json config;  // RunConfig snapshot
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

// "PHCK" | u32 version | u64 header length | JSON header | f32 LE payload.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace protohead
