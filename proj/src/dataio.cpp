#include "protohead/dataio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "protohead/config.hpp"
#include "protohead/errors.hpp"

namespace protohead {
namespace {

constexpr char kBundleMagic[4] = {'P', 'E', 'B', '1'};
constexpr char kCheckpointMagic[4] = {'P', 'H', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

class ByteWriter {
 public:
  void bytes(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }
  void u16(std::uint16_t v) {
    out_.push_back(static_cast<std::uint8_t>(v));
    out_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 0; s < 64; s += 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& in, ErrorCode short_code) : in_(in), short_code_(short_code) {}

  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) fail(short_code_, "file ends before the declared payload");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(in_[pos_ + static_cast<std::size_t>(b)]) << (8 * b);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(in_[pos_ + static_cast<std::size_t>(b)]) << (8 * b);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& in_;
  ErrorCode short_code_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIoFailure, "cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::kIoFailure, "read error on '" + path + "'");
  return bytes;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIoFailure, "cannot create '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIoFailure, "write error on '" + path + "'");
}

void check_invariant(bool ok, const std::string& message) {
  if (!ok) fail(ErrorCode::kInvariantViolation, message);
}

bool valid_crop(const CropRect& c) {
  return c.x0 >= 0.0f && c.x0 < c.x1 && c.x1 <= 1.0f && c.y0 >= 0.0f && c.y0 < c.y1 && c.y1 <= 1.0f;
}

}  // namespace

Matrix EmbeddingBundle::view_matrix(std::size_t sample, std::size_t view) const {
  const auto& data = samples.at(sample).views.at(view).embedding;
  Matrix out(static_cast<Eigen::Index>(patches()), static_cast<Eigen::Index>(embed_dim));
  for (std::size_t i = 0; i < data.size(); ++i) out.data()[i] = data[i];
  return out;
}

void store_view(BundleView& view, const Matrix& embedding) {
  view.embedding.resize(static_cast<std::size_t>(embedding.size()));
  for (std::size_t i = 0; i < view.embedding.size(); ++i) view.embedding[i] = static_cast<float>(embedding.data()[i]);
}

std::uint64_t bundle_file_size(const EmbeddingBundle& b) {
  const std::uint64_t patches = static_cast<std::uint64_t>(b.grid_h) * b.grid_w;
  const std::uint64_t per_view = 16 + 4 * patches * b.embed_dim;
  const std::uint64_t per_sample = 4 + b.num_views * per_view + 2 * patches;
  return kBundleHeaderBytes + per_sample * b.samples.size();
}

void validate(const EmbeddingBundle& b) {
  check_invariant(b.num_views >= 1, "bundle needs at least one view per sample");
  check_invariant(b.num_classes >= 1, "bundle needs at least one class");
  const std::size_t patches = b.patches();
  const std::size_t floats = patches * b.embed_dim;
  for (std::size_t s = 0; s < b.samples.size(); ++s) {
    const BundleSample& sample = b.samples[s];
    const std::string where = "sample " + std::to_string(s);
    check_invariant(sample.label < b.num_classes, where + ": label out of range");
    check_invariant(sample.views.size() == b.num_views, where + ": view count differs from header");
    check_invariant(sample.part_ids.size() == patches, where + ": part id count differs from patch count");
    for (auto id : sample.part_ids) check_invariant(id <= b.num_part_categories, where + ": part id out of range");
    for (const BundleView& view : sample.views) {
      check_invariant(valid_crop(view.crop), where + ": crop rectangle outside the unit square or empty");
      check_invariant(view.embedding.size() == floats, where + ": embedding size differs from header");
      for (float v : view.embedding) {
        if (!std::isfinite(v)) fail(ErrorCode::kNonFiniteValue, where + ": non-finite embedding entry");
      }
    }
  }
}

std::vector<std::uint8_t> serialize_bundle(const EmbeddingBundle& b) {
  validate(b);
  ByteWriter w;
  w.bytes(kBundleMagic, 4);
  w.u32(kBundleVersion);
  w.u32(static_cast<std::uint32_t>(b.samples.size()));
  w.u32(b.grid_h);
  w.u32(b.grid_w);
  w.u32(b.embed_dim);
  w.u32(b.num_views);
  w.u32(b.num_classes);
  w.u32(b.num_part_categories);
  w.data().reserve(bundle_file_size(b));
  for (const BundleSample& s : b.samples) {
    w.u32(s.label);
    for (const BundleView& v : s.views) {
      w.f32(v.crop.x0);
      w.f32(v.crop.y0);
      w.f32(v.crop.x1);
      w.f32(v.crop.y1);
      for (float x : v.embedding) w.f32(x);
    }
    for (auto id : s.part_ids) w.u16(id);
  }
  return std::move(w.data());
}

EmbeddingBundle parse_bundle(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, ErrorCode::kTruncatedFile);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kBundleMagic, 4) != 0) {
    fail(ErrorCode::kBadMagic, "not a PEB1 file");
  }
  r.text(4);
  const std::uint32_t version = r.u32();
  if (version != kBundleVersion) fail(ErrorCode::kVersionMismatch, "unsupported PEB version " + std::to_string(version));
  EmbeddingBundle b;
  const std::uint32_t count = r.u32();
  b.grid_h = r.u32();
  b.grid_w = r.u32();
  b.embed_dim = r.u32();
  b.num_views = r.u32();
  b.num_classes = r.u32();
  b.num_part_categories = r.u32();
  b.samples.resize(count);
  const std::uint64_t expected = bundle_file_size(b);
  if (bytes.size() < expected) fail(ErrorCode::kTruncatedFile, "file shorter than its declared sizes");
  if (bytes.size() > expected) fail(ErrorCode::kSizeMismatch, "file longer than its declared sizes");

  const std::size_t floats = b.patches() * b.embed_dim;
  for (BundleSample& s : b.samples) {
    s.label = r.u32();
    s.views.resize(b.num_views);
    for (BundleView& v : s.views) {
      v.crop = CropRect{r.f32(), r.f32(), r.f32(), r.f32()};
      v.embedding.resize(floats);
      for (float& x : v.embedding) x = r.f32();
    }
    s.part_ids.resize(b.patches());
    for (auto& id : s.part_ids) id = r.u16();
  }
  validate(b);
  return b;
}

void write_bundle(const EmbeddingBundle& bundle, const std::string& path) {
  write_file(path, serialize_bundle(bundle));
}

EmbeddingBundle read_bundle(const std::string& path) { return parse_bundle(read_file(path)); }

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json header;
  header["config"] = ckpt.config;
  header["epoch"] = ckpt.epoch;
  header["seed"] = ckpt.seed;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const NamedTensor& t : ckpt.tensors) {
    if (t.data.size() != static_cast<std::size_t>(t.shape.rows) * t.shape.cols) {
      fail(ErrorCode::kShapeMismatch, "tensor '" + t.name + "' data does not match its shape");
    }
    header["tensors"].push_back({{"name", t.name}, {"shape", {t.shape.rows, t.shape.cols}}, {"offset", offset}});
    offset += t.data.size();
  }
  const std::string text = header.dump();
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(text.size());
  w.bytes(text.data(), text.size());
  for (const NamedTensor& t : ckpt.tensors) {
    for (float x : t.data) w.f32(x);
  }
  write_file(path, w.data());
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  ByteReader r(bytes, ErrorCode::kTruncatedFile);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    fail(ErrorCode::kBadMagic, "'" + path + "' is not a checkpoint");
  }
  r.text(4);
  if (r.u32() != kCheckpointVersion) fail(ErrorCode::kVersionMismatch, "unsupported checkpoint version");
  const std::uint64_t header_len = r.u64();
  if (header_len > r.remaining()) fail(ErrorCode::kTruncatedFile, "checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.text(static_cast<std::size_t>(header_len)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIoFailure, std::string("malformed checkpoint header: ") + e.what());
  }

  Checkpoint ckpt;
  std::vector<std::pair<std::uint64_t, NamedTensor>> entries;
  try {
    ckpt.config = header.at("config");
    ckpt.epoch = header.at("epoch").get<std::uint32_t>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    for (const auto& t : header.at("tensors")) {
      NamedTensor nt;
      nt.name = t.at("name").get<std::string>();
      const auto& shape = t.at("shape");
      if (!shape.is_array() || shape.size() != 2) fail(ErrorCode::kShapeMismatch, "tensor '" + nt.name + "' shape must be [rows, cols]");
      nt.shape = TensorShape{shape[0].get<std::uint32_t>(), shape[1].get<std::uint32_t>()};
      entries.emplace_back(t.at("offset").get<std::uint64_t>(), std::move(nt));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIoFailure, std::string("malformed checkpoint header: ") + e.what());
  }

  // Tensors must tile the payload contiguously and agree with the config.
  std::uint64_t expected_offset = 0;
  for (const auto& [offset, t] : entries) {
    if (offset != expected_offset) fail(ErrorCode::kShapeMismatch, "tensor '" + t.name + "' offset disagrees with preceding shapes");
    expected_offset += static_cast<std::uint64_t>(t.shape.rows) * t.shape.cols;
  }
  if (expected_offset * 4 != r.remaining()) {
    fail(ErrorCode::kShapeMismatch, "payload length disagrees with the declared tensor shapes");
  }

  const RunConfig cfg = run_config_from_json(ckpt.config);
  std::set<std::string> seen;
  const auto layout = parameter_layout(cfg.head);
  auto expected_shape = [&](const std::string& name) -> const TensorShape* {
    for (const ParamSlot& slot : layout) {
      if (name == slot.name || name == "adam.m." + slot.name || name == "adam.v." + slot.name) return &slot.shape;
    }
    return nullptr;
  };
  for (auto& [offset, t] : entries) {
    const TensorShape* shape = expected_shape(t.name);
    if (!shape) fail(ErrorCode::kShapeMismatch, "unexpected tensor '" + t.name + "'");
    if (!(*shape == t.shape)) fail(ErrorCode::kShapeMismatch, "tensor '" + t.name + "' shape disagrees with the config");
    if (!seen.insert(t.name).second) fail(ErrorCode::kShapeMismatch, "duplicate tensor '" + t.name + "'");
    t.data.resize(static_cast<std::size_t>(t.shape.rows) * t.shape.cols);
    for (float& x : t.data) x = r.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  for (const ParamSlot& slot : layout) {
    if (!seen.count(slot.name)) fail(ErrorCode::kShapeMismatch, "checkpoint lacks tensor '" + slot.name + "'");
  }
  return ckpt;
}

}  // namespace protohead
