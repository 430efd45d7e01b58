#include "protohead/config.hpp"

#include <fstream>
#include <set>

#include "protohead/errors.hpp"

namespace protohead {
namespace {

using nlohmann::json;

void check(bool ok, const std::string& message) {
  if (!ok) fail(ErrorCode::kConfigError, message);
}

// Reads the known keys of one JSON object and rejects whatever is left.
class Section {
 public:
  Section(const json& doc, std::string name) : doc_(doc), name_(std::move(name)) {
    check(doc_.is_object(), "section '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    try {
      field = it->get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::kConfigError, name_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      check(seen_.count(it.key()) > 0, "unknown key '" + name_ + "." + it.key() + "'");
    }
  }

 private:
  const json& doc_;
  std::string name_;
  std::set<std::string> seen_;
};

std::string branch_name(Branch b) { return b == Branch::kStudent ? "student" : "teacher"; }

Branch parse_branch(const std::string& s) {
  if (s == "student") return Branch::kStudent;
  if (s == "teacher") return Branch::kTeacher;
  fail(ErrorCode::kConfigError, "head.inference_branch must be 'student' or 'teacher', got '" + s + "'");
}

}  // namespace

void validate(const HeadConfig& c) {
  check(c.embed_dim >= 1, "head.embed_dim must be >= 1");
  check(c.projection_dim >= 1, "head.projection_dim must be >= 1");
  check(c.num_prototypes >= 1, "head.num_prototypes must be >= 1");
  check(c.num_classes >= 2, "head.num_classes must be >= 2");
  check(c.temperature > 0.0, "head.temperature must be > 0");
  check(c.top_k >= 1, "head.top_k must be >= 1");
  check(c.aligned_grid >= 1, "head.aligned_grid must be >= 1");
  check(c.teacher_momentum >= 0.0 && c.teacher_momentum <= 1.0,
        "head.teacher_momentum must lie in [0, 1]");
  check(c.classifier_init > 0.0, "head.classifier_init must be > 0");
}

void validate(const TrainConfig& c) {
  check(c.batch_size >= 2, "train.batch_size must be >= 2");
  check(c.base_lr > 0.0, "train.base_lr must be > 0");
  check(c.weight_decay >= 0.0, "train.weight_decay must be >= 0");
  check(c.epochs > c.warmup_epochs, "train.epochs must exceed train.warmup_epochs");
  check(c.head_lr_multiplier > 0.0, "train.head_lr_multiplier must be > 0");
  check(c.val_fraction >= 0.0 && c.val_fraction < 1.0, "train.val_fraction must lie in [0, 1)");
}

void validate(const LossWeights& w) {
  const double lambdas[] = {w.assignment, w.alignment, w.contrastive, w.sparsity, w.classification};
  double sum = 0.0;
  for (double l : lambdas) {
    check(l >= 0.0, "loss weights must be >= 0");
    sum += l;
  }
  check(sum > 0.0, "all loss weights are zero: no objective to optimize");
  check(w.hoyer_alpha >= 0.0 && w.hoyer_gamma >= 0.0, "loss.hoyer_alpha/gamma must be >= 0");
  check(w.negatives >= 1, "loss.negatives must be >= 1");
  check(w.log_floor > 0.0, "loss.log_floor must be > 0");
}

void validate(const AugmentConfig& a) {
  check(a.min_scale > 0.0 && a.min_scale <= a.max_scale && a.max_scale <= 1.0,
        "augment scale range must satisfy 0 < min_scale <= max_scale <= 1");
  check(a.min_aspect > 0.0 && a.min_aspect <= a.max_aspect, "augment aspect range invalid");
  check(a.min_overlap >= 0.0 && a.min_overlap <= 1.0, "augment.min_overlap must lie in [0, 1]");
  check(a.color_scale >= 0.0 && a.color_scale < 1.0, "augment.color_scale must lie in [0, 1)");
  check(a.color_shift >= 0.0 && a.noise_sigma >= 0.0, "augment noise levels must be >= 0");
}

void validate(const SynthConfig& s) {
  check(s.num_classes >= 2, "synth.num_classes must be >= 2");
  check(s.num_part_categories >= 2, "synth.num_part_categories must be >= 2");
  check(s.styles_per_category >= 1, "synth.styles_per_category must be >= 1");
  check(s.grid_h >= 1 && s.grid_w >= 1, "synth grid must be non-empty");
  check(s.embed_dim >= 1, "synth.embed_dim must be >= 1");
  check(s.min_part_side >= 1 && s.min_part_side <= s.max_part_side,
        "synth part side range invalid");
  check(s.sigma_data >= 0.0, "synth.sigma_data must be >= 0");
  double combos = 1.0;
  for (std::uint32_t u = 0; u < s.num_part_categories; ++u) combos *= s.styles_per_category;
  check(combos >= s.num_classes, "not enough style combinations for unique classes");
  if (!s.class_styles.empty()) {
    check(s.class_styles.size() == s.num_classes, "synth.class_styles needs one row per class");
    std::set<std::vector<std::uint32_t>> unique;
    for (const auto& row : s.class_styles) {
      check(row.size() == s.num_part_categories, "synth.class_styles row length must equal U");
      for (auto v : row) check(v < s.styles_per_category, "synth.class_styles entry out of range");
      unique.insert(row);
    }
    check(unique.size() == s.class_styles.size(), "synth.class_styles rows must be unique");
  }
}

void validate(const RunConfig& c) {
  validate(c.head);
  validate(c.train);
  validate(c.loss);
  validate(c.augment);
  validate(c.synth);
  check(c.metrics.score_sheet_k >= 1, "metrics.score_sheet_k must be >= 1");
  check(c.metrics.sigma_stab >= 0.0, "metrics.sigma_stab must be >= 0");
  check(c.head.top_k <= c.synth.grid_h * c.synth.grid_w || c.synth.grid_h == 0,
        "head.top_k exceeds the synthetic patch count");
}

nlohmann::json to_json(const RunConfig& c) {
  json j;
  j["head"] = {{"embed_dim", c.head.embed_dim},
               {"projection_dim", c.head.projection_dim},
               {"num_prototypes", c.head.num_prototypes},
               {"num_classes", c.head.num_classes},
               {"temperature", c.head.temperature},
               {"top_k", c.head.top_k},
               {"aligned_grid", c.head.aligned_grid},
               {"teacher_momentum", c.head.teacher_momentum},
               {"classifier_init", c.head.classifier_init},
               {"inference_branch", branch_name(c.head.inference_branch)}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"base_lr", c.train.base_lr},
                {"weight_decay", c.train.weight_decay},
                {"warmup_epochs", c.train.warmup_epochs},
                {"epochs", c.train.epochs},
                {"head_lr_multiplier", c.train.head_lr_multiplier},
                {"val_fraction", c.train.val_fraction},
                {"decay_prototypes", c.train.decay_prototypes},
                {"seed", c.train.seed}};
  j["loss"] = {{"assignment", c.loss.assignment},
               {"alignment", c.loss.alignment},
               {"contrastive", c.loss.contrastive},
               {"sparsity", c.loss.sparsity},
               {"classification", c.loss.classification},
               {"hoyer_alpha", c.loss.hoyer_alpha},
               {"hoyer_gamma", c.loss.hoyer_gamma},
               {"negatives", c.loss.negatives},
               {"log_floor", c.loss.log_floor}};
  j["alignment"] = {{"k_shift", c.alignment.k_shift}, {"v_shift", c.alignment.v_shift}};
  j["augment"] = {{"min_scale", c.augment.min_scale},
                  {"max_scale", c.augment.max_scale},
                  {"min_aspect", c.augment.min_aspect},
                  {"max_aspect", c.augment.max_aspect},
                  {"min_overlap", c.augment.min_overlap},
                  {"color_scale", c.augment.color_scale},
                  {"color_shift", c.augment.color_shift},
                  {"noise_sigma", c.augment.noise_sigma}};
  j["synth"] = {{"num_classes", c.synth.num_classes},
                {"samples_per_class", c.synth.samples_per_class},
                {"grid_h", c.synth.grid_h},
                {"grid_w", c.synth.grid_w},
                {"embed_dim", c.synth.embed_dim},
                {"num_part_categories", c.synth.num_part_categories},
                {"styles_per_category", c.synth.styles_per_category},
                {"class_styles", c.synth.class_styles},
                {"min_part_side", c.synth.min_part_side},
                {"max_part_side", c.synth.max_part_side},
                {"sigma_data", c.synth.sigma_data},
                {"seed", c.synth.seed}};
  j["metrics"] = {{"score_sheet_k", c.metrics.score_sheet_k},
                  {"part_threshold", c.metrics.part_threshold},
                  {"use_threshold", c.metrics.use_threshold},
                  {"sigma_stab", c.metrics.sigma_stab},
                  {"seed", c.metrics.seed}};
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& doc) {
  RunConfig c;
  Section root(doc, "config");
  static const json kEmpty = json::object();
  auto sub = [&](const char* key) -> const json& {
    auto it = doc.find(key);
    return it == doc.end() ? kEmpty : *it;
  };
  json ignored;
  for (const char* key : {"head", "train", "loss", "alignment", "augment", "synth", "metrics"}) {
    root.read(key, ignored);
  }
  root.finish();

  {
    Section s(sub("head"), "head");
    std::string branch = branch_name(c.head.inference_branch);
    s.read("embed_dim", c.head.embed_dim);
    s.read("projection_dim", c.head.projection_dim);
    s.read("num_prototypes", c.head.num_prototypes);
    s.read("num_classes", c.head.num_classes);
    s.read("temperature", c.head.temperature);
    s.read("top_k", c.head.top_k);
    s.read("aligned_grid", c.head.aligned_grid);
    s.read("teacher_momentum", c.head.teacher_momentum);
    s.read("classifier_init", c.head.classifier_init);
    s.read("inference_branch", branch);
    s.finish();
    c.head.inference_branch = parse_branch(branch);
  }
  {
    Section s(sub("train"), "train");
    s.read("batch_size", c.train.batch_size);
    s.read("base_lr", c.train.base_lr);
    s.read("weight_decay", c.train.weight_decay);
    s.read("warmup_epochs", c.train.warmup_epochs);
    s.read("epochs", c.train.epochs);
    s.read("head_lr_multiplier", c.train.head_lr_multiplier);
    s.read("val_fraction", c.train.val_fraction);
    s.read("decay_prototypes", c.train.decay_prototypes);
    s.read("seed", c.train.seed);
    s.finish();
  }
  {
    Section s(sub("loss"), "loss");
    s.read("assignment", c.loss.assignment);
    s.read("alignment", c.loss.alignment);
    s.read("contrastive", c.loss.contrastive);
    s.read("sparsity", c.loss.sparsity);
    s.read("classification", c.loss.classification);
    s.read("hoyer_alpha", c.loss.hoyer_alpha);
    s.read("hoyer_gamma", c.loss.hoyer_gamma);
    s.read("negatives", c.loss.negatives);
    s.read("log_floor", c.loss.log_floor);
    s.finish();
  }
  {
    Section s(sub("alignment"), "alignment");
    s.read("k_shift", c.alignment.k_shift);
    s.read("v_shift", c.alignment.v_shift);
    s.finish();
  }
  {
    Section s(sub("augment"), "augment");
    s.read("min_scale", c.augment.min_scale);
    s.read("max_scale", c.augment.max_scale);
    s.read("min_aspect", c.augment.min_aspect);
    s.read("max_aspect", c.augment.max_aspect);
    s.read("min_overlap", c.augment.min_overlap);
    s.read("color_scale", c.augment.color_scale);
    s.read("color_shift", c.augment.color_shift);
    s.read("noise_sigma", c.augment.noise_sigma);
    s.finish();
  }
  {
    Section s(sub("synth"), "synth");
    s.read("num_classes", c.synth.num_classes);
    s.read("samples_per_class", c.synth.samples_per_class);
    s.read("grid_h", c.synth.grid_h);
    s.read("grid_w", c.synth.grid_w);
    s.read("embed_dim", c.synth.embed_dim);
    s.read("num_part_categories", c.synth.num_part_categories);
    s.read("styles_per_category", c.synth.styles_per_category);
    s.read("class_styles", c.synth.class_styles);
    s.read("min_part_side", c.synth.min_part_side);
    s.read("max_part_side", c.synth.max_part_side);
    s.read("sigma_data", c.synth.sigma_data);
    s.read("seed", c.synth.seed);
    s.finish();
  }
  {
    Section s(sub("metrics"), "metrics");
    s.read("score_sheet_k", c.metrics.score_sheet_k);
    s.read("part_threshold", c.metrics.part_threshold);
    s.read("use_threshold", c.metrics.use_threshold);
    s.read("sigma_stab", c.metrics.sigma_stab);
    s.read("seed", c.metrics.seed);
    s.finish();
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIoFailure, "cannot open config '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfigError, "malformed config '" + path + "': " + e.what());
  }
  return run_config_from_json(doc);
}

}  // namespace protohead
