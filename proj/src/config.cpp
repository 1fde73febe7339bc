#include "alignps/config.hpp"

#include <exception>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace alignps {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string &path, const std::string &what) {
  throw std::runtime_error("config: " + path + ": " + what);
}

/// Tracks which keys of one JSON object were consumed and yells (with the
/// full dotted path) about leftovers, wrong types, and wrong value spellings.
class Section {
 public:
  Section(const json &j, std::string path)
      : j_(j), path_(std::move(path)), live_exceptions_(std::uncaught_exceptions()) {
    if (!j_.is_object()) bad(path_, "expected an object");
  }

  // The leftover check runs at scope exit so every getter has had its say,
  // but it must stay quiet while an earlier error is already unwinding.
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > live_exceptions_) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) bad(key_path(it.key()), "unknown key");
  }

  bool has(const std::string &key) {
    return j_.contains(key);
  }

  const json &sub(const std::string &key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void get(const std::string &key, int &out) {
    if (!take(key)) return;
    const json &v = j_.at(key);
    if (!v.is_number_integer()) bad(key_path(key), "expected an integer");
    out = v.get<int>();
  }
  void get(const std::string &key, float &out) {
    if (!take(key)) return;
    const json &v = j_.at(key);
    if (!v.is_number()) bad(key_path(key), "expected a number");
    out = v.get<float>();
  }
  void get(const std::string &key, bool &out) {
    if (!take(key)) return;
    const json &v = j_.at(key);
    if (!v.is_boolean()) bad(key_path(key), "expected true or false");
    out = v.get<bool>();
  }
  void get(const std::string &key, std::string &out) {
    if (!take(key)) return;
    const json &v = j_.at(key);
    if (!v.is_string()) bad(key_path(key), "expected a string");
    out = v.get<std::string>();
  }
  void get(const std::string &key, std::uint64_t &out) {
    if (!take(key)) return;
    const json &v = j_.at(key);
    if (!v.is_number_integer()) bad(key_path(key), "expected an integer");
    out = v.get<std::uint64_t>();
  }
  void get(const std::string &key, std::vector<int> &out) {
    if (!take(key)) return;
    const json &v = j_.at(key);
    if (!v.is_array()) bad(key_path(key), "expected an array of integers");
    out.clear();
    for (const auto &e : v) {
      if (!e.is_number_integer()) bad(key_path(key), "expected an array of integers");
      out.push_back(e.get<int>());
    }
  }

  /// Enum spelled as a string; `pairs` lists the accepted spellings.
  template <typename E>
  void get_enum(const std::string &key, E &out,
                std::initializer_list<std::pair<const char *, E>> pairs) {
    if (!take(key)) return;
    const json &v = j_.at(key);
    if (!v.is_string()) bad(key_path(key), "expected a string");
    const std::string s = v.get<std::string>();
    std::string options;
    for (const auto &[name, value] : pairs) {
      if (s == name) {
        out = value;
        return;
      }
      if (!options.empty()) options += ", ";
      options += name;
    }
    bad(key_path(key), "unknown value \"" + s + "\" (expected one of: " + options + ")");
  }

  std::string key_path(const std::string &key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  bool take(const std::string &key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json &j_;
  std::string path_;
  std::set<std::string> seen_;
  int live_exceptions_;
};

void parse_backbone(const json &j, const std::string &path, BackboneConfig &out) {
  Section s(j, path);
  s.get_enum("variant", out.variant,
             {{"tiny", BackboneVariant::kTiny}, {"resnet50_like", BackboneVariant::kResNet50Like}});
  s.get("c3", out.c3);
  s.get("c4", out.c4);
  s.get("c5", out.c5);
  s.get("deform_res3", out.deform_res3);
  s.get("deform_res4", out.deform_res4);
  s.get("deform_res5", out.deform_res5);
}

void parse_afa(const json &j, const std::string &path, AfaConfig &out) {
  Section s(j, path);
  s.get_enum("lateral", out.lateral,
             {{"plain1x1", LateralKind::kPlain1x1}, {"deform3x3", LateralKind::kDeform3x3}});
  s.get_enum("fusion", out.fusion, {{"sum", FusionKind::kSum}, {"concat", FusionKind::kConcat}});
  s.get_enum("output", out.output,
             {{"plain3x3", OutputKind::kPlain3x3}, {"deform3x3", OutputKind::kDeform3x3}});
  s.get("out_channels", out.out_channels);
  s.get_enum("levels", out.levels,
             {{"P3", OutputLevels::kP3Only},
              {"P4", OutputLevels::kP4Only},
              {"P5", OutputLevels::kP5Only},
              {"P3+P4", OutputLevels::kP3P4},
              {"P3+P4+P5", OutputLevels::kP3P4P5}});
  s.get("range_p3", out.range_p3);
  s.get("range_p4", out.range_p4);
}

void parse_head(const json &j, const std::string &path, HeadConfig &out) {
  Section s(j, path);
  s.get("tower_depth", out.tower_depth);
  s.get("prior_prob", out.prior_prob);
  s.get("radius", out.radius);
  s.get("focal_alpha", out.focal_alpha);
  s.get("focal_gamma", out.focal_gamma);
  s.get("ctr_weighted_reg", out.ctr_weighted_reg);
  s.get("score_thresh", out.score_thresh);
  s.get("nms_thresh", out.nms_thresh);
  s.get("max_detections", out.max_detections);
}

void parse_model(const json &j, const std::string &path, ModelConfig &out) {
  Section s(j, path);
  if (s.has("backbone")) parse_backbone(s.sub("backbone"), path + ".backbone", out.backbone);
  if (s.has("afa")) parse_afa(s.sub("afa"), path + ".afa", out.afa);
  if (s.has("head")) parse_head(s.sub("head"), path + ".head", out.head);
  s.get_enum("task", out.task,
             {{"reg_tower", TaskStructure::kRegTower},
              {"cls_tower", TaskStructure::kClsTower},
              {"own_tower", TaskStructure::kOwnTower},
              {"direct", TaskStructure::kDirect}});
}

void parse_reid(const json &j, const std::string &path, ReidLossConfig &out) {
  Section s(j, path);
  s.get("focal", out.focal);
  s.get("focal_gamma", out.focal_gamma);
  s.get("use_triplet", out.use_triplet);
  s.get("triplet_use_lut", out.triplet_use_lut);
  s.get("margin", out.margin);
  s.get("samples_per_person", out.samples_per_person);
}

void parse_transforms(const json &j, const std::string &path, TransformConfig &out) {
  Section s(j, path);
  s.get("train_min_long", out.train_min_long);
  s.get("train_max_long", out.train_max_long);
  s.get("test_w", out.test_w);
  s.get("test_h", out.test_h);
  s.get("flip_prob", out.flip_prob);
}

void parse_train(const json &j, const std::string &path, TrainConfig &out) {
  Section s(j, path);
  s.get("base_lr", out.base_lr);
  s.get("momentum", out.momentum);
  s.get("weight_decay", out.weight_decay);
  s.get("lr_decay_epochs", out.lr_decay_epochs);
  s.get("lr_decay_factor", out.lr_decay_factor);
  s.get("total_epochs", out.total_epochs);
  s.get("warmup_steps", out.warmup_steps);
  s.get("batch_size", out.batch_size);
  s.get("w_det", out.w_det);
  s.get("w_reid", out.w_reid);
  s.get("max_steps", out.max_steps);
  s.get("queue_slots", out.queue_slots);
  s.get("seed", out.seed);
  if (s.has("reid")) parse_reid(s.sub("reid"), path + ".reid", out.reid);
  if (s.has("transforms")) parse_transforms(s.sub("transforms"), path + ".transforms", out.transforms);
}

}  // namespace

AppConfig parse_app_config(const std::string &json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception &e) {
    throw std::runtime_error(std::string("config: not valid JSON: ") + e.what());
  }
  AppConfig c;
  Section s(j, "");
  if (s.has("model")) parse_model(s.sub("model"), "model", c.model);
  if (s.has("train")) parse_train(s.sub("train"), "train", c.train);
  if (s.has("eval")) {
    Section e(s.sub("eval"), "eval");
    e.get("gallery_size", c.eval.gallery_size);
  }
  if (s.has("data")) {
    Section d(s.sub("data"), "data");
    d.get("train_dir", c.data.train_dir);
    d.get("test_dir", c.data.test_dir);
  }
  return c;
}

AppConfig load_app_config(const std::string &path) {
  std::ifstream is(path);
  if (!is.good()) throw std::runtime_error("config: cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_app_config(ss.str());
}

namespace {

const char *variant_name(BackboneVariant v) {
  return v == BackboneVariant::kTiny ? "tiny" : "resnet50_like";
}
const char *lateral_name(LateralKind v) {
  return v == LateralKind::kPlain1x1 ? "plain1x1" : "deform3x3";
}
const char *fusion_name(FusionKind v) { return v == FusionKind::kSum ? "sum" : "concat"; }
const char *output_name(OutputKind v) {
  return v == OutputKind::kPlain3x3 ? "plain3x3" : "deform3x3";
}
const char *levels_name(OutputLevels v) {
  switch (v) {
    case OutputLevels::kP3Only: return "P3";
    case OutputLevels::kP4Only: return "P4";
    case OutputLevels::kP5Only: return "P5";
    case OutputLevels::kP3P4: return "P3+P4";
    case OutputLevels::kP3P4P5: return "P3+P4+P5";
  }
  return "P3";
}
const char *task_name(TaskStructure v) {
  switch (v) {
    case TaskStructure::kRegTower: return "reg_tower";
    case TaskStructure::kClsTower: return "cls_tower";
    case TaskStructure::kOwnTower: return "own_tower";
    case TaskStructure::kDirect: return "direct";
  }
  return "direct";
}

}  // namespace

std::string serialize_app_config(const AppConfig &c) {
  json j;
  j["model"]["backbone"] = {{"variant", variant_name(c.model.backbone.variant)},
                            {"c3", c.model.backbone.c3},
                            {"c4", c.model.backbone.c4},
                            {"c5", c.model.backbone.c5},
                            {"deform_res3", c.model.backbone.deform_res3},
                            {"deform_res4", c.model.backbone.deform_res4},
                            {"deform_res5", c.model.backbone.deform_res5}};
  j["model"]["afa"] = {{"lateral", lateral_name(c.model.afa.lateral)},
                       {"fusion", fusion_name(c.model.afa.fusion)},
                       {"output", output_name(c.model.afa.output)},
                       {"out_channels", c.model.afa.out_channels},
                       {"levels", levels_name(c.model.afa.levels)},
                       {"range_p3", c.model.afa.range_p3},
                       {"range_p4", c.model.afa.range_p4}};
  j["model"]["head"] = {{"tower_depth", c.model.head.tower_depth},
                        {"prior_prob", c.model.head.prior_prob},
                        {"radius", c.model.head.radius},
                        {"focal_alpha", c.model.head.focal_alpha},
                        {"focal_gamma", c.model.head.focal_gamma},
                        {"ctr_weighted_reg", c.model.head.ctr_weighted_reg},
                        {"score_thresh", c.model.head.score_thresh},
                        {"nms_thresh", c.model.head.nms_thresh},
                        {"max_detections", c.model.head.max_detections}};
  j["model"]["task"] = task_name(c.model.task);
  j["train"] = {{"base_lr", c.train.base_lr},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay},
                {"lr_decay_epochs", c.train.lr_decay_epochs},
                {"lr_decay_factor", c.train.lr_decay_factor},
                {"total_epochs", c.train.total_epochs},
                {"warmup_steps", c.train.warmup_steps},
                {"batch_size", c.train.batch_size},
                {"w_det", c.train.w_det},
                {"w_reid", c.train.w_reid},
                {"max_steps", c.train.max_steps},
                {"queue_slots", c.train.queue_slots},
                {"seed", c.train.seed}};
  j["train"]["reid"] = {{"focal", c.train.reid.focal},
                        {"focal_gamma", c.train.reid.focal_gamma},
                        {"use_triplet", c.train.reid.use_triplet},
                        {"triplet_use_lut", c.train.reid.triplet_use_lut},
                        {"margin", c.train.reid.margin},
                        {"samples_per_person", c.train.reid.samples_per_person}};
  j["train"]["transforms"] = {{"train_min_long", c.train.transforms.train_min_long},
                              {"train_max_long", c.train.transforms.train_max_long},
                              {"test_w", c.train.transforms.test_w},
                              {"test_h", c.train.transforms.test_h},
                              {"flip_prob", c.train.transforms.flip_prob}};
  j["eval"] = {{"gallery_size", c.eval.gallery_size}};
  j["data"] = {{"train_dir", c.data.train_dir}, {"test_dir", c.data.test_dir}};
  return j.dump(2) + "\n";
}

GenSpec parse_gen_spec(const std::string &json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception &e) {
    throw std::runtime_error(std::string("config: not valid JSON: ") + e.what());
  }
  GenSpec g;
  Section s(j, "");
  s.get("width", g.scene.width);
  s.get("height", g.scene.height);
  s.get("min_persons", g.scene.min_persons);
  s.get("max_persons", g.scene.max_persons);
  s.get("identity_count", g.scene.identity_count);
  s.get("person_w", g.scene.person_w);
  s.get("person_h", g.scene.person_h);
  s.get("scale_min", g.scene.scale_min);
  s.get("scale_max", g.scene.scale_max);
  s.get("occlusion_prob", g.scene.occlusion_prob);
  s.get("unlabeled_prob", g.scene.unlabeled_prob);
  s.get("train_images", g.train_images);
  s.get("test_images", g.test_images);
  return g;
}

GenSpec load_gen_spec(const std::string &path) {
  std::ifstream is(path);
  if (!is.good()) throw std::runtime_error("config: cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_gen_spec(ss.str());
}

}  // namespace alignps
