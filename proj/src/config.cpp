#include "grasp/config.hpp"

#include "grasp/errors.hpp"

#include <fstream>
#include <set>

namespace grasp {

namespace {

constexpr std::pair<Strategy, const char*> kStrategies[] = {
    {Strategy::baseline_2c, "baseline_2c"},   {Strategy::ana_in_3c, "ana_in_3c"},
    {Strategy::grasp_mirror, "grasp_mirror"}, {Strategy::grasp_mixture, "grasp_mixture"},
    {Strategy::grasp_fusion_only, "grasp_fusion_only"}, {Strategy::finetune, "finetune"},
    {Strategy::multiclass, "multiclass"},     {Strategy::multitask, "multitask"},
};

// Reads known keys from a JSON object and rejects anything else.
class Reader {
 public:
  Reader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + qualified(k) + "'");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + qualified(key) + "': " + e.what());
    }
  }

  template <typename F>
  void custom(const std::string& key, F&& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      fn(j_.at(key));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + qualified(key) + "': " + e.what());
    }
  }

  const Json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string qualified(const std::string& key) const { return section_.empty() ? key : section_ + "." + key; }

 private:
  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

Extent extent_from(const Json& j) {
  const auto v = j.get<std::vector<Index>>();
  if (v.size() != 3) throw ConfigError("extent must have three entries");
  return {v[0], v[1], v[2]};
}

Json extent_to(const Extent& e) { return Json::array({e[0], e[1], e[2]}); }

Json to_json(const PhantomConfig& c) {
  return {{"grid", extent_to(c.grid)},
          {"spacing", Json::array({c.spacing[0], c.spacing[1], c.spacing[2]})},
          {"num_organs", c.num_organs},
          {"hot_organ_ids", c.hot_organ_ids},
          {"tumor_host_ids", c.tumor_host_ids},
          {"tumors_per_case", Json::array({c.tumors_per_case.lo, c.tumors_per_case.hi})},
          {"tumor_radius_voxels", Json::array({c.tumor_radius_voxels.lo, c.tumor_radius_voxels.hi})},
          {"healthy_fraction", c.healthy_fraction},
          {"noise_sigma", c.noise_sigma},
          {"seed", c.seed},
          {"organ_radius_voxels", Json::array({c.organ_radius_voxels.lo, c.organ_radius_voxels.hi})},
          {"hot_spots_per_organ", Json::array({c.hot_spots_per_organ.lo, c.hot_spots_per_organ.hi})},
          {"ct_noise_sigma", c.ct_noise_sigma},
          {"body_uptake", c.body_uptake},
          {"host_uptake", c.host_uptake},
          {"hot_uptake", c.hot_uptake},
          {"hot_spot_uptake", Json::array({c.hot_spot_uptake.lo, c.hot_spot_uptake.hi})},
          {"tumor_uptake", Json::array({c.tumor_uptake.lo, c.tumor_uptake.hi})},
          {"max_retries", c.max_retries}};
}

template <typename R>
void read_range(Reader& r, const std::string& key, R& out) {
  r.custom(key, [&](const Json& j) {
    if (!j.is_array() || j.size() != 2) throw ConfigError("config key '" + r.qualified(key) + "' must be [lo, hi]");
    j.at(0).get_to(out.lo);
    j.at(1).get_to(out.hi);
  });
}

PhantomConfig phantom_from(const Json& j) {
  PhantomConfig c;
  Reader r(j, "phantom");
  r.custom("grid", [&](const Json& v) { c.grid = extent_from(v); });
  r.custom("spacing", [&](const Json& v) {
    const auto s = v.get<std::vector<double>>();
    if (s.size() != 3) throw ConfigError("phantom.spacing must have three entries");
    c.spacing = {s[0], s[1], s[2]};
  });
  r.get("num_organs", c.num_organs);
  r.get("hot_organ_ids", c.hot_organ_ids);
  r.get("tumor_host_ids", c.tumor_host_ids);
  read_range(r, "tumors_per_case", c.tumors_per_case);
  read_range(r, "tumor_radius_voxels", c.tumor_radius_voxels);
  r.get("healthy_fraction", c.healthy_fraction);
  r.get("noise_sigma", c.noise_sigma);
  r.get("seed", c.seed);
  read_range(r, "organ_radius_voxels", c.organ_radius_voxels);
  read_range(r, "hot_spots_per_organ", c.hot_spots_per_organ);
  r.get("ct_noise_sigma", c.ct_noise_sigma);
  r.get("body_uptake", c.body_uptake);
  r.get("host_uptake", c.host_uptake);
  r.get("hot_uptake", c.hot_uptake);
  read_range(r, "hot_spot_uptake", c.hot_spot_uptake);
  read_range(r, "tumor_uptake", c.tumor_uptake);
  r.get("max_retries", c.max_retries);
  return c;
}

Json to_json(const LossConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"tumor_weight", c.tumor_weight},
          {"patch_aware_weights",
           {{"absent", c.patch_aware_weights.absent},
            {"anatomy_present", c.patch_aware_weights.anatomy_present},
            {"tumor", c.patch_aware_weights.tumor}}},
          {"alpha", c.alpha},
          {"ema_decay", c.ema_decay}};
}

LossConfig loss_from(const Json& j) {
  LossConfig c;
  Reader r(j, "train.loss");
  r.custom("kind", [&](const Json& v) { c.kind = parse_loss_kind(v.get<std::string>()); });
  r.get("tumor_weight", c.tumor_weight);
  if (const Json* w = r.child("patch_aware_weights")) {
    Reader rw(*w, "train.loss.patch_aware_weights");
    rw.get("absent", c.patch_aware_weights.absent);
    rw.get("anatomy_present", c.patch_aware_weights.anatomy_present);
    rw.get("tumor", c.patch_aware_weights.tumor);
  }
  r.get("alpha", c.alpha);
  r.get("ema_decay", c.ema_decay);
  return c;
}

std::string to_string(PseudoLabelSource s) { return s == PseudoLabelSource::degraded ? "degraded" : "ground_truth_organs"; }

PseudoLabelSource parse_source(const std::string& s) {
  if (s == "ground_truth_organs") return PseudoLabelSource::ground_truth_organs;
  if (s == "degraded") return PseudoLabelSource::degraded;
  throw ConfigError("unknown pseudo_label_source '" + s + "'");
}

}  // namespace

std::string to_string(Strategy s) {
  for (const auto& [k, name] : kStrategies)
    if (k == s) return name;
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  for (const auto& [k, name] : kStrategies)
    if (s == name) return k;
  throw ConfigError("unknown strategy '" + s + "'");
}

int input_channels(Strategy s) { return uses_label_channel(s) ? 3 : 2; }

bool uses_fusion(Strategy s) {
  return s == Strategy::grasp_mirror || s == Strategy::grasp_mixture || s == Strategy::grasp_fusion_only;
}

bool uses_label_channel(Strategy s) {
  return s == Strategy::ana_in_3c || s == Strategy::grasp_mirror || s == Strategy::grasp_mixture;
}

bool needs_anatomy(Strategy s) { return uses_fusion(s) || s == Strategy::finetune; }

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
  if (uses_fusion(strategy) && activation_epoch() >= epochs)
    throw ConfigError("train.fusion_activation_epoch must be below train.epochs");
  for (Index e : patch_size)
    if (e < 1) throw ConfigError("train.patch_size extents must be >= 1");
  if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
  if (patches_per_case < 1) throw ConfigError("train.patches_per_case must be >= 1");
  if (cases_per_epoch < 0) throw ConfigError("train.cases_per_epoch must be >= 0");
  if (probe_patches < 1) throw ConfigError("train.probe_patches must be >= 1");
  if (!(degrade_rate >= 0.0 && degrade_rate <= 1.0)) throw ConfigError("train.degrade_rate must lie in [0, 1]");
  loss.validate();
  if (loss.kind == LossKind::multitask && strategy != Strategy::multitask)
    throw ConfigError("loss kind 'multitask' requires the multitask strategy");
  if (loss.kind == LossKind::patch_aware && strategy != Strategy::multiclass)
    throw ConfigError("loss kind 'patch_aware' requires the multiclass strategy");
}

void AnatomyConfig::validate() const {
  if (epochs < 1) throw ConfigError("anatomy.epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("anatomy.lr must be positive");
  if (batch_size < 1) throw ConfigError("anatomy.batch_size must be >= 1");
  if (patches_per_case < 1) throw ConfigError("anatomy.patches_per_case must be >= 1");
  if (cases_per_epoch < 0) throw ConfigError("anatomy.cases_per_epoch must be >= 0");
  if (!(min_organ_dice >= 0.0 && min_organ_dice <= 1.0)) throw ConfigError("anatomy.min_organ_dice must lie in [0, 1]");
}

void ExperimentConfig::validate() const {
  phantom.validate();
  if (data.n_train < 1 || data.n_val < 1) throw ConfigError("data.n_train and data.n_val must be >= 1");
  backbone.validate();
  fusion.validate();
  train.validate();
  anatomy.validate();
  for (int a = 0; a < 3; ++a) {
    const Index div = backbone.divisor();
    if (train.patch_size[static_cast<std::size_t>(a)] % div || phantom.grid[static_cast<std::size_t>(a)] % div ||
        anatomy.patch_size[static_cast<std::size_t>(a)] % div)
      throw ConfigError("patch and grid extents must be divisible by " + std::to_string(div));
    if (train.patch_size[static_cast<std::size_t>(a)] > phantom.grid[static_cast<std::size_t>(a)] ||
        anatomy.patch_size[static_cast<std::size_t>(a)] > phantom.grid[static_cast<std::size_t>(a)])
      throw ConfigError("patch extents must not exceed the phantom grid");
  }
  if (uses_fusion(train.strategy))
    for (int l = 0; l < fusion.fusion_depth; ++l) {
      const int c = backbone.width(backbone.depth - 1 - l);
      if (c % fusion.heads) throw ConfigError("fused width " + std::to_string(c) + " not divisible by fusion.heads");
      if (c % fusion.se_reduction) throw ConfigError("fused width " + std::to_string(c) + " not divisible by fusion.se_reduction");
    }
  if (uses_fusion(train.strategy) && fusion.fusion_depth > backbone.depth)
    throw ConfigError("fusion_depth exceeds backbone depth");
}

Json to_json(const BackboneConfig& c) {
  return {{"in_channels", c.in_channels}, {"out_classes", c.out_classes},     {"depth", c.depth},
          {"base_width", c.base_width},   {"variant", to_string(c.variant)}, {"aux_out_classes", c.aux_out_classes}};
}

BackboneConfig backbone_from_json(const Json& j) {
  BackboneConfig c;
  Reader r(j, "backbone");
  r.get("in_channels", c.in_channels);
  r.get("out_classes", c.out_classes);
  r.get("depth", c.depth);
  r.get("base_width", c.base_width);
  r.custom("variant", [&](const Json& v) { c.variant = parse_variant(v.get<std::string>()); });
  r.get("aux_out_classes", c.aux_out_classes);
  return c;
}

Json to_json(const FusionConfig& c) {
  return {{"heads", c.heads},         {"sa_kernel", c.sa_kernel},         {"se_reduction", c.se_reduction},
          {"gate_init", c.gate_init}, {"fusion_depth", c.fusion_depth}, {"setup", to_string(c.setup)}};
}

FusionConfig fusion_from_json(const Json& j) {
  FusionConfig c;
  Reader r(j, "fusion");
  r.get("heads", c.heads);
  r.get("sa_kernel", c.sa_kernel);
  r.get("se_reduction", c.se_reduction);
  r.get("gate_init", c.gate_init);
  r.get("fusion_depth", c.fusion_depth);
  r.custom("setup", [&](const Json& v) { c.setup = parse_setup(v.get<std::string>()); });
  return c;
}

Json to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  const auto& a = c.anatomy;
  return {
      {"seed", c.seed},
      {"deterministic", c.deterministic},
      {"phantom", to_json(c.phantom)},
      {"data", {{"n_train", c.data.n_train}, {"n_val", c.data.n_val}, {"dataset_dir", c.data.dataset_dir.generic_string()}}},
      {"normalization",
       {{"ct_window_low", c.normalization.ct_window_low},
        {"ct_window_high", c.normalization.ct_window_high},
        {"pet_percentile", c.normalization.pet_percentile},
        {"pet_clip", c.normalization.pet_clip}}},
      {"backbone", to_json(c.backbone)},
      {"fusion", to_json(c.fusion)},
      {"train",
       {{"strategy", to_string(t.strategy)},
        {"epochs", t.epochs},
        {"lr", t.lr},
        {"batch_size", t.batch_size},
        {"weight_decay", t.weight_decay},
        {"fusion_activation_epoch", t.fusion_activation_epoch},
        {"patch_size", extent_to(t.patch_size)},
        {"seeds", t.seeds},
        {"loss", to_json(t.loss)},
        {"pseudo_label_source", to_string(t.pseudo_label_source)},
        {"degrade_rate", t.degrade_rate},
        {"patches_per_case", t.patches_per_case},
        {"cases_per_epoch", t.cases_per_epoch},
        {"probe_patches", t.probe_patches},
        {"anatomy_checkpoint", t.anatomy_checkpoint.generic_string()}}},
      {"anatomy",
       {{"epochs", a.epochs},
        {"lr", a.lr},
        {"batch_size", a.batch_size},
        {"patch_size", extent_to(a.patch_size)},
        {"patches_per_case", a.patches_per_case},
        {"cases_per_epoch", a.cases_per_epoch},
        {"min_organ_dice", a.min_organ_dice},
        {"variant", to_string(a.variant)}}},
  };
}

ExperimentConfig from_json(const Json& j) {
  ExperimentConfig c;
  Reader r(j, "");
  r.get("seed", c.seed);
  r.get("deterministic", c.deterministic);
  if (const Json* p = r.child("phantom")) c.phantom = phantom_from(*p);
  if (const Json* d = r.child("data")) {
    Reader rd(*d, "data");
    rd.get("n_train", c.data.n_train);
    rd.get("n_val", c.data.n_val);
    rd.custom("dataset_dir", [&](const Json& v) { c.data.dataset_dir = v.get<std::string>(); });
  }
  if (const Json* n = r.child("normalization")) {
    Reader rn(*n, "normalization");
    rn.get("ct_window_low", c.normalization.ct_window_low);
    rn.get("ct_window_high", c.normalization.ct_window_high);
    rn.get("pet_percentile", c.normalization.pet_percentile);
    rn.get("pet_clip", c.normalization.pet_clip);
  }
  if (const Json* b = r.child("backbone")) c.backbone = backbone_from_json(*b);
  if (const Json* f = r.child("fusion")) c.fusion = fusion_from_json(*f);
  if (const Json* t = r.child("train")) {
    auto& tc = c.train;
    Reader rt(*t, "train");
    rt.custom("strategy", [&](const Json& v) { tc.strategy = parse_strategy(v.get<std::string>()); });
    rt.get("epochs", tc.epochs);
    rt.get("lr", tc.lr);
    rt.get("batch_size", tc.batch_size);
    rt.get("weight_decay", tc.weight_decay);
    rt.get("fusion_activation_epoch", tc.fusion_activation_epoch);
    rt.custom("patch_size", [&](const Json& v) { tc.patch_size = extent_from(v); });
    rt.get("seeds", tc.seeds);
    if (const Json* l = rt.child("loss")) tc.loss = loss_from(*l);
    rt.custom("pseudo_label_source", [&](const Json& v) { tc.pseudo_label_source = parse_source(v.get<std::string>()); });
    rt.get("degrade_rate", tc.degrade_rate);
    rt.get("patches_per_case", tc.patches_per_case);
    rt.get("cases_per_epoch", tc.cases_per_epoch);
    rt.get("probe_patches", tc.probe_patches);
    rt.custom("anatomy_checkpoint", [&](const Json& v) { tc.anatomy_checkpoint = v.get<std::string>(); });
  }
  if (const Json* a = r.child("anatomy")) {
    auto& ac = c.anatomy;
    Reader ra(*a, "anatomy");
    ra.get("epochs", ac.epochs);
    ra.get("lr", ac.lr);
    ra.get("batch_size", ac.batch_size);
    ra.custom("patch_size", [&](const Json& v) { ac.patch_size = extent_from(v); });
    ra.get("patches_per_case", ac.patches_per_case);
    ra.get("cases_per_epoch", ac.cases_per_epoch);
    ra.get("min_organ_dice", ac.min_organ_dice);
    ra.custom("variant", [&](const Json& v) { ac.variant = parse_variant(v.get<std::string>()); });
  }
  return c;
}

void apply_override(Json& tree, const std::string& assignment) {
  std::string text = assignment;
  if (text.rfind("--", 0) == 0) text = text.substr(2);
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = text.substr(0, eq), raw = text.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  Json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  Json tree = to_json(ExperimentConfig{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    Json file = Json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
    tree.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(tree, o);
  ExperimentConfig c = from_json(tree);
  c.validate();
  return c;
}

}  // namespace grasp
