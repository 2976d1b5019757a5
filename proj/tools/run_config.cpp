#include "run_config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "geomattn/error.hpp"

namespace geomattn::cli {

namespace {

enum class Kind { integer, real, boolean, text, list };

struct KeySpec {
  Kind kind;
  const char* value;
};

const std::map<std::string, KeySpec>& key_table() {
  static const std::map<std::string, KeySpec> table{
      {"seed", {Kind::integer, "7"}},
      {"preset", {Kind::text, "desk"}},
      {"data.dir", {Kind::text, ""}},
      {"data.synthetic", {Kind::boolean, "false"}},
      {"data.image_size", {Kind::integer, "64"}},
      {"synthetic.seed", {Kind::integer, "7"}},
      {"synthetic.ids", {Kind::integer, "20"}},
      {"synthetic.images_per_id", {Kind::integer, "20"}},
      {"synthetic.cameras", {Kind::integer, "4"}},
      {"synthetic.train_fraction", {Kind::real, "0.5"}},
      {"synthetic.max_translation", {Kind::real, "0.1"}},
      {"synthetic.scale_min", {Kind::real, "0.9"}},
      {"synthetic.scale_max", {Kind::real, "1.1"}},
      {"synthetic.max_rotation_deg", {Kind::real, "10"}},
      {"synthetic.max_brightness", {Kind::real, "0.1"}},
      {"synthetic.noise", {Kind::real, "0.02"}},
      {"arch.stage_widths", {Kind::list, "16,32,64,128,128"}},
      {"arch.encoder_widths", {Kind::list, "16,32,64"}},
      {"arch.ssl_head_width", {Kind::integer, "128"}},
      {"arch.feature_dim", {Kind::integer, "128"}},
      {"arch.cosine_scale", {Kind::real, "16"}},
      {"arch.acm_neighborhood", {Kind::integer, "3"}},
      {"arch.attention_branch", {Kind::boolean, "true"}},
      {"optim.lr0", {Kind::real, "1e-4"}},
      {"optim.beta1", {Kind::real, "0.9"}},
      {"optim.beta2", {Kind::real, "0.999"}},
      {"optim.eps", {Kind::real, "1e-8"}},
      {"optim.weight_decay", {Kind::real, "5e-4"}},
      {"optim.decoupled_weight_decay", {Kind::boolean, "false"}},
      {"optim.decay_norm_params", {Kind::boolean, "true"}},
      {"optim.margin", {Kind::real, "0.5"}},
      {"optim.epochs", {Kind::integer, "30"}},
      {"optim.schedule", {Kind::text, "multistep"}},
      {"optim.milestones", {Kind::list, "20"}},
      {"optim.step_factor", {Kind::real, "0.1"}},
      {"optim.warmup_epochs", {Kind::integer, "10"}},
      {"optim.cosine_end_epoch", {Kind::integer, "100"}},
      {"optim.min_lr", {Kind::real, "1e-7"}},
      {"loss.tri_gb", {Kind::real, "0.5"}},
      {"loss.sce_gb", {Kind::real, "0.5"}},
      {"loss.tri_ab", {Kind::real, "0.5"}},
      {"loss.sce_ab", {Kind::real, "0.5"}},
      {"loss.rot", {Kind::real, "1.0"}},
      {"loss.label_smoothing", {Kind::real, "0.1"}},
      {"loss.mixed_triplet_pool", {Kind::boolean, "false"}},
      {"train.p", {Kind::integer, "4"}},
      {"train.k", {Kind::integer, "4"}},
      {"train.steps_per_epoch", {Kind::integer, "0"}},
      {"train.rotation_all_four", {Kind::boolean, "false"}},
      {"train.checkpoint_every", {Kind::integer, "0"}},
      {"augment.pad", {Kind::integer, "8"}},
      {"augment.crop_prob", {Kind::real, "1.0"}},
      {"augment.flip_prob", {Kind::real, "0.5"}},
      {"augment.erase_prob", {Kind::real, "0.5"}},
      {"augment.erase_area_min", {Kind::real, "0.02"}},
      {"augment.erase_area_max", {Kind::real, "0.2"}},
      {"eval.filter_same_camera", {Kind::boolean, "true"}},
      {"eval.max_rank", {Kind::integer, "50"}},
  };
  return table;
}

const std::map<std::string, std::vector<Assignment>>& preset_table() {
  static const std::map<std::string, std::vector<Assignment>> table{
      {"desk", {}},
      {"veri",
       {{"data.image_size", "256"},
        {"arch.acm_neighborhood", "7"},
        {"optim.lr0", "1e-4"},
        {"optim.epochs", "80"},
        {"optim.schedule", "multistep"},
        {"optim.milestones", "20,40,60"},
        {"optim.margin", "0.5"},
        {"train.p", "7"},
        {"train.k", "4"}}},
      {"vehicleid",
       {{"data.image_size", "256"},
        {"arch.acm_neighborhood", "7"},
        {"optim.lr0", "1e-4"},
        {"optim.epochs", "120"},
        {"optim.schedule", "warmup_cosine"},
        {"optim.warmup_epochs", "10"},
        {"optim.cosine_end_epoch", "100"},
        {"optim.min_lr", "1e-7"},
        {"optim.margin", "0.7"},
        {"train.p", "10"},
        {"train.k", "4"}}},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

void check_value(const std::string& key, Kind kind, const std::string& value) {
  auto fail = [&](const char* what) {
    throw ConfigError("config key '" + key + "' expects " + what + ", got '" + value + "'");
  };
  switch (kind) {
    case Kind::integer: {
      if (value.empty() || !std::all_of(value.begin(), value.end(), [](char c) { return std::isdigit(c); }))
        fail("a non-negative integer");
      break;
    }
    case Kind::real: {
      try {
        std::size_t used = 0;
        std::stod(value, &used);
        if (used != value.size()) fail("a number");
      } catch (const std::invalid_argument&) {
        fail("a number");
      } catch (const std::out_of_range&) {
        fail("a representable number");
      }
      break;
    }
    case Kind::boolean:
      if (value != "true" && value != "false") fail("true or false");
      break;
    case Kind::list: {
      std::istringstream is(value);
      std::string item;
      while (std::getline(is, item, ',')) {
        item = trim(item);
        if (item.empty() || !std::all_of(item.begin(), item.end(), [](char c) { return std::isdigit(c); }))
          fail("a comma-separated list of non-negative integers");
      }
      break;
    }
    case Kind::text:
      break;
  }
}

}  // namespace

std::vector<Assignment> parse_config_text(const std::string& text, const std::string& origin) {
  std::vector<Assignment> out;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

std::vector<Assignment> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

Assignment parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + text + "'");
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

RunConfig::RunConfig() {
  for (const auto& [key, spec] : key_table()) values_[key] = spec.value;
}

RunConfig RunConfig::resolve(const std::vector<Assignment>& file, const std::vector<Assignment>& overrides,
                             const std::optional<std::string>& env_seed) {
  std::string preset = "desk";
  auto find_preset = [&](const std::vector<Assignment>& src) {
    for (const auto& [k, v] : src)
      if (k == "preset") preset = v;
  };
  find_preset(file);
  find_preset(overrides);
  RunConfig cfg;
  cfg.apply_preset(preset);
  auto sets_seed = [](const std::vector<Assignment>& src) {
    return std::any_of(src.begin(), src.end(), [](const Assignment& a) { return a.first == "seed"; });
  };
  if (env_seed && !sets_seed(file) && !sets_seed(overrides)) cfg.set("seed", *env_seed);
  for (const auto& [k, v] : file) cfg.set(k, v);
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = key_table().find(key);
  if (it == key_table().end()) throw ConfigError("unknown config key '" + key + "'");
  check_value(key, it->second.kind, value);
  if (key == "preset" && !preset_table().count(value)) {
    throw ConfigError("unknown preset '" + value + "'");
  }
  if (key == "optim.schedule") parse_schedule(value);
  values_[key] = value;
}

void RunConfig::apply_preset(const std::string& name) {
  const auto it = preset_table().find(name);
  if (it == preset_table().end()) throw ConfigError("unknown preset '" + name + "'");
  values_["preset"] = name;
  for (const auto& [k, v] : it->second) set(k, v);
}

const std::string& RunConfig::text(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::real(const std::string& key) const { return std::stod(text(key)); }
std::size_t RunConfig::count(const std::string& key) const { return std::stoull(text(key)); }
std::uint64_t RunConfig::u64(const std::string& key) const { return std::stoull(text(key)); }
bool RunConfig::flag(const std::string& key) const { return text(key) == "true"; }

std::vector<std::size_t> RunConfig::list(const std::string& key) const {
  std::vector<std::size_t> out;
  std::istringstream is(text(key));
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(std::stoull(trim(item)));
  return out;
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
  return os.str();
}

ArchConfig RunConfig::arch(std::size_t num_identities) const {
  ArchConfig a;
  a.input_size = count("data.image_size");
  a.stage_widths = list("arch.stage_widths");
  a.attention_encoder_widths = list("arch.encoder_widths");
  a.ssl_head_width = count("arch.ssl_head_width");
  a.feature_dim = count("arch.feature_dim");
  a.num_identities = num_identities;
  a.cosine_scale = real("arch.cosine_scale");
  a.acm_neighborhood = count("arch.acm_neighborhood");
  a.attention_branch = flag("arch.attention_branch");
  a.validate();
  return a;
}

OptimConfig RunConfig::optim() const {
  OptimConfig o;
  o.lr0 = real("optim.lr0");
  o.beta1 = real("optim.beta1");
  o.beta2 = real("optim.beta2");
  o.eps = real("optim.eps");
  o.weight_decay = real("optim.weight_decay");
  o.decoupled_weight_decay = flag("optim.decoupled_weight_decay");
  o.decay_norm_params = flag("optim.decay_norm_params");
  o.margin = real("optim.margin");
  o.epochs = count("optim.epochs");
  o.schedule = parse_schedule(text("optim.schedule"));
  o.milestones = list("optim.milestones");
  o.step_factor = real("optim.step_factor");
  o.warmup_epochs = count("optim.warmup_epochs");
  o.cosine_end_epoch = count("optim.cosine_end_epoch");
  o.min_lr = real("optim.min_lr");
  o.validate();
  return o;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.p = count("train.p");
  t.k = count("train.k");
  t.steps_per_epoch = count("train.steps_per_epoch");
  t.weights = {real("loss.tri_gb"), real("loss.sce_gb"), real("loss.tri_ab"), real("loss.sce_ab"), real("loss.rot")};
  t.label_smoothing = real("loss.label_smoothing");
  t.mixed_triplet_pool = flag("loss.mixed_triplet_pool");
  t.augment.pad = count("augment.pad");
  t.augment.crop_prob = real("augment.crop_prob");
  t.augment.flip_prob = real("augment.flip_prob");
  t.augment.erase_prob = real("augment.erase_prob");
  t.augment.erase_area_min = real("augment.erase_area_min");
  t.augment.erase_area_max = real("augment.erase_area_max");
  t.rotation_all_four = flag("train.rotation_all_four");
  t.seed = seed();
  t.validate();
  return t;
}

SyntheticSpec RunConfig::synthetic() const {
  SyntheticSpec s;
  s.num_identities = count("synthetic.ids");
  s.images_per_identity = count("synthetic.images_per_id");
  s.image_size = count("data.image_size");
  s.seed = u64("synthetic.seed");
  s.num_cameras = count("synthetic.cameras");
  s.train_fraction = real("synthetic.train_fraction");
  s.max_translation = real("synthetic.max_translation");
  s.scale_min = real("synthetic.scale_min");
  s.scale_max = real("synthetic.scale_max");
  s.max_rotation_deg = real("synthetic.max_rotation_deg");
  s.max_brightness = real("synthetic.max_brightness");
  s.noise_sigma = real("synthetic.noise");
  s.validate();
  return s;
}

EvalOptions RunConfig::eval() const {
  EvalOptions e;
  e.filter_same_camera = flag("eval.filter_same_camera");
  e.max_rank = count("eval.max_rank");
  if (e.max_rank == 0) throw ConfigError("eval.max_rank must be positive");
  return e;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, _] : preset_table()) names.push_back(k);
  return names;
}

}  // namespace geomattn::cli
