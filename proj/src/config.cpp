#include "faceshifter/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "faceshifter/error.hpp"

namespace faceshifter {

using nlohmann::json;

std::string to_string(IntegrationMode mode) {
  switch (mode) {
    case IntegrationMode::AAD: return "aad";
    case IntegrationMode::Add: return "add";
    case IntegrationMode::Cat: return "cat";
    case IntegrationMode::Compressed: return "compressed";
  }
  return "aad";
}

std::string to_string(NormKind kind) { return kind == NormKind::Batch ? "batch" : "instance"; }
std::string to_string(LossReduction r) { return r == LossReduction::Sum ? "sum" : "mean"; }

IntegrationMode parse_integration_mode(const std::string& s) {
  if (s == "aad" || s == "AAD") return IntegrationMode::AAD;
  if (s == "add" || s == "Add") return IntegrationMode::Add;
  if (s == "cat" || s == "Cat") return IntegrationMode::Cat;
  if (s == "compressed" || s == "Compressed") return IntegrationMode::Compressed;
  fail(ErrorKind::Config, "unknown integration mode '" + s + "'");
}

NormKind parse_norm_kind(const std::string& s) {
  if (s == "batch") return NormKind::Batch;
  if (s == "instance") return NormKind::Instance;
  fail(ErrorKind::Config, "unknown norm kind '" + s + "'");
}

LossReduction parse_loss_reduction(const std::string& s) {
  if (s == "sum") return LossReduction::Sum;
  if (s == "mean") return LossReduction::Mean;
  fail(ErrorKind::Config, "unknown loss reduction '" + s + "'");
}

PipelineConfig PipelineConfig::full() { return PipelineConfig{}; }

PipelineConfig PipelineConfig::desk() {
  PipelineConfig c;
  c.crop_size = 64;
  c.n_attr_levels = 6;
  c.hear_depth = 5;
  c.attr_channels = {8, 16, 32, 64, 128};
  c.gen_channels = {128, 128, 128, 64, 32, 16, 16};
  c.hear_channels = {16, 32, 64, 128, 128};
  c.disc_channels = 16;
  c.disc_layers = 3;
  c.reduction = LossReduction::Mean;
  c.batch_size = 8;
  c.steps_aei = 3000;
  c.steps_hear = 1500;
  c.checkpoint_every = 500;
  return c;
}

void PipelineConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorKind::Config, msg); };
  check(crop_size > 0, "crop_size must be positive");
  check(n_attr_levels >= 2, "n_attr_levels must be at least 2");
  check(hear_depth >= 1, "hear_depth must be at least 1");
  check(n_attr_levels - 1 < 31 && crop_size % (1 << (n_attr_levels - 1)) == 0,
        "crop_size must be divisible by 2^(n_attr_levels-1)");
  check(hear_depth < 31 && crop_size % (1 << hear_depth) == 0, "crop_size must be divisible by 2^hear_depth");
  check(id_dim > 0, "id_dim must be positive");
  check(static_cast<int>(attr_channels.size()) == n_attr_levels - 1,
        "attr_channels needs n_attr_levels-1 entries");
  check(static_cast<int>(gen_channels.size()) == n_attr_levels + 1, "gen_channels needs n_attr_levels+1 entries");
  check(static_cast<int>(hear_channels.size()) == hear_depth, "hear_channels needs hear_depth entries");
  for (int v : attr_channels) check(v > 0, "attr_channels entries must be positive");
  for (int v : gen_channels) check(v > 0, "gen_channels entries must be positive");
  for (int v : hear_channels) check(v > 0, "hear_channels entries must be positive");
  check(disc_channels > 0 && disc_layers >= 1 && disc_scales >= 1, "invalid discriminator shape");
  check(integration != IntegrationMode::Compressed || n_attr_levels >= 3, "compressed mode needs at least 3 levels");
  check(weights.att >= 0 && weights.id >= 0 && weights.rec >= 0, "loss weights must be nonnegative");
  check(adam.lr > 0 && adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0,
        "invalid optimizer settings");
  check(p_cross_aei >= 0 && p_cross_aei <= 1 && p_cross_hear >= 0 && p_cross_hear <= 1,
        "p_cross must lie in [0, 1]");
  check(batch_size >= 1, "batch_size must be positive");
  check(norm == NormKind::Instance || batch_size >= 2, "batch normalization needs batch_size >= 2");
  check(steps_aei >= 0 && steps_hear >= 0, "step budgets must be nonnegative");
  check(hear_top_fraction > 0 && hear_top_fraction <= 1, "hear_top_fraction must lie in (0, 1]");
  check(toy_id_input > 0 && toy_id_input % 16 == 0, "toy_id_input must be a positive multiple of 16");
  check(toy_id_channels > 0 && toy_id_steps >= 0, "invalid toy identity encoder settings");
  check(occlusion.min_scale > 0 && occlusion.min_scale <= occlusion.max_scale, "invalid occlusion scale range");
  check(occlusion.max_rotation_deg >= 0, "invalid occlusion rotation range");
  check(occlusion.color_match_strength >= 0 && occlusion.color_match_strength <= 1,
        "color_match_strength must lie in [0, 1]");
  check(occlusion.center_region > 0 && occlusion.center_region <= 1, "center_region must lie in (0, 1]");
  check(occlusion.probability >= 0 && occlusion.probability <= 1, "occlusion probability must lie in [0, 1]");
  check(checkpoint_every >= 1 && log_every >= 1, "checkpoint_every and log_every must be positive");
}

std::string PipelineConfig::hash() const {
  // FNV-1a over the canonical JSON dump.
  const std::string text = to_json(*this).dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

json to_json(const PipelineConfig& c) {
  return json{
      {"crop_size", c.crop_size},
      {"n_attr_levels", c.n_attr_levels},
      {"hear_depth", c.hear_depth},
      {"id_dim", c.id_dim},
      {"attr_channels", c.attr_channels},
      {"gen_channels", c.gen_channels},
      {"hear_channels", c.hear_channels},
      {"disc_channels", c.disc_channels},
      {"disc_layers", c.disc_layers},
      {"disc_scales", c.disc_scales},
      {"integration", to_string(c.integration)},
      {"norm", to_string(c.norm)},
      {"per_channel_mask", c.per_channel_mask},
      {"weights", {{"att", c.weights.att}, {"id", c.weights.id}, {"rec", c.weights.rec}}},
      {"reduction", to_string(c.reduction)},
      {"hear_reduction", to_string(c.hear_reduction)},
      {"adam", {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
      {"p_cross_aei", c.p_cross_aei},
      {"p_cross_hear", c.p_cross_hear},
      {"batch_size", c.batch_size},
      {"steps_aei", c.steps_aei},
      {"steps_hear", c.steps_hear},
      {"hear_top_fraction", c.hear_top_fraction},
      {"seed", c.seed},
      {"identity_encoder", c.identity_encoder},
      {"eval_identity_encoder", c.eval_identity_encoder},
      {"toy_id_input", c.toy_id_input},
      {"toy_id_channels", c.toy_id_channels},
      {"toy_id_steps", c.toy_id_steps},
      {"occlusion",
       {{"max_rotation_deg", c.occlusion.max_rotation_deg},
        {"min_scale", c.occlusion.min_scale},
        {"max_scale", c.occlusion.max_scale},
        {"color_match_strength", c.occlusion.color_match_strength},
        {"center_region", c.occlusion.center_region},
        {"target_only", c.occlusion.target_only},
        {"probability", c.occlusion.probability}}},
      {"allow_center_crop_fallback", c.allow_center_crop_fallback},
      {"checkpoint_every", c.checkpoint_every},
      {"log_every", c.log_every},
  };
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("bad value for '") + key + "': " + e.what());
  }
}

void check_keys(const json& j, const json& reference, const std::string& prefix) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!reference.contains(it.key())) fail(ErrorKind::Config, "unknown config key '" + prefix + it.key() + "'");
    if (it.value().is_object() && reference.at(it.key()).is_object())
      check_keys(it.value(), reference.at(it.key()), prefix + it.key() + ".");
  }
}

}  // namespace

PipelineConfig config_from_json(const json& j, PipelineConfig c) {
  require(j.is_object(), ErrorKind::Config, "config must be a JSON object");
  check_keys(j, to_json(c), "");
  read(j, "crop_size", c.crop_size);
  read(j, "n_attr_levels", c.n_attr_levels);
  read(j, "hear_depth", c.hear_depth);
  read(j, "id_dim", c.id_dim);
  read(j, "attr_channels", c.attr_channels);
  read(j, "gen_channels", c.gen_channels);
  read(j, "hear_channels", c.hear_channels);
  read(j, "disc_channels", c.disc_channels);
  read(j, "disc_layers", c.disc_layers);
  read(j, "disc_scales", c.disc_scales);
  std::string s;
  if (j.contains("integration")) {
    read(j, "integration", s);
    c.integration = parse_integration_mode(s);
  }
  if (j.contains("norm")) {
    read(j, "norm", s);
    c.norm = parse_norm_kind(s);
  }
  read(j, "per_channel_mask", c.per_channel_mask);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    read(w, "att", c.weights.att);
    read(w, "id", c.weights.id);
    read(w, "rec", c.weights.rec);
  }
  if (j.contains("reduction")) {
    read(j, "reduction", s);
    c.reduction = parse_loss_reduction(s);
  }
  if (j.contains("hear_reduction")) {
    read(j, "hear_reduction", s);
    c.hear_reduction = parse_loss_reduction(s);
  }
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    read(a, "lr", c.adam.lr);
    read(a, "beta1", c.adam.beta1);
    read(a, "beta2", c.adam.beta2);
    read(a, "eps", c.adam.eps);
  }
  read(j, "p_cross_aei", c.p_cross_aei);
  read(j, "p_cross_hear", c.p_cross_hear);
  read(j, "batch_size", c.batch_size);
  read(j, "steps_aei", c.steps_aei);
  read(j, "steps_hear", c.steps_hear);
  read(j, "hear_top_fraction", c.hear_top_fraction);
  read(j, "seed", c.seed);
  read(j, "identity_encoder", c.identity_encoder);
  read(j, "eval_identity_encoder", c.eval_identity_encoder);
  read(j, "toy_id_input", c.toy_id_input);
  read(j, "toy_id_channels", c.toy_id_channels);
  read(j, "toy_id_steps", c.toy_id_steps);
  if (j.contains("occlusion")) {
    const auto& o = j.at("occlusion");
    read(o, "max_rotation_deg", c.occlusion.max_rotation_deg);
    read(o, "min_scale", c.occlusion.min_scale);
    read(o, "max_scale", c.occlusion.max_scale);
    read(o, "color_match_strength", c.occlusion.color_match_strength);
    read(o, "center_region", c.occlusion.center_region);
    read(o, "target_only", c.occlusion.target_only);
    read(o, "probability", c.occlusion.probability);
  }
  read(j, "allow_center_crop_fallback", c.allow_center_crop_fallback);
  read(j, "checkpoint_every", c.checkpoint_every);
  read(j, "log_every", c.log_every);
  return c;
}

void apply_override(PipelineConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::Config, "override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json patch = json::object();
  json* cursor = &patch;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (size_t i = 0; i + 1 < parts.size(); ++i) cursor = &(*cursor)[parts[i]];
  (*cursor)[parts.back()] = value;
  c = config_from_json(patch, c);
}

PipelineConfig load_config_file(const std::string& path, PipelineConfig base) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Config, "cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, "malformed config file " + path + ": " + e.what());
  }
  // A config file may name a preset as its starting point.
  if (j.contains("preset")) {
    const std::string preset = j.at("preset").get<std::string>();
    if (preset == "desk") base = PipelineConfig::desk();
    else if (preset == "full") base = PipelineConfig::full();
    else fail(ErrorKind::Config, "unknown preset '" + preset + "'");
    j.erase("preset");
  }
  return config_from_json(j, base);
}

}  // namespace faceshifter
