#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace faceshifter {

// How identity and attribute activations are merged inside an AAD layer.
enum class IntegrationMode { AAD, Add, Cat, Compressed };

enum class NormKind { Batch, Instance };

// `Sum` adds over tensor elements within a sample, `Mean` averages them.
// Both average over the batch. Loss weights are tied to the convention.
enum class LossReduction { Sum, Mean };

std::string to_string(IntegrationMode mode);
std::string to_string(NormKind kind);
std::string to_string(LossReduction r);
IntegrationMode parse_integration_mode(const std::string& s);
NormKind parse_norm_kind(const std::string& s);
LossReduction parse_loss_reduction(const std::string& s);

struct LossWeights {
  double att = 10.0;
  double id = 5.0;
  double rec = 10.0;
};

struct AdamSettings {
  double lr = 4e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OcclusionSettings {
  double max_rotation_deg = 60.0;
  double min_scale = 0.2;  // occluder extent as a fraction of crop width
  double max_scale = 0.6;
  double color_match_strength = 0.7;
  // Occluder centres are drawn from the central box of this relative size.
  double center_region = 0.5;
  bool target_only = true;
  // Probability that a HEAR-Net training target receives a synthetic occluder.
  double probability = 0.5;
};

struct PipelineConfig {
  int crop_size = 256;
  int n_attr_levels = 8;
  int hear_depth = 5;
  int id_dim = 512;

  // Attribute U-Net encoder, one entry per downsample (n_attr_levels - 1).
  std::vector<int> attr_channels{32, 64, 128, 256, 512, 512, 512};
  // Generator: entry 0 is the seed activation from z_id, entry k the output of stage k.
  std::vector<int> gen_channels{512, 512, 512, 512, 256, 128, 64, 32, 32};
  // HEAR-Net encoder, one entry per downsample (hear_depth).
  std::vector<int> hear_channels{64, 128, 256, 512, 512};
  int disc_channels = 64;
  int disc_layers = 3;
  int disc_scales = 3;

  IntegrationMode integration = IntegrationMode::AAD;
  NormKind norm = NormKind::Batch;
  bool per_channel_mask = false;

  LossWeights weights;
  LossReduction reduction = LossReduction::Sum;        // stage-one losses
  LossReduction hear_reduction = LossReduction::Sum;   // stage-two reconstruction loss
  AdamSettings adam;

  double p_cross_aei = 0.8;
  double p_cross_hear = 0.5;
  int batch_size = 8;
  int64_t steps_aei = 500000;
  int64_t steps_hear = 50000;
  double hear_top_fraction = 0.10;
  uint64_t seed = 0;

  // `toy` or `external:<path>`.
  std::string identity_encoder = "toy";
  std::string eval_identity_encoder = "toy";
  int toy_id_input = 64;
  int toy_id_channels = 32;
  int toy_id_steps = 1500;

  OcclusionSettings occlusion;
  bool allow_center_crop_fallback = false;

  int64_t checkpoint_every = 1000;
  int64_t log_every = 1;

  // Full-scale 256x256 configuration and a single-CPU preset.
  static PipelineConfig full();
  static PipelineConfig desk();

  // Throws Error(Config) describing the first violated invariant.
  void validate() const;

  int bottleneck_size() const { return crop_size >> (n_attr_levels - 1); }
  std::string hash() const;
};

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig base = PipelineConfig::full());

// Applies a dotted `key=value` override, e.g. `weights.id=2` or `attr_channels=[8,16]`.
void apply_override(PipelineConfig& c, const std::string& assignment);

PipelineConfig load_config_file(const std::string& path, PipelineConfig base = PipelineConfig::full());

}  // namespace faceshifter
