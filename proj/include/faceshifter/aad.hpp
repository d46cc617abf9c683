#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "faceshifter/config.hpp"
#include "faceshifter/encoders.hpp"
#include "faceshifter/norm.hpp"

namespace faceshifter {

// (1 - M) * A + M * I, with M broadcast over channels when it has a single channel.
torch::Tensor attentional_blend(const torch::Tensor& attr_act, const torch::Tensor& id_act, const torch::Tensor& mask);

struct AADOutput {
  torch::Tensor h_out;
  torch::Tensor mask;  // undefined for Add and Cat integration
};

// Adaptive Attentional Denormalization.
//
// The input is normalised with batch statistics, then denormalised twice: spatially by
// (gamma, beta) convolved from the attribute map, and channelwise by (gamma, beta) produced
// from the identity vector through FC layers. A sigmoid mask computed from the normalised
// activation selects, per position, how much of each result passes through.
class AADLayerImpl : public torch::nn::Module {
 public:
  AADLayerImpl(int64_t channels, int64_t att_channels, int64_t id_dim, IntegrationMode mode,
               NormKind norm = NormKind::Batch, bool per_channel_mask = false);

  AADOutput forward(const torch::Tensor& h_in, const torch::Tensor& z_att, const torch::Tensor& z_id);

  // Individual branches, exposed for inspection. `h_bar` is the normalised input.
  torch::Tensor normalize(const torch::Tensor& h_in);
  torch::Tensor attribute_activation(const torch::Tensor& h_bar, const torch::Tensor& z_att);
  torch::Tensor identity_activation(const torch::Tensor& h_bar, const torch::Tensor& z_id);
  torch::Tensor attention_mask(const torch::Tensor& h_bar);

  // Pins every mask value to `value` (used to probe the blend endpoints).
  void force_mask(std::optional<double> value) { forced_mask_ = value; }

  int64_t channels() const { return channels_; }
  int64_t out_channels() const { return mode_ == IntegrationMode::Cat ? 2 * channels_ : channels_; }
  bool has_mask() const { return mode_ == IntegrationMode::AAD || mode_ == IntegrationMode::Compressed; }

  BatchStatNorm norm{nullptr};
  torch::nn::Conv2d conv_gamma_att{nullptr}, conv_beta_att{nullptr}, conv_mask{nullptr};
  torch::nn::Linear fc_gamma_id{nullptr}, fc_beta_id{nullptr};

 private:
  int64_t channels_;
  int64_t att_channels_;
  int64_t id_dim_;
  IntegrationMode mode_;
  std::optional<double> forced_mask_;
};
TORCH_MODULE(AADLayer);

// Masks captured during one generator pass, in forward order.
struct MaskStack {
  std::vector<torch::Tensor> masks;
  size_t size() const { return masks.size(); }
};

// Residual block: two (AAD -> ReLU -> 3x3 conv) units on the main path; the skip path is
// one such unit when c_in != c_out and the identity otherwise.
class AADResBlkImpl : public torch::nn::Module {
 public:
  AADResBlkImpl(int64_t c_in, int64_t c_out, int64_t att_channels, int64_t id_dim, IntegrationMode mode,
                NormKind norm = NormKind::Batch, bool per_channel_mask = false);

  torch::Tensor forward(const torch::Tensor& h_in, const torch::Tensor& z_att, const torch::Tensor& z_id,
                        MaskStack* masks = nullptr);

  int64_t c_in() const { return c_in_; }
  int64_t c_out() const { return c_out_; }
  int64_t aad_layer_count() const { return aad_skip ? 3 : 2; }

  AADLayer aad1{nullptr}, aad2{nullptr}, aad_skip{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv_skip{nullptr};

 private:
  int64_t c_in_;
  int64_t c_out_;
};
TORCH_MODULE(AADResBlk);

struct GeneratorOutput {
  torch::Tensor image;  // (N, 3, S, S) in [-1, 1]
  MaskStack masks;
};

// Cascade of AAD ResBlks. A linear map of z_id seeds the coarsest grid; each stage is
// conditioned on z_id and one attribute level, followed by 2x nearest upsampling (except
// after the last stage). A 3x3 convolution and tanh produce the image.
class AADGeneratorImpl : public torch::nn::Module {
 public:
  AADGeneratorImpl(const PipelineConfig& config, std::vector<int64_t> att_level_channels);

  GeneratorOutput forward(const torch::Tensor& z_id, const AttributeEmbeddingSet& z_att);

  IntegrationMode mode() const { return mode_; }
  int64_t mask_count() const;
  std::vector<AADResBlk>& blocks() { return blocks_; }

 private:
  IntegrationMode mode_;
  int n_levels_;
  int bottleneck_;
  int64_t seed_channels_;
  std::vector<int64_t> att_level_channels_;
  torch::nn::Linear fc_seed_{nullptr};
  std::vector<AADResBlk> blocks_;
  torch::nn::Conv2d to_rgb_{nullptr};
};
TORCH_MODULE(AADGenerator);

// Trainable part of stage one: the multi-level attribute encoder and the AAD generator.
class AEINetImpl : public torch::nn::Module {
 public:
  explicit AEINetImpl(const PipelineConfig& config);

  struct Output {
    torch::Tensor image;
    MaskStack masks;
    AttributeEmbeddingSet z_att;
  };

  Output forward(const torch::Tensor& z_id, const torch::Tensor& target);

  AttributeEncoder encoder{nullptr};
  AADGenerator generator{nullptr};
};
TORCH_MODULE(AEINet);

// Runs AEI-Net on (source, target) and returns every attention mask, bilinearly resized to
// the image resolution. Throws Error(Config) for integration modes without masks.
MaskStack extract_masks(AEINet& net, IdentityEncoder& identity, const torch::Tensor& source,
                        const torch::Tensor& target);

}  // namespace faceshifter
