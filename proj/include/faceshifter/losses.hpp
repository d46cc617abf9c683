#pragma once

#include <vector>

#include <torch/torch.h>

#include "faceshifter/config.hpp"
#include "faceshifter/encoders.hpp"

namespace faceshifter {

struct DiscriminatorOutputs {
  std::vector<torch::Tensor> logits;  // one patch map per scale, finest first
};

// pix2pixHD-style patch discriminator: 4x4 convolutions, LeakyReLU 0.2, instance norm on
// every hidden layer but the first.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  PatchDiscriminatorImpl(int64_t base_channels, int n_layers);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d& final_layer() { return final_; }

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv2d final_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

// The same patch architecture run at full, 1/2, 1/4, ... resolution (3x3 average pooling).
class MultiScaleDiscriminatorImpl : public torch::nn::Module {
 public:
  MultiScaleDiscriminatorImpl(int64_t base_channels, int n_layers, int scales);
  explicit MultiScaleDiscriminatorImpl(const PipelineConfig& c)
      : MultiScaleDiscriminatorImpl(c.disc_channels, c.disc_layers, c.disc_scales) {}

  DiscriminatorOutputs forward(const torch::Tensor& image);
  int scales() const { return static_cast<int>(nets_.size()); }
  void zero_final_layers();

 private:
  std::vector<PatchDiscriminator> nets_;
};
TORCH_MODULE(MultiScaleDiscriminator);

// mean over scales of [mean relu(1 - real) + mean relu(1 + fake)].
torch::Tensor hinge_d_loss(const DiscriminatorOutputs& real, const DiscriminatorOutputs& fake);
// mean over scales of mean(-fake).
torch::Tensor hinge_g_loss(const DiscriminatorOutputs& fake);

// 1 - cos(z_pred, z_src), averaged over the batch.
torch::Tensor identity_loss(const torch::Tensor& z_pred, const torch::Tensor& z_src);

// 1/2 sum_k ||pred_k - tgt_k||^2 per sample, averaged over the batch.
torch::Tensor attribute_loss(const AttributeEmbeddingSet& pred, const AttributeEmbeddingSet& tgt,
                             LossReduction reduction = LossReduction::Sum);

// 1/2 ||y_hat - x_t||^2 for samples flagged in `is_same` (bool, shape (N)), 0 for the others;
// averaged over the batch. Unflagged samples contribute exactly zero value and gradient.
torch::Tensor reconstruction_loss(const torch::Tensor& y_hat, const torch::Tensor& x_t, const torch::Tensor& is_same,
                                  LossReduction reduction = LossReduction::Sum);
torch::Tensor reconstruction_loss(const torch::Tensor& y_hat, const torch::Tensor& x_t, bool is_same,
                                  LossReduction reduction = LossReduction::Sum);

struct AEILossParts {
  torch::Tensor adv, att, id, rec;
};

// adv + w.att * att + w.id * id + w.rec * rec. Throws Error(Numeric) on a non-finite part.
torch::Tensor aei_total_loss(const AEILossParts& parts, const LossWeights& weights);

// Throws Error(Numeric) naming `what` if `value` holds NaN or Inf.
void require_finite(const torch::Tensor& value, const std::string& what);

}  // namespace faceshifter
