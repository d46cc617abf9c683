#pragma once

#include <vector>

#include <torch/torch.h>

#include "faceshifter/aad.hpp"
#include "faceshifter/config.hpp"
#include "faceshifter/encoders.hpp"

namespace faceshifter {

// x_t - AEI(x_t, x_t). The network must be in eval mode; nothing is recorded for autograd.
// Values lie in [-2, 2].
torch::Tensor heuristic_error(const torch::Tensor& x_t, AEINet& aei, IdentityEncoder& identity);

// U-Net refining the stage-one result given the heuristic error. Input is the 6-channel
// concatenation (y_hat, delta); the last decoder map is concatenated with that input once
// more before the output convolution and tanh.
class HEARNetImpl : public torch::nn::Module {
 public:
  HEARNetImpl(std::vector<int> channels, NormKind norm = NormKind::Batch);
  explicit HEARNetImpl(const PipelineConfig& c) : HEARNetImpl(c.hear_channels, c.norm) {}

  torch::Tensor forward(const torch::Tensor& y_hat, const torch::Tensor& delta);

  int depth() const { return static_cast<int>(channels_.size()); }

 private:
  std::vector<int> channels_;
  torch::nn::ModuleList down_{nullptr};
  torch::nn::ModuleList up_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(HEARNet);

// Same as net->forward; spelled out to match the pipeline vocabulary.
torch::Tensor refine(HEARNet& net, const torch::Tensor& y_hat, const torch::Tensor& delta);

struct HearLossParts {
  torch::Tensor id, chg, rec, total;
};

// id = 1 - cos(z(y), z(x_s)); chg = mean |y_hat - y|; rec as in stage one; total = id + chg + rec.
HearLossParts hear_losses(const torch::Tensor& y, const torch::Tensor& y_hat, const torch::Tensor& x_t,
                          const torch::Tensor& x_s, const torch::Tensor& is_same, IdentityEncoder& identity,
                          LossReduction reduction = LossReduction::Sum);

// Unweighted sum; throws Error(Numeric) on a non-finite part.
torch::Tensor hear_total_loss(const torch::Tensor& id, const torch::Tensor& chg, const torch::Tensor& rec);

// mean |y_hat - y| over all elements.
torch::Tensor change_loss(const torch::Tensor& y_hat, const torch::Tensor& y);

}  // namespace faceshifter
