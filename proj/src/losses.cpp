#include "faceshifter/losses.hpp"

#include "faceshifter/error.hpp"

namespace faceshifter {

namespace F = torch::nn::functional;

PatchDiscriminatorImpl::PatchDiscriminatorImpl(int64_t base_channels, int n_layers) {
  auto lrelu = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  body_ = torch::nn::Sequential();
  body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(3, base_channels, 4).stride(2).padding(2)));
  body_->push_back(lrelu());
  int64_t ch = base_channels;
  for (int i = 1; i <= n_layers; ++i) {
    const int64_t next = std::min<int64_t>(ch * 2, 512);
    const int stride = i < n_layers ? 2 : 1;
    body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, next, 4).stride(stride).padding(2)));
    body_->push_back(torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(next)));
    body_->push_back(lrelu());
    ch = next;
  }
  body_ = register_module("body", body_);
  final_ = register_module("final", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 1, 4).stride(1).padding(2)));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) { return final_(body_->forward(x)); }

MultiScaleDiscriminatorImpl::MultiScaleDiscriminatorImpl(int64_t base_channels, int n_layers, int scales) {
  require(scales >= 1, ErrorKind::Config, "discriminator needs at least one scale");
  for (int s = 0; s < scales; ++s)
    nets_.push_back(register_module("scale" + std::to_string(s), PatchDiscriminator(base_channels, n_layers)));
}

DiscriminatorOutputs MultiScaleDiscriminatorImpl::forward(const torch::Tensor& image) {
  require(image.dim() == 4 && image.size(1) == 3, ErrorKind::Data, "discriminator expects (N, 3, H, W)");
  DiscriminatorOutputs out;
  auto x = image;
  for (size_t s = 0; s < nets_.size(); ++s) {
    if (s > 0) x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(3).stride(2).padding(1).count_include_pad(false));
    out.logits.push_back(nets_[s]->forward(x));
  }
  return out;
}

void MultiScaleDiscriminatorImpl::zero_final_layers() {
  torch::NoGradGuard no_grad;
  for (auto& n : nets_) {
    n->final_layer()->weight.zero_();
    n->final_layer()->bias.zero_();
  }
}

torch::Tensor hinge_d_loss(const DiscriminatorOutputs& real, const DiscriminatorOutputs& fake) {
  require(!real.logits.empty() && real.logits.size() == fake.logits.size(), ErrorKind::Data,
          "hinge loss needs matching, nonempty scale lists");
  torch::Tensor total;
  for (size_t s = 0; s < real.logits.size(); ++s) {
    auto term = torch::relu(1.0 - real.logits[s]).mean() + torch::relu(1.0 + fake.logits[s]).mean();
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(real.logits.size());
}

torch::Tensor hinge_g_loss(const DiscriminatorOutputs& fake) {
  require(!fake.logits.empty(), ErrorKind::Data, "hinge loss needs at least one scale");
  torch::Tensor total;
  for (const auto& l : fake.logits) {
    auto term = -l.mean();
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(fake.logits.size());
}

torch::Tensor identity_loss(const torch::Tensor& z_pred, const torch::Tensor& z_src) {
  require(z_pred.dim() == 2 && z_pred.sizes() == z_src.sizes(), ErrorKind::Data,
          "identity loss expects two (N, C) embeddings of equal shape");
  const auto np = z_pred.norm(2, 1), ns = z_src.norm(2, 1);
  require(np.gt(0).all().item<bool>() && ns.gt(0).all().item<bool>(), ErrorKind::Data,
          "identity embedding with zero norm");
  const auto cos = (z_pred * z_src).sum(1) / (np * ns);
  return (1.0 - cos).mean();
}

namespace {

torch::Tensor per_sample(const torch::Tensor& sq, LossReduction reduction) {
  const auto flat = sq.flatten(1);
  return reduction == LossReduction::Sum ? flat.sum(1) : flat.mean(1);
}

}  // namespace

torch::Tensor attribute_loss(const AttributeEmbeddingSet& pred, const AttributeEmbeddingSet& tgt,
                             LossReduction reduction) {
  require(pred.size() == tgt.size() && pred.size() > 0, ErrorKind::Data, "attribute sets differ in level count");
  torch::Tensor total;
  for (size_t k = 0; k < pred.size(); ++k) {
    require(pred[k].sizes() == tgt[k].sizes(), ErrorKind::Data,
            "attribute level " + std::to_string(k) + " shape mismatch");
    auto term = per_sample((pred[k] - tgt[k]).pow(2), reduction);
    total = total.defined() ? total + term : term;
  }
  return 0.5 * total.mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& y_hat, const torch::Tensor& x_t, const torch::Tensor& is_same,
                                  LossReduction reduction) {
  require(y_hat.sizes() == x_t.sizes() && y_hat.dim() >= 2, ErrorKind::Data, "reconstruction loss shape mismatch");
  require(is_same.dim() == 1 && is_same.size(0) == y_hat.size(0), ErrorKind::Data,
          "is_same must hold one flag per sample");
  const auto per = 0.5 * per_sample((y_hat - x_t).pow(2), reduction);
  const auto gate = is_same.to(torch::kBool);
  return torch::where(gate, per, torch::zeros_like(per)).mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& y_hat, const torch::Tensor& x_t, bool is_same,
                                  LossReduction reduction) {
  return reconstruction_loss(y_hat, x_t, torch::full({y_hat.size(0)}, is_same, torch::kBool), reduction);
}

void require_finite(const torch::Tensor& value, const std::string& what) {
  require(value.defined() && torch::isfinite(value.detach()).all().item<bool>(), ErrorKind::Numeric,
          "non-finite " + what);
}

torch::Tensor aei_total_loss(const AEILossParts& parts, const LossWeights& weights) {
  require_finite(parts.adv, "adversarial loss");
  require_finite(parts.att, "attribute loss");
  require_finite(parts.id, "identity loss");
  require_finite(parts.rec, "reconstruction loss");
  return parts.adv + weights.att * parts.att + weights.id * parts.id + weights.rec * parts.rec;
}

}  // namespace faceshifter
