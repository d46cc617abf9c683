#include "faceshifter/hear.hpp"

#include "faceshifter/error.hpp"
#include "faceshifter/losses.hpp"

namespace faceshifter {

torch::Tensor heuristic_error(const torch::Tensor& x_t, AEINet& aei, IdentityEncoder& identity) {
  require(!aei->is_training(), ErrorKind::Config, "heuristic error needs AEI-Net in eval mode");
  torch::NoGradGuard no_grad;
  const auto z_id = encode_identity(x_t, identity);
  return x_t - aei->forward(z_id, x_t).image;
}

HEARNetImpl::HEARNetImpl(std::vector<int> channels, NormKind norm) : channels_(std::move(channels)) {
  const int d = depth();
  require(d >= 1, ErrorKind::Config, "HEAR-Net needs at least one downsample");
  auto lrelu = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.1)); };
  down_ = register_module("down", torch::nn::ModuleList());
  up_ = register_module("up", torch::nn::ModuleList());
  int64_t in_ch = 6;
  for (int i = 0; i < d; ++i) {
    down_->push_back(torch::nn::Sequential(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, channels_[i], 4).stride(2).padding(1).bias(false)),
        BatchStatNorm(channels_[i], norm), lrelu()));
    in_ch = channels_[i];
  }
  // up_[k] produces the map at the resolution of down level k-1 (k = d-1 .. 0), stored
  // coarsest first.
  int64_t prev = channels_[d - 1];
  for (int k = d - 1; k >= 0; --k) {
    const int64_t out_ch = k > 0 ? channels_[k - 1] : channels_[0];
    up_->push_back(torch::nn::Sequential(
        torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(prev, out_ch, 4).stride(2).padding(1).bias(false)),
        BatchStatNorm(out_ch, norm), lrelu()));
    prev = k > 0 ? 2 * out_ch : out_ch + 6;
  }
  out_ = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(prev, 3, 3).padding(1)));
}

torch::Tensor HEARNetImpl::forward(const torch::Tensor& y_hat, const torch::Tensor& delta) {
  require(y_hat.dim() == 4 && y_hat.size(1) == 3 && y_hat.sizes() == delta.sizes(), ErrorKind::Data,
          "HEAR-Net expects y_hat and delta of equal shape (N, 3, H, W)");
  const int64_t unit = int64_t{1} << depth();
  require(y_hat.size(2) % unit == 0 && y_hat.size(3) % unit == 0, ErrorKind::Data,
          "HEAR-Net input " + std::to_string(y_hat.size(2)) + "x" + std::to_string(y_hat.size(3)) +
              " not divisible by " + std::to_string(unit));
  const auto x = torch::cat({y_hat, delta}, 1);
  std::vector<torch::Tensor> skips{x};
  auto h = x;
  for (const auto& m : *down_) {
    h = m->as<torch::nn::Sequential>()->forward(h);
    skips.push_back(h);
  }
  const int d = depth();
  for (int j = 0; j < d; ++j) {
    h = up_[j]->as<torch::nn::Sequential>()->forward(h);
    h = torch::cat({h, skips[d - 1 - j]}, 1);
  }
  return torch::tanh(out_(h));
}

torch::Tensor refine(HEARNet& net, const torch::Tensor& y_hat, const torch::Tensor& delta) {
  return net->forward(y_hat, delta);
}

torch::Tensor change_loss(const torch::Tensor& y_hat, const torch::Tensor& y) {
  require(y_hat.sizes() == y.sizes(), ErrorKind::Data, "change loss shape mismatch");
  return (y_hat - y).abs().mean();
}

torch::Tensor hear_total_loss(const torch::Tensor& id, const torch::Tensor& chg, const torch::Tensor& rec) {
  require_finite(id, "identity loss");
  require_finite(chg, "change loss");
  require_finite(rec, "reconstruction loss");
  return id + chg + rec;
}

HearLossParts hear_losses(const torch::Tensor& y, const torch::Tensor& y_hat, const torch::Tensor& x_t,
                          const torch::Tensor& x_s, const torch::Tensor& is_same, IdentityEncoder& identity,
                          LossReduction reduction) {
  HearLossParts p;
  torch::Tensor z_src;
  {
    torch::NoGradGuard no_grad;
    z_src = identity.encode(x_s);
  }
  p.id = identity_loss(identity.encode(y), z_src);
  p.chg = change_loss(y_hat, y);
  p.rec = reconstruction_loss(y, x_t, is_same, reduction);
  p.total = hear_total_loss(p.id, p.chg, p.rec);
  return p;
}

}  // namespace faceshifter
