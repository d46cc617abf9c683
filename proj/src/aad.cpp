#include "faceshifter/aad.hpp"

#include "faceshifter/error.hpp"

namespace faceshifter {

namespace F = torch::nn::functional;

torch::Tensor attentional_blend(const torch::Tensor& attr_act, const torch::Tensor& id_act, const torch::Tensor& mask) {
  return (1 - mask) * attr_act + mask * id_act;
}

AADLayerImpl::AADLayerImpl(int64_t channels, int64_t att_channels, int64_t id_dim, IntegrationMode mode,
                           NormKind norm_kind, bool per_channel_mask)
    : channels_(channels), att_channels_(att_channels), id_dim_(id_dim), mode_(mode) {
  norm = register_module("norm", BatchStatNorm(channels, norm_kind));
  conv_gamma_att =
      register_module("conv_gamma_att", torch::nn::Conv2d(torch::nn::Conv2dOptions(att_channels, channels, 3).padding(1)));
  conv_beta_att =
      register_module("conv_beta_att", torch::nn::Conv2d(torch::nn::Conv2dOptions(att_channels, channels, 3).padding(1)));
  fc_gamma_id = register_module("fc_gamma_id", torch::nn::Linear(id_dim, channels));
  fc_beta_id = register_module("fc_beta_id", torch::nn::Linear(id_dim, channels));
  if (has_mask()) {
    conv_mask = register_module(
        "conv_mask", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, per_channel_mask ? channels : 1, 3).padding(1)));
    // Zero bias: the mask starts near 0.5.
    torch::NoGradGuard no_grad;
    conv_mask->bias.zero_();
  }
}

torch::Tensor AADLayerImpl::normalize(const torch::Tensor& h_in) { return norm->forward(h_in); }

torch::Tensor AADLayerImpl::attribute_activation(const torch::Tensor& h_bar, const torch::Tensor& z_att) {
  return conv_gamma_att(z_att) * h_bar + conv_beta_att(z_att);
}

torch::Tensor AADLayerImpl::identity_activation(const torch::Tensor& h_bar, const torch::Tensor& z_id) {
  const auto gamma = fc_gamma_id(z_id).view({z_id.size(0), channels_, 1, 1});
  const auto beta = fc_beta_id(z_id).view({z_id.size(0), channels_, 1, 1});
  return gamma * h_bar + beta;
}

torch::Tensor AADLayerImpl::attention_mask(const torch::Tensor& h_bar) {
  require(has_mask(), ErrorKind::Config, "integration mode " + to_string(mode_) + " has no attention mask");
  if (forced_mask_) {
    auto shape = h_bar.sizes().vec();
    shape[1] = conv_mask->options.out_channels();
    return torch::full(shape, *forced_mask_, h_bar.options());
  }
  return torch::sigmoid(conv_mask(h_bar));
}

AADOutput AADLayerImpl::forward(const torch::Tensor& h_in, const torch::Tensor& z_att, const torch::Tensor& z_id) {
  require(h_in.dim() == 4 && h_in.size(1) == channels_, ErrorKind::Data,
          "AAD layer expects " + std::to_string(channels_) + " input channels");
  require(z_att.dim() == 4 && z_att.size(1) == att_channels_, ErrorKind::Data,
          "AAD layer expects " + std::to_string(att_channels_) + " attribute channels");
  require(z_att.size(2) == h_in.size(2) && z_att.size(3) == h_in.size(3), ErrorKind::Data,
          "attribute map spatial size " + c10::str(z_att.sizes().slice(2)) + " does not match activation " +
              c10::str(h_in.sizes().slice(2)));
  require(z_att.size(0) == h_in.size(0) && z_id.dim() == 2 && z_id.size(0) == h_in.size(0) && z_id.size(1) == id_dim_,
          ErrorKind::Data, "AAD layer batch or identity dimension mismatch");

  const auto h_bar = normalize(h_in);
  const auto a = attribute_activation(h_bar, z_att);
  const auto i = identity_activation(h_bar, z_id);
  AADOutput out;
  switch (mode_) {
    case IntegrationMode::Add:
      out.h_out = a + i;
      break;
    case IntegrationMode::Cat:
      out.h_out = torch::cat({a, i}, 1);
      break;
    case IntegrationMode::AAD:
    case IntegrationMode::Compressed:
      out.mask = attention_mask(h_bar);
      out.h_out = attentional_blend(a, i, out.mask);
      break;
  }
  return out;
}

AADResBlkImpl::AADResBlkImpl(int64_t c_in, int64_t c_out, int64_t att_channels, int64_t id_dim, IntegrationMode mode,
                             NormKind norm, bool per_channel_mask)
    : c_in_(c_in), c_out_(c_out) {
  aad1 = register_module("aad1", AADLayer(c_in, att_channels, id_dim, mode, norm, per_channel_mask));
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(aad1->out_channels(), c_in, 3).padding(1)));
  aad2 = register_module("aad2", AADLayer(c_in, att_channels, id_dim, mode, norm, per_channel_mask));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(aad2->out_channels(), c_out, 3).padding(1)));
  if (c_in != c_out) {
    aad_skip = register_module("aad_skip", AADLayer(c_in, att_channels, id_dim, mode, norm, per_channel_mask));
    conv_skip = register_module(
        "conv_skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(aad_skip->out_channels(), c_out, 3).padding(1)));
  }
}

torch::Tensor AADResBlkImpl::forward(const torch::Tensor& h_in, const torch::Tensor& z_att, const torch::Tensor& z_id,
                                     MaskStack* masks) {
  require(h_in.dim() == 4 && h_in.size(1) == c_in_, ErrorKind::Data,
          "AAD ResBlk expects " + std::to_string(c_in_) + " input channels");
  auto unit = [&](AADLayer& aad, torch::nn::Conv2d& conv, const torch::Tensor& x) {
    auto o = aad->forward(x, z_att, z_id);
    if (masks && o.mask.defined()) masks->masks.push_back(o.mask);
    return conv(torch::relu(o.h_out));
  };
  auto h = unit(aad1, conv1, h_in);
  h = unit(aad2, conv2, h);
  const auto skip = aad_skip ? unit(aad_skip, conv_skip, h_in) : h_in;
  return h + skip;
}

AADGeneratorImpl::AADGeneratorImpl(const PipelineConfig& config, std::vector<int64_t> att_level_channels)
    : mode_(config.integration),
      n_levels_(config.n_attr_levels),
      bottleneck_(config.bottleneck_size()),
      seed_channels_(config.gen_channels.at(0)),
      att_level_channels_(std::move(att_level_channels)) {
  config.validate();
  require(static_cast<int>(att_level_channels_.size()) == n_levels_, ErrorKind::Config,
          "generator needs one attribute channel count per level");
  fc_seed_ = register_module("fc_seed",
                             torch::nn::Linear(config.id_dim, seed_channels_ * bottleneck_ * bottleneck_));
  for (int k = 0; k < n_levels_; ++k) {
    const int64_t att_ch = (mode_ == IntegrationMode::Compressed && k >= 3) ? att_level_channels_[2]
                                                                             : att_level_channels_[k];
    blocks_.push_back(register_module(
        "block" + std::to_string(k),
        AADResBlk(config.gen_channels[k], config.gen_channels[k + 1], att_ch, config.id_dim, mode_, config.norm,
                  config.per_channel_mask)));
  }
  to_rgb_ = register_module(
      "to_rgb", torch::nn::Conv2d(torch::nn::Conv2dOptions(config.gen_channels[n_levels_], 3, 3).padding(1)));
}

int64_t AADGeneratorImpl::mask_count() const {
  if (mode_ != IntegrationMode::AAD && mode_ != IntegrationMode::Compressed) return 0;
  int64_t n = 0;
  for (const auto& b : blocks_) n += b->aad_layer_count();
  return n;
}

GeneratorOutput AADGeneratorImpl::forward(const torch::Tensor& z_id, const AttributeEmbeddingSet& z_att) {
  require(static_cast<int>(z_att.size()) == n_levels_, ErrorKind::Data,
          "generator expects " + std::to_string(n_levels_) + " attribute levels, got " + std::to_string(z_att.size()));
  require(z_id.dim() == 2, ErrorKind::Data, "z_id must be (N, C_id)");
  const int64_t n = z_id.size(0);
  GeneratorOutput out;
  auto h = fc_seed_(z_id).view({n, seed_channels_, bottleneck_, bottleneck_});
  for (int k = 0; k < n_levels_; ++k) {
    torch::Tensor att = z_att[k];
    if (mode_ == IntegrationMode::Compressed && k >= 3) {
      // Only the first three levels are used; the third feeds every finer stage.
      att = F::interpolate(z_att[2], F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{h.size(2), h.size(3)})
                                         .mode(torch::kBilinear)
                                         .align_corners(false));
    }
    h = blocks_[k]->forward(h, att, z_id, &out.masks);
    if (k + 1 < n_levels_)
      h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  }
  out.image = torch::tanh(to_rgb_(h));
  return out;
}

AEINetImpl::AEINetImpl(const PipelineConfig& config) {
  config.validate();
  encoder = register_module("encoder",
                            AttributeEncoder(config.crop_size, config.n_attr_levels, config.attr_channels, config.norm));
  generator = register_module("generator", AADGenerator(config, encoder->level_channels()));
}

AEINetImpl::Output AEINetImpl::forward(const torch::Tensor& z_id, const torch::Tensor& target) {
  Output out;
  out.z_att = encoder->forward(target);
  auto g = generator->forward(z_id, out.z_att);
  out.image = g.image;
  out.masks = std::move(g.masks);
  return out;
}

MaskStack extract_masks(AEINet& net, IdentityEncoder& identity, const torch::Tensor& source,
                        const torch::Tensor& target) {
  const auto mode = net->generator->mode();
  require(mode == IntegrationMode::AAD || mode == IntegrationMode::Compressed, ErrorKind::Config,
          "integration mode " + to_string(mode) + " has no attention masks");
  torch::NoGradGuard no_grad;
  const auto z_id = encode_identity(source, identity);
  const auto out = net->forward(z_id, target);
  MaskStack stack;
  const std::vector<int64_t> size{target.size(2), target.size(3)};
  for (const auto& m : out.masks.masks) {
    stack.masks.push_back(
        F::interpolate(m, F::InterpolateFuncOptions().size(size).mode(torch::kBilinear).align_corners(false)));
  }
  return stack;
}

}  // namespace faceshifter
