#include "faceshifter/encoders.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>

#include "faceshifter/error.hpp"

namespace faceshifter {

namespace F = torch::nn::functional;

AttributeEmbeddingSet AttributeEmbeddingSet::detached() const {
  AttributeEmbeddingSet out;
  for (const auto& l : levels) out.levels.push_back(l.detach());
  return out;
}

AttributeEncoderImpl::AttributeEncoderImpl(int crop_size, int n_levels, std::vector<int> channels, NormKind norm)
    : crop_size_(crop_size), n_levels_(n_levels), channels_(std::move(channels)) {
  require(n_levels >= 2, ErrorKind::Config, "attribute encoder needs at least two levels");
  const int d = n_levels - 1;
  require(static_cast<int>(channels_.size()) == d, ErrorKind::Config, "attribute encoder needs n_levels-1 channels");
  require(crop_size > 0 && crop_size % (1 << d) == 0, ErrorKind::Config,
          "crop_size " + std::to_string(crop_size) + " not divisible by 2^" + std::to_string(d));

  down_ = register_module("down", torch::nn::ModuleList());
  up_ = register_module("up", torch::nn::ModuleList());
  int in_ch = 3;
  for (int i = 0; i < d; ++i) {
    torch::nn::Sequential block(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, channels_[i], 4).stride(2).padding(1).bias(false)),
        BatchStatNorm(channels_[i], norm), torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.1)));
    down_->push_back(block);
    in_ch = channels_[i];
  }
  level_channels_.push_back(channels_[d - 1]);
  level_sizes_.push_back(crop_size >> d);
  int64_t prev = channels_[d - 1];
  for (int j = 1; j < d; ++j) {
    const int out_ch = channels_[d - 1 - j];
    torch::nn::Sequential block(
        torch::nn::ConvTranspose2d(
            torch::nn::ConvTranspose2dOptions(prev, out_ch, 4).stride(2).padding(1).bias(false)),
        BatchStatNorm(out_ch, norm), torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.1)));
    up_->push_back(block);
    prev = 2 * out_ch;
    level_channels_.push_back(prev);
    level_sizes_.push_back(crop_size >> (d - j));
  }
  level_channels_.push_back(prev);
  level_sizes_.push_back(crop_size);
}

AttributeEmbeddingSet AttributeEncoderImpl::forward(const torch::Tensor& image) {
  require(image.dim() == 4 && image.size(1) == 3 && image.size(2) == crop_size_ && image.size(3) == crop_size_,
          ErrorKind::Data, "attribute encoder expects (N, 3, " + std::to_string(crop_size_) + ", " +
                               std::to_string(crop_size_) + ")");
  std::vector<torch::Tensor> skips;
  auto h = image;
  for (const auto& m : *down_) {
    h = m->as<torch::nn::Sequential>()->forward(h);
    skips.push_back(h);
  }
  AttributeEmbeddingSet out;
  out.levels.push_back(h);
  const int d = n_levels_ - 1;
  for (int j = 1; j < d; ++j) {
    auto up = up_[j - 1]->as<torch::nn::Sequential>()->forward(h);
    h = torch::cat({up, skips[d - 1 - j]}, 1);
    out.levels.push_back(h);
  }
  out.levels.push_back(F::interpolate(h, F::InterpolateFuncOptions()
                                             .size(std::vector<int64_t>{crop_size_, crop_size_})
                                             .mode(torch::kBilinear)
                                             .align_corners(false)));
  return out;
}

ToyIdentityNetImpl::ToyIdentityNetImpl(int input_size, int channels, int id_dim, int num_classes)
    : input_size_(input_size) {
  require(input_size % 16 == 0, ErrorKind::Config, "toy identity input must be a multiple of 16");
  auto lrelu = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  const int c = channels;
  features_ = register_module(
      "features",
      torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(3, c, 3).padding(1)), lrelu(),
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 4).stride(2).padding(1)), lrelu(),
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 2 * c, 4).stride(2).padding(1)), lrelu(),
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * c, 4 * c, 4).stride(2).padding(1)), lrelu(),
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(4 * c, 4 * c, 4).stride(2).padding(1)), lrelu()));
  const int spatial = input_size / 16;
  fc_embed_ = register_module("fc_embed", torch::nn::Linear(4 * c * spatial * spatial, id_dim));
  fc_classes_ = register_module("fc_classes", torch::nn::Linear(torch::nn::LinearOptions(id_dim, num_classes).bias(false)));
}

torch::Tensor ToyIdentityNetImpl::embed(const torch::Tensor& x) { return fc_embed_(features_->forward(x).flatten(1)); }

torch::Tensor ToyIdentityNetImpl::logits(const torch::Tensor& embedding) {
  // Cosine classifier: makes the cosine geometry of the embedding identity-discriminative.
  constexpr double kScale = 16.0;
  const auto w = F::normalize(fc_classes_->weight, F::NormalizeFuncOptions().dim(1));
  return kScale * torch::mm(F::normalize(embedding, F::NormalizeFuncOptions().dim(1)), w.t());
}

ToyIdentityEncoder::ToyIdentityEncoder(ToyIdentityNet net, ToyIdentityOptions options, int num_classes)
    : net_(std::move(net)), options_(options), num_classes_(num_classes) {
  net_->eval();
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
}

torch::Tensor ToyIdentityEncoder::encode(const torch::Tensor& images) {
  require(images.dim() == 4 && images.size(1) == 3, ErrorKind::Data, "identity encoder expects (N, 3, H, W)");
  auto x = images;
  if (x.size(2) != options_.input_size || x.size(3) != options_.input_size) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{options_.input_size, options_.input_size})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  if (x.scalar_type() != net_->parameters().front().scalar_type()) x = x.to(net_->parameters().front().scalar_type());
  return F::normalize(net_->embed(x), F::NormalizeFuncOptions().dim(1).eps(1e-12));
}

std::string ToyIdentityEncoder::descriptor() const {
  std::ostringstream os;
  os << "toy(input=" << options_.input_size << ",channels=" << options_.channels << ",dim=" << options_.id_dim
     << ",classes=" << num_classes_ << ",seed=" << options_.seed << ")";
  return os.str();
}

void ToyIdentityEncoder::save(Archive& archive, const std::string& prefix) const {
  archive.meta["encoders"][prefix] = {{"kind", "toy"},
                                      {"input_size", options_.input_size},
                                      {"channels", options_.channels},
                                      {"id_dim", options_.id_dim},
                                      {"num_classes", num_classes_},
                                      {"seed", options_.seed},
                                      {"descriptor", descriptor()}};
  export_module(*net_, prefix, archive);
}

ToyIdentityOptions toy_identity_options(const PipelineConfig& c, bool for_evaluation) {
  ToyIdentityOptions o;
  o.input_size = c.toy_id_input;
  o.channels = c.toy_id_channels;
  o.id_dim = c.id_dim;
  o.steps = c.toy_id_steps;
  o.seed = for_evaluation ? c.seed * 2654435761ULL + 7919 : c.seed + 1;
  return o;
}

std::shared_ptr<IdentityEncoder> load_identity_encoder(const Archive& archive, const std::string& prefix) {
  require(archive.meta.contains("encoders") && archive.meta["encoders"].contains(prefix), ErrorKind::Checkpoint,
          "checkpoint has no identity encoder under '" + prefix + "'");
  const auto& m = archive.meta["encoders"][prefix];
  require(m.value("kind", "") == "toy", ErrorKind::Checkpoint, "unsupported identity encoder kind");
  ToyIdentityOptions opt;
  opt.input_size = m.at("input_size").get<int>();
  opt.channels = m.at("channels").get<int>();
  opt.id_dim = m.at("id_dim").get<int>();
  opt.seed = m.at("seed").get<uint64_t>();
  const int classes = m.at("num_classes").get<int>();
  ToyIdentityNet net(opt.input_size, opt.channels, opt.id_dim, classes);
  import_module(*net, prefix, archive);
  return std::make_shared<ToyIdentityEncoder>(net, opt, classes);
}

std::shared_ptr<ToyIdentityEncoder> train_toy_identity_encoder(std::span<const FaceSample> samples,
                                                               const ToyIdentityOptions& options) {
  require(!samples.empty(), ErrorKind::Data, "toy identity encoder needs training samples");
  std::map<std::string, int> classes;
  for (const auto& s : samples) classes.emplace(s.source_id, 0);
  require(classes.size() >= 2, ErrorKind::Data, "toy identity encoder needs at least two identity labels");
  int next = 0;
  for (auto& [label, idx] : classes) idx = next++;

  torch::manual_seed(options.seed);
  ToyIdentityNet net(options.input_size, options.channels, options.id_dim, static_cast<int>(classes.size()));
  auto images = stack_images(samples);
  if (images.size(2) != options.input_size) {
    images = F::interpolate(images, F::InterpolateFuncOptions()
                                        .size(std::vector<int64_t>{options.input_size, options.input_size})
                                        .mode(torch::kBilinear)
                                        .align_corners(false));
  }
  std::vector<int64_t> label_vec;
  for (const auto& s : samples) label_vec.push_back(classes.at(s.source_id));
  const auto labels = torch::tensor(label_vec, torch::kLong);

  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(options.lr));
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<int64_t> pick(0, static_cast<int64_t>(samples.size()) - 1);
  std::uniform_int_distribution<int64_t> shift(-3, 3);
  std::bernoulli_distribution flip(0.5);
  net->train();
  for (int step = 0; step < options.steps; ++step) {
    std::vector<torch::Tensor> batch;
    std::vector<int64_t> idx;
    for (int b = 0; b < options.batch_size; ++b) {
      const int64_t i = pick(rng);
      auto img = images[i].roll({shift(rng), shift(rng)}, {1, 2});
      if (flip(rng)) img = img.flip({2});
      batch.push_back(img);
      idx.push_back(i);
    }
    const auto x = torch::stack(batch);
    const auto y = labels.index_select(0, torch::tensor(idx, torch::kLong));
    const auto loss = F::cross_entropy(net->logits(net->embed(x)), y);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  return std::make_shared<ToyIdentityEncoder>(net, options, static_cast<int>(classes.size()));
}

namespace {

std::string training_digest(std::span<const FaceSample> samples, const ToyIdentityOptions& o) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& s : samples) {
    const auto t = s.image.contiguous();
    mix(t.data_ptr(), static_cast<size_t>(t.numel()) * t.element_size());
    mix(s.source_id.data(), s.source_id.size());
  }
  const int64_t fields[] = {o.input_size, o.channels, o.id_dim, o.steps, o.batch_size, static_cast<int64_t>(o.seed)};
  mix(fields, sizeof fields);
  mix(&o.lr, sizeof o.lr);
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace

std::shared_ptr<IdentityEncoder> make_identity_encoder(const std::string& spec, std::span<const FaceSample> samples,
                                                       const ToyIdentityOptions& options, int64_t expected_dim) {
  std::shared_ptr<IdentityEncoder> enc;
  if (spec == "toy") {
    const char* cache = std::getenv("FACESWAP_CACHE");
    std::string cache_path;
    if (cache && *cache) {
      std::filesystem::create_directories(cache);
      cache_path = (std::filesystem::path(cache) / ("toy-id-" + training_digest(samples, options) + ".ckpt")).string();
      if (std::filesystem::exists(cache_path)) enc = load_identity_encoder(load_archive(cache_path), "identity_encoder.");
    }
    if (!enc) {
      auto toy = train_toy_identity_encoder(samples, options);
      if (!cache_path.empty()) {
        Archive a;
        toy->save(a, "identity_encoder.");
        save_archive(cache_path, a);
      }
      enc = toy;
    }
  } else if (spec.rfind("external:", 0) == 0) {
    enc = load_identity_encoder(load_archive(spec.substr(9)), "identity_encoder.");
  } else {
    fail(ErrorKind::Config, "unknown identity encoder '" + spec + "'");
  }
  require(enc->dim() == expected_dim, ErrorKind::Config,
          "identity encoder dimension " + std::to_string(enc->dim()) + " does not match id_dim " +
              std::to_string(expected_dim));
  return enc;
}

torch::Tensor encode_identity(const torch::Tensor& images, IdentityEncoder& adapter) {
  auto z = adapter.encode(images);
  require(z.dim() == 2 && z.size(0) == images.size(0) && z.size(1) == adapter.dim(), ErrorKind::Data,
          "identity encoder returned an unexpected shape");
  return z;
}

}  // namespace faceshifter
