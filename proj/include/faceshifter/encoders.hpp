#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "faceshifter/checkpoint.hpp"
#include "faceshifter/config.hpp"
#include "faceshifter/data_pipeline.hpp"
#include "faceshifter/norm.hpp"

namespace faceshifter {

// Multi-level attribute embedding, coarsest level first; level k has shape
// (N, C_k, H_k, W_k) with H_k doubling from one level to the next.
struct AttributeEmbeddingSet {
  std::vector<torch::Tensor> levels;

  size_t size() const { return levels.size(); }
  const torch::Tensor& operator[](size_t k) const { return levels[k]; }
  AttributeEmbeddingSet detached() const;
};

// U-Net whose decoder feature maps form the attribute embedding. Downsamples with strided
// 4x4 convolutions and upsamples with 4x4 transposed convolutions, concatenating skips.
// The finest level is the last decoder map bilinearly upsampled to the input resolution.
class AttributeEncoderImpl : public torch::nn::Module {
 public:
  AttributeEncoderImpl(int crop_size, int n_levels, std::vector<int> channels, NormKind norm = NormKind::Batch);

  AttributeEmbeddingSet forward(const torch::Tensor& image);

  int n_levels() const { return n_levels_; }
  int crop_size() const { return crop_size_; }
  const std::vector<int64_t>& level_channels() const { return level_channels_; }
  const std::vector<int64_t>& level_sizes() const { return level_sizes_; }

 private:
  int crop_size_;
  int n_levels_;
  std::vector<int> channels_;
  std::vector<int64_t> level_channels_;
  std::vector<int64_t> level_sizes_;
  torch::nn::ModuleList down_{nullptr};
  torch::nn::ModuleList up_{nullptr};
};
TORCH_MODULE(AttributeEncoder);

// Frozen face recognizer producing unit-norm identity embeddings. Gradients flow to the
// input images but the encoder's own parameters never change.
class IdentityEncoder {
 public:
  virtual ~IdentityEncoder() = default;

  // (N, 3, S, S) images in [-1, 1] -> (N, dim()) rows of unit L2 norm.
  virtual torch::Tensor encode(const torch::Tensor& images) = 0;
  virtual int64_t dim() const = 0;
  virtual std::string descriptor() const = 0;
  virtual torch::nn::Module& module() = 0;
  // Writes weights plus whatever metadata `load_identity_encoder` needs to rebuild it.
  virtual void save(Archive& archive, const std::string& prefix) const = 0;
};

class ToyIdentityNetImpl : public torch::nn::Module {
 public:
  ToyIdentityNetImpl(int input_size, int channels, int id_dim, int num_classes);

  // Activation of the layer before the classifier.
  torch::Tensor embed(const torch::Tensor& x);
  torch::Tensor logits(const torch::Tensor& embedding);

  int input_size() const { return input_size_; }

 private:
  int input_size_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear fc_embed_{nullptr};
  torch::nn::Linear fc_classes_{nullptr};
};
TORCH_MODULE(ToyIdentityNet);

struct ToyIdentityOptions {
  int input_size = 64;
  int channels = 32;
  int id_dim = 512;
  int steps = 1500;
  int batch_size = 32;
  double lr = 1e-3;
  uint64_t seed = 1;
};

class ToyIdentityEncoder final : public IdentityEncoder {
 public:
  ToyIdentityEncoder(ToyIdentityNet net, ToyIdentityOptions options, int num_classes);

  torch::Tensor encode(const torch::Tensor& images) override;
  int64_t dim() const override { return options_.id_dim; }
  std::string descriptor() const override;
  torch::nn::Module& module() override { return *net_; }
  void save(Archive& archive, const std::string& prefix) const override;

  ToyIdentityNet& net() { return net_; }
  int num_classes() const { return num_classes_; }

 private:
  ToyIdentityNet net_;
  ToyIdentityOptions options_;
  int num_classes_;
};

// Trains the toy recognizer as an identity classifier on the labelled samples, then freezes it.
std::shared_ptr<ToyIdentityEncoder> train_toy_identity_encoder(std::span<const FaceSample> samples,
                                                               const ToyIdentityOptions& options);

// Toy recognizer settings derived from the pipeline config. The evaluation adapter uses a
// different seed so that it is trained independently of the training adapter.
ToyIdentityOptions toy_identity_options(const PipelineConfig& c, bool for_evaluation = false);

// Rebuilds an encoder saved by IdentityEncoder::save.
std::shared_ptr<IdentityEncoder> load_identity_encoder(const Archive& archive, const std::string& prefix);

// Adapter registry. `spec` is `toy` (trained on `samples`, cached under $FACESWAP_CACHE when
// set) or `external:<checkpoint path>`. Throws Error(Config) when the adapter's output
// dimension differs from `expected_dim`.
std::shared_ptr<IdentityEncoder> make_identity_encoder(const std::string& spec, std::span<const FaceSample> samples,
                                                       const ToyIdentityOptions& options, int64_t expected_dim);

// Runs the adapter and checks the embedding invariants.
torch::Tensor encode_identity(const torch::Tensor& images, IdentityEncoder& adapter);

}  // namespace faceshifter
