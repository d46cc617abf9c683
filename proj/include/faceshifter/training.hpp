#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "faceshifter/aad.hpp"
#include "faceshifter/checkpoint.hpp"
#include "faceshifter/config.hpp"
#include "faceshifter/data_pipeline.hpp"
#include "faceshifter/encoders.hpp"
#include "faceshifter/hear.hpp"
#include "faceshifter/losses.hpp"

namespace faceshifter {

// One thread for intra-op work and deterministic kernels where libtorch offers a choice.
void enable_deterministic_mode();

struct PairBatch {
  torch::Tensor source;   // (N, 3, S, S)
  torch::Tensor target;   // (N, 3, S, S)
  torch::Tensor is_same;  // bool (N)
  std::vector<size_t> source_index;
  std::vector<size_t> target_index;

  int64_t size() const { return source.size(0); }
  int64_t same_count() const;
  PairBatch slice(int64_t begin, int64_t end) const;
};

PairBatch sample_batch(std::span<const FaceSample> data, int batch_size, double p_cross, std::mt19937_64& rng);

// Adam moments and step counts as archive tensors under `prefix`.
void export_adam(const torch::optim::Adam& opt, const std::string& prefix, Archive& archive);
void import_adam(torch::optim::Adam& opt, const std::string& prefix, const Archive& archive);

std::string rng_state(const std::mt19937_64& rng);
void set_rng_state(std::mt19937_64& rng, const std::string& state);

struct RunOptions {
  std::string run_dir;           // empty: nothing written
  int64_t checkpoint_every = 0;  // 0: take the config value
  std::function<void(const nlohmann::json&)> on_step;
};

// Writes `{run_dir}/{step}.ckpt` and points `{run_dir}/latest` at it.
std::string write_run_checkpoint(const std::string& run_dir, int64_t step, const Archive& archive);
// Resolves a run directory (through its `latest` file) or a checkpoint path.
std::string resolve_checkpoint(const std::string& path);

// Losses of one generator pass, after backward. Used by the trainer and by the
// data-parallel simulation.
struct GeneratorPass {
  torch::Tensor image;
  AEILossParts parts;
  torch::Tensor total;
};

// Generator losses for an already computed forward pass; no backward.
GeneratorPass generator_losses(AEINet& net, MultiScaleDiscriminator& disc, IdentityEncoder& identity,
                               const torch::Tensor& z_src, const AEINetImpl::Output& out, const PairBatch& batch,
                               const PipelineConfig& config);

// Identity encoding, forward, losses and backward.
GeneratorPass generator_pass(AEINet& net, MultiScaleDiscriminator& disc, IdentityEncoder& identity,
                             const PairBatch& batch, const PipelineConfig& config);

// Stage one: alternating hinge discriminator step and generator step with Adam.
class AEITrainer {
 public:
  AEITrainer(const PipelineConfig& config, std::shared_ptr<IdentityEncoder> identity);

  // Rebuilds the trainer (identity encoder included) from a training checkpoint.
  static std::unique_ptr<AEITrainer> resume(const std::string& checkpoint_path);

  nlohmann::json step(const PairBatch& batch);
  nlohmann::json step(std::span<const FaceSample> data);
  // Runs until `step_count() == until_step`. Non-finite losses throw Error(Numeric) before any
  // parameter update, leaving the last checkpoint on disk untouched.
  void train(std::span<const FaceSample> data, int64_t until_step, const RunOptions& run = {});

  Archive checkpoint() const;
  void save(const std::string& path) const { save_archive(path, checkpoint()); }
  void restore(const Archive& archive);

  const PipelineConfig& config() const { return config_; }
  AEINet& net() { return net_; }
  MultiScaleDiscriminator& disc() { return disc_; }
  std::shared_ptr<IdentityEncoder> identity() const { return identity_; }
  int64_t step_count() const { return step_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  PipelineConfig config_;
  std::shared_ptr<IdentityEncoder> identity_;
  AEINet net_{nullptr};
  MultiScaleDiscriminator disc_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  int64_t step_ = 0;
  std::mt19937_64 rng_;
};

// Inference bundle loaded from a stage-one checkpoint (eval mode, frozen).
struct AEIModel {
  PipelineConfig config;
  AEINet net{nullptr};
  std::shared_ptr<IdentityEncoder> identity;

  torch::Tensor swap(const torch::Tensor& source, const torch::Tensor& target);
};
AEIModel load_aei_model(const std::string& path);

// Mean |x_t - AEI(x_t, x_t)| per image, each image processed on its own so a score never
// depends on the rest of the batch.
std::vector<double> heuristic_error_scores(std::span<const FaceSample> data, AEINet& aei, IdentityEncoder& identity);

// Indices of the ceil(fraction * N) largest scores, largest first; ties keep dataset order.
std::vector<size_t> top_fraction_indices(std::span<const double> scores, double fraction);

std::vector<size_t> select_top_error_subset(std::span<const FaceSample> data, AEINet& aei, IdentityEncoder& identity,
                                            double fraction = 0.10);

struct HearBatch {
  PairBatch pair;               // pair.target holds the possibly occluded target
  torch::Tensor occluded;       // bool (N)
  torch::Tensor truth_mask;     // bool (N, 1, S, S), all false where not occluded
};

HearBatch sample_hear_batch(std::span<const FaceSample> data, std::span<const OccluderAsset> occluders,
                            const PipelineConfig& config, std::mt19937_64& rng);

// Stage two. AEI-Net and the identity encoder stay frozen; only HEAR-Net is optimized.
class HEARTrainer {
 public:
  HEARTrainer(const PipelineConfig& config, AEINet aei, std::shared_ptr<IdentityEncoder> identity,
              std::vector<OccluderAsset> occluders);

  nlohmann::json step(const HearBatch& batch);
  nlohmann::json step(std::span<const FaceSample> data);
  void train(std::span<const FaceSample> data, int64_t until_step, const RunOptions& run = {});

  Archive checkpoint() const;
  void save(const std::string& path) const { save_archive(path, checkpoint()); }
  void restore(const Archive& archive);

  HEARNet& net() { return hear_; }
  AEINet& aei() { return aei_; }
  int64_t step_count() const { return step_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  PipelineConfig config_;
  AEINet aei_;
  std::shared_ptr<IdentityEncoder> identity_;
  std::vector<OccluderAsset> occluders_;
  HEARNet hear_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_;
  int64_t step_ = 0;
  std::mt19937_64 rng_;
};

// Stage-two network from a HEAR-Net training checkpoint, in eval mode.
HEARNet load_hear_model(const std::string& path);

// Data-parallel simulation of one generator pass: `workers` threads each hold a replica of
// the networks and a contiguous shard of the batch, batch statistics are summed across
// workers, and gradients are averaged. Returns the concatenated outputs, the loss averaged
// over shards and the averaged gradient of every named generator parameter.
struct ParallelPassResult {
  torch::Tensor image;
  double total = 0;
  std::map<std::string, torch::Tensor> grads;
};
ParallelPassResult data_parallel_generator_pass(AEINet& net, MultiScaleDiscriminator& disc, IdentityEncoder& identity,
                                                const PairBatch& batch, const PipelineConfig& config, int workers);
// Same quantities from a plain pass over the whole batch.
ParallelPassResult single_worker_generator_pass(AEINet& net, MultiScaleDiscriminator& disc, IdentityEncoder& identity,
                                                const PairBatch& batch, const PipelineConfig& config);

}  // namespace faceshifter
