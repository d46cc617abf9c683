#pragma once

#include <barrier>
#include <cstdint>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include "faceshifter/config.hpp"

namespace faceshifter {

// In-process stand-in for a collective across `world_size` data-parallel workers, each
// running on its own thread. Every rank must issue the same sequence of calls.
class AllReduceGroup {
 public:
  explicit AllReduceGroup(int world_size);

  int world_size() const { return world_size_; }

  // Blocking elementwise sum over ranks. Summation runs in rank order, so every rank sees
  // bit-identical results.
  torch::Tensor sum(const torch::Tensor& local, int rank);

 private:
  int world_size_;
  std::barrier<> barrier_;
  std::vector<torch::Tensor> slots_;
};

// Differentiable all-reduce: forward sums over ranks, backward sums the incoming gradients.
torch::Tensor all_reduce_sum(const torch::Tensor& local, AllReduceGroup& group, int rank);

// While alive, batch statistics computed on this thread are reduced across `group`.
class SyncStatsScope {
 public:
  SyncStatsScope(AllReduceGroup& group, int rank);
  ~SyncStatsScope();
  SyncStatsScope(const SyncStatsScope&) = delete;
  SyncStatsScope& operator=(const SyncStatsScope&) = delete;

  static AllReduceGroup* current_group();
  static int current_rank();

 private:
  AllReduceGroup* prev_group_;
  int prev_rank_;
};

// Channelwise normalisation (h - mu) / sqrt(var + eps).
// Batch kind: statistics over (N, H, W) in training, running statistics in eval mode.
// Instance kind: statistics over (H, W) per sample, in both modes.
class BatchStatNormImpl : public torch::nn::Module {
 public:
  BatchStatNormImpl(int64_t channels, NormKind kind = NormKind::Batch, bool affine = false, double eps = 1e-5,
                    double momentum = 0.1);

  torch::Tensor forward(const torch::Tensor& x);

  int64_t channels() const { return channels_; }
  NormKind kind() const { return kind_; }
  double eps() const { return eps_; }

  torch::Tensor running_mean, running_var, num_batches_tracked;
  torch::Tensor weight, bias;  // undefined unless affine

 private:
  int64_t channels_;
  NormKind kind_;
  bool affine_;
  double eps_;
  double momentum_;
};
TORCH_MODULE(BatchStatNorm);

}  // namespace faceshifter
