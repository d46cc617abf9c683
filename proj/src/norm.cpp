#include "faceshifter/norm.hpp"

#include "faceshifter/error.hpp"

namespace faceshifter {

AllReduceGroup::AllReduceGroup(int world_size)
    : world_size_(world_size), barrier_(world_size), slots_(static_cast<size_t>(world_size)) {
  require(world_size >= 1, ErrorKind::Config, "world size must be positive");
}

torch::Tensor AllReduceGroup::sum(const torch::Tensor& local, int rank) {
  if (world_size_ == 1) return local.clone();
  slots_[static_cast<size_t>(rank)] = local;
  barrier_.arrive_and_wait();
  auto total = slots_[0].clone();
  for (int r = 1; r < world_size_; ++r) total.add_(slots_[static_cast<size_t>(r)]);
  // Nobody may overwrite a slot until every rank has read all of them.
  barrier_.arrive_and_wait();
  return total;
}

namespace {

struct AllReduceSum : public torch::autograd::Function<AllReduceSum> {
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& local,
                               AllReduceGroup* group, int64_t rank) {
    ctx->saved_data["group"] = reinterpret_cast<int64_t>(group);
    ctx->saved_data["rank"] = rank;
    return group->sum(local.detach(), static_cast<int>(rank));
  }

  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::variable_list grads) {
    auto* group = reinterpret_cast<AllReduceGroup*>(ctx->saved_data["group"].toInt());
    const int rank = static_cast<int>(ctx->saved_data["rank"].toInt());
    return {group->sum(grads[0], rank), torch::Tensor(), torch::Tensor()};
  }
};

thread_local AllReduceGroup* t_group = nullptr;
thread_local int t_rank = 0;

}  // namespace

torch::Tensor all_reduce_sum(const torch::Tensor& local, AllReduceGroup& group, int rank) {
  return AllReduceSum::apply(local, &group, static_cast<int64_t>(rank));
}

SyncStatsScope::SyncStatsScope(AllReduceGroup& group, int rank) : prev_group_(t_group), prev_rank_(t_rank) {
  t_group = &group;
  t_rank = rank;
}

SyncStatsScope::~SyncStatsScope() {
  t_group = prev_group_;
  t_rank = prev_rank_;
}

AllReduceGroup* SyncStatsScope::current_group() { return t_group; }
int SyncStatsScope::current_rank() { return t_rank; }

BatchStatNormImpl::BatchStatNormImpl(int64_t channels, NormKind kind, bool affine, double eps, double momentum)
    : channels_(channels), kind_(kind), affine_(affine), eps_(eps), momentum_(momentum) {
  running_mean = register_buffer("running_mean", torch::zeros({channels}));
  running_var = register_buffer("running_var", torch::ones({channels}));
  num_batches_tracked = register_buffer("num_batches_tracked", torch::zeros({1}, torch::kLong));
  if (affine_) {
    weight = register_parameter("weight", torch::ones({channels}));
    bias = register_parameter("bias", torch::zeros({channels}));
  }
}

torch::Tensor BatchStatNormImpl::forward(const torch::Tensor& x) {
  require(x.dim() == 4 && x.size(1) == channels_, ErrorKind::Data,
          "norm expects (N, " + std::to_string(channels_) + ", H, W)");
  torch::Tensor y;
  if (kind_ == NormKind::Instance) {
    const auto mean = x.mean({2, 3}, true);
    const auto var = (x - mean).pow(2).mean({2, 3}, true);
    y = (x - mean) / torch::sqrt(var + eps_);
  } else if (is_training()) {
    AllReduceGroup* group = SyncStatsScope::current_group();
    const int rank = SyncStatsScope::current_rank();
    const int64_t local_count = x.size(0) * x.size(2) * x.size(3);
    int64_t count = local_count;
    int64_t batch = x.size(0);
    if (group) {
      const auto sizes = group->sum(torch::tensor({local_count, x.size(0)}, torch::kLong), rank);
      count = sizes[0].item<int64_t>();
      batch = sizes[1].item<int64_t>();
    }
    require(batch >= 2, ErrorKind::Data, "batch normalization in training mode needs at least two samples");
    // Two-pass statistics; with a group, both sums run over the union of all sub-batches.
    auto sum = x.sum({0, 2, 3});
    if (group) sum = all_reduce_sum(sum, *group, rank);
    const auto mean = sum / static_cast<double>(count);
    auto sq = (x - mean.view({1, -1, 1, 1})).pow(2).sum({0, 2, 3});
    if (group) sq = all_reduce_sum(sq, *group, rank);
    const auto var = sq / static_cast<double>(count);
    y = (x - mean.view({1, -1, 1, 1})) / torch::sqrt(var.view({1, -1, 1, 1}) + eps_);
    {
      torch::NoGradGuard no_grad;
      const double unbias = count > 1 ? static_cast<double>(count) / (count - 1) : 1.0;
      running_mean.mul_(1 - momentum_).add_(mean.detach().to(running_mean.dtype()) * momentum_);
      running_var.mul_(1 - momentum_).add_(var.detach().to(running_var.dtype()) * (momentum_ * unbias));
      num_batches_tracked.add_(1);
    }
  } else {
    y = (x - running_mean.view({1, -1, 1, 1})) / torch::sqrt(running_var.view({1, -1, 1, 1}) + eps_);
  }
  if (affine_) y = y * weight.view({1, -1, 1, 1}) + bias.view({1, -1, 1, 1});
  return y;
}

}  // namespace faceshifter
