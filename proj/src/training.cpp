#include "faceshifter/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "faceshifter/error.hpp"
#include "faceshifter/norm.hpp"

namespace faceshifter {

namespace fs = std::filesystem;
using nlohmann::json;

void enable_deterministic_mode() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, true);
}

int64_t PairBatch::same_count() const { return is_same.sum().item<int64_t>(); }

PairBatch PairBatch::slice(int64_t begin, int64_t end) const {
  PairBatch b;
  b.source = source.slice(0, begin, end);
  b.target = target.slice(0, begin, end);
  b.is_same = is_same.slice(0, begin, end);
  b.source_index.assign(source_index.begin() + begin, source_index.begin() + end);
  b.target_index.assign(target_index.begin() + begin, target_index.begin() + end);
  return b;
}

PairBatch sample_batch(std::span<const FaceSample> data, int batch_size, double p_cross, std::mt19937_64& rng) {
  require(batch_size >= 1, ErrorKind::Config, "batch size must be positive");
  std::vector<torch::Tensor> src, tgt;
  std::vector<uint8_t> same;
  PairBatch b;
  for (int i = 0; i < batch_size; ++i) {
    const auto p = sample_pair_indices(data.size(), p_cross, rng);
    src.push_back(data[p.source].image);
    tgt.push_back(data[p.target].image);
    same.push_back(p.is_same ? 1 : 0);
    b.source_index.push_back(p.source);
    b.target_index.push_back(p.target);
  }
  b.source = torch::cat(src, 0);
  b.target = torch::cat(tgt, 0);
  b.is_same = torch::tensor(std::vector<int64_t>(same.begin(), same.end()), torch::kLong).to(torch::kBool);
  return b;
}

void export_adam(const torch::optim::Adam& opt, const std::string& prefix, Archive& archive) {
  json steps = json::array();
  size_t i = 0;
  for (const auto& group : opt.param_groups()) {
    for (const auto& p : group.params()) {
      auto it = opt.state().find(p.unsafeGetTensorImpl());
      if (it == opt.state().end()) {
        steps.push_back(-1);
      } else {
        const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
        steps.push_back(s.step());
        archive.tensors[prefix + std::to_string(i) + ".exp_avg"] = s.exp_avg();
        archive.tensors[prefix + std::to_string(i) + ".exp_avg_sq"] = s.exp_avg_sq();
      }
      ++i;
    }
  }
  archive.meta["optimizers"][prefix] = steps;
}

void import_adam(torch::optim::Adam& opt, const std::string& prefix, const Archive& archive) {
  require(archive.meta.contains("optimizers") && archive.meta["optimizers"].contains(prefix), ErrorKind::Checkpoint,
          "checkpoint has no optimizer state '" + prefix + "'");
  const auto& steps = archive.meta["optimizers"][prefix];
  size_t i = 0;
  auto& state = opt.state();
  for (auto& group : opt.param_groups()) {
    for (auto& p : group.params()) {
      require(i < steps.size(), ErrorKind::Checkpoint, "optimizer state '" + prefix + "' has too few entries");
      const int64_t step = steps[i].get<int64_t>();
      void* key = p.unsafeGetTensorImpl();
      if (step < 0) {
        state.erase(key);
      } else {
        auto get = [&](const std::string& name) {
          auto it = archive.tensors.find(prefix + std::to_string(i) + "." + name);
          require(it != archive.tensors.end() && it->second.sizes() == p.sizes(), ErrorKind::Checkpoint,
                  "optimizer tensor " + prefix + std::to_string(i) + "." + name + " missing or misshapen");
          return it->second.to(p.dtype()).clone();
        };
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->step(step);
        s->exp_avg(get("exp_avg"));
        s->exp_avg_sq(get("exp_avg_sq"));
        state[key] = std::move(s);
      }
      ++i;
    }
  }
  require(i == steps.size(), ErrorKind::Checkpoint, "optimizer state '" + prefix + "' has too many entries");
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void set_rng_state(std::mt19937_64& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  require(!in.fail(), ErrorKind::Checkpoint, "corrupt RNG state");
}

std::string write_run_checkpoint(const std::string& run_dir, int64_t step, const Archive& archive) {
  fs::create_directories(run_dir);
  const std::string name = std::to_string(step) + ".ckpt";
  const auto path = (fs::path(run_dir) / name).string();
  save_archive(path, archive);
  const auto latest = fs::path(run_dir) / "latest";
  const auto tmp = fs::path(run_dir) / "latest.tmp";
  {
    std::ofstream out(tmp);
    out << name << "\n";
    require(out.good(), ErrorKind::Checkpoint, "cannot write " + tmp.string());
  }
  fs::rename(tmp, latest);
  return path;
}

std::string resolve_checkpoint(const std::string& path) {
  if (fs::is_directory(path)) {
    const auto latest = fs::path(path) / "latest";
    std::ifstream in(latest);
    require(in.good(), ErrorKind::Checkpoint, "run directory " + path + " has no latest checkpoint");
    std::string name;
    in >> name;
    return resolve_checkpoint((fs::path(path) / name).string());
  }
  require(fs::is_regular_file(path), ErrorKind::Checkpoint, "missing checkpoint " + path);
  return path;
}

namespace {

json losses_json(const AEILossParts& p) {
  return {{"adv_g", p.adv.item<double>()}, {"att", p.att.item<double>()}, {"id", p.id.item<double>()},
          {"rec", p.rec.item<double>()}};
}

void freeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) p.set_requires_grad(false);
  m.eval();
}

// Appends one JSON object per line to `{run_dir}/metrics.jsonl`.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& run_dir) {
    if (run_dir.empty()) return;
    fs::create_directories(run_dir);
    out_.open(fs::path(run_dir) / "metrics.jsonl", std::ios::app);
    require(out_.good(), ErrorKind::Config, "cannot open metrics log in " + run_dir);
  }
  void write(const json& j) {
    if (out_.is_open()) out_ << j.dump() << "\n" << std::flush;
  }

 private:
  std::ofstream out_;
};

torch::optim::AdamOptions adam_options(const AdamSettings& a) {
  return torch::optim::AdamOptions(a.lr).betas({a.beta1, a.beta2}).eps(a.eps);
}

}  // namespace

GeneratorPass generator_losses(AEINet& net, MultiScaleDiscriminator& disc, IdentityEncoder& identity,
                               const torch::Tensor& z_src, const AEINetImpl::Output& out, const PairBatch& batch,
                               const PipelineConfig& config) {
  GeneratorPass p;
  p.image = out.image;
  p.parts.adv = hinge_g_loss(disc->forward(out.image));
  p.parts.att = attribute_loss(net->encoder->forward(out.image), out.z_att.detached(), config.reduction);
  p.parts.id = identity_loss(encode_identity(out.image, identity), z_src);
  p.parts.rec = reconstruction_loss(out.image, batch.target, batch.is_same, config.reduction);
  p.total = aei_total_loss(p.parts, config.weights);
  return p;
}

GeneratorPass generator_pass(AEINet& net, MultiScaleDiscriminator& disc, IdentityEncoder& identity,
                             const PairBatch& batch, const PipelineConfig& config) {
  torch::Tensor z_src;
  {
    torch::NoGradGuard no_grad;
    z_src = encode_identity(batch.source, identity);
  }
  const auto out = net->forward(z_src, batch.target);
  auto p = generator_losses(net, disc, identity, z_src, out, batch, config);
  p.total.backward();
  return p;
}

AEITrainer::AEITrainer(const PipelineConfig& config, std::shared_ptr<IdentityEncoder> identity)
    : config_(config), identity_(std::move(identity)), rng_(config.seed) {
  config_.validate();
  require(identity_ != nullptr, ErrorKind::Config, "AEI training needs an identity encoder");
  require(identity_->dim() == config_.id_dim, ErrorKind::Config,
          "identity encoder dimension " + std::to_string(identity_->dim()) + " does not match id_dim " +
              std::to_string(config_.id_dim));
  freeze(identity_->module());
  torch::manual_seed(config_.seed);
  net_ = AEINet(config_);
  disc_ = MultiScaleDiscriminator(config_);
  opt_g_ = std::make_unique<torch::optim::Adam>(net_->parameters(), adam_options(config_.adam));
  opt_d_ = std::make_unique<torch::optim::Adam>(disc_->parameters(), adam_options(config_.adam));
}

std::unique_ptr<AEITrainer> AEITrainer::resume(const std::string& checkpoint_path) {
  const auto archive = load_archive(resolve_checkpoint(checkpoint_path));
  require(archive.meta.value("kind", "") == "aei_training", ErrorKind::Checkpoint,
          checkpoint_path + " is not an AEI-Net training checkpoint");
  const auto config = config_from_json(archive.meta.at("config"));
  auto trainer = std::make_unique<AEITrainer>(config, load_identity_encoder(archive, "identity_encoder."));
  trainer->restore(archive);
  return trainer;
}

json AEITrainer::step(const PairBatch& batch) {
  net_->train();
  disc_->train();
  torch::Tensor z_src;
  {
    torch::NoGradGuard no_grad;
    z_src = encode_identity(batch.source, *identity_);
  }
  const auto out = net_->forward(z_src, batch.target);

  // Discriminator: real = targets, fake = detached swaps.
  const auto loss_d = hinge_d_loss(disc_->forward(batch.target), disc_->forward(out.image.detach()));
  require_finite(loss_d, "discriminator loss");
  opt_d_->zero_grad();
  loss_d.backward();
  opt_d_->step();

  opt_g_->zero_grad();
  auto g = generator_losses(net_, disc_, *identity_, z_src, out, batch, config_);
  g.total.backward();
  opt_g_->step();
  ++step_;

  json m = losses_json(g.parts);
  m["stage"] = "aei";
  m["step"] = step_;
  m["adv_d"] = loss_d.item<double>();
  m["total"] = g.total.item<double>();
  m["same"] = batch.same_count();
  m["batch"] = batch.size();
  return m;
}

json AEITrainer::step(std::span<const FaceSample> data) {
  return step(sample_batch(data, config_.batch_size, config_.p_cross_aei, rng_));
}

void AEITrainer::train(std::span<const FaceSample> data, int64_t until_step, const RunOptions& run) {
  require(!data.empty(), ErrorKind::Data, "AEI training needs a nonempty dataset");
  MetricsLog log(run.run_dir);
  const int64_t every = run.checkpoint_every > 0 ? run.checkpoint_every : config_.checkpoint_every;
  while (step_ < until_step) {
    const auto m = step(data);
    if (config_.log_every > 0 && step_ % config_.log_every == 0) log.write(m);
    if (run.on_step) run.on_step(m);
    if (!run.run_dir.empty() && (step_ % every == 0 || step_ == until_step))
      write_run_checkpoint(run.run_dir, step_, checkpoint());
  }
}

Archive AEITrainer::checkpoint() const {
  Archive a;
  a.meta["kind"] = "aei_training";
  a.meta["step"] = step_;
  a.meta["config"] = to_json(config_);
  a.meta["config_hash"] = config_.hash();
  a.meta["rng"] = rng_state(rng_);
  export_module(*net_, "aei.", a);
  export_module(*disc_, "disc.", a);
  export_adam(*opt_g_, "optim_g.", a);
  export_adam(*opt_d_, "optim_d.", a);
  identity_->save(a, "identity_encoder.");
  return a;
}

void AEITrainer::restore(const Archive& archive) {
  require(archive.meta.value("kind", "") == "aei_training", ErrorKind::Checkpoint,
          "not an AEI-Net training checkpoint");
  import_module(*net_, "aei.", archive);
  import_module(*disc_, "disc.", archive);
  import_adam(*opt_g_, "optim_g.", archive);
  import_adam(*opt_d_, "optim_d.", archive);
  step_ = archive.meta.at("step").get<int64_t>();
  set_rng_state(rng_, archive.meta.at("rng").get<std::string>());
}

torch::Tensor AEIModel::swap(const torch::Tensor& source, const torch::Tensor& target) {
  torch::NoGradGuard no_grad;
  return net->forward(encode_identity(source, *identity), target).image;
}

AEIModel load_aei_model(const std::string& path) {
  const auto archive = load_archive(resolve_checkpoint(path));
  require(archive.meta.value("kind", "") == "aei_training", ErrorKind::Checkpoint,
          path + " is not an AEI-Net checkpoint");
  AEIModel m;
  m.config = config_from_json(archive.meta.at("config"));
  m.net = AEINet(m.config);
  import_module(*m.net, "aei.", archive);
  freeze(*m.net);
  m.identity = load_identity_encoder(archive, "identity_encoder.");
  freeze(m.identity->module());
  return m;
}

std::vector<double> heuristic_error_scores(std::span<const FaceSample> data, AEINet& aei, IdentityEncoder& identity) {
  std::vector<double> scores;
  scores.reserve(data.size());
  for (const auto& s : data) scores.push_back(heuristic_error(s.image, aei, identity).abs().mean().item<double>());
  return scores;
}

std::vector<size_t> top_fraction_indices(std::span<const double> scores, double fraction) {
  require(fraction > 0 && fraction <= 1, ErrorKind::Config, "subset fraction must lie in (0, 1]");
  require(!scores.empty(), ErrorKind::Data, "cannot select from an empty dataset");
  for (double s : scores) require(std::isfinite(s), ErrorKind::Numeric, "non-finite heuristic error score");
  const size_t n = scores.size();
  // The epsilon keeps products such as 0.1 * 30 from rounding up past an integer.
  const auto k = std::clamp<size_t>(static_cast<size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)), 1, n);
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  return order;
}

std::vector<size_t> select_top_error_subset(std::span<const FaceSample> data, AEINet& aei, IdentityEncoder& identity,
                                            double fraction) {
  require(fraction > 0 && fraction <= 1, ErrorKind::Config, "subset fraction must lie in (0, 1]");
  const auto scores = heuristic_error_scores(data, aei, identity);
  return top_fraction_indices(scores, fraction);
}

HearBatch sample_hear_batch(std::span<const FaceSample> data, std::span<const OccluderAsset> occluders,
                            const PipelineConfig& config, std::mt19937_64& rng) {
  require(config.batch_size >= 1, ErrorKind::Config, "batch size must be positive");
  std::bernoulli_distribution occlude(occluders.empty() ? 0.0 : config.occlusion.probability);
  std::uniform_int_distribution<size_t> pick(0, occluders.empty() ? 0 : occluders.size() - 1);
  const int s = config.crop_size;
  auto maybe_occlude = [&](const FaceSample& face, torch::Tensor& mask) {
    if (!occlude(rng)) {
      mask = torch::zeros({1, 1, s, s}, torch::kBool);
      return face.image;
    }
    const auto& occ = occluders[pick(rng)];
    const auto xf = sample_occlusion_transform(config.occlusion, s, rng);
    auto r = apply_occlusion(face, occ, xf);
    mask = r.truth_mask;
    return r.occluded.image;
  };

  HearBatch hb;
  std::vector<torch::Tensor> src, tgt, masks;
  std::vector<int64_t> same, occluded;
  for (int i = 0; i < config.batch_size; ++i) {
    const auto p = sample_pair_indices(data.size(), config.p_cross_hear, rng);
    torch::Tensor mask, src_mask;
    tgt.push_back(maybe_occlude(data[p.target], mask));
    src.push_back(config.occlusion.target_only ? data[p.source].image : maybe_occlude(data[p.source], src_mask));
    masks.push_back(mask);
    occluded.push_back(mask.any().item<bool>() ? 1 : 0);
    same.push_back(p.is_same ? 1 : 0);
    hb.pair.source_index.push_back(p.source);
    hb.pair.target_index.push_back(p.target);
  }
  hb.pair.source = torch::cat(src, 0);
  hb.pair.target = torch::cat(tgt, 0);
  hb.pair.is_same = torch::tensor(same).to(torch::kBool);
  hb.occluded = torch::tensor(occluded).to(torch::kBool);
  hb.truth_mask = torch::cat(masks, 0);
  return hb;
}

HEARTrainer::HEARTrainer(const PipelineConfig& config, AEINet aei, std::shared_ptr<IdentityEncoder> identity,
                         std::vector<OccluderAsset> occluders)
    : config_(config), aei_(std::move(aei)), identity_(std::move(identity)), occluders_(std::move(occluders)),
      rng_(config.seed + 1) {
  config_.validate();
  require(identity_ != nullptr, ErrorKind::Config, "HEAR-Net training needs an identity encoder");
  freeze(*aei_);
  freeze(identity_->module());
  torch::manual_seed(config_.seed + 1);
  hear_ = HEARNet(config_);
  opt_ = std::make_unique<torch::optim::Adam>(hear_->parameters(), adam_options(config_.adam));
}

json HEARTrainer::step(const HearBatch& batch) {
  hear_->train();
  aei_->eval();
  const auto& p = batch.pair;
  torch::Tensor y_hat, delta;
  {
    torch::NoGradGuard no_grad;
    y_hat = aei_->forward(encode_identity(p.source, *identity_), p.target).image;
    delta = heuristic_error(p.target, aei_, *identity_);
  }
  const auto y = hear_->forward(y_hat, delta);
  const auto parts = hear_losses(y, y_hat, p.target, p.source, p.is_same, *identity_, config_.hear_reduction);
  opt_->zero_grad();
  parts.total.backward();
  opt_->step();
  ++step_;
  return {{"stage", "hear"},
          {"step", step_},
          {"total", parts.total.item<double>()},
          {"id", parts.id.item<double>()},
          {"chg", parts.chg.item<double>()},
          {"rec", parts.rec.item<double>()},
          {"occluded", batch.occluded.sum().item<int64_t>()},
          {"same", p.same_count()},
          {"batch", p.size()}};
}

json HEARTrainer::step(std::span<const FaceSample> data) {
  return step(sample_hear_batch(data, occluders_, config_, rng_));
}

void HEARTrainer::train(std::span<const FaceSample> data, int64_t until_step, const RunOptions& run) {
  require(!data.empty(), ErrorKind::Data, "HEAR-Net training needs a nonempty dataset");
  MetricsLog log(run.run_dir);
  const int64_t every = run.checkpoint_every > 0 ? run.checkpoint_every : config_.checkpoint_every;
  while (step_ < until_step) {
    const auto m = step(data);
    if (config_.log_every > 0 && step_ % config_.log_every == 0) log.write(m);
    if (run.on_step) run.on_step(m);
    if (!run.run_dir.empty() && (step_ % every == 0 || step_ == until_step))
      write_run_checkpoint(run.run_dir, step_, checkpoint());
  }
}

Archive HEARTrainer::checkpoint() const {
  Archive a;
  a.meta["kind"] = "hear_training";
  a.meta["step"] = step_;
  a.meta["config"] = to_json(config_);
  a.meta["config_hash"] = config_.hash();
  a.meta["rng"] = rng_state(rng_);
  export_module(*hear_, "hear.", a);
  export_adam(*opt_, "optim_hear.", a);
  return a;
}

void HEARTrainer::restore(const Archive& archive) {
  require(archive.meta.value("kind", "") == "hear_training", ErrorKind::Checkpoint,
          "not a HEAR-Net training checkpoint");
  import_module(*hear_, "hear.", archive);
  import_adam(*opt_, "optim_hear.", archive);
  step_ = archive.meta.at("step").get<int64_t>();
  set_rng_state(rng_, archive.meta.at("rng").get<std::string>());
}

HEARNet load_hear_model(const std::string& path) {
  const auto archive = load_archive(resolve_checkpoint(path));
  require(archive.meta.value("kind", "") == "hear_training", ErrorKind::Checkpoint,
          path + " is not a HEAR-Net checkpoint");
  const auto config = config_from_json(archive.meta.at("config"));
  HEARNet net(config);
  import_module(*net, "hear.", archive);
  freeze(*net);
  return net;
}

namespace {

struct Replica {
  AEINet net{nullptr};
  MultiScaleDiscriminator disc{nullptr};
};

Replica make_replica(AEINet& net, MultiScaleDiscriminator& disc, const PipelineConfig& config) {
  Replica r;
  r.net = AEINet(config);
  r.disc = MultiScaleDiscriminator(config);
  copy_module_state(*net, *r.net);
  copy_module_state(*disc, *r.disc);
  r.net->train(net->is_training());
  r.disc->train(disc->is_training());
  return r;
}

std::map<std::string, torch::Tensor> named_grads(AEINet& net) {
  std::map<std::string, torch::Tensor> g;
  for (const auto& p : net->named_parameters()) {
    g[p.key()] = p.value().grad().defined() ? p.value().grad().clone() : torch::zeros_like(p.value());
  }
  return g;
}

}  // namespace

ParallelPassResult data_parallel_generator_pass(AEINet& net, MultiScaleDiscriminator& disc, IdentityEncoder& identity,
                                                const PairBatch& batch, const PipelineConfig& config, int workers) {
  require(workers >= 1 && batch.size() % workers == 0, ErrorKind::Config,
          "batch of " + std::to_string(batch.size()) + " does not split evenly over " + std::to_string(workers) +
              " workers");
  std::vector<Replica> replicas;
  for (int w = 0; w < workers; ++w) replicas.push_back(make_replica(net, disc, config));
  AllReduceGroup group(workers);
  std::vector<GeneratorPass> passes(static_cast<size_t>(workers));
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  const int64_t shard = batch.size() / workers;
  std::vector<std::thread> threads;
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        SyncStatsScope scope(group, w);
        auto& r = replicas[static_cast<size_t>(w)];
        passes[static_cast<size_t>(w)] =
            generator_pass(r.net, r.disc, identity, batch.slice(w * shard, (w + 1) * shard), config);
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  ParallelPassResult out;
  std::vector<torch::Tensor> images;
  for (auto& p : passes) {
    images.push_back(p.image.detach());
    out.total += p.total.item<double>() / workers;
  }
  out.image = torch::cat(images, 0);
  for (int w = 0; w < workers; ++w) {
    for (auto& [name, g] : named_grads(replicas[static_cast<size_t>(w)].net)) {
      auto it = out.grads.find(name);
      if (it == out.grads.end())
        out.grads[name] = g / workers;
      else
        it->second.add_(g / workers);
    }
  }
  return out;
}

ParallelPassResult single_worker_generator_pass(AEINet& net, MultiScaleDiscriminator& disc, IdentityEncoder& identity,
                                                const PairBatch& batch, const PipelineConfig& config) {
  auto r = make_replica(net, disc, config);
  auto p = generator_pass(r.net, r.disc, identity, batch, config);
  ParallelPassResult out;
  out.image = p.image.detach();
  out.total = p.total.item<double>();
  out.grads = named_grads(r.net);
  return out;
}

}  // namespace faceshifter
