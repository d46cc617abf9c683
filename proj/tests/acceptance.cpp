// End-to-end acceptance run at desk scale. One line per criterion; exit status 1 when any fails.
// Usage: faceshifter_acceptance [work_dir]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "faceshifter/evaluation.hpp"
#include "faceshifter/image_io.hpp"
#include "faceshifter/toy_world.hpp"
#include "faceshifter/training.hpp"

using namespace faceshifter;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Verdict()>& check) {
  const auto t0 = clk::now();
  Verdict v;
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(clk::now() - t0).count();
  if (!v.pass) ++failures;
  char t[32];
  std::snprintf(t, sizeof t, " [%.0fs]", secs);
  std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << id << " " << name << ": " << v.detail << t << std::endl;
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

double run_timed(const std::string& command, int& status) {
  const auto t0 = clk::now();
  status = std::system((command + " > /dev/null 2>&1").c_str());
  return std::chrono::duration<double>(clk::now() - t0).count();
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

torch::Tensor reconstruct_all(AEINet& net, IdentityEncoder& id, const torch::Tensor& x) {
  torch::NoGradGuard ng;
  return batched(x, 20, [&](const torch::Tensor& b) { return net->forward(encode_identity(b, id), b).image; });
}

// Ranking oracle: each score from its own forward pass, then repeated selection of the
// largest remaining score with the lowest index winning ties.
std::vector<size_t> brute_force_top(std::span<const FaceSample> data, AEINet& net, IdentityEncoder& id, double fraction) {
  torch::NoGradGuard ng;
  std::vector<double> score;
  for (const auto& s : data) {
    const auto recon = net->forward(encode_identity(s.image, id), s.image).image;
    score.push_back((s.image - recon).abs().mean().item<double>());
  }
  const size_t k = static_cast<size_t>(std::llround(std::ceil(fraction * data.size() - 1e-9)));
  std::vector<bool> taken(data.size(), false);
  std::vector<size_t> out;
  for (size_t r = 0; r < k; ++r) {
    size_t best = data.size();
    for (size_t i = 0; i < data.size(); ++i)
      if (!taken[i] && (best == data.size() || score[i] > score[best])) best = i;
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

bool same_parameters(torch::nn::Module& a, torch::nn::Module& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  for (const auto& p : pa)
    if (!p.value().equal(pb[p.key()])) return false;
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_work";
  fs::create_directories(work);
  if (!std::getenv("FACESWAP_CACHE")) setenv("FACESWAP_CACHE", (work / "cache").c_str(), 1);
  enable_deterministic_mode();

  const auto c = PipelineConfig::desk();
  ToyFaceWorld world(8);
  const auto train = world.make_dataset(100, 1, c.crop_size);
  const auto held = world.make_dataset(200, 2, c.crop_size);
  const auto gallery = world.make_dataset(200, 3, c.crop_size);

  report(1, "unit suite", [] {
    int status = 0;
    const double t = run_timed(FACESHIFTER_UNIT_TESTS, status);
    return Verdict{status == 0 && t < 60, "exit=" + std::to_string(status) + " time=" + fmt(t, 3) + "s (< 60s)"};
  });
  report(2, "gradient checks", [] {
    int status = 0;
    const double t = run_timed(FACESHIFTER_GRADCHECK, status);
    return Verdict{status == 0 && t < 120, "exit=" + std::to_string(status) + " time=" + fmt(t, 3) + "s (< 120s)"};
  });

  std::shared_ptr<IdentityEncoder> identity;
  std::unique_ptr<AEITrainer> trainer;
  const auto aei_ckpt = (work / "aei.ckpt").string();
  report(3, "reconstruction overfit", [&] {
    identity = make_identity_encoder("toy", train, toy_identity_options(c), c.id_dim);
    trainer = std::make_unique<AEITrainer>(c, identity);
    trainer->train(train, c.steps_aei);
    trainer->save(aei_ckpt);
    trainer->net()->eval();
    const auto x = stack_images(train);
    const double p = psnr(reconstruct_all(trainer->net(), *identity, x), x);
    return Verdict{p >= 22, "psnr=" + fmt(p) + "dB after " + std::to_string(c.steps_aei) + " steps (>= 22)"};
  });
  const bool trained = trainer != nullptr && trainer->step_count() == c.steps_aei;
  auto need_model = [&] {
    if (!trained) throw std::runtime_error("stage-one training did not complete");
  };

  report(4, "identity trend", [&] {
    need_model();
    auto adapter = make_identity_encoder("toy", gallery, toy_identity_options(c, true), c.id_dim);
    const auto cp = make_cross_pairs(held, 200, 11);
    torch::NoGradGuard ng;
    const auto y = batched(torch::arange(cp.size()), 20, [&](const torch::Tensor& idx) {
      const auto s = cp.sources.index_select(0, idx), t = cp.targets.index_select(0, idx);
      return trainer->net()->forward(encode_identity(s, *identity), t).image;
    });
    const auto tr = identity_trend(y, cp, *adapter);
    return Verdict{tr.cos_source > tr.cos_target,
                   "cos_source=" + fmt(tr.cos_source) + " cos_target=" + fmt(tr.cos_target) + " over 200 pairs"};
  });

  const auto eval_occluders = make_toy_occluders(32, 99);
  report(5, "heuristic error localization", [&] {
    need_model();
    const auto probe = make_occlusion_probe(held, eval_occluders, 50, 21, c.occlusion);
    const auto l = heuristic_error_localization(probe, trainer->net(), *identity);
    return Verdict{l.ratio() >= 1.5, "inside=" + fmt(l.inside) + " outside=" + fmt(l.outside) +
                                         " ratio=" + fmt(l.ratio()) + " (>= 1.5)"};
  });

  report(6, "HEAR-Net recovery", [&] {
    need_model();
    const auto subset_idx = select_top_error_subset(train, trainer->net(), *identity, c.hear_top_fraction);
    std::vector<FaceSample> subset;
    for (auto i : subset_idx) subset.push_back(train[i]);
    HEARTrainer hear(c, trainer->net(), identity, make_toy_occluders(64, c.seed + 3));
    hear.train(subset, c.steps_hear);
    hear.net()->eval();
    trainer->net()->eval();
    const auto probe = make_occlusion_probe(held, eval_occluders, 100, 31, c.occlusion);
    const auto r = occlusion_recovery(probe, trainer->net(), hear.net(), *identity);
    return Verdict{r.err_stage2 < r.err_stage1, "err_stage1=" + fmt(r.err_stage1) + " err_stage2=" + fmt(r.err_stage2) +
                                                    " on 100 occluded targets, subset=" +
                                                    std::to_string(subset.size())};
  });

  report(7, "top-10% selection", [&] {
    need_model();
    trainer->net()->eval();
    const auto probe = world.make_dataset(200, 4, c.crop_size);
    const auto got = select_top_error_subset(probe, trainer->net(), *identity, 0.10);
    const auto want = brute_force_top(probe, trainer->net(), *identity, 0.10);
    return Verdict{got == want, "selected=" + std::to_string(got.size()) + " oracle=" + std::to_string(want.size()) +
                                    (got == want ? " identical" : " differ")};
  });

  report(8, "determinism and persistence", [&] {
    need_model();
    auto trace = [&](AEITrainer& t, int64_t until) {
      std::vector<std::string> lines;
      RunOptions ro;
      ro.on_step = [&](const nlohmann::json& m) { lines.push_back(m.dump()); };
      t.train(train, until, ro);
      return lines;
    };
    AEITrainer a(c, identity), b(c, identity);
    const bool traces = trace(a, 100) == trace(b, 100);
    const auto mid = (work / "det100.ckpt").string();
    a.save(mid);
    const auto cont = trace(a, 110);
    auto resumed = AEITrainer::resume(mid);
    const bool resume = trace(*resumed, 110) == cont && same_parameters(*a.net(), *resumed->net());

    write_png((work / "src.png").string(), signed_to_bytes(held[0].image));
    write_png((work / "tgt.png").string(), signed_to_bytes(held[1].image));
    auto swap = [&](const std::string& out) {
      const std::string cmd = std::string(FACESHIFTER_CLI) + " swap --aei " + aei_ckpt + " --source " +
                              (work / "src.png").string() + " --target " + (work / "tgt.png").string() + " --out " +
                              (work / out).string() + " > /dev/null 2>&1";
      return std::system(cmd.c_str());
    };
    const int s1 = swap("swap1.png"), s2 = swap("swap2.png");
    const auto b1 = read_bytes((work / "swap1.png").string()), b2 = read_bytes((work / "swap2.png").string());
    const bool cli = s1 == 0 && s2 == 0 && !b1.empty() && b1 == b2;
    return Verdict{traces && resume && cli, std::string("100-step traces ") + (traces ? "identical" : "differ") +
                                                ", resume " + (resume ? "identical" : "differs") + ", swap bytes " +
                                                (cli ? "stable" : "unstable")};
  });

  report(9, "synchronized normalization", [&] {
    torch::manual_seed(c.seed);
    auto id = identity ? identity : make_identity_encoder("toy", train, toy_identity_options(c), c.id_dim);
    AEINet net(c);
    MultiScaleDiscriminator disc(c);
    std::mt19937_64 rng(9);
    const auto batch = sample_batch(train, c.batch_size, c.p_cross_aei, rng);
    const auto two = data_parallel_generator_pass(net, disc, *id, batch, c, 2);
    const auto one = single_worker_generator_pass(net, disc, *id, batch, c);
    const double act = (two.image - one.image).abs().max().item<double>();
    double grad = 0;
    for (const auto& [k, g] : one.grads) grad = std::max(grad, (two.grads.at(k) - g).abs().max().item<double>());
    return Verdict{act <= 1e-5, "max activation diff=" + fmt(act, 3) + " (<= 1e-5), max grad diff=" + fmt(grad, 3)};
  });

  report(10, "attribute query", [&] {
    need_model();
    auto& enc = trainer->net()->encoder;
    enc->eval();
    torch::NoGradGuard ng;
    const auto corpus = attribute_vectors(enc, stack_images(train));
    const auto index = AttributeQueryIndex::build(corpus);
    int self_ok = 0;
    for (int64_t i = 0; i < index.size(); ++i) {
      const auto nn = attribute_query(corpus[i], index, 1);
      self_ok += nn[0].index == static_cast<size_t>(i);
    }
    int agree = 0;
    const auto probes = stack_images(std::span(held).subspan(0, 100));
    for (int64_t i = 0; i < 100; i += 10) {
      const auto q = attribute_vectors(enc, probes.slice(0, i, i + 10));
      const auto full = torch::cdist(q, corpus).argmin(1);
      for (int64_t j = 0; j < q.size(0); ++j)
        agree += attribute_query(q[j], index, 1)[0].index == static_cast<size_t>(full[j].item<int64_t>());
    }
    return Verdict{self_ok == index.size() && agree >= 90,
                   "self rank-1 " + std::to_string(self_ok) + "/" + std::to_string(index.size()) + ", PCA top-1 agrees " +
                       std::to_string(agree) + "/100 (>= 90), K=" + std::to_string(index.basis.size(0))};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
