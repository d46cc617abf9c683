#include "faceshifter/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "faceshifter/ablation.hpp"
#include "faceshifter/error.hpp"
#include "faceshifter/evaluation.hpp"
#include "faceshifter/image_io.hpp"
#include "faceshifter/toy_world.hpp"
#include "faceshifter/training.hpp"

namespace faceshifter {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOptions {
  std::string preset;
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
};

struct DataOptions {
  std::string manifest;
  int toy_count = 100;
  int toy_ids = 8;
  std::optional<uint64_t> toy_seed;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--preset", o.preset, "Starting configuration: full or desk");
  app->add_option("--config", o.config_path, "JSON config file");
  app->add_option("--set", o.overrides, "Override a config field, key=value (repeatable)");
  app->add_option("--seed", o.seed, "Random seed");
}

void add_data(CLI::App* app, DataOptions& d, const std::string& what) {
  app->add_option("--data", d.manifest, what + " manifest (JSONL); a toy corpus is rendered when absent");
  app->add_option("--toy", d.toy_count, "Toy corpus size");
  app->add_option("--toy-ids", d.toy_ids, "Toy corpus identity count");
  app->add_option("--toy-seed", d.toy_seed, "Toy corpus seed");
}

PipelineConfig make_config(const CommonOptions& o) {
  PipelineConfig c = PipelineConfig::full();
  if (o.preset == "desk") c = PipelineConfig::desk();
  else if (!o.preset.empty() && o.preset != "full") fail(ErrorKind::Config, "unknown preset '" + o.preset + "'");
  if (!o.config_path.empty()) c = load_config_file(o.config_path, c);
  for (const auto& s : o.overrides) apply_override(c, s);
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

std::vector<FaceSample> load_faces(const DataOptions& d, const PipelineConfig& c, uint64_t default_seed) {
  if (!d.manifest.empty()) return load_dataset(d.manifest, c.crop_size, c.allow_center_crop_fallback);
  require(d.toy_count >= 1 && d.toy_ids >= 2, ErrorKind::Usage, "toy corpus needs --toy >= 1 and --toy-ids >= 2");
  ToyFaceWorld world(d.toy_ids);
  return world.make_dataset(d.toy_count, d.toy_seed.value_or(default_seed), c.crop_size);
}

std::optional<Landmarks> parse_landmarks(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::vector<double> v;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      v.push_back(std::stod(tok));
    } catch (const std::exception&) {
      fail(ErrorKind::Usage, "bad landmark value '" + tok + "'");
    }
  }
  require(v.size() == 10, ErrorKind::Usage, "landmarks need 10 comma-separated numbers");
  Landmarks l;
  for (size_t i = 0; i < 5; ++i) l[i] = {v[2 * i], v[2 * i + 1]};
  return l;
}

// Reads a PNG face. Images already at crop size are used as they are unless landmarks are given.
FaceSample read_face(const std::string& path, const std::string& landmarks, const PipelineConfig& c) {
  require(fs::is_regular_file(path), ErrorKind::Data, "cannot read image " + path);
  const auto pixels = read_png(path);
  const auto lm = parse_landmarks(landmarks);
  if (!lm && pixels.size(0) == c.crop_size && pixels.size(1) == c.crop_size) {
    FaceSample f;
    f.image = bytes_to_signed(pixels.slice(2, 0, 3));
    f.source_id = fs::path(path).stem().string();
    return f;
  }
  return align_and_crop(pixels, lm, c.crop_size, c.allow_center_crop_fallback, fs::path(path).stem().string());
}

void write_image(const std::string& path, const torch::Tensor& image) {
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  write_png(path, signed_to_bytes(image));
}

std::vector<OccluderAsset> occluders_from(const std::string& dir, int toy_count, uint64_t seed) {
  if (!dir.empty()) {
    auto occ = load_occluders(dir);
    require(!occ.empty(), ErrorKind::Data, "no occluder images under " + dir);
    return occ;
  }
  return make_toy_occluders(toy_count, seed);
}

std::string with_suffix(const std::string& path, const std::string& suffix) {
  const fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix + p.extension().string())).string();
}

torch::Tensor occluder_bytes(const OccluderAsset& a) {
  const auto rgb = a.rgba.slice(0, 0, 3).add(1.0).mul(127.5);
  const auto alpha = a.rgba.slice(0, 3, 4).mul(255.0);
  return torch::cat({rgb, alpha}, 0).round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
}

// --- subcommands ---------------------------------------------------------------------

int cmd_train_aei(const CommonOptions& co, const DataOptions& d, const std::string& run_dir,
                  std::optional<int64_t> steps, std::ostream& out) {
  auto c = make_config(co);
  std::unique_ptr<AEITrainer> trainer;
  const bool resumable = fs::exists(fs::path(run_dir) / "latest");
  if (resumable) {
    trainer = AEITrainer::resume(run_dir);
    out << "resuming from step " << trainer->step_count() << "\n";
    c = trainer->config();
  }
  const auto faces = load_faces(d, c, 1);
  if (!trainer) {
    auto identity = make_identity_encoder(c.identity_encoder, faces, toy_identity_options(c), c.id_dim);
    trainer = std::make_unique<AEITrainer>(c, identity);
  }
  RunOptions run;
  run.run_dir = run_dir;
  json last;
  run.on_step = [&](const json& m) { last = m; };
  trainer->train(faces, steps.value_or(c.steps_aei), run);
  out << last.dump() << "\n";
  return 0;
}

int cmd_train_hear(const CommonOptions& co, const DataOptions& d, const std::string& aei_path,
                   const std::string& run_dir, const std::string& occluder_dir, std::optional<int64_t> steps,
                   std::ostream& out) {
  auto model = load_aei_model(aei_path);
  auto c = model.config;
  // Stage-two settings come from the command line; the architecture of stage one is fixed.
  if (!co.config_path.empty() || !co.overrides.empty() || co.seed || !co.preset.empty()) {
    auto cmd = make_config(co);
    cmd.crop_size = c.crop_size;
    cmd.n_attr_levels = c.n_attr_levels;
    cmd.attr_channels = c.attr_channels;
    cmd.gen_channels = c.gen_channels;
    cmd.id_dim = c.id_dim;
    cmd.integration = c.integration;
    cmd.norm = c.norm;
    cmd.per_channel_mask = c.per_channel_mask;
    cmd.validate();
    c = cmd;
  }
  const auto faces = load_faces(d, c, 1);
  const auto subset_idx = select_top_error_subset(faces, model.net, *model.identity, c.hear_top_fraction);
  std::vector<FaceSample> subset;
  json chosen = json::array();
  for (auto i : subset_idx) {
    subset.push_back(faces[i]);
    chosen.push_back(i);
  }
  fs::create_directories(run_dir);
  std::ofstream(fs::path(run_dir) / "subset.json") << chosen.dump() << "\n";

  HEARTrainer trainer(c, model.net, model.identity, occluders_from(occluder_dir, 64, c.seed + 3));
  const auto latest = fs::path(run_dir) / "latest";
  if (fs::exists(latest)) {
    trainer.restore(load_archive(resolve_checkpoint(run_dir)));
    out << "resuming from step " << trainer.step_count() << "\n";
  }
  RunOptions run;
  run.run_dir = run_dir;
  json last;
  run.on_step = [&](const json& m) { last = m; };
  trainer.train(subset, steps.value_or(c.steps_hear), run);
  out << last.dump() << "\n";
  return 0;
}

torch::Tensor stage_two(AEIModel& model, const std::string& hear_path, const torch::Tensor& y_hat,
                        const torch::Tensor& target) {
  if (hear_path.empty()) return y_hat;
  auto hear = load_hear_model(hear_path);
  torch::NoGradGuard no_grad;
  return hear->forward(y_hat, heuristic_error(target, model.net, *model.identity));
}

int cmd_swap(const CommonOptions& co, const std::string& src, const std::string& tgt, const std::string& src_lm,
             const std::string& tgt_lm, const std::string& aei_path, const std::string& hear_path,
             const std::string& out_path, std::ostream& out) {
  auto model = load_aei_model(aei_path);
  (void)co;
  const auto s = read_face(src, src_lm, model.config);
  const auto t = read_face(tgt, tgt_lm, model.config);
  const auto y_hat = model.swap(s.image, t.image);
  const auto y = stage_two(model, hear_path, y_hat, t.image);
  write_image(out_path, y);
  json r{{"out", out_path}, {"stage", hear_path.empty() ? 1 : 2}};
  if (src == tgt) r["psnr"] = psnr(y, t.image);
  out << r.dump() << "\n";
  return 0;
}

int cmd_reconstruct(const std::string& image, const std::string& lm, const std::string& aei_path,
                    const std::string& out_path, std::string heat_path, std::ostream& out) {
  auto model = load_aei_model(aei_path);
  const auto x = read_face(image, lm, model.config);
  const auto delta = heuristic_error(x.image, model.net, *model.identity);
  const auto recon = x.image - delta;
  write_image(out_path, recon);
  if (heat_path.empty()) heat_path = with_suffix(out_path, "_error");
  write_image(heat_path, heat_map(delta.abs().mean(1)[0], 1.0));
  out << json{{"out", out_path}, {"heat", heat_path}, {"psnr", psnr(recon, x.image)},
              {"mean_abs_error", delta.abs().mean().item<double>()}}
             .dump()
      << "\n";
  return 0;
}

int cmd_visualize_masks(const std::string& src, const std::string& tgt, const std::string& aei_path,
                        const std::string& out_path, std::ostream& out) {
  auto model = load_aei_model(aei_path);
  const auto s = read_face(src, "", model.config);
  const auto t = read_face(tgt, "", model.config);
  const auto masks = extract_masks(model.net, *model.identity, s.image, t.image);
  std::vector<torch::Tensor> tiles{s.image, t.image, model.swap(s.image, t.image)};
  for (const auto& m : masks.masks) tiles.push_back(heat_map(m[0].mean(0), 1.0));
  write_image(out_path, make_grid(tiles, 8));
  out << json{{"out", out_path}, {"masks", masks.size()}}.dump() << "\n";
  return 0;
}

int cmd_query(const CommonOptions& co, const DataOptions& d, const std::string& aei_path, const std::string& query,
              int64_t k, const std::string& out_path, std::ostream& out) {
  (void)co;
  auto model = load_aei_model(aei_path);
  const auto corpus = load_faces(d, model.config, 1);
  const auto q = read_face(query, "", model.config);
  const auto index = AttributeQueryIndex::build(attribute_vectors(model.net->encoder, stack_images(corpus)));
  const auto hits = attribute_query(attribute_vectors(model.net->encoder, q.image), index, k);
  json r = json::array();
  std::vector<torch::Tensor> tiles{q.image};
  for (const auto& h : hits) {
    r.push_back({{"index", h.index}, {"distance", h.distance}, {"identity", corpus[h.index].source_id}});
    tiles.push_back(corpus[h.index].image);
  }
  if (!out_path.empty()) write_image(out_path, make_grid(tiles, static_cast<int>(tiles.size())));
  out << json{{"components", index.basis.size(0)}, {"neighbors", r}}.dump() << "\n";
  return 0;
}

int cmd_augment(const CommonOptions& co, const std::string& image, const std::string& lm,
                const std::string& occluder_dir, const std::string& out_path, std::string mask_path,
                std::ostream& out) {
  const auto c = make_config(co);
  const auto face = read_face(image, lm, c);
  const auto occ = occluders_from(occluder_dir, 16, c.seed + 3);
  std::mt19937_64 rng(c.seed);
  std::uniform_int_distribution<size_t> pick(0, occ.size() - 1);
  const size_t which = pick(rng);
  const auto r = synthesize_occlusion(face, occ[which], rng(), c.occlusion);
  write_image(out_path, r.occluded.image);
  if (mask_path.empty()) mask_path = with_suffix(out_path, "_mask");
  write_image(mask_path, r.truth_mask[0].to(torch::kFloat).mul(2).sub(1).expand({3, -1, -1}));
  out << json{{"out", out_path}, {"mask", mask_path}, {"occluder", which}}.dump() << "\n";
  return 0;
}

int cmd_eval(const CommonOptions& co, const DataOptions& d, const std::string& aei_path, const std::string& hear_path,
             const std::string& gallery_manifest, int64_t pairs, const std::string& out_path, std::ostream& out) {
  (void)co;
  auto model = load_aei_model(aei_path);
  const auto& c = model.config;
  const auto eval_faces = load_faces(d, c, 2);
  DataOptions gd = d;
  gd.manifest = gallery_manifest;
  gd.toy_seed = 3;
  if (gallery_manifest.empty()) gd.toy_count = std::max(d.toy_count, 200);
  const auto gallery = load_faces(gd, c, 3);
  const auto adapter =
      make_identity_encoder(c.eval_identity_encoder, gallery, toy_identity_options(c, true), c.id_dim);
  std::optional<HEARNet> hear;
  if (!hear_path.empty()) hear = load_hear_model(hear_path);
  // Disjoint from the stage-two training occluders (seed + 3).
  const auto occ = make_toy_occluders(32, c.seed + 99);
  const auto report =
      evaluate_model(model, hear ? &*hear : nullptr, gallery, eval_faces, *adapter, pairs, c.seed + 11, occ);
  if (!out_path.empty()) {
    if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
    std::ofstream(out_path) << report.dump(2) << "\n";
  }
  out << report.dump() << "\n";
  return 0;
}

int cmd_make_corpus(const CommonOptions& co, const DataOptions& d, const std::string& dir, int occluders,
                    std::ostream& out) {
  const auto c = make_config(co);
  ToyFaceWorld world(d.toy_ids);
  std::mt19937_64 rng(d.toy_seed.value_or(1));
  const int raw = c.crop_size + c.crop_size / 4;
  fs::create_directories(fs::path(dir) / "images");
  std::vector<ManifestRecord> records;
  for (int j = 0; j < d.toy_count; ++j) {
    const int id = j % world.num_identities();
    const auto r = world.render(id, world.sample_attributes(rng), c.crop_size, raw);
    char name[32];
    std::snprintf(name, sizeof name, "images/%05d.png", j);
    write_png((fs::path(dir) / name).string(), r.pixels);
    records.push_back({name, r.landmarks, ToyFaceWorld::label(id)});
  }
  write_manifest((fs::path(dir) / "manifest.jsonl").string(), records);
  const auto occ = make_toy_occluders(occluders, c.seed + 3);
  for (size_t i = 0; i < occ.size(); ++i) {
    const auto sub = occ[i].category == OccluderCategory::HandPhoto ? "hands" : "objects";
    fs::create_directories(fs::path(dir) / "occluders" / sub);
    char name[32];
    std::snprintf(name, sizeof name, "%03zu.png", i);
    write_png((fs::path(dir) / "occluders" / sub / name).string(), occluder_bytes(occ[i]));
  }
  out << json{{"manifest", (fs::path(dir) / "manifest.jsonl").string()}, {"images", records.size()},
              {"occluders", occ.size()}}
             .dump()
      << "\n";
  return 0;
}

int cmd_ablate(const CommonOptions& co, const DataOptions& d, const std::vector<std::string>& mode_names,
               int64_t steps, int64_t pairs, const std::string& run_dir, std::ostream& out) {
  const auto c = make_config(co);
  std::vector<IntegrationMode> modes;
  for (const auto& m : mode_names) modes.push_back(parse_integration_mode(m));
  const auto train = load_faces(d, c, 1);
  DataOptions ed = d;
  ed.manifest.clear();
  ed.toy_seed = 2;
  const auto eval = d.manifest.empty() ? load_faces(ed, c, 2) : train;
  auto identity = make_identity_encoder(c.identity_encoder, train, toy_identity_options(c), c.id_dim);
  AblationOptions opt;
  opt.steps = steps;
  opt.eval_pairs = pairs;
  opt.run_dir = run_dir;
  const auto rows = run_ablation(c, modes, train, eval, identity, opt);
  json r = json::array();
  for (const auto& row : rows) r.push_back(to_json(row));
  out << r.dump() << "\n";
  return 0;
}

void print_error(std::ostream& err, int code, const std::string& kind, const std::string& message) {
  err << "error: code=" << code << " kind=" << kind << " message=" << json(message).dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  enable_deterministic_mode();
  CLI::App app{"Two-stage face swapping: AEI-Net synthesis and HEAR-Net occlusion refinement", "faceshifter"};
  app.require_subcommand(1);

  CommonOptions co;
  DataOptions data;
  std::string run_dir, aei, hear, src, tgt, src_lm, tgt_lm, image, lm, out_path, heat, occ_dir, mask_path, gallery;
  std::optional<int64_t> steps;
  int64_t pairs = 200, k = 5, ablate_steps = 5000;
  int occluder_count = 32;
  std::vector<std::string> modes{"aad", "add", "cat", "compressed"};

  auto* train_aei = app.add_subcommand("train-aei", "Train AEI-Net (stage one)");
  add_common(train_aei, co);
  add_data(train_aei, data, "Training");
  train_aei->add_option("--run", run_dir, "Run directory")->required();
  train_aei->add_option("--steps", steps, "Train until this step");

  auto* train_hear = app.add_subcommand("train-hear", "Train HEAR-Net (stage two) on the top heuristic-error subset");
  add_common(train_hear, co);
  add_data(train_hear, data, "Training");
  train_hear->add_option("--aei", aei, "AEI-Net checkpoint or run directory")->required();
  train_hear->add_option("--run", run_dir, "Run directory")->required();
  train_hear->add_option("--occluders", occ_dir, "Directory of RGBA occluder PNGs; toy occluders when absent");
  train_hear->add_option("--steps", steps, "Train until this step");

  auto* swap = app.add_subcommand("swap", "Swap the source identity onto the target");
  add_common(swap, co);
  swap->add_option("--source", src, "Source face PNG")->required();
  swap->add_option("--target", tgt, "Target face PNG")->required();
  swap->add_option("--source-landmarks", src_lm, "x1,y1,...,x5,y5");
  swap->add_option("--target-landmarks", tgt_lm, "x1,y1,...,x5,y5");
  swap->add_option("--aei", aei, "AEI-Net checkpoint or run directory")->required();
  swap->add_option("--hear", hear, "HEAR-Net checkpoint or run directory");
  swap->add_option("--out", out_path, "Output PNG")->required();

  auto* reconstruct = app.add_subcommand("reconstruct", "Write AEI(X, X) and the heuristic error heat map");
  add_common(reconstruct, co);
  reconstruct->add_option("--image", image, "Face PNG")->required();
  reconstruct->add_option("--landmarks", lm, "x1,y1,...,x5,y5");
  reconstruct->add_option("--aei", aei, "AEI-Net checkpoint or run directory")->required();
  reconstruct->add_option("--out", out_path, "Output PNG")->required();
  reconstruct->add_option("--heat", heat, "Heat map PNG (default: <out>_error.png)");

  auto* eval = app.add_subcommand("eval", "Identity retrieval, pose and expression errors on held-out pairs");
  add_common(eval, co);
  add_data(eval, data, "Evaluation");
  eval->add_option("--aei", aei, "AEI-Net checkpoint or run directory")->required();
  eval->add_option("--hear", hear, "HEAR-Net checkpoint or run directory");
  eval->add_option("--gallery", gallery, "Gallery manifest; a toy gallery when absent");
  eval->add_option("--pairs", pairs, "Number of cross-identity pairs");
  eval->add_option("--out", out_path, "Report JSON");

  auto* vis = app.add_subcommand("visualize-masks", "Grid of the attention masks of every AAD layer");
  add_common(vis, co);
  vis->add_option("--source", src, "Source face PNG")->required();
  vis->add_option("--target", tgt, "Target face PNG")->required();
  vis->add_option("--aei", aei, "AEI-Net checkpoint or run directory")->required();
  vis->add_option("--out", out_path, "Output PNG")->required();

  auto* query = app.add_subcommand("query-attributes", "Nearest corpus faces in attribute-embedding space");
  add_common(query, co);
  add_data(query, data, "Corpus");
  query->add_option("--aei", aei, "AEI-Net checkpoint or run directory")->required();
  query->add_option("--query", image, "Query face PNG")->required();
  query->add_option("--k", k, "Number of neighbours");
  query->add_option("--out", out_path, "Grid PNG of the query and its neighbours");

  auto* augment = app.add_subcommand("augment-occlusions", "Paste a random occluder onto a face");
  add_common(augment, co);
  augment->add_option("--image", image, "Face PNG")->required();
  augment->add_option("--landmarks", lm, "x1,y1,...,x5,y5");
  augment->add_option("--occluders", occ_dir, "Directory of RGBA occluder PNGs; toy occluders when absent");
  augment->add_option("--out", out_path, "Output PNG")->required();
  augment->add_option("--mask", mask_path, "Truth mask PNG (default: <out>_mask.png)");

  auto* corpus = app.add_subcommand("make-corpus", "Render a toy face corpus with manifest and occluders");
  add_common(corpus, co);
  add_data(corpus, data, "Unused");
  corpus->add_option("--out", out_path, "Output directory")->required();
  corpus->add_option("--occluders", occluder_count, "Number of occluders");

  auto* ablate = app.add_subcommand("ablate", "Train and compare integration modes");
  add_common(ablate, co);
  add_data(ablate, data, "Training");
  ablate->add_option("--modes", modes, "Integration modes")->delimiter(',');
  ablate->add_option("--steps", ablate_steps, "Steps per mode");
  ablate->add_option("--pairs", pairs, "Evaluation pairs");
  ablate->add_option("--run", run_dir, "Run directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << app.help();
    print_error(err, static_cast<int>(ErrorKind::Usage), "usage", e.what());
    return static_cast<int>(ErrorKind::Usage);
  }

  try {
    if (*train_aei) return cmd_train_aei(co, data, run_dir, steps, out);
    if (*train_hear) return cmd_train_hear(co, data, aei, run_dir, occ_dir, steps, out);
    if (*swap) return cmd_swap(co, src, tgt, src_lm, tgt_lm, aei, hear, out_path, out);
    if (*reconstruct) return cmd_reconstruct(image, lm, aei, out_path, heat, out);
    if (*eval) return cmd_eval(co, data, aei, hear, gallery, pairs, out_path, out);
    if (*vis) return cmd_visualize_masks(src, tgt, aei, out_path, out);
    if (*query) return cmd_query(co, data, aei, image, k, out_path, out);
    if (*augment) return cmd_augment(co, image, lm, occ_dir, out_path, mask_path, out);
    if (*corpus) return cmd_make_corpus(co, data, out_path, occluder_count, out);
    if (*ablate) return cmd_ablate(co, data, modes, ablate_steps, pairs, run_dir, out);
  } catch (const Error& e) {
    print_error(err, e.exit_code(), to_string(e.kind()), e.what());
    return e.exit_code();
  } catch (const c10::Error& e) {
    print_error(err, static_cast<int>(ErrorKind::Data), "data", e.what_without_backtrace());
    return static_cast<int>(ErrorKind::Data);
  } catch (const std::exception& e) {
    print_error(err, 1, "internal", e.what());
    return 1;
  }
  return 0;
}

}  // namespace faceshifter
