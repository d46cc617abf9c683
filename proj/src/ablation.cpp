#include "faceshifter/ablation.hpp"

#include <filesystem>
#include <fstream>

#include "faceshifter/error.hpp"
#include "faceshifter/evaluation.hpp"
#include "faceshifter/image_io.hpp"
#include "faceshifter/losses.hpp"
#include "faceshifter/training.hpp"

namespace faceshifter {

namespace fs = std::filesystem;

nlohmann::json to_json(const AblationRow& row) {
  nlohmann::json j{{"mode", to_string(row.mode)}, {"diverged", row.diverged}};
  if (row.diverged) {
    j["error"] = row.error;
  } else {
    j["psnr_same"] = row.psnr_same;
    j["id_loss"] = row.id_loss;
    j["att_loss"] = row.att_loss;
  }
  if (!row.grid_path.empty()) j["grid"] = row.grid_path;
  return j;
}

std::vector<AblationRow> run_ablation(const PipelineConfig& base, std::span<const IntegrationMode> modes,
                                      std::span<const FaceSample> train, std::span<const FaceSample> eval,
                                      std::shared_ptr<IdentityEncoder> identity, const AblationOptions& options) {
  require(!modes.empty(), ErrorKind::Config, "ablation needs at least one mode");
  require(!eval.empty(), ErrorKind::Data, "ablation needs evaluation faces");
  const auto pairs = make_cross_pairs(eval, options.eval_pairs, options.eval_seed);
  const auto faces = stack_images(eval);
  std::string out_dir;
  if (!options.run_dir.empty()) {
    out_dir = (fs::path(options.run_dir) / "ablation").string();
    fs::create_directories(out_dir);
  }

  std::vector<AblationRow> rows;
  for (const auto mode : modes) {
    AblationRow row;
    row.mode = mode;
    auto config = base;
    config.integration = mode;
    try {
      AEITrainer trainer(config, identity);
      trainer.train(train, options.steps);
      auto& net = trainer.net();
      net->eval();
      torch::NoGradGuard no_grad;
      auto run = [&](const torch::Tensor& src, const torch::Tensor& tgt) {
        std::vector<torch::Tensor> out;
        for (int64_t i = 0; i < src.size(0); i += 16) {
          const auto s = src.slice(0, i, i + 16), t = tgt.slice(0, i, i + 16);
          out.push_back(net->forward(encode_identity(s, *identity), t).image);
        }
        return torch::cat(out, 0);
      };
      const auto recon = run(faces, faces);
      const auto y = run(pairs.sources, pairs.targets);
      require_finite(y, "ablation output");
      row.psnr_same = psnr(recon, faces);
      row.id_loss = identity_loss(encode_identity(y, *identity), encode_identity(pairs.sources, *identity)).item<double>();
      row.att_loss =
          attribute_loss(net->encoder->forward(y), net->encoder->forward(pairs.targets), config.reduction).item<double>();
      if (!out_dir.empty()) {
        std::vector<torch::Tensor> tiles;
        for (int64_t i = 0; i < y.size(0); ++i) {
          tiles.push_back(pairs.sources[i]);
          tiles.push_back(pairs.targets[i]);
          tiles.push_back(y[i]);
        }
        row.grid_path = (fs::path(out_dir) / (to_string(mode) + ".png")).string();
        write_png(row.grid_path, signed_to_bytes(make_grid(tiles, 3)));
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric) throw;
      row.diverged = true;
      row.error = e.what();
    }
    rows.push_back(row);
  }

  if (!out_dir.empty()) {
    nlohmann::json report{{"config_hash", base.hash()}, {"steps", options.steps}, {"rows", nlohmann::json::array()}};
    for (const auto& r : rows) report["rows"].push_back(to_json(r));
    std::ofstream(fs::path(out_dir) / "report.json") << report.dump(2) << "\n";
  }
  return rows;
}

}  // namespace faceshifter
