#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "faceshifter/config.hpp"
#include "faceshifter/data_pipeline.hpp"
#include "faceshifter/encoders.hpp"

namespace faceshifter {

struct AblationOptions {
  int64_t steps = 5000;
  int64_t eval_pairs = 16;
  uint64_t eval_seed = 77;
  std::string run_dir;  // report and grids go to {run_dir}/ablation/ when set
};

struct AblationRow {
  IntegrationMode mode = IntegrationMode::AAD;
  bool diverged = false;
  std::string error;
  double psnr_same = 0;  // reconstruction of the evaluation faces
  double id_loss = 0;    // mean 1 - cos on the cross pairs
  double att_loss = 0;   // mean attribute loss on the cross pairs
  std::string grid_path;
};

nlohmann::json to_json(const AblationRow& row);

// Trains one AEI-Net per integration mode from the same seed and data order, then evaluates
// all of them on one frozen list of held-out pairs. A diverging mode is reported, not fatal.
std::vector<AblationRow> run_ablation(const PipelineConfig& base, std::span<const IntegrationMode> modes,
                                      std::span<const FaceSample> train, std::span<const FaceSample> eval,
                                      std::shared_ptr<IdentityEncoder> identity, const AblationOptions& options);

}  // namespace faceshifter
