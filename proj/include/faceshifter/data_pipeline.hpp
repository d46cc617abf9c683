#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "faceshifter/config.hpp"

namespace faceshifter {

struct Point2 {
  double x = 0;
  double y = 0;
};

// Left eye, right eye, nose tip, left mouth corner, right mouth corner (image pixel coordinates,
// pixel centres at integer positions).
using Landmarks = std::array<Point2, 5>;

struct FaceSample {
  torch::Tensor image;  // float (1, 3, S, S), values in [-1, 1]
  std::optional<Landmarks> landmarks;
  std::string source_id;
};

struct TrainingPair {
  FaceSample source;
  FaceSample target;
  bool is_same = false;
};

enum class OccluderCategory { HandPhoto, ObjectRender };

struct OccluderAsset {
  torch::Tensor rgba;  // float (4, H, W): RGB in [-1, 1], alpha in [0, 1]
  OccluderCategory category = OccluderCategory::ObjectRender;
};

// Similarity transform x' = a*x - b*y + tx, y' = b*x + a*y + ty.
struct Similarity {
  double a = 1, b = 0, tx = 0, ty = 0;

  Point2 apply(Point2 p) const { return {a * p.x - b * p.y + tx, b * p.x + a * p.y + ty}; }
  Similarity inverse() const;
  Similarity then(const Similarity& next) const;  // next(this(p))
  static Similarity from(double angle_rad, double scale, double tx, double ty);
};

// Five-point ArcFace 112x112 template rescaled to `crop_size`.
Landmarks template_landmarks(int crop_size);

// Least-squares similarity mapping `src` onto `dst`. Throws Error(Data) for coincident or
// collinear landmark sets.
Similarity estimate_similarity(const Landmarks& src, const Landmarks& dst);

// Resamples a float (C, H, W) image through the inverse of `src_to_dst` into an
// (C, out_h, out_w) image. Bilinear, edge-replicating.
torch::Tensor warp_similarity(const torch::Tensor& image, const Similarity& src_to_dst, int out_h, int out_w);

// `raw` is uint8 (H, W, 3|4) pixels or a float (1, 3, H, W) / (3, H, W) image in [-1, 1].
FaceSample align_and_crop(const torch::Tensor& raw, const std::optional<Landmarks>& landmarks, int crop_size,
                          bool allow_center_crop_fallback = false, std::string source_id = {});

// Builds an asset from uint8 RGBA pixels, validating the alpha support.
OccluderAsset make_occluder(const torch::Tensor& rgba_pixels, OccluderCategory category);

struct OcclusionTransform {
  double angle_deg = 0;
  double scale = 1;  // occluder longest side, as a fraction of the crop width
  double center_x = 0;
  double center_y = 0;
  double color_strength = 0;
};

struct OcclusionResult {
  FaceSample occluded;
  torch::Tensor truth_mask;  // bool (1, 1, S, S); evaluation only
};

OcclusionTransform sample_occlusion_transform(const OcclusionSettings& settings, int crop_size, std::mt19937_64& rng);

// Rotates, rescales, colour-matches and alpha-blends `occluder` onto `face`.
OcclusionResult apply_occlusion(const FaceSample& face, const OccluderAsset& occluder, const OcclusionTransform& xf);

OcclusionResult synthesize_occlusion(const FaceSample& face, const OccluderAsset& occluder, uint64_t rng_seed,
                                     const OcclusionSettings& settings = {});

// A cross pair (probability p_cross) uses two distinct images, a same pair one image twice.
struct PairIndices {
  size_t source = 0;
  size_t target = 0;
  bool is_same = true;
};
PairIndices sample_pair_indices(size_t dataset_size, double p_cross, std::mt19937_64& rng);

TrainingPair sample_pair(std::span<const FaceSample> dataset, double p_cross, std::mt19937_64& rng);
TrainingPair sample_pair(std::span<const FaceSample> dataset, double p_cross, uint64_t rng_seed);

// Line-delimited JSON manifest: {"path": ..., "landmarks": [10 floats], "identity": ...} per line.
struct ManifestRecord {
  std::string path;
  std::optional<Landmarks> landmarks;
  std::string identity;
};

std::vector<ManifestRecord> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records);

// Loads and aligns every record; relative paths resolve against the manifest directory.
std::vector<FaceSample> load_dataset(const std::string& manifest_path, int crop_size,
                                     bool allow_center_crop_fallback = false);

// Every *.png under `dir` (recursive, sorted). Files below a directory whose name contains
// "hand" are tagged HandPhoto.
std::vector<OccluderAsset> load_occluders(const std::string& dir);

// Stacks sample images into an (N, 3, S, S) batch.
torch::Tensor stack_images(std::span<const FaceSample> samples);

}  // namespace faceshifter
