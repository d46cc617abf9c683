#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "faceshifter/aad.hpp"
#include "faceshifter/data_pipeline.hpp"
#include "faceshifter/encoders.hpp"
#include "faceshifter/hear.hpp"
#include "faceshifter/training.hpp"

namespace faceshifter {

struct RetrievalGallery {
  torch::Tensor embeddings;  // (G, C), unit rows
  std::vector<std::string> labels;

  static RetrievalGallery from_embeddings(const torch::Tensor& embeddings, std::vector<std::string> labels);
  static RetrievalGallery build(std::span<const FaceSample> faces, IdentityEncoder& adapter);
};

// Fraction of queries whose most cosine-similar gallery row carries the true label.
double id_retrieval_embeddings(const torch::Tensor& queries, std::span<const std::string> true_labels,
                               const RetrievalGallery& gallery);
double id_retrieval(const torch::Tensor& swapped, std::span<const std::string> true_labels,
                    const RetrievalGallery& gallery, IdentityEncoder& eval_adapter);

// Proxy estimators map one (1, 3, S, S) image to a vector, or nothing when they cannot.
class VectorProxy {
 public:
  virtual ~VectorProxy() = default;
  virtual std::optional<std::vector<double>> estimate(const torch::Tensor& image) const = 0;
};

// In-plane head angle in degrees: orientation of the major axis of the foreground blob
// (pixels far from the background, which is interpolated from the four corners), measured
// from vertical. Declines nearly isotropic blobs.
class MaskAxisPose final : public VectorProxy {
 public:
  std::optional<std::vector<double>> estimate(const torch::Tensor& image) const override;
  double threshold = 0.3;
  double min_elongation = 1.05;
};

// Row luminance profiles of the eye and mouth bands, each centred on its median.
class BandProfileExpression final : public VectorProxy {
 public:
  std::optional<std::vector<double>> estimate(const torch::Tensor& image) const override;
  int bins = 8;
};

struct ProxyError {
  double mean = 0;       // mean L2 distance over the evaluated samples
  double skip_rate = 0;  // fraction of samples where either estimate failed
  int64_t evaluated = 0;
};

ProxyError proxy_error(const torch::Tensor& swapped, const torch::Tensor& targets, const VectorProxy& proxy);

// PCA index over attribute embeddings: each level bilinearly upsampled to the crop size,
// flattened and concatenated.
torch::Tensor attribute_vectors(AttributeEncoder& encoder, const torch::Tensor& images);

struct AttributeQueryIndex {
  torch::Tensor mean;       // (D)
  torch::Tensor basis;      // (K, D), orthonormal rows
  torch::Tensor projected;  // (N, K)

  // K = min(max_components, numerical rank of the centred corpus).
  static AttributeQueryIndex build(const torch::Tensor& corpus_vectors, int64_t max_components = 512);
  torch::Tensor project(const torch::Tensor& vectors) const;
  int64_t size() const { return projected.size(0); }
};

struct Neighbor {
  size_t index;
  double distance;
};

// k nearest corpus items to each projected query under L2, nearest first.
std::vector<Neighbor> attribute_query(const torch::Tensor& query_vector, const AttributeQueryIndex& index, int64_t k);

struct RecoveryScore {
  double err_stage1 = 0;
  double err_stage2 = 0;
};

// Mean |image - x_t| over the masked pixels (all channels) of each image, averaged over images.
RecoveryScore occlusion_recovery_score(const torch::Tensor& x_t, const torch::Tensor& y_hat, const torch::Tensor& y,
                                       const torch::Tensor& truth_mask);

struct CrossPairs {
  torch::Tensor sources, targets;
  std::vector<std::string> source_labels, target_labels;
  size_t size() const { return source_labels.size(); }
};

// `count` pairs of images with different identities, drawn with a fixed seed.
CrossPairs make_cross_pairs(std::span<const FaceSample> data, int64_t count, uint64_t seed);

struct IdentityTrend {
  double cos_source = 0;  // mean cos(z(y_hat), z(x_s))
  double cos_target = 0;  // mean cos(z(y_hat), z(x_t))
};
IdentityTrend identity_trend(const torch::Tensor& swapped, const CrossPairs& pairs, IdentityEncoder& adapter);

// Cross-identity pairs whose targets carry a synthetic occluder.
struct OcclusionProbe {
  torch::Tensor sources, targets, clean_targets;
  torch::Tensor masks;  // bool (N, 1, S, S)
};
OcclusionProbe make_occlusion_probe(std::span<const FaceSample> data, std::span<const OccluderAsset> occluders,
                                    int64_t count, uint64_t seed, const OcclusionSettings& settings);

struct Localization {
  double inside = 0;   // mean |delta| over occluded pixels, averaged over images
  double outside = 0;  // same over the remaining pixels
  double ratio() const { return inside / outside; }
};
Localization heuristic_error_localization(const OcclusionProbe& probe, AEINet& aei, IdentityEncoder& identity);

// Stage-one swaps and stage-two refinements of the probe pairs, scored inside the masks.
RecoveryScore occlusion_recovery(const OcclusionProbe& probe, AEINet& aei, HEARNet& hear, IdentityEncoder& identity);

// Runs `fn` over `images` in chunks of `chunk` rows and concatenates the results.
torch::Tensor batched(const torch::Tensor& images, int64_t chunk,
                      const std::function<torch::Tensor(const torch::Tensor&)>& fn);

// Full metric report for a stage-one model (and optionally stage two) on held-out data.
// With occluders, adds heuristic-error localization and, given `hear`, occlusion recovery.
nlohmann::json evaluate_model(AEIModel& model, HEARNet* hear, std::span<const FaceSample> gallery_faces,
                              std::span<const FaceSample> eval_faces, IdentityEncoder& eval_adapter, int64_t pairs,
                              uint64_t seed, std::span<const OccluderAsset> occluders = {});

}  // namespace faceshifter
