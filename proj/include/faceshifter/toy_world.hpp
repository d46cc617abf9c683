#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "faceshifter/data_pipeline.hpp"

namespace faceshifter {

// Procedural stand-in for a face corpus. Each identity fixes colours and facial geometry;
// each rendered image draws pose, expression, lighting and background independently.
using Rgb = std::array<double, 3>;  // components in [0, 1]

struct ToyIdentity {
  Rgb skin, hair, iris, lips;
  double face_width = 0.36;   // ellipse semi-axes, in crop units
  double face_height = 0.44;
  double eye_gap = 1.0;       // multiplier on the template eye distance
  double eye_radius = 0.045;
  double mouth_width = 1.0;
  double hairline = 0.25;
};

struct ToyAttributes {
  double roll_deg = 0;       // in-plane rotation of the head in the raw frame
  double scale = 1;
  double shift_x = 0, shift_y = 0;  // raw-frame offset, crop units
  double yaw = 0;            // horizontal shift of the inner features, crop units
  double mouth_open = 0;     // [0, 1]
  double brow_raise = 0;     // crop units
  double eye_open = 1;       // [0.3, 1]
  double light_angle = 0;
  double light_strength = 0;
  Rgb background_a{}, background_b{};
  double background_angle = 0;
};

struct RenderedFace {
  torch::Tensor pixels;  // uint8 (raw, raw, 3)
  Landmarks landmarks;
};

class ToyFaceWorld {
 public:
  explicit ToyFaceWorld(int num_identities = 8, uint64_t seed = 2019);

  int num_identities() const { return static_cast<int>(identities_.size()); }
  const ToyIdentity& identity(int i) const { return identities_.at(i); }
  static std::string label(int i) { return "id" + std::to_string(i); }

  ToyAttributes sample_attributes(std::mt19937_64& rng) const;

  // Renders into a raw square canvas of `raw_size` pixels; the face occupies roughly
  // `crop_size` pixels before the attribute placement is applied.
  RenderedFace render(int identity, const ToyAttributes& attrs, int crop_size, int raw_size) const;

  // `count` aligned images; image j shows identity j mod num_identities().
  std::vector<FaceSample> make_dataset(int count, uint64_t seed, int crop_size) const;

 private:
  std::vector<ToyIdentity> identities_;
};

// Textured RGBA occluders: alternating hand-like silhouettes and geometric objects.
std::vector<OccluderAsset> make_toy_occluders(int count, uint64_t seed, int size = 48);

// uint8 (size, size, 4) pixels for one occluder, as written to disk.
torch::Tensor render_toy_occluder(int index, uint64_t seed, int size);

}  // namespace faceshifter
