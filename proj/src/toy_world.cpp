#include "faceshifter/toy_world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "faceshifter/error.hpp"

namespace faceshifter {

namespace {

constexpr double kPi = std::numbers::pi;

Rgb hsv(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const int i = static_cast<int>(h);
  const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Rgb scaled(const Rgb& c, double k) { return {c[0] * k, c[1] * k, c[2] * k}; }
Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

bool in_ellipse(double u, double v, double cx, double cy, double ax, double ay) {
  const double du = (u - cx) / ax, dv = (v - cy) / ay;
  return du * du + dv * dv <= 1.0;
}

// Canonical (unit crop) landmark positions for an identity under given attributes.
Landmarks canonical_landmarks(const ToyIdentity& id, const ToyAttributes& at) {
  const double half_gap = 0.1573 * id.eye_gap;
  const double half_mouth = 0.1303 * id.mouth_width;
  return {Point2{0.5 - half_gap + at.yaw, 0.4607}, Point2{0.5 + half_gap + at.yaw, 0.4607},
          Point2{0.5 + at.yaw, 0.6405}, Point2{0.5 - half_mouth + at.yaw, 0.8240},
          Point2{0.5 + half_mouth + at.yaw, 0.8240}};
}

Rgb shade(const ToyIdentity& id, const ToyAttributes& at, const Landmarks& lm, double u, double v) {
  const double ca = std::cos(at.background_angle), sa = std::sin(at.background_angle);
  const double t = std::clamp((u - 0.5) * ca + (v - 0.5) * sa + 0.5, 0.0, 1.0);
  Rgb col = mix(at.background_a, at.background_b, t);

  const double fcx = 0.5, fcy = 0.56;
  if (v < 0.62 && in_ellipse(u, v, fcx, fcy - 0.04, id.face_width + 0.06, id.face_height + 0.06)) col = id.hair;
  if (!in_ellipse(u, v, fcx, fcy, id.face_width, id.face_height)) return col;

  const double light =
      1.0 + at.light_strength * 2.0 * ((u - 0.5) * std::cos(at.light_angle) + (v - fcy) * std::sin(at.light_angle));
  col = scaled(id.skin, light);
  if (v < id.hairline + 0.02 * std::sin(u * 25.0)) return id.hair;

  // Nose.
  if (in_ellipse(u, v, lm[2].x, lm[2].y - 0.035, 0.028, 0.065)) col = scaled(id.skin, 0.8 * light);

  // Brows and eyes.
  for (int e = 0; e < 2; ++e) {
    const double ex = lm[e].x, ey = lm[e].y;
    if (std::abs(u - ex) < 0.065 && std::abs(v - (ey - 0.075 - at.brow_raise)) < 0.013) col = scaled(id.hair, 0.7);
    const double ry = id.eye_radius * at.eye_open;
    if (in_ellipse(u, v, ex, ey, 1.5 * id.eye_radius, ry)) {
      col = {0.95, 0.95, 0.95};
      const double du = u - ex, dv = v - ey;
      const double r2 = du * du + dv * dv;
      if (r2 < std::pow(0.7 * id.eye_radius, 2)) col = id.iris;
      if (r2 < std::pow(0.3 * id.eye_radius, 2)) col = {0.05, 0.05, 0.05};
    }
  }

  // Mouth.
  const double mcx = (lm[3].x + lm[4].x) / 2, mcy = (lm[3].y + lm[4].y) / 2;
  const double mw = (lm[4].x - lm[3].x) / 2;
  const double mh = 0.014 + 0.045 * at.mouth_open;
  if (in_ellipse(u, v, mcx, mcy, mw, mh)) {
    col = scaled(id.lips, light);
    if (at.mouth_open > 0.15 && in_ellipse(u, v, mcx, mcy, 0.8 * mw, mh - 0.012)) col = {0.15, 0.04, 0.05};
  }
  return col;
}

}  // namespace

ToyFaceWorld::ToyFaceWorld(int num_identities, uint64_t seed) {
  require(num_identities >= 1, ErrorKind::Config, "toy world needs at least one identity");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int i = 0; i < num_identities; ++i) {
    ToyIdentity id;
    const double hue = 360.0 * i / num_identities + 20.0 * (u01(rng) - 0.5);
    id.skin = hsv(hue, 0.35 + 0.25 * u01(rng), 0.7 + 0.2 * u01(rng));
    id.hair = hsv(hue + 150 + 60 * u01(rng), 0.5 + 0.4 * u01(rng), 0.15 + 0.45 * u01(rng));
    id.iris = hsv(360 * u01(rng), 0.7 + 0.3 * u01(rng), 0.4 + 0.5 * u01(rng));
    id.lips = hsv(hue - 30 + 20 * u01(rng), 0.6 + 0.3 * u01(rng), 0.45 + 0.3 * u01(rng));
    id.face_width = 0.30 + 0.08 * u01(rng);
    id.face_height = 0.40 + 0.06 * u01(rng);
    id.eye_gap = 0.88 + 0.24 * u01(rng);
    id.eye_radius = 0.035 + 0.02 * u01(rng);
    id.mouth_width = 0.8 + 0.35 * u01(rng);
    id.hairline = 0.18 + 0.12 * u01(rng);
    identities_.push_back(id);
  }
}

ToyAttributes ToyFaceWorld::sample_attributes(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  ToyAttributes a;
  a.roll_deg = range(-12, 12);
  a.scale = range(0.92, 1.08);
  a.shift_x = range(-0.05, 0.05);
  a.shift_y = range(-0.05, 0.05);
  a.yaw = range(-0.05, 0.05);
  a.mouth_open = u01(rng);
  a.brow_raise = range(0, 0.03);
  a.eye_open = range(0.4, 1.0);
  a.light_angle = range(0, 2 * kPi);
  a.light_strength = range(0, 0.35);
  a.background_a = {range(0.05, 0.95), range(0.05, 0.95), range(0.05, 0.95)};
  a.background_b = {range(0.05, 0.95), range(0.05, 0.95), range(0.05, 0.95)};
  a.background_angle = range(0, 2 * kPi);
  return a;
}

RenderedFace ToyFaceWorld::render(int identity_index, const ToyAttributes& at, int crop_size, int raw_size) const {
  const auto& id = identity(identity_index);
  const Landmarks canon = canonical_landmarks(id, at);
  const double S = crop_size;
  // crop-frame pixel -> raw pixel
  const double th = at.roll_deg * kPi / 180.0;
  const Similarity to_crop_center{1, 0, -S / 2, -S / 2};
  const Similarity place = Similarity::from(th, at.scale, raw_size / 2.0 + at.shift_x * S, raw_size / 2.0 + at.shift_y * S);
  const Similarity crop_to_raw = to_crop_center.then(place);
  const Similarity raw_to_crop = crop_to_raw.inverse();

  RenderedFace out;
  for (int i = 0; i < 5; ++i) out.landmarks[i] = crop_to_raw.apply({canon[i].x * S, canon[i].y * S});

  out.pixels = torch::empty({raw_size, raw_size, 3}, torch::kUInt8);
  uint8_t* px = out.pixels.data_ptr<uint8_t>();
  constexpr int kSub = 3;
  for (int y = 0; y < raw_size; ++y) {
    for (int x = 0; x < raw_size; ++x) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const Point2 p{x + (sx + 0.5) / kSub - 0.5, y + (sy + 0.5) / kSub - 0.5};
          const Point2 c = raw_to_crop.apply(p);
          const Rgb col = shade(id, at, canon, c.x / S, c.y / S);
          for (int k = 0; k < 3; ++k) acc[k] += col[k];
        }
      }
      for (int k = 0; k < 3; ++k) {
        const double v = std::clamp(acc[k] / (kSub * kSub), 0.0, 1.0);
        px[(static_cast<size_t>(y) * raw_size + x) * 3 + k] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return out;
}

std::vector<FaceSample> ToyFaceWorld::make_dataset(int count, uint64_t seed, int crop_size) const {
  std::mt19937_64 rng(seed);
  const int raw = crop_size + crop_size / 4;
  std::vector<FaceSample> out;
  for (int j = 0; j < count; ++j) {
    const int i = j % num_identities();
    const auto attrs = sample_attributes(rng);
    const auto r = render(i, attrs, crop_size, raw);
    out.push_back(align_and_crop(r.pixels, r.landmarks, crop_size, false, label(i)));
  }
  return out;
}

torch::Tensor render_toy_occluder(int index, uint64_t seed, int size) {
  std::mt19937_64 rng(seed * 7919 + static_cast<uint64_t>(index));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const bool hand = index % 2 == 0;

  // Shape description in unit coordinates.
  const Rgb c1 = hand ? hsv(range(0, 50), range(0.3, 0.6), range(0.5, 0.9)) : hsv(range(0, 360), range(0.7, 1.0), range(0.6, 1.0));
  const Rgb c2 = hand ? scaled(c1, 0.75) : hsv(range(0, 360), range(0.6, 1.0), range(0.1, 0.5));
  const int shape = static_cast<int>(range(0, 3.999));
  const double rot = range(0, kPi);
  const double stripe_freq = range(10, 24);
  const bool checker = u01(rng) < 0.5;
  const double max_alpha = (!hand && u01(rng) < 0.25) ? 0.75 : 1.0;
  double finger_angle[4];
  for (double& a : finger_angle) a = range(-0.25, 0.25);

  auto inside = [&](double u, double v) -> bool {
    if (hand) {
      if (in_ellipse(u, v, 0.5, 0.66, 0.26, 0.24)) return true;
      for (int f = 0; f < 4; ++f) {
        const double bx = 0.32 + 0.12 * f, by = 0.55;
        const double ang = finger_angle[f] - 0.15 + 0.1 * f;
        const double dx = u - bx, dy = v - by;
        const double along = -dy * std::cos(ang) + dx * std::sin(ang);
        const double across = dx * std::cos(ang) + dy * std::sin(ang);
        const double len = f == 0 || f == 3 ? 0.34 : 0.44;
        if (along > 0 && along < len && std::abs(across) < 0.05) return true;
      }
      // thumb
      const double dx = u - 0.25, dy = v - 0.72;
      return in_ellipse(dx * std::cos(0.8) + dy * std::sin(0.8), -dx * std::sin(0.8) + dy * std::cos(0.8), 0, 0, 0.2, 0.06);
    }
    const double du = u - 0.5, dv = v - 0.5;
    const double ru = du * std::cos(rot) + dv * std::sin(rot), rv = -du * std::sin(rot) + dv * std::cos(rot);
    switch (shape) {
      case 0: return std::abs(ru) < 0.42 && std::abs(rv) < 0.22;
      case 1: return in_ellipse(ru, rv, 0, 0, 0.45, 0.28);
      case 2: return rv > -0.3 && rv < 0.35 && std::abs(ru) < (0.35 - rv) * 0.7;
      default: {
        const double r = std::sqrt(ru * ru + rv * rv);
        return r < 0.45 && r > 0.2;
      }
    }
  };
  auto texture = [&](double u, double v) -> Rgb {
    if (hand) {
      const double crease = 0.5 + 0.5 * std::sin(v * stripe_freq * kPi);
      return mix(c1, c2, 0.5 * crease * crease);
    }
    const double du = u * std::cos(rot) + v * std::sin(rot);
    if (checker) {
      const int a = static_cast<int>(std::floor(u * stripe_freq / 3)), b = static_cast<int>(std::floor(v * stripe_freq / 3));
      return (a + b) % 2 == 0 ? c1 : c2;
    }
    return std::sin(du * stripe_freq * kPi) > 0 ? c1 : c2;
  };

  auto out = torch::zeros({size, size, 4}, torch::kUInt8);
  uint8_t* px = out.data_ptr<uint8_t>();
  constexpr int kSub = 4;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Rgb acc{0, 0, 0};
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double u = (x + (sx + 0.5) / kSub) / size, v = (y + (sy + 0.5) / kSub) / size;
          if (!inside(u, v)) continue;
          const Rgb c = texture(u, v);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
          ++hits;
        }
      }
      if (hits == 0) continue;
      uint8_t* p = px + (static_cast<size_t>(y) * size + x) * 4;
      for (int k = 0; k < 3; ++k) p[k] = static_cast<uint8_t>(std::lround(std::clamp(acc[k] / hits, 0.0, 1.0) * 255));
      p[3] = static_cast<uint8_t>(std::lround(max_alpha * hits / (kSub * kSub) * 255));
    }
  }
  return out;
}

std::vector<OccluderAsset> make_toy_occluders(int count, uint64_t seed, int size) {
  std::vector<OccluderAsset> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(make_occluder(render_toy_occluder(i, seed, size),
                                i % 2 == 0 ? OccluderCategory::HandPhoto : OccluderCategory::ObjectRender));
  }
  return out;
}

}  // namespace faceshifter
