#include "faceshifter/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "faceshifter/error.hpp"
#include "faceshifter/image_io.hpp"

namespace faceshifter {

namespace fs = std::filesystem;

Similarity Similarity::inverse() const {
  const double det = a * a + b * b;
  require(det > 0, ErrorKind::Data, "singular similarity transform");
  Similarity inv;
  inv.a = a / det;
  inv.b = -b / det;
  inv.tx = -(inv.a * tx - inv.b * ty);
  inv.ty = -(inv.b * tx + inv.a * ty);
  return inv;
}

Similarity Similarity::then(const Similarity& next) const {
  Similarity out;
  out.a = next.a * a - next.b * b;
  out.b = next.b * a + next.a * b;
  const Point2 t = next.apply({tx, ty});
  out.tx = t.x;
  out.ty = t.y;
  return out;
}

Similarity Similarity::from(double angle_rad, double scale, double tx, double ty) {
  return {scale * std::cos(angle_rad), scale * std::sin(angle_rad), tx, ty};
}

Landmarks template_landmarks(int crop_size) {
  static constexpr double kArcFace112[5][2] = {
      {38.2946, 51.6963}, {73.5318, 51.5014}, {56.0252, 71.7366}, {41.5493, 92.3655}, {70.7299, 92.2041}};
  const double s = crop_size / 112.0;
  Landmarks out;
  for (int i = 0; i < 5; ++i) out[i] = {kArcFace112[i][0] * s, kArcFace112[i][1] * s};
  return out;
}

Similarity estimate_similarity(const Landmarks& src, const Landmarks& dst) {
  Point2 ms, md;
  for (int i = 0; i < 5; ++i) {
    require(std::isfinite(src[i].x) && std::isfinite(src[i].y), ErrorKind::Data, "non-finite landmark");
    ms.x += src[i].x / 5;
    ms.y += src[i].y / 5;
    md.x += dst[i].x / 5;
    md.y += dst[i].y / 5;
  }
  double sxx = 0, syy = 0, sxy = 0, num_a = 0, num_b = 0;
  for (int i = 0; i < 5; ++i) {
    const double px = src[i].x - ms.x, py = src[i].y - ms.y;
    const double qx = dst[i].x - md.x, qy = dst[i].y - md.y;
    sxx += px * px;
    syy += py * py;
    sxy += px * py;
    num_a += px * qx + py * qy;
    num_b += px * qy - py * qx;
  }
  // Eigenvalues of the landmark scatter matrix reveal coincident or collinear sets.
  const double tr = sxx + syy;
  const double disc = std::sqrt(std::max(0.0, (sxx - syy) * (sxx - syy) / 4 + sxy * sxy));
  const double lmax = tr / 2 + disc, lmin = tr / 2 - disc;
  require(lmax > 1e-9, ErrorKind::Data, "degenerate landmarks: points coincide");
  require(lmin / lmax > 1e-6, ErrorKind::Data, "degenerate landmarks: points are collinear");
  Similarity s;
  s.a = num_a / tr;
  s.b = num_b / tr;
  s.tx = md.x - (s.a * ms.x - s.b * ms.y);
  s.ty = md.y - (s.b * ms.x + s.a * ms.y);
  return s;
}

torch::Tensor warp_similarity(const torch::Tensor& image, const Similarity& src_to_dst, int out_h, int out_w) {
  require(image.dim() == 3, ErrorKind::Data, "warp_similarity expects (C, H, W)");
  auto src = image.to(torch::kFloat).contiguous();
  const int64_t C = src.size(0), H = src.size(1), W = src.size(2);
  auto out = torch::empty({C, out_h, out_w}, torch::kFloat);
  const auto inv = src_to_dst.inverse();
  const float* in = src.data_ptr<float>();
  float* o = out.data_ptr<float>();
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const Point2 p = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      const double sx = std::clamp(p.x, 0.0, static_cast<double>(W - 1));
      const double sy = std::clamp(p.y, 0.0, static_cast<double>(H - 1));
      const int64_t x0 = static_cast<int64_t>(std::floor(sx)), y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int64_t c = 0; c < C; ++c) {
        const float* plane = in + c * H * W;
        double v = plane[y0 * W + x0];
        if (fx != 0 || fy != 0) {
          v = (1 - fy) * ((1 - fx) * plane[y0 * W + x0] + fx * plane[y0 * W + x1]) +
              fy * ((1 - fx) * plane[y1 * W + x0] + fx * plane[y1 * W + x1]);
        }
        o[(c * out_h + y) * out_w + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

namespace {

torch::Tensor raw_to_signed_chw(const torch::Tensor& raw) {
  if (raw.scalar_type() == torch::kUInt8) {
    require(raw.dim() == 3 && raw.size(2) >= 3, ErrorKind::Data, "raw pixels must be (H, W, 3|4)");
    return bytes_to_signed(raw.narrow(2, 0, 3))[0];
  }
  auto img = raw.to(torch::kFloat);
  if (img.dim() == 4) {
    require(img.size(0) == 1, ErrorKind::Data, "align_and_crop takes a single image");
    img = img[0];
  }
  require(img.dim() == 3 && img.size(0) == 3, ErrorKind::Data, "raw image must be (3, H, W)");
  return img;
}

}  // namespace

FaceSample align_and_crop(const torch::Tensor& raw, const std::optional<Landmarks>& landmarks, int crop_size,
                          bool allow_center_crop_fallback, std::string source_id) {
  require(crop_size > 0, ErrorKind::Config, "crop_size must be positive");
  const auto img = raw_to_signed_chw(raw);
  const int64_t H = img.size(1), W = img.size(2);
  FaceSample out;
  out.source_id = std::move(source_id);
  if (landmarks) {
    for (const auto& p : *landmarks)
      require(p.x >= 0 && p.y >= 0 && p.x <= W - 1 && p.y <= H - 1, ErrorKind::Data, "landmark outside image");
    const auto tmpl = template_landmarks(crop_size);
    const auto xf = estimate_similarity(*landmarks, tmpl);
    out.image = warp_similarity(img, xf, crop_size, crop_size).clamp(-1, 1).unsqueeze(0);
    Landmarks mapped;
    for (int i = 0; i < 5; ++i) mapped[i] = xf.apply((*landmarks)[i]);
    out.landmarks = mapped;
    return out;
  }
  require(allow_center_crop_fallback, ErrorKind::Data, "missing landmarks and center-crop fallback disabled");
  // Centre square, resampled to the crop size.
  const double side = static_cast<double>(std::min(H, W));
  const double scale = crop_size / side;
  const double ox = (W - side) / 2.0, oy = (H - side) / 2.0;
  // Pixel-centre convention: output pixel centre c maps to source (c + 0.5) / scale - 0.5 + offset.
  Similarity xf{scale, 0, -(ox - 0.5) * scale - 0.5, -(oy - 0.5) * scale - 0.5};
  out.image = warp_similarity(img, xf, crop_size, crop_size).clamp(-1, 1).unsqueeze(0);
  return out;
}

OccluderAsset make_occluder(const torch::Tensor& rgba_pixels, OccluderCategory category) {
  require(rgba_pixels.dim() == 3 && rgba_pixels.size(2) == 4, ErrorKind::Data, "occluder must be RGBA (H, W, 4)");
  auto f = rgba_pixels.to(torch::kFloat).permute({2, 0, 1}).contiguous();
  OccluderAsset asset;
  asset.category = category;
  asset.rgba = torch::cat({f.narrow(0, 0, 3) / 127.5 - 1.0, f.narrow(0, 3, 1) / 255.0}, 0).contiguous();
  require(asset.rgba[3].gt(0).any().item<bool>(), ErrorKind::Data, "occluder alpha support is empty");
  return asset;
}

OcclusionTransform sample_occlusion_transform(const OcclusionSettings& s, int crop_size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(-s.max_rotation_deg, s.max_rotation_deg);
  std::uniform_real_distribution<double> scale(s.min_scale, s.max_scale);
  const double lo = (1 - s.center_region) / 2 * (crop_size - 1);
  const double hi = (1 + s.center_region) / 2 * (crop_size - 1);
  std::uniform_real_distribution<double> center(lo, hi);
  OcclusionTransform xf;
  xf.angle_deg = angle(rng);
  xf.scale = scale(rng);
  xf.center_x = center(rng);
  xf.center_y = center(rng);
  xf.color_strength = s.color_match_strength;
  return xf;
}

OcclusionResult apply_occlusion(const FaceSample& face, const OccluderAsset& occluder, const OcclusionTransform& xf) {
  require(face.image.defined() && face.image.dim() == 4 && face.image.size(0) == 1, ErrorKind::Data,
          "apply_occlusion expects a single (1, 3, S, S) face");
  require(occluder.rgba.defined() && occluder.rgba.dim() == 3 && occluder.rgba.size(0) == 4, ErrorKind::Data,
          "occluder must be (4, H, W)");
  require(occluder.rgba[3].gt(0).any().item<bool>(), ErrorKind::Data, "occluder alpha support is empty");
  require(xf.scale > 0 && std::isfinite(xf.scale), ErrorKind::Data, "occluder scaled to zero area");

  const auto face_img = face.image[0].to(torch::kFloat).contiguous();
  const int64_t S_h = face_img.size(1), S_w = face_img.size(2);
  const auto occ = occluder.rgba.contiguous();
  const int64_t oh = occ.size(1), ow = occ.size(2);
  const double zoom = xf.scale * S_w / static_cast<double>(std::max(oh, ow));
  const double th = xf.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double ocx = (ow - 1) / 2.0, ocy = (oh - 1) / 2.0;

  // Premultiplied bilinear sampling, transparent outside the asset.
  auto rgb = torch::zeros({3, S_h, S_w}, torch::kFloat);
  auto alpha = torch::zeros({S_h, S_w}, torch::kFloat);
  const float* src = occ.data_ptr<float>();
  float* dst_rgb = rgb.data_ptr<float>();
  float* dst_a = alpha.data_ptr<float>();
  auto texel = [&](int64_t ch, int64_t y, int64_t x) -> double {
    if (x < 0 || y < 0 || x >= ow || y >= oh) return 0.0;
    const double a = src[(3 * oh + y) * ow + x];
    return ch == 3 ? a : a * src[(ch * oh + y) * ow + x];
  };
  for (int64_t y = 0; y < S_h; ++y) {
    for (int64_t x = 0; x < S_w; ++x) {
      const double dx = x - xf.center_x, dy = y - xf.center_y;
      const double lx = (c * dx + s * dy) / zoom + ocx;
      const double ly = (-s * dx + c * dy) / zoom + ocy;
      if (lx <= -1 || ly <= -1 || lx >= ow || ly >= oh) continue;
      const int64_t x0 = static_cast<int64_t>(std::floor(lx)), y0 = static_cast<int64_t>(std::floor(ly));
      const double fx = lx - x0, fy = ly - y0;
      double vals[4];
      for (int ch = 0; ch < 4; ++ch) {
        if (fx == 0 && fy == 0) {
          vals[ch] = texel(ch, y0, x0);
        } else {
          vals[ch] = (1 - fy) * ((1 - fx) * texel(ch, y0, x0) + fx * texel(ch, y0, x0 + 1)) +
                     fy * ((1 - fx) * texel(ch, y0 + 1, x0) + fx * texel(ch, y0 + 1, x0 + 1));
        }
      }
      const double a = std::clamp(vals[3], 0.0, 1.0);
      if (a <= 0) continue;
      dst_a[y * S_w + x] = static_cast<float>(a);
      for (int ch = 0; ch < 3; ++ch) dst_rgb[(ch * S_h + y) * S_w + x] = static_cast<float>(vals[ch] / vals[3]);
    }
  }
  const auto support = alpha.gt(0);
  require(support.any().item<bool>(), ErrorKind::Data, "occluder scaled to zero area");

  if (xf.color_strength > 0) {
    // Channelwise affine match of occluder statistics (alpha weighted) to the face statistics.
    const auto w = alpha.unsqueeze(0);
    const auto wsum = alpha.sum();
    const auto mu_o = (rgb * w).sum({1, 2}) / wsum;
    const auto sd_o = (((rgb - mu_o.view({3, 1, 1})).pow(2) * w).sum({1, 2}) / wsum).sqrt();
    const auto mu_f = face_img.mean({1, 2});
    const auto sd_f = face_img.std({1, 2}, /*unbiased=*/false);
    const auto gain = torch::where(sd_o > 1e-6, sd_f / sd_o.clamp_min(1e-6), torch::zeros_like(sd_o));
    const auto matched = (rgb - mu_o.view({3, 1, 1})) * gain.view({3, 1, 1}) + mu_f.view({3, 1, 1});
    rgb = (1 - xf.color_strength) * rgb + xf.color_strength * matched;
  }
  rgb = rgb.clamp(-1, 1);

  const auto a3 = alpha.unsqueeze(0);
  auto blended = (face_img * (1 - a3) + rgb * a3).clamp(-1, 1);
  // Outside the support the face is reproduced exactly.
  blended = torch::where(support.unsqueeze(0), blended, face_img);

  OcclusionResult result;
  result.occluded = face;
  result.occluded.image = blended.unsqueeze(0);
  result.truth_mask = support.view({1, 1, S_h, S_w});
  return result;
}

OcclusionResult synthesize_occlusion(const FaceSample& face, const OccluderAsset& occluder, uint64_t rng_seed,
                                     const OcclusionSettings& settings) {
  require(occluder.rgba.defined() && occluder.rgba[3].gt(0).any().item<bool>(), ErrorKind::Data,
          "occluder alpha support is empty");
  std::mt19937_64 rng(rng_seed);
  const auto xf = sample_occlusion_transform(settings, static_cast<int>(face.image.size(3)), rng);
  return apply_occlusion(face, occluder, xf);
}

PairIndices sample_pair_indices(size_t dataset_size, double p_cross, std::mt19937_64& rng) {
  require(dataset_size > 0, ErrorKind::Data, "cannot sample pairs from an empty dataset");
  require(p_cross >= 0 && p_cross <= 1, ErrorKind::Config, "p_cross must lie in [0, 1]");
  std::bernoulli_distribution cross(p_cross);
  std::uniform_int_distribution<size_t> pick(0, dataset_size - 1);
  PairIndices p;
  if (cross(rng)) {
    require(dataset_size >= 2, ErrorKind::Data, "cross pairs need at least two images");
    p.source = pick(rng);
    std::uniform_int_distribution<size_t> other(0, dataset_size - 2);
    p.target = other(rng);
    if (p.target >= p.source) ++p.target;
    p.is_same = false;
  } else {
    p.source = p.target = pick(rng);
    p.is_same = true;
  }
  return p;
}

TrainingPair sample_pair(std::span<const FaceSample> dataset, double p_cross, std::mt19937_64& rng) {
  const auto idx = sample_pair_indices(dataset.size(), p_cross, rng);
  return {dataset[idx.source], dataset[idx.target], idx.is_same};
}

TrainingPair sample_pair(std::span<const FaceSample> dataset, double p_cross, uint64_t rng_seed) {
  std::mt19937_64 rng(rng_seed);
  return sample_pair(dataset, p_cross, rng);
}

std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Data, "cannot open manifest " + path);
  std::vector<ManifestRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Data, path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    require(j.contains("path"), ErrorKind::Data, path + ":" + std::to_string(line_no) + ": missing path");
    ManifestRecord rec;
    rec.path = j.at("path").get<std::string>();
    rec.identity = j.value("identity", std::string{});
    if (j.contains("landmarks") && !j.at("landmarks").is_null()) {
      const auto v = j.at("landmarks").get<std::vector<double>>();
      require(v.size() == 10, ErrorKind::Data, path + ":" + std::to_string(line_no) + ": need 10 landmark values");
      Landmarks lm;
      for (int i = 0; i < 5; ++i) lm[i] = {v[2 * i], v[2 * i + 1]};
      rec.landmarks = lm;
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::Data, "cannot write manifest " + path);
  for (const auto& rec : records) {
    nlohmann::json j{{"path", rec.path}, {"identity", rec.identity}};
    if (rec.landmarks) {
      std::vector<double> v;
      for (const auto& p : *rec.landmarks) {
        v.push_back(p.x);
        v.push_back(p.y);
      }
      j["landmarks"] = v;
    }
    out << j.dump() << "\n";
  }
}

std::vector<FaceSample> load_dataset(const std::string& manifest_path, int crop_size,
                                     bool allow_center_crop_fallback) {
  const auto records = read_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<FaceSample> samples;
  samples.reserve(records.size());
  for (const auto& rec : records) {
    const fs::path p = fs::path(rec.path).is_absolute() ? fs::path(rec.path) : base / rec.path;
    const auto pixels = read_png(p.string());
    samples.push_back(align_and_crop(pixels, rec.landmarks, crop_size, allow_center_crop_fallback, rec.identity));
  }
  return samples;
}

std::vector<OccluderAsset> load_occluders(const std::string& dir) {
  require(fs::is_directory(dir), ErrorKind::Data, "occluder directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<OccluderAsset> assets;
  for (const auto& f : files) {
    const auto pixels = read_png(f.string());
    require(pixels.size(2) == 4, ErrorKind::Data, "occluder without alpha channel: " + f.string());
    const auto rel = fs::relative(f, dir).parent_path().string();
    const auto category =
        rel.find("hand") != std::string::npos ? OccluderCategory::HandPhoto : OccluderCategory::ObjectRender;
    assets.push_back(make_occluder(pixels, category));
  }
  require(!assets.empty(), ErrorKind::Data, "no occluder PNGs under " + dir);
  return assets;
}

torch::Tensor stack_images(std::span<const FaceSample> samples) {
  require(!samples.empty(), ErrorKind::Data, "cannot stack an empty sample list");
  std::vector<torch::Tensor> imgs;
  imgs.reserve(samples.size());
  for (const auto& s : samples) imgs.push_back(s.image);
  return torch::cat(imgs, 0);
}

}  // namespace faceshifter
