#include "faceshifter/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "faceshifter/error.hpp"
#include "faceshifter/image_io.hpp"

namespace faceshifter {

namespace F = torch::nn::functional;

torch::Tensor batched(const torch::Tensor& images, int64_t chunk,
                      const std::function<torch::Tensor(const torch::Tensor&)>& fn) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += chunk) parts.push_back(fn(images.slice(0, i, i + chunk)));
  return torch::cat(parts, 0);
}

RetrievalGallery RetrievalGallery::from_embeddings(const torch::Tensor& embeddings, std::vector<std::string> labels) {
  require(embeddings.dim() == 2 && embeddings.size(0) == static_cast<int64_t>(labels.size()), ErrorKind::Data,
          "gallery needs one label per embedding row");
  RetrievalGallery g;
  g.embeddings = F::normalize(embeddings.to(torch::kFloat), F::NormalizeFuncOptions().dim(1));
  g.labels = std::move(labels);
  return g;
}

RetrievalGallery RetrievalGallery::build(std::span<const FaceSample> faces, IdentityEncoder& adapter) {
  std::vector<std::string> labels;
  for (const auto& f : faces) labels.push_back(f.source_id);
  const auto emb = batched(stack_images(faces), 32, [&](const torch::Tensor& x) { return adapter.encode(x); });
  return from_embeddings(emb, std::move(labels));
}

double id_retrieval_embeddings(const torch::Tensor& queries, std::span<const std::string> true_labels,
                               const RetrievalGallery& gallery) {
  require(!gallery.labels.empty(), ErrorKind::Data, "ID retrieval needs a nonempty gallery");
  require(queries.dim() == 2 && queries.size(0) == static_cast<int64_t>(true_labels.size()), ErrorKind::Data,
          "ID retrieval needs one label per query");
  require(queries.size(0) > 0, ErrorKind::Data, "ID retrieval needs at least one query");
  const auto q = F::normalize(queries.to(torch::kFloat), F::NormalizeFuncOptions().dim(1));
  const auto best = q.mm(gallery.embeddings.t()).argmax(1);
  int64_t hits = 0;
  for (int64_t i = 0; i < q.size(0); ++i)
    if (gallery.labels[static_cast<size_t>(best[i].item<int64_t>())] == true_labels[static_cast<size_t>(i)]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(q.size(0));
}

double id_retrieval(const torch::Tensor& swapped, std::span<const std::string> true_labels,
                    const RetrievalGallery& gallery, IdentityEncoder& eval_adapter) {
  require(!gallery.labels.empty(), ErrorKind::Data, "ID retrieval needs a nonempty gallery");
  const auto q = batched(swapped, 32, [&](const torch::Tensor& x) { return eval_adapter.encode(x); });
  return id_retrieval_embeddings(q, true_labels, gallery);
}

namespace {

torch::Tensor as_single(const torch::Tensor& image) {
  auto img = image.dim() == 3 ? image.unsqueeze(0) : image;
  require(img.dim() == 4 && img.size(0) == 1 && img.size(1) == 3, ErrorKind::Data, "proxy expects one RGB image");
  return img[0].to(torch::kDouble);
}

}  // namespace

std::optional<std::vector<double>> MaskAxisPose::estimate(const torch::Tensor& image) const {
  const auto img = as_single(image);  // (3, S, S)
  const int64_t h = img.size(1), w = img.size(2);
  const int64_t p = std::max<int64_t>(1, std::min(h, w) / 20);
  auto corner = [&](int64_t y, int64_t x) { return img.slice(1, y, y + p).slice(2, x, x + p).mean({1, 2}); };
  const auto c00 = corner(0, 0), c01 = corner(0, w - p), c10 = corner(h - p, 0), c11 = corner(h - p, w - p);
  const auto v = torch::linspace(0, 1, h, torch::kDouble).view({1, h, 1});
  const auto u = torch::linspace(0, 1, w, torch::kDouble).view({1, 1, w});
  auto col = [](const torch::Tensor& c) { return c.view({3, 1, 1}); };
  const auto bg = (1 - v) * ((1 - u) * col(c00) + u * col(c01)) + v * ((1 - u) * col(c10) + u * col(c11));
  const auto mask = (img - bg).pow(2).sum(0).sqrt() > threshold;
  const auto idx = mask.nonzero().to(torch::kDouble);  // (M, 2) as (y, x)
  if (idx.size(0) < h * w / 20) return std::nullopt;
  const auto centred = idx - idx.mean(0, true);
  const auto cov = centred.t().mm(centred) / static_cast<double>(idx.size(0));
  const double cyy = cov[0][0].item<double>(), cxx = cov[1][1].item<double>(), cxy = cov[0][1].item<double>();
  const double tr = cxx + cyy, det = cxx * cyy - cxy * cxy;
  const double disc = std::sqrt(std::max(0.0, tr * tr / 4 - det));
  const double l1 = tr / 2 + disc, l2 = tr / 2 - disc;
  if (l2 <= 0 || std::sqrt(l1 / l2) < min_elongation) return std::nullopt;
  // Major axis direction in image coordinates (y down), then relative to vertical.
  const double theta = 0.5 * std::atan2(2 * cxy, cxx - cyy) * 180.0 / M_PI;
  double angle = theta - 90.0;
  while (angle <= -90.0) angle += 180.0;
  while (angle > 90.0) angle -= 180.0;
  return std::vector<double>{angle};
}

std::optional<std::vector<double>> BandProfileExpression::estimate(const torch::Tensor& image) const {
  const auto img = as_single(image);
  const int64_t s = img.size(1);
  const auto gray = img.mean(0);
  auto band = [&](double r0, double r1, double c0, double c1) {
    auto b = gray.slice(0, static_cast<int64_t>(r0 * s), static_cast<int64_t>(r1 * s))
                 .slice(1, static_cast<int64_t>(c0 * s), static_cast<int64_t>(c1 * s));
    auto profile = b.mean(1) - b.flatten().median();
    return F::adaptive_avg_pool1d(profile.view({1, 1, -1}), F::AdaptiveAvgPool1dFuncOptions(bins)).flatten();
  };
  const auto v = torch::cat({band(0.34, 0.56, 0.25, 0.75), band(0.72, 0.95, 0.33, 0.67)});
  return std::vector<double>(v.data_ptr<double>(), v.data_ptr<double>() + v.numel());
}

ProxyError proxy_error(const torch::Tensor& swapped, const torch::Tensor& targets, const VectorProxy& proxy) {
  require(swapped.sizes() == targets.sizes() && swapped.dim() == 4, ErrorKind::Data,
          "proxy error needs swapped and target batches of equal shape");
  ProxyError e;
  double total = 0;
  const int64_t n = swapped.size(0);
  for (int64_t i = 0; i < n; ++i) {
    const auto a = proxy.estimate(swapped.slice(0, i, i + 1));
    const auto b = proxy.estimate(targets.slice(0, i, i + 1));
    if (!a || !b) continue;
    double sq = 0;
    for (size_t k = 0; k < a->size(); ++k) sq += ((*a)[k] - (*b)[k]) * ((*a)[k] - (*b)[k]);
    total += std::sqrt(sq);
    ++e.evaluated;
  }
  e.mean = e.evaluated > 0 ? total / static_cast<double>(e.evaluated) : 0.0;
  e.skip_rate = n > 0 ? static_cast<double>(n - e.evaluated) / static_cast<double>(n) : 0.0;
  return e;
}

torch::Tensor attribute_vectors(AttributeEncoder& encoder, const torch::Tensor& images) {
  const int64_t crop = encoder->crop_size();
  return batched(images, 8, [&](const torch::Tensor& x) {
    const auto z = encoder->forward(x);
    std::vector<torch::Tensor> parts;
    for (const auto& level : z.levels) {
      auto up = level.size(2) == crop ? level
                                      : F::interpolate(level, F::InterpolateFuncOptions()
                                                                  .size(std::vector<int64_t>{crop, crop})
                                                                  .mode(torch::kBilinear)
                                                                  .align_corners(false));
      parts.push_back(up.flatten(1));
    }
    return torch::cat(parts, 1);
  });
}

AttributeQueryIndex AttributeQueryIndex::build(const torch::Tensor& corpus_vectors, int64_t max_components) {
  require(corpus_vectors.dim() == 2 && corpus_vectors.size(0) >= 2, ErrorKind::Data,
          "attribute index needs at least two corpus vectors");
  require(max_components >= 1, ErrorKind::Config, "attribute index needs at least one component");
  torch::NoGradGuard no_grad;
  const auto x = corpus_vectors.to(torch::kFloat);
  const int64_t n = x.size(0), d = x.size(1);
  const int64_t chunk = 1 << 16;
  AttributeQueryIndex index;
  index.mean = x.to(torch::kDouble).mean(0).to(torch::kFloat);
  const auto mean_d = index.mean.to(torch::kDouble);

  // Eigen-decomposition of the N x N Gram matrix of the centred data, accumulated in double.
  auto gram = torch::zeros({n, n}, torch::kDouble);
  for (int64_t c = 0; c < d; c += chunk) {
    const auto xc = x.slice(1, c, c + chunk).to(torch::kDouble) - mean_d.slice(0, c, c + chunk);
    gram += xc.mm(xc.t());
  }
  auto [evals, evecs] = torch::linalg_eigh(gram);
  const double top = evals[n - 1].item<double>();
  require(top > 0, ErrorKind::Data, "attribute corpus has no variance");
  std::vector<int64_t> keep;
  for (int64_t i = n - 1; i >= 0 && static_cast<int64_t>(keep.size()) < max_components; --i) {
    if (evals[i].item<double>() > top * 1e-10) keep.push_back(i);
  }
  const auto sel = torch::tensor(keep, torch::kLong);
  const auto coeff = evecs.index_select(1, sel).t() / evals.index_select(0, sel).sqrt().unsqueeze(1);  // (K, N)
  index.basis = torch::empty({static_cast<int64_t>(keep.size()), d}, torch::kFloat);
  for (int64_t c = 0; c < d; c += chunk) {
    const auto xc = x.slice(1, c, c + chunk).to(torch::kDouble) - mean_d.slice(0, c, c + chunk);
    index.basis.slice(1, c, c + chunk).copy_(coeff.mm(xc));
  }
  index.projected = index.project(x);
  return index;
}

torch::Tensor AttributeQueryIndex::project(const torch::Tensor& vectors) const {
  const auto v = vectors.dim() == 1 ? vectors.unsqueeze(0) : vectors;
  require(v.dim() == 2 && v.size(1) == mean.size(0), ErrorKind::Data, "attribute vector dimension mismatch");
  torch::NoGradGuard no_grad;
  return (v.to(torch::kFloat) - mean).to(torch::kDouble).mm(basis.to(torch::kDouble).t());
}

std::vector<Neighbor> attribute_query(const torch::Tensor& query_vector, const AttributeQueryIndex& index, int64_t k) {
  require(k >= 1 && k <= index.size(), ErrorKind::Data,
          "k = " + std::to_string(k) + " outside [1, " + std::to_string(index.size()) + "]");
  const auto q = index.project(query_vector);
  require(q.size(0) == 1, ErrorKind::Data, "attribute query takes a single vector");
  const auto dist = (index.projected - q).pow(2).sum(1).sqrt();
  std::vector<Neighbor> all;
  for (int64_t i = 0; i < dist.size(0); ++i) all.push_back({static_cast<size_t>(i), dist[i].item<double>()});
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.distance < b.distance; });
  all.resize(static_cast<size_t>(k));
  return all;
}

RecoveryScore occlusion_recovery_score(const torch::Tensor& x_t, const torch::Tensor& y_hat, const torch::Tensor& y,
                                       const torch::Tensor& truth_mask) {
  require(x_t.dim() == 4 && x_t.sizes() == y_hat.sizes() && x_t.sizes() == y.sizes(), ErrorKind::Data,
          "recovery score needs equally shaped image batches");
  require(truth_mask.dim() == 4 && truth_mask.size(0) == x_t.size(0) && truth_mask.size(1) == 1 &&
              truth_mask.size(2) == x_t.size(2) && truth_mask.size(3) == x_t.size(3),
          ErrorKind::Data, "truth mask must be (N, 1, H, W)");
  const auto m = truth_mask.to(torch::kBool).to(torch::kDouble);
  const auto area = m.sum({1, 2, 3});
  require(area.gt(0).all().item<bool>(), ErrorKind::Data, "empty occlusion mask");
  auto score = [&](const torch::Tensor& img) {
    const auto err = (img.to(torch::kDouble) - x_t.to(torch::kDouble)).abs() * m;
    return (err.sum({1, 2, 3}) / (area * x_t.size(1))).mean().item<double>();
  };
  return {score(y_hat), score(y)};
}

CrossPairs make_cross_pairs(std::span<const FaceSample> data, int64_t count, uint64_t seed) {
  require(count >= 1, ErrorKind::Config, "need at least one pair");
  bool two = false;
  for (const auto& f : data) two = two || f.source_id != data.front().source_id;
  require(!data.empty() && two, ErrorKind::Data, "cross-identity pairs need at least two identities");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, data.size() - 1);
  CrossPairs p;
  std::vector<torch::Tensor> src, tgt;
  for (int64_t i = 0; i < count; ++i) {
    const size_t s = pick(rng);
    size_t t = pick(rng);
    while (data[t].source_id == data[s].source_id) t = pick(rng);
    src.push_back(data[s].image);
    tgt.push_back(data[t].image);
    p.source_labels.push_back(data[s].source_id);
    p.target_labels.push_back(data[t].source_id);
  }
  p.sources = torch::cat(src, 0);
  p.targets = torch::cat(tgt, 0);
  return p;
}

IdentityTrend identity_trend(const torch::Tensor& swapped, const CrossPairs& pairs, IdentityEncoder& adapter) {
  auto enc = [&](const torch::Tensor& x) {
    return F::normalize(batched(x, 32, [&](const torch::Tensor& b) { return adapter.encode(b); }),
                        F::NormalizeFuncOptions().dim(1));
  };
  const auto z = enc(swapped), zs = enc(pairs.sources), zt = enc(pairs.targets);
  return {(z * zs).sum(1).mean().item<double>(), (z * zt).sum(1).mean().item<double>()};
}

OcclusionProbe make_occlusion_probe(std::span<const FaceSample> data, std::span<const OccluderAsset> occluders,
                                    int64_t count, uint64_t seed, const OcclusionSettings& settings) {
  require(!occluders.empty(), ErrorKind::Data, "occlusion probe needs occluders");
  const auto cp = make_cross_pairs(data, count, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<size_t> pick(0, occluders.size() - 1);
  std::vector<torch::Tensor> tgt, masks;
  for (int64_t i = 0; i < count; ++i) {
    FaceSample face;
    face.image = cp.targets.slice(0, i, i + 1);
    auto r = synthesize_occlusion(face, occluders[pick(rng)], rng(), settings);
    for (int retry = 0; retry < 16 && !r.truth_mask.any().item<bool>(); ++retry)
      r = synthesize_occlusion(face, occluders[pick(rng)], rng(), settings);
    tgt.push_back(r.occluded.image);
    masks.push_back(r.truth_mask);
  }
  OcclusionProbe p;
  p.sources = cp.sources;
  p.clean_targets = cp.targets;
  p.targets = torch::cat(tgt, 0);
  p.masks = torch::cat(masks, 0);
  return p;
}

Localization heuristic_error_localization(const OcclusionProbe& probe, AEINet& aei, IdentityEncoder& identity) {
  const auto delta = batched(probe.targets, 16, [&](const torch::Tensor& x) { return heuristic_error(x, aei, identity); });
  const auto d = delta.abs().mean(1, true).to(torch::kDouble);
  const auto m = probe.masks.to(torch::kDouble);
  const auto area = m.sum({1, 2, 3});
  const auto rest = (1 - m).sum({1, 2, 3});
  require(area.gt(0).all().item<bool>() && rest.gt(0).all().item<bool>(), ErrorKind::Data,
          "occlusion masks must be neither empty nor full");
  Localization l;
  l.inside = ((d * m).sum({1, 2, 3}) / area).mean().item<double>();
  l.outside = ((d * (1 - m)).sum({1, 2, 3}) / rest).mean().item<double>();
  return l;
}

RecoveryScore occlusion_recovery(const OcclusionProbe& probe, AEINet& aei, HEARNet& hear, IdentityEncoder& identity) {
  require(!aei->is_training() && !hear->is_training(), ErrorKind::Config, "recovery scoring needs eval-mode networks");
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> yh, y;
  for (int64_t i = 0; i < probe.targets.size(0); i += 16) {
    const auto s = probe.sources.slice(0, i, i + 16), t = probe.targets.slice(0, i, i + 16);
    const auto stage1 = aei->forward(encode_identity(s, identity), t).image;
    yh.push_back(stage1);
    y.push_back(hear->forward(stage1, heuristic_error(t, aei, identity)));
  }
  return occlusion_recovery_score(probe.targets, torch::cat(yh, 0), torch::cat(y, 0), probe.masks);
}

nlohmann::json evaluate_model(AEIModel& model, HEARNet* hear, std::span<const FaceSample> gallery_faces,
                              std::span<const FaceSample> eval_faces, IdentityEncoder& eval_adapter, int64_t pairs,
                              uint64_t seed, std::span<const OccluderAsset> occluders) {
  const auto cp = make_cross_pairs(eval_faces, pairs, seed);
  const auto swap_batch = [&](const torch::Tensor& src, const torch::Tensor& tgt) {
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < src.size(0); i += 16)
      out.push_back(model.swap(src.slice(0, i, i + 16), tgt.slice(0, i, i + 16)));
    return torch::cat(out, 0);
  };
  const auto y_hat = swap_batch(cp.sources, cp.targets);
  const auto gallery = RetrievalGallery::build(gallery_faces, eval_adapter);
  const auto trend = identity_trend(y_hat, cp, eval_adapter);
  const auto pose = proxy_error(y_hat, cp.targets, MaskAxisPose{});
  const auto expr = proxy_error(y_hat, cp.targets, BandProfileExpression{});
  const auto faces = stack_images(eval_faces);
  const auto recon = swap_batch(faces, faces);

  nlohmann::json r;
  r["config_hash"] = model.config.hash();
  r["pairs"] = cp.size();
  r["gallery_size"] = gallery.labels.size();
  r["id_retrieval"] = id_retrieval(y_hat, cp.source_labels, gallery, eval_adapter);
  r["cos_source"] = trend.cos_source;
  r["cos_target"] = trend.cos_target;
  r["pose_error"] = pose.mean;
  r["pose_skip_rate"] = pose.skip_rate;
  r["expression_error"] = expr.mean;
  r["expression_skip_rate"] = expr.skip_rate;
  r["reconstruction_psnr"] = psnr(recon, faces);
  if (hear) {
    torch::NoGradGuard no_grad;
    (*hear)->eval();
    std::vector<torch::Tensor> ys;
    for (int64_t i = 0; i < cp.targets.size(0); i += 16) {
      const auto t = cp.targets.slice(0, i, i + 16);
      ys.push_back((*hear)->forward(y_hat.slice(0, i, i + 16), heuristic_error(t, model.net, *model.identity)));
    }
    const auto y = torch::cat(ys, 0);
    const auto trend2 = identity_trend(y, cp, eval_adapter);
    r["stage2"] = {{"id_retrieval", id_retrieval(y, cp.source_labels, gallery, eval_adapter)},
                   {"cos_source", trend2.cos_source},
                   {"cos_target", trend2.cos_target},
                   {"pose_error", proxy_error(y, cp.targets, MaskAxisPose{}).mean},
                   {"expression_error", proxy_error(y, cp.targets, BandProfileExpression{}).mean}};
  }
  if (!occluders.empty()) {
    const auto probe = make_occlusion_probe(eval_faces, occluders, pairs, seed + 1, model.config.occlusion);
    const auto loc = heuristic_error_localization(probe, model.net, *model.identity);
    r["occlusion"] = {{"targets", probe.targets.size(0)},
                      {"delta_inside", loc.inside},
                      {"delta_outside", loc.outside},
                      {"localization_ratio", loc.ratio()}};
    if (hear) {
      const auto rec = occlusion_recovery(probe, model.net, *hear, *model.identity);
      r["occlusion"]["err_stage1"] = rec.err_stage1;
      r["occlusion"]["err_stage2"] = rec.err_stage2;
    }
  }
  return r;
}

}  // namespace faceshifter
