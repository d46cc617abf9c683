#include <cmath>
#include <numbers>

#include "faceshifter/evaluation.hpp"
#include "faceshifter/toy_world.hpp"
#include "support.hpp"

using namespace faceshifter;
using fs_test::error_kind_of;

namespace {

// Bright ellipse on a dark gradient, major axis tilted by `angle_deg` from vertical.
torch::Tensor ellipse_image(int s, double angle_deg, double cx = 0.5, double cy = 0.5) {
  auto img = torch::empty({1, 3, s, s});
  auto a = img.accessor<float, 4>();
  const double th = angle_deg * std::numbers::pi / 180.0;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double dx = (x - cx * (s - 1)) / s, dy = (y - cy * (s - 1)) / s;
      // Rotate into the ellipse frame; positive angles tilt the top to the right.
      const double u = std::cos(th) * dx + std::sin(th) * dy;
      const double v = -std::sin(th) * dx + std::cos(th) * dy;
      const bool inside = (u * u) / (0.16 * 0.16) + (v * v) / (0.32 * 0.32) <= 1;
      for (int c = 0; c < 3; ++c) a[0][c][y][x] = inside ? 0.6f - 0.1f * c : -0.8f + 0.1f * y / s;
    }
  return img;
}

}  // namespace

TEST(Retrieval, SelfRetrievalIsPerfect) {
  auto id = fs_test::untrained_identity(fs_test::tiny_config());
  const auto faces = ToyFaceWorld(4, 1).make_dataset(12, 3, 32);
  const auto gallery = RetrievalGallery::build(faces, *id);
  std::vector<std::string> labels;
  for (const auto& f : faces) labels.push_back(f.source_id);
  EXPECT_EQ(id_retrieval(stack_images(faces), labels, gallery, *id), 1.0);
}

TEST(Retrieval, RandomEmbeddingsScoreAboutOneOverK) {
  torch::manual_seed(4);
  const int k = 5;
  std::vector<std::string> glabels, qlabels;
  for (int i = 0; i < 500; ++i) glabels.push_back("id" + std::to_string(i % k));
  for (int i = 0; i < 4000; ++i) qlabels.push_back("id" + std::to_string(i % k));
  const auto gallery = RetrievalGallery::from_embeddings(torch::randn({500, 16}), glabels);
  const double acc = id_retrieval_embeddings(torch::randn({4000, 16}), qlabels, gallery);
  EXPECT_NEAR(acc, 1.0 / k, 0.03);
}

TEST(Retrieval, InvariantToGalleryRescaling) {
  torch::manual_seed(5);
  const auto emb = torch::randn({40, 8});
  std::vector<std::string> labels;
  for (int i = 0; i < 40; ++i) labels.push_back(std::to_string(i % 4));
  const auto q = torch::randn({100, 8});
  std::vector<std::string> ql;
  for (int i = 0; i < 100; ++i) ql.push_back(std::to_string(i % 4));
  const double a = id_retrieval_embeddings(q, ql, RetrievalGallery::from_embeddings(emb, labels));
  const double b = id_retrieval_embeddings(q, ql, RetrievalGallery::from_embeddings(emb * 37.5, labels));
  EXPECT_EQ(a, b);
}

TEST(Retrieval, EmptyGalleryIsAnError) {
  const auto g = RetrievalGallery::from_embeddings(torch::zeros({0, 4}), {});
  const std::vector<std::string> l{"a"};
  EXPECT_EQ(error_kind_of([&] { id_retrieval_embeddings(torch::randn({1, 4}), l, g); }), ErrorKind::Data);
}

TEST(Proxies, IdenticalImagesGiveZeroError) {
  const auto faces = stack_images(ToyFaceWorld(4, 1).make_dataset(8, 3, 64));
  const auto pose = proxy_error(faces, faces, MaskAxisPose{});
  EXPECT_EQ(pose.mean, 0.0);
  const auto expr = proxy_error(faces, faces, BandProfileExpression{});
  EXPECT_EQ(expr.mean, 0.0);
  EXPECT_EQ(expr.skip_rate, 0.0);
}

TEST(Proxies, PoseErrorRecoversAKnownRotation) {
  std::vector<torch::Tensor> targets, rotated;
  for (double base : {-20.0, -5.0, 0.0, 10.0, 25.0}) {
    targets.push_back(ellipse_image(96, base));
    rotated.push_back(ellipse_image(96, base + 15.0));
  }
  const MaskAxisPose pose;
  const auto t0 = pose.estimate(targets[3]);
  ASSERT_TRUE(t0.has_value());
  EXPECT_NEAR((*t0)[0], 10.0, 1.0);
  const auto e = proxy_error(torch::cat(rotated), torch::cat(targets), pose);
  EXPECT_EQ(e.skip_rate, 0.0);
  EXPECT_NEAR(e.mean, 15.0, 1.0);
}

TEST(Proxies, RoundBlobsAreSkippedAndCounted) {
  auto round = torch::full({1, 3, 64, 64}, -0.8);
  round.slice(2, 16, 48).slice(3, 16, 48).fill_(0.7);
  const auto e = proxy_error(torch::cat({round, ellipse_image(64, 5)}), torch::cat({round, ellipse_image(64, 0)}),
                             MaskAxisPose{});
  EXPECT_EQ(e.evaluated, 1);
  EXPECT_DOUBLE_EQ(e.skip_rate, 0.5);
}

TEST(AttributeIndex, OrthonormalBasisSelfRetrievalAndSortedDistances) {
  torch::manual_seed(2);
  const auto corpus = torch::randn({60, 300});
  const auto index = AttributeQueryIndex::build(corpus, 512);
  const int64_t K = index.basis.size(0);
  EXPECT_LE(K, 60);
  const auto gram = index.basis.to(torch::kDouble).mm(index.basis.to(torch::kDouble).t());
  EXPECT_LT((gram - torch::eye(K, torch::kDouble)).abs().max().item<double>(), 1e-5);
  for (int64_t i = 0; i < corpus.size(0); ++i) {
    const auto nn = attribute_query(corpus[i], index, 5);
    EXPECT_EQ(nn[0].index, static_cast<size_t>(i));
    for (size_t r = 1; r < nn.size(); ++r) EXPECT_LE(nn[r - 1].distance, nn[r].distance);
  }
  EXPECT_EQ(error_kind_of([&] { attribute_query(corpus[0], index, 61); }), ErrorKind::Data);
  const auto small = AttributeQueryIndex::build(corpus, 8);
  EXPECT_EQ(small.basis.size(0), 8);
}

TEST(AttributeIndex, AttributeVectorsConcatenateUpsampledLevels) {
  const auto c = fs_test::tiny_config();
  torch::manual_seed(1);
  AttributeEncoder enc(c.crop_size, c.n_attr_levels, c.attr_channels);
  enc->eval();
  const auto v = attribute_vectors(enc, fs_test::random_images(3, 32, 1));
  int64_t channels = 0;
  for (auto ch : enc->level_channels()) channels += ch;
  EXPECT_EQ(v.sizes(), (std::vector<int64_t>{3, channels * 32 * 32}));
}

TEST(Recovery, Examples) {
  const auto x = fs_test::random_images(2, 16, 1), yh = fs_test::random_images(2, 16, 2);
  auto mask = torch::zeros({2, 1, 16, 16}, torch::kBool);
  mask.slice(2, 4, 9).slice(3, 3, 7).fill_(true);
  const auto same = occlusion_recovery_score(x, yh, x, mask);
  EXPECT_EQ(same.err_stage2, 0.0);
  EXPECT_GT(same.err_stage1, 0.0);
  const auto equal = occlusion_recovery_score(x, yh, yh, mask);
  EXPECT_EQ(equal.err_stage1, equal.err_stage2);
  // Constant offset of 0.5 inside the mask.
  const auto off = occlusion_recovery_score(x, x + 0.5, x, mask);
  EXPECT_NEAR(off.err_stage1, 0.5, 1e-6);
  auto empty = mask.clone();
  empty[1].fill_(false);
  EXPECT_EQ(error_kind_of([&] { occlusion_recovery_score(x, yh, x, empty); }), ErrorKind::Data);
}

TEST(CrossPairs, DistinctIdentitiesAndSeeded) {
  const auto data = ToyFaceWorld(4, 1).make_dataset(16, 3, 32);
  const auto a = make_cross_pairs(data, 30, 7), b = make_cross_pairs(data, 30, 7);
  ASSERT_EQ(a.size(), 30u);
  for (size_t i = 0; i < a.size(); ++i) EXPECT_NE(a.source_labels[i], a.target_labels[i]);
  EXPECT_TRUE(a.sources.equal(b.sources));
  EXPECT_TRUE(a.targets.equal(b.targets));
}

TEST(OcclusionProbe, OccludesOnlyInsideTheMasksAndIsSeeded) {
  const auto data = ToyFaceWorld(4, 3).make_dataset(12, 1, 32);
  const auto occ = make_toy_occluders(4, 5, 16);
  const auto p = make_occlusion_probe(data, occ, 6, 8, OcclusionSettings{});
  EXPECT_EQ(p.targets.sizes(), p.clean_targets.sizes());
  EXPECT_EQ(p.masks.sizes(), (std::vector<int64_t>{6, 1, 32, 32}));
  for (int64_t i = 0; i < 6; ++i) {
    EXPECT_TRUE(p.masks[i].any().item<bool>());
    const auto outside = (~p.masks[i]).expand({3, 32, 32});
    EXPECT_TRUE(p.targets[i].masked_select(outside).equal(p.clean_targets[i].masked_select(outside)));
  }
  EXPECT_TRUE(make_occlusion_probe(data, occ, 6, 8, OcclusionSettings{}).targets.equal(p.targets));
  EXPECT_EQ(error_kind_of([&] { make_occlusion_probe(data, {}, 6, 8, OcclusionSettings{}); }), ErrorKind::Data);
}

TEST(OcclusionProbe, LocalizationAndRecoveryOnAnUntrainedModel) {
  const auto c = fs_test::tiny_config();
  torch::manual_seed(2);
  AEINet aei(c);
  HEARNet hear(c.hear_channels);
  auto id = fs_test::untrained_identity(c);
  const auto data = ToyFaceWorld(4, 3).make_dataset(8, 1, 32);
  const auto p = make_occlusion_probe(data, make_toy_occluders(4, 5, 16), 4, 2, c.occlusion);
  aei->eval();
  const auto l = heuristic_error_localization(p, aei, *id);
  EXPECT_GT(l.inside, 0.0);
  EXPECT_GT(l.outside, 0.0);
  EXPECT_DOUBLE_EQ(l.ratio(), l.inside / l.outside);
  EXPECT_EQ(error_kind_of([&] { occlusion_recovery(p, aei, hear, *id); }), ErrorKind::Config);
  hear->eval();
  const auto r = occlusion_recovery(p, aei, hear, *id);
  EXPECT_TRUE(std::isfinite(r.err_stage1));
  EXPECT_TRUE(std::isfinite(r.err_stage2));
  EXPECT_GE(r.err_stage1, 0.0);
}
