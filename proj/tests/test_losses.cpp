#include <limits>

#include "faceshifter/losses.hpp"
#include "support.hpp"

using namespace faceshifter;
using fs_test::error_kind_of;

namespace {

DiscriminatorOutputs filled(double v, int scales = 3) {
  DiscriminatorOutputs o;
  for (int s = 0; s < scales; ++s) o.logits.push_back(torch::full({2, 1, 5 - s, 5 - s}, v));
  return o;
}

AttributeEmbeddingSet one_level(const torch::Tensor& t) { return AttributeEmbeddingSet{{t}}; }

}  // namespace

TEST(Discriminator, ThreeScalesShrink) {
  torch::manual_seed(0);
  MultiScaleDiscriminator d(8, 3, 3);
  d->eval();
  const auto out = d->forward(fs_test::random_images(1, 256, 1));
  ASSERT_EQ(out.logits.size(), 3u);
  for (size_t s = 1; s < 3; ++s) EXPECT_LT(out.logits[s].size(2), out.logits[s - 1].size(2));
  const auto again = d->forward(fs_test::random_images(1, 256, 1));
  for (size_t s = 0; s < 3; ++s) EXPECT_TRUE(out.logits[s].equal(again.logits[s]));
}

TEST(Discriminator, ZeroFinalLayerGivesZeroLogits) {
  MultiScaleDiscriminator d(4, 2, 3);
  d->zero_final_layers();
  for (const auto& l : d->forward(fs_test::random_images(2, 32, 1)).logits)
    EXPECT_EQ(l.abs().max().item<double>(), 0.0);
}

TEST(Hinge, Examples) {
  EXPECT_EQ(hinge_d_loss(filled(1), filled(-1)).item<double>(), 0.0);
  EXPECT_EQ(hinge_d_loss(filled(0), filled(0)).item<double>(), 2.0);
  EXPECT_EQ(hinge_g_loss(filled(0)).item<double>(), 0.0);
  EXPECT_EQ(hinge_g_loss(filled(3)).item<double>(), -3.0);
}

TEST(Hinge, DiscriminatorLossIsNonnegativeAndZeroOnlyWithMargins) {
  torch::manual_seed(1);
  for (int t = 0; t < 50; ++t) {
    DiscriminatorOutputs r, f;
    for (int s = 0; s < 3; ++s) {
      r.logits.push_back(torch::randn({2, 1, 3, 3}) * 2);
      f.logits.push_back(torch::randn({2, 1, 3, 3}) * 2);
    }
    const double l = hinge_d_loss(r, f).item<double>();
    EXPECT_GE(l, 0.0);
    bool margins = true;
    for (int s = 0; s < 3; ++s)
      margins = margins && (r.logits[s] >= 1).all().item<bool>() && (f.logits[s] <= -1).all().item<bool>();
    EXPECT_EQ(l == 0.0, margins);
  }
  EXPECT_EQ(hinge_d_loss(filled(1.5), filled(-4)).item<double>(), 0.0);
}

TEST(IdentityLoss, Examples) {
  const auto e1 = torch::tensor({{1.0, 0.0, 0.0}});
  const auto e2 = torch::tensor({{0.0, 1.0, 0.0}});
  EXPECT_NEAR(identity_loss(e1, e1).item<double>(), 0.0, 1e-7);
  EXPECT_NEAR(identity_loss(e1, -e1).item<double>(), 2.0, 1e-7);
  EXPECT_NEAR(identity_loss(e1, e2).item<double>(), 1.0, 1e-7);
  EXPECT_EQ(error_kind_of([] { identity_loss(torch::zeros({1, 3}), torch::ones({1, 3})); }), ErrorKind::Data);
}

TEST(IdentityLoss, RangeOnRandomUnitVectors) {
  torch::manual_seed(2);
  const auto a = torch::nn::functional::normalize(torch::randn({64, 8}), torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto b = torch::nn::functional::normalize(torch::randn({64, 8}), torch::nn::functional::NormalizeFuncOptions().dim(1));
  for (int i = 0; i < 64; ++i) {
    const double l = identity_loss(a.slice(0, i, i + 1), b.slice(0, i, i + 1)).item<double>();
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 2.0);
  }
}

TEST(AttributeLoss, Examples) {
  const auto z = torch::randn({1, 2, 3, 3});
  EXPECT_EQ(attribute_loss(one_level(z), one_level(z)).item<double>(), 0.0);
  auto p = torch::zeros({1, 1, 2, 2}), t = torch::zeros({1, 1, 2, 2});
  p[0][0][1][0] = 2.0;
  EXPECT_DOUBLE_EQ(attribute_loss(one_level(p), one_level(t)).item<double>(), 2.0);
  const auto a = AttributeEmbeddingSet{{torch::randn({2, 3, 2, 2}), torch::randn({2, 2, 4, 4})}};
  const auto b = AttributeEmbeddingSet{{torch::randn({2, 3, 2, 2}), torch::randn({2, 2, 4, 4})}};
  EXPECT_EQ(attribute_loss(a, b).item<double>(), attribute_loss(b, a).item<double>());
}

TEST(AttributeLoss, SumsLevelsAndAveragesBatch) {
  const auto a = AttributeEmbeddingSet{{torch::zeros({2, 1, 1, 1}), torch::zeros({2, 1, 2, 2})}};
  const auto b = AttributeEmbeddingSet{{torch::ones({2, 1, 1, 1}), torch::ones({2, 1, 2, 2})}};
  // per sample 1/2 (1 + 4) = 2.5
  EXPECT_DOUBLE_EQ(attribute_loss(a, b).item<double>(), 2.5);
  // mean reduction: 1/2 (1/1 + 4/4) = 1
  EXPECT_DOUBLE_EQ(attribute_loss(a, b, LossReduction::Mean).item<double>(), 1.0);
}

TEST(AttributeLoss, ShapeMismatch) {
  const auto a = AttributeEmbeddingSet{{torch::zeros({1, 1, 2, 2})}};
  const auto b = AttributeEmbeddingSet{{torch::zeros({1, 1, 4, 4})}};
  EXPECT_EQ(error_kind_of([&] { attribute_loss(a, b); }), ErrorKind::Data);
  EXPECT_EQ(error_kind_of([&] { attribute_loss(a, AttributeEmbeddingSet{}); }), ErrorKind::Data);
}

TEST(ReconstructionLoss, Examples) {
  const auto y = torch::randn({1, 3, 4, 4}), x = torch::randn({1, 3, 4, 4});
  EXPECT_EQ(reconstruction_loss(y, x, false).item<double>(), 0.0);
  EXPECT_EQ(reconstruction_loss(x, x, true).item<double>(), 0.0);
  auto x2 = x.clone();
  x2[0][1][2][3] += 1.0;
  EXPECT_NEAR(reconstruction_loss(x2, x, true).item<double>(), 0.5, 1e-6);
}

TEST(ReconstructionLoss, CrossPairsAreExactlyZeroWithZeroGradient) {
  auto y = torch::randn({3, 3, 4, 4}, torch::requires_grad());
  const auto x = torch::randn({3, 3, 4, 4});
  const auto l = reconstruction_loss(y, x, torch::tensor({false, false, false}));
  EXPECT_EQ(l.item<double>(), 0.0);
  l.backward();
  ASSERT_TRUE(y.grad().defined());
  EXPECT_EQ(y.grad().abs().max().item<double>(), 0.0);
}

TEST(ReconstructionLoss, MixedBatchGatesPerSample) {
  auto y = torch::zeros({2, 1, 1, 2}, torch::requires_grad());
  const auto x = torch::ones({2, 1, 1, 2});
  // sample 0 same: 1/2 * 2 = 1, sample 1 cross: 0; batch mean 0.5
  const auto l = reconstruction_loss(y, x, torch::tensor({true, false}));
  EXPECT_DOUBLE_EQ(l.item<double>(), 0.5);
  l.backward();
  EXPECT_EQ(y.grad()[1].abs().max().item<double>(), 0.0);
  EXPECT_GT(y.grad()[0].abs().max().item<double>(), 0.0);
  const auto nan_input = torch::full({2, 1, 1, 2}, std::numeric_limits<float>::quiet_NaN());
  EXPECT_EQ(reconstruction_loss(nan_input, x, torch::tensor({false, false})).item<double>(), 0.0);
}

TEST(TotalLoss, Examples) {
  const auto one = torch::tensor(1.0), zero = torch::tensor(0.0);
  EXPECT_DOUBLE_EQ(aei_total_loss({one, one, one, one}, LossWeights{}).item<double>(), 26.0);
  EXPECT_DOUBLE_EQ(aei_total_loss({zero, zero, zero, zero}, LossWeights{}).item<double>(), 0.0);
  const auto adv = torch::tensor(0.7);
  EXPECT_DOUBLE_EQ(aei_total_loss({adv, one, one, one}, LossWeights{0, 0, 0}).item<double>(), adv.item<double>());
}

TEST(TotalLoss, NonFinitePartIsANumericError) {
  const auto one = torch::tensor(1.0), bad = torch::tensor(std::numeric_limits<double>::infinity());
  EXPECT_EQ(error_kind_of([&] { aei_total_loss({one, one, bad, one}, LossWeights{}); }), ErrorKind::Numeric);
  const auto nan = torch::tensor(std::numeric_limits<double>::quiet_NaN());
  EXPECT_EQ(error_kind_of([&] { aei_total_loss({nan, one, one, one}, LossWeights{}); }), ErrorKind::Numeric);
}
