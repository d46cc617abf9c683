#include <limits>

#include "faceshifter/hear.hpp"
#include "support.hpp"

using namespace faceshifter;
using fs_test::error_kind_of;

TEST(HeuristicError, ResidualOfTheSelfReconstruction) {
  const auto c = fs_test::tiny_config();
  torch::manual_seed(3);
  AEINet aei(c);
  auto id = fs_test::untrained_identity(c);
  const auto x = fs_test::random_images(2, 32, 4);
  EXPECT_EQ(error_kind_of([&] { heuristic_error(x, aei, *id); }), ErrorKind::Config);
  aei->eval();
  const auto d = heuristic_error(x, aei, *id);
  const auto d2 = heuristic_error(x, aei, *id);
  EXPECT_TRUE(d.equal(d2));
  EXPECT_FALSE(d.requires_grad());
  torch::NoGradGuard ng;
  const auto recon = aei->forward(encode_identity(x, *id), x).image;
  EXPECT_TRUE(d.equal(x - recon));
  EXPECT_LE(d.abs().max().item<double>(), 2.0);
  // A perfect reconstruction leaves no residual.
  EXPECT_EQ((x - x).abs().max().item<double>(), 0.0);
}

TEST(HEARNet, ShapeRangeAndDeterminism) {
  torch::manual_seed(1);
  HEARNet net(std::vector<int>{8, 16, 16, 16, 16});
  EXPECT_EQ(net->depth(), 5);
  net->eval();
  const auto y = fs_test::random_images(2, 64, 1);
  const auto d = fs_test::random_images(2, 64, 2) * 2;
  const auto a = refine(net, y, d), b = refine(net, y, d);
  EXPECT_EQ(a.sizes(), y.sizes());
  EXPECT_TRUE(a.equal(b));
  EXPECT_LE(a.abs().max().item<double>(), 1.0);
}

TEST(HEARNet, FullSizeValidAndIndivisibleRejected) {
  torch::manual_seed(1);
  HEARNet net(std::vector<int>{4, 4, 4, 4, 4});
  net->eval();
  const auto y = fs_test::random_images(1, 256, 1);
  EXPECT_EQ(net->forward(y, y).sizes(), y.sizes());
  const auto odd = fs_test::random_images(1, 100, 1);
  EXPECT_EQ(error_kind_of([&] { net->forward(odd, odd); }), ErrorKind::Data);
}

TEST(HearLosses, Examples) {
  auto id = fs_test::untrained_identity(fs_test::tiny_config());
  const auto y = fs_test::random_images(2, 32, 1), yh = fs_test::random_images(2, 32, 2);
  const auto xt = fs_test::random_images(2, 32, 3), xs = fs_test::random_images(2, 32, 4);
  EXPECT_EQ(change_loss(y, y).item<double>(), 0.0);
  EXPECT_EQ(change_loss(y, yh).item<double>(), change_loss(yh, y).item<double>());
  EXPECT_GT(change_loss(y, yh).item<double>(), 0.0);

  const auto p = hear_losses(y, yh, xt, xs, torch::tensor({false, false}), *id);
  EXPECT_EQ(p.rec.item<double>(), 0.0);
  EXPECT_DOUBLE_EQ(p.total.item<double>(), (p.id + p.chg + p.rec).item<double>());
  const auto same = hear_losses(xt, yh, xt, xt, torch::tensor({true, true}), *id);
  EXPECT_EQ(same.rec.item<double>(), 0.0);
  EXPECT_NEAR(same.id.item<double>(), 0.0, 1e-6);
}

TEST(HearLosses, UnweightedSum) {
  const auto t = hear_total_loss(torch::tensor(0.5, torch::kDouble), torch::tensor(0.1, torch::kDouble),
                                 torch::tensor(0.2, torch::kDouble));
  EXPECT_NEAR(t.item<double>(), 0.8, 1e-12);
  const auto nan = torch::tensor(std::numeric_limits<double>::quiet_NaN());
  EXPECT_EQ(error_kind_of([&] { hear_total_loss(torch::tensor(0.5), nan, torch::tensor(0.2)); }), ErrorKind::Numeric);
}

TEST(HearLosses, GradientReachesOnlyTheRefinedImage) {
  auto id = fs_test::untrained_identity(fs_test::tiny_config());
  auto y = fs_test::random_images(2, 32, 1).requires_grad_(true);
  auto xs = fs_test::random_images(2, 32, 4).requires_grad_(true);
  const auto yh = fs_test::random_images(2, 32, 2), xt = fs_test::random_images(2, 32, 3);
  hear_losses(y, yh, xt, xs, torch::tensor({true, false}), *id).total.backward();
  EXPECT_GT(y.grad().abs().sum().item<double>(), 0.0);
  EXPECT_FALSE(xs.grad().defined());
}
