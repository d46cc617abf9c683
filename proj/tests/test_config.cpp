#include <fstream>

#include "faceshifter/config.hpp"
#include "faceshifter/image_io.hpp"
#include "support.hpp"

using namespace faceshifter;
using fs_test::error_kind_of;

TEST(Config, FullPresetDefaults) {
  const auto c = PipelineConfig::full();
  EXPECT_EQ(c.crop_size, 256);
  EXPECT_EQ(c.n_attr_levels, 8);
  EXPECT_EQ(c.hear_depth, 5);
  EXPECT_EQ(c.weights.att, 10.0);
  EXPECT_EQ(c.weights.id, 5.0);
  EXPECT_EQ(c.weights.rec, 10.0);
  EXPECT_EQ(c.adam.beta1, 0.0);
  EXPECT_EQ(c.adam.beta2, 0.999);
  EXPECT_EQ(c.adam.lr, 4e-4);
  EXPECT_EQ(c.p_cross_aei, 0.8);
  EXPECT_EQ(c.p_cross_hear, 0.5);
  EXPECT_EQ(c.bottleneck_size(), 2);
  EXPECT_NO_THROW(c.validate());
  EXPECT_NO_THROW(PipelineConfig::desk().validate());
  EXPECT_EQ(PipelineConfig::desk().crop_size, 64);
  EXPECT_EQ(PipelineConfig::desk().n_attr_levels, 6);
  EXPECT_EQ(PipelineConfig::desk().reduction, LossReduction::Mean);
  EXPECT_EQ(PipelineConfig::desk().hear_reduction, LossReduction::Sum);
}

TEST(Config, InvalidValuesAreConfigErrors) {
  auto c = PipelineConfig::full();
  c.crop_size = 200;
  EXPECT_EQ(error_kind_of([&] { c.validate(); }), ErrorKind::Config);
  c = PipelineConfig::full();
  c.p_cross_aei = 1.5;
  EXPECT_EQ(error_kind_of([&] { c.validate(); }), ErrorKind::Config);
  c = PipelineConfig::full();
  c.gen_channels.pop_back();
  EXPECT_EQ(error_kind_of([&] { c.validate(); }), ErrorKind::Config);
}

TEST(Config, OverridesAndJsonRoundTrip) {
  auto c = PipelineConfig::desk();
  apply_override(c, "weights.id=2.5");
  apply_override(c, "integration=cat");
  apply_override(c, "attr_channels=[1,2,3,4,5]");
  apply_override(c, "occlusion.target_only=false");
  apply_override(c, "hear_reduction=mean");
  EXPECT_EQ(c.weights.id, 2.5);
  EXPECT_EQ(c.integration, IntegrationMode::Cat);
  EXPECT_EQ(c.attr_channels, (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_FALSE(c.occlusion.target_only);
  EXPECT_EQ(c.hear_reduction, LossReduction::Mean);
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_NE(PipelineConfig::desk().hash(), c.hash());
  EXPECT_EQ(error_kind_of([&] { apply_override(c, "no_such_field=1"); }), ErrorKind::Config);
  EXPECT_EQ(error_kind_of([&] { apply_override(c, "integration=sideways"); }), ErrorKind::Config);
  EXPECT_EQ(error_kind_of([&] { apply_override(c, "missing-equals"); }), ErrorKind::Config);
}

TEST(Config, FilePresetThenFields) {
  const auto dir = fs_test::temp_dir("config");
  std::ofstream(dir + "/c.json") << R"({"preset": "desk", "batch_size": 4, "weights": {"att": 3}})";
  const auto c = load_config_file(dir + "/c.json");
  EXPECT_EQ(c.crop_size, 64);
  EXPECT_EQ(c.batch_size, 4);
  EXPECT_EQ(c.weights.att, 3.0);
  EXPECT_EQ(c.weights.rec, 10.0);
  std::ofstream(dir + "/bad.json") << "{ nope";
  EXPECT_EQ(error_kind_of([&] { load_config_file(dir + "/bad.json"); }), ErrorKind::Config);
}

TEST(ImageIo, PngRoundTripAndScaling) {
  const auto dir = fs_test::temp_dir("png");
  auto px = torch::randint(0, 256, {5, 7, 3}, torch::kLong).to(torch::kUInt8);
  write_png(dir + "/x.png", px);
  EXPECT_TRUE(read_png(dir + "/x.png").equal(px));
  const auto v = bytes_to_signed(px);
  EXPECT_EQ(v.sizes(), (std::vector<int64_t>{1, 3, 5, 7}));
  EXPECT_TRUE(signed_to_bytes(v).equal(px));
  EXPECT_NEAR(bytes_to_signed(torch::full({1, 1, 3}, 255, torch::kUInt8)).max().item<double>(), 1.0, 1e-7);
  EXPECT_GT(psnr(v, v), 100.0);
  EXPECT_NEAR(psnr(torch::zeros({1, 3, 2, 2}), torch::ones({1, 3, 2, 2})), 10 * std::log10(4.0), 1e-9);
}
