#include "faceshifter/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "faceshifter/error.hpp"

namespace faceshifter {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

torch::Tensor read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, ErrorKind::Data, "cannot open image " + path);
  png_byte sig[8];
  require(std::fread(sig, 1, 8, fp.get()) == 8 && png_sig_cmp(sig, 0, 8) == 0, ErrorKind::Data,
          "not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  require(png && info, ErrorKind::Data, "libpng initialisation failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::Data, "corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  auto out = torch::empty({height, width, channels}, torch::kUInt8);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = out.data_ptr<uint8_t>() + static_cast<size_t>(y) * width * channels;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::string& path, const torch::Tensor& pixels_in) {
  require(pixels_in.dim() == 3 && (pixels_in.size(2) == 3 || pixels_in.size(2) == 4 || pixels_in.size(2) == 1),
          ErrorKind::Data, "write_png expects (H, W, C) with C in {1, 3, 4}");
  auto pixels = pixels_in.to(torch::kUInt8).contiguous();
  const int height = static_cast<int>(pixels.size(0));
  const int width = static_cast<int>(pixels.size(1));
  const int channels = static_cast<int>(pixels.size(2));

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  require(fp != nullptr, ErrorKind::Data, "cannot write image " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  require(png && info, ErrorKind::Data, "libpng initialisation failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::Data, "failed writing PNG " + path);
  }
  png_init_io(png, fp.get());
  const int color = channels == 4 ? PNG_COLOR_TYPE_RGB_ALPHA : channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, width, height, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(pixels.data_ptr<uint8_t>() + static_cast<size_t>(y) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

torch::Tensor bytes_to_signed(const torch::Tensor& pixels) {
  require(pixels.dim() == 3, ErrorKind::Data, "expected (H, W, C) pixels");
  return pixels.to(torch::kFloat).permute({2, 0, 1}).unsqueeze(0).div(127.5).sub(1.0).contiguous();
}

torch::Tensor signed_to_bytes(const torch::Tensor& image) {
  auto img = image.detach().to(torch::kFloat);
  if (img.dim() == 4) {
    require(img.size(0) == 1, ErrorKind::Data, "signed_to_bytes expects a single image");
    img = img[0];
  }
  require(img.dim() == 3, ErrorKind::Data, "expected (C, H, W) image");
  return img.add(1.0).mul(127.5).round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
}

torch::Tensor make_grid(const std::vector<torch::Tensor>& images, int columns, int pad) {
  require(!images.empty() && columns > 0, ErrorKind::Data, "make_grid needs at least one image");
  std::vector<torch::Tensor> tiles;
  int64_t h = 0, w = 0;
  for (const auto& raw : images) {
    auto t = raw.detach().to(torch::kFloat);
    if (t.dim() == 4) t = t[0];
    if (t.dim() == 2) t = t.unsqueeze(0);
    if (t.size(0) == 1) t = t.expand({3, t.size(1), t.size(2)});
    if (tiles.empty()) {
      h = t.size(1);
      w = t.size(2);
    } else if (t.size(1) != h || t.size(2) != w) {
      t = torch::nn::functional::interpolate(
              t.unsqueeze(0), torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(
                                  torch::kNearest))[0];
    }
    tiles.push_back(t.contiguous());
  }
  const int64_t n = static_cast<int64_t>(tiles.size());
  const int64_t cols = std::min<int64_t>(columns, n);
  const int64_t rows = (n + cols - 1) / cols;
  auto grid = torch::full({3, rows * (h + pad) + pad, cols * (w + pad) + pad}, 1.0f);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t r = i / cols, c = i % cols;
    grid.narrow(1, pad + r * (h + pad), h).narrow(2, pad + c * (w + pad), w).copy_(tiles[i]);
  }
  return grid;
}

torch::Tensor heat_map(const torch::Tensor& values, double max_value) {
  auto v = values.detach().to(torch::kFloat);
  if (v.dim() == 3) v = v.squeeze(0);
  const double scale = max_value > 0 ? max_value : 1.0;
  v = (v / scale).clamp(0, 1);
  // Black -> red -> yellow -> white.
  auto r = (v * 3).clamp(0, 1);
  auto g = (v * 3 - 1).clamp(0, 1);
  auto b = (v * 3 - 2).clamp(0, 1);
  return torch::stack({r, g, b}).mul(2).sub(1);
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  auto diff = (a.detach().to(torch::kDouble) - b.detach().to(torch::kDouble));
  if (diff.dim() == 3) diff = diff.unsqueeze(0);
  auto mse = diff.pow(2).flatten(1).mean(1).clamp_min(1e-12);
  return (10.0 * torch::log10(4.0 / mse)).mean().item<double>();
}

}  // namespace faceshifter
