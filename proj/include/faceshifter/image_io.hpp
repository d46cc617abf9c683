#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

namespace faceshifter {

// 8-bit PNG I/O. Pixel tensors are uint8 (H, W, C) with C = 3 (RGB) or 4 (RGBA).
// Grayscale and palette inputs are expanded to RGB.
torch::Tensor read_png(const std::string& path);
void write_png(const std::string& path, const torch::Tensor& pixels);

// v = pixel / 127.5 - 1. Returns float (1, C, H, W).
torch::Tensor bytes_to_signed(const torch::Tensor& pixels);
// Inverse mapping with rounding and clamping. Accepts (1, C, H, W) or (C, H, W).
torch::Tensor signed_to_bytes(const torch::Tensor& image);

// Tiles (C, H, W) or (1, C, H, W) images in [-1, 1] into one (3, H', W') image.
// Single channel inputs are replicated; images of different sizes are resized.
torch::Tensor make_grid(const std::vector<torch::Tensor>& images, int columns, int pad = 2);

// Colour map for a nonnegative (H, W) map, scaled by `max_value`; returns (3, H, W) in [-1, 1].
torch::Tensor heat_map(const torch::Tensor& values, double max_value);

// Peak signal-to-noise ratio in dB for images in [-1, 1] (peak-to-peak 2), averaged over the batch.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace faceshifter
