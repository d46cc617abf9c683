#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "faceshifter/config.hpp"
#include "faceshifter/encoders.hpp"
#include "faceshifter/error.hpp"

namespace fs_test {

using namespace faceshifter;

// Tiny desk-like config that keeps every forward pass in the millisecond range.
inline PipelineConfig tiny_config() {
  auto c = PipelineConfig::desk();
  c.crop_size = 32;
  c.n_attr_levels = 4;
  c.attr_channels = {4, 8, 8};
  c.gen_channels = {16, 16, 8, 8, 8};
  c.hear_depth = 3;
  c.hear_channels = {4, 8, 8};
  c.disc_channels = 4;
  c.disc_layers = 2;
  c.id_dim = 16;
  c.toy_id_input = 16;
  c.toy_id_channels = 4;
  c.batch_size = 4;
  return c;
}

// Frozen, untrained toy recognizer: fine wherever only the adapter contract matters.
inline std::shared_ptr<ToyIdentityEncoder> untrained_identity(const PipelineConfig& c, uint64_t seed = 5) {
  torch::manual_seed(seed);
  ToyIdentityOptions o = toy_identity_options(c);
  return std::make_shared<ToyIdentityEncoder>(ToyIdentityNet(o.input_size, o.channels, o.id_dim, 4), o, 4);
}

inline torch::Tensor random_images(int64_t n, int64_t size, uint64_t seed) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({n, 3, size, size}, g) * 2 - 1;
}

inline std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("faceshifter_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

template <typename F>
ErrorKind error_kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a faceshifter::Error";
  return ErrorKind::Usage;
}

}  // namespace fs_test
