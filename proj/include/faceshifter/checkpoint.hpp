#pragma once

#include <map>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

namespace faceshifter {

// Self-describing archive: an 8-byte magic, a little-endian u64 header length, a JSON header
// (free-form `meta` plus a table of named tensors with dtype/shape/offset), then raw data.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;
};

void save_archive(const std::string& path, const Archive& archive);
Archive load_archive(const std::string& path);

// Stores every parameter and buffer of `module` as `prefix` + hierarchical name.
void export_module(const torch::nn::Module& module, const std::string& prefix, Archive& archive);

// Copies tensors back. Every parameter and buffer must be present with the exact shape;
// mismatches throw Error(Checkpoint).
void import_module(torch::nn::Module& module, const std::string& prefix, const Archive& archive);

// Copies parameters and buffers between two modules of identical structure.
void copy_module_state(const torch::nn::Module& from, torch::nn::Module& to);

}  // namespace faceshifter
