#include "faceshifter/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "faceshifter/error.hpp"

namespace faceshifter {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'C', 'K', 'P', 'T', '0', '1'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat: return "f32";
    case torch::kDouble: return "f64";
    case torch::kLong: return "i64";
    case torch::kInt: return "i32";
    case torch::kUInt8: return "u8";
    case torch::kBool: return "bool";
    default: fail(ErrorKind::Checkpoint, "unsupported tensor dtype in checkpoint");
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat;
  if (s == "f64") return torch::kDouble;
  if (s == "i64") return torch::kLong;
  if (s == "i32") return torch::kInt;
  if (s == "u8") return torch::kUInt8;
  if (s == "bool") return torch::kBool;
  fail(ErrorKind::Checkpoint, "unknown dtype '" + s + "' in checkpoint");
}

void write_u64(std::ostream& out, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_archive(const std::string& path, const Archive& archive) {
  nlohmann::json header;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::vector<torch::Tensor> blobs;
  uint64_t offset = 0;
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().cpu().contiguous();
    const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * t.element_size();
    header["tensors"].push_back(
        {{"name", name}, {"dtype", dtype_name(t.scalar_type())}, {"shape", t.sizes().vec()}, {"offset", offset},
         {"nbytes", nbytes}});
    offset += nbytes;
    blobs.push_back(t);
  }
  const std::string text = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::Checkpoint, "cannot write checkpoint " + path);
    out.write(kMagic, sizeof kMagic);
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : blobs)
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
    require(out.good(), ErrorKind::Checkpoint, "short write on checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Checkpoint, "cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::memcmp(magic, kMagic, 8) == 0, ErrorKind::Checkpoint, "not a checkpoint file: " + path);
  const uint64_t len = read_u64(in);
  require(in.good() && len < (1ull << 32), ErrorKind::Checkpoint, "corrupt checkpoint header: " + path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(in.good(), ErrorKind::Checkpoint, "truncated checkpoint header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Checkpoint, "corrupt checkpoint header: " + std::string(e.what()));
  }
  const auto data_start = in.tellg();
  Archive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype").get<std::string>())));
    const uint64_t nbytes = entry.at("nbytes").get<uint64_t>();
    require(nbytes == static_cast<uint64_t>(t.numel()) * t.element_size(), ErrorKind::Checkpoint,
            "tensor size mismatch in checkpoint");
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    require(in.good(), ErrorKind::Checkpoint, "truncated checkpoint data: " + path);
    archive.tensors.emplace(entry.at("name").get<std::string>(), t);
  }
  return archive;
}

void export_module(const torch::nn::Module& module, const std::string& prefix, Archive& archive) {
  for (const auto& p : module.named_parameters(true)) archive.tensors[prefix + p.key()] = p.value().detach().clone();
  for (const auto& b : module.named_buffers(true)) archive.tensors[prefix + b.key()] = b.value().detach().clone();
}

void import_module(torch::nn::Module& module, const std::string& prefix, const Archive& archive) {
  torch::NoGradGuard no_grad;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    const auto it = archive.tensors.find(prefix + name);
    require(it != archive.tensors.end(), ErrorKind::Checkpoint, "checkpoint lacks tensor " + prefix + name);
    require(it->second.sizes() == dst.sizes(), ErrorKind::Checkpoint,
            "shape mismatch for " + prefix + name + ": checkpoint " + c10::str(it->second.sizes()) + " vs model " +
                c10::str(dst.sizes()));
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters(true)) copy(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) copy(b.key(), b.value());
}

void copy_module_state(const torch::nn::Module& from, torch::nn::Module& to) {
  Archive a;
  export_module(from, "", a);
  import_module(to, "", a);
}

}  // namespace faceshifter
