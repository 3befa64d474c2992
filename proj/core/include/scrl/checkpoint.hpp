#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace scrl {

// Named raw tensors behind a text header. Layout:
//
//   scrl-archive 1\n
//   header <bytes>\n<header text>\n
//   tensors <count>\n
//   then per tensor: <name> <dtype> <ndim> <d0> ... <bytes>\n<raw little-endian data>\n
//
// Tensors are stored contiguous on CPU; names never contain whitespace.
struct TensorArchive {
  std::string header;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  void add(std::string name, const torch::Tensor& t);
  const torch::Tensor* find(const std::string& name) const;
  const torch::Tensor& at(const std::string& name) const;  // throws if absent

  // Writes to a temporary file and renames, so a failed write never leaves a
  // truncated archive under `path`.
  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);
};

// Adds every parameter and buffer of `module` under `prefix` + torch name.
void store_module(TensorArchive& archive, const std::string& prefix, const torch::nn::Module& module);

// Copies tensors back in place. Every parameter and buffer must be present
// with matching shape and dtype.
void restore_module(const TensorArchive& archive, const std::string& prefix, torch::nn::Module& module);

}  // namespace scrl
