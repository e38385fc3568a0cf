#pragma once

// Flat tensor archive: canonical parameter path -> raw array.
//
// Layout (all integers little-endian):
//   magic   "WMRT"            4 bytes
//   version u32               currently 1
//   count   u64
//   count x entry:
//     key_len u32, key bytes (UTF-8)
//     dtype   u8              0 = float32, 1 = float64, 2 = int64, 3 = uint8
//     ndim    u32
//     dims    i64 x ndim
//     nbytes  u64
//     data    nbytes, row-major (C order)
//
// Entries are written in lexicographic key order, so equal maps produce
// byte-identical files.

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace wmr::checkpoint {

using TensorMap = std::map<std::string, torch::Tensor>;

void save(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load(const std::filesystem::path& path);

/// Parameters and buffers of `module`, keyed by their dotted module path.
TensorMap state_of(const torch::nn::Module& module);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing;     // in module, absent from archive
  std::vector<std::string> unexpected;  // in archive, absent from module
};

/// Copies archive entries whose key starts with `prefix` into `module`.
/// Keys outside `prefix` are ignored. Shape mismatches always throw
/// InputError; with `strict`, any missing or unexpected key under `prefix`
/// throws InputError naming the key.
LoadReport apply(torch::nn::Module& module, const TensorMap& tensors, const std::string& prefix = "",
                 bool strict = true);

}  // namespace wmr::checkpoint
