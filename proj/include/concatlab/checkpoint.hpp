#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "concatlab/tensor.hpp"

namespace concatlab {

// Checkpoint format: <base>.json manifest (names, shapes, byte offsets) plus
// <base>.bin, a flat little-endian float64 blob. Reload is bit-exact.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& base_path, const NamedTensors& entries);
NamedTensors load_checkpoint(const std::string& base_path);

// Stable content digest (FNV-1a 64) over names, shapes, and raw payload bytes.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t named_tensors_digest(const NamedTensors& entries);
std::string hex64(std::uint64_t v);

}  // namespace concatlab
