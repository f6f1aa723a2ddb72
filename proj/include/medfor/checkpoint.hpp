#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "medfor/tensor.hpp"

namespace medfor {

using TensorMap = std::map<std::string, Tensor>;

// Flat name -> tensor container, laid out like a safetensors file:
//   u64 little-endian header length N
//   N bytes of JSON: {"__metadata__": {...}, "<name>": {"dtype": "F32",
//                     "shape": [...], "data_offsets": [begin, end]}, ...}
//   payload of little-endian IEEE-754 single-precision values
// The header is space-padded to a multiple of 8 bytes. Tensor names are written
// in sorted order, so identical inputs produce identical files.
struct TensorArchive {
    TensorMap tensors;
    nlohmann::json metadata = nlohmann::json::object();
};

void save_tensor_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_tensor_archive(const std::filesystem::path& path);

// FNV-1a over names, shapes and the exact bit patterns of every value.
std::uint64_t fingerprint(const TensorMap& tensors);

}  // namespace medfor
