#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "focalerrornet/tensor.hpp"

namespace fen {

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

// FENP parameter checkpoint, all fields little-endian:
//   "FENP", version u32, count u32,
//   per tensor: name length u32, UTF-8 name, rank u32, dims u32[rank], f32[numel]
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace fen
