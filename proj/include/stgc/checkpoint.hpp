#pragma once

// STGC checkpoint, little-endian throughout:
//   "STGC"                      4 bytes
//   format version              u32
//   ModelConfig                 u32 hidden_size, intermediate_size, num_experts,
//                               top_k, num_layers, num_classes, input_dim;
//                               f64 tau, alpha, beta; u32 cel_kind (0 ce_like,
//                               1 mse_like); u8 has_capacity; f64 capacity_factor;
//                               u8 bpr
//   tensors                     f64 values of every tensor in `tensors()` order

#include <cstdint>
#include <filesystem>
#include <vector>

#include "stgc/model.hpp"

namespace stgc {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

std::vector<char> serialize_model(const Model& model);
Model deserialize_model(const std::vector<char>& bytes, const std::string& source = "<memory>");

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace stgc
