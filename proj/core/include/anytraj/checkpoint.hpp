#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "anytraj/optim.hpp"
#include "anytraj/tensor.hpp"

namespace anytraj::ckpt {

// Self-describing binary checkpoint: magic "ATCK", version, JSON config
// blob, then named float64 arrays. Shared by trajectory models and policies.
struct Checkpoint {
  nlohmann::json config;
  std::vector<std::pair<std::string, nn::Tensor>> arrays;
};

void save_checkpoint(const std::filesystem::path& path,
                     const nlohmann::json& config,
                     const nn::NamedParams& params);

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint arrays into same-named parameters; throws on a missing
// name or shape mismatch.
void load_into(nn::NamedParams& params, const Checkpoint& ck);

}  // namespace anytraj::ckpt
