#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "otpr/nn.hpp"

namespace otpr {

// A named collection of networks plus a free-form JSON metadata string.
//
// On disk ("OTPR-CKPT-1"): magic line, u32 network count, then per network
// its name, layer sizes, residual flag, activation tags and the flat
// parameter vector as little-endian f64; the metadata string comes last.
struct Checkpoint {
  std::vector<std::pair<std::string, nn::ParamSet>> networks;
  std::string metadata = "{}";

  bool has(const std::string& name) const;
  const nn::ParamSet& get(const std::string& name) const;
  void put(const std::string& name, nn::ParamSet params);
};

inline constexpr const char* kCheckpointMagic = "OTPR-CKPT-1";

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace otpr
