#include "otpr/checkpoint.hpp"

#include <algorithm>

#include "otpr/binary_io.hpp"
#include "otpr/error.hpp"

namespace otpr {

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(networks.begin(), networks.end(),
                     [&](const auto& entry) { return entry.first == name; });
}

const nn::ParamSet& Checkpoint::get(const std::string& name) const {
  for (const auto& [key, params] : networks)
    if (key == name) return params;
  throw IoError("checkpoint has no network named '" + name + "'");
}

void Checkpoint::put(const std::string& name, nn::ParamSet params) {
  for (auto& [key, existing] : networks) {
    if (key == name) {
      existing = std::move(params);
      return;
    }
  }
  networks.emplace_back(name, std::move(params));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::BinaryWriter out(path);
  out.magic(kCheckpointMagic);
  out.u32(static_cast<std::uint32_t>(ckpt.networks.size()));
  for (const auto& [name, params] : ckpt.networks) {
    out.str(name);
    out.u32(static_cast<std::uint32_t>(params.layer_sizes().size()));
    for (int s : params.layer_sizes()) out.u32(static_cast<std::uint32_t>(s));
    out.u8(params.residual() ? 1 : 0);
    for (nn::Activation act : params.activations()) out.u8(static_cast<std::uint8_t>(act));
    out.u64(params.size());
    out.f64s({params.values().data(), params.size()});
  }
  out.str(ckpt.metadata);
  out.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader in(path);
  in.expect_magic(kCheckpointMagic);
  Checkpoint ckpt;
  const std::uint32_t count = in.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = in.str();
    const std::uint32_t n_sizes = in.u32();
    if (n_sizes < 2 || n_sizes > 1024) throw IoError("corrupt layer count in checkpoint");
    std::vector<int> sizes(n_sizes);
    for (int& s : sizes) s = static_cast<int>(in.u32());
    const bool residual = in.u8() != 0;
    std::vector<nn::Activation> acts(n_sizes - 2);
    for (auto& a : acts) {
      const std::uint8_t tag = in.u8();
      if (tag > 3) throw IoError("unknown activation tag in checkpoint");
      a = static_cast<nn::Activation>(tag);
    }
    nn::ParamSet params(std::move(sizes), std::move(acts), residual);
    if (in.u64() != params.size()) throw IoError("parameter count mismatch in checkpoint");
    in.f64s({params.values().data(), params.size()});
    ckpt.networks.emplace_back(std::move(name), std::move(params));
  }
  ckpt.metadata = in.str();
  return ckpt;
}

}  // namespace otpr
