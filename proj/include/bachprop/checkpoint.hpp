#ifndef BACHPROP_CHECKPOINT_HPP
#define BACHPROP_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "bachprop/model.hpp"

namespace bachprop::io {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error("checkpoint: " + msg) {}
};

struct CheckpointMeta {
  std::string config_echo;  // resolved run configuration, JSON text
  std::uint64_t seed = 0;
};

// Versioned binary container: variant tag, dims, dictionaries, flattened
// parameters in layout order, config echo, seed.
void save_checkpoint(const std::filesystem::path& path, const model::ModelParams& params,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  model::ModelParams params;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bachprop::io

#endif
