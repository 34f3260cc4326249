#pragma once

#include <filesystem>

#include <json.hpp>

#include "zsdfa/model.hpp"

namespace zsdfa {

/// Versioned binary container: magic, version, a JSON header carrying the
/// encoder configuration plus named tensor descriptors (name, dtype, shape,
/// offset), then raw little-endian tensor payloads.

struct CheckpointMeta {
    std::vector<std::string> class_names;
    std::uint64_t seed = 0;
    nlohmann::json extra;  // free-form (epoch, metrics, ...)
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    ModelParams<float> params;
    CheckpointMeta meta;
};

/// Rebuilds the parameter set from the stored configuration. Throws
/// CompatError when the container's tensor inventory does not match the
/// configuration it declares, IoError on malformed files.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

} // namespace zsdfa
