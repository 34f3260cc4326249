#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace zsdfa {

inline constexpr const char* kToolVersion = "0.1.0";

/// Reproducibility record written by every CLI command: resolved-config hash,
/// seeds, the dataset manifest hash, timings, and a checksum per output file.
/// Two runs with the same config hash and seeds produce the same output
/// checksums.
struct RunManifest {
    std::string command;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::string dataset_hash;
    std::string tool_version = kToolVersion;
    double wall_seconds = 0;
    std::map<std::string, double> phase_seconds;
    std::vector<std::pair<std::string, std::string>> outputs;  // (relative path, sha256)

    void add_output(const std::filesystem::path& root, const std::filesystem::path& file);
    nlohmann::json to_json() const;
    void write(const std::filesystem::path& dir) const;

    /// Re-validates the recorded output checksums; throws IoError on mismatch.
    static void verify(const std::filesystem::path& dir);
};

std::string hash_of_json(const nlohmann::json& j);

} // namespace zsdfa
