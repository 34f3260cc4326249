#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "zsdfa/synthetic.hpp"

namespace zsdfa {

/// On-disk dataset layout: one directory per family; images as binary PPM
/// (P6), parsing maps as binary PGM (P5), labels and prompt in a JSON sidecar
/// per sample, and a split manifest listing every file with its checksum.

std::string encode_ppm(const Image& img);
Image decode_ppm(const std::string& bytes);
std::string encode_pgm(const ParsingMap& map);
ParsingMap decode_pgm(const std::string& bytes);

struct DatasetMeta {
    std::uint64_t seed = 0;
    DatasetSplit split;
    std::vector<GeneratorFamily> families;  // full parametrization, incl. degradation rates
    std::vector<std::string> class_names;
    std::vector<std::string> vocab;
    std::string config_hash;
};

nlohmann::json family_to_json(const GeneratorFamily& f);
GeneratorFamily family_from_json(const nlohmann::json& j);

enum class BuildStatus { Written, Verified };

/// Writes the dataset under root. If a manifest already exists the content is
/// verified against its checksums instead of rewritten.
BuildStatus write_dataset(const std::filesystem::path& root, const ProtocolData& data,
                          const DatasetMeta& meta);

struct LoadedDataset {
    ProtocolData data;
    DatasetMeta meta;
};

LoadedDataset read_dataset(const std::filesystem::path& root);

/// Recomputes every file checksum recorded in the manifest; throws IoError on
/// the first mismatch or missing file.
void verify_dataset(const std::filesystem::path& root);

/// Content hash of the manifest file itself (identifies the dataset).
std::string dataset_manifest_hash(const std::filesystem::path& root);

std::string read_file_bytes(const std::filesystem::path& p);
void write_file_bytes(const std::filesystem::path& p, const std::string& bytes);
std::string sha256_file(const std::filesystem::path& p);

} // namespace zsdfa
