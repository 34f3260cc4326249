#include "zsdfa/manifest.hpp"

#include "zsdfa/dataset_io.hpp"
#include "zsdfa/sha256.hpp"

namespace zsdfa {

using nlohmann::json;
namespace fs = std::filesystem;

std::string hash_of_json(const json& j) {
    return Sha256::hex_of_string(j.dump());
}

void RunManifest::add_output(const fs::path& root, const fs::path& file) {
    outputs.emplace_back(fs::relative(file, root).string(), sha256_file(file));
}

json RunManifest::to_json() const {
    json outs = json::array();
    for (const auto& [path, hash] : outputs)
        outs.push_back({{"path", path}, {"sha256", hash}});
    return {{"command", command},
            {"config_hash", config_hash},
            {"seeds", seeds},
            {"dataset_hash", dataset_hash},
            {"tool_version", tool_version},
            {"wall_seconds", wall_seconds},
            {"phase_seconds", phase_seconds},
            {"outputs", std::move(outs)}};
}

void RunManifest::write(const fs::path& dir) const {
    write_file_bytes(dir / "run_manifest.json", to_json().dump(2) + "\n");
}

void RunManifest::verify(const fs::path& dir) {
    const fs::path path = dir / "run_manifest.json";
    if (!fs::exists(path)) throw IoError("no run manifest at " + path.string());
    const json m = json::parse(read_file_bytes(path));
    for (const auto& out : m.at("outputs")) {
        const fs::path file = dir / out.at("path").get<std::string>();
        if (!fs::exists(file)) throw IoError("recorded output missing: " + file.string());
        const std::string actual = sha256_file(file);
        if (actual != out.at("sha256").get<std::string>())
            throw IoError("checksum mismatch for " + file.string());
    }
}

} // namespace zsdfa
