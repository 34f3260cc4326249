#include "zsdfa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace zsdfa {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'Z', 'S', 'D', 'F'};
constexpr std::uint32_t kVersion = 1;

// Payloads are written in host byte order; the artifact targets
// little-endian platforms only.
static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads assume a little-endian host");

template <typename V>
void write_pod(std::ofstream& f, const V& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V read_pod(std::ifstream& f) {
    V v{};
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!f) throw IoError("truncated checkpoint");
    return v;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params,
                     const CheckpointMeta& meta) {
    const auto named = params.named_params();
    json tensors = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : named) {
        tensors.push_back({{"name", name},
                           {"dtype", dtype_name(t->dtype())},
                           {"shape", t->shape()},
                           {"offset", offset}});
        offset += t->size() * sizeof(float);
    }
    const json header = {{"config", params.config.to_json()},
                         {"class_names", meta.class_names},
                         {"seed", meta.seed},
                         {"extra", meta.extra},
                         {"tensors", std::move(tensors)}};
    const std::string header_text = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot create checkpoint " + path.string());
    f.write(kMagic, 4);
    write_pod(f, kVersion);
    write_pod(f, static_cast<std::uint64_t>(header_text.size()));
    f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, t] : named) {
        (void)name;
        f.write(reinterpret_cast<const char*>(t->data().data()),
                static_cast<std::streamsize>(t->size() * sizeof(float)));
    }
    if (!f) throw IoError("short write to checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError(path.string() + " is not a checkpoint file");
    const auto version = read_pod<std::uint32_t>(f);
    if (version != kVersion)
        throw CompatError("checkpoint version " + std::to_string(version) +
                          " not supported (expected " + std::to_string(kVersion) + ")");
    const auto header_len = read_pod<std::uint64_t>(f);
    std::string header_text(header_len, '\0');
    f.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw IoError("truncated checkpoint header");

    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& e) {
        throw IoError("corrupt checkpoint header: " + std::string(e.what()));
    }

    LoadedCheckpoint out{ModelParams<float>::init(
                             EncoderConfig::from_json(header.at("config")), 0),
                         {}};
    out.meta.class_names = header.at("class_names").get<std::vector<std::string>>();
    out.meta.seed = header.at("seed").get<std::uint64_t>();
    out.meta.extra = header.value("extra", json::object());

    auto named = out.params.named_params();
    const json& tensors = header.at("tensors");
    if (tensors.size() != named.size())
        throw CompatError("checkpoint lists " + std::to_string(tensors.size()) +
                          " tensors, configuration expects " + std::to_string(named.size()));
    for (std::size_t i = 0; i < named.size(); ++i) {
        const json& td = tensors[i];
        auto& [name, t] = named[i];
        if (td.at("name").get<std::string>() != name)
            throw CompatError("checkpoint tensor '" + td.at("name").get<std::string>() +
                              "' does not match expected '" + name + "'");
        if (td.at("shape").get<std::vector<int>>() != t->shape())
            throw CompatError("checkpoint tensor '" + name + "' has shape mismatch");
        f.read(reinterpret_cast<char*>(t->raw().data()),
               static_cast<std::streamsize>(t->size() * sizeof(float)));
        if (!f) throw IoError("truncated checkpoint payload at '" + name + "'");
    }
    return out;
}

} // namespace zsdfa
