#include "zsdfa/dataset_io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "zsdfa/sha256.hpp"

namespace zsdfa {

using nlohmann::json;
namespace fs = std::filesystem;

std::string encode_ppm(const Image& img) {
    std::ostringstream os;
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.px.data()),
             static_cast<std::streamsize>(img.px.size()));
    return os.str();
}

namespace {

void read_pnm_header(std::istringstream& is, const char* magic, int& w, int& h) {
    std::string tag;
    is >> tag;
    if (tag != magic) throw IoError(std::string("expected ") + magic + " header, got '" + tag + "'");
    int maxval = 0;
    is >> w >> h >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported PNM geometry");
    is.get();  // single whitespace after maxval
}

} // namespace

Image decode_ppm(const std::string& bytes) {
    std::istringstream is(bytes);
    int w = 0, h = 0;
    read_pnm_header(is, "P6", w, h);
    Image img(h, w);
    is.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (is.gcount() != static_cast<std::streamsize>(img.px.size()))
        throw IoError("truncated PPM payload");
    return img;
}

std::string encode_pgm(const ParsingMap& map) {
    std::ostringstream os;
    os << "P5\n" << map.w << " " << map.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(map.labels.data()),
             static_cast<std::streamsize>(map.labels.size()));
    return os.str();
}

ParsingMap decode_pgm(const std::string& bytes) {
    std::istringstream is(bytes);
    int w = 0, h = 0;
    read_pnm_header(is, "P5", w, h);
    ParsingMap map(h, w);
    is.read(reinterpret_cast<char*>(map.labels.data()),
            static_cast<std::streamsize>(map.labels.size()));
    if (is.gcount() != static_cast<std::streamsize>(map.labels.size()))
        throw IoError("truncated PGM payload");
    return map;
}

std::string read_file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open " + p.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_file_bytes(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot create " + p.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + p.string());
}

std::string sha256_file(const fs::path& p) {
    const std::string bytes = read_file_bytes(p);
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex_digest();
}

namespace {

constexpr const char* kManifestName = "manifest.json";

json sample_sidecar(const FaceSample& s) {
    return json{{"family", s.family},
                {"manipulation", to_string(s.manipulation)},
                {"sub_type", to_string(s.sub_type)},
                {"class_index", s.class_index},
                {"seed", s.seed},
                {"prompt_text", s.prompt_text},
                {"prompt_tokens", s.prompt_tokens}};
}

struct SampleFiles {
    std::string image, parsing, meta;
};

SampleFiles sample_paths(const FaceSample& s, const std::string& role, int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%05d", role.c_str(), index);
    const std::string stem = s.family + "/" + buf;
    return {stem + ".ppm", stem + ".pgm", stem + ".json"};
}

json split_to_json(const DatasetSplit& s) {
    return json{{"seen_families", s.seen_families},
                {"unseen_families", s.unseen_families},
                {"train_count", s.train_count},
                {"test_count", s.test_count},
                {"include_real", s.include_real},
                {"image_size", s.image_size},
                {"prompt_len", s.prompt_len}};
}

DatasetSplit split_from_json(const json& j) {
    DatasetSplit s;
    s.seen_families = j.at("seen_families").get<std::vector<std::string>>();
    s.unseen_families = j.at("unseen_families").get<std::vector<std::string>>();
    s.train_count = j.at("train_count").get<int>();
    s.test_count = j.at("test_count").get<int>();
    s.include_real = j.at("include_real").get<bool>();
    s.image_size = j.at("image_size").get<int>();
    s.prompt_len = j.at("prompt_len").get<int>();
    return s;
}

} // namespace

json family_to_json(const GeneratorFamily& f) {
    const ArtifactSignature& s = f.signature;
    return json{{"name", f.name},
                {"manipulation", to_string(f.manipulation)},
                {"sub_type", to_string(f.sub_type)},
                {"parsing_degradation", f.parsing_degradation},
                {"signature",
                 {{"stripe_amp", s.stripe_amp},
                  {"stripe_fx", s.stripe_fx},
                  {"stripe_fy", s.stripe_fy},
                  {"stripe2_amp", s.stripe2_amp},
                  {"stripe2_fx", s.stripe2_fx},
                  {"stripe2_fy", s.stripe2_fy},
                  {"blotch_amp", s.blotch_amp},
                  {"blotch_scale", s.blotch_scale},
                  {"blotch_count", s.blotch_count},
                  {"blur_mix", s.blur_mix},
                  {"blend_alpha", s.blend_alpha},
                  {"blend_frac", s.blend_frac},
                  {"blend_feather", s.blend_feather},
                  {"hue_amp", s.hue_amp},
                  {"hue_region", s.hue_region}}}};
}

GeneratorFamily family_from_json(const json& j) {
    GeneratorFamily f;
    f.name = j.at("name").get<std::string>();
    f.manipulation = manipulation_from_string(j.at("manipulation").get<std::string>());
    f.sub_type = sub_type_from_string(j.at("sub_type").get<std::string>());
    f.parsing_degradation = j.at("parsing_degradation").get<double>();
    if (j.contains("signature")) {
        const json& s = j.at("signature");
        auto get = [&s](const char* k) { return s.value(k, 0.0); };
        f.signature.stripe_amp = get("stripe_amp");
        f.signature.stripe_fx = get("stripe_fx");
        f.signature.stripe_fy = get("stripe_fy");
        f.signature.stripe2_amp = get("stripe2_amp");
        f.signature.stripe2_fx = get("stripe2_fx");
        f.signature.stripe2_fy = get("stripe2_fy");
        f.signature.blotch_amp = get("blotch_amp");
        f.signature.blotch_scale = get("blotch_scale");
        f.signature.blotch_count = s.value("blotch_count", 0);
        f.signature.blur_mix = get("blur_mix");
        f.signature.blend_alpha = get("blend_alpha");
        f.signature.blend_frac = get("blend_frac");
        f.signature.blend_feather = get("blend_feather");
        f.signature.hue_amp = get("hue_amp");
        f.signature.hue_region = s.value("hue_region", 0);
    }
    return f;
}

namespace {

json build_manifest(const ProtocolData& data, const DatasetMeta& meta,
                    const fs::path& root, bool hash_existing) {
    json samples = json::array();
    auto emit = [&](const std::vector<FaceSample>& set, const std::string& role) {
        std::unordered_map<std::string, int> per_family;
        for (const auto& s : set) {
            const int index = per_family[s.family]++;
            const SampleFiles files = sample_paths(s, role, index);
            json entry{{"family", s.family},
                       {"role", role},
                       {"index", index},
                       {"image", files.image},
                       {"parsing", files.parsing},
                       {"meta", files.meta}};
            if (hash_existing) {
                entry["sha256_image"] = sha256_file(root / files.image);
                entry["sha256_parsing"] = sha256_file(root / files.parsing);
                entry["sha256_meta"] = sha256_file(root / files.meta);
            }
            samples.push_back(std::move(entry));
        }
    };
    emit(data.train, "train");
    emit(data.test, "test");
    json families = json::array();
    for (const auto& f : meta.families) families.push_back(family_to_json(f));
    return json{{"version", 1},
                {"seed", meta.seed},
                {"split", split_to_json(meta.split)},
                {"families", std::move(families)},
                {"class_names", meta.class_names},
                {"vocab", meta.vocab},
                {"config_hash", meta.config_hash},
                {"samples", std::move(samples)}};
}

} // namespace

BuildStatus write_dataset(const fs::path& root, const ProtocolData& data,
                          const DatasetMeta& meta) {
    const fs::path manifest_path = root / kManifestName;
    if (fs::exists(manifest_path)) {
        verify_dataset(root);
        return BuildStatus::Verified;
    }
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create dataset directory " + root.string());

    auto write_set = [&](const std::vector<FaceSample>& set, const std::string& role) {
        std::unordered_map<std::string, int> per_family;
        for (const auto& s : set) {
            const int index = per_family[s.family]++;
            const SampleFiles files = sample_paths(s, role, index);
            fs::create_directories(root / s.family, ec);
            if (ec) throw IoError("cannot create " + (root / s.family).string());
            write_file_bytes(root / files.image, encode_ppm(s.image));
            write_file_bytes(root / files.parsing, encode_pgm(s.parsing));
            write_file_bytes(root / files.meta, sample_sidecar(s).dump(2) + "\n");
        }
    };
    write_set(data.train, "train");
    write_set(data.test, "test");

    const json manifest = build_manifest(data, meta, root, /*hash_existing=*/true);
    write_file_bytes(manifest_path, manifest.dump(2) + "\n");
    return BuildStatus::Written;
}

LoadedDataset read_dataset(const fs::path& root) {
    const fs::path manifest_path = root / kManifestName;
    if (!fs::exists(manifest_path))
        throw IoError("no dataset manifest at " + manifest_path.string());
    const json manifest = json::parse(read_file_bytes(manifest_path));

    LoadedDataset out;
    out.meta.seed = manifest.at("seed").get<std::uint64_t>();
    out.meta.split = split_from_json(manifest.at("split"));
    for (const auto& fj : manifest.at("families"))
        out.meta.families.push_back(family_from_json(fj));
    out.meta.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    out.meta.vocab = manifest.at("vocab").get<std::vector<std::string>>();
    out.meta.config_hash = manifest.at("config_hash").get<std::string>();
    out.data.class_names = out.meta.class_names;

    for (const auto& entry : manifest.at("samples")) {
        FaceSample s;
        s.image = decode_ppm(read_file_bytes(root / entry.at("image").get<std::string>()));
        s.parsing = decode_pgm(read_file_bytes(root / entry.at("parsing").get<std::string>()));
        const json side = json::parse(read_file_bytes(root / entry.at("meta").get<std::string>()));
        s.family = side.at("family").get<std::string>();
        s.manipulation = manipulation_from_string(side.at("manipulation").get<std::string>());
        s.sub_type = sub_type_from_string(side.at("sub_type").get<std::string>());
        s.class_index = side.at("class_index").get<int>();
        s.seed = side.at("seed").get<std::uint64_t>();
        s.prompt_text = side.at("prompt_text").get<std::string>();
        s.prompt_tokens = side.at("prompt_tokens").get<std::vector<int>>();
        if (entry.at("role").get<std::string>() == "train")
            out.data.train.push_back(std::move(s));
        else
            out.data.test.push_back(std::move(s));
    }
    return out;
}

void verify_dataset(const fs::path& root) {
    const fs::path manifest_path = root / kManifestName;
    if (!fs::exists(manifest_path))
        throw IoError("no dataset manifest at " + manifest_path.string());
    const json manifest = json::parse(read_file_bytes(manifest_path));
    for (const auto& entry : manifest.at("samples")) {
        for (const auto& [file_key, hash_key] :
             {std::pair{"image", "sha256_image"}, {"parsing", "sha256_parsing"},
              {"meta", "sha256_meta"}}) {
            const fs::path p = root / entry.at(file_key).get<std::string>();
            if (!fs::exists(p)) throw IoError("dataset file missing: " + p.string());
            const std::string actual = sha256_file(p);
            const std::string expected = entry.at(hash_key).get<std::string>();
            if (actual != expected)
                throw IoError("checksum mismatch for " + p.string());
        }
    }
}

std::string dataset_manifest_hash(const fs::path& root) {
    return sha256_file(root / kManifestName);
}

} // namespace zsdfa
