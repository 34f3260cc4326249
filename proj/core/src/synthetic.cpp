#include "zsdfa/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "zsdfa/parallel.hpp"
#include "zsdfa/rng.hpp"

namespace zsdfa {

const char* to_string(ManipulationType t) {
    switch (t) {
        case ManipulationType::EFS: return "efs";
        case ManipulationType::FS: return "fs";
        case ManipulationType::AM: return "am";
        case ManipulationType::FR: return "fr";
        case ManipulationType::TF: return "tf";
        case ManipulationType::REAL: return "real";
    }
    return "?";
}

const char* to_string(SubType t) {
    switch (t) {
        case SubType::GAN: return "gan";
        case SubType::Diffusion: return "diffusion";
        case SubType::Flow: return "flow";
        case SubType::None: return "none";
    }
    return "?";
}

ManipulationType manipulation_from_string(const std::string& s) {
    if (s == "efs") return ManipulationType::EFS;
    if (s == "fs") return ManipulationType::FS;
    if (s == "am") return ManipulationType::AM;
    if (s == "fr") return ManipulationType::FR;
    if (s == "tf") return ManipulationType::TF;
    if (s == "real") return ManipulationType::REAL;
    throw ConfigError("unknown manipulation type '" + s + "'");
}

SubType sub_type_from_string(const std::string& s) {
    if (s == "gan") return SubType::GAN;
    if (s == "diffusion") return SubType::Diffusion;
    if (s == "flow") return SubType::Flow;
    if (s == "none") return SubType::None;
    throw ConfigError("unknown sub-type '" + s + "'");
}

std::vector<double> ArtifactSignature::flat() const {
    return {stripe_amp,  stripe_fx,  stripe_fy,   stripe2_amp, stripe2_fx,
            stripe2_fy,  blotch_amp, blotch_scale, double(blotch_count),
            blur_mix,    blend_alpha, blend_frac,  blend_feather,
            hue_amp,     double(hue_region)};
}

// ---------------------------------------------------------------------------
// Family catalogue
// ---------------------------------------------------------------------------

FamilyCatalogue::FamilyCatalogue(std::vector<GeneratorFamily> families)
    : families_(std::move(families)) {
    validate();
}

FamilyCatalogue FamilyCatalogue::builtin() {
    std::vector<GeneratorFamily> fams;

    GeneratorFamily real;
    real.name = "real";
    real.manipulation = ManipulationType::REAL;
    real.sub_type = SubType::None;
    real.parsing_degradation = 0.0;
    fams.push_back(real);

    // Seen fakes. The stripe/blotch parameters give each family a distinct
    // spectral footprint; the degradation rates encode that GAN parsings stay
    // cleaner than diffusion ones.
    {
        GeneratorFamily f;
        f.name = "gridgan";
        f.manipulation = ManipulationType::EFS;
        f.sub_type = SubType::GAN;
        f.signature.stripe_amp = 20;
        f.signature.stripe_fx = 12;
        f.signature.stripe_fy = 3;
        f.parsing_degradation = 0.10;
        fams.push_back(f);
    }
    {
        GeneratorFamily f;
        f.name = "meshgan";
        f.manipulation = ManipulationType::FS;
        f.sub_type = SubType::GAN;
        f.signature.stripe_amp = 14;
        f.signature.stripe_fx = 20;
        f.signature.stripe_fy = 16;
        f.signature.blend_alpha = 0.85;
        f.signature.blend_frac = 0.45;
        f.signature.blend_feather = 0.08;
        f.parsing_degradation = 0.10;
        fams.push_back(f);
    }
    {
        GeneratorFamily f;
        f.name = "huegan";
        f.manipulation = ManipulationType::AM;
        f.sub_type = SubType::GAN;
        f.signature.hue_amp = 26;
        f.signature.hue_region = kHair;
        f.signature.stripe_amp = 10;
        f.signature.stripe_fx = 5;
        f.signature.stripe_fy = 19;
        f.parsing_degradation = 0.10;
        fams.push_back(f);
    }
    {
        GeneratorFamily f;
        f.name = "mistdiff";
        f.manipulation = ManipulationType::EFS;
        f.sub_type = SubType::Diffusion;
        f.signature.blotch_amp = 24;
        f.signature.blotch_scale = 0.16;
        f.signature.blotch_count = 6;
        f.signature.blur_mix = 0.5;
        f.parsing_degradation = 0.40;
        fams.push_back(f);
    }
    {
        GeneratorFamily f;
        f.name = "dewdiff";
        f.manipulation = ManipulationType::EFS;
        f.sub_type = SubType::Diffusion;
        f.signature.blotch_amp = 24;
        f.signature.blotch_scale = 0.05;
        f.signature.blotch_count = 20;
        f.signature.blur_mix = 0.9;
        f.parsing_degradation = 0.40;
        fams.push_back(f);
    }

    // Unseen fakes: signatures interpolate between seen ones so a trained
    // attributor faces genuinely ambiguous evidence.
    {
        GeneratorFamily f;
        f.name = "veildiff";
        f.manipulation = ManipulationType::FS;
        f.sub_type = SubType::Diffusion;
        f.signature.blend_alpha = 0.80;
        f.signature.blend_frac = 0.40;
        f.signature.blend_feather = 0.10;
        f.signature.blotch_amp = 16;
        f.signature.blotch_scale = 0.12;
        f.signature.blotch_count = 8;
        f.signature.blur_mix = 0.35;
        f.parsing_degradation = 0.40;
        fams.push_back(f);
    }
    {
        GeneratorFamily f;
        f.name = "flickgan";
        f.manipulation = ManipulationType::FR;
        f.sub_type = SubType::GAN;
        f.signature.stripe_amp = 17;
        f.signature.stripe_fx = 16;
        f.signature.stripe_fy = 9;
        f.parsing_degradation = 0.10;
        fams.push_back(f);
    }
    {
        GeneratorFamily f;
        f.name = "plaidflow";
        f.manipulation = ManipulationType::TF;
        f.sub_type = SubType::Flow;
        f.signature.stripe_amp = 12;
        f.signature.stripe_fx = 11;
        f.signature.stripe_fy = 4;
        f.signature.stripe2_amp = 12;
        f.signature.stripe2_fx = 19;
        f.signature.stripe2_fy = 15;
        f.parsing_degradation = 0.25;
        fams.push_back(f);
    }
    return FamilyCatalogue(std::move(fams));
}

const GeneratorFamily& FamilyCatalogue::get(const std::string& name) const {
    for (const auto& f : families_)
        if (f.name == name) return f;
    throw ConfigError("unknown generator family '" + name + "'");
}

bool FamilyCatalogue::contains(const std::string& name) const {
    for (const auto& f : families_)
        if (f.name == name) return true;
    return false;
}

void FamilyCatalogue::validate() const {
    double max_gan = 0.0, min_diff = 1.0;
    bool any_gan = false, any_diff = false;
    std::set<std::string> names;
    for (const auto& f : families_) {
        if (!names.insert(f.name).second)
            throw ConfigError("duplicate family name '" + f.name + "'");
        if (f.parsing_degradation < 0.0 || f.parsing_degradation > 1.0)
            throw ConfigError("family '" + f.name + "' degradation outside [0, 1]");
        if (f.is_real() && f.parsing_degradation != 0.0)
            throw ConfigError("the real family must have degradation 0");
        if (f.sub_type == SubType::GAN) {
            any_gan = true;
            max_gan = std::max(max_gan, f.parsing_degradation);
        }
        if (f.sub_type == SubType::Diffusion) {
            any_diff = true;
            min_diff = std::min(min_diff, f.parsing_degradation);
        }
    }
    if (any_gan && any_diff && !(max_gan < min_diff))
        throw ConfigError("GAN families must degrade parsing less than diffusion families");
    for (std::size_t i = 0; i < families_.size(); ++i) {
        for (std::size_t j = i + 1; j < families_.size(); ++j) {
            const auto a = families_[i].signature.flat();
            const auto b = families_[j].signature.flat();
            double dist = 0;
            for (std::size_t k = 0; k < a.size(); ++k) dist += (a[k] - b[k]) * (a[k] - b[k]);
            if (dist == 0.0)
                throw ConfigError("families '" + families_[i].name + "' and '" +
                                  families_[j].name + "' share an identical signature");
        }
    }
}

// ---------------------------------------------------------------------------
// Face renderer
// ---------------------------------------------------------------------------

namespace {

struct Ellipse {
    double cx, cy, rx, ry;
    bool contains(double x, double y) const {
        const double dx = (x - cx) / rx;
        const double dy = (y - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
};

struct Rect {
    double cx, cy, hx, hy;
    bool contains(double x, double y) const {
        return std::abs(x - cx) <= hx && std::abs(y - cy) <= hy;
    }
};

struct Palette {
    double bg1[3], bg2[3], gx, gy;
    double skin[3], hair[3], eye[3], brow[3], mouth[3], nose[3];
};

} // namespace

std::pair<Image, ParsingMap> render_face(std::uint64_t seed, int size) {
    if (size < 32) throw ConfigError("render_face: size must be >= 32, got " + std::to_string(size));
    Rng r(seed);

    Palette pal{};
    for (int c = 0; c < 3; ++c) pal.bg1[c] = r.uniform(30, 225);
    for (int c = 0; c < 3; ++c) pal.bg2[c] = r.uniform(30, 225);
    const double ang = r.uniform(0, 2 * std::numbers::pi);
    pal.gx = std::cos(ang);
    pal.gy = std::sin(ang);
    pal.skin[0] = r.uniform(170, 230);
    pal.skin[1] = r.uniform(120, 185);
    pal.skin[2] = r.uniform(95, 150);
    for (int c = 0; c < 3; ++c) pal.hair[c] = r.uniform(20, 120);
    for (int c = 0; c < 3; ++c) pal.eye[c] = r.uniform(20, 80);
    for (int c = 0; c < 3; ++c) pal.brow[c] = std::max(5.0, pal.hair[c] - r.uniform(10, 20));
    pal.mouth[0] = r.uniform(140, 210);
    pal.mouth[1] = r.uniform(40, 90);
    pal.mouth[2] = r.uniform(60, 110);
    for (int c = 0; c < 3; ++c) pal.nose[c] = std::clamp(pal.skin[c] - r.uniform(15, 35), 0.0, 255.0);

    // Geometry in [0, 1] coordinates; margins keep every region visible from
    // size 64 up.
    const double cx = 0.5 + r.uniform(-0.03, 0.03);
    const double cy = 0.52 + r.uniform(-0.03, 0.03);
    const Ellipse head{cx, cy, 0.27 + r.uniform(0, 0.05), 0.36 + r.uniform(0, 0.04)};
    const Ellipse hair{cx, cy - 0.14, head.rx * 1.22, head.ry * 0.95};
    const double eye_dx = 0.12 + r.uniform(0, 0.02);
    const double eye_y = cy - 0.10 - r.uniform(0, 0.03);
    const double eye_rx = 0.05 + r.uniform(0, 0.012);
    const double eye_ry = 0.032 + r.uniform(0, 0.008);
    const Ellipse eye_l{cx - eye_dx, eye_y, eye_rx, eye_ry};
    const Ellipse eye_r{cx + eye_dx, eye_y, eye_rx, eye_ry};
    const double brow_y = eye_y - 0.075 - r.uniform(0, 0.01);
    const Rect brow_l{cx - eye_dx, brow_y, eye_rx * 1.35, 0.022 + r.uniform(0, 0.008)};
    const Rect brow_r{cx + eye_dx, brow_y, eye_rx * 1.35, brow_l.hy};
    const Ellipse nose{cx, cy + 0.03, 0.032 + r.uniform(0, 0.01), 0.065 + r.uniform(0, 0.015)};
    const Ellipse mouth{cx, cy + 0.20 + r.uniform(0, 0.02), 0.09 + r.uniform(0, 0.03),
                        0.028 + r.uniform(0, 0.01)};

    Image img(size, size);
    ParsingMap map(size, size);
    const double inv = 1.0 / size;
    for (int yi = 0; yi < size; ++yi) {
        for (int xi = 0; xi < size; ++xi) {
            const double x = (xi + 0.5) * inv;
            const double y = (yi + 0.5) * inv;
            std::uint8_t label;
            const double* base;
            if (eye_l.contains(x, y) || eye_r.contains(x, y)) {
                label = kEye;
                base = pal.eye;
            } else if (brow_l.contains(x, y) || brow_r.contains(x, y)) {
                label = kBrow;
                base = pal.brow;
            } else if (nose.contains(x, y)) {
                label = kNose;
                base = pal.nose;
            } else if (mouth.contains(x, y)) {
                label = kMouth;
                base = pal.mouth;
            } else if (head.contains(x, y)) {
                label = kSkin;
                base = pal.skin;
            } else if (hair.contains(x, y)) {
                label = kHair;
                base = pal.hair;
            } else {
                label = kBackground;
                base = nullptr;
            }
            map.at(yi, xi) = label;

            double col[3];
            if (base) {
                for (int c = 0; c < 3; ++c) col[c] = base[c];
            } else {
                double t = 0.5 + 0.5 * ((x - 0.5) * pal.gx + (y - 0.5) * pal.gy) / 0.7071;
                t = std::clamp(t, 0.0, 1.0);
                for (int c = 0; c < 3; ++c) col[c] = pal.bg1[c] + t * (pal.bg2[c] - pal.bg1[c]);
            }
            // Per-pixel texture so intensity statistics are never degenerate.
            const std::uint64_t n = hash_seed(seed, static_cast<std::uint64_t>(yi) * size + xi);
            for (int c = 0; c < 3; ++c) {
                const double jitter = double((n >> (8 * c)) & 0xf) - 7.5;
                img.at(yi, xi, c) = clamp_u8(col[c] + jitter * 0.8);
            }
        }
    }
    return {std::move(img), std::move(map)};
}

// ---------------------------------------------------------------------------
// Artifact injection
// ---------------------------------------------------------------------------

namespace {

Image box3_blur(const Image& in) {
    Image out(in.h, in.w);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = std::clamp(y + dy, 0, in.h - 1);
                        const int xx = std::clamp(x + dx, 0, in.w - 1);
                        acc += in.at(yy, xx, c);
                    }
                out.at(y, x, c) = clamp_u8(acc / 9.0);
            }
    return out;
}

} // namespace

Image inject_artifact(const Image& image, const ParsingMap& parsing,
                      const GeneratorFamily& family, std::uint64_t seed) {
    if (family.is_real())
        throw ContractError("inject_artifact: the real family carries no artifact");
    if (parsing.h != image.h || parsing.w != image.w)
        throw ShapeError("inject_artifact: parsing map does not match image size");

    const ArtifactSignature& sig = family.signature;
    const int size = image.h;
    std::vector<double> acc(image.px.size());
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = image.px[i];

    Rng r(hash_seed(seed, 0xa51fULL));

    if (sig.stripe_amp != 0 || sig.stripe2_amp != 0) {
        const double phase1 = r.uniform(0, 2 * std::numbers::pi);
        const double phase2 = r.uniform(0, 2 * std::numbers::pi);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double v = 0;
                if (sig.stripe_amp != 0)
                    v += sig.stripe_amp *
                         std::sin(2 * std::numbers::pi * (sig.stripe_fx * x + sig.stripe_fy * y) / size +
                                  phase1);
                if (sig.stripe2_amp != 0)
                    v += sig.stripe2_amp *
                         std::sin(2 * std::numbers::pi * (sig.stripe2_fx * x + sig.stripe2_fy * y) / size +
                                  phase2);
                for (int c = 0; c < 3; ++c) acc[(static_cast<std::size_t>(y) * size + x) * 3 + c] += v;
            }
    }

    if (sig.blend_alpha != 0) {
        auto [donor, donor_map] = render_face(hash_seed(seed, 0xb1e2dULL), size);
        (void)donor_map;
        const double side = sig.blend_frac * size;
        const double cx = r.uniform(0.3, 0.7) * size;
        const double cy = r.uniform(0.3, 0.7) * size;
        const double feather = std::max(1.0, sig.blend_feather * size);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double dx = side / 2 - std::abs(x - cx);
                const double dy = side / 2 - std::abs(y - cy);
                const double edge = std::min(dx, dy);
                if (edge <= 0) continue;
                const double alpha = sig.blend_alpha * std::min(1.0, edge / feather);
                for (int c = 0; c < 3; ++c) {
                    const std::size_t i = (static_cast<std::size_t>(y) * size + x) * 3 + c;
                    acc[i] += alpha * (donor.px[i] - acc[i]);
                }
            }
    }

    if (sig.blotch_amp != 0) {
        for (int k = 0; k < sig.blotch_count; ++k) {
            const double bx = r.uniform(0.1, 0.9) * size;
            const double by = r.uniform(0.1, 0.9) * size;
            const double sigma = sig.blotch_scale * size * (0.75 + 0.5 * r.uniform());
            const double amp = sig.blotch_amp * (0.6 + 0.8 * r.uniform()) * (r.uniform() < 0.5 ? -1 : 1);
            double camp[3];
            for (int c = 0; c < 3; ++c) camp[c] = amp * (0.7 + 0.6 * r.uniform());
            const double reach = 3.0 * sigma;
            const int y0 = std::max(0, int(by - reach)), y1 = std::min(size - 1, int(by + reach));
            const int x0 = std::max(0, int(bx - reach)), x1 = std::min(size - 1, int(bx + reach));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
                    const double g = std::exp(-d2 / (2 * sigma * sigma));
                    for (int c = 0; c < 3; ++c)
                        acc[(static_cast<std::size_t>(y) * size + x) * 3 + c] += camp[c] * g;
                }
        }
    }

    if (sig.hue_amp != 0) {
        const double dr = 0.8 * sig.hue_amp, dg = -0.35 * sig.hue_amp, db = 0.5 * sig.hue_amp;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                if (parsing.at(y, x) != sig.hue_region) continue;
                const std::size_t i = (static_cast<std::size_t>(y) * size + x) * 3;
                acc[i + 0] += dr;
                acc[i + 1] += dg;
                acc[i + 2] += db;
            }
    }

    Image out(size, size);
    for (std::size_t i = 0; i < acc.size(); ++i) out.px[i] = clamp_u8(acc[i]);

    // Diffusion-style smoothing, proportional to the blotch amplitude so a
    // zero-amplitude signature stays the exact identity.
    const double w = sig.blur_mix * std::min(1.0, sig.blotch_amp / 24.0);
    if (w > 0) {
        Image blurred = box3_blur(out);
        for (std::size_t i = 0; i < out.px.size(); ++i)
            out.px[i] = clamp_u8(out.px[i] + w * (double(blurred.px[i]) - out.px[i]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parsing degradation
// ---------------------------------------------------------------------------

ParsingMap degrade_parsing(const ParsingMap& parsing, double delta, std::uint64_t seed) {
    if (delta < 0.0 || delta > 1.0)
        throw ConfigError("degrade_parsing: delta must be in [0, 1], got " + std::to_string(delta));
    ParsingMap out = parsing;
    if (delta == 0.0) return out;
    Rng r(hash_seed(seed, 0xdeAD0ULL));
    const int h = parsing.h, w = parsing.w;
    // Boundary membership comes from the input map and random draws are
    // consumed for every boundary pixel, so the flip set at a smaller delta
    // is a pointwise subset of the flip set at a larger one.
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::uint8_t own = parsing.at(y, x);
            std::uint8_t neighbors[4];
            int distinct = 0;
            auto consider = [&](int yy, int xx) {
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) return;
                const std::uint8_t l = parsing.at(yy, xx);
                if (l != own) neighbors[distinct++] = l;
            };
            consider(y - 1, x);
            consider(y + 1, x);
            consider(y, x - 1);
            consider(y, x + 1);
            if (distinct == 0) continue;
            const double u = r.uniform();
            const std::uint64_t pick = r.next_u64();
            if (u < delta) out.at(y, x) = neighbors[pick % distinct];
        }
    return out;
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

namespace {

std::string strip_punct(const std::string& w) {
    std::size_t b = 0, e = w.size();
    while (b < e && !std::isalnum(static_cast<unsigned char>(w[b])) && w[b] != '_') ++b;
    while (e > b && !std::isalnum(static_cast<unsigned char>(w[e - 1])) && w[e - 1] != '_') --e;
    std::string s = w.substr(b, e - b);
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return s;
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text + " ") {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                auto s = strip_punct(cur);
                if (!s.empty()) out.push_back(s);
                cur.clear();
            }
        } else {
            cur.push_back(ch);
        }
    }
    return out;
}

} // namespace

Vocabulary Vocabulary::build(const FamilyCatalogue& catalogue) {
    Vocabulary v;
    auto push = [&v](const std::string& w) {
        if (!v.index_.contains(w)) {
            v.index_[w] = static_cast<int>(v.words_.size());
            v.words_.push_back(w);
        }
    };
    push("<pad>");
    for (const char* w : {"a", "real", "fake", "face", "image", "manipulation",
                          "architecture", "generator"})
        push(w);
    for (const auto& f : catalogue.families()) {
        push(to_string(f.manipulation));
        push(to_string(f.sub_type));
        push(strip_punct(f.name));
    }
    return v;
}

int Vocabulary::id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end())
        throw ConfigError("word '" + word + "' is not in the prompt vocabulary");
    return it->second;
}

std::string prompt_text(const GeneratorFamily& family) {
    const std::string real_or_fake = family.is_real() ? "real" : "fake";
    return "a " + real_or_fake + " face image, manipulation " +
           to_string(family.manipulation) + ", architecture " + to_string(family.sub_type) +
           ", generator " + family.name;
}

std::vector<int> make_prompt(const GeneratorFamily& family, const Vocabulary& vocab,
                             int prompt_len) {
    const auto words = tokenize(prompt_text(family));
    if (static_cast<int>(words.size()) > prompt_len)
        throw ConfigError("prompt for family '" + family.name + "' needs " +
                          std::to_string(words.size()) + " tokens, prompt_len is " +
                          std::to_string(prompt_len));
    std::vector<int> tokens(prompt_len, 0);
    for (std::size_t i = 0; i < words.size(); ++i) tokens[i] = vocab.id(words[i]);
    return tokens;
}

// ---------------------------------------------------------------------------
// Sample and protocol assembly
// ---------------------------------------------------------------------------

FaceSample make_sample(const GeneratorFamily& family, std::uint64_t seed, int size,
                       const Vocabulary& vocab, int prompt_len, int class_index) {
    auto [image, parsing] = render_face(seed, size);
    if (!family.is_real()) image = inject_artifact(image, parsing, family, seed);
    parsing = degrade_parsing(parsing, family.parsing_degradation, seed);

    std::set<std::uint8_t> present(parsing.labels.begin(), parsing.labels.end());
    if (present.size() < 3)
        throw DataError("sample for '" + family.name + "' covers only " +
                        std::to_string(present.size()) + " parsing regions");

    FaceSample s;
    s.image = std::move(image);
    s.parsing = std::move(parsing);
    s.family = family.name;
    s.manipulation = family.manipulation;
    s.sub_type = family.sub_type;
    s.class_index = class_index;
    s.prompt_text = prompt_text(family);
    s.prompt_tokens = make_prompt(family, vocab, prompt_len);
    s.seed = seed;
    return s;
}

std::vector<std::string> DatasetSplit::class_names() const {
    std::vector<std::string> names = seen_families;
    if (include_real) names.push_back("real");
    return names;
}

namespace {

std::uint64_t family_tag(const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

ProtocolData build_protocol(const FamilyCatalogue& catalogue, const DatasetSplit& split,
                            std::uint64_t seed, int threads) {
    if (split.train_count < 1 || split.test_count < 1)
        throw ConfigError("build_protocol: per-family counts must be >= 1");
    if (split.seen_families.size() < 2)
        throw ConfigError("build_protocol: need at least 2 seen families");
    for (const auto& s : split.seen_families)
        for (const auto& u : split.unseen_families)
            if (s == u)
                throw ConfigError("family '" + s + "' appears in both seen and unseen lists");
    for (const auto& name : split.seen_families)
        if (catalogue.get(name).is_real())
            throw ConfigError("the real family is controlled by include_real, not the seen list");
    for (const auto& name : split.unseen_families) catalogue.get(name);

    const Vocabulary vocab = Vocabulary::build(catalogue);
    const auto classes = split.class_names();
    auto class_of = [&classes](const std::string& name) {
        for (std::size_t i = 0; i < classes.size(); ++i)
            if (classes[i] == name) return static_cast<int>(i);
        return -1;
    };

    std::vector<std::string> test_families = classes;
    for (const auto& u : split.unseen_families) test_families.push_back(u);

    ProtocolData data;
    data.class_names = classes;
    data.train.resize(classes.size() * split.train_count);
    data.test.resize(test_families.size() * split.test_count);

    const int workers = effective_threads(threads);
    parallel_for(data.train.size(), workers, [&](std::size_t i) {
        const std::size_t fi = i / split.train_count;
        const int idx = static_cast<int>(i % split.train_count);
        const auto& fam = catalogue.get(classes[fi]);
        const std::uint64_t s = hash_seed(seed, family_tag(fam.name), idx);
        data.train[i] = make_sample(fam, s, split.image_size, vocab, split.prompt_len,
                                    static_cast<int>(fi));
    });
    parallel_for(data.test.size(), workers, [&](std::size_t i) {
        const std::size_t fi = i / split.test_count;
        const int idx = static_cast<int>(i % split.test_count);
        const auto& fam = catalogue.get(test_families[fi]);
        const std::uint64_t s =
            hash_seed(seed, family_tag(fam.name), split.train_count + idx);
        data.test[i] = make_sample(fam, s, split.image_size, vocab, split.prompt_len,
                                   class_of(fam.name));
    });
    return data;
}

} // namespace zsdfa
