#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "zsdfa/image.hpp"

// Procedural face benchmark: renders face-like images with exact parsing
// maps, stamps a per-family artifact signature on fake samples, degrades the
// parsing with a family-dependent rate, and attaches hierarchical labels plus
// text prompts.

namespace zsdfa {

enum class ManipulationType { EFS, FS, AM, FR, TF, REAL };
enum class SubType { GAN, Diffusion, Flow, None };

const char* to_string(ManipulationType t);
const char* to_string(SubType t);
ManipulationType manipulation_from_string(const std::string& s);
SubType sub_type_from_string(const std::string& s);

/// Parametric artifact injector. Components with zero amplitude are inactive;
/// an all-zero signature is the identity.
struct ArtifactSignature {
    // High-frequency sinusoidal pattern (and an optional second component).
    double stripe_amp = 0, stripe_fx = 0, stripe_fy = 0;
    double stripe2_amp = 0, stripe2_fx = 0, stripe2_fy = 0;
    // Smooth low-frequency color blotches; blur rides on the blotch amplitude.
    double blotch_amp = 0, blotch_scale = 0;
    int blotch_count = 0;
    double blur_mix = 0;
    // Rectangular alpha-blend of a second rendered face.
    double blend_alpha = 0, blend_frac = 0, blend_feather = 0;
    // Hue rotation confined to one parsing region.
    double hue_amp = 0;
    int hue_region = 0;

    std::vector<double> flat() const;
};

struct GeneratorFamily {
    std::string name;
    ManipulationType manipulation = ManipulationType::REAL;
    SubType sub_type = SubType::None;
    ArtifactSignature signature;
    double parsing_degradation = 0.0;  // in [0, 1]

    bool is_real() const { return manipulation == ManipulationType::REAL; }
};

/// The family roster. validate() enforces: the real family has degradation 0,
/// every GAN family degrades less than every Diffusion family, and signature
/// parameter vectors are pairwise distinct.
class FamilyCatalogue {
public:
    static FamilyCatalogue builtin();
    explicit FamilyCatalogue(std::vector<GeneratorFamily> families);

    const std::vector<GeneratorFamily>& families() const { return families_; }
    const GeneratorFamily& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    void validate() const;

private:
    std::vector<GeneratorFamily> families_;
};

/// Whitespace vocabulary over the prompt template plus every family label.
/// Token 0 is padding.
class Vocabulary {
public:
    static Vocabulary build(const FamilyCatalogue& catalogue);

    int id(const std::string& word) const;
    const std::vector<std::string>& words() const { return words_; }
    int size() const { return static_cast<int>(words_.size()); }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

struct FaceSample {
    Image image;
    ParsingMap parsing;
    std::string family;
    ManipulationType manipulation = ManipulationType::REAL;
    SubType sub_type = SubType::None;
    int class_index = -1;  // one-hot index among training classes; -1 if unseen
    std::vector<int> prompt_tokens;
    std::string prompt_text;
    std::uint64_t seed = 0;
};

struct DatasetSplit {
    std::vector<std::string> seen_families;    // fake families used for training
    std::vector<std::string> unseen_families;  // fake families seen only at test
    int train_count = 512;
    int test_count = 128;
    bool include_real = true;  // adds the real family to train and test
    int image_size = 64;
    int prompt_len = 16;

    /// Training classes in one-hot order: seen fakes, then the real family.
    std::vector<std::string> class_names() const;
};

struct ProtocolData {
    std::vector<FaceSample> train;
    std::vector<FaceSample> test;
    std::vector<std::string> class_names;
};

/// Deterministic face-like image plus its exact region geometry as the
/// parsing map. size must be >= 32; all 7 labels are present for size >= 64.
std::pair<Image, ParsingMap> render_face(std::uint64_t seed, int size);

/// Stamps the family signature onto the image. The clean parsing map locates
/// the region for hue-confined components. Rejects the real family.
Image inject_artifact(const Image& image, const ParsingMap& parsing,
                      const GeneratorFamily& family, std::uint64_t seed);

/// Flips boundary pixels to a neighboring region's label with probability
/// delta. Identity at delta = 0; the flip set grows pointwise with delta.
ParsingMap degrade_parsing(const ParsingMap& parsing, double delta, std::uint64_t seed);

std::string prompt_text(const GeneratorFamily& family);
std::vector<int> make_prompt(const GeneratorFamily& family, const Vocabulary& vocab,
                             int prompt_len);

FaceSample make_sample(const GeneratorFamily& family, std::uint64_t seed, int size,
                       const Vocabulary& vocab, int prompt_len, int class_index);

/// Materializes the train/test sets. Per-sample seeds derive from
/// hash(split_seed, family, index) so any parallel schedule produces samples
/// bit-identical to the serial one.
ProtocolData build_protocol(const FamilyCatalogue& catalogue, const DatasetSplit& split,
                            std::uint64_t seed, int threads = 0);

} // namespace zsdfa
