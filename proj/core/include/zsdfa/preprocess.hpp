#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zsdfa/image.hpp"
#include "zsdfa/tensor.hpp"

// Fixed (non-learned) input transforms: Sobel edge view, richest-patch
// selection, SRM noise residual view, and the corruption suite used by the
// robustness sweep. All functions are pure.

namespace zsdfa {

/// Sobel gradient magnitude of the mean-channel grayscale, replicate padding,
/// normalized to [0, 1] by the theoretical maximum 4 * 255 * sqrt(2).
/// Output shape [1 x H x W].
template <typename T = float>
Tensor<T> sobel_edges(const Image& image);

struct PatchOrigin {
    int row = 0;
    int col = 0;
};

/// Among non-overlapping p x p tiles (row-major grid) returns the tile with
/// the largest grayscale standard deviation; ties break to the smallest
/// row-major index. Returned origin is tile-aligned.
std::pair<Image, PatchOrigin> richest_patch(const Image& image, int p);

/// Convolves each channel with the three canonical SRM residual kernels
/// (first-order and second-order 3x3, 5x5 square, normalized by 1, 1/2 and
/// 1/12), sums the kernel outputs per channel, scales by 1/255 and clamps to
/// [-1, 1]. Replicate padding. Output shape [3 x p x p].
template <typename T = float>
Tensor<T> srm_noise(const Image& patch);

enum class CorruptionKind {
    Saturation,
    Contrast,
    GaussianNoise,
    Blur,
    Pixelate,
    Downscale,
    Crop,
};

const char* to_string(CorruptionKind k);
CorruptionKind corruption_from_string(const std::string& s);
const std::vector<CorruptionKind>& all_corruptions();

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::Saturation;
    int severity = 0;  // 0 (identity) .. 5
};

/// Per-kind severity tables (index = severity). Severity 0 is the identity
/// row for every kind.
struct CorruptionTables {
    std::vector<double> saturation = {1.0, 0.8, 0.6, 0.4, 0.2, 0.0};
    std::vector<double> contrast = {1.0, 0.85, 0.7, 0.55, 0.4, 0.25};
    std::vector<double> gaussian_sigma = {0, 4, 8, 16, 24, 32};
    std::vector<double> blur_sigma = {0, 0.5, 1.0, 1.5, 2.0, 3.0};
    std::vector<int> pixelate_block = {1, 2, 4, 8, 12, 16};
    std::vector<double> downscale_factor = {1.0, 0.75, 0.5, 0.33, 0.25, 0.2};
    std::vector<double> crop_fraction = {1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
};

/// Applies one corruption; deterministic in (image, spec, seed). Severity 0
/// returns a bit-identical copy.
Image corrupt(const Image& image, const CorruptionSpec& spec, std::uint64_t seed,
              const CorruptionTables& tables = {});

} // namespace zsdfa
