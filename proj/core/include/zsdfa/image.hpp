#pragma once

#include <cstdint>
#include <vector>

#include "zsdfa/errors.hpp"

namespace zsdfa {

/// Interleaved 8-bit RGB image, row-major.
struct Image {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> px;  // h * w * 3

    Image() = default;
    Image(int height, int width)
        : h(height), w(width), px(static_cast<std::size_t>(height) * width * 3, 0) {}

    std::uint8_t& at(int y, int x, int c) {
        return px[(static_cast<std::size_t>(y) * w + x) * 3 + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return px[(static_cast<std::size_t>(y) * w + x) * 3 + c];
    }
    bool operator==(const Image&) const = default;
};

/// Per-pixel facial attribute labels.
enum ParsingLabel : std::uint8_t {
    kBackground = 0,
    kSkin = 1,
    kBrow = 2,
    kEye = 3,
    kNose = 4,
    kMouth = 5,
    kHair = 6,
};
inline constexpr int kNumParsingLabels = 7;

struct ParsingMap {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> labels;  // h * w

    ParsingMap() = default;
    ParsingMap(int height, int width)
        : h(height), w(width), labels(static_cast<std::size_t>(height) * width, 0) {}

    std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
    bool operator==(const ParsingMap&) const = default;
};

inline std::uint8_t clamp_u8(double v) {
    if (v <= 0.0) return 0;
    if (v >= 255.0) return 255;
    return static_cast<std::uint8_t>(v + 0.5);
}

} // namespace zsdfa
