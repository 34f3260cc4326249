#include "zsdfa/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "zsdfa/rng.hpp"

namespace zsdfa {

namespace {

inline int reflect_clamp(int v, int n) { return std::clamp(v, 0, n - 1); }

std::vector<double> grayscale(const Image& image) {
    std::vector<double> g(static_cast<std::size_t>(image.h) * image.w);
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x)
            g[static_cast<std::size_t>(y) * image.w + x] =
                (double(image.at(y, x, 0)) + image.at(y, x, 1) + image.at(y, x, 2)) / 3.0;
    return g;
}

} // namespace

template <typename T>
Tensor<T> sobel_edges(const Image& image) {
    if (image.h < 3 || image.w < 3)
        throw ShapeError("sobel_edges: image must be at least 3x3, got " +
                         std::to_string(image.h) + "x" + std::to_string(image.w));
    const int h = image.h, w = image.w;
    const auto gray = grayscale(image);
    auto g = [&](int y, int x) {
        return gray[static_cast<std::size_t>(reflect_clamp(y, h)) * w + reflect_clamp(x, w)];
    };
    static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    const double norm = 4.0 * 255.0 * std::sqrt(2.0);

    Tensor<T> out = Tensor<T>::zeros({1, h, w});
    auto od = out.raw();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double gx = 0, gy = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const double v = g(y + dy, x + dx);
                    gx += kx[dy + 1][dx + 1] * v;
                    gy += ky[dy + 1][dx + 1] * v;
                }
            od[static_cast<std::size_t>(y) * w + x] =
                static_cast<T>(std::sqrt(gx * gx + gy * gy) / norm);
        }
    return out;
}

template Tensor<float> sobel_edges<float>(const Image&);
template Tensor<double> sobel_edges<double>(const Image&);

std::pair<Image, PatchOrigin> richest_patch(const Image& image, int p) {
    if (p <= 0 || p > std::min(image.h, image.w))
        throw ConfigError("richest_patch: patch size " + std::to_string(p) +
                          " exceeds image " + std::to_string(image.h) + "x" +
                          std::to_string(image.w));
    const auto gray = grayscale(image);
    const int tiles_y = image.h / p;
    const int tiles_x = image.w / p;
    double best = -1.0;
    PatchOrigin origin{0, 0};
    for (int ty = 0; ty < tiles_y; ++ty)
        for (int tx = 0; tx < tiles_x; ++tx) {
            double sum = 0, sum2 = 0;
            for (int y = ty * p; y < (ty + 1) * p; ++y)
                for (int x = tx * p; x < (tx + 1) * p; ++x) {
                    const double v = gray[static_cast<std::size_t>(y) * image.w + x];
                    sum += v;
                    sum2 += v * v;
                }
            const double n = double(p) * p;
            const double var = sum2 / n - (sum / n) * (sum / n);
            if (var > best) {
                best = var;
                origin = {ty * p, tx * p};
            }
        }
    Image patch(p, p);
    for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
            for (int c = 0; c < 3; ++c)
                patch.at(y, x, c) = image.at(origin.row + y, origin.col + x, c);
    return {std::move(patch), origin};
}

template <typename T>
Tensor<T> srm_noise(const Image& patch) {
    const int h = patch.h, w = patch.w;
    if (h < 5 || w < 5)
        throw ShapeError("srm_noise: patch must be at least 5x5");

    // First-order and second-order horizontal residuals plus the 5x5 square
    // kernel, each with its standard normalization.
    static constexpr double k1[3][3] = {{0, 0, 0}, {0, -1, 1}, {0, 0, 0}};
    static constexpr double k2[3][3] = {{0, 0, 0}, {1, -2, 1}, {0, 0, 0}};
    static constexpr double k3[5][5] = {{-1, 2, -2, 2, -1},
                                        {2, -6, 8, -6, 2},
                                        {-2, 8, -12, 8, -2},
                                        {2, -6, 8, -6, 2},
                                        {-1, 2, -2, 2, -1}};
    constexpr double n1 = 1.0, n2 = 1.0 / 2.0, n3 = 1.0 / 12.0;

    Tensor<T> out = Tensor<T>::zeros({3, h, w});
    auto od = out.raw();
    for (int c = 0; c < 3; ++c) {
        auto px = [&](int y, int x) {
            return double(patch.at(reflect_clamp(y, h), reflect_clamp(x, w), c));
        };
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                // Integer kernel taps are accumulated exactly before the
                // normalizations, so flat and linear inputs cancel bit-exactly.
                double acc1 = 0, acc2 = 0, acc3 = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const double v = px(y + dy, x + dx);
                        acc1 += k1[dy + 1][dx + 1] * v;
                        acc2 += k2[dy + 1][dx + 1] * v;
                    }
                for (int dy = -2; dy <= 2; ++dy)
                    for (int dx = -2; dx <= 2; ++dx)
                        acc3 += k3[dy + 2][dx + 2] * px(y + dy, x + dx);
                const double r = acc1 * n1 + acc2 * n2 + acc3 * n3;
                od[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    static_cast<T>(std::clamp(r / 255.0, -1.0, 1.0));
            }
    }
    return out;
}

template Tensor<float> srm_noise<float>(const Image&);
template Tensor<double> srm_noise<double>(const Image&);

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

const char* to_string(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::Saturation: return "saturation";
        case CorruptionKind::Contrast: return "contrast";
        case CorruptionKind::GaussianNoise: return "gaussian_noise";
        case CorruptionKind::Blur: return "blur";
        case CorruptionKind::Pixelate: return "pixelate";
        case CorruptionKind::Downscale: return "downscale";
        case CorruptionKind::Crop: return "crop";
    }
    return "?";
}

CorruptionKind corruption_from_string(const std::string& s) {
    for (CorruptionKind k : all_corruptions())
        if (s == to_string(k)) return k;
    throw ConfigError("unknown corruption kind '" + s + "'");
}

const std::vector<CorruptionKind>& all_corruptions() {
    static const std::vector<CorruptionKind> kinds = {
        CorruptionKind::Saturation, CorruptionKind::Contrast,
        CorruptionKind::GaussianNoise, CorruptionKind::Blur,
        CorruptionKind::Pixelate, CorruptionKind::Downscale,
        CorruptionKind::Crop};
    return kinds;
}

namespace {

Image gaussian_blur(const Image& in, double sigma) {
    const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double ksum = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        ksum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= ksum;

    // Separable passes, horizontal then vertical, replicate padding.
    std::vector<double> tmp(in.px.size());
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * in.at(y, reflect_clamp(x + i, in.w), c);
                tmp[(static_cast<std::size_t>(y) * in.w + x) * 3 + c] = acc;
            }
    Image out(in.h, in.w);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] *
                           tmp[(static_cast<std::size_t>(reflect_clamp(y + i, in.h)) * in.w + x) * 3 + c];
                out.at(y, x, c) = clamp_u8(acc);
            }
    return out;
}

Image resize_nearest(const Image& in, int oh, int ow) {
    Image out(oh, ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const int sy = std::min(in.h - 1, int(double(y) * in.h / oh));
            const int sx = std::min(in.w - 1, int(double(x) * in.w / ow));
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = in.at(sy, sx, c);
        }
    return out;
}

template <typename Table>
void check_severity(const Table& table, int severity) {
    if (severity < 0 || severity >= static_cast<int>(table.size()))
        throw ConfigError("corruption severity " + std::to_string(severity) +
                          " outside [0, " + std::to_string(table.size() - 1) + "]");
}

} // namespace

Image corrupt(const Image& image, const CorruptionSpec& spec, std::uint64_t seed,
              const CorruptionTables& tables) {
    if (spec.severity == 0) return image;
    switch (spec.kind) {
        case CorruptionKind::Saturation: {
            check_severity(tables.saturation, spec.severity);
            const double s = tables.saturation[spec.severity];
            Image out(image.h, image.w);
            for (int y = 0; y < image.h; ++y)
                for (int x = 0; x < image.w; ++x) {
                    const double gray =
                        (double(image.at(y, x, 0)) + image.at(y, x, 1) + image.at(y, x, 2)) / 3.0;
                    for (int c = 0; c < 3; ++c)
                        out.at(y, x, c) = clamp_u8(gray + s * (image.at(y, x, c) - gray));
                }
            return out;
        }
        case CorruptionKind::Contrast: {
            check_severity(tables.contrast, spec.severity);
            const double s = tables.contrast[spec.severity];
            Image out(image.h, image.w);
            for (std::size_t i = 0; i < image.px.size(); ++i)
                out.px[i] = clamp_u8(128.0 + s * (double(image.px[i]) - 128.0));
            return out;
        }
        case CorruptionKind::GaussianNoise: {
            check_severity(tables.gaussian_sigma, spec.severity);
            const double sigma = tables.gaussian_sigma[spec.severity];
            // One unit-normal field per (image, seed), scaled by sigma, so the
            // perturbation grows monotonically with severity.
            Rng r(hash_seed(seed, 0x6e015eULL));
            Image out(image.h, image.w);
            for (std::size_t i = 0; i < image.px.size(); ++i)
                out.px[i] = clamp_u8(double(image.px[i]) + sigma * r.normal());
            return out;
        }
        case CorruptionKind::Blur: {
            check_severity(tables.blur_sigma, spec.severity);
            return gaussian_blur(image, tables.blur_sigma[spec.severity]);
        }
        case CorruptionKind::Pixelate: {
            check_severity(tables.pixelate_block, spec.severity);
            const int block = tables.pixelate_block[spec.severity];
            Image out(image.h, image.w);
            for (int y0 = 0; y0 < image.h; y0 += block)
                for (int x0 = 0; x0 < image.w; x0 += block) {
                    const int y1 = std::min(image.h, y0 + block);
                    const int x1 = std::min(image.w, x0 + block);
                    double acc[3] = {0, 0, 0};
                    const double n = double(y1 - y0) * (x1 - x0);
                    for (int y = y0; y < y1; ++y)
                        for (int x = x0; x < x1; ++x)
                            for (int c = 0; c < 3; ++c) acc[c] += image.at(y, x, c);
                    for (int y = y0; y < y1; ++y)
                        for (int x = x0; x < x1; ++x)
                            for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp_u8(acc[c] / n);
                }
            return out;
        }
        case CorruptionKind::Downscale: {
            check_severity(tables.downscale_factor, spec.severity);
            const double f = tables.downscale_factor[spec.severity];
            const int sh = std::max(1, int(image.h * f));
            const int sw = std::max(1, int(image.w * f));
            return resize_nearest(resize_nearest(image, sh, sw), image.h, image.w);
        }
        case CorruptionKind::Crop: {
            check_severity(tables.crop_fraction, spec.severity);
            const double f = tables.crop_fraction[spec.severity];
            const int ch = std::max(1, int(image.h * f));
            const int cw = std::max(1, int(image.w * f));
            const int y0 = (image.h - ch) / 2;
            const int x0 = (image.w - cw) / 2;
            Image cropped(ch, cw);
            for (int y = 0; y < ch; ++y)
                for (int x = 0; x < cw; ++x)
                    for (int c = 0; c < 3; ++c)
                        cropped.at(y, x, c) = image.at(y0 + y, x0 + x, c);
            return resize_nearest(cropped, image.h, image.w);
        }
    }
    throw ConfigError("unknown corruption kind");
}

} // namespace zsdfa
