#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "langneck/common.hpp"
#include "langneck/io.hpp"
#include "langneck/rng.hpp"
#include "langneck/vocab.hpp"

namespace langneck {

constexpr std::size_t kImageSize = 32;
constexpr std::size_t kNumClasses = 16;

enum class ShapeKind : std::uint8_t { circle = 0, square, triangle, cross };
enum class ColorKind : std::uint8_t { red = 0, green, blue, yellow };
enum class SizeKind : std::uint8_t { small = 0, large };

struct SceneSpec {
    ShapeKind shape = ShapeKind::circle;
    ColorKind color = ColorKind::red;
    SizeKind size = SizeKind::small;
    std::uint8_t position = 0;  // 2x2 grid cell, row-major

    bool operator==(const SceneSpec&) const = default;
};

// Class label is (shape, color); size and position are nuisance attributes.
inline std::size_t class_of(const SceneSpec& spec) {
    return static_cast<std::size_t>(spec.shape) * 4 + static_cast<std::size_t>(spec.color);
}

struct ImageSample {
    std::vector<float> pixels;  // H*W*3 row-major, values in [0,1]
    std::uint16_t label = 0;
    SceneSpec spec;

    bool operator==(const ImageSample&) const = default;
};

enum class CorruptionKind : std::uint8_t { gaussian_noise = 0, impulse_noise, shot_noise, defocus_blur };

struct Corruption {
    CorruptionKind kind = CorruptionKind::gaussian_noise;
    int severity = 0;  // 0 is identity for every kind
};

inline const char* corruption_name(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::gaussian_noise: return "gaussian_noise";
        case CorruptionKind::impulse_noise: return "impulse_noise";
        case CorruptionKind::shot_noise: return "shot_noise";
        case CorruptionKind::defocus_blur: return "defocus_blur";
    }
    throw ArgumentError("unknown corruption kind");
}

inline const std::array<CorruptionKind, 4>& all_corruption_kinds() {
    static const std::array<CorruptionKind, 4> kinds = {
        CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise,
        CorruptionKind::shot_noise, CorruptionKind::defocus_blur};
    return kinds;
}

// Attribute words of a scene in caption order: size, color, shape, position.
inline std::vector<std::size_t> attribute_word_ids(const SceneSpec& spec, const Vocabulary& vocab) {
    return {vocab.id(size_words()[static_cast<std::size_t>(spec.size)]),
            vocab.id(color_words()[static_cast<std::size_t>(spec.color)]),
            vocab.id(shape_words()[static_cast<std::size_t>(spec.shape)]),
            vocab.id(position_words()[spec.position])};
}

namespace detail {

// Deliberately unsaturated palette so corruption statistics are not
// distorted by pixel values pinned at 0 or 1.
inline std::array<double, 3> color_rgb(ColorKind c) {
    switch (c) {
        case ColorKind::red: return {0.85, 0.15, 0.15};
        case ColorKind::green: return {0.15, 0.75, 0.20};
        case ColorKind::blue: return {0.15, 0.30, 0.85};
        case ColorKind::yellow: return {0.90, 0.85, 0.20};
    }
    throw ArgumentError("unknown color");
}

inline bool inside_shape(ShapeKind kind, double dx, double dy, double r) {
    switch (kind) {
        case ShapeKind::circle:
            return dx * dx + dy * dy <= r * r;
        case ShapeKind::square:
            return std::max(std::fabs(dx), std::fabs(dy)) <= 0.88 * r;
        case ShapeKind::triangle:
            // upward-pointing: apex at (0, -r), base at y = 0.8 r
            return dy >= -r && dy <= 0.8 * r && std::fabs(dx) <= 0.62 * (dy + r);
        case ShapeKind::cross:
            return (std::fabs(dx) <= 0.34 * r && std::fabs(dy) <= r) ||
                   (std::fabs(dy) <= 0.34 * r && std::fabs(dx) <= r);
    }
    throw ArgumentError("unknown shape");
}

inline float clamp_unit(double v) {
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

inline std::size_t reflect_index(long i, long n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return static_cast<std::size_t>(i);
}

}  // namespace detail

// Deterministic rasterization of the colored shape over a low-frequency
// textured background. 4x4 supersampled coverage gives ~1 px antialiasing.
inline ImageSample render_scene(const SceneSpec& spec, std::uint64_t seed) {
    constexpr std::size_t h = kImageSize, w = kImageSize;
    Rng rng(derive_seed(seed, "render"));

    // coarse 5x5 noise grid, bilinearly upsampled
    constexpr std::size_t g = 5;
    std::array<double, g * g> coarse{};
    for (double& v : coarse) v = rng.uniform(0.25, 0.55);
    std::array<double, 3> tint = {rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04),
                                  rng.uniform(-0.04, 0.04)};

    const double cx = (spec.position % 2) * 16 + 8.0;
    const double cy = (spec.position / 2) * 16 + 8.0;
    const double r = spec.size == SizeKind::small ? 4.2 : 6.6;
    const auto rgb = detail::color_rgb(spec.color);

    ImageSample out;
    out.pixels.resize(h * w * 3);
    out.spec = spec;
    out.label = static_cast<std::uint16_t>(class_of(spec));
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double gx = static_cast<double>(x) / (w - 1) * (g - 1);
            const double gy = static_cast<double>(y) / (h - 1) * (g - 1);
            const std::size_t x0 = static_cast<std::size_t>(gx), y0 = static_cast<std::size_t>(gy);
            const std::size_t x1 = std::min(x0 + 1, g - 1), y1 = std::min(y0 + 1, g - 1);
            const double fx = gx - x0, fy = gy - y0;
            const double base = (coarse[y0 * g + x0] * (1 - fx) + coarse[y0 * g + x1] * fx) * (1 - fy) +
                                (coarse[y1 * g + x0] * (1 - fx) + coarse[y1 * g + x1] * fx) * fy;

            double alpha = 0.0;
            for (int sy = 0; sy < 4; ++sy)
                for (int sx = 0; sx < 4; ++sx) {
                    const double px = x + (sx + 0.5) / 4.0 - cx;
                    const double py = y + (sy + 0.5) / 4.0 - cy;
                    if (detail::inside_shape(spec.shape, px, py, r)) alpha += 1.0 / 16.0;
                }

            for (std::size_t c = 0; c < 3; ++c) {
                const double bg = base + tint[c];
                out.pixels[(y * w + x) * 3 + c] =
                    detail::clamp_unit(bg * (1.0 - alpha) + rgb[c] * alpha);
            }
        }
    }
    return out;
}

// Class-balanced deterministic dataset; train/val use disjoint seed streams.
inline std::vector<ImageSample> generate_dataset(std::uint64_t master_seed, std::size_t count,
                                                 const std::string& split) {
    if (count == 0) throw ArgumentError("generate_dataset: count must be positive");
    std::vector<ImageSample> samples;
    samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t cls = i % kNumClasses;
        SceneSpec spec;
        spec.shape = static_cast<ShapeKind>(cls / 4);
        spec.color = static_cast<ColorKind>(cls % 4);
        Rng attr(derive_seed(master_seed, split + "/attrs", i));
        spec.size = static_cast<SizeKind>(attr.below(2));
        spec.position = static_cast<std::uint8_t>(attr.below(4));
        samples.push_back(render_scene(spec, derive_seed(master_seed, split + "/scene", i)));
    }
    return samples;
}

// Severity tables, scaled for 32x32 images. Severity 0 is the identity.
inline constexpr std::array<double, 6> kGaussianSigma = {0.0, 0.04, 0.08, 0.12, 0.18, 0.26};
inline constexpr std::array<double, 6> kImpulseFraction = {0.0, 0.01, 0.03, 0.06, 0.10, 0.17};
inline constexpr std::array<double, 6> kShotLambda = {0.0, 500.0, 250.0, 125.0, 60.0, 25.0};  // 0 = identity
inline constexpr std::array<int, 6> kDefocusRadius = {0, 1, 2, 3, 5, 7};

inline ImageSample apply_corruption(const ImageSample& img, const Corruption& c, std::uint64_t seed) {
    if (c.severity < 0 || c.severity > 5)
        throw ArgumentError("corruption severity must be in 0..5");
    if (c.severity == 0) return img;

    ImageSample out = img;
    Rng rng(derive_seed(seed, corruption_name(c.kind), static_cast<std::uint64_t>(c.severity)));
    const std::size_t s = static_cast<std::size_t>(c.severity);

    switch (c.kind) {
        case CorruptionKind::gaussian_noise: {
            const double sigma = kGaussianSigma[s];
            for (float& v : out.pixels) v = detail::clamp_unit(v + rng.normal(0.0, sigma));
            break;
        }
        case CorruptionKind::impulse_noise: {
            const double p = kImpulseFraction[s];
            for (float& v : out.pixels)
                if (rng.uniform() < p) v = rng.below(2) ? 1.0f : 0.0f;
            break;
        }
        case CorruptionKind::shot_noise: {
            const double lambda = kShotLambda[s];
            for (float& v : out.pixels)
                v = detail::clamp_unit(static_cast<double>(rng.poisson(v * lambda)) / lambda);
            break;
        }
        case CorruptionKind::defocus_blur: {
            const int r = kDefocusRadius[s];
            std::vector<std::pair<int, int>> disk;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx)
                    if (dx * dx + dy * dy <= r * r) disk.emplace_back(dy, dx);
            const double inv = 1.0 / static_cast<double>(disk.size());
            const long h = static_cast<long>(kImageSize), w = static_cast<long>(kImageSize);
            for (long y = 0; y < h; ++y)
                for (long x = 0; x < w; ++x)
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        double acc = 0.0;
                        for (auto [dy, dx] : disk) {
                            const std::size_t yy = detail::reflect_index(y + dy, h);
                            const std::size_t xx = detail::reflect_index(x + dx, w);
                            acc += img.pixels[(yy * w + xx) * 3 + ch];
                        }
                        out.pixels[(y * w + x) * 3 + ch] = detail::clamp_unit(acc * inv);
                    }
            break;
        }
    }
    return out;
}

// Dataset file: magic "LBDS", u16 version=1, u16 H, u16 W, u32 count,
// u16 vocabulary checksum, then per sample H*W*3 LE f32, u16 label,
// 4 bytes of SceneSpec enums.
inline std::string serialize_dataset(const std::vector<ImageSample>& samples,
                                     std::uint16_t vocab_checksum) {
    ByteWriter w;
    w.bytes("LBDS", 4);
    w.u16(1);
    w.u16(kImageSize);
    w.u16(kImageSize);
    w.u32(static_cast<std::uint32_t>(samples.size()));
    w.u16(vocab_checksum);
    for (const auto& s : samples) {
        if (s.pixels.size() != kImageSize * kImageSize * 3)
            throw ArgumentError("sample pixel buffer has wrong size");
        w.bytes(s.pixels.data(), s.pixels.size() * sizeof(float));
        w.u16(s.label);
        w.u8(static_cast<std::uint8_t>(s.spec.shape));
        w.u8(static_cast<std::uint8_t>(s.spec.color));
        w.u8(static_cast<std::uint8_t>(s.spec.size));
        w.u8(s.spec.position);
    }
    return w.buffer();
}

inline void save_dataset(const std::string& path, const std::vector<ImageSample>& samples,
                         std::uint16_t vocab_checksum) {
    write_file(path, serialize_dataset(samples, vocab_checksum));
}

struct LoadedDataset {
    std::vector<ImageSample> samples;
    std::uint16_t vocab_checksum = 0;
};

inline LoadedDataset deserialize_dataset(std::string bytes) {
    ByteReader r(std::move(bytes));
    r.expect_magic("LBDS", "dataset");
    if (std::uint16_t ver = r.u16(); ver != 1)
        throw FormatError("dataset: unsupported version " + std::to_string(ver));
    const std::uint16_t h = r.u16(), w = r.u16();
    if (h != kImageSize || w != kImageSize)
        throw FormatError("dataset: unexpected image size " + std::to_string(h) + "x" + std::to_string(w));
    const std::uint32_t count = r.u32();
    LoadedDataset out;
    out.vocab_checksum = r.u16();
    out.samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        ImageSample s;
        s.pixels.resize(static_cast<std::size_t>(h) * w * 3);
        r.bytes(s.pixels.data(), s.pixels.size() * sizeof(float));
        s.label = r.u16();
        s.spec.shape = static_cast<ShapeKind>(r.u8());
        s.spec.color = static_cast<ColorKind>(r.u8());
        s.spec.size = static_cast<SizeKind>(r.u8());
        s.spec.position = r.u8();
        out.samples.push_back(std::move(s));
    }
    r.expect_end("dataset");
    return out;
}

inline LoadedDataset load_dataset(const std::string& path) {
    return deserialize_dataset(read_file(path));
}

}  // namespace langneck
