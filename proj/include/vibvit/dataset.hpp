// SPDX-License-Identifier: Apache-2.0
//
// Image datasets in the CIFAR-10 binary layout: fixed 3073-byte records,
// one label byte followed by three 1024-byte planes (R, G, B), each a
// row-major 32x32 image of unsigned 8-bit pixels.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vibvit/errors.hpp"
#include "vibvit/random.hpp"

namespace vibvit {

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarChannels = 3;
inline constexpr std::size_t kCifarPixels = kCifarChannels * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
inline constexpr std::size_t kCifarClasses = 10;

struct ChannelStats {
    std::array<double, kCifarChannels> mean{0.0, 0.0, 0.0};
    std::array<double, kCifarChannels> std{1.0, 1.0, 1.0};
};

struct Dataset {
    std::size_t channels = kCifarChannels;
    std::size_t image_size = kCifarSide;
    std::vector<float> images;  // [n, C, S, S]
    std::vector<int> labels;
    std::string split;
    ChannelStats stats;
    std::uint64_t content_hash = 0;  // FNV-1a over the raw records

    std::size_t size() const { return labels.size(); }
    std::size_t image_numel() const { return channels * image_size * image_size; }
    std::span<const float> image(std::size_t i) const {
        return std::span<const float>(images).subspan(i * image_numel(), image_numel());
    }
    std::span<float> image(std::size_t i) { return std::span<float>(images).subspan(i * image_numel(), image_numel()); }
};

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct CifarRecord {
    std::uint8_t label = 0;
    std::array<std::uint8_t, kCifarPixels> pixels{};
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

/// Parse raw records. Size must be a whole number of records and every label in [0, 9].
inline std::vector<CifarRecord> parse_cifar_records(std::span<const std::uint8_t> bytes, const std::string& origin) {
    if (bytes.size() % kCifarRecord != 0) {
        throw FormatError(origin + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                          std::to_string(kCifarRecord) + "-byte record size");
    }
    std::vector<CifarRecord> out(bytes.size() / kCifarRecord);
    for (std::size_t r = 0; r < out.size(); ++r) {
        const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
        if (rec[0] >= kCifarClasses) {
            throw FormatError(origin + ": record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
        }
        out[r].label = rec[0];
        std::copy(rec + 1, rec + kCifarRecord, out[r].pixels.begin());
    }
    return out;
}

inline void write_cifar_records(const std::filesystem::path& path, std::span<const CifarRecord> records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write " + path.string());
    for (const auto& r : records) {
        out.put(static_cast<char>(r.label));
        out.write(reinterpret_cast<const char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
    }
}

/// Per-channel mean/std of [0,1]-scaled pixels.
inline ChannelStats compute_channel_stats(const Dataset& raw) {
    ChannelStats s;
    const std::size_t plane = raw.image_size * raw.image_size;
    for (std::size_t c = 0; c < raw.channels; ++c) {
        double sum = 0, sq = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < raw.size(); ++i) {
            const float* p = raw.images.data() + i * raw.image_numel() + c * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                sum += p[k];
                sq += static_cast<double>(p[k]) * p[k];
            }
            n += plane;
        }
        const double mean = n ? sum / static_cast<double>(n) : 0.0;
        const double var = n ? std::max(0.0, sq / static_cast<double>(n) - mean * mean) : 0.0;
        s.mean[c] = mean;
        s.std[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return s;
}

inline void normalize_in_place(Dataset& ds, const ChannelStats& stats) {
    const std::size_t plane = ds.image_size * ds.image_size;
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t c = 0; c < ds.channels; ++c) {
            float* p = ds.images.data() + i * ds.image_numel() + c * plane;
            const double m = stats.mean[c], s = stats.std[c];
            for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<float>((p[k] - m) / s);
        }
    ds.stats = stats;
}

struct LoadOptions {
    std::size_t limit = 0;                  // 0 = all records
    std::optional<ChannelStats> stats;      // normalize with these; computed from the data when absent
    bool normalize = true;
    std::string split = "train";
};

/// Load one or more record files, scale pixels to [0,1] and normalize per channel.
inline Dataset load_cifar10(std::span<const std::filesystem::path> paths, const LoadOptions& opt = {}) {
    Dataset ds;
    ds.split = opt.split;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& path : paths) {
        const auto bytes = read_file_bytes(path);
        const auto records = parse_cifar_records(bytes, path.string());
        for (const auto& r : records) {
            if (opt.limit && ds.size() >= opt.limit) break;
            h = fnv1a(std::span<const std::uint8_t>(&r.label, 1), h);
            h = fnv1a(r.pixels, h);
            ds.labels.push_back(r.label);
            for (std::uint8_t px : r.pixels) ds.images.push_back(static_cast<float>(px) / 255.0f);
        }
        if (opt.limit && ds.size() >= opt.limit) break;
    }
    ds.content_hash = h;
    if (opt.normalize) normalize_in_place(ds, opt.stats ? *opt.stats : compute_channel_stats(ds));
    return ds;
}

inline Dataset load_cifar10(const std::filesystem::path& path, const LoadOptions& opt = {}) {
    return load_cifar10(std::span<const std::filesystem::path>(&path, 1), opt);
}

// ---------------------------------------------------------------------------
// Synthetic data in the same record layout, for environments without CIFAR-10.
//
// Ten classes = 5 object hues x 2 shapes (square, disc). Each image has a
// noisy two-tone background, one striped object of random size, position and
// stripe orientation carrying the class, and one unstriped distractor blob of
// a random hue. Hue is visible in any object patch; shape mostly is not.

namespace detail {
inline std::array<double, 3> hue_rgb(double hue) {
    const double h = (hue - std::floor(hue)) * 6.0;
    const double x = 1.0 - std::fabs(std::fmod(h, 2.0) - 1.0);
    if (h < 1) return {1, x, 0};
    if (h < 2) return {x, 1, 0};
    if (h < 3) return {0, 1, x};
    if (h < 4) return {0, x, 1};
    if (h < 5) return {x, 0, 1};
    return {1, 0, x};
}
}  // namespace detail

inline CifarRecord synthetic_record(std::uint64_t seed, std::uint64_t index) {
    Rng rng = Rng::keyed(seed, {0x5EED, index});
    CifarRecord rec;
    const int label = static_cast<int>(rng.below(kCifarClasses));
    rec.label = static_cast<std::uint8_t>(label);
    const double obj_hue = (label % 5) / 5.0 + rng.uniform(-0.03, 0.03);
    const bool disc = label >= 5;
    const auto obj = detail::hue_rgb(obj_hue);
    const auto bg1 = detail::hue_rgb(rng.uniform());
    const auto bg2 = detail::hue_rgb(rng.uniform());
    const double bg_level = rng.uniform(0.2, 0.5);
    const auto distract = detail::hue_rgb(rng.uniform());
    const double S = static_cast<double>(kCifarSide);

    const double size = rng.uniform(9.0, 18.0);
    const double cx = rng.uniform(size / 2, S - size / 2), cy = rng.uniform(size / 2, S - size / 2);
    const bool vertical = rng.uniform() < 0.5;
    const double period = rng.uniform(3.0, 5.0);
    const double phase = rng.uniform(0.0, period);
    const double dsize = rng.uniform(5.0, 9.0);
    const double dx = rng.uniform(dsize / 2, S - dsize / 2), dy = rng.uniform(dsize / 2, S - dsize / 2);
    const double grad_angle = rng.uniform(0.0, 2 * M_PI);

    std::array<double, kCifarPixels> img{};
    for (std::size_t y = 0; y < kCifarSide; ++y)
        for (std::size_t x = 0; x < kCifarSide; ++x) {
            const double fx = x + 0.5, fy = y + 0.5;
            const double t = 0.5 + 0.5 * std::sin((std::cos(grad_angle) * fx + std::sin(grad_angle) * fy) / S * M_PI);
            std::array<double, 3> c;
            for (int k = 0; k < 3; ++k) c[k] = bg_level * (t * bg1[k] + (1 - t) * bg2[k]);
            const double ddx = std::fabs(fx - dx), ddy = std::fabs(fy - dy);
            if (ddx <= dsize / 2 && ddy <= dsize / 2) {
                for (int k = 0; k < 3; ++k) c[k] = 0.75 * distract[k] + 0.1;
            }
            const double ox = fx - cx, oy = fy - cy;
            const bool inside = disc ? (ox * ox + oy * oy <= size * size / 4)
                                     : (std::fabs(ox) <= size / 2 && std::fabs(oy) <= size / 2);
            if (inside) {
                const double coord = vertical ? fx : fy;
                const bool dark = std::fmod(coord + phase, period) < period / 2;
                const double level = dark ? 0.35 : 0.95;
                for (int k = 0; k < 3; ++k) c[k] = level * obj[k];
            }
            for (int k = 0; k < 3; ++k) {
                const double v = std::clamp(c[k] + 0.06 * rng.normal(), 0.0, 1.0);
                img[(k * kCifarSide + y) * kCifarSide + x] = v;
            }
        }
    for (std::size_t i = 0; i < kCifarPixels; ++i) {
        rec.pixels[i] = static_cast<std::uint8_t>(std::lround(img[i] * 255.0));
    }
    return rec;
}

/// `count` records with indices [first, first + count).
inline std::vector<CifarRecord> synthetic_records(std::uint64_t seed, std::uint64_t first, std::size_t count) {
    std::vector<CifarRecord> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(synthetic_record(seed, first + i));
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

/// Test hooks that pin the random choices of augment_train.
struct AugmentOverrides {
    std::optional<double> scale;   // crop area fraction
    std::optional<double> aspect;  // crop width / height
    std::optional<bool> flip;
};

struct CropBox {
    std::size_t top = 0, left = 0, height = 0, width = 0;
};

/// Random resized crop geometry: area fraction uniform in [0.08, 1], aspect
/// log-uniform in [3/4, 4/3], ten attempts, then a centered full crop.
inline CropBox sample_crop(std::size_t H, std::size_t W, Rng& rng, const AugmentOverrides& ov = {}) {
    const double area = static_cast<double>(H * W);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * (ov.scale ? *ov.scale : rng.uniform(0.08, 1.0));
        const double aspect =
            ov.aspect ? *ov.aspect : std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
        const auto w = static_cast<long>(std::lround(std::sqrt(target * aspect)));
        const auto h = static_cast<long>(std::lround(std::sqrt(target / aspect)));
        if (w > 0 && h > 0 && static_cast<std::size_t>(w) <= W && static_cast<std::size_t>(h) <= H) {
            CropBox box{0, 0, static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
            box.top = static_cast<std::size_t>(rng.below(H - box.height + 1));
            box.left = static_cast<std::size_t>(rng.below(W - box.width + 1));
            return box;
        }
    }
    return CropBox{0, 0, H, W};
}

/// Bilinear resize (half-pixel centers) of a crop of one C x S x S image back to S x S.
inline std::vector<float> resize_crop(std::span<const float> image, std::size_t C, std::size_t S, const CropBox& box) {
    std::vector<float> out(C * S * S);
    auto coord = [](std::size_t o, std::size_t in_len, std::size_t out_len, std::size_t& i0, std::size_t& i1,
                    double& w) {
        double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in_len) / static_cast<double>(out_len) - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in_len - 1));
        i0 = static_cast<std::size_t>(std::floor(src));
        i1 = std::min(i0 + 1, in_len - 1);
        w = src - static_cast<double>(i0);
    };
    for (std::size_t y = 0; y < S; ++y) {
        std::size_t y0, y1;
        double wy;
        coord(y, box.height, S, y0, y1, wy);
        for (std::size_t x = 0; x < S; ++x) {
            std::size_t x0, x1;
            double wx;
            coord(x, box.width, S, x0, x1, wx);
            for (std::size_t c = 0; c < C; ++c) {
                auto px = [&](std::size_t yy, std::size_t xx) {
                    return static_cast<double>(image[(c * S + box.top + yy) * S + box.left + xx]);
                };
                double v;
                if (wy == 0.0 && wx == 0.0) {
                    v = px(y0, x0);
                } else {
                    v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                        wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
                }
                out[(c * S + y) * S + x] = static_cast<float>(v);
            }
        }
    }
    return out;
}

/// Random resized crop then horizontal flip with probability 1/2.
inline std::vector<float> augment_train(std::span<const float> image, std::size_t C, std::size_t S, Rng& rng,
                                        const AugmentOverrides& ov = {}) {
    if (image.size() != C * S * S) throw DimensionError("augment_train: image size mismatch");
    const CropBox box = sample_crop(S, S, rng, ov);
    std::vector<float> out = resize_crop(image, C, S, box);
    const bool flip = ov.flip ? *ov.flip : rng.uniform() < 0.5;
    if (flip) {
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < S; ++y) {
                float* row = out.data() + (c * S + y) * S;
                std::reverse(row, row + S);
            }
    }
    return out;
}

}  // namespace vibvit
