// Direct pixel comparison of patches, independent of the patchify code.
#pragma once

#include <cstddef>
#include <vector>

#include "vibvit/config.hpp"

namespace vibvit::testing {

/// Number of patches whose pixels equal those of patch `source` (source included).
inline std::size_t count_equal_patches(const std::vector<float>& img, const ViTConfig& cfg, std::size_t source) {
    const std::size_t g = cfg.grid(), P = cfg.patch_size, S = cfg.image_size;
    auto px = [&](std::size_t patch, std::size_t c, std::size_t y, std::size_t x) {
        return img[(c * S + patch / g * P + y) * S + patch % g * P + x];
    };
    std::size_t n = 0;
    for (std::size_t p = 0; p < g * g; ++p) {
        bool same = true;
        for (std::size_t c = 0; c < cfg.channels && same; ++c)
            for (std::size_t y = 0; y < P && same; ++y)
                for (std::size_t x = 0; x < P && same; ++x) same = px(p, c, y, x) == px(source, c, y, x);
        n += same;
    }
    return n;
}

}  // namespace vibvit::testing
