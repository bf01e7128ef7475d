#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace semalign {

/// 8-bit interleaved pixels as stored in a PNG file.
struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> pixels;
};

/// Decodes a PNG, converting to `channels` (1 or 3).
RawImage read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const RawImage& image);

}  // namespace semalign
