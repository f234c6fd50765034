#ifndef SFUDA_PNG_IO_HPP
#define SFUDA_PNG_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace sfuda::png {

/// Raster of 8-bit samples, row-major; channels is 1 (gray) or 3 (RGB).
struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;  // height*width*channels

    std::uint8_t& at(int y, int x, int c = 0) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

/// Deterministic encoder (filter 0 scanlines, fixed zlib level).
void write_png(const std::string& path, const Image8& image);

/// Reads 8-bit grayscale or RGB non-interlaced PNGs (all filter types).
Image8 read_png(const std::string& path);

}  // namespace sfuda::png

#endif
