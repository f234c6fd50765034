#include "sfuda/png_io.hpp"

#include <zlib.h>

#include <cstdlib>
#include <cstring>
#include <fstream>

#include "sfuda/errors.hpp"

namespace sfuda::png {

namespace {

constexpr std::uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    out.insert(out.end(), body.begin(), body.end());
    put_be32(out, static_cast<std::uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size()))));
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_png(const std::string& path, const Image8& image) {
    if (image.width <= 0 || image.height <= 0 || (image.channels != 1 && image.channels != 3))
        throw io_error("write_png: unsupported image geometry");
    if (image.pixels.size() !=
        static_cast<std::size_t>(image.width) * image.height * image.channels)
        throw io_error("write_png: pixel buffer size mismatch");

    const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
    std::vector<std::uint8_t> raw((stride + 1) * image.height);
    for (int y = 0; y < image.height; ++y) {
        raw[y * (stride + 1)] = 0;  // filter type 0
        std::memcpy(&raw[y * (stride + 1) + 1], &image.pixels[y * stride], stride);
    }

    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw io_error("write_png: deflate failed");
    comp.resize(comp_size);

    std::vector<std::uint8_t> out(kSignature, kSignature + 8);
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(image.width));
    put_be32(ihdr, static_cast<std::uint32_t>(image.height));
    ihdr.push_back(8);                                        // bit depth
    ihdr.push_back(image.channels == 1 ? 0 : 2);              // gray / truecolor
    ihdr.push_back(0);                                        // compression
    ihdr.push_back(0);                                        // filter
    ihdr.push_back(0);                                        // interlace
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", comp);
    append_chunk(out, "IEND", {});

    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("write_png: cannot open " + path);
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!os) throw io_error("write_png: write failed for " + path);
}

Image8 read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("read_png: cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), kSignature, 8) != 0)
        throw io_error("read_png: not a PNG file: " + path);

    Image8 img;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    bool saw_ihdr = false;
    while (pos + 12 <= buf.size()) {
        const std::uint32_t len = get_be32(&buf[pos]);
        if (pos + 12 + len > buf.size()) throw io_error("read_png: truncated chunk in " + path);
        const char* type = reinterpret_cast<const char*>(&buf[pos + 4]);
        const std::uint8_t* data = &buf[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.width = static_cast<int>(get_be32(data));
            img.height = static_cast<int>(get_be32(data + 4));
            const int bit_depth = data[8], color_type = data[9], interlace = data[12];
            if (bit_depth != 8 || (color_type != 0 && color_type != 2) || interlace != 0)
                throw io_error("read_png: unsupported PNG variant in " + path);
            img.channels = color_type == 0 ? 1 : 3;
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || idat.empty()) throw io_error("read_png: missing IHDR/IDAT in " + path);

    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    std::vector<std::uint8_t> raw((stride + 1) * img.height);
    uLongf raw_size = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_size != raw.size())
        throw io_error("read_png: inflate failed for " + path);

    img.pixels.resize(stride * img.height);
    const int bpp = img.channels;
    for (int y = 0; y < img.height; ++y) {
        const std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = &raw[y * (stride + 1) + 1];
        std::uint8_t* dst = &img.pixels[y * stride];
        const std::uint8_t* up = y > 0 ? &img.pixels[(y - 1) * stride] : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw io_error("read_png: bad filter type in " + path);
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return img;
}

}  // namespace sfuda::png
