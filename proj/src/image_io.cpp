#include "lgen/image_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "lgen/layout.hpp"  // parse_error

namespace lgen {

namespace {

uint8_t quantize(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

// Interleaved RGB rows from a [3, h, w] tensor.
std::vector<uint8_t> rgb_bytes(const Tensor& image, const char* who) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument(std::string(who) + ": image must be [3, h, w], got " +
                                    shape_to_string(image.shape()));
    }
    const int h = image.dim(1), w = image.dim(2);
    std::vector<uint8_t> bytes(static_cast<size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                bytes[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    quantize(image[(static_cast<size_t>(c) * h + y) * w + x]);
            }
        }
    }
    return bytes;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f.good()) throw std::runtime_error("write failed for " + path);
}

void append_text(std::vector<uint8_t>& out, const std::string& s) {
    out.insert(out.end(), s.begin(), s.end());
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
    const std::vector<uint8_t> bytes = rgb_bytes(image, "write_ppm");
    std::vector<uint8_t> out;
    append_text(out, "P6\n" + std::to_string(image.dim(2)) + " " + std::to_string(image.dim(1)) +
                         "\n255\n");
    out.insert(out.end(), bytes.begin(), bytes.end());
    write_file(path, out);
}

Tensor read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (!f || magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
        throw parse_error(path + ": not an 8-bit P6 file");
    }
    f.get();  // the single whitespace byte after the header
    std::vector<uint8_t> bytes(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (f.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw parse_error(path + ": truncated pixel data");
    }
    Tensor image({3, h, w});
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                image[(static_cast<size_t>(c) * h + y) * w + x] =
                    bytes[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
            }
        }
    }
    return image;
}

void write_pgm(const std::string& path, const Tensor& map) {
    if (map.rank() != 2) {
        throw std::invalid_argument("write_pgm: map must be [h, w], got " +
                                    shape_to_string(map.shape()));
    }
    const int h = map.dim(0), w = map.dim(1);
    std::vector<uint8_t> out;
    append_text(out, "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n");
    for (size_t i = 0; i < map.size(); ++i) out.push_back(quantize(map[i]));
    write_file(path, out);
}

namespace {

uint32_t crc32_bytes(const uint8_t* data, size_t n, uint32_t crc = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc ^= 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

uint32_t adler32_bytes(const uint8_t* data, size_t n) {
    uint32_t a = 1, b = 0;
    for (size_t i = 0; i < n; ++i) {
        a = (a + data[i]) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

void push_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void push_chunk(std::vector<uint8_t>& out, const char type[4],
                const std::vector<uint8_t>& data) {
    push_u32(out, static_cast<uint32_t>(data.size()));
    std::vector<uint8_t> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    out.insert(out.end(), body.begin(), body.end());
    push_u32(out, crc32_bytes(body.data(), body.size()));
}

}  // namespace

void write_png(const std::string& path, const Tensor& image) {
    const std::vector<uint8_t> rgb = rgb_bytes(image, "write_png");
    const int h = image.dim(1), w = image.dim(2);

    // raw scanline stream: filter byte 0 before each row
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(h) * (static_cast<size_t>(w) * 3 + 1));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);
        const uint8_t* row = rgb.data() + static_cast<size_t>(y) * w * 3;
        raw.insert(raw.end(), row, row + static_cast<size_t>(w) * 3);
    }

    // zlib stream with stored (uncompressed) deflate blocks
    std::vector<uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    size_t off = 0;
    while (off < raw.size()) {
        const size_t len = std::min<size_t>(raw.size() - off, 65535);
        const bool final = off + len == raw.size();
        z.push_back(final ? 1 : 0);
        z.push_back(static_cast<uint8_t>(len & 0xFF));
        z.push_back(static_cast<uint8_t>(len >> 8));
        z.push_back(static_cast<uint8_t>(~len & 0xFF));
        z.push_back(static_cast<uint8_t>((~len >> 8) & 0xFF));
        z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(off),
                 raw.begin() + static_cast<std::ptrdiff_t>(off + len));
        off += len;
    }
    push_u32(z, adler32_bytes(raw.data(), raw.size()));

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    std::vector<uint8_t> ihdr;
    push_u32(ihdr, static_cast<uint32_t>(w));
    push_u32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor
    ihdr.push_back(0);  // deflate
    ihdr.push_back(0);  // adaptive filtering
    ihdr.push_back(0);  // no interlace
    push_chunk(out, "IHDR", ihdr);
    push_chunk(out, "IDAT", z);
    push_chunk(out, "IEND", {});
    write_file(path, out);
}

}  // namespace lgen
