#pragma once

#include <string>

#include "lgen/tensor.hpp"

namespace lgen {

// Binary PPM (P6), 8 bits per channel. Values clamp to [0,1] and quantize
// by rounding; the write is byte-deterministic. Shape must be [3, h, w].
void write_ppm(const std::string& path, const Tensor& image);

// Reads a P6 file back as [3, h, w] doubles in [0,1] (value / 255).
// Throws parse_error on malformed input, std::runtime_error on IO failure.
Tensor read_ppm(const std::string& path);

// Binary PGM (P5) for one [h, w] map in [0,1]; same quantization rules.
void write_pgm(const std::string& path, const Tensor& map);

// 8-bit truecolor PNG for viewing. The pixel stream is deflate-stored
// (uncompressed blocks), so no compression library is involved and the
// bytes are deterministic. Same quantization as the PPM.
void write_png(const std::string& path, const Tensor& image);

}  // namespace lgen
