#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "keyfield/grid.hpp"

namespace keyfield {

using Bytes = std::vector<std::uint8_t>;

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

using RgbImage = Grid<Rgb>;

enum class ImageFormat { png, jpeg, unknown };

ImageFormat sniff_format(std::span<const std::uint8_t> bytes);

// Decodes PNG or JPEG into 8-bit RGB. Throws Error(invalid_input) on failure.
RgbImage decode_image(std::span<const std::uint8_t> bytes);

// Deterministic PNG encoding (fixed zlib level, no timestamps).
Bytes encode_png(const RgbImage& image);

// Single-channel 8-bit PNG, used for label maps in fixtures and archives.
Grid<std::uint8_t> decode_gray_png(std::span<const std::uint8_t> bytes);
Bytes encode_gray_png(const Grid<std::uint8_t>& gray);

RgbImage crop(const RgbImage& image, const BBox& box);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

std::string base64_encode(std::span<const std::uint8_t> bytes);
Bytes base64_decode(std::string_view text);

Bytes read_file(const std::string& path);
// Writes to a sibling temp file then renames over the target.
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::string& path, std::string_view text);

}  // namespace keyfield
