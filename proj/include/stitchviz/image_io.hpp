#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "stitchviz/core.hpp"

namespace stitchviz::io {

// 8-bit RGB PNG encoding of a unit-space image. Quantization is
// round(v * 255), so encoding is a pure function of the pixel values.
std::vector<uint8_t> encode_png(const ImageTensor& img);
// Single-channel map (H, W) rendered as an 8-bit grayscale PNG, normalized
// per map to its own [min, max].
std::vector<uint8_t> encode_heatmap_png(const torch::Tensor& map);

// Decodes PNG or JPEG (sniffed from magic bytes) into a unit-space image.
// Throws FormatError on corrupt data and ValidationError when either side
// exceeds max_side.
ImageTensor decode_image(std::string_view bytes, int64_t max_side = 4096);

void write_file(const std::filesystem::path& path, std::string_view bytes);
void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);
std::string read_file(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const ImageTensor& img);
ImageTensor read_image(const std::filesystem::path& path, int64_t max_side = 4096);

std::string base64_encode(std::string_view bytes);
std::string base64_encode(const std::vector<uint8_t>& bytes);
std::string base64_decode(std::string_view text);

}  // namespace stitchviz::io
