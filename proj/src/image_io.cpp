#include "stitchviz/image_io.hpp"

#include <array>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <jpeglib.h>
#include <png.h>

namespace stitchviz::io {

namespace {

std::vector<uint8_t> encode_png_raw(const std::vector<uint8_t>& pixels, int width, int height, int channels) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("png encode failed: ") + image.message);
  }
  std::vector<uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("png encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

ImageTensor pixels_to_image(const std::vector<uint8_t>& pixels, int64_t width, int64_t height) {
  auto t = torch::from_blob(const_cast<uint8_t*>(pixels.data()), {height, width, 3}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat32)
               .div(255.0f);
  return ImageTensor(t, ValueSpace::unit);
}

void check_side(int64_t width, int64_t height, int64_t max_side) {
  if (width < 1 || height < 1) throw FormatError("image has empty dimensions");
  if (width > max_side || height > max_side) {
    throw ValidationError("image " + std::to_string(width) + "x" + std::to_string(height) + " exceeds limit of " +
                          std::to_string(max_side) + " per side");
  }
}

ImageTensor decode_png(std::string_view bytes, int64_t max_side) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError(std::string("png decode failed: ") + image.message);
  }
  try {
    check_side(image.width, image.height, max_side);
  } catch (...) {
    png_image_free(&image);
    throw;
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    throw FormatError(std::string("png decode failed: ") + image.message);
  }
  return pixels_to_image(pixels, image.width, image.height);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

ImageTensor decode_jpeg(std::string_view bytes, int64_t max_side) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<uint8_t> pixels;
  int64_t width = 0;
  int64_t height = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(std::string("jpeg decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  width = cinfo.image_width;
  height = cinfo.image_height;
  if (width <= max_side && height <= max_side) {
    jpeg_start_decompress(&cinfo);
    pixels.resize(static_cast<size_t>(width * height * 3));
    while (cinfo.output_scanline < cinfo.output_height) {
      JSAMPROW row = pixels.data() + static_cast<size_t>(cinfo.output_scanline) * width * 3;
      jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
  }
  jpeg_destroy_decompress(&cinfo);
  check_side(width, height, max_side);
  return pixels_to_image(pixels, width, height);
}

}  // namespace

std::vector<uint8_t> encode_png(const ImageTensor& img) {
  auto unit = img.data().clamp(0.0, 1.0);
  auto bytes = unit.mul(255.0f).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  std::vector<uint8_t> pixels(bytes.data_ptr<uint8_t>(), bytes.data_ptr<uint8_t>() + bytes.numel());
  return encode_png_raw(pixels, static_cast<int>(img.width()), static_cast<int>(img.height()), 3);
}

std::vector<uint8_t> encode_heatmap_png(const torch::Tensor& map) {
  if (map.dim() != 2) throw ShapeError("heatmap must be (H, W)");
  auto m = map.detach().to(torch::kFloat64);
  const double lo = m.min().item<double>();
  const double hi = m.max().item<double>();
  auto norm = hi > lo ? (m - lo) / (hi - lo) : torch::zeros_like(m);
  auto bytes = norm.mul(255.0).round().to(torch::kUInt8).contiguous();
  std::vector<uint8_t> pixels(bytes.data_ptr<uint8_t>(), bytes.data_ptr<uint8_t>() + bytes.numel());
  return encode_png_raw(pixels, static_cast<int>(map.size(1)), static_cast<int>(map.size(0)), 1);
}

ImageTensor decode_image(std::string_view bytes, int64_t max_side) {
  static constexpr std::array<unsigned char, 8> kPngMagic{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngMagic.data(), 8) == 0) return decode_png(bytes, max_side);
  if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xff &&
      static_cast<unsigned char>(bytes[1]) == 0xd8) {
    return decode_jpeg(bytes, max_side);
  }
  throw FormatError("unsupported image format (expected PNG or JPEG)");
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_png(const std::filesystem::path& path, const ImageTensor& img) { write_file(path, encode_png(img)); }

ImageTensor read_image(const std::filesystem::path& path, int64_t max_side) {
  return decode_image(read_file(path), max_side);
}

namespace {
constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const uint32_t v = (static_cast<uint8_t>(bytes[i]) << 16) | (static_cast<uint8_t>(bytes[i + 1]) << 8) |
                       static_cast<uint8_t>(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const size_t rest = bytes.size() - i;
  if (rest > 0) {
    uint32_t v = static_cast<uint8_t>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<uint8_t>(bytes[i + 1]) << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
  return base64_encode(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string base64_decode(std::string_view text) {
  // Accept optional data-URL prefix.
  if (auto comma = text.find(','); text.starts_with("data:") && comma != std::string_view::npos) {
    text.remove_prefix(comma + 1);
  }
  std::string out;
  uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=' || c == '\n' || c == '\r' || c == ' ') continue;
    const auto pos = kAlphabet.find(c);
    if (pos == std::string_view::npos) throw FormatError("invalid base64 payload");
    acc = (acc << 6) | static_cast<uint32_t>(pos);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((acc >> bits) & 0xff);
    }
  }
  return out;
}

}  // namespace stitchviz::io
