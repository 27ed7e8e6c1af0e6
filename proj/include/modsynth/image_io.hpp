#pragma once

// PNG reading and writing through libpng: 16-bit grayscale slices and 8-bit
// RGB figures.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace modsynth {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GrayImage {
  int width = 0;
  int height = 0;
  int bit_depth = 16;  // 8 or 16; samples span 0 .. 2^bit_depth - 1
  std::vector<std::uint16_t> pixels;  // row-major

  double max_value() const { return bit_depth == 16 ? 65535.0 : 255.0; }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path);
  return f;
}

[[noreturn]] inline void png_error_handler(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

inline void png_warning_handler(png_structp, png_const_charp) {}

/// Writes rows of `bit_depth` samples with `channels` per pixel.
inline void write_png_rows(const std::string& path, int width, int height, int channels, int bit_depth,
                           const std::vector<std::vector<png_byte>>& rows) {
  FilePtr f = open_file(path, "wb");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_handler, png_warning_handler);
  if (!png) throw IoError("png init failed for " + path);
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed for " + path + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, width, height, bit_depth, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& row : rows) png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Reads an 8- or 16-bit grayscale PNG (8-bit samples are kept as 0..255).
inline GrayImage read_png_gray(const std::string& path) {
  detail::FilePtr f = detail::open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IoError(path + " is not a PNG file");
  std::string err;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_handler, detail::png_warning_handler);
  if (!png) throw IoError("png init failed for " + path);
  png_infop info = png_create_info_struct(png);
  GrayImage img;
  std::vector<png_byte> buffer;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png read failed for " + path + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path + " is not a grayscale PNG");
  }
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * img.height);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  img.bit_depth = depth == 16 ? 16 : 8;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    // PNG stores 16-bit samples big-endian.
    img.pixels[i] = depth == 16 ? static_cast<std::uint16_t>((buffer[2 * i] << 8) | buffer[2 * i + 1]) : buffer[i];
  }
  return img;
}

inline void write_png_gray16(const std::string& path, const GrayImage& img) {
  if (img.width < 1 || img.height < 1 || img.pixels.size() != static_cast<std::size_t>(img.width) * img.height) {
    throw IoError("write_png_gray16: inconsistent image for " + path);
  }
  std::vector<std::vector<png_byte>> rows(img.height, std::vector<png_byte>(2 * img.width));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const std::uint16_t v = img.pixels[static_cast<std::size_t>(y) * img.width + x];
      rows[y][2 * x] = static_cast<png_byte>(v >> 8);
      rows[y][2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
  detail::write_png_rows(path, img.width, img.height, 1, 16, rows);
}

/// 8-bit RGB raster used for plots.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // r, g, b per pixel

  RgbImage(int w, int h, std::uint8_t fill = 255) : width(w), height(h), pixels(3 * static_cast<std::size_t>(w) * h, fill) {}

  void set(int x, int y, std::uint32_t rgb) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    std::uint8_t* p = &pixels[3 * (static_cast<std::size_t>(y) * width + x)];
    p[0] = (rgb >> 16) & 0xff;
    p[1] = (rgb >> 8) & 0xff;
    p[2] = rgb & 0xff;
  }

  void fill_rect(int x0, int y0, int x1, int y1, std::uint32_t rgb) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) set(x, y, rgb);
  }
};

inline void write_png_rgb(const std::string& path, const RgbImage& img) {
  std::vector<std::vector<png_byte>> rows(img.height);
  for (int y = 0; y < img.height; ++y) {
    auto first = img.pixels.begin() + 3 * static_cast<std::ptrdiff_t>(y) * img.width;
    rows[y].assign(first, first + 3 * img.width);
  }
  detail::write_png_rows(path, img.width, img.height, 3, 8, rows);
}

}  // namespace modsynth
