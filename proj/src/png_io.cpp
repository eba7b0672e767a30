#include "caveseg/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>

namespace caveseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const char* what) {
  throw std::runtime_error("png " + path + ": " + what);
}

ImageU8 read_png(const std::string& path, bool keep_palette_indices) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(path, "cannot open");

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    fail(path, "not a PNG file");

  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(path, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "decode error");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_byte color_type = png_get_color_type(png, info);
  const bool indexed = color_type == PNG_COLOR_TYPE_PALETTE;
  const bool as_plane = indexed && keep_palette_indices;

  if (as_plane) {
    // Raw indices, one byte per pixel.
    png_set_packing(png);
  } else {
    if (indexed) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY ||
        color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
      png_set_expand_gray_1_2_4_to_8(png);
      png_set_gray_to_rgb(png);
    }
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);

  ImageU8 img;
  img.h = static_cast<int>(png_get_image_height(png, info));
  img.w = static_cast<int>(png_get_image_width(png, info));
  img.channels = as_plane ? 1 : 3;
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(img.w) *
                      static_cast<std::size_t>(img.channels)) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "unexpected row layout after decode transforms");
  }
  img.pixels.resize(static_cast<std::size_t>(img.h) * rowbytes);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
  for (int y = 0; y < img.h; ++y)
    rows[static_cast<std::size_t>(y)] =
        img.pixels.data() + static_cast<std::size_t>(y) * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::string& path, const ImageU8& img, int color_type,
               const std::vector<std::array<std::uint8_t, 3>>* palette) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(path, "cannot open for writing");

  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(path, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(path, "encode error");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w),
               static_cast<png_uint_32>(img.h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> pal;
  if (palette) {
    pal.reserve(palette->size());
    for (const auto& c : *palette) pal.push_back({c[0], c[1], c[2]});
    png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
  }
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
  const std::size_t rowbytes =
      static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.channels);
  for (int y = 0; y < img.h; ++y)
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
        img.pixels.data() + static_cast<std::size_t>(y) * rowbytes);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void check_dims(const ImageU8& img, int channels, const std::string& path) {
  if (img.h < 1 || img.w < 1 || img.channels != channels ||
      img.pixels.size() != static_cast<std::size_t>(img.h) *
                               static_cast<std::size_t>(img.w) *
                               static_cast<std::size_t>(channels))
    throw std::invalid_argument("png " + path + ": image buffer is " +
                                std::to_string(img.h) + "x" +
                                std::to_string(img.w) + "x" +
                                std::to_string(img.channels) +
                                ", expected a consistent " +
                                std::to_string(channels) + "-channel raster");
}

}  // namespace

ImageU8 read_png_rgb(const std::string& path) { return read_png(path, false); }
ImageU8 read_png_mask(const std::string& path) { return read_png(path, true); }

void write_png_rgb(const std::string& path, const ImageU8& img) {
  check_dims(img, 3, path);
  write_png(path, img, PNG_COLOR_TYPE_RGB, nullptr);
}

void write_png_indexed(const std::string& path, const ImageU8& plane,
                       const std::vector<std::array<std::uint8_t, 3>>& palette) {
  check_dims(plane, 1, path);
  if (palette.empty() || palette.size() > 256)
    throw std::invalid_argument("png " + path +
                                ": palette must hold 1..256 colors");
  write_png(path, plane, PNG_COLOR_TYPE_PALETTE, &palette);
}

}  // namespace caveseg
