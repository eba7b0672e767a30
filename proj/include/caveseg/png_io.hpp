#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace caveseg {

// 8-bit raster, row-major, channels interleaved. channels is 3 (RGB) or 1
// (index plane from an indexed-color PNG).
struct ImageU8 {
  int h = 0;
  int w = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(int y, int x, int c) const {
    return pixels[static_cast<std::size_t>((y * w + x) * channels + c)];
  }
};

// Decodes any PNG to 8-bit RGB (gray expanded, alpha stripped, 16-bit
// narrowed, palettes resolved to their colors).
ImageU8 read_png_rgb(const std::string& path);

// Like read_png_rgb, but an indexed-color PNG yields its raw index plane
// (channels == 1) instead of resolved colors. Mask files use this so indexed
// masks carry class ids directly.
ImageU8 read_png_mask(const std::string& path);

void write_png_rgb(const std::string& path, const ImageU8& img);

// plane must have channels == 1; values index into the palette.
void write_png_indexed(const std::string& path, const ImageU8& plane,
                       const std::vector<std::array<std::uint8_t, 3>>& palette);

}  // namespace caveseg
