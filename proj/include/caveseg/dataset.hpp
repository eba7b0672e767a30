#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "caveseg/png_io.hpp"
#include "caveseg/tensor.hpp"

namespace caveseg {

inline constexpr int kIgnoreIndex = 255;

struct PaletteEntry {
  int id;
  std::string name;
  std::array<std::uint8_t, 3> rgb;
};

// The 13-category cave taxonomy. Ids are contiguous from 0, colors pairwise
// distinct and never pure black: RGB (0,0,0) round-trips the ignore index.
class ClassPalette {
 public:
  static ClassPalette caveseg_default();
  // Plain text, one `id name r g b` line per class.
  static ClassPalette load(const std::string& path);
  void save(const std::string& path) const;

  explicit ClassPalette(std::vector<PaletteEntry> entries);

  int num_classes() const { return static_cast<int>(entries_.size()); }
  const std::vector<PaletteEntry>& entries() const { return entries_; }
  std::optional<int> id_for_color(std::uint8_t r, std::uint8_t g,
                                  std::uint8_t b) const;
  std::array<std::uint8_t, 3> color_for_id(std::int32_t id) const;

 private:
  std::vector<PaletteEntry> entries_;
};

struct SegmentationSample {
  ImageU8 image;                     // h x w x 3
  std::vector<std::int32_t> labels;  // h*w values in {0..M-1, kIgnoreIndex}
  std::string id;
};

// Color mask (h,w,3) or index plane (h,w,1) -> label grid. Unknown colors or
// out-of-range indices are data errors naming the offender and its count.
std::vector<std::int32_t> decode_mask(const ImageU8& mask,
                                      const ClassPalette& palette);
// Label grid -> RGB mask; the ignore index renders black.
ImageU8 encode_mask(const std::vector<std::int32_t>& labels, int h, int w,
                    const ClassPalette& palette);

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
};

// Seeded shuffle, then |train| = floor(0.85 n), |val| = floor(0.05 n),
// test = remainder.
DatasetSplit split_dataset(std::vector<std::string> ids, std::uint64_t seed);

void save_split_manifest(const std::string& path, const DatasetSplit& split);
DatasetSplit load_split_manifest(const std::string& path);

// Deterministic scene: open_area background, guarantee blocks for every
// requested class along the top rows, grid-aligned rectangles for area
// classes, and a thin (< 5% of pixels) polyline when the caveline is
// requested. The rendered image gives each class its palette color plus
// seeded pixel noise.
SegmentationSample generate_synthetic(std::uint64_t seed, int h, int w,
                                      const std::vector<int>& classes,
                                      const ClassPalette& palette);

// Image resampled bilinearly, labels by nearest neighbor (ids never blend).
SegmentationSample resize_pair(const SegmentationSample& s, int out_h,
                               int out_w);

// Directory layout: <root>/images/<id>.png + <root>/masks/<id>.png.
std::vector<std::string> list_sample_ids(const std::string& root);
SegmentationSample load_sample(const std::string& root, const std::string& id,
                               const ClassPalette& palette);
void save_sample(const std::string& root, const SegmentationSample& s,
                 const ClassPalette& palette);

// [3,H,W] tensor scaled to [0,1].
Tensor image_to_tensor(const ImageU8& img);

}  // namespace caveseg
