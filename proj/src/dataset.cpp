#include "caveseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "caveseg/ops.hpp"
#include "caveseg/rng.hpp"

namespace caveseg {

namespace {

namespace fs = std::filesystem;

std::uint32_t color_key(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return (static_cast<std::uint32_t>(r) << 16) |
         (static_cast<std::uint32_t>(g) << 8) | b;
}

}  // namespace

ClassPalette::ClassPalette(std::vector<PaletteEntry> entries)
    : entries_(std::move(entries)) {
  if (entries_.empty())
    throw std::invalid_argument("palette: needs at least one class");
  std::unordered_set<std::uint32_t> colors;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const PaletteEntry& e = entries_[i];
    if (e.id != static_cast<int>(i))
      throw std::invalid_argument("palette: ids must be contiguous from 0, got " +
                                  std::to_string(e.id) + " at position " +
                                  std::to_string(i));
    if (e.name.empty() || e.name.find(' ') != std::string::npos)
      throw std::invalid_argument("palette: bad class name \"" + e.name + "\"");
    const std::uint32_t key = color_key(e.rgb[0], e.rgb[1], e.rgb[2]);
    if (key == 0)
      throw std::invalid_argument(
          "palette: (0,0,0) is reserved for the ignore index");
    if (!colors.insert(key).second)
      throw std::invalid_argument("palette: duplicate color for class \"" +
                                  e.name + "\"");
  }
}

ClassPalette ClassPalette::caveseg_default() {
  return ClassPalette({
      {0, "caveline", {255, 255, 0}},
      {1, "first_layer", {0, 255, 0}},
      {2, "second_layer", {0, 128, 255}},
      {3, "open_area", {128, 128, 128}},
      {4, "ground_plane", {0, 64, 0}},
      {5, "diver", {255, 0, 255}},
      {6, "arrow", {139, 0, 0}},
      {7, "cookie", {255, 0, 0}},
      {8, "reel", {255, 128, 0}},
      {9, "attachment_rock", {139, 69, 19}},
      {10, "stalactite", {0, 255, 255}},
      {11, "stalagmite", {64, 0, 128}},
      {12, "column", {255, 255, 255}},
  });
}

ClassPalette ClassPalette::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("palette " + path + ": cannot open");
  std::vector<PaletteEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    PaletteEntry e;
    int r, g, b;
    if (!(ls >> e.id >> e.name >> r >> g >> b) || r < 0 || r > 255 || g < 0 ||
        g > 255 || b < 0 || b > 255)
      throw std::runtime_error("palette " + path + ": bad line " +
                               std::to_string(lineno) + ": \"" + line + "\"");
    e.rgb = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
             static_cast<std::uint8_t>(b)};
    entries.push_back(std::move(e));
  }
  return ClassPalette(std::move(entries));
}

void ClassPalette::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("palette " + path + ": cannot open for writing");
  for (const PaletteEntry& e : entries_)
    os << e.id << ' ' << e.name << ' ' << int{e.rgb[0]} << ' ' << int{e.rgb[1]}
       << ' ' << int{e.rgb[2]} << '\n';
  if (!os) throw std::runtime_error("palette " + path + ": write failed");
}

std::optional<int> ClassPalette::id_for_color(std::uint8_t r, std::uint8_t g,
                                              std::uint8_t b) const {
  for (const PaletteEntry& e : entries_)
    if (e.rgb[0] == r && e.rgb[1] == g && e.rgb[2] == b) return e.id;
  return std::nullopt;
}

std::array<std::uint8_t, 3> ClassPalette::color_for_id(std::int32_t id) const {
  if (id == kIgnoreIndex) return {0, 0, 0};
  if (id < 0 || id >= num_classes())
    throw std::invalid_argument("palette: class id " + std::to_string(id) +
                                " outside [0," + std::to_string(num_classes()) +
                                ")");
  return entries_[static_cast<std::size_t>(id)].rgb;
}

std::vector<std::int32_t> decode_mask(const ImageU8& mask,
                                      const ClassPalette& palette) {
  const std::size_t n =
      static_cast<std::size_t>(mask.h) * static_cast<std::size_t>(mask.w);
  std::vector<std::int32_t> labels(n);

  if (mask.channels == 1) {
    const int m = palette.num_classes();
    for (std::size_t i = 0; i < n; ++i) {
      const int v = mask.pixels[i];
      if (v != kIgnoreIndex && v >= m) {
        std::size_t count = 0;
        for (std::size_t k = 0; k < n; ++k)
          if (mask.pixels[k] == v) ++count;
        throw std::runtime_error("mask: index " + std::to_string(v) +
                                 " outside the " + std::to_string(m) +
                                 "-class palette on " + std::to_string(count) +
                                 " pixels");
      }
      labels[i] = v;
    }
    return labels;
  }

  if (mask.channels != 3)
    throw std::invalid_argument("mask: expected 1 or 3 channels, got " +
                                std::to_string(mask.channels));
  std::unordered_map<std::uint32_t, std::int32_t> lut;
  for (const PaletteEntry& e : palette.entries())
    lut.emplace(color_key(e.rgb[0], e.rgb[1], e.rgb[2]), e.id);
  lut.emplace(color_key(0, 0, 0), kIgnoreIndex);

  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t r = mask.pixels[3 * i], g = mask.pixels[3 * i + 1],
                       b = mask.pixels[3 * i + 2];
    const auto it = lut.find(color_key(r, g, b));
    if (it == lut.end()) {
      std::size_t count = 0;
      for (std::size_t k = 0; k < n; ++k)
        if (mask.pixels[3 * k] == r && mask.pixels[3 * k + 1] == g &&
            mask.pixels[3 * k + 2] == b)
          ++count;
      throw std::runtime_error(
          "mask: color (" + std::to_string(r) + "," + std::to_string(g) + "," +
          std::to_string(b) + ") not in palette, on " + std::to_string(count) +
          " pixels");
    }
    labels[i] = it->second;
  }
  return labels;
}

ImageU8 encode_mask(const std::vector<std::int32_t>& labels, int h, int w,
                    const ClassPalette& palette) {
  if (labels.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
    throw std::invalid_argument("encode_mask: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(h) + "x" +
                                std::to_string(w) + " grid");
  ImageU8 img;
  img.h = h;
  img.w = w;
  img.channels = 3;
  img.pixels.resize(labels.size() * 3);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto rgb = palette.color_for_id(labels[i]);
    img.pixels[3 * i] = rgb[0];
    img.pixels[3 * i + 1] = rgb[1];
    img.pixels[3 * i + 2] = rgb[2];
  }
  return img;
}

DatasetSplit split_dataset(std::vector<std::string> ids, std::uint64_t seed) {
  if (ids.size() < 3)
    throw std::invalid_argument("split: need at least 3 samples, got " +
                                std::to_string(ids.size()));
  Rng rng(seed);
  rng.shuffle(ids);
  const std::size_t n = ids.size();
  const std::size_t ntrain = static_cast<std::size_t>(
      std::floor(0.85 * static_cast<double>(n)));
  const std::size_t nval =
      static_cast<std::size_t>(std::floor(0.05 * static_cast<double>(n)));
  DatasetSplit split;
  split.seed = seed;
  split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(ntrain));
  split.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(ntrain),
                   ids.begin() + static_cast<std::ptrdiff_t>(ntrain + nval));
  split.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(ntrain + nval),
                    ids.end());
  return split;
}

void save_split_manifest(const std::string& path, const DatasetSplit& split) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("split manifest " + path + ": cannot open");
  os << "seed " << split.seed << '\n';
  for (const auto& id : split.train) os << "train " << id << '\n';
  for (const auto& id : split.val) os << "val " << id << '\n';
  for (const auto& id : split.test) os << "test " << id << '\n';
  if (!os) throw std::runtime_error("split manifest " + path + ": write failed");
}

DatasetSplit load_split_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("split manifest " + path + ": cannot open");
  DatasetSplit split;
  std::string tag, value, line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (!(ls >> tag >> value))
      throw std::runtime_error("split manifest " + path + ": bad line " +
                               std::to_string(lineno));
    if (tag == "seed")
      split.seed = std::stoull(value);
    else if (tag == "train")
      split.train.push_back(value);
    else if (tag == "val")
      split.val.push_back(value);
    else if (tag == "test")
      split.test.push_back(value);
    else
      throw std::runtime_error("split manifest " + path + ": unknown tag \"" +
                               tag + "\" on line " + std::to_string(lineno));
  }
  return split;
}

namespace {

void paint_rect(std::vector<std::int32_t>& labels, int w, int x0, int y0,
                int rw, int rh, std::int32_t cls) {
  for (int y = y0; y < y0 + rh; ++y)
    for (int x = x0; x < x0 + rw; ++x)
      labels[static_cast<std::size_t>(y * w + x)] = cls;
}

int find_class(const ClassPalette& palette, const std::string& name, int fallback) {
  for (const PaletteEntry& e : palette.entries())
    if (e.name == name) return e.id;
  return fallback;
}

}  // namespace

SegmentationSample generate_synthetic(std::uint64_t seed, int h, int w,
                                      const std::vector<int>& classes,
                                      const ClassPalette& palette) {
  if (h < 16 || w < 16)
    throw std::invalid_argument("synthetic: need h, w >= 16, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  if (classes.empty())
    throw std::invalid_argument("synthetic: class subset must be nonempty");
  std::vector<int> req;
  for (int c : classes) {
    if (c < 0 || c >= palette.num_classes())
      throw std::invalid_argument("synthetic: class " + std::to_string(c) +
                                  " outside the palette");
    if (std::find(req.begin(), req.end(), c) == req.end()) req.push_back(c);
  }

  const int bg = find_class(palette, "open_area", 0);
  const int line = find_class(palette, "caveline", -1);
  Rng rng(seed);
  std::vector<std::int32_t> labels(
      static_cast<std::size_t>(h) * static_cast<std::size_t>(w),
      static_cast<std::int32_t>(bg));

  // Area classes: 1-2 rectangles each, 4px-grid aligned, below the guarantee
  // band (rows 0..3).
  const int cells_w = w / 4, cells_h = h / 4 - 1;
  for (int c : req) {
    if (c == bg || c == line) continue;
    const int rects = 1 + static_cast<int>(rng.uniform_below(2));
    for (int k = 0; k < rects; ++k) {
      const int cw = std::min<int>(4 + static_cast<int>(rng.uniform_below(9)),
                                   cells_w);
      const int ch = std::min<int>(4 + static_cast<int>(rng.uniform_below(9)),
                                   cells_h);
      const int x0 = static_cast<int>(
          rng.uniform_below(static_cast<std::uint64_t>(cells_w - cw + 1)));
      const int y0 = 1 + static_cast<int>(rng.uniform_below(
                             static_cast<std::uint64_t>(cells_h - ch + 1)));
      paint_rect(labels, w, 4 * x0, 4 * y0, 4 * cw, 4 * ch, c);
    }
  }

  // Thin polyline: 2px tall, drawn after the areas so it stays visible; the
  // 4-pixel guarantee block is budgeted in to keep the class under 5%.
  const bool want_line = line >= 0 &&
                         std::find(req.begin(), req.end(), line) != req.end();
  if (want_line) {
    const std::int64_t budget = static_cast<std::int64_t>(
                                    0.048 * static_cast<double>(h) *
                                    static_cast<double>(w)) -
                                4;
    const std::int64_t len =
        std::clamp<std::int64_t>(budget / 2, 0, static_cast<std::int64_t>(w) - 8);
    if (len >= 4) {
      const int r =
          4 + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(h - 5)));
      paint_rect(labels, w, 4, r, static_cast<int>(len), 2, line);
    }
  }

  // Guarantee band: one block per requested class in request order, disjoint
  // 4-column slots along the top.
  for (std::size_t j = 0; j < req.size(); ++j) {
    const int c = req[static_cast<std::size_t>(j)];
    const int x0 = 4 * static_cast<int>(j);
    if (x0 + 4 <= w && h >= 4) {
      const int size = c == line ? 2 : 4;
      paint_rect(labels, w, x0, 0, size, size, c);
    } else {
      labels[j % static_cast<std::size_t>(w)] = c;
    }
  }

  SegmentationSample s;
  s.id = "synthetic-" + std::to_string(seed);
  s.labels = std::move(labels);
  s.image.h = h;
  s.image.w = w;
  s.image.channels = 3;
  s.image.pixels.resize(static_cast<std::size_t>(h) *
                        static_cast<std::size_t>(w) * 3);
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    const auto rgb = palette.color_for_id(s.labels[i]);
    for (int ch = 0; ch < 3; ++ch) {
      const int noisy = int{rgb[static_cast<std::size_t>(ch)]} +
                        static_cast<int>(rng.uniform_int(-10, 10));
      s.image.pixels[3 * i + static_cast<std::size_t>(ch)] =
          static_cast<std::uint8_t>(std::clamp(noisy, 0, 255));
    }
  }
  return s;
}

SegmentationSample resize_pair(const SegmentationSample& s, int out_h,
                               int out_w) {
  if (out_h < 1 || out_w < 1)
    throw std::invalid_argument("resize_pair: target must be positive");
  const int h = s.image.h, w = s.image.w;
  NoGradGuard guard;

  std::vector<double> raw(s.image.pixels.size());
  const std::size_t plane =
      static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      raw[static_cast<std::size_t>(c) * plane + i] =
          static_cast<double>(s.image.pixels[3 * i + static_cast<std::size_t>(c)]);
  Tensor img = bilinear_resize(Tensor::from_data({3, h, w}, std::move(raw)),
                               out_h, out_w);

  SegmentationSample out;
  out.id = s.id;
  out.image.h = out_h;
  out.image.w = out_w;
  out.image.channels = 3;
  const std::size_t oplane =
      static_cast<std::size_t>(out_h) * static_cast<std::size_t>(out_w);
  out.image.pixels.resize(oplane * 3);
  const auto& rv = img.values();
  for (std::size_t i = 0; i < oplane; ++i)
    for (int c = 0; c < 3; ++c)
      out.image.pixels[3 * i + static_cast<std::size_t>(c)] =
          static_cast<std::uint8_t>(std::clamp<long>(
              std::lround(rv[static_cast<std::size_t>(c) * oplane + i]), 0, 255));

  out.labels.resize(oplane);
  for (int oy = 0; oy < out_h; ++oy) {
    const int sy = std::min(
        h - 1, static_cast<int>((static_cast<double>(oy) + 0.5) *
                                static_cast<double>(h) / out_h));
    for (int ox = 0; ox < out_w; ++ox) {
      const int sx = std::min(
          w - 1, static_cast<int>((static_cast<double>(ox) + 0.5) *
                                  static_cast<double>(w) / out_w));
      out.labels[static_cast<std::size_t>(oy * out_w + ox)] =
          s.labels[static_cast<std::size_t>(sy * w + sx)];
    }
  }
  return out;
}

std::vector<std::string> list_sample_ids(const std::string& root) {
  const fs::path dir = fs::path(root) / "images";
  if (!fs::is_directory(dir))
    throw std::runtime_error("dataset: missing directory " + dir.string());
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      ids.push_back(entry.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

SegmentationSample load_sample(const std::string& root, const std::string& id,
                               const ClassPalette& palette) {
  SegmentationSample s;
  s.id = id;
  s.image = read_png_rgb((fs::path(root) / "images" / (id + ".png")).string());
  const ImageU8 mask =
      read_png_mask((fs::path(root) / "masks" / (id + ".png")).string());
  if (mask.h != s.image.h || mask.w != s.image.w)
    throw std::runtime_error("dataset: sample " + id + " image is " +
                             std::to_string(s.image.h) + "x" +
                             std::to_string(s.image.w) + " but mask is " +
                             std::to_string(mask.h) + "x" +
                             std::to_string(mask.w));
  s.labels = decode_mask(mask, palette);
  return s;
}

void save_sample(const std::string& root, const SegmentationSample& s,
                 const ClassPalette& palette) {
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");
  write_png_rgb((fs::path(root) / "images" / (s.id + ".png")).string(), s.image);
  write_png_rgb((fs::path(root) / "masks" / (s.id + ".png")).string(),
                encode_mask(s.labels, s.image.h, s.image.w, palette));
}

Tensor image_to_tensor(const ImageU8& img) {
  if (img.channels != 3)
    throw std::invalid_argument("image_to_tensor: need 3 channels, got " +
                                std::to_string(img.channels));
  const std::size_t plane =
      static_cast<std::size_t>(img.h) * static_cast<std::size_t>(img.w);
  std::vector<double> v(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      v[static_cast<std::size_t>(c) * plane + i] =
          static_cast<double>(img.pixels[3 * i + static_cast<std::size_t>(c)]) /
          255.0;
  return Tensor::from_data({3, img.h, img.w}, std::move(v));
}

}  // namespace caveseg
