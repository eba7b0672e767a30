#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include <doctest.h>

#include "caveseg/dataset.hpp"
#include "caveseg/png_io.hpp"
#include "testutil.hpp"

using namespace caveseg;
using caveseg::testing::TempDir;

TEST_CASE("default palette carries the 13 cave categories") {
  const ClassPalette p = ClassPalette::caveseg_default();
  REQUIRE(p.num_classes() == 13);
  const std::vector<std::string> names = {
      "caveline",  "first_layer", "second_layer", "open_area",
      "ground_plane", "diver",    "arrow",        "cookie",
      "reel",      "attachment_rock", "stalactite", "stalagmite",
      "column"};
  for (int c = 0; c < 13; ++c) {
    CHECK(p.entries()[static_cast<std::size_t>(c)].id == c);
    CHECK(p.entries()[static_cast<std::size_t>(c)].name ==
          names[static_cast<std::size_t>(c)]);
  }
  // Colors pairwise distinct and never black.
  std::set<std::array<std::uint8_t, 3>> colors;
  for (const auto& e : p.entries()) {
    CHECK(colors.insert(e.rgb).second);
    CHECK_FALSE((e.rgb[0] == 0 && e.rgb[1] == 0 && e.rgb[2] == 0));
  }
}

TEST_CASE("palette rejects malformed taxonomies") {
  CHECK_THROWS_AS(ClassPalette({{1, "a", {1, 1, 1}}}), std::invalid_argument);
  CHECK_THROWS_AS(ClassPalette({{0, "a", {0, 0, 0}}}), std::invalid_argument);
  CHECK_THROWS_AS(ClassPalette({{0, "a", {1, 1, 1}}, {1, "b", {1, 1, 1}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(ClassPalette({}), std::invalid_argument);
}

TEST_CASE("palette file round trips") {
  TempDir tmp("palette");
  const ClassPalette p = ClassPalette::caveseg_default();
  const std::string path = (tmp.path / "palette.txt").string();
  p.save(path);
  const ClassPalette q = ClassPalette::load(path);
  REQUIRE(q.num_classes() == p.num_classes());
  for (int c = 0; c < p.num_classes(); ++c) {
    CHECK(q.entries()[static_cast<std::size_t>(c)].name ==
          p.entries()[static_cast<std::size_t>(c)].name);
    CHECK(q.entries()[static_cast<std::size_t>(c)].rgb ==
          p.entries()[static_cast<std::size_t>(c)].rgb);
  }
  CHECK_THROWS_AS(ClassPalette::load((tmp.path / "missing.txt").string()),
                  std::runtime_error);
}

TEST_CASE("mask encode/decode round trips bit-exactly") {
  const ClassPalette p = ClassPalette::caveseg_default();
  std::vector<std::int32_t> labels;
  for (int c = 0; c < 13; ++c) labels.push_back(c);
  labels.push_back(kIgnoreIndex);
  labels.push_back(5);
  labels.push_back(kIgnoreIndex);  // 4x4 grid
  const ImageU8 mask = encode_mask(labels, 4, 4, p);
  REQUIRE(mask.channels == 3);
  CHECK(decode_mask(mask, p) == labels);

  // Ignore renders as pure black.
  CHECK(mask.at(3, 1, 0) == 0);
  CHECK(mask.at(3, 1, 1) == 0);
  CHECK(mask.at(3, 1, 2) == 0);
}

TEST_CASE("decoding an unknown color names it and counts its pixels") {
  const ClassPalette p = ClassPalette::caveseg_default();
  ImageU8 mask;
  mask.h = 2;
  mask.w = 2;
  mask.channels = 3;
  mask.pixels = {255, 255, 0, 1, 2, 3, 1, 2, 3, 0, 0, 0};
  try {
    decode_mask(mask, p);
    FAIL("expected an unknown-color error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(1,2,3)") != std::string::npos);
    CHECK(msg.find("2 pixels") != std::string::npos);
  }
}

TEST_CASE("indexed PNG masks round trip class ids directly") {
  TempDir tmp("indexed");
  const ClassPalette p = ClassPalette::caveseg_default();
  ImageU8 plane;
  plane.h = 3;
  plane.w = 5;
  plane.channels = 1;
  plane.pixels = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 0, 3};
  std::vector<std::array<std::uint8_t, 3>> colors;
  for (const auto& e : p.entries()) colors.push_back(e.rgb);

  const std::string path = (tmp.path / "mask.png").string();
  write_png_indexed(path, plane, colors);

  const ImageU8 back = read_png_mask(path);
  REQUIRE(back.channels == 1);
  REQUIRE(back.h == 3);
  REQUIRE(back.w == 5);
  CHECK(back.pixels == plane.pixels);

  const std::vector<std::int32_t> labels = decode_mask(back, p);
  for (std::size_t i = 0; i < plane.pixels.size(); ++i)
    CHECK(labels[i] == static_cast<std::int32_t>(plane.pixels[i]));

  // The same file read as RGB resolves palette colors.
  const ImageU8 rgb = read_png_rgb(path);
  REQUIRE(rgb.channels == 3);
  CHECK(rgb.at(0, 0, 0) == 255);  // caveline (255,255,0)
  CHECK(rgb.at(0, 0, 1) == 255);
  CHECK(rgb.at(0, 0, 2) == 0);
}

TEST_CASE("split sizes follow the floor rule exactly") {
  std::vector<std::string> ids1000, ids3350;
  for (int i = 0; i < 3350; ++i) {
    if (i < 1000) ids1000.push_back("s" + std::to_string(i));
    ids3350.push_back("s" + std::to_string(i));
  }
  const DatasetSplit a = split_dataset(ids1000, 4);
  CHECK(a.train.size() == 850);
  CHECK(a.val.size() == 50);
  CHECK(a.test.size() == 100);

  const DatasetSplit b = split_dataset(ids3350, 4);
  CHECK(b.train.size() == 2847);
  CHECK(b.val.size() == 167);
  CHECK(b.test.size() == 336);
}

TEST_CASE("splits are deterministic, disjoint, and exhaustive") {
  std::vector<std::string> ids;
  for (int i = 0; i < 40; ++i) ids.push_back("img" + std::to_string(i));
  const DatasetSplit a = split_dataset(ids, 11);
  const DatasetSplit b = split_dataset(ids, 11);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);

  const DatasetSplit c = split_dataset(ids, 12);
  CHECK(a.train != c.train);  // a different seed reshuffles

  std::set<std::string> all;
  for (const auto& v : {a.train, a.val, a.test})
    for (const auto& id : v) CHECK(all.insert(id).second);
  CHECK(all.size() == ids.size());

  CHECK_THROWS_AS(split_dataset({"a", "b"}, 0), std::invalid_argument);
}

TEST_CASE("split manifest round trips") {
  TempDir tmp("manifest");
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("x" + std::to_string(i));
  const DatasetSplit split = split_dataset(ids, 21);
  const std::string path = (tmp.path / "split.txt").string();
  save_split_manifest(path, split);
  const DatasetSplit back = load_split_manifest(path);
  CHECK(back.seed == split.seed);
  CHECK(back.train == split.train);
  CHECK(back.val == split.val);
  CHECK(back.test == split.test);
  CHECK_THROWS_AS(load_split_manifest((tmp.path / "no.txt").string()),
                  std::runtime_error);
}

TEST_CASE("synthetic scenes are deterministic in the seed") {
  const ClassPalette p = ClassPalette::caveseg_default();
  const std::vector<int> classes = {0, 1, 3, 4};
  const SegmentationSample a = generate_synthetic(7, 64, 64, classes, p);
  const SegmentationSample b = generate_synthetic(7, 64, 64, classes, p);
  CHECK(a.labels == b.labels);
  CHECK(a.image.pixels == b.image.pixels);

  const SegmentationSample c = generate_synthetic(8, 64, 64, classes, p);
  CHECK(a.labels != c.labels);
}

TEST_CASE("synthetic scenes contain every requested class") {
  const ClassPalette p = ClassPalette::caveseg_default();
  std::vector<int> all;
  for (int c = 0; c < 13; ++c) all.push_back(c);
  for (std::uint64_t seed : {0ull, 1ull, 2ull, 3ull, 9ull}) {
    const SegmentationSample s = generate_synthetic(seed, 64, 64, all, p);
    std::set<std::int32_t> present(s.labels.begin(), s.labels.end());
    for (int c : all) CHECK(present.count(c) == 1);
  }
}

TEST_CASE("the caveline stays under five percent of the pixels") {
  const ClassPalette p = ClassPalette::caveseg_default();
  for (auto [h, w] : {std::pair<int, int>{16, 16}, {64, 64}, {33, 97}}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const SegmentationSample s =
          generate_synthetic(seed, h, w, {0, 1, 3}, p);
      const std::int64_t line =
          std::count(s.labels.begin(), s.labels.end(), 0);
      CHECK(line >= 1);
      CHECK(static_cast<double>(line) <
            0.05 * static_cast<double>(h) * static_cast<double>(w));
    }
  }
}

TEST_CASE("synthetic parameter validation") {
  const ClassPalette p = ClassPalette::caveseg_default();
  CHECK_THROWS_AS(generate_synthetic(0, 8, 64, {0}, p), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic(0, 64, 15, {0}, p), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic(0, 64, 64, {}, p), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic(0, 64, 64, {13}, p), std::invalid_argument);
}

TEST_CASE("resize_pair at the same size is the identity") {
  const ClassPalette p = ClassPalette::caveseg_default();
  const SegmentationSample s = generate_synthetic(3, 32, 48, {1, 3, 5}, p);
  const SegmentationSample t = resize_pair(s, 32, 48);
  CHECK(t.image.pixels == s.image.pixels);
  CHECK(t.labels == s.labels);
}

TEST_CASE("resize_pair keeps labels inside the source id set") {
  const ClassPalette p = ClassPalette::caveseg_default();
  const SegmentationSample s = generate_synthetic(4, 64, 64, {0, 2, 3, 6}, p);
  std::set<std::int32_t> source(s.labels.begin(), s.labels.end());
  for (auto [h, w] : {std::pair<int, int>{32, 32}, {48, 96}, {17, 23}}) {
    const SegmentationSample t = resize_pair(s, h, w);
    CHECK(t.image.h == h);
    CHECK(t.labels.size() == static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
    for (std::int32_t v : t.labels) CHECK(source.count(v) == 1);
  }
}

TEST_CASE("samples round trip through the directory layout") {
  TempDir tmp("samples");
  const ClassPalette p = ClassPalette::caveseg_default();
  SegmentationSample s = generate_synthetic(5, 24, 40, {1, 3, 7}, p);
  s.id = "scene-5";
  save_sample(tmp.str(), s, p);

  const auto ids = list_sample_ids(tmp.str());
  REQUIRE(ids == std::vector<std::string>{"scene-5"});

  const SegmentationSample back = load_sample(tmp.str(), "scene-5", p);
  CHECK(back.image.pixels == s.image.pixels);
  CHECK(back.labels == s.labels);

  CHECK_THROWS_AS(list_sample_ids((tmp.path / "nope").string()),
                  std::runtime_error);
  CHECK_THROWS_AS(load_sample(tmp.str(), "missing", p), std::runtime_error);
}

TEST_CASE("image_to_tensor scales into the unit range") {
  ImageU8 img;
  img.h = 1;
  img.w = 2;
  img.channels = 3;
  img.pixels = {0, 128, 255, 51, 0, 102};
  const Tensor t = image_to_tensor(img);
  REQUIRE(t.shape() == Shape{3, 1, 2});
  CHECK(t.at({0, 0, 0}) == 0.0);
  CHECK(t.at({0, 0, 1}) == doctest::Approx(51.0 / 255.0).epsilon(1e-15));
  CHECK(t.at({1, 0, 0}) == doctest::Approx(128.0 / 255.0).epsilon(1e-15));
  CHECK(t.at({2, 0, 0}) == 1.0);
  CHECK(t.at({2, 0, 1}) == doctest::Approx(102.0 / 255.0).epsilon(1e-15));
}
