#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "caveseg/caveline3d.hpp"
#include "testutil.hpp"

using namespace caveseg;
using caveseg::testing::TempDir;

namespace {

CameraView make_view(const Eigen::Matrix3d& rotation,
                     const Eigen::Vector3d& center, double fx = 500.0,
                     double fy = 480.0, double cx = 320.0, double cy = 240.0) {
  CameraView v;
  v.fx = fx;
  v.fy = fy;
  v.cx = cx;
  v.cy = cy;
  v.rotation = rotation;
  v.translation = -rotation * center;
  return v;
}

Segment2D observe(const CameraView& view, const Eigen::Vector3d& a,
                  const Eigen::Vector3d& b) {
  Segment2D s;
  s.a = view.project(a);
  s.b = view.project(b);
  return s;
}

Eigen::Matrix3d rot_y(double degrees) {
  return Eigen::AngleAxisd(degrees * M_PI / 180.0, Eigen::Vector3d::UnitY())
      .toRotationMatrix();
}

}  // namespace

TEST_CASE("backprojected rays are unit length and pass through the center") {
  CameraView v = make_view(rot_y(35.0), {0.4, -0.2, 1.1});
  for (const auto& px : std::vector<Eigen::Vector2d>{
           {320.0, 240.0}, {0.0, 0.0}, {613.5, 17.25}, {100.0, 450.0}}) {
    const Ray r = backproject_ray(v, px.x(), px.y());
    CHECK(std::abs(r.dir.norm() - 1.0) < 1e-12);
    CHECK((r.origin - v.camera_center()).norm() < 1e-12);
    // Walking along the ray reprojects onto the same pixel.
    const Eigen::Vector2d again = v.project(r.origin + 2.7 * r.dir);
    CHECK((again - px).norm() < 1e-9);
  }
}

TEST_CASE("backprojection through an identity camera has a closed form") {
  CameraView v = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0}, 100.0,
                           100.0, 0.0, 0.0);
  const Ray center = backproject_ray(v, 0.0, 0.0);
  CHECK((center.dir - Eigen::Vector3d(0, 0, 1)).norm() < 1e-12);

  const Ray diag = backproject_ray(v, 100.0, 0.0);
  const Eigen::Vector3d expect =
      Eigen::Vector3d(1, 0, 1) / std::sqrt(2.0);
  CHECK((diag.dir - expect).norm() < 1e-12);
}

TEST_CASE("camera validation rejects broken intrinsics and rotations") {
  CameraView ok = make_view(rot_y(10.0), {0, 0, 0});
  CHECK_NOTHROW(ok.validate());

  CameraView bad_f = ok;
  bad_f.fx = 0.0;
  CHECK_THROWS_AS(bad_f.validate(), std::invalid_argument);

  CameraView scaled = ok;
  scaled.rotation *= 2.0;
  CHECK_THROWS_AS(scaled.validate(), std::invalid_argument);

  CameraView mirror = ok;
  mirror.rotation = Eigen::Vector3d(1, 1, -1).asDiagonal();  // det -1
  CHECK_THROWS_AS(mirror.validate(), std::invalid_argument);
}

TEST_CASE("projecting a point behind the camera is an error") {
  CameraView v = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0});
  CHECK_THROWS_AS(v.project({0.0, 0.0, -1.0}), std::runtime_error);
  CHECK(v.depth({0.0, 0.0, 4.0}) == doctest::Approx(4.0));
}

TEST_CASE("a segment through the principal row spans the y=0 plane") {
  CameraView v = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0}, 100.0,
                           100.0, 0.0, 0.0);
  Segment2D seg;
  seg.a = {-100.0, 0.0};
  seg.b = {100.0, 0.0};
  const Plane p = segment_plane(v, seg);
  CHECK(std::abs(std::abs(p.normal.y()) - 1.0) < 1e-12);
  CHECK(std::abs(p.d) < 1e-12);
  // The normal is perpendicular to both endpoint rays.
  CHECK(std::abs(p.normal.dot(backproject_ray(v, -100, 0).dir)) < 1e-12);
  CHECK(std::abs(p.normal.dot(backproject_ray(v, 100, 0).dir)) < 1e-12);

  Segment2D degenerate;
  degenerate.a = {17.0, 31.0};
  degenerate.b = {17.0, 31.0};
  CHECK_THROWS_AS(segment_plane(v, degenerate), std::runtime_error);
}

TEST_CASE("ray-plane intersection has a closed form on the y=0 plane") {
  CameraView plane_view = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0},
                                    100.0, 100.0, 0.0, 0.0);
  Segment2D plane_seg;
  plane_seg.a = {-100.0, 0.0};
  plane_seg.b = {100.0, 0.0};

  CameraView ray_view = make_view(Eigen::Matrix3d::Identity(), {0, 2, 0},
                                  100.0, 100.0, 0.0, 0.0);
  Segment2D ray_seg;
  ray_seg.a = {0.0, -100.0};
  ray_seg.b = {40.0, -100.0};

  const Segment3D seg =
      triangulate_segment(plane_view, plane_seg, ray_view, ray_seg);
  CHECK((seg.a - Eigen::Vector3d(0.0, 0.0, 2.0)).norm() < 1e-9);
  CHECK((seg.b - Eigen::Vector3d(0.8, 0.0, 2.0)).norm() < 1e-9);

  SUBCASE("rays pointing away from the plane are rejected") {
    Segment2D away;
    away.a = {0.0, 100.0};
    away.b = {40.0, 100.0};
    try {
      triangulate_segment(plane_view, plane_seg, ray_view, away);
      FAIL("expected a behind-camera error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("behind") != std::string::npos);
    }
  }

  SUBCASE("rays parallel to the plane are rejected") {
    Segment2D parallel;
    parallel.a = {0.0, 0.0};
    parallel.b = {40.0, 0.0};
    try {
      triangulate_segment(plane_view, plane_seg, ray_view, parallel);
      FAIL("expected a parallel-ray error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("parallel") != std::string::npos);
    }
  }

  SUBCASE("a 2px line shift in one of two views costs 1px on average") {
    Segment2D shifted = plane_seg;
    shifted.a.y() += 2.0;
    shifted.b.y() += 2.0;
    const double err =
        reprojection_error({plane_view, ray_view}, {shifted, ray_seg}, seg);
    CHECK(err == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("the error depends only on the supporting line") {
    Segment2D swapped;
    swapped.a = ray_seg.b;
    swapped.b = ray_seg.a;
    Segment2D stretched;
    stretched.a = ray_seg.a;
    stretched.b = ray_seg.a + 3.0 * (ray_seg.b - ray_seg.a);
    const double base =
        reprojection_error({plane_view, ray_view}, {plane_seg, ray_seg}, seg);
    CHECK(reprojection_error({plane_view, ray_view}, {plane_seg, swapped},
                             seg) == doctest::Approx(base).epsilon(1e-12));
    CHECK(reprojection_error({plane_view, ray_view}, {plane_seg, stretched},
                             seg) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("a known world segment is recovered from two posed views") {
  const Eigen::Vector3d A(0.2, -0.1, 3.0), B(-0.3, 0.25, 3.2);
  CameraView v1 = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0});
  CameraView v2 = make_view(rot_y(30.0), {-1.8, 0.1, 0.4});
  const Segment2D s1 = observe(v1, A, B);
  const Segment2D s2 = observe(v2, A, B);

  const Segment3D seg = triangulate_segment(v1, s1, v2, s2);
  CHECK((seg.a - A).norm() < 1e-6);
  CHECK((seg.b - B).norm() < 1e-6);
  CHECK(seg.reproj_error < 1e-8);

  // Swapping plane and ray roles recovers the same span.
  const Segment3D flipped = triangulate_segment(v2, s2, v1, s1);
  CHECK((flipped.a - A).norm() < 1e-6);
  CHECK((flipped.b - B).norm() < 1e-6);

  // Using the same view for plane and rays degenerates: every endpoint ray
  // lies inside its own segment plane.
  CHECK_THROWS_AS(triangulate_segment(v1, s1, v1, s1), std::runtime_error);
}

TEST_CASE("reconstruction is equivariant under a rigid world motion") {
  const Eigen::Vector3d A(0.2, -0.1, 3.0), B(-0.3, 0.25, 3.2);
  CameraView v1 = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0});
  CameraView v2 = make_view(rot_y(30.0), {-1.8, 0.1, 0.4});
  Segment2D s1 = observe(v1, A, B);
  Segment2D s2 = observe(v2, A, B);
  // Fixed pixel noise so the reprojection error is nonzero.
  s1.a += Eigen::Vector2d(0.8, -0.4);
  s2.b += Eigen::Vector2d(-0.5, 0.3);

  const Eigen::Matrix3d Q =
      Eigen::AngleAxisd(0.7, Eigen::Vector3d(1, 2, 3).normalized())
          .toRotationMatrix();
  const Eigen::Vector3d p(0.3, -1.2, 2.0);
  // World points move as x' = Q x + p, so cameras follow R' = R Q^T,
  // t' = t - R' p, and the pixel observations stay put.
  const auto moved = [&](const CameraView& v) {
    CameraView out = v;
    out.rotation = v.rotation * Q.transpose();
    out.translation = v.translation - out.rotation * p;
    return out;
  };

  const Segment3D base = triangulate_segment(v1, s1, v2, s2);
  const Segment3D moved_seg =
      triangulate_segment(moved(v1), s1, moved(v2), s2);
  CHECK((moved_seg.a - (Q * base.a + p)).norm() < 1e-9);
  CHECK((moved_seg.b - (Q * base.b + p)).norm() < 1e-9);
  CHECK(moved_seg.reproj_error ==
        doctest::Approx(base.reproj_error).epsilon(1e-9));
}

TEST_CASE("adjacent segments share their smoothed error") {
  std::vector<Segment3D> segs(3);
  segs[0].a = {0, 0, 0};
  segs[0].b = {1, 0, 0};
  segs[0].reproj_error = 0.0;
  segs[1].a = {1.05, 0, 0};
  segs[1].b = {2, 0, 0};
  segs[1].reproj_error = 2.0;
  segs[2].a = {10, 0, 0};
  segs[2].b = {11, 0, 0};
  segs[2].reproj_error = 5.0;

  const ConnectivityGraph g = build_connectivity_graph(segs, 0.2);
  REQUIRE(g.neighbors.size() == 3);
  CHECK(g.neighbors[0] == std::vector<int>{1});
  CHECK(g.neighbors[1] == std::vector<int>{0});
  CHECK(g.neighbors[2].empty());
  CHECK(g.smoothed_errors[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(g.smoothed_errors[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(g.smoothed_errors[2] == doctest::Approx(5.0).epsilon(1e-15));

  const ConnectivityGraph all = build_connectivity_graph(segs, 100.0);
  CHECK(all.neighbors[0].size() == 2);
  CHECK(all.smoothed_errors[0] == doctest::Approx(7.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("index-paired views triangulate and reject coherently") {
  const Eigen::Vector3d pts[3][2] = {
      {{0.2, -0.1, 3.0}, {-0.3, 0.25, 3.2}},
      {{0.5, 0.3, 2.5}, {0.9, 0.2, 2.7}},
      {{-0.2, 0.5, 2.8}, {0.1, 0.6, 3.1}},
  };
  CameraView v1 = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0});
  CameraView v2 = make_view(rot_y(30.0), {-1.8, 0.1, 0.4});
  CameraView v3 = make_view(rot_y(-25.0), {1.6, -0.2, 0.3});
  for (int k = 0; k < 3; ++k) {
    v1.segments.push_back(observe(v1, pts[k][0], pts[k][1]));
    v3.segments.push_back(observe(v3, pts[k][0], pts[k][1]));
    if (k < 2) v2.segments.push_back(observe(v2, pts[k][0], pts[k][1]));
  }

  const TriangulationResult r = triangulate_views({v1, v2, v3});
  REQUIRE(r.segments.size() == 3);
  CHECK(r.rejected == 0);
  for (int k = 0; k < 3; ++k) {
    CHECK(r.segments[k].pair_index == k);
    CHECK((r.segments[k].a - pts[k][0]).norm() < 1e-6);
    CHECK((r.segments[k].b - pts[k][1]).norm() < 1e-6);
    CHECK(r.segments[k].reproj_error < 1e-8);
  }
  CHECK(r.graph.smoothed_errors.size() == 3);

  SUBCASE("segments absent from a pinned plane view are rejected") {
    TriangulateOptions opts;
    opts.plane_view = 1;  // v2 never saw segment 2
    const TriangulationResult pinned = triangulate_views({v1, v2, v3}, opts);
    CHECK(pinned.segments.size() == 2);
    CHECK(pinned.rejected == 1);
    REQUIRE(pinned.rejection_reasons.size() == 1);
    CHECK(pinned.rejection_reasons[0].find("absent from the plane view") !=
          std::string::npos);
  }

  SUBCASE("segments seen once are rejected") {
    CameraView lone = v1;
    CameraView other = v2;  // two segments; v1 has three
    const TriangulationResult r2 = triangulate_views({lone, other});
    CHECK(r2.segments.size() == 2);
    CHECK(r2.rejected == 1);
    REQUIRE(r2.rejection_reasons.size() == 1);
    CHECK(r2.rejection_reasons[0].find("fewer than two views") !=
          std::string::npos);
  }

  SUBCASE("fewer than two views is a usage error") {
    CHECK_THROWS_AS(triangulate_views({v1}), std::invalid_argument);
    CHECK_THROWS_AS(triangulate_views({}), std::invalid_argument);
  }
}

TEST_CASE("direction matching pairs unordered observations") {
  CameraView a = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0});
  CameraView b = a;
  Segment2D horiz;
  horiz.a = {100, 200};
  horiz.b = {300, 210};
  Segment2D vert;
  vert.a = {400, 50};
  vert.b = {410, 350};
  a.segments = {horiz, vert};
  b.segments = {vert, horiz};

  const auto matches = angular_overlap_match(a, b);
  REQUIRE(matches.size() == 2);
  for (const auto& [ia, ib] : matches) {
    CHECK(ia != ib);  // the orderings were swapped
  }
}

TEST_CASE("mask components become line segments") {
  const int h = 20, w = 30;
  std::vector<std::int32_t> labels(static_cast<std::size_t>(h) * w, 3);
  for (int x = 5; x <= 24; ++x) labels[10 * w + x] = 0;
  // A 2x2 blob stays under min_pixels and is dropped.
  for (int y = 2; y <= 3; ++y)
    for (int x = 27; x <= 28; ++x) labels[y * w + x] = 0;

  const auto segs = mask_to_segments(labels, h, w, 0, 8);
  REQUIRE(segs.size() == 1);
  const double lo = std::min(segs[0].a.x(), segs[0].b.x());
  const double hi = std::max(segs[0].a.x(), segs[0].b.x());
  CHECK(lo == doctest::Approx(5.0).epsilon(0.2));
  CHECK(hi == doctest::Approx(24.0).epsilon(0.2));
  CHECK(segs[0].a.y() == doctest::Approx(10.0).epsilon(0.1));
  CHECK(segs[0].b.y() == doctest::Approx(10.0).epsilon(0.1));

  CHECK(mask_to_segments(labels, h, w, 7).empty());
  CHECK_THROWS_AS(mask_to_segments(labels, h, 0, 0), std::invalid_argument);
}

TEST_CASE("view files round trip through JSON") {
  TempDir tmp("views");
  CameraView v1 = make_view(rot_y(12.0), {0.5, -0.25, 1.0});
  Segment2D s;
  s.a = {12.5, 80.0};
  s.b = {400.25, 93.75};
  v1.segments = {s};
  CameraView v2 = make_view(rot_y(-7.0), {-0.4, 0.05, 0.2}, 510.0, 505.0,
                            319.5, 239.5);

  const std::string path = (tmp.path / "views.json").string();
  save_views_json(path, {v1, v2});
  const auto loaded = load_views_json(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].fx == v1.fx);
  CHECK(loaded[1].fy == v2.fy);
  CHECK((loaded[0].rotation - v1.rotation).norm() < 1e-15);
  CHECK((loaded[0].translation - v1.translation).norm() < 1e-15);
  REQUIRE(loaded[0].segments.size() == 1);
  CHECK(loaded[0].segments[0].a.x() == s.a.x());
  CHECK(loaded[0].segments[0].b.y() == s.b.y());
  CHECK(loaded[1].segments.empty());

  CHECK_THROWS_AS(load_views_json((tmp.path / "missing.json").string()),
                  std::runtime_error);

  // A bare array of views is accepted too.
  std::ifstream in(path);
  nlohmann::json doc = nlohmann::json::parse(in);
  const std::string bare = (tmp.path / "bare.json").string();
  std::ofstream out(bare);
  out << doc.at("views").dump();
  out.close();
  CHECK(load_views_json(bare).size() == 2);
}

TEST_CASE("PLY and summary writers emit parseable artifacts") {
  TempDir tmp("ply");
  CameraView v1 = make_view(Eigen::Matrix3d::Identity(), {0, 0, 0});
  CameraView v2 = make_view(rot_y(30.0), {-1.8, 0.1, 0.4});
  const Eigen::Vector3d A(0.2, -0.1, 3.0), B(-0.3, 0.25, 3.2);
  const Eigen::Vector3d C(0.5, 0.3, 2.5), D(0.9, 0.2, 2.7);
  v1.segments = {observe(v1, A, B), observe(v1, C, D)};
  v2.segments = {observe(v2, A, B), observe(v2, C, D)};
  const TriangulationResult r = triangulate_views({v1, v2});
  REQUIRE(r.segments.size() == 2);

  const std::string ply = (tmp.path / "line.ply").string();
  write_segments_ply(ply, r);
  std::ifstream is(ply);
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  CHECK(text.find("element vertex 4") != std::string::npos);
  CHECK(text.find("element edge 2") != std::string::npos);
  CHECK(text.find("end_header") != std::string::npos);

  const std::string summary = (tmp.path / "summary.json").string();
  write_summary_json(summary, r);
  std::ifstream js(summary);
  nlohmann::json doc = nlohmann::json::parse(js);
  CHECK(doc.at("segments").get<int>() == 2);
  CHECK(doc.at("rejected").get<int>() == 0);
  CHECK(doc.at("reprojection_error").at("mean").get<double>() < 1e-8);
}
