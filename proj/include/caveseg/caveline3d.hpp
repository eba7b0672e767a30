#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace caveseg {

// A 2D observation of a caveline span, in pixel coordinates.
struct Segment2D {
  Eigen::Vector2d a = Eigen::Vector2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();

  double length() const { return (b - a).norm(); }
};

// Pinhole camera with a world-to-camera rigid transform: x_cam = R*x + t.
struct CameraView {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  std::vector<Segment2D> segments;

  // Orthonormality and det=+1 within 1e-9; positive focal lengths.
  void validate() const;
  Eigen::Vector3d camera_center() const;
  // Pixel coordinates of a world point. The point must have positive depth.
  Eigen::Vector2d project(const Eigen::Vector3d& point) const;
  double depth(const Eigen::Vector3d& point) const;
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d dir = Eigen::Vector3d::UnitZ();  // unit length
};

// Plane as n.x + d = 0 with unit normal.
struct Plane {
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  double d = 0.0;
};

// World-frame viewing ray through pixel (u, v). The direction is unit norm.
Ray backproject_ray(const CameraView& view, double u, double v);

// Plane spanned by the two endpoint rays of a 2D segment. A degenerate
// segment (endpoint rays parallel) is an error.
Plane segment_plane(const CameraView& view, const Segment2D& seg);

struct Segment3D {
  Eigen::Vector3d a = Eigen::Vector3d::Zero();
  Eigen::Vector3d b = Eigen::Vector3d::Zero();
  double reproj_error = 0.0;
  double smoothed_error = 0.0;
  int pair_index = -1;

  double length() const { return (b - a).norm(); }
};

// Intersects the ray view's endpoint rays with the plane view's segment
// plane. Throws when the geometry degenerates (parallel ray) or an
// intersection falls behind a camera.
Segment3D triangulate_segment(const CameraView& plane_view, const Segment2D& plane_seg,
                              const CameraView& ray_view, const Segment2D& ray_seg);

// Mean perpendicular distance (pixels) of the reconstruction's projected
// endpoints to the observed segment's supporting line, averaged over the
// views where the reconstruction has positive depth. `observed` is aligned
// with `views`. All views behind the camera is an error.
double reprojection_error(const std::vector<CameraView>& views,
                          const std::vector<Segment2D>& observed,
                          const Segment3D& seg);

struct ConnectivityGraph {
  std::vector<std::vector<int>> neighbors;
  std::vector<double> smoothed_errors;
};

// Segments are adjacent when their closest endpoints lie within `radius`.
// Each smoothed error is the mean of the segment's own error and its
// neighbors' errors.
ConnectivityGraph build_connectivity_graph(const std::vector<Segment3D>& segments,
                                           double radius);

struct TriangulateOptions {
  // <0: pick per segment, preferring the view with the longer observation.
  int plane_view = -1;
  // <=0: 2x the median reconstructed segment length.
  double connect_radius = 0.0;
};

struct TriangulationResult {
  std::vector<Segment3D> segments;
  int rejected = 0;
  std::vector<std::string> rejection_reasons;
  ConnectivityGraph graph;
};

// Observations are index-paired: segment k of every view depicts the same
// physical span. Needs at least two views.
TriangulationResult triangulate_views(const std::vector<CameraView>& views,
                                      const TriangulateOptions& opts = {});

// Heuristic pairing for unordered observations: matches segments across two
// views by image-space direction. No epipolar reasoning; intended only as a
// convenience when upstream detections are unordered.
std::vector<std::pair<int, int>> angular_overlap_match(const CameraView& a,
                                                       const CameraView& b);

// Extracts line segments from a label grid: 4-connected components of
// `cls`, each fitted with its principal axis and clipped to the extreme
// pixels. Components smaller than min_pixels are dropped.
std::vector<Segment2D> mask_to_segments(const std::vector<std::int32_t>& labels,
                                        int h, int w, std::int32_t cls,
                                        int min_pixels = 8);

// JSON view file: {"views":[{"fx","fy","cx","cy","rotation":[9 row-major],
// "translation":[3],"segments":[[x1,y1,x2,y2],...]},...]}; a bare array of
// view objects is also accepted.
std::vector<CameraView> load_views_json(const std::string& path);
void save_views_json(const std::string& path, const std::vector<CameraView>& views);

// ASCII PLY with segment endpoints as vertices (plus an error scalar) and
// one edge per segment.
void write_segments_ply(const std::string& path, const TriangulationResult& result);

// Summary: segment/rejection counts and error statistics.
void write_summary_json(const std::string& path, const TriangulationResult& result);

}  // namespace caveseg
