#include "caveseg/caveline3d.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <queue>
#include <stdexcept>

#include <json.hpp>

namespace caveseg {

namespace {

constexpr double kParallelEps = 1e-12;

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Perpendicular pixel distance from p to the line supporting seg; falls
// back to point distance when the observation is degenerate.
double line_distance(const Segment2D& seg, const Eigen::Vector2d& p) {
  const Eigen::Vector2d d = seg.b - seg.a;
  const double len = d.norm();
  if (len < kParallelEps) return (p - seg.a).norm();
  const Eigen::Vector2d n(-d.y() / len, d.x() / len);
  return std::abs(n.dot(p - seg.a));
}

}  // namespace

void CameraView::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0))
    throw std::invalid_argument("camera: focal lengths must be positive, got fx=" +
                                std::to_string(fx) + " fy=" + std::to_string(fy));
  const double ortho =
      (rotation * rotation.transpose() - Eigen::Matrix3d::Identity())
          .cwiseAbs()
          .maxCoeff();
  if (ortho > 1e-9)
    throw std::invalid_argument(
        "camera: rotation is not orthonormal (max deviation " +
        std::to_string(ortho) + ")");
  if (std::abs(rotation.determinant() - 1.0) > 1e-9)
    throw std::invalid_argument("camera: rotation determinant is " +
                                std::to_string(rotation.determinant()) +
                                ", expected +1");
}

Eigen::Vector3d CameraView::camera_center() const {
  return -(rotation.transpose() * translation);
}

double CameraView::depth(const Eigen::Vector3d& point) const {
  return (rotation * point + translation).z();
}

Eigen::Vector2d CameraView::project(const Eigen::Vector3d& point) const {
  const Eigen::Vector3d pc = rotation * point + translation;
  if (!(pc.z() > 0.0))
    throw std::runtime_error("project: point has nonpositive depth " +
                             std::to_string(pc.z()));
  return {fx * pc.x() / pc.z() + cx, fy * pc.y() / pc.z() + cy};
}

Ray backproject_ray(const CameraView& view, double u, double v) {
  Ray ray;
  const Eigen::Vector3d dir_cam((u - view.cx) / view.fx, (v - view.cy) / view.fy,
                                1.0);
  ray.dir = (view.rotation.transpose() * dir_cam).normalized();
  ray.origin = view.camera_center();
  return ray;
}

Plane segment_plane(const CameraView& view, const Segment2D& seg) {
  const Ray r1 = backproject_ray(view, seg.a.x(), seg.a.y());
  const Ray r2 = backproject_ray(view, seg.b.x(), seg.b.y());
  Eigen::Vector3d n = r1.dir.cross(r2.dir);
  if (n.norm() < kParallelEps)
    throw std::runtime_error(
        "segment_plane: endpoint rays are parallel, segment is degenerate");
  n.normalize();
  Plane plane;
  plane.normal = n;
  plane.d = -n.dot(view.camera_center());
  return plane;
}

Segment3D triangulate_segment(const CameraView& plane_view, const Segment2D& plane_seg,
                              const CameraView& ray_view, const Segment2D& ray_seg) {
  const Plane plane = segment_plane(plane_view, plane_seg);
  Eigen::Vector3d pts[2];
  const Eigen::Vector2d ends[2] = {ray_seg.a, ray_seg.b};
  for (int i = 0; i < 2; ++i) {
    const Ray ray = backproject_ray(ray_view, ends[i].x(), ends[i].y());
    const double denom = plane.normal.dot(ray.dir);
    if (std::abs(denom) < kParallelEps)
      throw std::runtime_error(
          "triangulate: endpoint ray is parallel to the caveline plane");
    const double t = -(plane.normal.dot(ray.origin) + plane.d) / denom;
    if (!(t > 0.0))
      throw std::runtime_error("triangulate: intersection behind the camera (t=" +
                               std::to_string(t) + ")");
    pts[i] = ray.origin + t * ray.dir;
  }
  Segment3D seg;
  seg.a = pts[0];
  seg.b = pts[1];
  seg.reproj_error = reprojection_error({plane_view, ray_view},
                                        {plane_seg, ray_seg}, seg);
  seg.smoothed_error = seg.reproj_error;
  return seg;
}

double reprojection_error(const std::vector<CameraView>& views,
                          const std::vector<Segment2D>& observed,
                          const Segment3D& seg) {
  if (views.size() != observed.size())
    throw std::invalid_argument("reprojection: " + std::to_string(views.size()) +
                                " views but " + std::to_string(observed.size()) +
                                " observations");
  double sum = 0.0;
  int used = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const CameraView& view = views[i];
    if (!(view.depth(seg.a) > 0.0) || !(view.depth(seg.b) > 0.0)) continue;
    const double da = line_distance(observed[i], view.project(seg.a));
    const double db = line_distance(observed[i], view.project(seg.b));
    sum += 0.5 * (da + db);
    ++used;
  }
  if (used == 0)
    throw std::runtime_error(
        "reprojection: reconstruction is behind every camera");
  return sum / used;
}

ConnectivityGraph build_connectivity_graph(const std::vector<Segment3D>& segments,
                                           double radius) {
  const std::size_t n = segments.size();
  ConnectivityGraph g;
  g.neighbors.resize(n);
  g.smoothed_errors.resize(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double gap = std::min(
          std::min((segments[i].a - segments[j].a).norm(),
                   (segments[i].a - segments[j].b).norm()),
          std::min((segments[i].b - segments[j].a).norm(),
                   (segments[i].b - segments[j].b).norm()));
      if (gap < radius) {
        g.neighbors[i].push_back(static_cast<int>(j));
        g.neighbors[j].push_back(static_cast<int>(i));
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    double sum = segments[i].reproj_error;
    for (int j : g.neighbors[i])
      sum += segments[static_cast<std::size_t>(j)].reproj_error;
    g.smoothed_errors[i] = sum / static_cast<double>(1 + g.neighbors[i].size());
  }
  return g;
}

TriangulationResult triangulate_views(const std::vector<CameraView>& views,
                                      const TriangulateOptions& opts) {
  if (views.size() < 2)
    throw std::invalid_argument("triangulate: need at least two views, got " +
                                std::to_string(views.size()));
  for (const CameraView& v : views) v.validate();
  if (opts.plane_view >= static_cast<int>(views.size()))
    throw std::invalid_argument("triangulate: plane view " +
                                std::to_string(opts.plane_view) +
                                " out of range");

  std::size_t max_segments = 0;
  for (const CameraView& v : views)
    max_segments = std::max(max_segments, v.segments.size());

  TriangulationResult result;
  for (std::size_t k = 0; k < max_segments; ++k) {
    std::vector<std::size_t> present;
    for (std::size_t i = 0; i < views.size(); ++i)
      if (k < views[i].segments.size()) present.push_back(i);
    if (present.size() < 2) {
      ++result.rejected;
      result.rejection_reasons.push_back(
          "segment " + std::to_string(k) + ": visible in fewer than two views");
      continue;
    }

    const auto length_of = [&](std::size_t i) {
      return views[i].segments[k].length();
    };
    std::size_t plane_idx;
    if (opts.plane_view >= 0) {
      plane_idx = static_cast<std::size_t>(opts.plane_view);
      if (k >= views[plane_idx].segments.size()) {
        ++result.rejected;
        result.rejection_reasons.push_back(
            "segment " + std::to_string(k) + ": absent from the plane view");
        continue;
      }
    } else {
      plane_idx = *std::max_element(present.begin(), present.end(),
                                    [&](std::size_t a, std::size_t b) {
                                      return length_of(a) < length_of(b);
                                    });
    }
    std::size_t ray_idx = present[0] == plane_idx ? present[1] : present[0];
    for (std::size_t i : present)
      if (i != plane_idx && length_of(i) > length_of(ray_idx)) ray_idx = i;

    try {
      Segment3D seg =
          triangulate_segment(views[plane_idx], views[plane_idx].segments[k],
                              views[ray_idx], views[ray_idx].segments[k]);
      std::vector<CameraView> used;
      std::vector<Segment2D> obs;
      for (std::size_t i : present) {
        used.push_back(views[i]);
        obs.push_back(views[i].segments[k]);
      }
      seg.reproj_error = reprojection_error(used, obs, seg);
      seg.smoothed_error = seg.reproj_error;
      seg.pair_index = static_cast<int>(k);
      result.segments.push_back(std::move(seg));
    } catch (const std::runtime_error& e) {
      ++result.rejected;
      result.rejection_reasons.push_back("segment " + std::to_string(k) + ": " +
                                         e.what());
    }
  }

  double radius = opts.connect_radius;
  if (!(radius > 0.0)) {
    std::vector<double> lengths;
    for (const Segment3D& s : result.segments) lengths.push_back(s.length());
    radius = 2.0 * median(std::move(lengths));
  }
  result.graph = build_connectivity_graph(result.segments, radius);
  for (std::size_t i = 0; i < result.segments.size(); ++i)
    result.segments[i].smoothed_error = result.graph.smoothed_errors[i];
  return result;
}

std::vector<std::pair<int, int>> angular_overlap_match(const CameraView& a,
                                                       const CameraView& b) {
  const auto angle = [](const Segment2D& s) {
    const Eigen::Vector2d d = s.b - s.a;
    return std::atan2(d.y(), d.x());
  };
  // Direction distance modulo pi: segments have no orientation.
  const auto angdist = [](double x, double y) {
    double d = std::abs(x - y);
    while (d >= M_PI) d -= M_PI;
    return std::min(d, M_PI - d);
  };
  struct Cand {
    double cost;
    int i, j;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < a.segments.size(); ++i)
    for (std::size_t j = 0; j < b.segments.size(); ++j)
      cands.push_back({angdist(angle(a.segments[i]), angle(b.segments[j])),
                       static_cast<int>(i), static_cast<int>(j)});
  std::sort(cands.begin(), cands.end(),
            [](const Cand& x, const Cand& y) { return x.cost < y.cost; });
  std::vector<bool> used_a(a.segments.size(), false), used_b(b.segments.size(), false);
  std::vector<std::pair<int, int>> matches;
  constexpr double kMaxAngle = 15.0 * M_PI / 180.0;
  for (const Cand& c : cands) {
    if (c.cost > kMaxAngle) break;
    if (used_a[static_cast<std::size_t>(c.i)] || used_b[static_cast<std::size_t>(c.j)])
      continue;
    used_a[static_cast<std::size_t>(c.i)] = true;
    used_b[static_cast<std::size_t>(c.j)] = true;
    matches.emplace_back(c.i, c.j);
  }
  return matches;
}

std::vector<Segment2D> mask_to_segments(const std::vector<std::int32_t>& labels,
                                        int h, int w, std::int32_t cls,
                                        int min_pixels) {
  if (labels.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
    throw std::invalid_argument("mask_to_segments: " +
                                std::to_string(labels.size()) + " labels for " +
                                std::to_string(h) + "x" + std::to_string(w) +
                                " grid");
  std::vector<bool> seen(labels.size(), false);
  std::vector<Segment2D> segments;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (seen[start] || labels[start] != cls) continue;
    std::vector<Eigen::Vector2d> pts;
    std::queue<std::size_t> frontier;
    frontier.push(start);
    seen[start] = true;
    while (!frontier.empty()) {
      const std::size_t p = frontier.front();
      frontier.pop();
      const int y = static_cast<int>(p) / w, x = static_cast<int>(p) % w;
      pts.emplace_back(static_cast<double>(x), static_cast<double>(y));
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
        const std::size_t q = static_cast<std::size_t>(ny[k] * w + nx[k]);
        if (!seen[q] && labels[q] == cls) {
          seen[q] = true;
          frontier.push(q);
        }
      }
    }
    if (static_cast<int>(pts.size()) < min_pixels) continue;

    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& p : pts) mean += p;
    mean /= static_cast<double>(pts.size());
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (const auto& p : pts) {
      const Eigen::Vector2d d = p - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(cov);
    const Eigen::Vector2d axis = eig.eigenvectors().col(1);  // largest eigenvalue
    double smin = 0.0, smax = 0.0;
    for (const auto& p : pts) {
      const double s = axis.dot(p - mean);
      smin = std::min(smin, s);
      smax = std::max(smax, s);
    }
    Segment2D seg;
    seg.a = mean + smin * axis;
    seg.b = mean + smax * axis;
    segments.push_back(seg);
  }
  return segments;
}

namespace {

using nlohmann::json;

CameraView view_from_json(const json& j) {
  CameraView v;
  v.fx = j.at("fx").get<double>();
  v.fy = j.at("fy").get<double>();
  v.cx = j.at("cx").get<double>();
  v.cy = j.at("cy").get<double>();
  const auto rot = j.at("rotation");
  if (!rot.is_array() || rot.size() != 9)
    throw std::runtime_error("rotation must have 9 row-major entries");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      v.rotation(r, c) = rot[static_cast<std::size_t>(3 * r + c)].get<double>();
  const auto tr = j.at("translation");
  if (!tr.is_array() || tr.size() != 3)
    throw std::runtime_error("translation must have 3 entries");
  for (int r = 0; r < 3; ++r) v.translation(r) = tr[static_cast<std::size_t>(r)].get<double>();
  for (const auto& s : j.value("segments", json::array())) {
    if (!s.is_array() || s.size() != 4)
      throw std::runtime_error("each segment needs [x1,y1,x2,y2]");
    Segment2D seg;
    seg.a = {s[0].get<double>(), s[1].get<double>()};
    seg.b = {s[2].get<double>(), s[3].get<double>()};
    v.segments.push_back(seg);
  }
  return v;
}

}  // namespace

std::vector<CameraView> load_views_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("views " + path + ": cannot open");
  try {
    const json doc = json::parse(is);
    const json& arr = doc.is_object() ? doc.at("views") : doc;
    if (!arr.is_array()) throw std::runtime_error("expected an array of views");
    std::vector<CameraView> views;
    for (const auto& j : arr) {
      CameraView v = view_from_json(j);
      v.validate();
      views.push_back(std::move(v));
    }
    return views;
  } catch (const json::exception& e) {
    throw std::runtime_error("views " + path + ": " + e.what());
  }
}

void save_views_json(const std::string& path, const std::vector<CameraView>& views) {
  json arr = json::array();
  for (const CameraView& v : views) {
    json j;
    j["fx"] = v.fx;
    j["fy"] = v.fy;
    j["cx"] = v.cx;
    j["cy"] = v.cy;
    json rot = json::array();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot.push_back(v.rotation(r, c));
    j["rotation"] = std::move(rot);
    j["translation"] = {v.translation(0), v.translation(1), v.translation(2)};
    json segs = json::array();
    for (const Segment2D& s : v.segments)
      segs.push_back({s.a.x(), s.a.y(), s.b.x(), s.b.y()});
    j["segments"] = std::move(segs);
    arr.push_back(std::move(j));
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("views " + path + ": cannot open for writing");
  os << json{{"views", std::move(arr)}}.dump(2) << '\n';
  if (!os) throw std::runtime_error("views " + path + ": write failed");
}

void write_segments_ply(const std::string& path, const TriangulationResult& result) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("ply " + path + ": cannot open for writing");
  const std::size_t n = result.segments.size();
  os << "ply\nformat ascii 1.0\n";
  os << "element vertex " << 2 * n << '\n';
  os << "property double x\nproperty double y\nproperty double z\n";
  os << "property double error\n";
  os << "element edge " << n << '\n';
  os << "property int vertex1\nproperty int vertex2\n";
  os << "end_header\n";
  os.precision(17);
  for (const Segment3D& s : result.segments) {
    os << s.a.x() << ' ' << s.a.y() << ' ' << s.a.z() << ' ' << s.smoothed_error
       << '\n';
    os << s.b.x() << ' ' << s.b.y() << ' ' << s.b.z() << ' ' << s.smoothed_error
       << '\n';
  }
  for (std::size_t i = 0; i < n; ++i) os << 2 * i << ' ' << 2 * i + 1 << '\n';
  if (!os) throw std::runtime_error("ply " + path + ": write failed");
}

void write_summary_json(const std::string& path, const TriangulationResult& result) {
  std::vector<double> errors, smoothed;
  for (const Segment3D& s : result.segments) {
    errors.push_back(s.reproj_error);
    smoothed.push_back(s.smoothed_error);
  }
  const auto stats = [](const std::vector<double>& v) {
    json j;
    j["count"] = v.size();
    if (!v.empty()) {
      j["mean"] = std::accumulate(v.begin(), v.end(), 0.0) /
                  static_cast<double>(v.size());
      j["median"] = median(v);
      j["max"] = *std::max_element(v.begin(), v.end());
    }
    return j;
  };
  json j;
  j["segments"] = result.segments.size();
  j["rejected"] = result.rejected;
  j["rejection_reasons"] = result.rejection_reasons;
  j["reprojection_error"] = stats(errors);
  j["smoothed_error"] = stats(smoothed);
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("summary " + path + ": cannot open for writing");
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("summary " + path + ": write failed");
}

}  // namespace caveseg
