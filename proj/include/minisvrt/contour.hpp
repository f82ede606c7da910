#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "minisvrt/errors.hpp"
#include "minisvrt/rng.hpp"

namespace minisvrt {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }

struct Box {
  double min_x = 0.0;
  double min_y = 0.0;
  double max_x = 0.0;
  double max_y = 0.0;

  double width() const { return max_x - min_x; }
  double height() const { return max_y - min_y; }
};

// Closed, non-self-intersecting polyline in the normalized shape frame:
// vertex centroid at the origin, maximum vertex radius 1. The closing edge
// from back() to front() is implied.
struct Contour {
  std::vector<Point2> vertices;
  std::uint64_t source_seed = 0;
};

// How a shape is placed into an image. Applied as mirror (if set), then
// rotation, then scale, then translation.
struct Pose {
  double tx = 0.0;
  double ty = 0.0;
  double rotation = 0.0;              // radians, [0, 2pi)
  double scale = 1.0;                 // > 0
  std::optional<double> mirror_axis;  // axis through the centroid, [0, pi)
};

// Transform family under which two shapes count as "the same".
enum class TransformClass {
  kTranslation,        // translation only
  kTranslationMirror,  // translation, optionally composed with a mirror
  kSimilarity,         // translation + rotation + scale
};

struct GenParams {
  int min_control_points = 6;
  int max_control_points = 14;
  double min_radius = 0.3;
  double max_radius = 1.0;
  int smoothing_subdivisions = 6;  // curve points per control segment
  int max_rejections = 64;
};

// ---------------------------------------------------------------------------
// Polyline measurements
// ---------------------------------------------------------------------------

inline Point2 centroid(std::span<const Point2> pts) {
  if (pts.empty()) throw ArgumentError("centroid: empty polyline");
  double sx = 0.0, sy = 0.0;
  for (const auto& p : pts) {
    sx += p.x;
    sy += p.y;
  }
  double n = static_cast<double>(pts.size());
  return {sx / n, sy / n};
}

inline double max_radius(std::span<const Point2> pts, Point2 center = {}) {
  double best = 0.0;
  for (const auto& p : pts) best = std::max(best, std::hypot(p.x - center.x, p.y - center.y));
  return best;
}

inline double rms_radius(std::span<const Point2> pts, Point2 center = {}) {
  if (pts.empty()) throw ArgumentError("rms_radius: empty polyline");
  double acc = 0.0;
  for (const auto& p : pts) {
    double dx = p.x - center.x, dy = p.y - center.y;
    acc += dx * dx + dy * dy;
  }
  return std::sqrt(acc / static_cast<double>(pts.size()));
}

inline Box bbox(std::span<const Point2> pts) {
  if (pts.empty()) throw ArgumentError("bbox: empty polyline");
  Box b{pts[0].x, pts[0].y, pts[0].x, pts[0].y};
  for (const auto& p : pts) {
    b.min_x = std::min(b.min_x, p.x);
    b.min_y = std::min(b.min_y, p.y);
    b.max_x = std::max(b.max_x, p.x);
    b.max_y = std::max(b.max_y, p.y);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Segment intersection / self-intersection
// ---------------------------------------------------------------------------

namespace geo {

inline double cross(Point2 o, Point2 a, Point2 b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline bool on_segment(Point2 a, Point2 b, Point2 p) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) &&
         std::min(a.y, b.y) <= p.y && p.y <= std::max(a.y, b.y);
}

// Closed-condition intersection: touching endpoints and collinear overlap
// count as intersecting.
inline bool segments_intersect(Point2 p1, Point2 p2, Point2 q1, Point2 q2) {
  double d1 = cross(q1, q2, p1);
  double d2 = cross(q1, q2, p2);
  double d3 = cross(p1, p2, q1);
  double d4 = cross(p1, p2, q2);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) &&
      ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)))
    return true;
  if (d1 == 0 && on_segment(q1, q2, p1)) return true;
  if (d2 == 0 && on_segment(q1, q2, p2)) return true;
  if (d3 == 0 && on_segment(p1, p2, q1)) return true;
  if (d4 == 0 && on_segment(p1, p2, q2)) return true;
  return false;
}

inline double point_segment_dist2(Point2 p, Point2 a, Point2 b) {
  double vx = b.x - a.x, vy = b.y - a.y;
  double wx = p.x - a.x, wy = p.y - a.y;
  double vv = vx * vx + vy * vy;
  double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double dx = wx - t * vx, dy = wy - t * vy;
  return dx * dx + dy * dy;
}

}  // namespace geo

// True iff any two non-adjacent edges of the closed polyline intersect.
inline bool self_intersects(std::span<const Point2> pts) {
  std::size_t n = pts.size();
  if (n < 3) throw ArgumentError("self_intersects: need at least 3 vertices");
  for (std::size_t i = 0; i < n; ++i) {
    Point2 a1 = pts[i], a2 = pts[(i + 1) % n];
    for (std::size_t j = i + 2; j < n; ++j) {
      if (i == 0 && j == n - 1) continue;  // closing edge is adjacent to edge 0
      Point2 b1 = pts[j], b2 = pts[(j + 1) % n];
      if (geo::segments_intersect(a1, a2, b1, b2)) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

inline Point2 reflect_about_axis(Point2 p, double axis_angle) {
  double c = std::cos(2.0 * axis_angle), s = std::sin(2.0 * axis_angle);
  return {c * p.x + s * p.y, s * p.x - c * p.y};
}

inline std::vector<Point2> apply_pose(std::span<const Point2> pts, const Pose& pose) {
  if (!(pose.scale > 0.0)) throw ArgumentError("apply_pose: scale must be positive");
  double cr = std::cos(pose.rotation), sr = std::sin(pose.rotation);
  std::vector<Point2> out;
  out.reserve(pts.size());
  for (Point2 p : pts) {
    if (pose.mirror_axis) p = reflect_about_axis(p, *pose.mirror_axis);
    Point2 r{cr * p.x - sr * p.y, sr * p.x + cr * p.y};
    out.push_back({pose.scale * r.x + pose.tx, pose.scale * r.y + pose.ty});
  }
  return out;
}

inline std::vector<Point2> apply_pose(const Contour& c, const Pose& pose) {
  return apply_pose(std::span<const Point2>(c.vertices), pose);
}

// Reflection of the contour about an axis through the origin. Vertex order
// keeps its indexing, so the traversal orientation flips.
inline Contour mirror(const Contour& c, double axis_angle) {
  Contour out;
  out.source_seed = c.source_seed;
  out.vertices.reserve(c.vertices.size());
  for (Point2 p : c.vertices) out.vertices.push_back(reflect_about_axis(p, axis_angle));
  return out;
}

// ---------------------------------------------------------------------------
// Congruence oracle
// ---------------------------------------------------------------------------

namespace detail {

// Precomputed closed-polyline segments for repeated point-to-curve queries.
class SegmentSet {
 public:
  explicit SegmentSet(std::span<const Point2> pts) {
    std::size_t n = pts.size();
    sx_.reserve(n);
    sy_.reserve(n);
    dx_.reserve(n);
    dy_.reserve(n);
    inv_len2_.reserve(n);
    for (std::size_t j = 0; j < n; ++j) {
      Point2 a = pts[j], b = pts[(j + 1) % n];
      double dx = b.x - a.x, dy = b.y - a.y;
      double len2 = dx * dx + dy * dy;
      sx_.push_back(a.x);
      sy_.push_back(a.y);
      dx_.push_back(dx);
      dy_.push_back(dy);
      inv_len2_.push_back(len2 > 0.0 ? 1.0 / len2 : 0.0);
    }
  }

  double dist2(double px, double py) const {
    double best = std::numeric_limits<double>::infinity();
    std::size_t n = sx_.size();
    for (std::size_t j = 0; j < n; ++j) {
      double wx = px - sx_[j], wy = py - sy_[j];
      double t = (wx * dx_[j] + wy * dy_[j]) * inv_len2_[j];
      t = std::clamp(t, 0.0, 1.0);
      double ex = wx - t * dx_[j], ey = wy - t * dy_[j];
      best = std::min(best, ex * ex + ey * ey);
    }
    return best;
  }

  // Mean distance from points (rotated by the given angle) to this curve.
  // Returns +inf early once the running sum can no longer beat abort_mean.
  double mean_dist_rotated(std::span<const Point2> pts, double angle,
                           double abort_mean = std::numeric_limits<double>::infinity()) const {
    double c = std::cos(angle), s = std::sin(angle);
    double n = static_cast<double>(pts.size());
    double abort_sum = abort_mean * n;
    double acc = 0.0;
    for (const auto& p : pts) {
      double px = c * p.x - s * p.y;
      double py = s * p.x + c * p.y;
      acc += std::sqrt(dist2(px, py));
      if (acc >= abort_sum) return std::numeric_limits<double>::infinity();
    }
    return acc / n;
  }

 private:
  std::vector<double> sx_, sy_, dx_, dy_, inv_len2_;
};

// Mean distance from each point of a to the closed polyline b.
inline double mean_dist_to_polyline(std::span<const Point2> a, std::span<const Point2> b) {
  return SegmentSet(b).mean_dist_rotated(a, 0.0);
}

// Minimum of the mean distance over rotations of a. Two grid passes narrow
// the basin (pruning angles that cannot beat the running best mid-sum),
// then a short exact ternary search polishes the angle. Grid pruning is
// sound because an eval whose true mean is below the running best never
// trips the abort, so it always completes and improves the best.
inline double min_over_rotation(std::span<const Point2> a, const SegmentSet& b) {
  constexpr int kCoarseSteps = 256;
  constexpr int kFineSteps = 17;
  constexpr int kRefineIters = 20;
  double best_d = std::numeric_limits<double>::infinity();
  double best_angle = 0.0;
  for (int k = 0; k < kCoarseSteps; ++k) {
    double angle = kTwoPi * k / kCoarseSteps;
    double d = b.mean_dist_rotated(a, angle, best_d);
    if (d < best_d) {
      best_d = d;
      best_angle = angle;
    }
  }
  const double coarse_step = kTwoPi / kCoarseSteps;
  double fine_lo = best_angle - coarse_step;
  const double fine_step = 2.0 * coarse_step / (kFineSteps - 1);
  double fine_best = best_angle;
  for (int k = 0; k < kFineSteps; ++k) {
    double angle = fine_lo + fine_step * k;
    double d = b.mean_dist_rotated(a, angle, best_d);
    if (d < best_d) {
      best_d = d;
      fine_best = angle;
    }
  }
  double lo = fine_best - fine_step;
  double hi = fine_best + fine_step;
  for (int it = 0; it < kRefineIters; ++it) {
    double m1 = lo + (hi - lo) / 3.0;
    double m2 = hi - (hi - lo) / 3.0;
    double d1 = b.mean_dist_rotated(a, m1);
    double d2 = b.mean_dist_rotated(a, m2);
    best_d = std::min({best_d, d1, d2});
    if (d1 < d2)
      hi = m2;
    else
      lo = m1;
  }
  return best_d;
}

inline std::vector<Point2> centered(std::span<const Point2> pts) {
  Point2 c = centroid(pts);
  std::vector<Point2> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(p - c);
  return out;
}

}  // namespace detail

// Minimal mean point-to-curve distance of a onto b over the transform class.
// Zero means congruent under the class. Translation is removed by centroid
// alignment; similarity additionally matches RMS radii and scans rotations;
// the mirror class tries both chiralities, with the mirrored branch free to
// rotate (a mirror about an arbitrary axis is a fixed mirror plus rotation).
inline double congruence_residual(std::span<const Point2> a, std::span<const Point2> b,
                                  TransformClass cls) {
  if (a.size() < 3 || b.size() < 3)
    throw ArgumentError("congruence_residual: polylines need at least 3 vertices");
  std::vector<Point2> ca = detail::centered(a);
  std::vector<Point2> cb = detail::centered(b);
  switch (cls) {
    case TransformClass::kTranslation:
      return detail::mean_dist_to_polyline(ca, cb);
    case TransformClass::kTranslationMirror: {
      double plain = detail::mean_dist_to_polyline(ca, cb);
      for (auto& p : ca) p.y = -p.y;
      return std::min(plain, detail::min_over_rotation(ca, detail::SegmentSet(cb)));
    }
    case TransformClass::kSimilarity: {
      double ra = rms_radius(ca);
      double rb = rms_radius(cb);
      if (ra <= 0.0 || rb <= 0.0)
        throw ArgumentError("congruence_residual: degenerate polyline");
      double s = rb / ra;
      for (auto& p : ca) p = s * p;
      return detail::min_over_rotation(ca, detail::SegmentSet(cb));
    }
  }
  throw ArgumentError("congruence_residual: unknown transform class");
}

// ---------------------------------------------------------------------------
// Random contour synthesis
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Point2> catmull_rom_closed(const std::vector<Point2>& ctrl, int subdivisions) {
  std::size_t k = ctrl.size();
  std::vector<Point2> out;
  out.reserve(k * static_cast<std::size_t>(subdivisions));
  for (std::size_t i = 0; i < k; ++i) {
    Point2 p0 = ctrl[(i + k - 1) % k];
    Point2 p1 = ctrl[i];
    Point2 p2 = ctrl[(i + 1) % k];
    Point2 p3 = ctrl[(i + 2) % k];
    for (int j = 0; j < subdivisions; ++j) {
      double t = static_cast<double>(j) / subdivisions;
      double t2 = t * t, t3 = t2 * t;
      double w0 = -0.5 * t3 + t2 - 0.5 * t;
      double w1 = 1.5 * t3 - 2.5 * t2 + 1.0;
      double w2 = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
      double w3 = 0.5 * t3 - 0.5 * t2;
      out.push_back({w0 * p0.x + w1 * p1.x + w2 * p2.x + w3 * p3.x,
                     w0 * p0.y + w1 * p1.y + w2 * p2.y + w3 * p3.y});
    }
  }
  return out;
}

}  // namespace detail

inline bool gen_params_valid(const GenParams& p) {
  return p.min_control_points >= 4 && p.min_control_points <= p.max_control_points &&
         p.min_radius > 0.0 && p.min_radius <= p.max_radius && p.smoothing_subdivisions >= 4 &&
         p.max_rejections >= 0;
}

// Draws a random irregular blob: polar control points interpolated by a
// closed Catmull-Rom spline, rejection-sampled until non-self-intersecting,
// then normalized to centroid 0 / max radius 1. Pure function of
// (seed, params).
inline Contour sample_contour(std::uint64_t seed, const GenParams& params = {}) {
  if (!gen_params_valid(params)) throw ArgumentError("sample_contour: invalid GenParams");
  Rng rng(seed);
  for (int attempt = 0; attempt <= params.max_rejections; ++attempt) {
    int k = static_cast<int>(rng.uniform_int(params.min_control_points, params.max_control_points));
    std::vector<double> angles(static_cast<std::size_t>(k));
    for (auto& a : angles) a = rng.uniform(0.0, kTwoPi);
    std::sort(angles.begin(), angles.end());
    std::vector<Point2> ctrl;
    ctrl.reserve(angles.size());
    for (double a : angles) {
      double r = rng.uniform(params.min_radius, params.max_radius);
      ctrl.push_back({r * std::cos(a), r * std::sin(a)});
    }
    std::vector<Point2> verts = detail::catmull_rom_closed(ctrl, params.smoothing_subdivisions);
    if (self_intersects(verts)) continue;
    Point2 c = centroid(verts);
    for (auto& v : verts) v = v - c;
    double r = max_radius(verts);
    if (r <= 0.0) continue;
    for (auto& v : verts) v = (1.0 / r) * v;
    Contour out;
    out.vertices = std::move(verts);
    out.source_seed = seed;
    return out;
  }
  throw GenerationError("sample_contour: rejection budget exhausted for seed " +
                        std::to_string(seed));
}

}  // namespace minisvrt
