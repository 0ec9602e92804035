#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>

#include "tsflow/flow.hpp"
#include "tsflow/grid.hpp"
#include "tsflow/parallel.hpp"

namespace tsflow {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    return {x / n, y / n, z / n};
  }
};

struct Medium {
  double eta = 1.0;
};

// World frame: the chamber axis is the vertical line x = y = 0; the camera
// sits on the +x optical axis; z is up. Image coordinates map to world as
// +column -> +y, +row -> -z.
struct Tube {
  double inner_radius = 0;  // mm
  double outer_radius = 0;
  Medium medium;
};

struct ChamberModel {
  Tube inner;
  Tube outer;
  Medium interior;   // everything inside the tubes that is not tube material
  Medium exterior;   // outside the outer tube
  double specimen_radius = 35.0;  // mm

  void validate() const {
    bool ordered = specimen_radius > 0 && specimen_radius < inner.inner_radius &&
                   inner.inner_radius < inner.outer_radius &&
                   inner.outer_radius < outer.inner_radius &&
                   outer.inner_radius < outer.outer_radius;
    if (!ordered) throw std::invalid_argument("ChamberModel: radii must be strictly nested");
    for (double e : {inner.medium.eta, outer.medium.eta, interior.eta, exterior.eta})
      if (!(e > 0) || !std::isfinite(e))
        throw std::invalid_argument("ChamberModel: refractive indices must be positive");
  }
};

// Pinhole on the optical axis at x = distance_mm looking toward the chamber.
struct CameraModel {
  double distance_mm = 500.0;
  double focal_px = 6643.0;      // (distance - specimen radius) / pitch for the nominal setup
  double principal_y = 0.0;      // px
  double principal_z = 0.0;
  double pitch_mm_per_px = 0.07; // nominal pitch on the specimen surface

  static CameraModel from_pitch(double distance_mm, double pitch_mm_per_px,
                                double specimen_radius, double principal_y, double principal_z) {
    CameraModel c;
    c.distance_mm = distance_mm;
    c.pitch_mm_per_px = pitch_mm_per_px;
    c.focal_px = (distance_mm - specimen_radius) / pitch_mm_per_px;
    c.principal_y = principal_y;
    c.principal_z = principal_z;
    return c;
  }

  void validate(const ChamberModel& chamber) const {
    if (!(distance_mm > chamber.outer.outer_radius))
      throw std::invalid_argument("CameraModel: pinhole must lie outside the outer cylinder");
    if (!(focal_px > 0) || !(pitch_mm_per_px > 0))
      throw std::invalid_argument("CameraModel: focal length and pitch must be positive");
  }

  Vec3 pinhole() const { return {distance_mm, 0.0, 0.0}; }
  Vec3 pixel_direction(double y_px, double z_px) const {
    return Vec3{-focal_px, y_px - principal_y, -(z_px - principal_z)}.normalized();
  }
};

// Vector Snell refraction. n must be unit and is re-oriented toward the
// incident side if needed; equal indices pass the ray through untouched.
// An empty result signals total internal reflection.
inline std::optional<Vec3> refract(const Vec3& i, const Vec3& n_in, double eta1, double eta2) {
  if (std::fabs(i.norm() - 1.0) > 1e-12 || std::fabs(n_in.norm() - 1.0) > 1e-12)
    throw std::invalid_argument("refract: direction and normal must be unit vectors");
  if (eta1 == eta2) return i;
  Vec3 n = n_in;
  double cos_i = -i.dot(n);
  if (cos_i < 0) {
    n = -n;
    cos_i = -cos_i;
  }
  double r = eta1 / eta2;
  double sin2_t = r * r * (1.0 - cos_i * cos_i);
  double radicand = 1.0 - sin2_t;
  if (radicand < 0.0) return std::nullopt;  // total internal reflection
  Vec3 t = i * r + n * (r * cos_i - std::sqrt(radicand));
  return t.normalized();
}

struct CylinderHit {
  Vec3 point;
  Vec3 normal;  // outward radial
  double t = 0;
};

// Nearest forward intersection with the infinite vertical cylinder of the
// given radius about the chamber axis.
inline std::optional<CylinderHit> intersect_cylinder(const Vec3& origin, const Vec3& dir,
                                                     double radius) {
  double a = dir.x * dir.x + dir.y * dir.y;
  double b = 2.0 * (origin.x * dir.x + origin.y * dir.y);
  double c = origin.x * origin.x + origin.y * origin.y - radius * radius;
  constexpr double t_min = 1e-9;
  if (a < 1e-300) return std::nullopt;  // ray parallel to the axis
  double disc = b * b - 4 * a * c;
  if (disc < 0) return std::nullopt;
  double sq = std::sqrt(disc);
  double t0 = (-b - sq) / (2 * a);
  double t1 = (-b + sq) / (2 * a);
  double t = t0 > t_min ? t0 : (t1 > t_min ? t1 : -1.0);
  if (t < 0) return std::nullopt;
  CylinderHit hit;
  hit.t = t;
  hit.point = origin + dir * t;
  hit.normal = Vec3{hit.point.x, hit.point.y, 0.0} * (1.0 / radius);
  return hit;
}

// Surface coordinates on the specimen cylinder: circumferential arc
// s = R * theta (theta = 0 on the camera-facing meridian, positive toward
// +y) and height h (world z).
struct SurfacePoint {
  double s = 0;
  double h = 0;
};

namespace detail {

struct Interface {
  double radius;
  double eta_from;
  double eta_to;
};

inline std::optional<SurfacePoint> trace_ray(Vec3 o, Vec3 d, const ChamberModel& chamber,
                                             bool refracted) {
  if (refracted) {
    const Interface interfaces[4] = {
        {chamber.outer.outer_radius, chamber.exterior.eta, chamber.outer.medium.eta},
        {chamber.outer.inner_radius, chamber.outer.medium.eta, chamber.interior.eta},
        {chamber.inner.outer_radius, chamber.interior.eta, chamber.inner.medium.eta},
        {chamber.inner.inner_radius, chamber.inner.medium.eta, chamber.interior.eta},
    };
    for (const Interface& f : interfaces) {
      if (f.eta_from == f.eta_to) continue;  // no optical event; keeps equal-index tracing exact
      auto hit = intersect_cylinder(o, d, f.radius);
      if (!hit) return std::nullopt;
      auto t = refract(d, hit->normal, f.eta_from, f.eta_to);
      if (!t) return std::nullopt;
      o = hit->point;
      d = *t;
    }
  }
  auto hit = intersect_cylinder(o, d, chamber.specimen_radius);
  if (!hit) return std::nullopt;
  SurfacePoint sp;
  sp.s = chamber.specimen_radius * std::atan2(hit->point.y, hit->point.x);
  sp.h = hit->point.z;
  return sp;
}

}  // namespace detail

// Refracted pixel-to-surface mapping: camera ray bent at the four cylinder
// interfaces, then intersected with the specimen surface.
inline std::optional<SurfacePoint> trace_pixel(const CameraModel& cam, const ChamberModel& chamber,
                                               double y_px, double z_px) {
  return detail::trace_ray(cam.pinhole(), cam.pixel_direction(y_px, z_px), chamber, true);
}

// Straight-line projection onto the specimen cylinder (refraction ignored).
inline std::optional<SurfacePoint> straight_project(const CameraModel& cam,
                                                    const ChamberModel& chamber, double y_px,
                                                    double z_px) {
  return detail::trace_ray(cam.pinhole(), cam.pixel_direction(y_px, z_px), chamber, false);
}

// Per-pixel metric corrections on the specimen surface:
//   dy = s_refracted - s_straight,  dz = h_refracted - h_straight  [mm].
// NaN where either ray misses the specimen.
struct CorrectionMaps {
  Grid<double> dy, dz;
};

inline CorrectionMaps build_correction_maps(const CameraModel& cam, const ChamberModel& chamber,
                                            int width, int height, double origin_y = 0.0,
                                            double origin_z = 0.0) {
  chamber.validate();
  cam.validate(chamber);
  CorrectionMaps maps{Grid<double>(width, height), Grid<double>(width, height)};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  parallel_for(0, height, [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < width; ++y) {
        auto refr = trace_pixel(cam, chamber, origin_y + y, origin_z + z);
        auto straight = straight_project(cam, chamber, origin_y + y, origin_z + z);
        if (refr && straight) {
          maps.dy.at(y, z) = refr->s - straight->s;
          maps.dz.at(y, z) = refr->h - straight->h;
        } else {
          maps.dy.at(y, z) = nan;
          maps.dz.at(y, z) = nan;
        }
      }
  });
  return maps;
}

// Metric surface displacements from a pixel flow via the local Jacobian of
// the pixel->surface mapping (central differences, half-pixel step).
struct SurfaceDisplacement {
  Grid<double> ds;  // circumferential, mm
  Grid<double> dh;  // vertical, mm
};

inline SurfaceDisplacement apply_correction(const FlowField& flow, const CorrectionMaps& maps,
                                            const CameraModel& cam, const ChamberModel& chamber,
                                            double origin_y = 0.0, double origin_z = 0.0) {
  if (flow.width() != maps.dy.width() || flow.height() != maps.dy.height())
    throw std::invalid_argument("apply_correction: dimension mismatch");
  SurfaceDisplacement out{Grid<double>(flow.width(), flow.height()),
                          Grid<double>(flow.width(), flow.height())};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double step = 0.5;
  parallel_for(0, flow.height(), [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < flow.width(); ++y) {
        double u = flow.u.at(y, z), v = flow.v.at(y, z);
        double gy = origin_y + y, gz = origin_z + z;
        if (!flow.valid.at(y, z) || !std::isfinite(u) || !std::isfinite(v) ||
            !std::isfinite(maps.dy.at(y, z))) {
          out.ds.at(y, z) = nan;
          out.dh.at(y, z) = nan;
          continue;
        }
        auto yp = trace_pixel(cam, chamber, gy + step, gz);
        auto ym = trace_pixel(cam, chamber, gy - step, gz);
        auto zp = trace_pixel(cam, chamber, gy, gz + step);
        auto zm = trace_pixel(cam, chamber, gy, gz - step);
        if (!yp || !ym || !zp || !zm) {
          out.ds.at(y, z) = nan;
          out.dh.at(y, z) = nan;
          continue;
        }
        double ds_dy = (yp->s - ym->s) / (2 * step), ds_dz = (zp->s - zm->s) / (2 * step);
        double dh_dy = (yp->h - ym->h) / (2 * step), dh_dz = (zp->h - zm->h) / (2 * step);
        out.ds.at(y, z) = ds_dy * u + ds_dz * v;
        out.dh.at(y, z) = dh_dy * u + dh_dz * v;
      }
  });
  return out;
}

}  // namespace tsflow
