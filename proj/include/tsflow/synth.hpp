#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>

#include "tsflow/flow.hpp"
#include "tsflow/grid.hpp"
#include "tsflow/image.hpp"
#include "tsflow/optics.hpp"
#include "tsflow/tsmech.hpp"

namespace tsflow {

// Seeded speckle texture: anti-aliased dark dots over a light background,
// band-limited by a small Gaussian blur so interpolation error stays below
// measurement tolerances.
struct SpeckleSpec {
  int width = 512;
  int height = 512;
  std::uint64_t seed = 1;
  double dot_density = 0.02;   // dots per px^2
  double dot_radius_min = 1.0; // px
  double dot_radius_max = 2.5;
  double background = 0.85;
  double foreground = 0.15;
  double blur_sigma = 0.7;
  double noise_sigma = 0.0;    // additive Gaussian, applied per rendered frame

  void validate() const {
    if (width < 1 || height < 1) throw std::invalid_argument("SpeckleSpec: bad dimensions");
    if (!(dot_density >= 0)) throw std::invalid_argument("SpeckleSpec: density must be >= 0");
    if (!(dot_radius_min > 0) || dot_radius_max < dot_radius_min)
      throw std::invalid_argument("SpeckleSpec: bad radius range");
  }
};

inline GrayImage gen_speckle(const SpeckleSpec& spec) {
  spec.validate();
  GrayImage img(spec.width, spec.height, spec.background);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> ux(0.0, spec.width);
  std::uniform_real_distribution<double> uz(0.0, spec.height);
  std::uniform_real_distribution<double> ur(spec.dot_radius_min, spec.dot_radius_max);
  long n_dots = std::lround(spec.dot_density * spec.width * spec.height);
  for (long i = 0; i < n_dots; ++i) {
    double cy = ux(rng), cz = uz(rng), r = ur(rng);
    int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
    int y1 = std::min(spec.width - 1, static_cast<int>(std::ceil(cy + r + 1)));
    int z0 = std::max(0, static_cast<int>(std::floor(cz - r - 1)));
    int z1 = std::min(spec.height - 1, static_cast<int>(std::ceil(cz + r + 1)));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y) {
        double dist = std::hypot(y - cy, z - cz);
        double cover = std::clamp(r + 0.5 - dist, 0.0, 1.0);
        if (cover <= 0.0) continue;
        img.at(y, z) = img.at(y, z) * (1.0 - cover) + spec.foreground * cover;
      }
  }
  if (spec.blur_sigma > 0) img = gaussian_blur(img, spec.blur_sigma);
  for (std::size_t i = 0; i < img.size(); ++i)
    img.data()[i] = std::clamp(img.data()[i], 0.0, 1.0);
  return img;
}

enum class FieldKind { rigid_shift, linear_twist, bilinear_twist, custom };
enum class ProjectionKind { flat, cylindrical, cylindrical_refraction };

// Prescribed displacement field on an image grid. Twist fields rotate the
// specimen surface; the projection maps the metric surface motion to
// apparent pixel motion (flat scale, cylindrical foreshortening, or the full
// refraction forward model).
struct FieldSpec {
  FieldKind kind = FieldKind::rigid_shift;
  int width = 512;
  int height = 512;
  double shift_u = 0.0;  // px (rigid)
  double shift_v = 0.0;
  double phi_top = 0.0;  // rad, twist at the top of the specimen
  double h_prime = 0.0;  // mm, active height (bilinear)
  SpecimenGeometry geometry;
  ProjectionKind projection = ProjectionKind::flat;
  double mm_per_px = 0.07;
  double axis_y = -1.0;     // specimen axis column; default (width-1)/2
  double bottom_row = -1.0; // image row of the specimen bottom; default height-1
  Grid<double> custom_u, custom_v;
  ChamberModel chamber;     // refraction projection only
  CameraModel camera;
  double world_bottom_z = std::numeric_limits<double>::quiet_NaN();  // default -H/2

  double axis() const { return axis_y >= 0 ? axis_y : (width - 1) / 2.0; }
  double bottom() const { return bottom_row >= 0 ? bottom_row : height - 1.0; }
};

namespace detail {

inline double twist_angle(const FieldSpec& fs, double h_mm) {
  const double H = fs.geometry.H;
  h_mm = std::clamp(h_mm, 0.0, H);
  if (fs.kind == FieldKind::linear_twist) return fs.phi_top * h_mm / H;
  double z_star = H - fs.h_prime;  // no twist below the breakpoint
  if (h_mm <= z_star) return 0.0;
  return fs.phi_top * (h_mm - z_star) / fs.h_prime;
}

// Newton inversion of the refracted pixel -> surface mapping.
inline std::optional<std::pair<double, double>> invert_trace(const CameraModel& cam,
                                                             const ChamberModel& chamber,
                                                             double target_s, double target_h,
                                                             double y0, double z0) {
  double y = y0, z = z0;
  for (int it = 0; it < 8; ++it) {
    auto f = trace_pixel(cam, chamber, y, z);
    if (!f) return std::nullopt;
    double ry = f->s - target_s, rz = f->h - target_h;
    if (std::fabs(ry) < 1e-10 && std::fabs(rz) < 1e-10) return std::make_pair(y, z);
    const double e = 0.5;
    auto fy = trace_pixel(cam, chamber, y + e, z);
    auto fm = trace_pixel(cam, chamber, y - e, z);
    auto fz = trace_pixel(cam, chamber, y, z + e);
    auto fn = trace_pixel(cam, chamber, y, z - e);
    if (!fy || !fm || !fz || !fn) return std::nullopt;
    double j00 = (fy->s - fm->s) / (2 * e), j01 = (fz->s - fn->s) / (2 * e);
    double j10 = (fy->h - fm->h) / (2 * e), j11 = (fz->h - fn->h) / (2 * e);
    double det = j00 * j11 - j01 * j10;
    if (std::fabs(det) < 1e-300) return std::nullopt;
    y -= (j11 * ry - j01 * rz) / det;
    z -= (-j10 * ry + j00 * rz) / det;
  }
  return std::make_pair(y, z);
}

}  // namespace detail

// Ground-truth displacement of the content seen at a pixel, in px.
// nullopt marks pixels off the projected specimen surface.
inline std::optional<std::pair<double, double>> eval_field(const FieldSpec& fs, double y,
                                                           double z) {
  switch (fs.kind) {
    case FieldKind::rigid_shift:
      return std::make_pair(fs.shift_u, fs.shift_v);
    case FieldKind::custom: {
      if (fs.custom_u.empty()) throw std::invalid_argument("eval_field: custom table missing");
      int iy = std::clamp(static_cast<int>(std::lround(y)), 0, fs.custom_u.width() - 1);
      int iz = std::clamp(static_cast<int>(std::lround(z)), 0, fs.custom_u.height() - 1);
      return std::make_pair(fs.custom_u.at(iy, iz), fs.custom_v.at(iy, iz));
    }
    case FieldKind::linear_twist:
    case FieldKind::bilinear_twist:
      break;
    default:
      throw std::invalid_argument("eval_field: invalid kind");
  }

  const double R = fs.geometry.r;
  if (fs.projection == ProjectionKind::flat || fs.projection == ProjectionKind::cylindrical) {
    double h_mm = (fs.bottom() - z) * fs.mm_per_px;
    if (h_mm < 0) h_mm = 0;
    double ds_mm = detail::twist_angle(fs, h_mm) * R;
    if (fs.projection == ProjectionKind::flat)
      return std::make_pair(ds_mm / fs.mm_per_px, 0.0);
    double sin_t = (y - fs.axis()) * fs.mm_per_px / R;
    if (std::fabs(sin_t) > 1.0) return std::nullopt;  // beyond the silhouette
    double cos_t = std::sqrt(1.0 - sin_t * sin_t);
    return std::make_pair(ds_mm * cos_t / fs.mm_per_px, 0.0);
  }

  // full forward model: rotate the surface point, reproject through the
  // refracting chamber
  auto sp = trace_pixel(fs.camera, fs.chamber, y, z);
  if (!sp) return std::nullopt;
  double wb = std::isfinite(fs.world_bottom_z) ? fs.world_bottom_z : -fs.geometry.H / 2.0;
  double h_mm = sp->h - wb;
  if (h_mm < 0) h_mm = 0;
  double s_new = sp->s + detail::twist_angle(fs, h_mm) * R;
  auto px = detail::invert_trace(fs.camera, fs.chamber, s_new, sp->h, y, z);
  if (!px) return std::nullopt;
  return std::make_pair(px->first - y, px->second - z);
}

// Frame pair plus exact forward flow: frame2(x) = frame1(x - w(x)), so the
// returned w is the displacement of the content arriving at x. Pixels whose
// source leaves the image (or that fall off the projected surface) are
// flagged invalid in the truth.
struct RenderedPair {
  GrayImage frame1;
  GrayImage frame2;
  FlowField truth;
};

inline RenderedPair render_pair(const SpeckleSpec& spec, const FieldSpec& fs) {
  if (fs.width != spec.width || fs.height != spec.height)
    throw std::invalid_argument("render_pair: field and speckle dimensions differ");
  RenderedPair out;
  out.frame1 = gen_speckle(spec);
  out.frame2 = GrayImage(spec.width, spec.height);
  out.truth = FlowField(spec.width, spec.height);
  parallel_for(0, spec.height, [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < spec.width; ++y) {
        auto w = eval_field(fs, y, z);
        if (!w) {
          out.frame2.at(y, z) = out.frame1.at(y, z);
          out.truth.set_invalid(y, z);
          continue;
        }
        double sy = y - w->first, sz = z - w->second;
        bool inside = sy >= 0 && sy <= spec.width - 1 && sz >= 0 && sz <= spec.height - 1;
        out.frame2.at(y, z) = std::clamp(
            sample_bicubic(out.frame1, std::clamp(sy, 0.0, spec.width - 1.0),
                           std::clamp(sz, 0.0, spec.height - 1.0)),
            0.0, 1.0);
        if (inside) {
          out.truth.u.at(y, z) = w->first;
          out.truth.v.at(y, z) = w->second;
        } else {
          out.truth.set_invalid(y, z);
        }
      }
  });
  if (spec.noise_sigma > 0) {
    std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (std::size_t i = 0; i < out.frame1.size(); ++i)
      out.frame1.data()[i] = std::clamp(out.frame1.data()[i] + noise(rng), 0.0, 1.0);
    for (std::size_t i = 0; i < out.frame2.size(); ++i)
      out.frame2.data()[i] = std::clamp(out.frame2.data()[i] + noise(rng), 0.0, 1.0);
  }
  return out;
}

}  // namespace tsflow
