#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsflow/grid.hpp"

namespace tsflow {

// kappa defaults to the apparatus-manual value 0.67; 0.8 (gamma < 0.001%)
// and 0.65 (gamma ~ 0.1%) are the standard alternatives.
struct SpecimenGeometry {
  double r = 35.0;     // radius, mm
  double H = 140.0;    // height, mm
  double kappa = 0.67;

  double rho() const { return kappa * r; }                       // reduced radius, mm
  double polar_moment() const { return std::numbers::pi * r * r * r * r / 2.0; }  // mm^4

  void validate() const {
    if (!(r > 0) || !(H > 0)) throw std::invalid_argument("SpecimenGeometry: r, H must be > 0");
    if (!(kappa > 0 && kappa <= 1))
      throw std::invalid_argument("SpecimenGeometry: kappa must be in (0, 1]");
  }
};

struct TorqueSignal {
  double T0 = 0.0;      // N*m
  double f = 0.01;      // Hz
  int n_cycles = 3;

  double omega() const { return 2.0 * std::numbers::pi * f; }

  void validate() const {
    if (T0 < 0) throw std::invalid_argument("TorqueSignal: amplitude must be >= 0");
    if (!(f > 0)) throw std::invalid_argument("TorqueSignal: frequency must be > 0");
  }
};

struct TsTimeSeries {
  std::vector<double> t;    // s, strictly increasing
  std::vector<double> T;    // N*m
  std::vector<double> phi;  // rad

  void validate() const {
    if (t.size() != T.size() || t.size() != phi.size())
      throw std::invalid_argument("TsTimeSeries: column lengths differ");
    for (std::size_t i = 1; i < t.size(); ++i)
      if (!(t[i] > t[i - 1])) throw std::invalid_argument("TsTimeSeries: time must increase");
  }
};

inline double reduced_radius(double r, double kappa) {
  if (!(r > 0)) throw std::invalid_argument("reduced_radius: r must be > 0");
  if (!(kappa > 0 && kappa <= 1)) throw std::invalid_argument("reduced_radius: kappa in (0,1]");
  return kappa * r;
}

// gamma = rho * phi / H_eff. H_eff is the full height H for the standard
// value and the active height h' for the modified one.
inline double shear_strain(double phi, double rho_mm, double h_eff_mm) {
  if (!(h_eff_mm > 0)) throw std::invalid_argument("shear_strain: effective height must be > 0");
  return rho_mm * phi / h_eff_mm;
}

// tau = rho * T / I, returned in kPa (rho in mm, T in N*m, I in mm^4).
inline double shear_stress(double torque_nm, double rho_mm, double polar_moment_mm4) {
  if (!(polar_moment_mm4 > 0)) throw std::invalid_argument("shear_stress: I must be > 0");
  return 1e6 * torque_nm * rho_mm / polar_moment_mm4;
}

// G = tau / gamma at the loop extremum; tau in kPa gives G in kPa.
inline double shear_modulus(double tau, double gamma) {
  if (gamma == 0.0) throw std::invalid_argument("shear_modulus: zero strain");
  return tau / gamma;
}

inline double torque_at(double t_s, const TorqueSignal& sig) {
  sig.validate();
  return sig.T0 * std::sin(sig.omega() * t_s);
}

// Mean horizontal displacement per height bin over a band centered on the
// specimen axis. z runs upward from the bottom of the field (bottom row = 0).
struct DisplacementProfile {
  std::vector<double> z;  // height coordinate, ascending
  std::vector<double> d;  // mean horizontal displacement
  double band_width = 200.0;
};

inline DisplacementProfile extract_profile(const Grid<double>& field, int band_width,
                                           int n_bins = 0, int axis_y = -1) {
  if (band_width < 1) throw std::invalid_argument("extract_profile: band width must be >= 1");
  if (axis_y < 0) axis_y = (field.width() - 1) / 2;
  int y0 = axis_y - (band_width - 1) / 2;
  int y1 = y0 + band_width - 1;
  y0 = std::max(y0, 0);
  y1 = std::min(y1, field.width() - 1);
  if (y0 > y1) throw std::invalid_argument("extract_profile: band outside field");
  if (n_bins <= 0) n_bins = field.height();
  n_bins = std::min(n_bins, field.height());

  DisplacementProfile prof;
  prof.band_width = band_width;
  double rows_per_bin = static_cast<double>(field.height()) / n_bins;
  for (int b = 0; b < n_bins; ++b) {
    int r0 = static_cast<int>(std::floor(b * rows_per_bin));
    int r1 = static_cast<int>(std::floor((b + 1) * rows_per_bin)) - 1;
    r1 = std::max(r1, r0);
    double acc = 0.0;
    int count = 0;
    double row_acc = 0.0;
    for (int z = r0; z <= r1; ++z) {
      row_acc += z;
      for (int y = y0; y <= y1; ++y) {
        double v = field.at(y, z);
        if (!std::isfinite(v)) continue;
        acc += v;
        ++count;
      }
    }
    if (count == 0) continue;  // bins with no valid sample are dropped
    double mean_row = row_acc / (r1 - r0 + 1);
    prof.z.push_back(field.height() - 1 - mean_row);  // height above the bottom row
    prof.d.push_back(acc / count);
  }
  std::reverse(prof.z.begin(), prof.z.end());
  std::reverse(prof.d.begin(), prof.d.end());
  if (prof.z.empty()) throw std::invalid_argument("extract_profile: empty band");
  return prof;
}

// Continuous piecewise-linear fit with one free breakpoint z*. The lower
// segment has free slope (near zero expected); the upper segment is anchored
// to pass through the topmost profile sample. h' = H - z*. Ties in residual
// break toward larger h' (the conservative modulus). The z* = bottom
// candidate is the single-line (linear-assumption) fit.
struct ActiveHeightFit {
  double h_prime = 0.0;
  double breakpoint = 0.0;   // z*
  double slope_lower = 0.0;
  double slope_upper = 0.0;
  double rms = 0.0;
  double linear_rms = 0.0;   // residual of the single-line fit
  bool ok = false;           // false for degenerate (constant) profiles
};

inline ActiveHeightFit fit_active_height(const DisplacementProfile& prof, double H) {
  const std::size_t n = prof.z.size();
  if (n < 8) throw std::invalid_argument("fit_active_height: need at least 8 profile points");
  if (!(H > 0)) throw std::invalid_argument("fit_active_height: H must be > 0");

  double dmin = *std::min_element(prof.d.begin(), prof.d.end());
  double dmax = *std::max_element(prof.d.begin(), prof.d.end());
  ActiveHeightFit fit;
  if (dmax - dmin < 1e-12 * std::max(1.0, std::fabs(dmax))) {
    fit.ok = false;  // constant profile: h' undefined
    return fit;
  }

  const double z_top = prof.z[n - 1];
  const double d_top = prof.d[n - 1];
  double best_sse = std::numeric_limits<double>::infinity();

  for (std::size_t bi = 0; bi + 2 <= n; ++bi) {
    double zs = prof.z[bi];
    double span = z_top - zs;
    if (!(span > 0)) continue;
    // unknowns: value at the breakpoint v*, lower slope b (b fixed to 0 when
    // the lower segment has fewer than 2 samples)
    std::size_t n_lower = bi + 1;
    double a00 = 0, a01 = 0, a11 = 0, r0 = 0, r1 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double cv, cb;  // residual model: d_i ~ cv * v* + cb * b + const_i
      double cons;
      if (i <= bi) {
        cv = 1.0;
        cb = prof.z[i] - zs;
        cons = 0.0;
      } else {
        double t = (prof.z[i] - zs) / span;
        cv = 1.0 - t;
        cb = 0.0;
        cons = d_top * t;
      }
      double rhs = prof.d[i] - cons;
      a00 += cv * cv;
      a01 += cv * cb;
      a11 += cb * cb;
      r0 += cv * rhs;
      r1 += cb * rhs;
    }
    double vstar, slope_b;
    if (n_lower < 2 || a11 < 1e-30) {
      slope_b = 0.0;
      vstar = r0 / a00;
    } else {
      double det = a00 * a11 - a01 * a01;
      if (std::fabs(det) < 1e-30) continue;
      vstar = (r0 * a11 - r1 * a01) / det;
      slope_b = (a00 * r1 - a01 * r0) / det;
    }
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double pred;
      if (i <= bi) {
        pred = vstar + slope_b * (prof.z[i] - zs);
      } else {
        double t = (prof.z[i] - zs) / span;
        pred = vstar * (1.0 - t) + d_top * t;
      }
      double r = prof.d[i] - pred;
      sse += r * r;
    }
    if (bi == 0) fit.linear_rms = std::sqrt(sse / n);
    if (sse < best_sse - 1e-12) {  // strict: ties keep the earlier (larger h') candidate
      best_sse = sse;
      fit.breakpoint = zs;
      fit.h_prime = H - zs;
      fit.slope_lower = slope_b;
      fit.slope_upper = (d_top - vstar) / span;
      fit.rms = std::sqrt(sse / n);
    }
  }
  fit.ok = std::isfinite(best_sse);
  return fit;
}

// Pointwise (gamma, tau) loop; the area (shoelace) is a damping-energy proxy.
struct HysteresisLoop {
  std::vector<double> gamma;
  std::vector<double> tau;  // kPa
  std::string label;        // "original" or "modified"
  double closure_gap = 0.0;

  double area() const {
    double a = 0.0;
    std::size_t n = gamma.size();
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t j = (i + 1) % n;
      a += gamma[i] * tau[j] - gamma[j] * tau[i];
    }
    return 0.5 * std::fabs(a);
  }
};

inline HysteresisLoop build_hysteresis(const TsTimeSeries& series, const SpecimenGeometry& geom,
                                       double h_eff_mm, const std::string& label) {
  series.validate();
  geom.validate();
  if (series.t.empty()) throw std::invalid_argument("build_hysteresis: empty series");
  HysteresisLoop loop;
  loop.label = label;
  loop.gamma.reserve(series.t.size());
  loop.tau.reserve(series.t.size());
  double rho = geom.rho(), polar = geom.polar_moment();
  for (std::size_t i = 0; i < series.t.size(); ++i) {
    loop.gamma.push_back(shear_strain(series.phi[i], rho, h_eff_mm));
    loop.tau.push_back(shear_stress(series.T[i], rho, polar));
  }
  double dg = loop.gamma.back() - loop.gamma.front();
  double dt = loop.tau.back() - loop.tau.front();
  loop.closure_gap = std::sqrt(dg * dg + dt * dt);
  return loop;
}

// G from the loop extremum per the standard definition.
inline double loop_modulus(const HysteresisLoop& loop) {
  if (loop.gamma.empty()) throw std::invalid_argument("loop_modulus: empty loop");
  std::size_t k = 0;
  for (std::size_t i = 1; i < loop.gamma.size(); ++i)
    if (loop.gamma[i] > loop.gamma[k]) k = i;
  return shear_modulus(loop.tau[k], loop.gamma[k]);
}

// NaN-aware standard deviation with the n-1 denominator.
inline double profile_std(const DisplacementProfile& prof) {
  double s = 0.0, s2 = 0.0;
  int n = 0;
  for (double v : prof.d) {
    if (!std::isfinite(v)) continue;
    s += v;
    ++n;
  }
  if (n < 2) throw std::invalid_argument("profile_std: need at least 2 valid points");
  double mean = s / n;
  for (double v : prof.d) {
    if (!std::isfinite(v)) continue;
    s2 += (v - mean) * (v - mean);
  }
  return std::sqrt(s2 / (n - 1));
}

// RMSE after resampling b onto a's heights by linear interpolation.
inline double profile_rmse(const DisplacementProfile& a, const DisplacementProfile& b) {
  if (b.z.size() < 2) throw std::invalid_argument("profile_rmse: reference too short");
  double acc = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < a.z.size(); ++i) {
    double za = a.z[i], da = a.d[i];
    if (!std::isfinite(da)) continue;
    if (za < b.z.front() || za > b.z.back()) continue;
    auto it = std::lower_bound(b.z.begin(), b.z.end(), za);
    std::size_t j = it == b.z.begin() ? 1 : static_cast<std::size_t>(it - b.z.begin());
    j = std::min(j, b.z.size() - 1);
    double t = (za - b.z[j - 1]) / (b.z[j] - b.z[j - 1]);
    double db = b.d[j - 1] * (1 - t) + b.d[j] * t;
    if (!std::isfinite(db)) continue;
    acc += (da - db) * (da - db);
    ++n;
  }
  if (n < 2) throw std::invalid_argument("profile_rmse: fewer than 2 comparable points");
  return std::sqrt(acc / n);
}

// Affine rescaling so the profile ends match two independently known
// reference displacements (fixed bottom, top-cap sensors). This is an
// interpretation of the reference-level calibration, kept optional.
inline DisplacementProfile calibrate_profile(const DisplacementProfile& prof, double bottom_ref,
                                             double top_ref) {
  if (prof.d.size() < 2) throw std::invalid_argument("calibrate_profile: too short");
  double d0 = prof.d.front(), d1 = prof.d.back();
  if (std::fabs(d1 - d0) < 1e-300)
    throw std::invalid_argument("calibrate_profile: degenerate profile ends");
  DisplacementProfile out = prof;
  double scale = (top_ref - bottom_ref) / (d1 - d0);
  for (double& v : out.d) v = bottom_ref + (v - d0) * scale;
  return out;
}

}  // namespace tsflow
