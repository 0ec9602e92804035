#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsflow/grid.hpp"
#include "tsflow/parallel.hpp"

namespace tsflow {

// Shrinking interrogation-area schedule. Named presets follow the usual
// shorthand: 2p64 = [64,32], 2p8 = [8,4], 4p32 = [32,16,8,4], 4p16 = [16,8,4,2].
struct PassSchedule {
  std::vector<int> sizes;
  double overlap = 0.5;

  static PassSchedule preset(const std::string& name) {
    if (name == "2p64") return {{64, 32}, 0.5};
    if (name == "2p8") return {{8, 4}, 0.5};
    if (name == "4p32") return {{32, 16, 8, 4}, 0.5};
    if (name == "4p16") return {{16, 8, 4, 2}, 0.5};
    throw std::invalid_argument("unknown PIV preset: " + name);
  }

  void validate() const {
    if (sizes.empty()) throw std::invalid_argument("PassSchedule: no passes");
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] < 2) throw std::invalid_argument("PassSchedule: IA size too small");
      if (i > 0 && sizes[i] >= sizes[i - 1])
        throw std::invalid_argument("PassSchedule: sizes must be strictly decreasing");
    }
    if (!(overlap >= 0.0 && overlap < 1.0))
      throw std::invalid_argument("PassSchedule: overlap must be in [0,1)");
  }
};

// Correlation plane over integer lags. Lag (du, dv) maps to grid index
// (du - lag_min_u, dv - lag_min_v). For the direct (DCC) plane the support is
// (2m-1)^2; the DFT plane is the m x m circular correlation with lags in
// [-m/2, m/2).
struct CorrelationPlane {
  Grid<double> values;
  int lag_min_u = 0;
  int lag_min_v = 0;
  bool cyclic = false;
  bool has_peak = false;
  int peak_du = 0;
  int peak_dv = 0;
  double peak_value = 0.0;

  double at_lag(int du, int dv) const { return values.at(du - lag_min_u, dv - lag_min_v); }
  bool lag_in_bounds(int du, int dv) const {
    return values.in_bounds(du - lag_min_u, dv - lag_min_v);
  }
  bool peak_on_border() const {
    int iy = peak_du - lag_min_u, iz = peak_dv - lag_min_v;
    return iy == 0 || iz == 0 || iy == values.width() - 1 || iz == values.height() - 1;
  }
};

namespace detail {

inline void find_peak(CorrelationPlane& p) {
  double best = -std::numeric_limits<double>::infinity();
  int by = 0, bz = 0;
  for (int z = 0; z < p.values.height(); ++z)
    for (int y = 0; y < p.values.width(); ++y)
      if (p.values.at(y, z) > best) {
        best = p.values.at(y, z);
        by = y;
        bz = z;
      }
  p.peak_du = by + p.lag_min_u;
  p.peak_dv = bz + p.lag_min_v;
  p.peak_value = best;
}

inline double ia_mean(const Grid<double>& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  return s / a.size();
}

inline double ia_variance(const Grid<double>& a) {
  double m = ia_mean(a), s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a.data()[i] - m;
    s += d * d;
  }
  return s / a.size();
}

// Per-thread FFTW workspace; plan creation is serialized globally.
class FftCorrelator {
 public:
  static double* correlate(const Grid<double>& a, const Grid<double>& b, int m) {
    Workspace& ws = workspace(m);
    std::size_t n = static_cast<std::size_t>(m) * m;
    for (std::size_t i = 0; i < n; ++i) ws.in[i] = a.data()[i];
    fftw_execute(ws.fwd);
    std::copy(ws.freq, ws.freq + ws.nfreq * 2, ws.freq_a);
    for (std::size_t i = 0; i < n; ++i) ws.in[i] = b.data()[i];
    fftw_execute(ws.fwd);
    // conj(FA) * FB, unit-normalized afterward
    for (int i = 0; i < ws.nfreq; ++i) {
      double ar = ws.freq_a[2 * i], ai = ws.freq_a[2 * i + 1];
      double br = ws.freq[2 * i], bi = ws.freq[2 * i + 1];
      ws.freq[2 * i] = ar * br + ai * bi;
      ws.freq[2 * i + 1] = ar * bi - ai * br;
    }
    fftw_execute(ws.inv);
    double scale = 1.0 / (static_cast<double>(m) * m);
    for (std::size_t i = 0; i < n; ++i) ws.out[i] *= scale;
    return ws.out;
  }

 private:
  struct Workspace {
    int m = 0;
    int nfreq = 0;
    double* in = nullptr;
    double* freq = nullptr;    // interleaved complex
    double* freq_a = nullptr;
    double* out = nullptr;
    fftw_plan fwd = nullptr;
    fftw_plan inv = nullptr;

    ~Workspace() {
      if (fwd) fftw_destroy_plan(fwd);
      if (inv) fftw_destroy_plan(inv);
      fftw_free(in);
      fftw_free(freq);
      fftw_free(freq_a);
      fftw_free(out);
    }
  };

  static Workspace& workspace(int m) {
    thread_local std::map<int, std::unique_ptr<Workspace>> cache;
    auto it = cache.find(m);
    if (it != cache.end()) return *it->second;
    auto ws = std::make_unique<Workspace>();
    ws->m = m;
    ws->nfreq = m * (m / 2 + 1);
    ws->in = fftw_alloc_real(static_cast<std::size_t>(m) * m);
    ws->freq = fftw_alloc_real(2 * static_cast<std::size_t>(ws->nfreq));
    ws->freq_a = fftw_alloc_real(2 * static_cast<std::size_t>(ws->nfreq));
    ws->out = fftw_alloc_real(static_cast<std::size_t>(m) * m);
    {
      static std::mutex plan_mutex;
      std::scoped_lock lock(plan_mutex);
      ws->fwd = fftw_plan_dft_r2c_2d(m, m, ws->in,
                                     reinterpret_cast<fftw_complex*>(ws->freq), FFTW_ESTIMATE);
      ws->inv = fftw_plan_dft_c2r_2d(m, m, reinterpret_cast<fftw_complex*>(ws->freq),
                                     ws->out, FFTW_ESTIMATE);
    }
    Workspace& ref = *ws;
    cache.emplace(m, std::move(ws));
    return ref;
  }
};

inline void check_ia_pair(const Grid<double>& a, const Grid<double>& b) {
  if (!a.same_dims(b)) throw std::invalid_argument("correlate: IA size mismatch");
  if (a.width() != a.height()) throw std::invalid_argument("correlate: IA must be square");
}

inline Grid<double> mean_subtract(const Grid<double>& a) {
  Grid<double> out = a;
  double m = ia_mean(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= m;
  return out;
}

constexpr double kZeroTextureVar = 1e-10;

}  // namespace detail

// Direct cross correlation over all integer lags; the peak sits at the
// displacement of B relative to A. Reference oracle for dft_correlate.
inline CorrelationPlane dcc(const Grid<double>& a_in, const Grid<double>& b_in) {
  detail::check_ia_pair(a_in, b_in);
  const int m = a_in.width();
  Grid<double> a = detail::mean_subtract(a_in);
  Grid<double> b = detail::mean_subtract(b_in);
  CorrelationPlane p;
  p.values = Grid<double>(2 * m - 1, 2 * m - 1, 0.0);
  p.lag_min_u = -(m - 1);
  p.lag_min_v = -(m - 1);
  for (int dv = -(m - 1); dv <= m - 1; ++dv)
    for (int du = -(m - 1); du <= m - 1; ++du) {
      double s = 0.0;
      for (int z = std::max(0, -dv); z < std::min(m, m - dv); ++z)
        for (int y = std::max(0, -du); y < std::min(m, m - du); ++y)
          s += a.at(y, z) * b.at(y + du, z + dv);
      p.values.at(du - p.lag_min_u, dv - p.lag_min_v) = s;
    }
  if (detail::ia_variance(a_in) < detail::kZeroTextureVar &&
      detail::ia_variance(b_in) < detail::kZeroTextureVar) {
    p.has_peak = false;  // all-zero plane after mean subtraction
    return p;
  }
  detail::find_peak(p);
  p.has_peak = true;
  return p;
}

// Circular cross correlation via the DFT (conjugate product, inverse
// transform); lags wrap modulo the IA size and are reported in [-m/2, m/2).
inline CorrelationPlane dft_correlate(const Grid<double>& a_in, const Grid<double>& b_in) {
  detail::check_ia_pair(a_in, b_in);
  const int m = a_in.width();
  Grid<double> a = detail::mean_subtract(a_in);
  Grid<double> b = detail::mean_subtract(b_in);
  const double* c = detail::FftCorrelator::correlate(a, b, m);
  CorrelationPlane p;
  p.cyclic = true;
  p.values = Grid<double>(m, m, 0.0);
  p.lag_min_u = -(m / 2);
  p.lag_min_v = -(m / 2);
  for (int dv = p.lag_min_v; dv < p.lag_min_v + m; ++dv)
    for (int du = p.lag_min_u; du < p.lag_min_u + m; ++du) {
      int ky = (du % m + m) % m;
      int kz = (dv % m + m) % m;
      p.values.at(du - p.lag_min_u, dv - p.lag_min_v) = c[static_cast<std::size_t>(kz) * m + ky];
    }
  if (detail::ia_variance(a_in) < detail::kZeroTextureVar &&
      detail::ia_variance(b_in) < detail::kZeroTextureVar) {
    p.has_peak = false;
    return p;
  }
  detail::find_peak(p);
  p.has_peak = true;
  return p;
}

// Three-point Gaussian sub-pixel fit per axis:
//   delta = (ln C- - ln C+) / (2 ln C- - 4 ln C0 + 2 ln C+);
// falls back to the parabolic vertex when a sample is not positive.
// A border peak (or missing peak) yields NaN.
struct SubpixelPeak {
  double du = std::numeric_limits<double>::quiet_NaN();
  double dv = std::numeric_limits<double>::quiet_NaN();
  bool ok = false;
};

inline SubpixelPeak subpixel_peak(const CorrelationPlane& p) {
  SubpixelPeak r;
  if (!p.has_peak || p.peak_on_border()) return r;
  auto fit = [&](double cm, double c0, double cp) {
    double num, den;
    if (cm > 0.0 && c0 > 0.0 && cp > 0.0) {
      num = std::log(cm) - std::log(cp);
      den = 2.0 * std::log(cm) - 4.0 * std::log(c0) + 2.0 * std::log(cp);
    } else {
      num = cm - cp;
      den = 2.0 * cm - 4.0 * c0 + 2.0 * cp;
    }
    if (std::fabs(den) < 1e-300) return 0.0;  // flat symmetric neighborhood
    return num / den;
  };
  double ddu = fit(p.at_lag(p.peak_du - 1, p.peak_dv), p.peak_value, p.at_lag(p.peak_du + 1, p.peak_dv));
  double ddv = fit(p.at_lag(p.peak_du, p.peak_dv - 1), p.peak_value, p.at_lag(p.peak_du, p.peak_dv + 1));
  if (!std::isfinite(ddu) || !std::isfinite(ddv) || std::fabs(ddu) > 1.0 || std::fabs(ddv) > 1.0)
    return r;
  r.du = p.peak_du + ddu;
  r.dv = p.peak_dv + ddv;
  r.ok = true;
  return r;
}

// Regular interrogation grid and its displacements. NaN-masked entries stay
// in the grid (they count toward n_points) but are excluded from statistics.
struct PivResult {
  std::vector<double> grid_y;  // IA-center coordinates per axis
  std::vector<double> grid_z;
  Grid<double> u, v;           // indexed [iy, iz] like images
  Grid<uint8_t> nan_mask;      // 1 where invalid
  int n_points = 0;

  double nan_fraction() const {
    if (n_points == 0) return 0.0;
    std::size_t bad = 0;
    for (std::size_t i = 0; i < nan_mask.size(); ++i) bad += nan_mask.data()[i];
    return static_cast<double>(bad) / n_points;
  }
};

// Per-vector diagnostics collected during correlation, consumed by the
// validation rules.
struct VectorDiagnostics {
  double variance = 0.0;        // smaller of the two IA variances
  double peak_value = 0.0;
  double second_peak = 0.0;     // outside a 3x3 exclusion zone
  bool border_peak = false;
  bool subpixel_ok = false;
  double displacement_u = 0.0;  // measured residual (peak + subpixel), px
  double displacement_v = 0.0;
  int ia_size = 0;
};

// Marks NaN where (a) the IA has essentially no texture, (b) the peak is not
// at least 1.2x the second peak, (c) the peak sits on the plane border, or
// (d) the measured residual exceeds half the IA.
inline void validate_vectors(PivResult& result, const std::vector<VectorDiagnostics>& diags) {
  const double min_peak_ratio = 1.2;
  int W = result.u.width();
  for (int iz = 0; iz < result.u.height(); ++iz)
    for (int iy = 0; iy < W; ++iy) {
      const VectorDiagnostics& d = diags[static_cast<std::size_t>(iz) * W + iy];
      bool bad = false;
      if (d.variance < detail::kZeroTextureVar) bad = true;
      if (!bad && (d.border_peak || !d.subpixel_ok)) bad = true;
      if (!bad && d.peak_value <= 0.0) bad = true;
      if (!bad && d.second_peak > 0.0 && d.peak_value < min_peak_ratio * d.second_peak) bad = true;
      if (!bad && (std::fabs(d.displacement_u) > d.ia_size / 2.0 ||
                   std::fabs(d.displacement_v) > d.ia_size / 2.0))
        bad = true;
      if (bad) {
        result.u.at(iy, iz) = std::numeric_limits<double>::quiet_NaN();
        result.v.at(iy, iz) = std::numeric_limits<double>::quiet_NaN();
        result.nan_mask.at(iy, iz) = 1;
      }
    }
}

namespace detail {

inline double second_peak_value(const CorrelationPlane& p) {
  double best = -std::numeric_limits<double>::infinity();
  int py = p.peak_du - p.lag_min_u, pz = p.peak_dv - p.lag_min_v;
  for (int z = 0; z < p.values.height(); ++z)
    for (int y = 0; y < p.values.width(); ++y) {
      if (std::abs(y - py) <= 1 && std::abs(z - pz) <= 1) continue;
      best = std::max(best, p.values.at(y, z));
    }
  return best;
}

// IA-center grid per axis: count = floor((dim - ia) / (ia*(1-overlap))) + 1.
inline std::vector<int> grid_positions(int dim, int ia, double overlap) {
  double step = ia * (1.0 - overlap);
  if (step < 1.0) step = 1.0;
  int count = static_cast<int>(std::floor((dim - ia) / step)) + 1;
  std::vector<int> tl(count);
  for (int i = 0; i < count; ++i)
    tl[i] = std::min(static_cast<int>(std::lround(i * step)), dim - ia);
  return tl;
}

inline Grid<double> extract_ia(const GrayImage& img, int y0, int z0, int m) {
  Grid<double> out(m, m);
  for (int z = 0; z < m; ++z)
    std::copy(img.row(z0 + z) + y0, img.row(z0 + z) + y0 + m, out.row(z));
  return out;
}

// NaN-aware bilinear lookup of a previous-pass grid at fractional index.
inline double grid_interp(const Grid<double>& g, double fy, double fz) {
  fy = std::clamp(fy, 0.0, g.width() - 1.0);
  fz = std::clamp(fz, 0.0, g.height() - 1.0);
  int y0 = static_cast<int>(fy), z0 = static_cast<int>(fz);
  int y1 = std::min(y0 + 1, g.width() - 1), z1 = std::min(z0 + 1, g.height() - 1);
  double wy = fy - y0, wz = fz - z0;
  double wsum = 0.0, acc = 0.0;
  auto add = [&](int y, int z, double w) {
    double v = g.at(y, z);
    if (!std::isfinite(v) || w <= 0.0) return;
    acc += w * v;
    wsum += w;
  };
  add(y0, z0, (1 - wy) * (1 - wz));
  add(y1, z0, wy * (1 - wz));
  add(y0, z1, (1 - wy) * wz);
  add(y1, z1, wy * wz);
  return wsum > 0.0 ? acc / wsum : 0.0;
}

}  // namespace detail

// Multi-pass digital PIV. Pass k correlates IAs of sizes[k]; the B window is
// offset by the previous pass's displacement interpolated to the new grid and
// rounded, with the correlation residual added back on top. Vector validation
// runs every pass.
inline PivResult multipass(const GrayImage& a, const GrayImage& b, const PassSchedule& sched) {
  sched.validate();
  if (!a.same_dims(b)) throw std::invalid_argument("multipass: image dimensions differ");
  if (a.width() < sched.sizes[0] || a.height() < sched.sizes[0])
    throw std::invalid_argument("multipass: image smaller than first IA");

  PivResult prev;
  std::vector<int> prev_tl_y, prev_tl_z;
  for (std::size_t pass = 0; pass < sched.sizes.size(); ++pass) {
    const int m = sched.sizes[pass];
    std::vector<int> tl_y = detail::grid_positions(a.width(), m, sched.overlap);
    std::vector<int> tl_z = detail::grid_positions(a.height(), m, sched.overlap);
    const int ny = static_cast<int>(tl_y.size()), nz = static_cast<int>(tl_z.size());

    PivResult cur;
    cur.grid_y.resize(ny);
    cur.grid_z.resize(nz);
    for (int i = 0; i < ny; ++i) cur.grid_y[i] = tl_y[i] + (m - 1) / 2.0;
    for (int i = 0; i < nz; ++i) cur.grid_z[i] = tl_z[i] + (m - 1) / 2.0;
    cur.u = Grid<double>(ny, nz, 0.0);
    cur.v = Grid<double>(ny, nz, 0.0);
    cur.nan_mask = Grid<uint8_t>(ny, nz, 0);
    cur.n_points = ny * nz;
    std::vector<VectorDiagnostics> diags(static_cast<std::size_t>(ny) * nz);

    const bool have_prev = pass > 0;
    const PivResult& pr = prev;
    double prev_step_y = 0, prev_step_z = 0, prev_c0_y = 0, prev_c0_z = 0;
    if (have_prev) {
      prev_c0_y = pr.grid_y.front();
      prev_c0_z = pr.grid_z.front();
      prev_step_y = pr.grid_y.size() > 1 ? pr.grid_y[1] - pr.grid_y[0] : 1.0;
      prev_step_z = pr.grid_z.size() > 1 ? pr.grid_z[1] - pr.grid_z[0] : 1.0;
    }

    parallel_for(0, nz, [&](int iz0, int iz1) {
      for (int iz = iz0; iz < iz1; ++iz)
        for (int iy = 0; iy < ny; ++iy) {
          int off_u = 0, off_v = 0;
          if (have_prev) {
            double fy = (cur.grid_y[iy] - prev_c0_y) / prev_step_y;
            double fz = (cur.grid_z[iz] - prev_c0_z) / prev_step_z;
            off_u = static_cast<int>(std::lround(detail::grid_interp(pr.u, fy, fz)));
            off_v = static_cast<int>(std::lround(detail::grid_interp(pr.v, fy, fz)));
          }
          // clamp the offset window inside B
          off_u = std::clamp(off_u, -tl_y[iy], a.width() - m - tl_y[iy]);
          off_v = std::clamp(off_v, -tl_z[iz], a.height() - m - tl_z[iz]);

          Grid<double> ia_a = detail::extract_ia(a, tl_y[iy], tl_z[iz], m);
          Grid<double> ia_b = detail::extract_ia(b, tl_y[iy] + off_u, tl_z[iz] + off_v, m);

          VectorDiagnostics& d = diags[static_cast<std::size_t>(iz) * ny + iy];
          d.ia_size = m;
          d.variance = std::min(detail::ia_variance(ia_a), detail::ia_variance(ia_b));
          if (d.variance < detail::kZeroTextureVar) continue;

          CorrelationPlane plane = dft_correlate(ia_a, ia_b);
          SubpixelPeak sp = subpixel_peak(plane);
          d.peak_value = plane.peak_value;
          d.second_peak = detail::second_peak_value(plane);
          d.border_peak = plane.peak_on_border();
          d.subpixel_ok = sp.ok;
          if (sp.ok) {
            d.displacement_u = sp.du;
            d.displacement_v = sp.dv;
            cur.u.at(iy, iz) = off_u + sp.du;
            cur.v.at(iy, iz) = off_v + sp.dv;
          }
        }
    });
    validate_vectors(cur, diags);
    prev = std::move(cur);
    prev_tl_y = std::move(tl_y);
    prev_tl_z = std::move(tl_z);
  }
  return prev;
}

}  // namespace tsflow
