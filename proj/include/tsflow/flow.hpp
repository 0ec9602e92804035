#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "tsflow/grid.hpp"
#include "tsflow/image.hpp"
#include "tsflow/parallel.hpp"
#include "tsflow/sift.hpp"

namespace tsflow {

// Dense displacement field in px. +u is rightward (y axis), +v is downward
// (z axis). Invalid entries hold NaN and are excluded from statistics.
struct FlowField {
  Grid<double> u, v;
  Grid<uint8_t> valid;

  FlowField() = default;
  FlowField(int width, int height)
      : u(width, height, 0.0), v(width, height, 0.0), valid(width, height, 1) {}

  int width() const { return u.width(); }
  int height() const { return u.height(); }

  void set_invalid(int y, int z) {
    u.at(y, z) = std::numeric_limits<double>::quiet_NaN();
    v.at(y, z) = std::numeric_limits<double>::quiet_NaN();
    valid.at(y, z) = 0;
  }
};

// Truncated-L1 MRF energy parameters. d1 <= 0 requests the data threshold
// to be derived from descriptor statistics (40 x mean L1 magnitude of s1).
struct EnergyParams {
  double d1 = 0.0;
  double d2 = 40.0;
  double eta = 0.01;
  double alpha = 2.0;
};

inline EnergyParams resolve_energy_params(const EnergyParams& p, const FeatureImage& s1) {
  EnergyParams r = p;
  if (r.d1 <= 0.0) r.d1 = std::max(40.0 * mean_l1_magnitude(s1), 1e-9);
  if (!(r.d1 > 0 && r.d2 > 0 && r.eta > 0 && r.alpha > 0))
    throw std::invalid_argument("EnergyParams: all parameters must be > 0");
  return r;
}

// Solver parameter set: {regularization weight, down-sample ratio, width of
// the coarsest level, outer fixed-point iterations, inner fixed-point
// iterations, successive over-relaxation iterations}.
struct SolverParams {
  double reg_weight = 1.0;
  double ratio = 0.5;
  int coarsest_width = 40;
  int n_outer = 3;
  int n_inner = 1;
  int n_sor = 20;

  static SolverParams defaults() { return {}; }
  static SolverParams optimal() { return {0.02, 0.75, 20, 10, 3, 40}; }
};

namespace detail {

// L1 distance with four independent accumulators; fixed order, vectorizable.
inline double descriptor_l1(const double* a, const double* b, int dim) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int k = 0;
  for (; k + 4 <= dim; k += 4) {
    s0 += std::fabs(a[k] - b[k]);
    s1 += std::fabs(a[k + 1] - b[k + 1]);
    s2 += std::fabs(a[k + 2] - b[k + 2]);
    s3 += std::fabs(a[k + 3] - b[k + 3]);
  }
  for (; k < dim; ++k) s0 += std::fabs(a[k] - b[k]);
  return (s0 + s1) + (s2 + s3);
}

}  // namespace detail

// Truncated-L1 matching energy of an integer flow:
//   sum_p min(||s1(p) - s2(p+w)||_1, d1) + sum_p eta(|u|+|v|)
//   + sum_edges min(alpha|u_p - u_q|, d2) + min(alpha|v_p - v_q|, d2).
// Out-of-bounds targets contribute the truncation value d1.
inline double sift_flow_energy(const FeatureImage& s1, const FeatureImage& s2,
                               const FlowField& w, const EnergyParams& params) {
  if (!s1.same_dims(s2) || s1.width() != w.width() || s1.height() != w.height())
    throw std::invalid_argument("sift_flow_energy: dimension mismatch");
  EnergyParams p = resolve_energy_params(params, s1);
  const int W = s1.width(), H = s1.height();
  double data = 0.0, small = 0.0, smooth = 0.0;
  for (int z = 0; z < H; ++z)
    for (int y = 0; y < W; ++y) {
      if (!w.valid.at(y, z)) throw std::invalid_argument("sift_flow_energy: invalid flow entry");
      double uu = w.u.at(y, z), vv = w.v.at(y, z);
      if (uu != std::floor(uu) || vv != std::floor(vv))
        throw std::invalid_argument("sift_flow_energy: flow must be integer-valued");
      int ty = y + static_cast<int>(uu), tz = z + static_cast<int>(vv);
      data += ty >= 0 && ty < W && tz >= 0 && tz < H
                  ? std::min(detail::descriptor_l1(s1.descriptor(y, z), s2.descriptor(ty, tz), s1.dim()), p.d1)
                  : p.d1;
      small += p.eta * (std::fabs(uu) + std::fabs(vv));
      if (y + 1 < W) {
        smooth += std::min(p.alpha * std::fabs(uu - w.u.at(y + 1, z)), p.d2);
        smooth += std::min(p.alpha * std::fabs(vv - w.v.at(y + 1, z)), p.d2);
      }
      if (z + 1 < H) {
        smooth += std::min(p.alpha * std::fabs(uu - w.u.at(y, z + 1)), p.d2);
        smooth += std::min(p.alpha * std::fabs(vv - w.v.at(y, z + 1)), p.d2);
      }
    }
  return data + small + smooth;
}

struct DiscreteMatchDiagnostics {
  struct Level {
    int level;
    double energy_start;  // propagated flow, before relaxation
    double energy_end;    // after relaxation
  };
  std::vector<Level> levels;
};

namespace detail {

// One pyramid level of the discrete matcher: per-pixel label sets are the
// (2c+1)^2 integer offsets around the propagated base vector. Relaxation is
// deterministic raster + reverse-raster ICM over cached data costs, strictly
// monotone in the energy; for small problems an additional pairwise (edge)
// sweep tightens local minima.
class DiscreteLevel {
 public:
  DiscreteLevel(const FeatureImage& s1, const FeatureImage& s2, const EnergyParams& p,
                int radius, const Grid<int>& base_u, const Grid<int>& base_v)
      : s1_(s1), s2_(s2), p_(p), c_(radius), nl_(2 * radius + 1),
        base_u_(base_u), base_v_(base_v),
        label_(s1.width(), s1.height(), radius * nl_ + radius),  // delta (0,0)
        cost_(static_cast<std::size_t>(s1.width()) * s1.height() * nl_ * nl_) {
    const int W = s1_.width(), H = s1_.height();
    parallel_for(0, H, [&](int z0, int z1) {
      for (int z = z0; z < z1; ++z)
        for (int y = 0; y < W; ++y) {
          double* row = cost_.data() + (static_cast<std::size_t>(z) * W + y) * nl_ * nl_;
          const double* d1v = s1_.descriptor(y, z);
          for (int dv = -c_; dv <= c_; ++dv)
            for (int du = -c_; du <= c_; ++du) {
              int ty = y + base_u_.at(y, z) + du;
              int tz = z + base_v_.at(y, z) + dv;
              double cost = (ty >= 0 && ty < W && tz >= 0 && tz < H)
                                ? std::min(descriptor_l1(d1v, s2_.descriptor(ty, tz), s1_.dim()), p_.d1)
                                : p_.d1;
              row[(dv + c_) * nl_ + (du + c_)] = cost;
            }
        }
    });
  }

  int flow_u(int y, int z) const { return base_u_.at(y, z) + label_.at(y, z) % nl_ - c_; }
  int flow_v(int y, int z) const { return base_v_.at(y, z) + label_.at(y, z) / nl_ - c_; }

  double data_cost(int y, int z, int label) const {
    const int W = s1_.width();
    return cost_[(static_cast<std::size_t>(z) * W + y) * nl_ * nl_ + label];
  }

  double pair_cost(int ua, int va, int ub, int vb) const {
    return std::min(p_.alpha * std::abs(ua - ub), p_.d2) +
           std::min(p_.alpha * std::abs(va - vb), p_.d2);
  }

  // Site cost of a candidate label with all neighbors fixed.
  double site_cost(int y, int z, int label, int skip_y = -1, int skip_z = -1) const {
    int u = base_u_.at(y, z) + label % nl_ - c_;
    int v = base_v_.at(y, z) + label / nl_ - c_;
    double e = data_cost(y, z, label) + p_.eta * (std::abs(u) + std::abs(v));
    const int W = s1_.width(), H = s1_.height();
    constexpr int dy[4] = {-1, 1, 0, 0};
    constexpr int dz[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      int qy = y + dy[k], qz = z + dz[k];
      if (qy < 0 || qy >= W || qz < 0 || qz >= H) continue;
      if (qy == skip_y && qz == skip_z) continue;
      e += pair_cost(u, v, flow_u(qy, qz), flow_v(qy, qz));
    }
    return e;
  }

  bool improve_site(int y, int z) {
    int cur = label_.at(y, z);
    double cur_cost = site_cost(y, z, cur);
    int best = cur;
    double best_cost = cur_cost;
    for (int l = 0; l < nl_ * nl_; ++l) {
      if (l == cur) continue;
      double e = site_cost(y, z, l);
      if (e < best_cost - 1e-12) {
        best_cost = e;
        best = l;
      }
    }
    if (best == cur) return false;
    label_.at(y, z) = best;
    return true;
  }

  // Joint move over the edge (p, q); both label sets enumerated.
  bool improve_pair(int py, int pz, int qy, int qz) {
    int curp = label_.at(py, pz), curq = label_.at(qy, qz);
    auto joint = [&](int lp, int lq) {
      int up = base_u_.at(py, pz) + lp % nl_ - c_, vp = base_v_.at(py, pz) + lp / nl_ - c_;
      int uq = base_u_.at(qy, qz) + lq % nl_ - c_, vq = base_v_.at(qy, qz) + lq / nl_ - c_;
      // neighbors of p except q, plus neighbors of q except p, plus the edge
      label_.at(py, pz) = lp;
      label_.at(qy, qz) = lq;
      double e = site_cost(py, pz, lp, qy, qz) + site_cost(qy, qz, lq, py, pz) +
                 pair_cost(up, vp, uq, vq);
      return e;
    };
    double cur_cost = joint(curp, curq);
    int bp = curp, bq = curq;
    double best = cur_cost;
    for (int lp = 0; lp < nl_ * nl_; ++lp)
      for (int lq = 0; lq < nl_ * nl_; ++lq) {
        double e = joint(lp, lq);
        if (e < best - 1e-12) {
          best = e;
          bp = lp;
          bq = lq;
        }
      }
    label_.at(py, pz) = bp;
    label_.at(qy, qz) = bq;
    return bp != curp || bq != curq;
  }

  void relax(int max_rounds = 20) {
    const int W = s1_.width(), H = s1_.height();
    bool pair_pass = small_problem();
    for (int round = 0; round < max_rounds; ++round) {
      bool changed = false;
      for (int z = 0; z < H; ++z)
        for (int y = 0; y < W; ++y) changed |= improve_site(y, z);
      for (int z = H - 1; z >= 0; --z)
        for (int y = W - 1; y >= 0; --y) changed |= improve_site(y, z);
      if (pair_pass) {
        for (int z = 0; z < H; ++z)
          for (int y = 0; y + 1 < W; ++y) changed |= improve_pair(y, z, y + 1, z);
        for (int z = 0; z + 1 < H; ++z)
          for (int y = 0; y < W; ++y) changed |= improve_pair(y, z, y, z + 1);
      }
      if (!changed) break;
    }
  }

  // Full truncated energy of the current labeling.
  double total_energy() const {
    const int W = s1_.width(), H = s1_.height();
    double e = 0.0;
    for (int z = 0; z < H; ++z)
      for (int y = 0; y < W; ++y) {
        int u = flow_u(y, z), v = flow_v(y, z);
        e += data_cost(y, z, label_.at(y, z)) + p_.eta * (std::abs(u) + std::abs(v));
        if (y + 1 < W) e += pair_cost(u, v, flow_u(y + 1, z), flow_v(y + 1, z));
        if (z + 1 < H) e += pair_cost(u, v, flow_u(y, z + 1), flow_v(y, z + 1));
      }
    return e;
  }

  Grid<int> labels() const { return label_; }
  void set_labels(const Grid<int>& l) { label_ = l; }

  // Per-pixel data + small-displacement optimum; the alternative start for
  // the relaxation.
  void reset_to_data_optimal() {
    const int W = s1_.width(), H = s1_.height();
    for (int z = 0; z < H; ++z)
      for (int y = 0; y < W; ++y) {
        int best = c_ * nl_ + c_;  // delta (0,0)
        double best_cost = std::numeric_limits<double>::infinity();
        for (int l = 0; l < nl_ * nl_; ++l) {
          int u = base_u_.at(y, z) + l % nl_ - c_;
          int v = base_v_.at(y, z) + l / nl_ - c_;
          double e = data_cost(y, z, l) + p_.eta * (std::abs(u) + std::abs(v));
          if (e < best_cost - 1e-12) {
            best_cost = e;
            best = l;
          }
        }
        label_.at(y, z) = best;
      }
  }

  void reset_to_constant(int label) { label_.fill(label); }

  int label_count() const { return nl_ * nl_; }

  // Joint pair moves are affordable only when the edge enumeration stays
  // small. The constant-label restarts are gated harder still; they exist
  // for near-exhaustive quality on toy problems, not production grids.
  bool small_problem() const {
    const int W = s1_.width(), H = s1_.height();
    return static_cast<double>(nl_) * nl_ * nl_ * nl_ * (2.0 * W * H - W - H) <= 2e6;
  }

  bool tiny_problem() const {
    const int W = s1_.width(), H = s1_.height();
    return W * H <= 100 && nl_ * nl_ <= 100;
  }

 private:
  const FeatureImage& s1_;
  const FeatureImage& s2_;
  EnergyParams p_;
  int c_, nl_;
  Grid<int> base_u_, base_v_;
  Grid<int> label_;
  std::vector<double> cost_;
};

}  // namespace detail

// Coarse-to-fine integer matching. At the coarsest level the window is
// centered on each pixel; at finer levels it is centered on the propagated
// (scaled, rounded) vector from the level above. window_radius holds one
// radius per level (finest first); a shorter vector repeats its last entry.
inline FlowField discrete_match(const Pyramid<FeatureImage>& p1, const Pyramid<FeatureImage>& p2,
                                const EnergyParams& params, const std::vector<int>& window_radius,
                                DiscreteMatchDiagnostics* diag = nullptr) {
  if (p1.num_levels() == 0 || p2.num_levels() == 0)
    throw std::invalid_argument("discrete_match: empty pyramid");
  if (p1.num_levels() != p2.num_levels())
    throw std::invalid_argument("discrete_match: pyramid level counts differ");
  for (int l = 0; l < p1.num_levels(); ++l)
    if (!p1.levels[l].same_dims(p2.levels[l]))
      throw std::invalid_argument("discrete_match: pyramid geometry differs");
  if (window_radius.empty()) throw std::invalid_argument("discrete_match: no window radii");
  for (int r : window_radius)
    if (r < 1) throw std::invalid_argument("discrete_match: window radius must be >= 1");
  auto radius_at = [&](int level) {
    return level < static_cast<int>(window_radius.size()) ? window_radius[level]
                                                          : window_radius.back();
  };

  Grid<double> prev_u, prev_v;
  for (int level = p1.num_levels() - 1; level >= 0; --level) {
    const FeatureImage& s1 = p1.levels[level];
    const FeatureImage& s2 = p2.levels[level];
    EnergyParams ep = resolve_energy_params(params, s1);
    const int W = s1.width(), H = s1.height();
    Grid<int> base_u(W, H, 0), base_v(W, H, 0);
    if (level < p1.num_levels() - 1) {
      const FeatureImage& coarse = p1.levels[level + 1];
      double su = static_cast<double>(W) / coarse.width();
      double sv = static_cast<double>(H) / coarse.height();
      for (int z = 0; z < H; ++z)
        for (int y = 0; y < W; ++y) {
          double cy = std::clamp((y + 0.5) / su - 0.5, 0.0, coarse.width() - 1.0);
          double cz = std::clamp((z + 0.5) / sv - 0.5, 0.0, coarse.height() - 1.0);
          int iy = static_cast<int>(std::lround(cy)), iz = static_cast<int>(std::lround(cz));
          base_u.at(y, z) = static_cast<int>(std::lround(prev_u.at(iy, iz) * su));
          base_v.at(y, z) = static_cast<int>(std::lround(prev_v.at(iy, iz) * sv));
        }
    }
    detail::DiscreteLevel lv(s1, s2, ep, radius_at(level), base_u, base_v);

    DiscreteMatchDiagnostics::Level dl{level, 0.0, 0.0};
    auto level_energy = [&]() {
      FlowField f(W, H);
      for (int z = 0; z < H; ++z)
        for (int y = 0; y < W; ++y) {
          f.u.at(y, z) = lv.flow_u(y, z);
          f.v.at(y, z) = lv.flow_v(y, z);
        }
      return sift_flow_energy(s1, s2, f, ep);
    };
    if (diag) dl.energy_start = level_energy();
    // deterministic multi-start: the propagated flow, the per-pixel data
    // optimum, and (for small problems) every constant labeling; keep
    // whichever start relaxes to the lowest energy
    lv.relax();
    double best_e = lv.total_energy();
    Grid<int> best_labels = lv.labels();
    auto try_start = [&](auto&& reset) {
      reset();
      lv.relax();
      double e = lv.total_energy();
      if (e < best_e - 1e-12) {
        best_e = e;
        best_labels = lv.labels();
      }
    };
    try_start([&] { lv.reset_to_data_optimal(); });
    if (lv.tiny_problem())
      for (int l = 0; l < lv.label_count(); ++l) try_start([&] { lv.reset_to_constant(l); });
    lv.set_labels(best_labels);
    if (diag) {
      dl.energy_end = level_energy();
      diag->levels.push_back(dl);
    }

    prev_u = Grid<double>(W, H, 0.0);
    prev_v = Grid<double>(W, H, 0.0);
    for (int z = 0; z < H; ++z)
      for (int y = 0; y < W; ++y) {
        prev_u.at(y, z) = lv.flow_u(y, z);
        prev_v.at(y, z) = lv.flow_v(y, z);
      }
  }

  FlowField out(prev_u.width(), prev_u.height());
  out.u = prev_u;
  out.v = prev_v;
  return out;
}

struct WarpResult {
  GrayImage image;
  Grid<uint8_t> valid;  // 0 where flow invalid or target out of range
};

// out(x) = img(x + w(x)), bilinear. Where the flow is invalid or the target
// leaves the image, the source pixel is passed through and flagged.
inline WarpResult warp(const GrayImage& img, const FlowField& w) {
  if (img.width() != w.width() || img.height() != w.height())
    throw std::invalid_argument("warp: dimension mismatch");
  WarpResult r{GrayImage(img.width(), img.height()), Grid<uint8_t>(img.width(), img.height(), 1)};
  parallel_for(0, img.height(), [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < img.width(); ++y) {
        double uu = w.u.at(y, z), vv = w.v.at(y, z);
        if (!w.valid.at(y, z) || !std::isfinite(uu) || !std::isfinite(vv)) {
          r.image.at(y, z) = img.at(y, z);
          r.valid.at(y, z) = 0;
          continue;
        }
        double ty = y + uu, tz = z + vv;
        if (ty < 0 || ty > img.width() - 1 || tz < 0 || tz > img.height() - 1) {
          r.image.at(y, z) = img.at(y, z);
          r.valid.at(y, z) = 0;
          continue;
        }
        r.image.at(y, z) = sample_bilinear(img, ty, tz);
      }
  });
  return r;
}

struct RefineDiagnostics {
  struct Level {
    int level;
    std::vector<double> objective;  // after each outer iteration (index 0: initial)
  };
  std::vector<Level> levels;
};

struct RefineResult {
  FlowField flow;
  bool diverged = false;
};

namespace detail {

constexpr double kPsiEps = 1e-6;

// Internal warp for the variational solver: bicubic interpolation keeps
// brightness constancy meaningful on near-Nyquist texture.
inline WarpResult warp_bicubic(const GrayImage& img, const Grid<double>& u,
                               const Grid<double>& v) {
  WarpResult r{GrayImage(img.width(), img.height()),
               Grid<uint8_t>(img.width(), img.height(), 1)};
  parallel_for(0, img.height(), [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < img.width(); ++y) {
        double ty = y + u.at(y, z), tz = z + v.at(y, z);
        if (ty < 0 || ty > img.width() - 1 || tz < 0 || tz > img.height() - 1) {
          r.image.at(y, z) = img.at(y, z);
          r.valid.at(y, z) = 0;
          continue;
        }
        r.image.at(y, z) = sample_bicubic(img, ty, tz);
      }
  });
  return r;
}

inline double robust_psi(double s2) { return std::sqrt(s2 + kPsiEps); }

// True (non-linearized) objective: robust brightness constancy plus robust
// forward-difference smoothness. Pixels warped outside the image, or masked
// out by the caller, carry no data term.
inline double refine_objective(const GrayImage& i1, const GrayImage& i2,
                               const Grid<uint8_t>& data_mask, const Grid<double>& u,
                               const Grid<double>& v, double reg) {
  const int W = i1.width(), H = i1.height();
  double e = 0.0;
  for (int z = 0; z < H; ++z)
    for (int y = 0; y < W; ++y) {
      double ty = y + u.at(y, z), tz = z + v.at(y, z);
      if (data_mask.at(y, z) && ty >= 0 && ty <= W - 1 && tz >= 0 && tz <= H - 1) {
        double r = sample_bicubic(i2, ty, tz) - i1.at(y, z);
        e += robust_psi(r * r);
      }
      double uy = y + 1 < W ? u.at(y + 1, z) - u.at(y, z) : 0.0;
      double uz = z + 1 < H ? u.at(y, z + 1) - u.at(y, z) : 0.0;
      double vy = y + 1 < W ? v.at(y + 1, z) - v.at(y, z) : 0.0;
      double vz = z + 1 < H ? v.at(y, z + 1) - v.at(y, z) : 0.0;
      e += reg * robust_psi(uy * uy + uz * uz + vy * vy + vz * vz);
    }
  return e;
}

// Mild separable pre-smoothing applied to each pyramid level before
// differentiation; keeps the linearized data term meaningful on texture
// close to the pixel scale.
inline GrayImage presmooth(const GrayImage& img) {
  static constexpr double k[5] = {0.02, 0.11, 0.74, 0.11, 0.02};
  const int W = img.width(), H = img.height();
  GrayImage tmp(W, H), out(W, H);
  parallel_for(0, H, [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < W; ++y) {
        double acc = 0.0;
        for (int i = -2; i <= 2; ++i) acc += k[i + 2] * img.at(std::clamp(y + i, 0, W - 1), z);
        tmp.at(y, z) = acc;
      }
  });
  parallel_for(0, H, [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < W; ++y) {
        double acc = 0.0;
        for (int i = -2; i <= 2; ++i) acc += k[i + 2] * tmp.at(y, std::clamp(z + i, 0, H - 1));
        out.at(y, z) = acc;
      }
  });
  return out;
}

// 5-tap derivative along one axis, borders replicated.
inline void derivative(const GrayImage& src, bool along_y, Grid<double>& out) {
  static constexpr double k[5] = {1.0 / 12, -8.0 / 12, 0.0, 8.0 / 12, -1.0 / 12};
  const int W = src.width(), H = src.height();
  parallel_for(0, H, [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < W; ++y) {
        double acc = 0.0;
        for (int i = -2; i <= 2; ++i) {
          int yy = along_y ? std::clamp(y + i, 0, W - 1) : y;
          int zz = along_y ? z : std::clamp(z + i, 0, H - 1);
          acc += k[i + 2] * src.at(yy, zz);
        }
        out.at(y, z) = acc;
      }
  });
}

// One pyramid level of the variational solver. Outer loop re-linearizes the
// brightness constancy about the current flow; the inner loop recomputes the
// robust weights; each linear system runs n_sor red-black SOR sweeps with
// omega = 1.8. Increments that would raise the true objective are halved
// (and ultimately dropped), which keeps the objective non-increasing.
inline bool refine_level(const GrayImage& i1, const GrayImage& i2,
                         const Grid<uint8_t>& data_mask, Grid<double>& u, Grid<double>& v,
                         const SolverParams& sp, std::vector<double>* objective_log) {
  const int W = i1.width(), H = i1.height();
  const double reg = sp.reg_weight;
  const double omega = 1.8;

  Grid<double> iy(W, H), iz(W, H), it(W, H);
  Grid<double> du(W, H), dv(W, H);
  Grid<double> psi(W, H), phi(W, H);

  double energy = refine_objective(i1, i2, data_mask, u, v, reg);
  if (objective_log) objective_log->push_back(energy);

  for (int outer = 0; outer < sp.n_outer; ++outer) {
    // warp and linearize
    WarpResult warped = detail::warp_bicubic(i2, u, v);
    GrayImage favg(W, H);
    for (std::size_t i = 0; i < favg.size(); ++i)
      favg.data()[i] = 0.5 * (i1.data()[i] + warped.image.data()[i]);
    derivative(favg, true, iy);
    derivative(favg, false, iz);
    for (std::size_t i = 0; i < it.size(); ++i)
      it.data()[i] = warped.image.data()[i] - i1.data()[i];

    du.fill(0.0);
    dv.fill(0.0);

    for (int inner = 0; inner < sp.n_inner; ++inner) {
      // robust weights at u+du, v+dv
      parallel_for(0, H, [&](int z0, int z1) {
        for (int z = z0; z < z1; ++z)
          for (int y = 0; y < W; ++y) {
            double uu = u.at(y, z) + du.at(y, z), vv = v.at(y, z) + dv.at(y, z);
            double uy = y + 1 < W ? u.at(y + 1, z) + du.at(y + 1, z) - uu : 0.0;
            double uz = z + 1 < H ? u.at(y, z + 1) + du.at(y, z + 1) - uu : 0.0;
            double vy = y + 1 < W ? v.at(y + 1, z) + dv.at(y + 1, z) - vv : 0.0;
            double vz = z + 1 < H ? v.at(y, z + 1) + dv.at(y, z + 1) - vv : 0.0;
            phi.at(y, z) = 0.5 / std::sqrt(uy * uy + uz * uz + vy * vy + vz * vz + kPsiEps);
            double r = it.at(y, z) + iy.at(y, z) * du.at(y, z) + iz.at(y, z) * dv.at(y, z);
            psi.at(y, z) = warped.valid.at(y, z) && data_mask.at(y, z)
                               ? 0.5 / std::sqrt(r * r + kPsiEps)
                               : 0.0;
          }
      });
      // red-black SOR on the linearized normal equations
      for (int sweep = 0; sweep < sp.n_sor; ++sweep) {
        for (int color = 0; color < 2; ++color) {
          parallel_for(0, H, [&](int z0, int z1) {
            for (int z = z0; z < z1; ++z)
              for (int y = (z + color) & 1; y < W; y += 2) {
                double wsum = 0.0, su = 0.0, sv_ = 0.0, lu = 0.0, lv = 0.0;
                auto edge = [&](int qy, int qz, double wgt) {
                  wsum += wgt;
                  su += wgt * du.at(qy, qz);
                  sv_ += wgt * dv.at(qy, qz);
                  lu += wgt * (u.at(y, z) - u.at(qy, qz));
                  lv += wgt * (v.at(y, z) - v.at(qy, qz));
                };
                if (y + 1 < W) edge(y + 1, z, phi.at(y, z));
                if (z + 1 < H) edge(y, z + 1, phi.at(y, z));
                if (y > 0) edge(y - 1, z, phi.at(y - 1, z));
                if (z > 0) edge(y, z - 1, phi.at(y, z - 1));
                double pd = psi.at(y, z);
                double a_y = pd * iy.at(y, z), a_z = pd * iz.at(y, z);
                double diag_u = pd * iy.at(y, z) * iy.at(y, z) + reg * wsum + reg * 0.05;
                double diag_v = pd * iz.at(y, z) * iz.at(y, z) + reg * wsum + reg * 0.05;
                double cross = pd * iy.at(y, z) * iz.at(y, z);
                double bu = -a_y * it.at(y, z) - reg * lu;
                double bv = -a_z * it.at(y, z) - reg * lv;
                double nu = (bu - cross * dv.at(y, z) + reg * su) / diag_u;
                du.at(y, z) = (1 - omega) * du.at(y, z) + omega * nu;
                double nv = (bv - cross * du.at(y, z) + reg * sv_) / diag_v;
                dv.at(y, z) = (1 - omega) * dv.at(y, z) + omega * nv;
              }
          });
        }
      }
    }

    for (std::size_t i = 0; i < du.size(); ++i)
      if (!std::isfinite(du.data()[i]) || !std::isfinite(dv.data()[i])) return false;

    // accept the increment only if the true objective does not increase
    double scale = 1.0;
    bool accepted = false;
    for (int tries = 0; tries < 12; ++tries) {
      Grid<double> tu = u, tv = v;
      for (std::size_t i = 0; i < tu.size(); ++i) {
        tu.data()[i] += scale * du.data()[i];
        tv.data()[i] += scale * dv.data()[i];
      }
      double e = refine_objective(i1, i2, data_mask, tu, tv, reg);
      if (e <= energy + 1e-12) {
        u = std::move(tu);
        v = std::move(tv);
        energy = e;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (objective_log) objective_log->push_back(energy);
    if (!accepted) break;  // stationary at this level
  }
  return true;
}

}  // namespace detail

namespace detail {

inline Grid<double> upscale_component(const Grid<double>& g, int w, int h, double scale) {
  GrayImage tmp(g.width(), g.height());
  for (std::size_t i = 0; i < g.size(); ++i) tmp.data()[i] = g.data()[i];
  GrayImage r = resample_bilinear(tmp, w, h);
  Grid<double> out(w, h);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = r.data()[i] * scale;
  return out;
}

}  // namespace detail

// Variational sub-pixel refinement in residual form: i2 is warped once by
// `init`, the residual flow is minimized over the full coarse-to-fine pyramid
// built from the solver parameters, and the result is composed with init at
// the finest level (the level whose scale matches it). Invalid init entries
// act as zero. On divergence the last finite iterate is returned with the
// `diverged` flag set.
inline RefineResult refine_subpixel(const GrayImage& i1, const GrayImage& i2,
                                    const FlowField& init, const SolverParams& sp,
                                    RefineDiagnostics* diag = nullptr) {
  if (!i1.same_dims(i2) || init.width() != i1.width() || init.height() != i1.height())
    throw std::invalid_argument("refine_subpixel: dimension mismatch");

  FlowField base(i1.width(), i1.height());
  base.u = init.u;
  base.v = init.v;
  for (std::size_t i = 0; i < base.u.size(); ++i)
    if (!init.valid.data()[i] || !std::isfinite(base.u.data()[i]) ||
        !std::isfinite(base.v.data()[i])) {
      base.u.data()[i] = 0.0;
      base.v.data()[i] = 0.0;
    }

  WarpResult warped = warp(i2, base);

  Pyramid<GrayImage> py1 = build_pyramid(i1, sp.ratio, sp.coarsest_width);
  Pyramid<GrayImage> py2 = build_pyramid(warped.image, sp.ratio, sp.coarsest_width);

  // validity of the pre-warped data, tracked through the pyramid
  GrayImage valid0(i1.width(), i1.height());
  for (std::size_t i = 0; i < valid0.size(); ++i) valid0.data()[i] = warped.valid.data()[i];
  Pyramid<GrayImage> pyv = build_pyramid(valid0, sp.ratio, sp.coarsest_width);

  RefineResult res;
  const int L = py1.num_levels();
  Grid<double> u(py1.levels[L - 1].width(), py1.levels[L - 1].height(), 0.0);
  Grid<double> v = u;
  for (int level = L - 1; level >= 0; --level) {
    const GrayImage& l1 = py1.levels[level];
    if (u.width() != l1.width() || u.height() != l1.height()) {
      double su = static_cast<double>(l1.width()) / u.width();
      double sv = static_cast<double>(l1.height()) / u.height();
      u = detail::upscale_component(u, l1.width(), l1.height(), su);
      v = detail::upscale_component(v, l1.width(), l1.height(), sv);
    }
    Grid<uint8_t> mask(l1.width(), l1.height(), 1);
    for (std::size_t i = 0; i < mask.size(); ++i)
      mask.data()[i] = pyv.levels[level].data()[i] > 0.999 ? 1 : 0;
    std::vector<double>* log = nullptr;
    if (diag) {
      diag->levels.push_back({level, {}});
      log = &diag->levels.back().objective;
    }
    Grid<double> last_u = u, last_v = v;
    if (!detail::refine_level(detail::presmooth(l1), detail::presmooth(py2.levels[level]), mask,
                              u, v, sp, log)) {
      res.diverged = true;
      u = std::move(last_u);
      v = std::move(last_v);
      break;
    }
  }

  if (u.width() != i1.width() || u.height() != i1.height()) {
    double su = static_cast<double>(i1.width()) / u.width();
    double sv = static_cast<double>(i1.height()) / u.height();
    u = detail::upscale_component(u, i1.width(), i1.height(), su);
    v = detail::upscale_component(v, i1.width(), i1.height(), sv);
  }
  res.flow = FlowField(i1.width(), i1.height());
  for (std::size_t i = 0; i < u.size(); ++i) {
    res.flow.u.data()[i] = base.u.data()[i] + u.data()[i];
    res.flow.v.data()[i] = base.v.data()[i] + v.data()[i];
  }
  return res;
}

// Full pipeline: dense SIFT pyramids -> integer coarse-to-fine match ->
// variational sub-pixel refinement on image brightness.
struct FlowPipelineParams {
  SiftParams sift{};
  SolverParams solver = SolverParams::optimal();
  EnergyParams energy{};      // d1 <= 0: derived per level
  int window_radius = 4;
};

inline RefineResult sift_flow(const GrayImage& i1, const GrayImage& i2,
                              const FlowPipelineParams& p = {},
                              DiscreteMatchDiagnostics* match_diag = nullptr,
                              RefineDiagnostics* refine_diag = nullptr) {
  if (!i1.same_dims(i2)) throw std::invalid_argument("sift_flow: dimension mismatch");
  Pyramid<GrayImage> py1 = build_pyramid(i1, p.solver.ratio, p.solver.coarsest_width);
  Pyramid<GrayImage> py2 = build_pyramid(i2, p.solver.ratio, p.solver.coarsest_width);
  Pyramid<FeatureImage> f1 = build_feature_pyramid(py1, p.sift);
  Pyramid<FeatureImage> f2 = build_feature_pyramid(py2, p.sift);
  FlowField integer = discrete_match(f1, f2, p.energy,
                                     std::vector<int>{p.window_radius}, match_diag);
  return refine_subpixel(i1, i2, integer, p.solver, refine_diag);
}

}  // namespace tsflow
