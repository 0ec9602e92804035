#pragma once

#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "tsflow/grid.hpp"
#include "tsflow/image.hpp"
#include "tsflow/parallel.hpp"

namespace tsflow {

struct SiftParams {
  int cell_size = 4;        // px per histogram cell
  int grid_cells = 4;       // cells per axis
  int orientation_bins = 8;
  double clamp = 0.2;       // component clamp after the first normalization

  int dim() const { return grid_cells * grid_cells * orientation_bins; }
  int footprint() const { return cell_size * grid_cells; }
};

// One descriptor per pixel, row-major, components contiguous per pixel.
class FeatureImage {
 public:
  FeatureImage() = default;
  FeatureImage(int width, int height, int dim)
      : width_(width), height_(height), dim_(dim),
        data_(static_cast<std::size_t>(width) * height * dim, 0.0) {
    if (width < 1 || height < 1 || dim < 1)
      throw std::invalid_argument("FeatureImage: bad dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int dim() const { return dim_; }

  double* descriptor(int y, int z) {
    return data_.data() + (static_cast<std::size_t>(z) * width_ + y) * dim_;
  }
  const double* descriptor(int y, int z) const {
    return data_.data() + (static_cast<std::size_t>(z) * width_ + y) * dim_;
  }

  bool same_dims(const FeatureImage& o) const {
    return width_ == o.width_ && height_ == o.height_ && dim_ == o.dim_;
  }

  friend bool operator==(const FeatureImage& a, const FeatureImage& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.dim_ == b.dim_ &&
           a.data_ == b.data_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  int dim_ = 0;
  std::vector<double> data_;
};

// Mean L1 descriptor magnitude; used to scale the data truncation threshold.
inline double mean_l1_magnitude(const FeatureImage& f) {
  double total = 0.0;
  for (int z = 0; z < f.height(); ++z)
    for (int y = 0; y < f.width(); ++y) {
      const double* d = f.descriptor(y, z);
      double s = 0.0;
      for (int k = 0; k < f.dim(); ++k) s += d[k];
      total += s;
    }
  return total / (static_cast<double>(f.width()) * f.height());
}

// Dense SIFT at fixed scale and fixed orientation (no dominant-orientation
// assignment: descriptors must stay translation-comparable for matching).
// Gradients by centered differences; per-cell orientation histograms with
// bilinear vote sharing; L2-normalize, clamp, renormalize. Pixels whose
// footprint carries essentially no gradient energy get the exact zero vector.
inline FeatureImage dense_sift(const GrayImage& img, const SiftParams& p = {}) {
  const int fp = p.footprint();
  if (img.width() < fp || img.height() < fp)
    throw std::invalid_argument("dense_sift: image smaller than descriptor footprint");
  const int W = img.width(), H = img.height();
  const int B = p.orientation_bins;
  const double two_pi = 2.0 * std::numbers::pi;

  // Per-bin magnitude maps with soft orientation assignment.
  std::vector<Grid<double>> bins(B, Grid<double>(W, H, 0.0));
  Grid<double> energy(W, H, 0.0);  // squared gradient magnitude
  parallel_for(0, H, [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < W; ++y) {
        int ym = std::max(y - 1, 0), yp = std::min(y + 1, W - 1);
        int zm = std::max(z - 1, 0), zp = std::min(z + 1, H - 1);
        double gy = 0.5 * (img.at(yp, z) - img.at(ym, z));
        double gz = 0.5 * (img.at(y, zp) - img.at(y, zm));
        double m2 = gy * gy + gz * gz;
        energy.at(y, z) = m2;
        if (m2 <= 0.0) continue;
        double m = std::sqrt(m2);
        double theta = std::atan2(gz, gy);
        if (theta < 0.0) theta += two_pi;
        double t = theta * B / two_pi;
        int b0 = static_cast<int>(t) % B;
        double frac = t - std::floor(t);
        bins[b0].at(y, z) += m * (1.0 - frac);
        bins[(b0 + 1) % B].at(y, z) += m * frac;
      }
  });

  // Spatial tent aggregation, separable, zero beyond the image border.
  const int cs = p.cell_size;
  auto tent_filter = [&](const Grid<double>& src) {
    Grid<double> tmp(W, H, 0.0), out(W, H, 0.0);
    parallel_for(0, H, [&](int z0, int z1) {
      for (int z = z0; z < z1; ++z)
        for (int y = 0; y < W; ++y) {
          double acc = 0.0;
          for (int d = -(cs - 1); d <= cs - 1; ++d) {
            int yy = y + d;
            if (yy < 0 || yy >= W) continue;
            acc += (1.0 - std::abs(d) / static_cast<double>(cs)) * src.at(yy, z);
          }
          tmp.at(y, z) = acc;
        }
    });
    parallel_for(0, H, [&](int z0, int z1) {
      for (int z = z0; z < z1; ++z)
        for (int y = 0; y < W; ++y) {
          double acc = 0.0;
          for (int d = -(cs - 1); d <= cs - 1; ++d) {
            int zz = z + d;
            if (zz < 0 || zz >= H) continue;
            acc += (1.0 - std::abs(d) / static_cast<double>(cs)) * tmp.at(y, zz);
          }
          out.at(y, z) = acc;
        }
    });
    return out;
  };
  std::vector<Grid<double>> cellmaps;
  cellmaps.reserve(B);
  for (int b = 0; b < B; ++b) cellmaps.push_back(tent_filter(bins[b]));

  // Footprint gradient energy via summed-area table.
  Grid<double> sat(W + 1, H + 1, 0.0);
  for (int z = 0; z < H; ++z)
    for (int y = 0; y < W; ++y)
      sat.at(y + 1, z + 1) = energy.at(y, z) + sat.at(y, z + 1) + sat.at(y + 1, z) - sat.at(y, z);
  const int half = fp / 2;
  auto footprint_energy = [&](int y, int z) {
    int y0 = std::max(y - half, 0), z0 = std::max(z - half, 0);
    int y1 = std::min(y + half, W - 1), z1 = std::min(z + half, H - 1);
    return sat.at(y1 + 1, z1 + 1) - sat.at(y0, z1 + 1) - sat.at(y1 + 1, z0) + sat.at(y0, z0);
  };

  FeatureImage feat(W, H, p.dim());
  const int G = p.grid_cells;
  const int base = ((G - 1) * cs) / 2;  // symmetric integer cell offsets for the defaults
  parallel_for(0, H, [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < W; ++y) {
        double* d = feat.descriptor(y, z);
        if (footprint_energy(y, z) < 1e-12) continue;  // stays exactly zero
        int k = 0;
        for (int cz = 0; cz < G; ++cz)
          for (int cy = 0; cy < G; ++cy) {
            int sy = y + cy * cs - base;
            int sz = z + cz * cs - base;
            bool inside = sy >= 0 && sy < W && sz >= 0 && sz < H;
            for (int b = 0; b < B; ++b, ++k) d[k] = inside ? cellmaps[b].at(sy, sz) : 0.0;
          }
        double norm2 = 0.0;
        for (int i = 0; i < p.dim(); ++i) norm2 += d[i] * d[i];
        if (norm2 <= 0.0) continue;
        double inv = 1.0 / std::sqrt(norm2);
        for (int i = 0; i < p.dim(); ++i) d[i] = std::min(d[i] * inv, p.clamp);
        norm2 = 0.0;
        for (int i = 0; i < p.dim(); ++i) norm2 += d[i] * d[i];
        inv = 1.0 / std::sqrt(norm2);
        for (int i = 0; i < p.dim(); ++i) d[i] *= inv;
      }
  });
  return feat;
}

// Descriptors at every level come from the downsampled image, keeping
// features consistent with level geometry.
inline Pyramid<FeatureImage> build_feature_pyramid(const Pyramid<GrayImage>& imgs,
                                                   const SiftParams& p = {}) {
  Pyramid<FeatureImage> out;
  out.ratio = imgs.ratio;
  out.coarsest_width = imgs.coarsest_width;
  out.levels.reserve(imgs.levels.size());
  for (const GrayImage& im : imgs.levels) {
    if (im.width() < p.footprint() || im.height() < p.footprint()) break;
    out.levels.push_back(dense_sift(im, p));
  }
  if (out.levels.empty()) throw std::invalid_argument("build_feature_pyramid: image too small");
  return out;
}

}  // namespace tsflow
