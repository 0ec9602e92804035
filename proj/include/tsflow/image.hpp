#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "tsflow/grid.hpp"
#include "tsflow/parallel.hpp"

namespace tsflow {

// Inclusive-center rectangle: crop output is (2*half_width+1) x (2*half_height+1).
struct RegionOfInterest {
  int center_y = 0;
  int center_z = 0;
  int half_width = 0;
  int half_height = 0;

  int out_width() const { return 2 * half_width + 1; }
  int out_height() const { return 2 * half_height + 1; }

  bool inside(int img_width, int img_height) const {
    return half_width >= 0 && half_height >= 0 &&
           center_y - half_width >= 0 && center_y + half_width < img_width &&
           center_z - half_height >= 0 && center_z + half_height < img_height;
  }
};

inline GrayImage crop(const GrayImage& img, const RegionOfInterest& roi) {
  if (!roi.inside(img.width(), img.height()))
    throw std::invalid_argument("crop: ROI out of image bounds");
  GrayImage out(roi.out_width(), roi.out_height());
  int y0 = roi.center_y - roi.half_width;
  int z0 = roi.center_z - roi.half_height;
  for (int z = 0; z < out.height(); ++z) {
    const double* src = img.row(z0 + z) + y0;
    std::copy(src, src + out.width(), out.row(z));
  }
  return out;
}

// Bilinear sample with clamp-to-border; exact on lattice points.
inline double sample_bilinear(const GrayImage& img, double y, double z) {
  if (!std::isfinite(y) || !std::isfinite(z))
    throw std::invalid_argument("sample_bilinear: non-finite coordinates");
  y = std::clamp(y, 0.0, static_cast<double>(img.width() - 1));
  z = std::clamp(z, 0.0, static_cast<double>(img.height() - 1));
  int y0 = static_cast<int>(y);
  int z0 = static_cast<int>(z);
  int y1 = std::min(y0 + 1, img.width() - 1);
  int z1 = std::min(z0 + 1, img.height() - 1);
  double fy = y - y0;
  double fz = z - z0;
  double top = img.at(y0, z0) * (1.0 - fy) + img.at(y1, z0) * fy;
  double bot = img.at(y0, z1) * (1.0 - fy) + img.at(y1, z1) * fy;
  return top * (1.0 - fz) + bot * fz;
}

// Catmull-Rom bicubic sample with clamp-to-border; exact on lattice points.
// Used where interpolation fidelity matters (sub-pixel warping of textured
// content); the plain warp operation stays bilinear.
inline double sample_bicubic(const GrayImage& img, double y, double z) {
  if (!std::isfinite(y) || !std::isfinite(z))
    throw std::invalid_argument("sample_bicubic: non-finite coordinates");
  y = std::clamp(y, 0.0, static_cast<double>(img.width() - 1));
  z = std::clamp(z, 0.0, static_cast<double>(img.height() - 1));
  int y0 = static_cast<int>(y);
  int z0 = static_cast<int>(z);
  double fy = y - y0, fz = z - z0;
  auto wgt = [](double t, double w[4]) {
    // Catmull-Rom (a = -0.5)
    double t2 = t * t, t3 = t2 * t;
    w[0] = -0.5 * t3 + t2 - 0.5 * t;
    w[1] = 1.5 * t3 - 2.5 * t2 + 1.0;
    w[2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
    w[3] = 0.5 * t3 - 0.5 * t2;
  };
  double wy[4], wz[4];
  wgt(fy, wy);
  wgt(fz, wz);
  double acc = 0.0;
  for (int j = -1; j <= 2; ++j) {
    int zz = std::clamp(z0 + j, 0, img.height() - 1);
    double row = 0.0;
    for (int i = -1; i <= 2; ++i) {
      int yy = std::clamp(y0 + i, 0, img.width() - 1);
      row += wy[i + 1] * img.at(yy, zz);
    }
    acc += wz[j + 1] * row;
  }
  return acc;
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[i + radius] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

}  // namespace detail

// Separable Gaussian blur, clamp border.
inline GrayImage gaussian_blur(const GrayImage& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  std::vector<double> k = detail::gaussian_kernel(sigma);
  int radius = (static_cast<int>(k.size()) - 1) / 2;
  GrayImage tmp(img.width(), img.height());
  GrayImage out(img.width(), img.height());
  parallel_for(0, img.height(), [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < img.width(); ++y) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          int yy = std::clamp(y + i, 0, img.width() - 1);
          acc += k[i + radius] * img.at(yy, z);
        }
        tmp.at(y, z) = acc;
      }
  });
  parallel_for(0, img.height(), [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < img.width(); ++y) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          int zz = std::clamp(z + i, 0, img.height() - 1);
          acc += k[i + radius] * img.at(y, zz);
        }
        out.at(y, z) = acc;
      }
  });
  return out;
}

// Bilinear resample to the given dimensions (pixel-center alignment).
inline GrayImage resample_bilinear(const GrayImage& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw std::invalid_argument("resample: bad output dims");
  GrayImage out(out_w, out_h);
  double sy = static_cast<double>(img.width()) / out_w;
  double sz = static_cast<double>(img.height()) / out_h;
  parallel_for(0, out_h, [&](int z0, int z1) {
    for (int z = z0; z < z1; ++z)
      for (int y = 0; y < out_w; ++y) {
        double src_y = (y + 0.5) * sy - 0.5;
        double src_z = (z + 0.5) * sz - 0.5;
        out.at(y, z) = sample_bilinear(img, std::clamp(src_y, 0.0, double(img.width() - 1)),
                                       std::clamp(src_z, 0.0, double(img.height() - 1)));
      }
  });
  return out;
}

template <typename LevelT>
struct Pyramid {
  std::vector<LevelT> levels;  // level 0 finest
  double ratio = 0.5;
  int coarsest_width = 40;

  int num_levels() const { return static_cast<int>(levels.size()); }
};

// Level k dimensions are round(original * ratio^k); levels are kept while the
// unrounded width stays >= coarsest_width. An image already narrower than
// coarsest_width yields a single-level pyramid.
inline int pyramid_level_count(int width, double ratio, int coarsest_width) {
  int n = 1;
  while (width * std::pow(ratio, n) >= static_cast<double>(coarsest_width)) ++n;
  return n;
}

inline Pyramid<GrayImage> build_pyramid(const GrayImage& img, double ratio, int coarsest_width) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("build_pyramid: ratio must be in (0,1)");
  if (coarsest_width < 4) throw std::invalid_argument("build_pyramid: coarsest_width must be >= 4");
  Pyramid<GrayImage> pyr;
  pyr.ratio = ratio;
  pyr.coarsest_width = coarsest_width;
  int n = pyramid_level_count(img.width(), ratio, coarsest_width);
  pyr.levels.reserve(n);
  pyr.levels.push_back(img);
  double sigma = 0.8 * std::sqrt(1.0 / (ratio * ratio) - 1.0);
  for (int k = 1; k < n; ++k) {
    int w = std::max(1, static_cast<int>(std::lround(img.width() * std::pow(ratio, k))));
    int h = std::max(1, static_cast<int>(std::lround(img.height() * std::pow(ratio, k))));
    pyr.levels.push_back(resample_bilinear(gaussian_blur(pyr.levels.back(), sigma), w, h));
  }
  return pyr;
}

}  // namespace tsflow
