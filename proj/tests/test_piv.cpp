#include <gtest/gtest.h>

#include <random>

#include "tsflow/piv.hpp"
#include "tsflow/synth.hpp"

using namespace tsflow;

namespace {

Grid<double> random_ia(int m, unsigned seed) {
  Grid<double> g(m, m);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = u(rng);
  return g;
}

Grid<double> cyclic_shift(const Grid<double>& a, int du, int dv) {
  int m = a.width();
  Grid<double> b(m, m);
  for (int z = 0; z < m; ++z)
    for (int y = 0; y < m; ++y)
      b.at(y, z) = a.at(((y - du) % m + m) % m, ((z - dv) % m + m) % m);
  return b;
}

// Direct circular correlation, the brute-force oracle for the DFT variant.
Grid<double> circular_dcc_oracle(const Grid<double>& a_in, const Grid<double>& b_in) {
  int m = a_in.width();
  Grid<double> a = a_in, b = b_in;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a.data()[i];
    mb += b.data()[i];
  }
  ma /= a.size();
  mb /= b.size();
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.data()[i] -= ma;
    b.data()[i] -= mb;
  }
  Grid<double> c(m, m);  // lag indices 0..m-1
  for (int dv = 0; dv < m; ++dv)
    for (int du = 0; du < m; ++du) {
      double s = 0.0;
      for (int z = 0; z < m; ++z)
        for (int y = 0; y < m; ++y) s += a.at(y, z) * b.at((y + du) % m, (z + dv) % m);
      c.at(du, dv) = s;
    }
  return c;
}

GrayImage speckle(int w, int h, unsigned seed) {
  SpeckleSpec spec;
  spec.width = w;
  spec.height = h;
  spec.seed = seed;
  return gen_speckle(spec);
}

}  // namespace

TEST(Dcc, AutocorrelationPeaksAtZeroLag) {
  Grid<double> a = random_ia(16, 1);
  CorrelationPlane p = dcc(a, a);
  ASSERT_TRUE(p.has_peak);
  EXPECT_EQ(p.peak_du, 0);
  EXPECT_EQ(p.peak_dv, 0);
}

TEST(Dcc, CyclicShiftPeak) {
  Grid<double> a = random_ia(16, 2);
  Grid<double> b = cyclic_shift(a, 2, 1);
  CorrelationPlane p = dcc(a, b);
  ASSERT_TRUE(p.has_peak);
  EXPECT_EQ(p.peak_du, 2);
  EXPECT_EQ(p.peak_dv, 1);
}

TEST(Dcc, ConstantPairFlagsNoPeak) {
  Grid<double> a(8, 8, 0.4), b(8, 8, 0.9);
  CorrelationPlane p = dcc(a, b);
  EXPECT_FALSE(p.has_peak);
  for (std::size_t i = 0; i < p.values.size(); ++i) ASSERT_NEAR(p.values.data()[i], 0.0, 1e-20);
}

TEST(Dcc, SizeMismatchThrows) {
  EXPECT_THROW(dcc(random_ia(8, 3), random_ia(16, 4)), std::invalid_argument);
}

TEST(DftCorrelate, MatchesCircularOracle) {
  for (unsigned seed = 0; seed < 10; ++seed) {
    Grid<double> a = random_ia(16, 100 + seed);
    Grid<double> b = random_ia(16, 200 + seed);
    CorrelationPlane p = dft_correlate(a, b);
    Grid<double> oracle = circular_dcc_oracle(a, b);
    double scale = 0.0;
    for (std::size_t i = 0; i < oracle.size(); ++i)
      scale = std::max(scale, std::fabs(oracle.data()[i]));
    for (int dv = p.lag_min_v; dv < p.lag_min_v + 16; ++dv)
      for (int du = p.lag_min_u; du < p.lag_min_u + 16; ++du) {
        double expect = oracle.at((du % 16 + 16) % 16, (dv % 16 + 16) % 16);
        ASSERT_NEAR(p.at_lag(du, dv), expect, 1e-9 * scale);
      }
  }
}

TEST(DftCorrelate, PeakMatchesDccOnShiftedSpeckle) {
  for (unsigned seed = 0; seed < 100; ++seed) {
    Grid<double> a = random_ia(16, 300 + seed);
    std::mt19937_64 rng(seed);
    int du = int(rng() % 9) - 4, dv = int(rng() % 9) - 4;
    Grid<double> b = cyclic_shift(a, du, dv);
    CorrelationPlane pd = dcc(a, b);
    CorrelationPlane pf = dft_correlate(a, b);
    ASSERT_TRUE(pd.has_peak && pf.has_peak);
    ASSERT_EQ(pf.peak_du, pd.peak_du) << "seed " << seed;
    ASSERT_EQ(pf.peak_dv, pd.peak_dv) << "seed " << seed;
    ASSERT_EQ(pf.peak_du, du);
    ASSERT_EQ(pf.peak_dv, dv);
  }
}

TEST(DftCorrelate, SinusoidWrapsCircularly) {
  const int m = 16;
  Grid<double> a(m, m), b(m, m);
  // two-axis pattern so the circular peak is unique
  for (int z = 0; z < m; ++z)
    for (int y = 0; y < m; ++y) {
      a.at(y, z) = std::sin(2.0 * std::numbers::pi * y / m) +
                   std::sin(2.0 * std::numbers::pi * z / m);
      b.at(y, z) = std::sin(2.0 * std::numbers::pi * (y - 3) / m) +
                   std::sin(2.0 * std::numbers::pi * z / m);  // shifted by +3
    }
  CorrelationPlane p = dft_correlate(a, b);
  ASSERT_TRUE(p.has_peak);
  EXPECT_EQ(p.peak_du, 3);
  EXPECT_EQ(p.peak_dv, 0);
}

TEST(SubpixelPeak, SymmetricPeakGivesZero) {
  CorrelationPlane p;
  p.values = Grid<double>(5, 5, 0.1);
  p.lag_min_u = -2;
  p.lag_min_v = -2;
  p.values.at(2, 2) = 1.0;
  p.values.at(1, 2) = 0.5;
  p.values.at(3, 2) = 0.5;
  p.values.at(2, 1) = 0.4;
  p.values.at(2, 3) = 0.4;
  p.has_peak = true;
  p.peak_du = 0;
  p.peak_dv = 0;
  p.peak_value = 1.0;
  SubpixelPeak s = subpixel_peak(p);
  ASSERT_TRUE(s.ok);
  EXPECT_DOUBLE_EQ(s.du, 0.0);
  EXPECT_DOUBLE_EQ(s.dv, 0.0);
}

TEST(SubpixelPeak, RecoversSampledGaussianCenter) {
  const double cu = 0.3, cv = -0.2, sigma = 1.1;
  CorrelationPlane p;
  p.values = Grid<double>(7, 7);
  p.lag_min_u = -3;
  p.lag_min_v = -3;
  for (int dv = -3; dv <= 3; ++dv)
    for (int du = -3; du <= 3; ++du)
      p.values.at(du + 3, dv + 3) =
          std::exp(-((du - cu) * (du - cu) + (dv - cv) * (dv - cv)) / (2 * sigma * sigma));
  p.has_peak = true;
  p.peak_du = 0;
  p.peak_dv = 0;
  p.peak_value = p.values.at(3, 3);
  SubpixelPeak s = subpixel_peak(p);
  ASSERT_TRUE(s.ok);
  EXPECT_NEAR(s.du, cu, 1e-6);
  EXPECT_NEAR(s.dv, cv, 1e-6);
}

TEST(SubpixelPeak, BorderPeakGivesNaN) {
  CorrelationPlane p;
  p.values = Grid<double>(5, 5, 0.0);
  p.lag_min_u = -2;
  p.lag_min_v = -2;
  p.values.at(0, 2) = 1.0;
  p.has_peak = true;
  p.peak_du = -2;
  p.peak_dv = 0;
  p.peak_value = 1.0;
  SubpixelPeak s = subpixel_peak(p);
  EXPECT_FALSE(s.ok);
  EXPECT_TRUE(std::isnan(s.du));
}

TEST(GridPositions, PointCountFormulaMatchesPaperGrid) {
  // 801 x 1861 analysis grid
  auto count = [](int dim, int ia, double overlap) {
    return static_cast<int>(std::floor((dim - ia) / (ia * (1.0 - overlap)))) + 1;
  };
  EXPECT_NEAR(count(801, 32, 0.5) * count(1861, 32, 0.5), 5634, 2);     // 2p64
  EXPECT_NEAR(count(801, 4, 0.5) * count(1861, 4, 0.5), 370670, 2);     // 2p8
  EXPECT_NEAR(count(801, 2, 0.5) * count(1861, 2, 0.5), 1487999, 2);    // 4p16
}

TEST(Multipass, RecoversIntegerShift) {
  SpeckleSpec spec;
  spec.width = 192;
  spec.height = 160;
  spec.seed = 40;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = spec.width;
  fs.height = spec.height;
  fs.shift_u = 3;
  fs.shift_v = 2;
  RenderedPair pair = render_pair(spec, fs);
  PivResult r = multipass(pair.frame1, pair.frame2, PassSchedule::preset("2p64"));
  ASSERT_GT(r.n_points, 0);
  EXPECT_EQ(r.nan_fraction(), 0.0);
  double mae_u = 0, mae_v = 0;
  for (int iz = 0; iz < r.u.height(); ++iz)
    for (int iy = 0; iy < r.u.width(); ++iy) {
      mae_u += std::fabs(r.u.at(iy, iz) - 3.0);
      mae_v += std::fabs(r.v.at(iy, iz) - 2.0);
    }
  EXPECT_LT(mae_u / r.n_points, 0.05);
  EXPECT_LT(mae_v / r.n_points, 0.05);
}

TEST(Multipass, DisplacementAntisymmetry) {
  SpeckleSpec spec;
  spec.width = 160;
  spec.height = 128;
  spec.seed = 41;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = spec.width;
  fs.height = spec.height;
  fs.shift_u = 2;
  fs.shift_v = -1;
  RenderedPair pair = render_pair(spec, fs);
  PivResult fwd = multipass(pair.frame1, pair.frame2, PassSchedule::preset("2p64"));
  PivResult bwd = multipass(pair.frame2, pair.frame1, PassSchedule::preset("2p64"));
  for (int iz = 1; iz + 1 < fwd.u.height(); ++iz)
    for (int iy = 1; iy + 1 < fwd.u.width(); ++iy) {
      if (fwd.nan_mask.at(iy, iz) || bwd.nan_mask.at(iy, iz)) continue;
      ASSERT_NEAR(fwd.u.at(iy, iz), -bwd.u.at(iy, iz), 0.1);
      ASSERT_NEAR(fwd.v.at(iy, iz), -bwd.v.at(iy, iz), 0.1);
    }
}

TEST(Multipass, UniformTextureGoesNaN) {
  GrayImage flat1(96, 96, 0.5), flat2(96, 96, 0.5);
  PivResult r = multipass(flat1, flat2, PassSchedule::preset("2p64"));
  EXPECT_EQ(r.nan_fraction(), 1.0);
}

TEST(Multipass, TinyFinalIaFloodsNaN) {
  // sub-pixel displacement with 2 px interrogation areas: the correlation
  // plane is too small to carry an interior peak
  SpeckleSpec spec;
  spec.width = 96;
  spec.height = 96;
  spec.seed = 42;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = spec.width;
  fs.height = spec.height;
  fs.shift_u = 0.3;
  fs.shift_v = -0.2;
  RenderedPair pair = render_pair(spec, fs);
  PivResult r = multipass(pair.frame1, pair.frame2, PassSchedule::preset("4p16"));
  EXPECT_GE(r.nan_fraction(), 0.9);
}

TEST(Multipass, NanFractionMonotoneInFinalIaSize) {
  SpeckleSpec spec;
  spec.width = 96;
  spec.height = 96;
  spec.seed = 43;
  spec.dot_density = 0.002;  // sparse texture
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = spec.width;
  fs.height = spec.height;
  fs.shift_u = 0.4;
  fs.shift_v = 0.1;
  RenderedPair pair = render_pair(spec, fs);
  double prev = -1.0;
  for (int final_ia : {16, 8, 4, 2}) {
    PassSchedule s;
    s.sizes = {32, final_ia};
    PivResult r = multipass(pair.frame1, pair.frame2, s);
    EXPECT_GE(r.nan_fraction(), prev - 1e-12);
    prev = r.nan_fraction();
  }
}

TEST(Multipass, ErrorPaths) {
  GrayImage a(32, 32, 0.5), b(48, 48, 0.5);
  EXPECT_THROW(multipass(a, b, PassSchedule::preset("2p8")), std::invalid_argument);
  EXPECT_THROW(multipass(a, a, PassSchedule::preset("2p64")), std::invalid_argument);
  PassSchedule bad;
  bad.sizes = {16, 16};
  EXPECT_THROW(multipass(a, a, bad), std::invalid_argument);
}

TEST(ValidateVectors, RulesMarkNaN) {
  PivResult r;
  r.grid_y = {0, 1, 2, 3};
  r.grid_z = {0};
  r.u = Grid<double>(4, 1, 1.0);
  r.v = Grid<double>(4, 1, 1.0);
  r.nan_mask = Grid<uint8_t>(4, 1, 0);
  r.n_points = 4;
  std::vector<VectorDiagnostics> d(4);
  for (auto& x : d) {
    x.variance = 1.0;
    x.peak_value = 10.0;
    x.second_peak = 1.0;
    x.subpixel_ok = true;
    x.ia_size = 16;
    x.displacement_u = 1.0;
    x.displacement_v = 1.0;
  }
  d[0].variance = 0.0;            // no texture
  d[1].second_peak = 9.5;         // weak peak ratio
  d[2].border_peak = true;        // border peak
  d[3].displacement_u = 9.0;      // beyond IA/2
  validate_vectors(r, d);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(r.nan_mask.at(i, 0), 1) << i;
    EXPECT_TRUE(std::isnan(r.u.at(i, 0)));
  }
}

TEST(Multipass, ThreadCountDoesNotChangeResult) {
  GrayImage a = speckle(128, 96, 44);
  GrayImage b = speckle(128, 96, 45);
  set_num_threads(1);
  PivResult r1 = multipass(a, b, PassSchedule::preset("4p32"));
  set_num_threads(8);
  PivResult r8 = multipass(a, b, PassSchedule::preset("4p32"));
  set_num_threads(0);
  ASSERT_EQ(r1.u.width(), r8.u.width());
  for (std::size_t i = 0; i < r1.u.size(); ++i) {
    if (std::isnan(r1.u.data()[i])) {
      ASSERT_TRUE(std::isnan(r8.u.data()[i]));
    } else {
      ASSERT_EQ(r1.u.data()[i], r8.u.data()[i]);
      ASSERT_EQ(r1.v.data()[i], r8.v.data()[i]);
    }
  }
}
