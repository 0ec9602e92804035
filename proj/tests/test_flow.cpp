#include <gtest/gtest.h>

#include <random>

#include "tsflow/flow.hpp"
#include "tsflow/synth.hpp"

using namespace tsflow;

namespace {

FeatureImage random_features(int w, int h, int dim, unsigned seed) {
  FeatureImage f(w, h, dim);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int z = 0; z < h; ++z)
    for (int y = 0; y < w; ++y)
      for (int k = 0; k < dim; ++k) f.descriptor(y, z)[k] = u(rng);
  return f;
}

Pyramid<FeatureImage> single_level(const FeatureImage& f) {
  Pyramid<FeatureImage> p;
  p.levels.push_back(f);
  return p;
}

FlowField constant_flow(int w, int h, double u, double v) {
  FlowField f(w, h);
  f.u.fill(u);
  f.v.fill(v);
  return f;
}

// Exhaustive joint minimum over all labelings; labels are window offsets
// around zero. Only viable for tiny grids.
double brute_force_minimum(const FeatureImage& s1, const FeatureImage& s2, int radius,
                           const EnergyParams& ep) {
  const int W = s1.width(), H = s1.height(), n = W * H;
  const int nl = (2 * radius + 1) * (2 * radius + 1);
  std::vector<int> label(n, 0);
  FlowField f(W, H);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    for (int i = 0; i < n; ++i) {
      f.u.data()[i] = label[i] % (2 * radius + 1) - radius;
      f.v.data()[i] = label[i] / (2 * radius + 1) - radius;
    }
    best = std::min(best, sift_flow_energy(s1, s2, f, ep));
    int k = 0;
    while (k < n && ++label[k] == nl) label[k++] = 0;
    if (k == n) break;
  }
  return best;
}

GrayImage speckle(int w, int h, unsigned seed) {
  SpeckleSpec spec;
  spec.width = w;
  spec.height = h;
  spec.seed = seed;
  return gen_speckle(spec);
}

}  // namespace

TEST(SiftFlowEnergy, IdenticalFramesZeroFlowIsZero) {
  FeatureImage s = random_features(6, 5, 8, 1);
  FlowField w = constant_flow(6, 5, 0, 0);
  EXPECT_DOUBLE_EQ(sift_flow_energy(s, s, w, {1.0, 1.0, 0.5, 0.5}), 0.0);
}

TEST(SiftFlowEnergy, ShiftedGridMatchesHandEvaluation) {
  // s2 holds the content of s1 moved right by one column, so w = (1,0)
  // zeroes the data term wherever the target is in bounds. The last column's
  // target falls outside and contributes the truncation value d1.
  const int W = 5, H = 4, dim = 4;
  FeatureImage base = random_features(W + 1, H, dim, 2);
  FeatureImage s1(W, H, dim), s2(W, H, dim);
  for (int z = 0; z < H; ++z)
    for (int y = 0; y < W; ++y)
      for (int k = 0; k < dim; ++k) {
        s1.descriptor(y, z)[k] = base.descriptor(y, z)[k];
        s2.descriptor(y, z)[k] = base.descriptor(y, z)[k];
      }
  for (int z = 0; z < H; ++z)
    for (int y = 1; y < W; ++y)
      for (int k = 0; k < dim; ++k) s2.descriptor(y, z)[k] = base.descriptor(y - 1, z)[k];
  EnergyParams ep{3.0, 10.0, 1e-30, 2.0};  // eta ~ 0 isolates data + smoothness
  FlowField w = constant_flow(W, H, 1, 0);
  double e = sift_flow_energy(s1, s2, w, ep);
  // uniform flow: smoothness 0; interior data 0; last column out of bounds
  EXPECT_NEAR(e, H * ep.d1, 1e-9);
}

TEST(SiftFlowEnergy, SinglePixelHasNoEdgeTerm) {
  FeatureImage s1 = random_features(1, 1, 4, 3);
  FeatureImage s2 = random_features(1, 1, 4, 4);
  EnergyParams ep{5.0, 7.0, 0.3, 2.0};
  // in-bounds zero displacement
  double d = 0.0;
  for (int k = 0; k < 4; ++k) d += std::fabs(s1.descriptor(0, 0)[k] - s2.descriptor(0, 0)[k]);
  EXPECT_NEAR(sift_flow_energy(s1, s2, constant_flow(1, 1, 0, 0), ep), std::min(d, ep.d1), 1e-12);
  // out-of-bounds displacement: truncation value plus the eta term
  EXPECT_NEAR(sift_flow_energy(s1, s2, constant_flow(1, 1, 2, -1), ep),
              ep.d1 + ep.eta * 3.0, 1e-12);
}

TEST(SiftFlowEnergy, RejectsNonIntegerFlow) {
  FeatureImage s = random_features(3, 3, 4, 5);
  EXPECT_THROW(sift_flow_energy(s, s, constant_flow(3, 3, 0.5, 0), {1, 1, 1, 1}),
               std::invalid_argument);
}

TEST(DiscreteMatch, IdenticalFramesGiveZeroFlow) {
  GrayImage img = speckle(48, 40, 21);
  Pyramid<GrayImage> pyr = build_pyramid(img, 0.5, 20);
  Pyramid<FeatureImage> f = build_feature_pyramid(pyr);
  FlowField w = discrete_match(f, f, {}, {3});
  for (std::size_t i = 0; i < w.u.size(); ++i) {
    ASSERT_EQ(w.u.data()[i], 0.0);
    ASSERT_EQ(w.v.data()[i], 0.0);
  }
}

TEST(DiscreteMatch, RecoversIntegerShiftExactly) {
  SpeckleSpec spec;
  spec.width = 72;
  spec.height = 64;
  spec.seed = 22;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = spec.width;
  fs.height = spec.height;
  fs.shift_u = 3;
  fs.shift_v = 2;
  RenderedPair pair = render_pair(spec, fs);
  Pyramid<GrayImage> p1 = build_pyramid(pair.frame1, 0.5, 20);
  Pyramid<GrayImage> p2 = build_pyramid(pair.frame2, 0.5, 20);
  Pyramid<FeatureImage> f1 = build_feature_pyramid(p1);
  Pyramid<FeatureImage> f2 = build_feature_pyramid(p2);
  FlowField w = discrete_match(f1, f2, {}, {4});
  for (int z = 20; z < spec.height - 20; ++z)
    for (int y = 20; y < spec.width - 20; ++y) {
      ASSERT_EQ(w.u.at(y, z), 3.0) << y << "," << z;
      ASSERT_EQ(w.v.at(y, z), 2.0) << y << "," << z;
    }
}

TEST(DiscreteMatch, EnergyNeverAboveZeroFlow) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    FeatureImage s1 = random_features(7, 6, 6, 100 + seed);
    FeatureImage s2 = random_features(7, 6, 6, 200 + seed);
    EnergyParams ep{2.0, 3.0, 0.05, 1.0};
    FlowField w = discrete_match(single_level(s1), single_level(s2), ep, {2});
    double e = sift_flow_energy(s1, s2, w, ep);
    double e0 = sift_flow_energy(s1, s2, constant_flow(7, 6, 0, 0), ep);
    EXPECT_LE(e, e0 + 1e-9);
  }
}

TEST(DiscreteMatch, NearExhaustiveOptimumOnTinyGrids) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    int W = 1 + int(rng() % 2), H = 2 + int(rng() % 2);  // up to 2x3
    FeatureImage s1 = random_features(W, H, 4, static_cast<unsigned>(rng()));
    FeatureImage s2 = random_features(W, H, 4, static_cast<unsigned>(rng()));
    EnergyParams ep{1.5, 2.0, 0.02, 0.7};
    FlowField w = discrete_match(single_level(s1), single_level(s2), ep, {1});
    double e = sift_flow_energy(s1, s2, w, ep);
    double opt = brute_force_minimum(s1, s2, 1, ep);
    ASSERT_LE(e, 1.05 * opt + 1e-12) << "trial " << trial;
  }
}

TEST(DiscreteMatch, LevelEnergiesNeverIncreaseUnderRelaxation) {
  GrayImage a = speckle(64, 56, 23);
  SpeckleSpec spec;
  spec.width = 64;
  spec.height = 56;
  spec.seed = 23;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = 64;
  fs.height = 56;
  fs.shift_u = 2;
  fs.shift_v = -1;
  RenderedPair pair = render_pair(spec, fs);
  Pyramid<FeatureImage> f1 = build_feature_pyramid(build_pyramid(pair.frame1, 0.5, 20));
  Pyramid<FeatureImage> f2 = build_feature_pyramid(build_pyramid(pair.frame2, 0.5, 20));
  DiscreteMatchDiagnostics diag;
  discrete_match(f1, f2, {}, {4}, &diag);
  ASSERT_FALSE(diag.levels.empty());
  for (const auto& lv : diag.levels) EXPECT_LE(lv.energy_end, lv.energy_start + 1e-9);
}

TEST(DiscreteMatch, ErrorPaths) {
  FeatureImage s = random_features(4, 4, 4, 41);
  Pyramid<FeatureImage> p = single_level(s);
  EXPECT_THROW(discrete_match(Pyramid<FeatureImage>{}, p, {}, {2}), std::invalid_argument);
  EXPECT_THROW(discrete_match(p, p, {}, {0}), std::invalid_argument);
  Pyramid<FeatureImage> q = single_level(random_features(5, 4, 4, 42));
  EXPECT_THROW(discrete_match(p, q, {}, {2}), std::invalid_argument);
}

TEST(Warp, IdentityAndIntegerShift) {
  GrayImage img = speckle(32, 28, 24);
  WarpResult same = warp(img, constant_flow(32, 28, 0, 0));
  EXPECT_TRUE(same.image == img);
  WarpResult shifted = warp(img, constant_flow(32, 28, 1, 0));
  for (int z = 0; z < 28; ++z)
    for (int y = 0; y < 31; ++y) ASSERT_EQ(shifted.image.at(y, z), img.at(y + 1, z));
  for (int z = 0; z < 28; ++z) EXPECT_EQ(shifted.valid.at(31, z), 0);
}

TEST(Warp, RoundTripSmallSmoothFlow) {
  // gentle contrast and a wide blur keep the scene inside the regime where
  // double bilinear interpolation stays below the stated tolerance
  SpeckleSpec sp;
  sp.width = 64;
  sp.height = 64;
  sp.seed = 25;
  sp.blur_sigma = 2.0;
  sp.background = 0.65;
  sp.foreground = 0.35;
  GrayImage img = gen_speckle(sp);
  FlowField w(64, 64);
  for (int z = 0; z < 64; ++z)
    for (int y = 0; y < 64; ++y) {
      w.u.at(y, z) = 0.25 * std::sin(0.1 * z);
      w.v.at(y, z) = 0.2 * std::cos(0.1 * y);
    }
  FlowField back(64, 64);
  for (std::size_t i = 0; i < back.u.size(); ++i) {
    back.u.data()[i] = -w.u.data()[i];
    back.v.data()[i] = -w.v.data()[i];
  }
  GrayImage twice = warp(warp(img, w).image, back).image;
  double err = 0.0;
  int n = 0;
  for (int z = 4; z < 60; ++z)
    for (int y = 4; y < 60; ++y) {
      err += std::fabs(twice.at(y, z) - img.at(y, z));
      ++n;
    }
  EXPECT_LT(err / n, 0.01);
}

TEST(Refine, IdenticalFramesStayZero) {
  GrayImage img = speckle(48, 48, 26);
  FlowField init = constant_flow(48, 48, 0, 0);
  RefineResult r = refine_subpixel(img, img, init, SolverParams::defaults());
  EXPECT_FALSE(r.diverged);
  for (std::size_t i = 0; i < r.flow.u.size(); ++i) {
    ASSERT_EQ(r.flow.u.data()[i], 0.0);
    ASSERT_EQ(r.flow.v.data()[i], 0.0);
  }
}

TEST(Refine, RecoversSubPixelShift) {
  SpeckleSpec spec;
  spec.width = 96;
  spec.height = 96;
  spec.seed = 27;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = 96;
  fs.height = 96;
  fs.shift_u = 0.3;
  fs.shift_v = -0.7;
  RenderedPair pair = render_pair(spec, fs);
  FlowField init = constant_flow(96, 96, 0, -1);  // integer stage output
  RefineResult r = refine_subpixel(pair.frame1, pair.frame2, init, SolverParams::optimal());
  ASSERT_FALSE(r.diverged);
  double eu = 0, ev = 0;
  int n = 0;
  for (int z = 10; z < 86; ++z)
    for (int y = 10; y < 86; ++y) {
      eu += std::fabs(r.flow.u.at(y, z) - 0.3);
      ev += std::fabs(r.flow.v.at(y, z) + 0.7);
      ++n;
    }
  EXPECT_LT(eu / n, 0.1);
  EXPECT_LT(ev / n, 0.1);
}

TEST(Refine, ObjectiveNonIncreasingPerLevel) {
  SpeckleSpec spec;
  spec.width = 72;
  spec.height = 60;
  spec.seed = 28;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = 72;
  fs.height = 60;
  fs.shift_u = 0.4;
  fs.shift_v = 0.2;
  RenderedPair pair = render_pair(spec, fs);
  RefineDiagnostics diag;
  refine_subpixel(pair.frame1, pair.frame2, constant_flow(72, 60, 0, 0),
                  SolverParams::defaults(), &diag);
  ASSERT_FALSE(diag.levels.empty());
  for (const auto& lv : diag.levels)
    for (std::size_t i = 1; i < lv.objective.size(); ++i)
      ASSERT_LE(lv.objective[i], lv.objective[i - 1] + 1e-9);
}

TEST(Refine, OptimalParamsReachLowerDataResidual) {
  // synthetic twist sequence
  SpeckleSpec spec;
  spec.width = 80;
  spec.height = 120;
  spec.seed = 29;
  FieldSpec fs;
  fs.kind = FieldKind::linear_twist;
  fs.width = 80;
  fs.height = 120;
  fs.geometry.r = 35.0;
  fs.geometry.H = 140.0;
  fs.mm_per_px = 140.0 / 119.0;
  fs.phi_top = 2.5 * fs.mm_per_px / 35.0;  // ~2.5 px at the top
  RenderedPair pair = render_pair(spec, fs);

  auto data_residual = [&](const FlowField& f) {
    WarpResult w = warp(pair.frame2, f);
    double acc = 0.0;
    int n = 0;
    for (int z = 0; z < f.height(); ++z)
      for (int y = 0; y < f.width(); ++y) {
        if (!w.valid.at(y, z)) continue;
        acc += std::fabs(w.image.at(y, z) - pair.frame1.at(y, z));
        ++n;
      }
    return acc / n;
  };

  FlowPipelineParams defaults;
  defaults.solver = SolverParams::defaults();
  FlowPipelineParams optimal;
  optimal.solver = SolverParams::optimal();
  double rd = data_residual(sift_flow(pair.frame1, pair.frame2, defaults).flow);
  double ro = data_residual(sift_flow(pair.frame1, pair.frame2, optimal).flow);
  EXPECT_LE(ro, rd + 1e-12);
}

TEST(Refine, ThreadCountDoesNotChangeResult) {
  SpeckleSpec spec;
  spec.width = 64;
  spec.height = 64;
  spec.seed = 30;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = 64;
  fs.height = 64;
  fs.shift_u = 1.3;
  fs.shift_v = -0.4;
  RenderedPair pair = render_pair(spec, fs);
  set_num_threads(1);
  RefineResult a = sift_flow(pair.frame1, pair.frame2);
  set_num_threads(8);
  RefineResult b = sift_flow(pair.frame1, pair.frame2);
  set_num_threads(0);
  ASSERT_TRUE(a.flow.u == b.flow.u);
  ASSERT_TRUE(a.flow.v == b.flow.v);
}

TEST(Pipeline, GlobalShiftEquivariance) {
  SpeckleSpec spec;
  spec.width = 80;
  spec.height = 72;
  spec.seed = 32;
  FieldSpec fs;
  fs.kind = FieldKind::rigid_shift;
  fs.width = 80;
  fs.height = 72;
  fs.shift_u = 2;
  fs.shift_v = 3;
  RenderedPair pair = render_pair(spec, fs);
  FlowField w = sift_flow(pair.frame1, pair.frame2).flow;
  double err = 0.0;
  int n = 0;
  for (int z = 12; z < 60; ++z)
    for (int y = 12; y < 68; ++y) {
      err += std::fabs(w.u.at(y, z) - 2.0) + std::fabs(w.v.at(y, z) - 3.0);
      ++n;
    }
  EXPECT_LT(err / n, 0.05);
}

TEST(Refine, DivergenceReturnsLastFiniteIterateFlagged) {
  // zero regularization with zero-gradient pixels makes the linear system
  // singular; the solver must flag it and return the init unharmed
  GrayImage flat(48, 48, 0.5);
  GrayImage target(48, 48, 0.5);
  target.at(24, 24) = 0.6;
  SolverParams sp = SolverParams::optimal();
  sp.reg_weight = 0.0;
  FlowField init = constant_flow(48, 48, 0, 0);
  RefineResult r = refine_subpixel(flat, target, init, sp);
  EXPECT_TRUE(r.diverged);
  for (std::size_t i = 0; i < r.flow.u.size(); ++i) {
    ASSERT_TRUE(std::isfinite(r.flow.u.data()[i]));
    ASSERT_TRUE(std::isfinite(r.flow.v.data()[i]));
  }
}
