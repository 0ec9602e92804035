#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "tsflow/image.hpp"
#include "tsflow/imageio.hpp"

using namespace tsflow;

namespace {

std::string test_path(const std::string& name) {
  return (std::filesystem::path(::testing::TempDir()) / name).string();
}

GrayImage random_image(int w, int h, unsigned seed) {
  GrayImage img(w, h);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
  return img;
}

void write_pgm_raw(const std::string& path, int w, int h, int maxval,
                   const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << w << " " << h << "\n" << maxval << "\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

}  // namespace

TEST(LoadGray, EightBitScale) {
  std::string p = test_path("scale8.pgm");
  write_pgm_raw(p, 2, 1, 255, {0, 255});
  GrayImage img = load_gray(p);
  EXPECT_EQ(img.at(0, 0), 0.0);
  EXPECT_EQ(img.at(1, 0), 1.0);
}

TEST(LoadGray, SixteenBitScale) {
  std::string p = test_path("scale16.pgm");
  // big-endian 16-bit: 32768, 65535
  write_pgm_raw(p, 2, 1, 65535, {0x80, 0x00, 0xff, 0xff});
  GrayImage img = load_gray(p);
  EXPECT_DOUBLE_EQ(img.at(0, 0), 32768.0 / 65535.0);
  EXPECT_DOUBLE_EQ(img.at(1, 0), 1.0);
}

TEST(LoadGray, Errors) {
  EXPECT_THROW(load_gray(test_path("missing.pgm")), std::runtime_error);
  std::string p = test_path("badmax.pgm");
  write_pgm_raw(p, 1, 1, 1023, {0, 0});
  EXPECT_THROW(load_gray(p), std::runtime_error);
}

TEST(Pgm, SixteenBitRoundTripIsExact) {
  GrayImage img = random_image(33, 17, 7);
  // snap to the 16-bit lattice first; PGM is the bit-exact interchange format
  for (std::size_t i = 0; i < img.size(); ++i)
    img.data()[i] = std::lround(img.data()[i] * 65535.0) / 65535.0;
  std::string p = test_path("rt16.pgm");
  save_pgm16(img, p);
  GrayImage back = load_pgm(p);
  ASSERT_TRUE(back.same_dims(img));
  for (std::size_t i = 0; i < img.size(); ++i)
    ASSERT_DOUBLE_EQ(back.data()[i], img.data()[i]);
}

TEST(Crop, PaperRoiPixelCount) {
  GrayImage img(2448, 2050, 0.5);
  RegionOfInterest roi{780, 990, 400, 930};  // 801 x 1861 analysis grid
  GrayImage out = crop(img, roi);
  EXPECT_EQ(out.width(), 801);
  EXPECT_EQ(out.height(), 1861);
  long px = static_cast<long>(out.width()) * out.height();
  EXPECT_NEAR(px, 1.5e6, 0.1e6);  // "approximately 1.5 million pixels"
}

TEST(Crop, WholeImageIdentity) {
  GrayImage img = random_image(11, 9, 3);
  RegionOfInterest roi{5, 4, 5, 4};
  EXPECT_TRUE(crop(img, roi) == img);
}

TEST(Crop, IndexArithmetic) {
  GrayImage img = random_image(10, 10, 4);
  RegionOfInterest roi{5, 5, 2, 2};
  GrayImage out = crop(img, roi);
  ASSERT_EQ(out.width(), 5);
  ASSERT_EQ(out.height(), 5);
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 5; ++y) EXPECT_EQ(out.at(y, z), img.at(3 + y, 3 + z));
}

TEST(Crop, OutOfBoundsThrows) {
  GrayImage img(10, 10, 0.0);
  EXPECT_THROW(crop(img, {9, 5, 2, 2}), std::invalid_argument);
  EXPECT_THROW(crop(img, {1, 5, 2, 2}), std::invalid_argument);
}

TEST(Crop, CompositionEqualsComposedRoi) {
  GrayImage img = random_image(40, 30, 5);
  RegionOfInterest outer{20, 15, 12, 10};
  RegionOfInterest inner{14, 11, 5, 4};  // coordinates inside the outer crop
  GrayImage two_step = crop(crop(img, outer), inner);
  RegionOfInterest composed{outer.center_y - outer.half_width + inner.center_y,
                            outer.center_z - outer.half_height + inner.center_z,
                            inner.half_width, inner.half_height};
  EXPECT_TRUE(two_step == crop(img, composed));
}

TEST(Pyramid, PaperLevelCount) {
  GrayImage img(800, 600, 0.5);
  Pyramid<GrayImage> pyr = build_pyramid(img, 0.75, 20);
  EXPECT_EQ(pyr.num_levels(), 13);  // 800 * 0.75^k >= 20 up to k = 12
  EXPECT_EQ(pyr.levels.front().width(), 800);
  EXPECT_EQ(pyr.levels.back().width(), 25);
}

TEST(Pyramid, BoundaryCases) {
  EXPECT_EQ(build_pyramid(GrayImage(20, 20, 0.1), 0.5, 20).num_levels(), 1);
  Pyramid<GrayImage> two = build_pyramid(GrayImage(40, 40, 0.1), 0.5, 20);
  EXPECT_EQ(two.num_levels(), 2);
  EXPECT_EQ(two.levels[1].width(), 20);
  GrayImage narrow(8, 8, 0.2);
  EXPECT_EQ(build_pyramid(narrow, 0.5, 20).num_levels(), 1);  // narrower than coarsest
}

TEST(Pyramid, PreconditionsThrow) {
  GrayImage img(64, 64, 0.5);
  EXPECT_THROW(build_pyramid(img, 1.0, 20), std::invalid_argument);
  EXPECT_THROW(build_pyramid(img, 0.5, 3), std::invalid_argument);
}

TEST(Pyramid, MonotoneDimsAndConstantEnergy) {
  GrayImage img(101, 67, 0.37);
  Pyramid<GrayImage> pyr = build_pyramid(img, 0.7, 10);
  for (int k = 1; k < pyr.num_levels(); ++k) {
    EXPECT_LE(pyr.levels[k].width(), pyr.levels[k - 1].width());
    EXPECT_LE(pyr.levels[k].height(), pyr.levels[k - 1].height());
    for (std::size_t i = 0; i < pyr.levels[k].size(); ++i)
      ASSERT_NEAR(pyr.levels[k].data()[i] * pyr.levels[k].data()[i], 0.37 * 0.37, 1e-12);
  }
}

TEST(Bilinear, LatticeExactAndMidpoint) {
  GrayImage img = random_image(8, 8, 6);
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y) EXPECT_EQ(sample_bilinear(img, y, z), img.at(y, z));
  GrayImage two(2, 1);
  two.at(0, 0) = 0.0;
  two.at(1, 0) = 1.0;
  EXPECT_DOUBLE_EQ(sample_bilinear(two, 0.5, 0.0), 0.5);
}

TEST(Bilinear, ConstantAndLinearAlongAxes) {
  GrayImage c(5, 5, 0.42);
  EXPECT_DOUBLE_EQ(sample_bilinear(c, 1.3, 4.0), 0.42);
  EXPECT_DOUBLE_EQ(sample_bilinear(c, -3.0, 9.5), 0.42);  // clamped
  GrayImage ramp(9, 3);
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 9; ++y) ramp.at(y, z) = 0.1 * y;
  for (double y = 0.0; y <= 8.0; y += 0.25)
    EXPECT_NEAR(sample_bilinear(ramp, y, 1.0), 0.1 * y, 1e-12);
}

TEST(Bilinear, NonFiniteThrows) {
  GrayImage img(4, 4, 0.0);
  EXPECT_THROW(sample_bilinear(img, std::nan(""), 1.0), std::invalid_argument);
}

TEST(Heatmap, LinearMappingAndSidecar) {
  Grid<double> f(3, 1);
  f.at(0, 0) = -1.0;
  f.at(1, 0) = 0.0;
  f.at(2, 0) = 1.0;
  std::string p = test_path("heat.pgm");
  save_heatmap_pgm(f, p);
  std::ifstream in(p, std::ios::binary);
  std::string head;
  std::getline(in, head);
  EXPECT_EQ(head, "P5");
  int w, h, mv;
  in >> w >> h >> mv;
  in.get();
  EXPECT_EQ(w, 3);
  uint8_t px[3];
  in.read(reinterpret_cast<char*>(px), 3);
  EXPECT_EQ(px[0], 0);
  EXPECT_EQ(px[1], 128);
  EXPECT_EQ(px[2], 255);
  std::ifstream side(p + ".bounds.txt");
  double lo, hi;
  side >> lo >> hi;
  EXPECT_DOUBLE_EQ(lo, -1.0);
  EXPECT_DOUBLE_EQ(hi, 1.0);
}

namespace {

// minimal libpng writer used only to exercise the PNG input path
void write_png_gray8(const std::string& path, int w, int h,
                     const std::vector<uint8_t>& pixels, bool rgb = false) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  ASSERT_NE(fp, nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  ASSERT_EQ(setjmp(png_jmpbuf(png)), 0);
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, rgb ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  int stride = rgb ? 3 * w : w;
  for (int z = 0; z < h; ++z)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + z * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace

TEST(LoadGray, PngGrayscale) {
  std::string p = test_path("gray.png");
  write_png_gray8(p, 3, 2, {0, 128, 255, 10, 20, 30});
  GrayImage img = load_gray(p);
  ASSERT_EQ(img.width(), 3);
  ASSERT_EQ(img.height(), 2);
  EXPECT_DOUBLE_EQ(img.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(img.at(2, 0), 1.0);
  EXPECT_DOUBLE_EQ(img.at(1, 1), 20.0 / 255.0);
}

TEST(LoadGray, PngRgbUsesLuminanceWeights) {
  std::string p = test_path("rgb.png");
  write_png_gray8(p, 1, 1, {200, 100, 50}, true);
  GrayImage img = load_gray(p);
  EXPECT_NEAR(img.at(0, 0), (0.299 * 200 + 0.587 * 100 + 0.114 * 50) / 255.0, 1e-12);
}
