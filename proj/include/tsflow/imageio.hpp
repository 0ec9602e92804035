#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsflow/grid.hpp"

namespace tsflow {

// Writes via a temp file in the same directory, then renames into place.
inline void atomic_write_file(const std::string& path, const std::string& payload) {
  std::filesystem::path p(path);
  std::filesystem::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

namespace detail {

inline int pgm_next_token(std::istream& in, std::string& tok) {
  tok.clear();
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  return tok.empty() ? EOF : 0;
}

}  // namespace detail

// Binary PGM (P5), maxval 255 or 65535 (16-bit stored big-endian).
inline GrayImage load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open PGM: " + path);
  std::string tok;
  if (detail::pgm_next_token(in, tok) == EOF || tok != "P5")
    throw std::runtime_error("not a binary PGM (P5): " + path);
  long vals[3];
  for (long& v : vals) {
    if (detail::pgm_next_token(in, tok) == EOF) throw std::runtime_error("truncated PGM header: " + path);
    v = std::stol(tok);
  }
  long w = vals[0], h = vals[1], maxval = vals[2];
  if (w < 1 || h < 1) throw std::runtime_error("bad PGM dimensions: " + path);
  if (maxval != 255 && maxval != 65535)
    throw std::runtime_error("unsupported PGM maxval (need 255 or 65535): " + path);
  GrayImage img(static_cast<int>(w), static_cast<int>(h));
  std::size_t n = img.size();
  if (maxval == 255) {
    std::vector<uint8_t> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (!in) throw std::runtime_error("truncated PGM data: " + path);
    for (std::size_t i = 0; i < n; ++i) img.data()[i] = buf[i] / 255.0;
  } else {
    std::vector<uint8_t> buf(2 * n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(2 * n));
    if (!in) throw std::runtime_error("truncated PGM data: " + path);
    for (std::size_t i = 0; i < n; ++i) {
      unsigned v = (static_cast<unsigned>(buf[2 * i]) << 8) | buf[2 * i + 1];
      img.data()[i] = v / 65535.0;
    }
  }
  return img;
}

inline void save_pgm8(const GrayImage& img, const std::string& path) {
  std::ostringstream out;
  out << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  std::string data;
  data.reserve(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = img.data()[i];
    double q = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    data.push_back(static_cast<char>(static_cast<uint8_t>(std::lround(q * 255.0))));
  }
  atomic_write_file(path, out.str() + data);
}

inline void save_pgm16(const GrayImage& img, const std::string& path) {
  std::ostringstream out;
  out << "P5\n" << img.width() << " " << img.height() << "\n65535\n";
  std::string data;
  data.reserve(2 * img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = img.data()[i];
    double q = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    unsigned u = static_cast<unsigned>(std::lround(q * 65535.0));
    data.push_back(static_cast<char>((u >> 8) & 0xff));
    data.push_back(static_cast<char>(u & 0xff));
  }
  atomic_write_file(path, out.str() + data);
}

// PNG input: 8/16-bit grayscale, or RGB reduced by 0.299/0.587/0.114.
inline GrayImage load_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("cannot open PNG: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("corrupt PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int bit_depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (bit_depth == 16) png_set_swap(png);  // to little-endian words
  png_read_update_info(png, info);

  color = png_get_color_type(png, info);
  bit_depth = png_get_bit_depth(png, info);
  int channels = png_get_channels(png, info);

  std::vector<std::vector<uint8_t>> rows(h, std::vector<uint8_t>(png_get_rowbytes(png, info)));
  std::vector<png_bytep> row_ptrs(h);
  for (png_uint_32 z = 0; z < h; ++z) row_ptrs[z] = rows[z].data();
  png_read_image(png, row_ptrs.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  double scale = bit_depth == 16 ? 65535.0 : 255.0;
  GrayImage img(static_cast<int>(w), static_cast<int>(h));
  for (png_uint_32 z = 0; z < h; ++z) {
    for (png_uint_32 y = 0; y < w; ++y) {
      double v;
      if (channels == 1) {
        v = bit_depth == 16
                ? reinterpret_cast<const uint16_t*>(rows[z].data())[y] / scale
                : rows[z][y] / scale;
      } else if (channels == 3) {
        double r, g, b;
        if (bit_depth == 16) {
          const uint16_t* p = reinterpret_cast<const uint16_t*>(rows[z].data()) + 3 * y;
          r = p[0] / scale; g = p[1] / scale; b = p[2] / scale;
        } else {
          const uint8_t* p = rows[z].data() + 3 * y;
          r = p[0] / scale; g = p[1] / scale; b = p[2] / scale;
        }
        v = 0.299 * r + 0.587 * g + 0.114 * b;
      } else {
        throw std::runtime_error("unsupported PNG channel count: " + path);
      }
      img.at(static_cast<int>(y), static_cast<int>(z)) = v;
    }
  }
  return img;
}

// Dispatch on magic bytes; intensities come back normalized to [0,1].
inline GrayImage load_gray(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  in.close();
  if (magic[0] == 'P' && magic[1] == '5') return load_pgm(path);
  if (static_cast<unsigned char>(magic[0]) == 0x89 && magic[1] == 'P') return load_png(path);
  throw std::runtime_error("unsupported image format (need PGM P5 or PNG): " + path);
}

// 8-bit heatmap: linear map of [min,max] to [0,255]; NaN renders as 0.
// Bounds go to a sidecar "<path>.bounds.txt" as "min max\n".
inline void save_heatmap_pgm(const Grid<double>& field, const std::string& path) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < field.size(); ++i) {
    double v = field.data()[i];
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) { lo = 0.0; hi = 0.0; }
  std::ostringstream head;
  head << "P5\n" << field.width() << " " << field.height() << "\n255\n";
  std::string data;
  data.reserve(field.size());
  double span = hi - lo;
  for (std::size_t i = 0; i < field.size(); ++i) {
    double v = field.data()[i];
    uint8_t q = 0;
    if (std::isfinite(v) && span > 0.0)
      q = static_cast<uint8_t>(std::lround(255.0 * (v - lo) / span));
    data.push_back(static_cast<char>(q));
  }
  atomic_write_file(path, head.str() + data);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g %.17g\n", lo, hi);
  atomic_write_file(path + ".bounds.txt", buf);
}

}  // namespace tsflow
