#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsflow/flow.hpp"
#include "tsflow/imageio.hpp"
#include "tsflow/piv.hpp"
#include "tsflow/tsmech.hpp"

namespace tsflow {

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

// Flow export: header y,z,u,v,valid; px units; row-major (z outer, y inner).
inline void write_flow_csv(const FlowField& f, const std::string& path) {
  std::ostringstream out;
  out << "y,z,u,v,valid\n";
  for (int z = 0; z < f.height(); ++z)
    for (int y = 0; y < f.width(); ++y)
      out << y << ',' << z << ',' << detail::fmt(f.u.at(y, z)) << ','
          << detail::fmt(f.v.at(y, z)) << ',' << int(f.valid.at(y, z)) << '\n';
  atomic_write_file(path, out.str());
}

inline FlowField read_flow_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open flow CSV: " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("y,z,u,v,valid", 0) != 0)
    throw std::runtime_error("bad flow CSV header: " + path);
  struct Row {
    int y, z;
    double u, v;
    int valid;
  };
  std::vector<Row> rows;
  int w = 0, h = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 5) throw std::runtime_error("bad flow CSV row: " + path);
    Row r{std::stoi(f[0]), std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), std::stoi(f[4])};
    w = std::max(w, r.y + 1);
    h = std::max(h, r.z + 1);
    rows.push_back(r);
  }
  if (rows.empty()) throw std::runtime_error("empty flow CSV: " + path);
  FlowField field(w, h);
  for (const Row& r : rows) {
    field.u.at(r.y, r.z) = r.u;
    field.v.at(r.y, r.z) = r.v;
    field.valid.at(r.y, r.z) = static_cast<uint8_t>(r.valid);
  }
  return field;
}

// PIV export: header y,z,u,v,nan with IA-center coordinates.
inline void write_piv_csv(const PivResult& r, const std::string& path) {
  std::ostringstream out;
  out << "y,z,u,v,nan\n";
  for (int iz = 0; iz < r.u.height(); ++iz)
    for (int iy = 0; iy < r.u.width(); ++iy)
      out << detail::fmt(r.grid_y[iy]) << ',' << detail::fmt(r.grid_z[iz]) << ','
          << detail::fmt(r.u.at(iy, iz)) << ',' << detail::fmt(r.v.at(iy, iz)) << ','
          << int(r.nan_mask.at(iy, iz)) << '\n';
  atomic_write_file(path, out.str());
}

inline PivResult read_piv_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open PIV CSV: " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("y,z,u,v,nan", 0) != 0)
    throw std::runtime_error("bad PIV CSV header: " + path);
  std::vector<double> ys, zs, us, vs;
  std::vector<int> nans;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 5) throw std::runtime_error("bad PIV CSV row: " + path);
    ys.push_back(std::stod(f[0]));
    zs.push_back(std::stod(f[1]));
    us.push_back(std::stod(f[2]));
    vs.push_back(std::stod(f[3]));
    nans.push_back(std::stoi(f[4]));
  }
  if (ys.empty()) throw std::runtime_error("empty PIV CSV: " + path);
  PivResult r;
  for (double y : ys)
    if (r.grid_y.empty() || y > r.grid_y.back() + 1e-9)
      r.grid_y.push_back(y);
    else
      break;
  int ny = static_cast<int>(r.grid_y.size());
  int nz = static_cast<int>(ys.size()) / ny;
  if (ny * static_cast<std::size_t>(nz) != ys.size())
    throw std::runtime_error("ragged PIV CSV grid: " + path);
  r.grid_z.resize(nz);
  for (int iz = 0; iz < nz; ++iz) r.grid_z[iz] = zs[static_cast<std::size_t>(iz) * ny];
  r.u = Grid<double>(ny, nz);
  r.v = Grid<double>(ny, nz);
  r.nan_mask = Grid<uint8_t>(ny, nz, 0);
  r.n_points = ny * nz;
  for (int iz = 0; iz < nz; ++iz)
    for (int iy = 0; iy < ny; ++iy) {
      std::size_t k = static_cast<std::size_t>(iz) * ny + iy;
      r.u.at(iy, iz) = us[k];
      r.v.at(iy, iz) = vs[k];
      r.nan_mask.at(iy, iz) = static_cast<uint8_t>(nans[k]);
    }
  return r;
}

inline void write_profile_csv(const DisplacementProfile& p, const std::string& path) {
  std::ostringstream out;
  out << "z,d\n";
  for (std::size_t i = 0; i < p.z.size(); ++i)
    out << detail::fmt(p.z[i]) << ',' << detail::fmt(p.d[i]) << '\n';
  atomic_write_file(path, out.str());
}

inline DisplacementProfile read_profile_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open profile CSV: " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("z,d", 0) != 0)
    throw std::runtime_error("bad profile CSV header: " + path);
  DisplacementProfile p;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 2) throw std::runtime_error("bad profile CSV row: " + path);
    p.z.push_back(std::stod(f[0]));
    p.d.push_back(std::stod(f[1]));
  }
  if (p.z.empty()) throw std::runtime_error("empty profile CSV: " + path);
  return p;
}

inline void write_loop_csv(const HysteresisLoop& loop, const std::string& path) {
  std::ostringstream out;
  out << "gamma,tau\n";
  for (std::size_t i = 0; i < loop.gamma.size(); ++i)
    out << detail::fmt(loop.gamma[i]) << ',' << detail::fmt(loop.tau[i]) << '\n';
  atomic_write_file(path, out.str());
}

// Time series import: header t,T,phi in SI units (s, N*m, rad).
inline TsTimeSeries read_series_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open series CSV: " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,T,phi", 0) != 0)
    throw std::runtime_error("bad series CSV header: " + path);
  TsTimeSeries s;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw std::runtime_error("bad series CSV row: " + path);
    s.t.push_back(std::stod(f[0]));
    s.T.push_back(std::stod(f[1]));
    s.phi.push_back(std::stod(f[2]));
  }
  s.validate();
  return s;
}

inline void write_truth_csv(const FlowField& f, const std::string& path) { write_flow_csv(f, path); }

}  // namespace tsflow
