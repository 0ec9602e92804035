// tscli: measure displacement fields on twisted cylindrical specimens.
//
// Pipeline: synth/crop -> maps -> flow and/or piv -> profile -> fit ->
// hysteresis -> compare. One plain-text config (section.key = value) drives
// everything; --set overrides individual keys. All outputs are CSV/PGM under
// --out. Exit codes: 0 ok, 1 bad config, 2 inconsistent input, 3 missing
// upstream artifact.

#include <CLI11.hpp>

#include <filesystem>
#include <fnmatch.h>
#include <iostream>
#include <sstream>

#include "tsflow/config.hpp"
#include "tsflow/csvio.hpp"
#include "tsflow/flow.hpp"
#include "tsflow/imageio.hpp"
#include "tsflow/optics.hpp"
#include "tsflow/piv.hpp"
#include "tsflow/synth.hpp"
#include "tsflow/tsmech.hpp"

namespace fs = std::filesystem;
using namespace tsflow;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  int threads = 0;
};

Config load_config(const CommonOpts& o) {
  Config cfg;
  if (!o.config_path.empty()) {
    if (!fs::exists(o.config_path)) throw MissingArtifact("config file not found: " + o.config_path);
    try {
      cfg = Config::load(o.config_path);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  for (const std::string& kv : o.overrides) {
    try {
      cfg.set(kv);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  return cfg;
}

fs::path ensure_out(const CommonOpts& o) {
  fs::path dir(o.out_dir);
  fs::create_directories(dir);
  return dir;
}

SpecimenGeometry specimen_from(const Config& cfg) {
  SpecimenGeometry g;
  g.r = cfg.get_double("specimen.radius_mm", 35.0);
  g.H = cfg.get_double("specimen.height_mm", 140.0);
  g.kappa = cfg.get_double("specimen.kappa", 0.67);
  try {
    g.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return g;
}

ChamberModel chamber_from(const Config& cfg) {
  ChamberModel c;
  c.specimen_radius =
      cfg.get_double("chamber.specimen_radius", cfg.get_double("specimen.radius_mm", 35.0));
  c.inner.inner_radius = cfg.get_double("chamber.inner_inner", 47.0);
  c.inner.outer_radius = cfg.get_double("chamber.inner_outer", 50.0);
  c.outer.inner_radius = cfg.get_double("chamber.outer_inner", 90.0);
  c.outer.outer_radius = cfg.get_double("chamber.outer_outer", 95.0);
  c.inner.medium.eta = cfg.get_double("chamber.eta_inner_tube", 1.58);
  c.outer.medium.eta = cfg.get_double("chamber.eta_outer_tube", 1.58);
  c.interior.eta = cfg.get_double("chamber.eta_interior", 1.00027);
  c.exterior.eta = cfg.get_double("chamber.eta_exterior", 1.00027);
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

CameraModel camera_from(const Config& cfg, const ChamberModel& chamber) {
  CameraModel cam;
  double dist = cfg.get_double("camera.distance_mm", 500.0);
  double py = cfg.get_double("camera.principal_y", 0.0);
  double pz = cfg.get_double("camera.principal_z", 0.0);
  if (cfg.has("camera.focal_px")) {
    cam.distance_mm = dist;
    cam.focal_px = cfg.get_double("camera.focal_px", 0.0);
    cam.principal_y = py;
    cam.principal_z = pz;
    cam.pitch_mm_per_px = (dist - chamber.specimen_radius) / cam.focal_px;
  } else {
    double pitch = cfg.get_double("camera.pitch_mm_per_px", 0.07);
    cam = CameraModel::from_pitch(dist, pitch, chamber.specimen_radius, py, pz);
  }
  try {
    cam.validate(chamber);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cam;
}

SolverParams solver_from(const Config& cfg) {
  SolverParams sp = cfg.get_string("flow.params", "optimal") == "default"
                        ? SolverParams::defaults()
                        : SolverParams::optimal();
  sp.reg_weight = cfg.get_double("flow.reg_weight", sp.reg_weight);
  sp.ratio = cfg.get_double("flow.ratio", sp.ratio);
  sp.coarsest_width = cfg.get_int("flow.coarsest_width", sp.coarsest_width);
  sp.n_outer = cfg.get_int("flow.n_outer", sp.n_outer);
  sp.n_inner = cfg.get_int("flow.n_inner", sp.n_inner);
  sp.n_sor = cfg.get_int("flow.n_sor", sp.n_sor);
  return sp;
}

FlowPipelineParams flow_params_from(const Config& cfg) {
  FlowPipelineParams p;
  p.solver = solver_from(cfg);
  p.sift.cell_size = cfg.get_int("sift.cell_size", 4);
  p.sift.grid_cells = cfg.get_int("sift.grid_cells", 4);
  p.sift.orientation_bins = cfg.get_int("sift.orientation_bins", 8);
  p.sift.clamp = cfg.get_double("sift.clamp", 0.2);
  p.energy.eta = cfg.get_double("flow.eta", 0.01);
  p.energy.alpha = cfg.get_double("flow.alpha", 2.0);
  p.energy.d1 = cfg.get_double("flow.d1", 0.0);
  p.energy.d2 = cfg.get_double("flow.d2", 40.0);
  p.window_radius = cfg.get_int("flow.window_radius", 4);
  return p;
}

PassSchedule schedule_from(const Config& cfg) {
  try {
    if (cfg.has("piv.sizes")) {
      PassSchedule s;
      std::stringstream ss(cfg.get_string("piv.sizes", ""));
      std::string tok;
      while (std::getline(ss, tok, ',')) s.sizes.push_back(std::stoi(tok));
      s.overlap = cfg.get_double("piv.overlap", 0.5);
      s.validate();
      return s;
    }
    PassSchedule s = PassSchedule::preset(cfg.get_string("piv.preset", "2p64"));
    s.overlap = cfg.get_double("piv.overlap", s.overlap);
    s.validate();
    return s;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

SpeckleSpec speckle_from(const Config& cfg) {
  SpeckleSpec s;
  s.width = cfg.get_int("synth.width", 512);
  s.height = cfg.get_int("synth.height", 512);
  s.seed = static_cast<std::uint64_t>(cfg.get_int("synth.seed", 1));
  s.dot_density = cfg.get_double("synth.density", 0.02);
  s.dot_radius_min = cfg.get_double("synth.radius_min", 1.0);
  s.dot_radius_max = cfg.get_double("synth.radius_max", 2.5);
  s.background = cfg.get_double("synth.background", 0.85);
  s.foreground = cfg.get_double("synth.foreground", 0.15);
  s.blur_sigma = cfg.get_double("synth.blur_sigma", 0.7);
  s.noise_sigma = cfg.get_double("synth.noise_sigma", 0.0);
  try {
    s.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return s;
}

FieldSpec field_from(const Config& cfg, const SpeckleSpec& spec) {
  FieldSpec f;
  f.width = spec.width;
  f.height = spec.height;
  f.geometry = specimen_from(cfg);
  f.mm_per_px = cfg.get_double("synth.mm_per_px", 0.07);
  f.axis_y = cfg.get_double("synth.axis_y", -1.0);
  f.bottom_row = cfg.get_double("synth.bottom_row", -1.0);

  std::string preset = cfg.get_string("synth.preset", "");
  std::string kind = cfg.get_string("synth.kind", "rigid");
  double top_px = cfg.get_double("synth.top_displacement_px", 4.0);
  if (preset == "rigid") {
    kind = "rigid";
  } else if (preset == "linear") {
    kind = "linear";
  } else if (preset == "paperA-like") {
    kind = "bilinear";
    f.h_prime = 0.55 * f.geometry.H;
  } else if (!preset.empty()) {
    throw ConfigError("unknown synth preset: " + preset);
  }

  if (kind == "rigid") {
    f.kind = FieldKind::rigid_shift;
    f.shift_u = cfg.get_double("synth.shift_u", 3.0);
    f.shift_v = cfg.get_double("synth.shift_v", 2.0);
  } else if (kind == "linear" || kind == "bilinear") {
    f.kind = kind == "linear" ? FieldKind::linear_twist : FieldKind::bilinear_twist;
    if (f.kind == FieldKind::bilinear_twist && f.h_prime <= 0)
      f.h_prime = cfg.get_double("synth.h_prime_frac", 0.6) * f.geometry.H;
    f.phi_top = cfg.has("synth.phi_top") ? cfg.get_double("synth.phi_top", 0.0)
                                         : top_px * f.mm_per_px / f.geometry.r;
    std::string proj = cfg.get_string("synth.projection", "cylindrical");
    if (proj == "flat") {
      f.projection = ProjectionKind::flat;
    } else if (proj == "cylindrical") {
      f.projection = ProjectionKind::cylindrical;
    } else if (proj == "refraction") {
      f.projection = ProjectionKind::cylindrical_refraction;
      f.chamber = chamber_from(cfg);
      f.camera = camera_from(cfg, f.chamber);
    } else {
      throw ConfigError("unknown synth projection: " + proj);
    }
  } else {
    throw ConfigError("unknown synth kind: " + kind);
  }
  return f;
}

std::vector<std::string> frame_list(const Config& cfg) {
  std::string frames = cfg.get_string("input.frames", "");
  if (frames.empty()) throw ConfigError("input.frames is required");
  std::vector<std::string> out;
  std::stringstream ss(frames);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.find('*') != std::string::npos || tok.find('?') != std::string::npos) {
      fs::path pattern(tok);
      fs::path dir = pattern.parent_path().empty() ? "." : pattern.parent_path();
      std::string leaf = pattern.filename().string();
      std::vector<std::string> matched;
      if (fs::is_directory(dir))
        for (const auto& entry : fs::directory_iterator(dir))
          if (fnmatch(leaf.c_str(), entry.path().filename().string().c_str(), 0) == 0)
            matched.push_back(entry.path().string());
      std::sort(matched.begin(), matched.end());
      out.insert(out.end(), matched.begin(), matched.end());
    } else {
      out.push_back(tok);
    }
  }
  if (out.size() < 2) throw InputError("need at least 2 frames");
  for (const std::string& f : out)
    if (!fs::exists(f)) throw MissingArtifact("frame not found: " + f);
  return out;
}

std::string pair_tag(std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", k);
  return buf;
}

void write_matrix_csv(const Grid<double>& m, const std::string& path) {
  std::ostringstream out;
  for (int z = 0; z < m.height(); ++z) {
    for (int y = 0; y < m.width(); ++y) {
      if (y) out << ',';
      out << detail::fmt(m.at(y, z));
    }
    out << '\n';
  }
  atomic_write_file(path, out.str());
}

// Field height recovered from the symmetric grid layout: the first and last
// centers sit equally far from the two borders.
int infer_field_height(const std::vector<double>& grid_z) {
  return static_cast<int>(std::lround(grid_z.front() + grid_z.back())) + 1;
}

DisplacementProfile profile_from_file(const std::string& path, int band_width, int axis_y,
                                      int n_bins) {
  std::ifstream probe(path);
  if (!probe) throw MissingArtifact("cannot open displacement input: " + path);
  std::string header;
  std::getline(probe, header);
  probe.close();
  if (header.rfind("y,z,u,v,valid", 0) == 0) {
    FlowField f = read_flow_csv(path);
    Grid<double> u = f.u;
    for (std::size_t i = 0; i < u.size(); ++i)
      if (!f.valid.data()[i]) u.data()[i] = std::numeric_limits<double>::quiet_NaN();
    return extract_profile(u, band_width, n_bins, axis_y);
  }
  if (header.rfind("y,z,u,v,nan", 0) == 0) {
    PivResult r = read_piv_csv(path);
    // bins are IA rows; heights count px above the bottom image border
    int ny = static_cast<int>(r.grid_y.size());
    double step_y = ny > 1 ? r.grid_y[1] - r.grid_y[0] : 1.0;
    int field_h = infer_field_height(r.grid_z);
    double axis_px = axis_y >= 0 ? axis_y : (r.grid_y.front() + r.grid_y.back()) / 2.0;
    DisplacementProfile prof;
    prof.band_width = band_width;
    for (int iz = static_cast<int>(r.grid_z.size()) - 1; iz >= 0; --iz) {
      double acc = 0.0;
      int count = 0;
      for (int iy = 0; iy < ny; ++iy) {
        if (std::fabs(r.grid_y[iy] - axis_px) > band_width / 2.0 + step_y / 2.0 - 1e-9) continue;
        double v = r.u.at(iy, iz);
        if (!std::isfinite(v)) continue;
        acc += v;
        ++count;
      }
      if (count == 0) continue;
      prof.z.push_back(field_h - 1 - r.grid_z[iz]);
      prof.d.push_back(acc / count);
    }
    if (prof.z.empty()) throw InputError("PIV input has no valid vectors in the band");
    return prof;
  }
  throw InputError("unrecognized displacement CSV header: " + path);
}

int cmd_synth(const CommonOpts& o) {
  Config cfg = load_config(o);
  fs::path out = ensure_out(o);
  SpeckleSpec spec = speckle_from(cfg);
  FieldSpec field = field_from(cfg, spec);
  RenderedPair pair = render_pair(spec, field);
  save_pgm16(pair.frame1, (out / "frame0.pgm").string());
  save_pgm16(pair.frame2, (out / "frame1.pgm").string());
  write_flow_csv(pair.truth, (out / "truth.csv").string());
  std::cout << "synth: wrote frame0.pgm frame1.pgm truth.csv (" << spec.width << "x"
            << spec.height << ")\n";
  return 0;
}

int cmd_crop(const CommonOpts& o) {
  Config cfg = load_config(o);
  fs::path out = ensure_out(o);
  std::string path = cfg.get_string("input.image", "");
  if (path.empty()) throw ConfigError("input.image is required");
  if (!fs::exists(path)) throw MissingArtifact("image not found: " + path);
  GrayImage img = load_gray(path);
  RegionOfInterest roi{cfg.get_int("roi.center_y", img.width() / 2),
                       cfg.get_int("roi.center_z", img.height() / 2),
                       cfg.get_int("roi.half_width", 0), cfg.get_int("roi.half_height", 0)};
  if (!roi.inside(img.width(), img.height()))
    throw InputError("ROI does not fit inside the image");
  GrayImage cropped = crop(img, roi);
  save_pgm16(cropped, (out / "cropped.pgm").string());
  std::cout << "crop: " << cropped.width() << "x" << cropped.height() << " -> cropped.pgm\n";
  return 0;
}

int cmd_maps(const CommonOpts& o) {
  Config cfg = load_config(o);
  fs::path out = ensure_out(o);
  ChamberModel chamber = chamber_from(cfg);
  CameraModel cam = camera_from(cfg, chamber);
  int w = cfg.get_int("maps.width", 2 * cfg.get_int("roi.half_width", 100) + 1);
  int h = cfg.get_int("maps.height", 2 * cfg.get_int("roi.half_height", 100) + 1);
  double oy = cfg.get_double("maps.origin_y", -(w - 1) / 2.0);
  double oz = cfg.get_double("maps.origin_z", -(h - 1) / 2.0);
  CorrectionMaps maps = build_correction_maps(cam, chamber, w, h, oy, oz);
  write_matrix_csv(maps.dy, (out / "dy.csv").string());
  write_matrix_csv(maps.dz, (out / "dz.csv").string());
  save_heatmap_pgm(maps.dy, (out / "dy.pgm").string());
  save_heatmap_pgm(maps.dz, (out / "dz.pgm").string());
  std::cout << "maps: " << w << "x" << h << " -> dy.csv dz.csv dy.pgm dz.pgm\n";
  return 0;
}

int cmd_flow(const CommonOpts& o) {
  Config cfg = load_config(o);
  fs::path out = ensure_out(o);
  std::vector<std::string> frames = frame_list(cfg);
  FlowPipelineParams params = flow_params_from(cfg);
  bool cumulative = cfg.get_bool("flow.cumulative", false);

  GrayImage prev = load_gray(frames[0]);
  FlowField accum;
  for (std::size_t k = 1; k < frames.size(); ++k) {
    GrayImage next = load_gray(frames[k]);
    if (!next.same_dims(prev)) throw InputError("frame size mismatch at " + frames[k]);
    RefineResult r = sift_flow(prev, next, params);
    if (r.diverged) std::cerr << "warning: refinement diverged on pair " << k - 1 << "\n";
    std::string tag = pair_tag(k - 1);
    write_flow_csv(r.flow, (out / ("flow_" + tag + ".csv")).string());
    save_heatmap_pgm(r.flow.u, (out / ("flow_" + tag + "_u.pgm")).string());
    save_heatmap_pgm(r.flow.v, (out / ("flow_" + tag + "_v.pgm")).string());
    if (cumulative) {
      if (k == 1) {
        accum = r.flow;
      } else {
        // compose: accumulated flow plus the pairwise flow sampled at the
        // displaced position (approximate; per-pair analysis is primary)
        FlowField next_accum(accum.width(), accum.height());
        for (int z = 0; z < accum.height(); ++z)
          for (int y = 0; y < accum.width(); ++y) {
            double au = accum.u.at(y, z), av = accum.v.at(y, z);
            double ty = std::clamp(y + au, 0.0, double(accum.width() - 1));
            double tz = std::clamp(z + av, 0.0, double(accum.height() - 1));
            next_accum.u.at(y, z) = au + sample_bilinear(r.flow.u, ty, tz);
            next_accum.v.at(y, z) = av + sample_bilinear(r.flow.v, ty, tz);
          }
        accum = std::move(next_accum);
      }
      write_flow_csv(accum, (out / ("cumulative_" + tag + ".csv")).string());
    }
    prev = std::move(next);
  }
  std::cout << "flow: " << frames.size() - 1 << " pair(s) processed\n";
  return 0;
}

int cmd_piv(const CommonOpts& o, const std::string& preset_arg) {
  Config cfg = load_config(o);
  if (!preset_arg.empty()) cfg.set("piv.preset=" + preset_arg);
  fs::path out = ensure_out(o);
  std::vector<std::string> frames = frame_list(cfg);
  PassSchedule sched = schedule_from(cfg);

  GrayImage prev = load_gray(frames[0]);
  for (std::size_t k = 1; k < frames.size(); ++k) {
    GrayImage next = load_gray(frames[k]);
    if (!next.same_dims(prev)) throw InputError("frame size mismatch at " + frames[k]);
    PivResult r = multipass(prev, next, sched);
    write_piv_csv(r, (out / ("piv_" + pair_tag(k - 1) + ".csv")).string());
    double nan_pct = 100.0 * r.nan_fraction();
    std::cout << "piv pair " << k - 1 << ": " << r.n_points << " points, " << nan_pct
              << "% NaN\n";
    prev = std::move(next);
  }
  return 0;
}

int cmd_profile(const CommonOpts& o) {
  Config cfg = load_config(o);
  fs::path out = ensure_out(o);
  std::string input =
      cfg.get_string("profile.input", (fs::path(o.out_dir) / "flow_0000.csv").string());
  DisplacementProfile prof =
      profile_from_file(input, cfg.get_int("profile.band_width", 200),
                        cfg.get_int("profile.axis_y", -1), cfg.get_int("profile.n_bins", 0));
  write_profile_csv(prof, (out / "profile.csv").string());
  std::cout << "profile: " << prof.z.size() << " bins -> profile.csv\n";
  return 0;
}

int cmd_fit(const CommonOpts& o) {
  Config cfg = load_config(o);
  fs::path out = ensure_out(o);
  std::string input = cfg.get_string("fit.input", (fs::path(o.out_dir) / "profile.csv").string());
  if (!fs::exists(input)) throw MissingArtifact("profile not found: " + input);
  DisplacementProfile prof = read_profile_csv(input);
  double H = cfg.get_double("fit.height", 0.0);
  if (H <= 0) throw ConfigError("fit.height (same units as profile z) is required");
  ActiveHeightFit fit;
  try {
    fit = fit_active_height(prof, H);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
  std::ostringstream csv;
  csv << "h_prime,breakpoint,slope_lower,slope_upper,rms,linear_rms,ok\n"
      << detail::fmt(fit.h_prime) << ',' << detail::fmt(fit.breakpoint) << ','
      << detail::fmt(fit.slope_lower) << ',' << detail::fmt(fit.slope_upper) << ','
      << detail::fmt(fit.rms) << ',' << detail::fmt(fit.linear_rms) << ',' << int(fit.ok) << '\n';
  atomic_write_file((out / "fit.csv").string(), csv.str());
  if (fit.ok)
    std::cout << "fit: h' = " << fit.h_prime << " (" << 100.0 * fit.h_prime / H
              << "% of H), breakpoint z* = " << fit.breakpoint << ", rms " << fit.rms << "\n";
  else
    std::cout << "fit: degenerate profile, h' undefined\n";
  return 0;
}

int cmd_hysteresis(const CommonOpts& o) {
  Config cfg = load_config(o);
  fs::path out = ensure_out(o);
  std::string input = cfg.get_string("input.series", "");
  if (input.empty()) throw ConfigError("input.series is required");
  if (!fs::exists(input)) throw MissingArtifact("series not found: " + input);
  TsTimeSeries series;
  try {
    series = read_series_csv(input);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
  SpecimenGeometry geom = specimen_from(cfg);
  HysteresisLoop original = build_hysteresis(series, geom, geom.H, "original");
  write_loop_csv(original, (out / "hysteresis_original.csv").string());
  double g_orig = loop_modulus(original);
  std::cout << "hysteresis original: G = " << g_orig << " kPa, loop area = " << original.area()
            << "\n";
  double h_prime = cfg.get_double("hysteresis.h_prime_mm", 0.0);
  if (h_prime > 0) {
    HysteresisLoop modified = build_hysteresis(series, geom, h_prime, "modified");
    write_loop_csv(modified, (out / "hysteresis_modified.csv").string());
    double g_mod = loop_modulus(modified);
    std::cout << "hysteresis modified (h' = " << h_prime << "): G = " << g_mod
              << " kPa, ratio G_mod/G_orig = " << g_mod / g_orig << "\n";
  }
  return 0;
}

int cmd_compare(const CommonOpts& o) {
  Config cfg = load_config(o);
  fs::path out = ensure_out(o);
  std::string flow_path = cfg.get_string("compare.flow", "");
  if (flow_path.empty()) throw ConfigError("compare.flow is required");
  if (!fs::exists(flow_path)) throw MissingArtifact("flow CSV not found: " + flow_path);
  int band = cfg.get_int("profile.band_width", 200);
  int axis = cfg.get_int("profile.axis_y", -1);

  struct MethodRow {
    std::string name;
    double std_dev;
    double rmse_vs_flow;
    long n_points;
    double nan_pct;
  };
  std::vector<MethodRow> rows;

  DisplacementProfile flow_prof = profile_from_file(flow_path, band, axis, 0);
  FlowField flow_field = read_flow_csv(flow_path);
  long flow_points = 0;
  for (std::size_t i = 0; i < flow_field.valid.size(); ++i)
    if (flow_field.valid.data()[i]) ++flow_points;
  rows.push_back({"optical_flow", profile_std(flow_prof), 0.0, flow_points, 0.0});

  std::string piv_list = cfg.get_string("compare.piv", "");
  std::stringstream ss(piv_list);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    if (!fs::exists(tok)) throw MissingArtifact("PIV CSV not found: " + tok);
    PivResult piv = read_piv_csv(tok);
    MethodRow row;
    row.name = fs::path(tok).stem().string();
    row.n_points = piv.n_points;
    row.nan_pct = 100.0 * piv.nan_fraction();
    if (piv.nan_fraction() >= 1.0) {
      row.std_dev = std::numeric_limits<double>::quiet_NaN();
      row.rmse_vs_flow = std::numeric_limits<double>::quiet_NaN();
    } else {
      DisplacementProfile prof = profile_from_file(tok, band, axis, 0);
      row.std_dev = profile_std(prof);
      row.rmse_vs_flow = profile_rmse(prof, flow_prof);
    }
    rows.push_back(row);
  }

  std::ostringstream csv, txt;
  csv << "method,profile_std,rmse_vs_flow,n_points,nan_pct\n";
  txt << "method            profile_std    rmse_vs_flow   n_points   NaN%\n";
  for (const MethodRow& r : rows) {
    csv << r.name << ',' << detail::fmt(r.std_dev) << ',' << detail::fmt(r.rmse_vs_flow) << ','
        << r.n_points << ',' << detail::fmt(r.nan_pct) << '\n';
    char line[160];
    if (r.nan_pct >= 100.0) {
      std::snprintf(line, sizeof line, "%-17s %-14s %-14s %-10ld 100%% NaN\n", r.name.c_str(),
                    "-", "-", r.n_points);
    } else {
      std::snprintf(line, sizeof line, "%-17s %-14.6g %-14.6g %-10ld %.2f\n", r.name.c_str(),
                    r.std_dev, r.rmse_vs_flow, r.n_points, r.nan_pct);
    }
    txt << line;
  }
  atomic_write_file((out / "report.csv").string(), csv.str());
  atomic_write_file((out / "report.txt").string(), txt.str());
  std::cout << txt.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"displacement measurement for torsional shear imagery"};
  app.require_subcommand(1);

  CommonOpts opts;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "pipeline configuration file");
    sub->add_option("--set", opts.overrides, "override: section.key=value")->take_all();
    sub->add_option("--out", opts.out_dir, "output directory");
    sub->add_option("--threads", opts.threads, "worker threads (0 = hardware)");
  };

  std::string piv_preset;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic frame pair with ground truth");
  CLI::App* crop_cmd = app.add_subcommand("crop", "crop an image to the configured ROI");
  CLI::App* maps = app.add_subcommand("maps", "build refraction correction maps");
  CLI::App* flow_cmd = app.add_subcommand("flow", "dense displacement per consecutive frame pair");
  CLI::App* piv = app.add_subcommand("piv", "multi-pass PIV per consecutive frame pair");
  piv->add_option("--preset", piv_preset, "pass schedule preset (2p64, 2p8, 4p32, 4p16)");
  CLI::App* profile = app.add_subcommand("profile", "height profile of horizontal displacement");
  CLI::App* fit = app.add_subcommand("fit", "bi-linear active-height fit of a profile");
  CLI::App* hysteresis = app.add_subcommand("hysteresis", "stress-strain loops from a TS series");
  CLI::App* compare = app.add_subcommand("compare", "method comparison report");
  for (CLI::App* sub : {synth, crop_cmd, maps, flow_cmd, piv, profile, fit, hysteresis, compare})
    add_common(sub);

  CLI11_PARSE(app, argc, argv);
  set_num_threads(opts.threads);

  try {
    if (synth->parsed()) return cmd_synth(opts);
    if (crop_cmd->parsed()) return cmd_crop(opts);
    if (maps->parsed()) return cmd_maps(opts);
    if (flow_cmd->parsed()) return cmd_flow(opts);
    if (piv->parsed()) return cmd_piv(opts, piv_preset);
    if (profile->parsed()) return cmd_profile(opts);
    if (fit->parsed()) return cmd_fit(opts);
    if (hysteresis->parsed()) return cmd_hysteresis(opts);
    if (compare->parsed()) return cmd_compare(opts);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
