#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowemu/cokrige.hpp"
#include "flowemu/common.hpp"
#include "flowemu/cpod.hpp"
#include "flowemu/estimate.hpp"
#include "flowemu/sha256.hpp"
#include "flowemu/snapshot.hpp"

namespace flowemu {

inline constexpr int kBundleFormat = 1;

// -------------------------------------------------------------------------
// CPD1 matrices: magic "CPD1", u32 rows, u32 cols, float64 payload, all
// little-endian, column-major.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

static_assert(std::endian::native == std::endian::little,
              "CPD1 serialization assumes a little-endian host");

}  // namespace detail

inline void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open for write: " + path.string());
  out.write("CPD1", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!out) throw ValidationError("write failed: " + path.string());
}

inline Matrix read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != "CPD1") {
    throw ValidationError("not a CPD1 file: " + path.string());
  }
  const std::uint64_t rows = detail::get_u32(in);
  const std::uint64_t cols = detail::get_u32(in);
  if (!in || rows * cols > (std::uint64_t(1) << 31)) {
    throw ValidationError("implausible CPD1 header in " + path.string());
  }
  Matrix m(static_cast<int>(rows), static_cast<int>(cols));
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * rows * cols));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(double) * rows * cols)) {
    throw ValidationError("truncated CPD1 payload in " + path.string());
  }
  return m;
}

// -------------------------------------------------------------------------
// Geometry metadata. The JSON keys X_max / Y_max are the downstream extents.

inline void write_geometry(const std::filesystem::path& path, const GeometryParams& g) {
  nlohmann::json j;
  j["length"] = g.length;
  j["nozzle_radius"] = g.nozzle_radius;
  j["inlet_diameter"] = g.inlet_diameter;
  j["injection_angle"] = g.injection_angle;
  j["inlet_distance"] = g.inlet_distance;
  j["X_max"] = g.x_extent;
  j["Y_max"] = g.y_extent;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot open for write: " + path.string());
  out << j.dump(2) << "\n";
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline GeometryParams read_geometry(const std::filesystem::path& path) {
  const nlohmann::json j = read_json(path);
  GeometryParams g;
  try {
    g.length = j.at("length").get<double>();
    g.nozzle_radius = j.at("nozzle_radius").get<double>();
    g.inlet_diameter = j.at("inlet_diameter").get<double>();
    g.injection_angle = j.at("injection_angle").get<double>();
    g.inlet_distance = j.at("inlet_distance").get<double>();
    g.x_extent = j.at("X_max").get<double>();
    g.y_extent = j.at("Y_max").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("geometry file " + path.string() + ": " + e.what());
  }
  validate(g);
  return g;
}

// -------------------------------------------------------------------------
// Snapshot archives: one directory per run holding geometry.json, grid.bin,
// and one <var>.bin per field variable.

namespace detail {

inline void check_variable_name(const std::string& name) {
  if (name.empty()) throw ValidationError("empty variable name");
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '_';
    if (!ok) throw ValidationError("variable name '" + name + "' is not filesystem-safe");
  }
  if (name == "grid") throw ValidationError("variable name 'grid' collides with the grid file");
}

}  // namespace detail

inline void write_snapshot_run(const std::filesystem::path& dir, const SnapshotEnsemble& run) {
  validate(run);
  for (const auto& name : run.variables) detail::check_variable_name(name);
  std::filesystem::create_directories(dir);
  write_geometry(dir / "geometry.json", run.geometry);
  write_matrix(dir / "grid.bin", run.grid.points);
  for (std::size_t v = 0; v < run.variables.size(); ++v) {
    write_matrix(dir / (run.variables[v] + ".bin"), run.fields[v]);
  }
}

/// Variables are discovered from the .bin files and kept in sorted order, so
/// the layout downstream is a pure function of the archive contents.
inline SnapshotEnsemble read_snapshot_run(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ValidationError("snapshot archive missing: " + dir.string());
  }
  SnapshotEnsemble run;
  run.geometry = read_geometry(dir / "geometry.json");
  run.grid.points = read_matrix(dir / "grid.bin");
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".bin") continue;
    const std::string stem = entry.path().stem().string();
    if (stem != "grid") names.push_back(stem);
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw ValidationError("snapshot archive has no field files: " + dir.string());
  run.variables = names;
  for (const auto& name : names) run.fields.push_back(read_matrix(dir / (name + ".bin")));
  validate(run);
  return run;
}

// -------------------------------------------------------------------------
// Basis bundle: basis.json + modes_<var>.bin (+ mean_<var>.bin when
// centered) + coeffs.bin + the common frame (grid.bin, geometry.json).
// coeffs.bin stores T blocks of K x n columns side by side.

struct BasisBundle {
  CpodBasis basis;
  CoefficientTensor coefficients;
};

inline void write_basis_bundle(const std::filesystem::path& dir, const CpodBasis& basis,
                               const CoefficientTensor& coefficients) {
  if (coefficients.steps() != basis.steps || coefficients.runs() != basis.runs ||
      coefficients.modes() != basis.layout().total()) {
    throw ValidationError("basis bundle: coefficient tensor does not match the basis");
  }
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = kBundleFormat;
  j["runs"] = basis.runs;
  j["steps"] = basis.steps;
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& v : basis.variables) {
    detail::check_variable_name(v.name);
    nlohmann::json entry;
    entry["name"] = v.name;
    entry["count"] = v.count();
    entry["total_energy"] = v.total_energy;
    entry["eigenvalues"] = std::vector<double>(v.eigenvalues.begin(), v.eigenvalues.end());
    entry["centered"] = v.centered();
    vars.push_back(entry);
    write_matrix(dir / ("modes_" + v.name + ".bin"), v.modes);
    if (v.centered()) write_matrix(dir / ("mean_" + v.name + ".bin"), v.mean);
  }
  j["variables"] = vars;
  std::ofstream out(dir / "basis.json", std::ios::trunc);
  if (!out) throw ValidationError("cannot open for write: " + (dir / "basis.json").string());
  out << j.dump(2) << "\n";

  write_geometry(dir / "geometry.json", basis.common_geometry);
  write_matrix(dir / "grid.bin", basis.common_grid.points);

  const int n = coefficients.runs();
  const int total = coefficients.modes();
  Matrix blocks(total, static_cast<std::int64_t>(n) * coefficients.steps());
  for (int t = 0; t < coefficients.steps(); ++t) {
    blocks.middleCols(static_cast<std::int64_t>(t) * n, n) =
        coefficients.slices[t].transpose();
  }
  write_matrix(dir / "coeffs.bin", blocks);
}

inline BasisBundle read_basis_bundle(const std::filesystem::path& dir) {
  const nlohmann::json j = read_json(dir / "basis.json");
  BasisBundle out;
  try {
    if (j.at("format").get<int>() != kBundleFormat) {
      throw ValidationError("unsupported basis bundle format in " + dir.string());
    }
    out.basis.runs = j.at("runs").get<int>();
    out.basis.steps = j.at("steps").get<int>();
    for (const auto& entry : j.at("variables")) {
      VariableBasis v;
      v.name = entry.at("name").get<std::string>();
      v.total_energy = entry.at("total_energy").get<double>();
      const auto eigs = entry.at("eigenvalues").get<std::vector<double>>();
      v.eigenvalues = Eigen::Map<const Vector>(eigs.data(), static_cast<int>(eigs.size()));
      v.modes = read_matrix(dir / ("modes_" + v.name + ".bin"));
      if (entry.at("centered").get<bool>()) {
        const Matrix mean = read_matrix(dir / ("mean_" + v.name + ".bin"));
        v.mean = mean.col(0);
      }
      if (v.modes.cols() != entry.at("count").get<int>()) {
        throw ValidationError("mode count mismatch for '" + v.name + "' in " + dir.string());
      }
      out.basis.variables.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("basis bundle " + dir.string() + ": " + e.what());
  }
  out.basis.common_geometry = read_geometry(dir / "geometry.json");
  out.basis.common_grid.points = read_matrix(dir / "grid.bin");

  const Matrix blocks = read_matrix(dir / "coeffs.bin");
  const int n = out.basis.runs;
  const int total = out.basis.layout().total();
  if (n < 1 || out.basis.steps < 1 || blocks.rows() != total ||
      blocks.cols() != static_cast<std::int64_t>(n) * out.basis.steps) {
    throw ValidationError("coefficient block shape mismatch in " + dir.string());
  }
  for (int t = 0; t < out.basis.steps; ++t) {
    out.coefficients.slices.push_back(
        blocks.middleCols(static_cast<std::int64_t>(t) * n, n).transpose());
  }
  return out;
}

// -------------------------------------------------------------------------
// Model bundle: models.json + designs.bin + per-step model_<t>.json,
// T_<t>.bin, and the precision sparsity pattern edges_<t>.csv.

struct ModelBundle {
  double lambda = 0.0;  // uniform penalty; -1 when tuned per step
  ModeLayout layout;
  DesignScaling scaling;
  Matrix designs;  // raw coordinates, n x p
  std::vector<Vector> mu;
  std::vector<Vector> tau;
  std::vector<Matrix> t_cov;
  std::vector<Matrix> precision;
  std::vector<double> nll;
  std::vector<double> step_lambda;
  std::vector<bool> converged;

  int steps() const { return static_cast<int>(mu.size()); }
};

namespace detail {

inline std::string step_tag(int t) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", t);
  return buf;
}

}  // namespace detail

inline void write_model_bundle(const std::filesystem::path& dir,
                               const std::vector<SliceFit>& fits, const ModeLayout& layout,
                               const DesignScaling& scaling, const Matrix& designs,
                               double lambda, const std::vector<double>& step_lambda = {}) {
  if (fits.empty()) throw ValidationError("model bundle: no fitted slices");
  if (!step_lambda.empty() && step_lambda.size() != fits.size()) {
    throw ValidationError("model bundle: one per-step lambda per slice required");
  }
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = kBundleFormat;
  j["steps"] = static_cast<int>(fits.size());
  j["lambda"] = lambda;
  j["variables"] = layout.variables;
  j["counts"] = layout.counts;
  j["scaling_lo"] = std::vector<double>(scaling.lo.begin(), scaling.lo.end());
  j["scaling_hi"] = std::vector<double>(scaling.hi.begin(), scaling.hi.end());
  std::ofstream out(dir / "models.json", std::ios::trunc);
  if (!out) throw ValidationError("cannot open for write: " + (dir / "models.json").string());
  out << j.dump(2) << "\n";

  write_matrix(dir / "designs.bin", designs);

  for (std::size_t t = 0; t < fits.size(); ++t) {
    const SliceFit& fit = fits[t];
    const std::string tag = detail::step_tag(static_cast<int>(t));
    nlohmann::json m;
    m["mu"] = std::vector<double>(fit.model.mu().begin(), fit.model.mu().end());
    m["tau"] = std::vector<double>(fit.model.tau().begin(), fit.model.tau().end());
    m["lambda"] = step_lambda.empty() ? lambda : step_lambda[t];
    m["log_likelihood"] = -fit.report.final_nll;
    m["converged"] = fit.report.converged;
    std::ofstream ms(dir / ("model_" + tag + ".json"), std::ios::trunc);
    if (!ms) throw ValidationError("cannot open for write in " + dir.string());
    ms << m.dump(2) << "\n";

    write_matrix(dir / ("T_" + tag + ".bin"), fit.model.t_cov());
    // the edge list is the declared sparsity artifact; Theta keeps the fitted
    // values so downstream coupling weights need no re-inversion of T
    write_matrix(dir / ("Theta_" + tag + ".bin"), fit.precision);

    std::ofstream edges(dir / ("edges_" + tag + ".csv"), std::ios::trunc);
    edges << "i,j\n";
    for (int a = 0; a < fit.precision.rows(); ++a) {
      for (int b = a + 1; b < fit.precision.cols(); ++b) {
        if (fit.precision(a, b) != 0.0) edges << a << "," << b << "\n";
      }
    }
  }
}

inline ModelBundle read_model_bundle(const std::filesystem::path& dir) {
  const nlohmann::json j = read_json(dir / "models.json");
  ModelBundle out;
  int steps = 0;
  try {
    if (j.at("format").get<int>() != kBundleFormat) {
      throw ValidationError("unsupported model bundle format in " + dir.string());
    }
    steps = j.at("steps").get<int>();
    out.lambda = j.at("lambda").get<double>();
    out.layout.variables = j.at("variables").get<std::vector<std::string>>();
    out.layout.counts = j.at("counts").get<std::vector<int>>();
    const auto lo = j.at("scaling_lo").get<std::vector<double>>();
    const auto hi = j.at("scaling_hi").get<std::vector<double>>();
    out.scaling.lo = Eigen::Map<const Vector>(lo.data(), static_cast<int>(lo.size()));
    out.scaling.hi = Eigen::Map<const Vector>(hi.data(), static_cast<int>(hi.size()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("model bundle " + dir.string() + ": " + e.what());
  }
  if (steps < 1) throw ValidationError("model bundle has no steps: " + dir.string());
  out.designs = read_matrix(dir / "designs.bin");

  const int total = out.layout.total();
  for (int t = 0; t < steps; ++t) {
    const std::string tag = detail::step_tag(t);
    const nlohmann::json m = read_json(dir / ("model_" + tag + ".json"));
    try {
      const auto mu = m.at("mu").get<std::vector<double>>();
      const auto tau = m.at("tau").get<std::vector<double>>();
      out.mu.push_back(Eigen::Map<const Vector>(mu.data(), static_cast<int>(mu.size())));
      out.tau.push_back(Eigen::Map<const Vector>(tau.data(), static_cast<int>(tau.size())));
      out.nll.push_back(-m.at("log_likelihood").get<double>());
      out.step_lambda.push_back(m.at("lambda").get<double>());
      out.converged.push_back(m.at("converged").get<bool>());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("model bundle " + dir.string() + " step " + tag + ": " + e.what());
    }
    out.t_cov.push_back(read_matrix(dir / ("T_" + tag + ".bin")));

    Matrix precision = read_matrix(dir / ("Theta_" + tag + ".bin"));
    if (precision.rows() != total || precision.cols() != total) {
      throw ValidationError("precision shape mismatch in " + dir.string());
    }
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> in_pattern(total, total);
    in_pattern.setConstant(false);
    std::ifstream edges(dir / ("edges_" + tag + ".csv"));
    if (!edges) throw ValidationError("missing edge list for step " + tag + " in " + dir.string());
    std::string line;
    std::getline(edges, line);  // header
    while (std::getline(edges, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) {
        throw ValidationError("malformed edge line '" + line + "' in " + dir.string());
      }
      const int a = std::stoi(line.substr(0, comma));
      const int b = std::stoi(line.substr(comma + 1));
      if (a < 0 || b < 0 || a >= total || b >= total) {
        throw ValidationError("edge index out of range in " + dir.string());
      }
      in_pattern(a, b) = in_pattern(b, a) = true;
    }
    for (int a = 0; a < total; ++a) {
      for (int b = 0; b < total; ++b) {
        if (a != b && precision(a, b) != 0.0 && !in_pattern(a, b)) {
          throw ValidationError("edge list and precision values disagree in " + dir.string());
        }
      }
    }
    out.precision.push_back(std::move(precision));
  }
  return out;
}

/// Rebuilds the per-step predictors from a stored bundle plus the coefficient
/// tensor of its basis bundle.
inline std::vector<GpModelSlice> assemble_models(const ModelBundle& bundle,
                                                 const CoefficientTensor& coefficients) {
  if (bundle.steps() != coefficients.steps()) {
    throw ValidationError("model bundle and coefficients disagree on step count");
  }
  const Matrix scaled = bundle.scaling.scale_rows(bundle.designs);
  std::vector<GpModelSlice> models;
  models.reserve(bundle.steps());
  for (int t = 0; t < bundle.steps(); ++t) {
    models.emplace_back(bundle.mu[t], bundle.t_cov[t], bundle.tau[t], scaled,
                        coefficients.slices[t]);
  }
  return models;
}

// -------------------------------------------------------------------------
// Provenance and stage ordering. Every bundle carries provenance.json with a
// checksum over its own files; downstream stages record the upstream
// checksums they consumed, and refuse to run against changed inputs.

inline std::string bundle_checksum(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ValidationError("bundle directory missing: " + dir.string());
  }
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name != "provenance.json") names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  Sha256 h;
  for (const auto& name : names) {
    const std::string line = name + "\n" + sha256_file(dir / name) + "\n";
    h.update(line.data(), line.size());
  }
  return h.finish_hex();
}

/// meta should carry the stage name plus whatever reproducibility inputs the
/// stage used (seed, lambda, upstream checksums). No timestamps: bundles must
/// be byte-identical across reruns.
inline void write_provenance(const std::filesystem::path& dir, nlohmann::json meta) {
  meta["format"] = kBundleFormat;
  meta["checksum"] = bundle_checksum(dir);
  std::ofstream out(dir / "provenance.json", std::ios::trunc);
  if (!out) throw ValidationError("cannot open for write: " + (dir / "provenance.json").string());
  out << meta.dump(2) << "\n";
}

inline nlohmann::json read_provenance(const std::filesystem::path& dir) {
  const auto path = dir / "provenance.json";
  if (!std::filesystem::exists(path)) {
    throw StageOrderError("no provenance in " + dir.string() + "; run its stage first");
  }
  return read_json(path);
}

/// A bundle is fresh when its current contents hash to the checksum its own
/// provenance recorded. Edited or partially rewritten bundles fail here.
inline std::string verify_bundle(const std::filesystem::path& dir) {
  const nlohmann::json prov = read_provenance(dir);
  const std::string recorded = prov.value("checksum", "");
  const std::string actual = bundle_checksum(dir);
  if (recorded != actual) {
    throw StageOrderError("bundle " + dir.string() +
                          " does not match its provenance; re-run its stage");
  }
  return actual;
}

/// Cross-stage ordering: `recorded` is the checksum a downstream stage stored
/// for this input when it ran. A mismatch means the upstream bundle was
/// regenerated afterwards.
inline void require_upstream(const std::filesystem::path& dir, const std::string& recorded,
                             const std::string& role) {
  const std::string actual = bundle_checksum(dir);
  if (actual != recorded) {
    throw StageOrderError(role + " bundle at " + dir.string() +
                          " changed after the downstream stage consumed it");
  }
}

}  // namespace flowemu
