// Command-line pipeline driver: synth -> extract -> fit -> predict / uq /
// tke / couplings. Every stage writes a self-describing bundle with
// provenance; downstream stages refuse stale upstream content (exit 4).
// Exit codes: 0 ok, 2 bad input, 3 numerical failure, 4 stage-order violation.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowemu/coupling.hpp"
#include "flowemu/design.hpp"
#include "flowemu/estimate.hpp"
#include "flowemu/io.hpp"
#include "flowemu/parallel.hpp"
#include "flowemu/predictor.hpp"
#include "flowemu/psd.hpp"
#include "flowemu/stats.hpp"
#include "flowemu/synthgen.hpp"
#include "flowemu/tke.hpp"

using namespace flowemu;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// small shared helpers

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

Vector to_vector(const json& arr, const std::string& what) {
  if (!arr.is_array()) throw ValidationError(what + " must be an array");
  Vector v(static_cast<int>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<int>(i)) = arr[i].get<double>();
  return v;
}

Matrix to_matrix(const json& rows, const std::string& what) {
  if (!rows.is_array() || rows.empty()) throw ValidationError(what + " must be a nonempty array");
  const std::size_t cols = rows[0].size();
  Matrix m(static_cast<int>(rows.size()), static_cast<int>(cols));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].is_array() || rows[i].size() != cols) {
      throw ValidationError(what + " rows must all share one length");
    }
    for (std::size_t j = 0; j < cols; ++j) {
      m(static_cast<int>(i), static_cast<int>(j)) = rows[i][j].get<double>();
    }
  }
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot open for write: " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::pair<int, int> parse_window(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw ValidationError("window must be 'begin:end', got '" + text + "'");
  }
  try {
    return {std::stoi(text.substr(0, colon)), std::stoi(text.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ValidationError("window must be 'begin:end', got '" + text + "'");
  }
}

int nearest_grid_point(const Grid& grid, double x, double y) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int j = 0; j < grid.size(); ++j) {
    const double d = (grid.x(j) - x) * (grid.x(j) - x) + (grid.y(j) - y) * (grid.y(j) - y);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// manifest

struct Manifest {
  fs::path dir;  // directory the manifest lives in; archive paths are relative to it
  std::vector<fs::path> archives;
  Matrix design_points;  // raw coordinates, n x p
  DesignScaling scaling;
};

Manifest read_manifest(const fs::path& path) {
  const json j = read_json(path);
  Manifest m;
  m.dir = fs::absolute(path).parent_path();
  if (!j.contains("archives") || !j["archives"].is_array() || j["archives"].empty()) {
    throw ValidationError("manifest: 'archives' is missing or empty");
  }
  for (const auto& entry : j["archives"]) m.archives.push_back(m.dir / entry.get<std::string>());
  if (!j.contains("design")) throw ValidationError("manifest: 'design' is missing");
  const json& design = j["design"];
  if (!design.contains("points")) throw ValidationError("manifest: 'design.points' is missing");
  m.design_points = to_matrix(design["points"], "manifest design.points");
  if (m.design_points.rows() != static_cast<int>(m.archives.size())) {
    throw ValidationError("manifest: one design point per archive required");
  }
  if (!design.contains("ranges")) throw ValidationError("manifest: 'design.ranges' is missing");
  const json& ranges = design["ranges"];
  if (!ranges.is_array() || static_cast<int>(ranges.size()) != m.design_points.cols()) {
    throw ValidationError("manifest: 'design.ranges' needs one [lo, hi] pair per design column");
  }
  m.scaling.lo.resize(m.design_points.cols());
  m.scaling.hi.resize(m.design_points.cols());
  for (int d = 0; d < m.design_points.cols(); ++d) {
    if (!ranges[d].is_array() || ranges[d].size() != 2) {
      throw ValidationError("manifest: 'design.ranges' entries must be [lo, hi]");
    }
    m.scaling.lo(d) = ranges[d][0].get<double>();
    m.scaling.hi(d) = ranges[d][1].get<double>();
  }
  validate(m.scaling);
  return m;
}

// ---------------------------------------------------------------------------
// model/basis loading with stage-order enforcement

struct LoadedPipeline {
  BasisBundle basis;
  ModelBundle bundle;
  std::vector<GpModelSlice> models;
  std::string basis_checksum;
  std::string models_checksum;
};

LoadedPipeline load_pipeline(const fs::path& basis_dir, const fs::path& models_dir) {
  LoadedPipeline out;
  out.basis_checksum = verify_bundle(basis_dir);
  out.models_checksum = verify_bundle(models_dir);
  const json model_prov = read_provenance(models_dir);
  const std::string recorded = model_prov.value("inputs", json::object()).value("basis", "");
  if (recorded != out.basis_checksum) {
    throw StageOrderError("basis bundle changed after fit; re-run fit before predicting");
  }
  out.basis = read_basis_bundle(basis_dir);
  out.bundle = read_model_bundle(models_dir);
  out.models = assemble_models(out.bundle, out.basis.coefficients);
  return out;
}

Vector scaled_query(const LoadedPipeline& pipe, const GeometryParams& target) {
  const int p = pipe.bundle.scaling.dims();
  const Vector raw = design_from_geometry(target).head(p);
  return pipe.bundle.scaling.scale(raw);
}

// ---------------------------------------------------------------------------
// synth

SyntheticSpec spec_from_json(const json& j) {
  SyntheticSpec spec;
  const json& g = j.at("base_geometry");
  spec.base.length = g.at("length").get<double>();
  spec.base.nozzle_radius = g.at("nozzle_radius").get<double>();
  spec.base.inlet_diameter = g.at("inlet_diameter").get<double>();
  spec.base.injection_angle = g.at("injection_angle").get<double>();
  spec.base.inlet_distance = g.at("inlet_distance").get<double>();
  spec.base.x_extent = g.at("X_max").get<double>();
  spec.base.y_extent = g.at("Y_max").get<double>();
  spec.grid_nx = j.at("grid").at("nx").get<int>();
  spec.grid_ny = j.at("grid").at("ny").get<int>();
  const json& designs = j.at("designs");
  if (designs.is_array()) {
    spec.designs = to_matrix(designs, "designs");
  } else {
    spec.designs = latin_hypercube(designs.at("dims").get<int>(), designs.at("count").get<int>(),
                                   designs.at("seed").get<std::uint64_t>());
  }
  spec.variables = j.at("variables").get<std::vector<std::string>>();
  spec.mode_counts = j.at("mode_counts").get<std::vector<int>>();
  spec.mu = to_vector(j.at("mu"), "mu");
  spec.t_cov = to_matrix(j.at("t_cov"), "t_cov");
  spec.tau = to_vector(j.at("tau"), "tau");
  spec.steps = j.at("steps").get<int>();
  spec.noise = j.value("noise", 0.0);
  spec.seed = j.value("seed", std::uint64_t(1));
  return spec;
}

int cmd_synth(const fs::path& spec_path, const fs::path& out,
              std::optional<std::uint64_t> seed_override) {
  json spec_json = read_json(spec_path);
  if (seed_override) spec_json["seed"] = *seed_override;
  const SyntheticSpec spec = spec_from_json(spec_json);
  const SyntheticEnsemble ens = generate(spec);

  fs::create_directories(out);
  json manifest;
  manifest["archives"] = json::array();
  for (std::size_t i = 0; i < ens.runs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "run_%04zu", i);
    write_snapshot_run(out / name, ens.runs[i]);
    manifest["archives"].push_back(name);
  }

  // raw design coordinates and the catalog ranges the unit box maps onto
  const int p = static_cast<int>(spec.designs.cols());
  const DesignScaling catalog = DesignScaling::from_ranges();
  json points = json::array();
  for (int i = 0; i < spec.designs.rows(); ++i) {
    json row = json::array();
    for (int d = 0; d < p; ++d) {
      row.push_back(catalog.lo(d) + spec.designs(i, d) * (catalog.hi(d) - catalog.lo(d)));
    }
    points.push_back(row);
  }
  json ranges = json::array();
  for (int d = 0; d < p; ++d) ranges.push_back({catalog.lo(d), catalog.hi(d)});
  manifest["design"] = {{"points", points}, {"ranges", ranges}};
  manifest["output"] = ".";
  write_json(out / "manifest.json", manifest);

  json prov;
  prov["stage"] = "synth";
  prov["seed"] = spec.seed;
  prov["inputs"] = {{"spec", sha256_file(spec_path)}};
  write_provenance(out, prov);

  std::cout << "wrote " << ens.runs.size() << " runs (" << spec.steps << " steps, "
            << ens.common_grid.size() << " grid points) to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// extract

int cmd_extract(const fs::path& manifest_path, const fs::path& out, double energy, bool center,
                int neighbors, int threads) {
  const Manifest manifest = read_manifest(manifest_path);

  std::vector<SnapshotEnsemble> runs;
  runs.reserve(manifest.archives.size());
  for (const auto& dir : manifest.archives) runs.push_back(read_snapshot_run(dir));

  // common frame: the densest run's grid, ties broken by lowest run index
  std::size_t densest = 0;
  for (std::size_t i = 1; i < runs.size(); ++i) {
    if (runs[i].grid.size() > runs[densest].grid.size()) densest = i;
  }
  const Grid& common_grid = runs[densest].grid;
  const GeometryParams& common_geometry = runs[densest].geometry;
  std::vector<PiecewiseAffineMap> maps;
  maps.reserve(runs.size());
  for (const auto& run : runs) maps.push_back(build_rescale_map(run.geometry, common_geometry));

  CpodOptions opts;
  opts.energy_target = energy;
  opts.center_snapshots = center;
  opts.idw_neighbors = neighbors;
  opts.threads = static_cast<unsigned>(threads);
  const ExtractionResult result = extract_basis(runs, maps, common_grid, common_geometry, opts);

  write_basis_bundle(out, result.basis, result.coefficients);
  json prov;
  prov["stage"] = "extract";
  prov["energy_target"] = energy;
  prov["center_snapshots"] = center;
  json inputs;
  inputs["manifest"] = sha256_file(manifest_path);
  for (std::size_t i = 0; i < manifest.archives.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof(key), "run_%04zu", i);
    inputs[key] = bundle_checksum(manifest.archives[i]);
  }
  prov["inputs"] = inputs;
  write_provenance(out, prov);

  for (const auto& v : result.basis.variables) {
    std::cout << v.name << ": " << v.count() << " modes\n";
  }
  for (const auto& w : result.warnings) std::cout << "warning: " << w << "\n";
  std::cout << "basis bundle written to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit

FitConfig fit_config_from_json(const fs::path& path) {
  FitConfig config;
  if (path.empty()) return config;
  const json j = read_json(path);
  config.lambda = j.value("lambda", config.lambda);
  config.n_starts = j.value("n_starts", config.n_starts);
  config.max_bcd_iters = j.value("max_bcd_iters", config.max_bcd_iters);
  config.bcd_tol = j.value("bcd_tol", config.bcd_tol);
  config.glasso_tol = j.value("glasso_tol", config.glasso_tol);
  config.lbfgs_tol = j.value("lbfgs_tol", config.lbfgs_tol);
  config.lbfgs_memory = j.value("lbfgs_memory", config.lbfgs_memory);
  config.seed = j.value("seed", config.seed);
  config.mask_within_variable = j.value("mask_within_variable", config.mask_within_variable);
  return config;
}

int cmd_fit(const fs::path& manifest_path, const fs::path& basis_dir, const fs::path& out,
            const fs::path& config_path, std::optional<double> lambda, std::optional<int> cv_folds,
            std::optional<int> top_k, std::optional<int> starts,
            std::optional<std::uint64_t> seed, int threads) {
  const std::string basis_checksum = verify_bundle(basis_dir);
  const BasisBundle basis = read_basis_bundle(basis_dir);
  const int n = basis.basis.runs;
  if (n < 2) throw ValidationError("n >= 2 required: cannot fit a design correlation to one run");

  const Manifest manifest = read_manifest(manifest_path);
  if (manifest.design_points.rows() != n) {
    throw ValidationError("manifest design table does not match the basis bundle's run count");
  }
  const Matrix scaled = manifest.scaling.scale_rows(manifest.design_points);
  const ModeLayout layout = basis.basis.layout();

  FitConfig config = fit_config_from_json(config_path);
  if (starts) config.n_starts = *starts;
  if (seed) config.seed = *seed;
  if (lambda) config.lambda = *lambda;

  std::vector<SliceFit> fits;
  std::vector<double> step_lambda;
  double bundle_lambda = config.lambda;
  if (top_k) {
    // per-slice penalty chosen to keep exactly k cross-variable couplings
    const int steps = basis.coefficients.steps();
    fits.resize(static_cast<std::size_t>(steps));
    step_lambda.resize(static_cast<std::size_t>(steps));
    parallel_for(steps, threads, [&](int t) {
      FitConfig local = config;
      const TopKTuneResult tuned =
          tune_lambda_top_k(basis.coefficients.slices[t], scaled, layout, *top_k, local);
      local.lambda = tuned.lambda;
      fits[static_cast<std::size_t>(t)] =
          bcd_fit(basis.coefficients.slices[t], scaled, layout, local, 1);
      step_lambda[static_cast<std::size_t>(t)] = tuned.lambda;
    });
    bundle_lambda = -1.0;
  } else {
    if (cv_folds) {
      // tune once on the middle slice, then fit every slice at that penalty
      const int middle = basis.coefficients.steps() / 2;
      const CvTuneResult tuned =
          tune_lambda_cv(basis.coefficients.slices[middle], scaled, layout, *cv_folds, config);
      config.lambda = tuned.lambda;
      bundle_lambda = tuned.lambda;
    }
    fits = fit_ensemble(basis.coefficients, scaled, layout, config, threads);
  }

  write_model_bundle(out, fits, layout, manifest.scaling, manifest.design_points, bundle_lambda,
                     step_lambda);
  json prov;
  prov["stage"] = "fit";
  prov["seed"] = config.seed;
  prov["lambda"] = bundle_lambda;
  prov["starts"] = config.n_starts;
  prov["inputs"] = {{"basis", basis_checksum}, {"manifest", sha256_file(manifest_path)}};
  write_provenance(out, prov);

  int converged = 0;
  for (const auto& fit : fits) converged += fit.report.converged ? 1 : 0;
  if (top_k) {
    std::cout << "per-slice lambda tuned for " << *top_k << " couplings\n";
  } else {
    std::cout << "lambda " << fmt(bundle_lambda) << "\n";
  }
  std::cout << converged << "/" << fits.size() << " slices converged; model bundle written to "
            << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict

int cmd_predict(const fs::path& basis_dir, const fs::path& models_dir, const fs::path& geo_path,
                const fs::path& out, const fs::path& sidecar_path, const fs::path& reference,
                int neighbors, int threads) {
  const LoadedPipeline pipe = load_pipeline(basis_dir, models_dir);
  const GeometryParams target = read_geometry(geo_path);
  const Vector c_scaled = scaled_query(pipe, target);

  json sidecar = json::object();
  if (!sidecar_path.empty()) sidecar = read_json(sidecar_path);

  std::optional<SnapshotEnsemble> ref;
  Grid target_grid;
  if (!reference.empty()) {
    ref = read_snapshot_run(reference);
    target_grid = ref->grid;  // compare pointwise on the reference's own grid
  } else if (sidecar.contains("grid")) {
    target_grid = structured_grid(target, sidecar["grid"].at("nx").get<int>(),
                                  sidecar["grid"].at("ny").get<int>());
  } else {
    target_grid = build_rescale_map(pipe.basis.basis.common_geometry, target)
                      .apply(pipe.basis.basis.common_grid);
  }

  PredictOptions options;
  options.idw_neighbors = neighbors;
  options.threads = static_cast<unsigned>(threads);
  const PredictedField field =
      predict_flow(pipe.basis.basis, pipe.models, c_scaled, target, target_grid, options);

  fs::create_directories(out);
  write_geometry(out / "geometry.json", target);
  write_matrix(out / "grid.bin", field.grid.points);
  for (const auto& v : field.variables) {
    write_matrix(out / ("mean_" + v.name + ".bin"), v.mean);
    write_matrix(out / ("var_" + v.name + ".bin"), v.variance);
  }

  json summary;
  summary["extrapolated"] = field.extrapolated;

  if (ref) {
    json mre_block;
    const json regions = sidecar.value("regions", json::array());
    // default region: the whole grid
    std::vector<std::pair<std::string, std::vector<int>>> masks;
    if (regions.empty()) {
      std::vector<int> all(static_cast<std::size_t>(target_grid.size()));
      for (int j = 0; j < target_grid.size(); ++j) all[static_cast<std::size_t>(j)] = j;
      masks.emplace_back("all", std::move(all));
    } else {
      for (const auto& region : regions) {
        masks.emplace_back(region.at("name").get<std::string>(),
                           region.at("points").get<std::vector<int>>());
      }
    }
    for (const auto& v : field.variables) {
      const auto it = std::find(ref->variables.begin(), ref->variables.end(), v.name);
      if (it == ref->variables.end()) {
        throw ValidationError("reference run lacks variable '" + v.name + "'");
      }
      const Matrix& sim = ref->fields[static_cast<std::size_t>(it - ref->variables.begin())];
      json per_var;
      for (const auto& [name, points] : masks) {
        const Vector errors = mre(sim, v.mean, points);
        json entry;
        entry["per_step"] = std::vector<double>(errors.begin(), errors.end());
        entry["mean"] = errors.mean();
        entry["max"] = errors.maxCoeff();
        per_var[name] = entry;
      }
      mre_block[v.name] = per_var;
    }
    summary["mre"] = mre_block;
  }

  if (sidecar.contains("probes")) {
    const double dt = sidecar.value("dt", 1.0);
    PsdOptions psd_options;
    psd_options.hann_window = sidecar.value("hann_window", false);
    json peaks = json::array();
    for (const auto& probe : sidecar["probes"]) {
      const int point = probe.at("point").get<int>();
      if (point < 0 || point >= target_grid.size()) {
        throw ValidationError("probe point index out of range");
      }
      for (const auto& v : field.variables) {
        const PsdResult psd = psd_probe(v.mean.row(point).transpose(), dt, psd_options);
        int arg = 0;
        psd.power.maxCoeff(&arg);
        json entry;
        entry["probe"] = probe.at("name").get<std::string>();
        entry["variable"] = v.name;
        entry["frequency"] = psd.frequencies(arg);
        entry["power"] = psd.power(arg);
        peaks.push_back(entry);
      }
    }
    summary["psd_peaks"] = peaks;
  }
  write_json(out / "summary.json", summary);

  json prov;
  prov["stage"] = "predict";
  prov["inputs"] = {{"basis", pipe.basis_checksum}, {"models", pipe.models_checksum}};
  write_provenance(out, prov);

  if (field.extrapolated) {
    std::cout << "note: query lies outside the training design hull\n";
  }
  std::cout << "prediction written to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// uq

int cmd_uq(const fs::path& basis_dir, const fs::path& models_dir, const fs::path& geo_path,
           const fs::path& out, double level) {
  const LoadedPipeline pipe = load_pipeline(basis_dir, models_dir);
  const GeometryParams target = read_geometry(geo_path);
  const Vector c_scaled = scaled_query(pipe, target);
  const ModeLayout layout = pipe.basis.basis.layout();
  const int total = layout.total();

  fs::create_directories(out);
  std::string csv = "t,mode,mean,sd\n";
  std::vector<double> scales;
  for (std::size_t t = 0; t < pipe.models.size(); ++t) {
    const auto pred = pipe.models[t].predict(c_scaled);
    scales.push_back(pred.scale);
    for (int k = 0; k < total; ++k) {
      csv += std::to_string(t) + "," + layout.mode_name(k) + "," + fmt(pred.mean(k)) + "," +
             fmt(std::sqrt(std::max(0.0, pred.cov(k, k)))) + "\n";
    }
  }
  write_text(out / "uq.csv", csv);

  json info;
  info["in_design_hull"] = pipe.models.front().in_design_hull(c_scaled);
  info["level"] = level;
  info["hdcr_chi2_quantile"] = chi_squared_quantile(total, level);
  info["scale_per_step"] = scales;
  write_json(out / "uq.json", info);

  json prov;
  prov["stage"] = "uq";
  prov["inputs"] = {{"basis", pipe.basis_checksum}, {"models", pipe.models_checksum}};
  write_provenance(out, prov);

  std::cout << "coefficient uncertainty written to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// tke

int cmd_tke(const fs::path& basis_dir, const fs::path& models_dir, const fs::path& geo_path,
            const fs::path& probes_path, const fs::path& out, const std::string& window_text,
            double level, const std::string& side_text, const fs::path& reference,
            const std::string& means_mode, int neighbors, int threads) {
  const LoadedPipeline pipe = load_pipeline(basis_dir, models_dir);
  const GeometryParams target = read_geometry(geo_path);
  const Vector c_scaled = scaled_query(pipe, target);
  const auto [w_begin, w_end] = parse_window(window_text);

  BandSide side = BandSide::lower;
  if (side_text == "upper") {
    side = BandSide::upper;
  } else if (side_text == "two") {
    side = BandSide::two_sided;
  } else if (side_text != "lower") {
    throw ValidationError("side must be lower, upper, or two");
  }
  if (means_mode != "prediction" && means_mode != "reference") {
    throw ValidationError("means must be 'prediction' or 'reference'");
  }
  if (means_mode == "reference" && reference.empty()) {
    throw ValidationError("means 'reference' needs --reference");
  }

  const json probes_json = read_json(probes_path);
  if (!probes_json.contains("probes") || probes_json["probes"].empty()) {
    throw ValidationError("probes file: 'probes' is missing or empty");
  }
  std::vector<std::string> names;
  Grid probes;
  probes.points.resize(static_cast<int>(probes_json["probes"].size()), 2);
  for (std::size_t i = 0; i < probes_json["probes"].size(); ++i) {
    const json& p = probes_json["probes"][i];
    names.push_back(p.at("name").get<std::string>());
    probes.points(static_cast<int>(i), 0) = p.at("x").get<double>();
    probes.points(static_cast<int>(i), 1) = p.at("y").get<double>();
  }

  TkeOptions options;
  options.idw_neighbors = neighbors;
  options.threads = static_cast<unsigned>(threads);
  if (probes_json.contains("velocity_variables")) {
    const auto components = probes_json["velocity_variables"].get<std::vector<std::string>>();
    if (components.size() != options.velocity_variables.size()) {
      throw ValidationError("probes file: velocity_variables must list exactly three components");
    }
    std::copy(components.begin(), components.end(), options.velocity_variables.begin());
  }
  const TkeEvaluator evaluator(pipe.basis.basis, pipe.models, c_scaled, target, probes, options);

  std::optional<SnapshotEnsemble> ref;
  std::vector<int> ref_points;
  std::vector<std::size_t> ref_vars;
  if (!reference.empty()) {
    ref = read_snapshot_run(reference);
    if (ref->steps() != evaluator.step_count()) {
      throw ValidationError("reference run and fitted models disagree on step count");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      ref_points.push_back(
          nearest_grid_point(ref->grid, probes.points(static_cast<int>(i), 0),
                             probes.points(static_cast<int>(i), 1)));
    }
    for (const auto& name : options.velocity_variables) {
      const auto it = std::find(ref->variables.begin(), ref->variables.end(), name);
      if (it == ref->variables.end()) {
        throw ValidationError("reference run lacks velocity variable '" + name + "'");
      }
      ref_vars.push_back(static_cast<std::size_t>(it - ref->variables.begin()));
    }
  }

  fs::create_directories(out);
  const int steps = evaluator.step_count();
  int covered = 0, total_points = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const int probe = static_cast<int>(i);

    Eigen::Vector3d time_mean;
    if (means_mode == "prediction") {
      time_mean = evaluator.window_time_mean(probe, w_begin, w_end);
    } else {
      time_mean.setZero();
      for (std::size_t a = 0; a < ref_vars.size(); ++a) {
        time_mean(static_cast<int>(a)) = ref->fields[ref_vars[a]]
                                             .row(ref_points[i])
                                             .segment(w_begin, w_end - w_begin)
                                             .mean();
      }
    }

    std::string csv = "t,kappa_hat";
    if (side != BandSide::upper) csv += ",lower";
    if (side != BandSide::lower) csv += ",upper";
    if (ref) csv += ",kappa_ref";
    csv += "\n";

    for (int t = 0; t < steps; ++t) {
      const double kappa = evaluator.tke_predict(probe, t, time_mean);
      const WncqDistribution dist = evaluator.tke_distribution(probe, t, time_mean);
      const TkeBand band = tke_confidence_band(dist, level, side);
      csv += std::to_string(t) + "," + fmt(kappa);
      if (side != BandSide::upper) csv += "," + fmt(band.lower);
      if (side != BandSide::lower) csv += "," + fmt(band.upper);
      if (ref) {
        // reference TKE about the reference's own window mean
        double kappa_ref = 0.0;
        for (std::size_t a = 0; a < ref_vars.size(); ++a) {
          const double mean = ref->fields[ref_vars[a]]
                                  .row(ref_points[i])
                                  .segment(w_begin, w_end - w_begin)
                                  .mean();
          const double d = ref->fields[ref_vars[a]](ref_points[i], t) - mean;
          kappa_ref += 0.5 * d * d;
        }
        csv += "," + fmt(kappa_ref);
        const bool inside = kappa_ref >= band.lower && kappa_ref <= band.upper;
        covered += inside ? 1 : 0;
        ++total_points;
      }
      csv += "\n";
    }
    write_text(out / ("tke_" + names[i] + ".csv"), csv);
  }

  json summary;
  summary["level"] = level;
  summary["side"] = side_text;
  summary["window"] = {w_begin, w_end};
  summary["means"] = means_mode;
  if (ref) {
    summary["coverage"] = total_points > 0 ? double(covered) / total_points : 0.0;
    summary["points"] = total_points;
  }
  write_json(out / "tke_summary.json", summary);

  json prov;
  prov["stage"] = "tke";
  prov["inputs"] = {{"basis", pipe.basis_checksum}, {"models", pipe.models_checksum}};
  write_provenance(out, prov);

  std::cout << "TKE bands for " << names.size() << " probes written to " << out.string() << "\n";
  if (ref) std::cout << "coverage " << fmt(summary["coverage"].get<double>()) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// couplings

int cmd_couplings(const fs::path& models_dir, const fs::path& out, int top_k, bool pool,
                  const std::string& window_text, const fs::path& basis_dir,
                  std::optional<double> pool_lambda) {
  const std::string models_checksum = verify_bundle(models_dir);
  const ModelBundle bundle = read_model_bundle(models_dir);
  const ModeLayout& layout = bundle.layout;

  CouplingGraph graph;
  json prov_inputs = {{"models", models_checksum}};
  if (pool) {
    if (basis_dir.empty() || !pool_lambda) {
      throw ValidationError("--pool needs --basis (for coefficients) and --lambda");
    }
    const std::string basis_checksum = verify_bundle(basis_dir);
    prov_inputs["basis"] = basis_checksum;
    const BasisBundle basis = read_basis_bundle(basis_dir);
    int w_begin = 0, w_end = basis.coefficients.steps();
    if (!window_text.empty()) std::tie(w_begin, w_end) = parse_window(window_text);
    if (w_begin < 0 || w_end > basis.coefficients.steps() || w_begin >= w_end) {
      throw ValidationError("window out of range");
    }

    // pool loadings over the window and fit one sparse precision to them
    const int n = basis.coefficients.runs();
    const int total = basis.coefficients.modes();
    Matrix pooled((w_end - w_begin) * n, total);
    for (int t = w_begin; t < w_end; ++t) {
      pooled.middleRows(static_cast<std::int64_t>(t - w_begin) * n, n) =
          basis.coefficients.slices[t];
    }
    const Matrix centered = pooled.rowwise() - pooled.colwise().mean();
    const Matrix s = centered.transpose() * centered / double(pooled.rows());
    const GlassoResult fit = glasso(s, *pool_lambda, within_variable_mask(layout));

    SliceFit slice;
    slice.precision = fit.precision;
    graph = extract_couplings({slice}, layout, top_k);
  } else {
    std::vector<SliceFit> fits(static_cast<std::size_t>(bundle.steps()));
    for (int t = 0; t < bundle.steps(); ++t) {
      fits[static_cast<std::size_t>(t)].precision = bundle.precision[static_cast<std::size_t>(t)];
    }
    graph = extract_couplings(fits, layout, top_k);
  }

  fs::create_directories(out);
  write_text(out / "couplings.csv", coupling_csv(graph));
  write_text(out / "couplings.dot", coupling_dot(graph));

  json prov;
  prov["stage"] = "couplings";
  prov["top_k"] = top_k;
  prov["pooled"] = pool;
  prov["inputs"] = prov_inputs;
  write_provenance(out, prov);

  std::cout << graph.edges.size() << " aggregated couplings written to " << out.string() << "\n";
  for (std::size_t e = 0; e < graph.edges.size() && e < 5; ++e) {
    const auto& edge = graph.edges[e];
    std::cout << "  " << layout.mode_name(edge.a) << " -- " << layout.mode_name(edge.b)
              << "  frequency " << fmt(edge.frequency) << "  weight " << fmt(edge.weight) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"surrogate pipeline for parametric spatio-temporal field ensembles"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic ensemble and its manifest");
  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 0;
  bool synth_seed_set = false;
  synth->add_option("--spec", synth_spec, "synthetic spec JSON")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "override the spec's seed")
      ->each([&](const std::string&) { synth_seed_set = true; });

  // extract
  auto* extract = app.add_subcommand("extract", "extract the common basis from snapshot archives");
  std::string extract_manifest, extract_out;
  double extract_energy = 0.99;
  bool extract_center = false;
  int extract_neighbors = 10, extract_threads = 4;
  extract->add_option("--manifest", extract_manifest, "run manifest JSON")->required();
  extract->add_option("--out", extract_out, "basis bundle directory")->required();
  extract->add_option("--energy", extract_energy, "spectral energy target in (0, 1]");
  extract->add_flag("--center", extract_center, "subtract grand means before decomposition");
  extract->add_option("--neighbors", extract_neighbors, "IDW neighbor count");
  extract->add_option("--threads", extract_threads, "worker threads");

  // fit
  auto* fit = app.add_subcommand("fit", "fit per-time-step sparse co-kriging models");
  std::string fit_manifest, fit_basis, fit_out, fit_config;
  double fit_lambda = 0.0;
  int fit_cv = 0, fit_topk = 0, fit_starts = 0, fit_threads = 4;
  std::uint64_t fit_seed = 0;
  bool fit_lambda_set = false, fit_seed_set = false;
  fit->add_option("--manifest", fit_manifest, "run manifest JSON (design table)")->required();
  fit->add_option("--basis", fit_basis, "basis bundle directory")->required();
  fit->add_option("--out", fit_out, "model bundle directory")->required();
  fit->add_option("--config", fit_config, "FitConfig JSON");
  fit->add_option("--lambda", fit_lambda, "fixed glasso penalty")
      ->each([&](const std::string&) { fit_lambda_set = true; });
  fit->add_option("--cv-folds", fit_cv, "tune lambda by cross-validation on the middle slice");
  fit->add_option("--top-k", fit_topk, "tune lambda per slice for exactly k couplings");
  fit->add_option("--starts", fit_starts, "multi-start count");
  fit->add_option("--seed", fit_seed, "multi-start seed")
      ->each([&](const std::string&) { fit_seed_set = true; });
  fit->add_option("--threads", fit_threads, "worker threads");

  // predict
  auto* predict = app.add_subcommand("predict", "predict mean and variance fields");
  std::string predict_basis, predict_models, predict_geo, predict_out, predict_sidecar,
      predict_reference;
  int predict_neighbors = 10, predict_threads = 4;
  predict->add_option("--basis", predict_basis, "basis bundle directory")->required();
  predict->add_option("--models", predict_models, "model bundle directory")->required();
  predict->add_option("--geometry", predict_geo, "target geometry JSON")->required();
  predict->add_option("--out", predict_out, "output directory")->required();
  predict->add_option("--sidecar", predict_sidecar, "regions/probes/grid JSON");
  predict->add_option("--reference", predict_reference, "reference snapshot archive (enables MRE)");
  predict->add_option("--neighbors", predict_neighbors, "IDW neighbor count");
  predict->add_option("--threads", predict_threads, "worker threads");

  // uq
  auto* uq = app.add_subcommand("uq", "coefficient predictive uncertainty at a geometry");
  std::string uq_basis, uq_models, uq_geo, uq_out;
  double uq_level = 0.9;
  uq->add_option("--basis", uq_basis, "basis bundle directory")->required();
  uq->add_option("--models", uq_models, "model bundle directory")->required();
  uq->add_option("--geometry", uq_geo, "target geometry JSON")->required();
  uq->add_option("--out", uq_out, "output directory")->required();
  uq->add_option("--level", uq_level, "HDCR level in (0, 1)");

  // tke
  auto* tke = app.add_subcommand("tke", "TKE predictions and confidence bands at probes");
  std::string tke_basis, tke_models, tke_geo, tke_probes, tke_out, tke_window = "0:1";
  std::string tke_side = "lower", tke_means = "prediction", tke_reference;
  double tke_level = 0.9;
  int tke_neighbors = 10, tke_threads = 4;
  tke->add_option("--basis", tke_basis, "basis bundle directory")->required();
  tke->add_option("--models", tke_models, "model bundle directory")->required();
  tke->add_option("--geometry", tke_geo, "target geometry JSON")->required();
  tke->add_option("--probes", tke_probes, "probes JSON (names + coordinates)")->required();
  tke->add_option("--out", tke_out, "output directory")->required();
  tke->add_option("--window", tke_window, "fully-developed window 'begin:end'")->required();
  tke->add_option("--level", tke_level, "band level in (0, 1)");
  tke->add_option("--side", tke_side, "band side: lower, upper, two");
  tke->add_option("--reference", tke_reference, "reference snapshot archive (enables coverage)");
  tke->add_option("--means", tke_means, "time means from 'prediction' or 'reference'");
  tke->add_option("--neighbors", tke_neighbors, "IDW neighbor count");
  tke->add_option("--threads", tke_threads, "worker threads");

  // couplings
  auto* couplings = app.add_subcommand("couplings", "extract the mode coupling graph");
  std::string couplings_models, couplings_out, couplings_window, couplings_basis;
  int couplings_topk = 9;
  bool couplings_pool = false;
  double couplings_lambda = 0.0;
  bool couplings_lambda_set = false;
  couplings->add_option("--models", couplings_models, "model bundle directory")->required();
  couplings->add_option("--out", couplings_out, "output directory")->required();
  couplings->add_option("--top-k", couplings_topk, "couplings kept per slice");
  couplings->add_flag("--pool", couplings_pool, "pool loadings over a window, fit one precision");
  couplings->add_option("--window", couplings_window, "pooling window 'begin:end'");
  couplings->add_option("--basis", couplings_basis, "basis bundle (needed with --pool)");
  couplings->add_option("--lambda", couplings_lambda, "glasso penalty for the pooled fit")
      ->each([&](const std::string&) { couplings_lambda_set = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) {
      return cmd_synth(synth_spec, synth_out,
                       synth_seed_set ? std::optional<std::uint64_t>(synth_seed) : std::nullopt);
    }
    if (extract->parsed()) {
      return cmd_extract(extract_manifest, extract_out, extract_energy, extract_center,
                         extract_neighbors, extract_threads);
    }
    if (fit->parsed()) {
      return cmd_fit(fit_manifest, fit_basis, fit_out, fit_config,
                     fit_lambda_set ? std::optional<double>(fit_lambda) : std::nullopt,
                     fit_cv > 0 ? std::optional<int>(fit_cv) : std::nullopt,
                     fit_topk > 0 ? std::optional<int>(fit_topk) : std::nullopt,
                     fit_starts > 0 ? std::optional<int>(fit_starts) : std::nullopt,
                     fit_seed_set ? std::optional<std::uint64_t>(fit_seed) : std::nullopt,
                     fit_threads);
    }
    if (predict->parsed()) {
      return cmd_predict(predict_basis, predict_models, predict_geo, predict_out, predict_sidecar,
                         predict_reference, predict_neighbors, predict_threads);
    }
    if (uq->parsed()) return cmd_uq(uq_basis, uq_models, uq_geo, uq_out, uq_level);
    if (tke->parsed()) {
      return cmd_tke(tke_basis, tke_models, tke_geo, tke_probes, tke_out, tke_window, tke_level,
                     tke_side, tke_reference, tke_means, tke_neighbors, tke_threads);
    }
    if (couplings->parsed()) {
      return cmd_couplings(couplings_models, couplings_out, couplings_topk, couplings_pool,
                           couplings_window, couplings_basis,
                           couplings_lambda_set ? std::optional<double>(couplings_lambda)
                                                : std::nullopt);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const StageOrderError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed input: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
