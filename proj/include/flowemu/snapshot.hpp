#pragma once

#include <string>
#include <vector>

#include "flowemu/common.hpp"
#include "flowemu/geometry.hpp"

namespace flowemu {

/// One simulation run: its geometry, its grid, and T snapshots of each field
/// variable (columns of a J x T matrix, one matrix per variable).
struct SnapshotEnsemble {
  GeometryParams geometry;
  Grid grid;
  std::vector<std::string> variables;
  std::vector<Matrix> fields;

  int steps() const { return fields.empty() ? 0 : static_cast<int>(fields.front().cols()); }
};

inline void validate(const SnapshotEnsemble& run) {
  validate(run.grid);
  validate(run.geometry);
  if (run.variables.empty()) throw ValidationError("snapshot run: no variables");
  if (run.variables.size() != run.fields.size()) {
    throw ValidationError("snapshot run: variable names and field blocks disagree");
  }
  const int steps = run.steps();
  if (steps < 1) throw ValidationError("snapshot run: no time steps");
  for (std::size_t v = 0; v < run.fields.size(); ++v) {
    if (run.fields[v].rows() != run.grid.size() || run.fields[v].cols() != steps) {
      throw ValidationError("snapshot run: field '" + run.variables[v] + "' shape mismatch");
    }
    if (!run.fields[v].allFinite()) {
      throw ValidationError("snapshot run: field '" + run.variables[v] + "' has non-finite values");
    }
  }
}

/// Index of the run whose grid becomes the common grid: the densest one,
/// ties resolved toward the lowest run index.
inline int select_common_run(const std::vector<SnapshotEnsemble>& runs) {
  if (runs.empty()) throw ValidationError("select_common_run: no runs");
  int best = 0;
  for (int i = 1; i < static_cast<int>(runs.size()); ++i) {
    if (runs[i].grid.size() > runs[best].grid.size()) best = i;
  }
  return best;
}

}  // namespace flowemu
