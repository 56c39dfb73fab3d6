#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flowemu/estimate.hpp"

namespace flowemu {

/// Mode-coupling graph aggregated over the fitted time steps. Nodes are the
/// kept modes, named through the layout ("u1", "P3"); an edge records how
/// often a cross-variable pair was selected and the mean absolute partial
/// correlation over the steps that selected it.
struct CouplingGraph {
  struct Edge {
    int a = 0;  // flat mode indices, a < b
    int b = 0;
    double frequency = 0.0;
    double weight = 0.0;
  };

  ModeLayout layout;
  std::vector<Edge> edges;            // frequency desc, then weight desc
  std::vector<int> per_slice_counts;  // edges kept at each time step
  int target = 0;                     // requested per-slice edge count
};

/// Reads the sparse precision pattern of every fitted slice and aggregates
/// the selected couplings. Each slice contributes its nonzero cross-variable
/// pairs, trimmed to the k largest |partial correlation| if the fit kept
/// more; within-variable pairs never enter the graph. Edges are ranked by
/// selection frequency, ties broken by mean magnitude.
inline CouplingGraph extract_couplings(const std::vector<SliceFit>& fits,
                                       const ModeLayout& layout, int k) {
  if (fits.empty()) throw ValidationError("couplings: no fitted time slices");
  if (k < 0) throw ValidationError("couplings: edge target must be nonnegative");
  const int modes = layout.total();

  std::vector<int> var_of(modes);
  for (int v = 0; v < static_cast<int>(layout.counts.size()); ++v) {
    for (int m = 0; m < layout.counts[v]; ++m) var_of[layout.offset(v) + m] = v;
  }

  CouplingGraph graph;
  graph.layout = layout;
  graph.target = k;
  graph.per_slice_counts.reserve(fits.size());

  struct Tally {
    int count = 0;
    double magnitude = 0.0;
  };
  std::map<std::pair<int, int>, Tally> tallies;

  for (std::size_t t = 0; t < fits.size(); ++t) {
    const Matrix& theta = fits[t].precision;
    if (theta.rows() != modes || theta.cols() != modes) {
      throw ValidationError("couplings: slice " + std::to_string(t) +
                            " carries no fitted precision for this layout");
    }
    for (int i = 0; i < modes; ++i) {
      if (!(theta(i, i) > 0.0)) {
        throw ValidationError("couplings: slice " + std::to_string(t) +
                              " precision has a nonpositive diagonal");
      }
    }

    struct Candidate {
      double magnitude;
      int a;
      int b;
    };
    std::vector<Candidate> selected;
    for (int i = 0; i < modes; ++i) {
      for (int j = i + 1; j < modes; ++j) {
        if (var_of[i] == var_of[j] || theta(i, j) == 0.0) continue;
        const double pc = -theta(i, j) / std::sqrt(theta(i, i) * theta(j, j));
        selected.push_back({std::fabs(pc), i, j});
      }
    }
    std::sort(selected.begin(), selected.end(), [](const Candidate& x, const Candidate& y) {
      if (x.magnitude != y.magnitude) return x.magnitude > y.magnitude;
      return std::make_pair(x.a, x.b) < std::make_pair(y.a, y.b);
    });
    if (static_cast<int>(selected.size()) > k) selected.resize(k);

    graph.per_slice_counts.push_back(static_cast<int>(selected.size()));
    for (const Candidate& c : selected) {
      Tally& tally = tallies[{c.a, c.b}];
      tally.count += 1;
      tally.magnitude += c.magnitude;
    }
  }

  const double steps = static_cast<double>(fits.size());
  graph.edges.reserve(tallies.size());
  for (const auto& [pair, tally] : tallies) {
    CouplingGraph::Edge e;
    e.a = pair.first;
    e.b = pair.second;
    e.frequency = tally.count / steps;
    e.weight = tally.magnitude / tally.count;
    graph.edges.push_back(e);
  }
  std::sort(graph.edges.begin(), graph.edges.end(),
            [](const CouplingGraph::Edge& x, const CouplingGraph::Edge& y) {
              if (x.frequency != y.frequency) return x.frequency > y.frequency;
              if (x.weight != y.weight) return x.weight > y.weight;
              return std::make_pair(x.a, x.b) < std::make_pair(y.a, y.b);
            });
  return graph;
}

namespace detail {

inline std::string fixed6(double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", value);
  return buf;
}

}  // namespace detail

/// Edge list as CSV: source, target, selection frequency, mean |partial
/// correlation|; rows in rank order.
inline std::string coupling_csv(const CouplingGraph& graph) {
  std::string out = "source,target,frequency,mean_abs_partial_correlation\n";
  for (const auto& e : graph.edges) {
    out += graph.layout.mode_name(e.a) + "," + graph.layout.mode_name(e.b) + "," +
           detail::fixed6(e.frequency) + "," + detail::fixed6(e.weight) + "\n";
  }
  return out;
}

/// Undirected DOT rendering: every mode appears as a node, edge labels carry
/// weight and frequency, line width scales with the weight.
inline std::string coupling_dot(const CouplingGraph& graph) {
  std::string out = "graph couplings {\n  node [shape=ellipse];\n";
  for (int flat = 0; flat < graph.layout.total(); ++flat) {
    out += "  \"" + graph.layout.mode_name(flat) + "\";\n";
  }
  for (const auto& e : graph.edges) {
    out += "  \"" + graph.layout.mode_name(e.a) + "\" -- \"" + graph.layout.mode_name(e.b) +
           "\" [label=\"" + detail::fixed6(e.weight) + " @" + detail::fixed6(e.frequency) +
           "\", penwidth=" + detail::fixed6(1.0 + 4.0 * e.weight) + "];\n";
  }
  out += "}\n";
  return out;
}

}  // namespace flowemu
