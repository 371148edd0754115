#pragma once

#include <string>
#include <vector>

#include "circuitscope/common.hpp"
#include "circuitscope/synthcohort.hpp"

namespace circuitscope::connectome {

using synthcohort::GroupLabel;
using synthcohort::RoiTimeSeries;

struct WindowSpec {
  int window_count = 10;  // T
  int window_length = 0;  // scans per window; 0 resolves to scans / window_count
  int stride = 0;         // 0 resolves to window_length (non-overlapping)
  bool fisher_z = false;  // atanh-transform correlations (widens the weight range)

  WindowSpec resolved(int scans) const;
};

void validate(const WindowSpec& spec, int scans);  // throws Validation, reports max feasible T

struct BrainGraphSnapshot {
  int timestep = 0;      // 1-based
  Matrix adjacency;      // M x M, symmetric, unit diagonal
  Matrix node_features;  // M x window_length (the windowed raw series)
  std::vector<int> zero_variance_regions;
};

struct DynamicBrainNetwork {
  std::string subject_id;
  GroupLabel group = GroupLabel::Saline;
  std::vector<std::string> region_labels;
  std::vector<BrainGraphSnapshot> snapshots;

  int regions() const { return snapshots.empty() ? 0 : snapshots.front().adjacency.rows; }
  int timesteps() const { return static_cast<int>(snapshots.size()); }
};

// Weighted undirected edge of one snapshot.
struct Edge {
  int i, j;
  double weight;
};

std::vector<Matrix> split_windows(const RoiTimeSeries& series, const WindowSpec& spec);

struct PearsonResult {
  Matrix adjacency;
  std::vector<int> zero_variance_regions;
};

// Pearson correlation of every row pair; unit diagonal; zero-variance rows
// correlate 0 with everything and get flagged rather than aborting.
PearsonResult pearson_matrix(const Matrix& segment);

DynamicBrainNetwork build_dynamic_network(const RoiTimeSeries& series, GroupLabel group,
                                          const WindowSpec& spec);

// upper-triangle edge list (i<j) of one snapshot
std::vector<Edge> edge_set(const BrainGraphSnapshot& snapshot);

void validate(const BrainGraphSnapshot& snapshot, bool fisher_z = false);

}  // namespace circuitscope::connectome
