#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "circuitscope/common.hpp"

namespace circuitscope::synthcohort {

enum class GroupLabel { Saline, LowNicotine, HighNicotine };

const char* to_string(GroupLabel g);
GroupLabel group_from_string(const std::string& s);  // throws Parse on unknown label

struct RoiTimeSeries {
  std::string subject_id;
  std::vector<std::string> region_labels;  // M unique labels, order-stable
  Matrix values;                           // M x S
};

// Ground truth for one subject: the set of perturbed connections, the signed
// covariance shift applied per dose, and the scan where the regime changes.
struct PlantedCircuit {
  std::vector<std::pair<int, int>> edges;  // unordered pairs, i<j, sorted
  std::vector<int> signs;                  // +1/-1 per edge, parallel to edges
  double effect_size = 0.0;
  int onset_scan = 0;

  bool contains(int i, int j) const {
    if (i > j) std::swap(i, j);
    for (const auto& e : edges) {
      if (e.first == i && e.second == j) return true;
    }
    return false;
  }
};

struct GeneratorConfig {
  int regions = 30;  // M
  int scans = 200;   // S
  int subjects_per_group = 12;
  double base_density = 0.1;    // fraction of off-diagonal pairs given base covariance
  double base_strength = 0.35;  // magnitude scale of those entries
  double noise_level = 0.25;    // white component mixed into the base covariance
  double effect_high = 0.6;
  double effect_low = 0.3;
  int planted_edge_count = 6;  // edges form a matching (no shared endpoints)
  int onset_scan = -1;         // -1 resolves to scans/2
  bool share_circuit_across_doses = true;
  std::vector<std::string> region_labels;  // optional; default R000..R{M-1}

  int resolved_onset() const { return onset_scan < 0 ? scans / 2 : onset_scan; }
};

void validate(const GeneratorConfig& cfg);  // throws Validation

struct Subject {
  RoiTimeSeries series;
  GroupLabel group = GroupLabel::Saline;
  PlantedCircuit circuit;
};

struct Cohort {
  std::vector<Subject> subjects;
  GeneratorConfig config;
  uint64_t seed = 0;

  int regions() const { return config.regions; }
  int scans() const { return config.scans; }
  const std::vector<std::string>& region_labels() const {
    return subjects.front().series.region_labels;
  }
};

// The latent factor model behind a cohort: every subject draws standard
// normal factors mapped through the Cholesky factor of these matrices.
// All three share a unit diagonal up to the diagonal loading applied to
// keep the shifted matrices positive definite.
struct GeneratorModel {
  Matrix base;       // saline regime, unit diagonal
  Matrix post_low;   // low-dose regime from onset_scan on
  Matrix post_high;  // high-dose regime from onset_scan on
  PlantedCircuit circuit_low;
  PlantedCircuit circuit_high;
};

GeneratorModel build_model(const GeneratorConfig& cfg, uint64_t seed);

Cohort generate_cohort(const GeneratorConfig& cfg, uint64_t seed, int workers = 1);

// Region series = arithmetic mean of its voxels' series, per scan.
// voxel_region maps each row of voxel_series to a region id in [0, region_count).
RoiTimeSeries aggregate_voxels(const Matrix& voxel_series, const std::vector<int>& voxel_region,
                               int region_count, const std::string& subject_id = "aggregated",
                               std::vector<std::string> region_labels = {});

// Cohort directory layout: manifest.json plus one CSV per subject
// (rows = regions in manifest label order, columns = scans, header row of
// scan indices, shortest-round-trip decimal text).
void write_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort read_cohort(const std::filesystem::path& dir);

}  // namespace circuitscope::synthcohort
