#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "circuitscope/connectome.hpp"
#include "circuitscope/rng.hpp"
#include "circuitscope/synthcohort.hpp"

using namespace circuitscope;
using namespace circuitscope::connectome;
using synthcohort::Cohort;
using synthcohort::GeneratorConfig;
using synthcohort::GroupLabel;
using synthcohort::PlantedCircuit;

namespace {

RoiTimeSeries series_from(const Matrix& values, const std::string& id = "s") {
  RoiTimeSeries s;
  s.subject_id = id;
  for (int i = 0; i < values.rows; ++i) s.region_labels.push_back("r" + std::to_string(i));
  s.values = values;
  return s;
}

WindowSpec spec_10x20() {
  WindowSpec w;
  w.window_count = 10;
  w.window_length = 20;
  w.stride = 20;
  return w;
}

}  // namespace

TEST_CASE("ten disjoint windows cover 200 scans exactly") {
  Matrix x(3, 200);
  Rng rng(1);
  for (double& v : x.v) v = rng.normal();
  auto segs = split_windows(series_from(x), spec_10x20());
  REQUIRE(segs.size() == 10);
  // reconstruct the used scans from the segments
  for (int t = 0; t < 10; ++t) {
    REQUIRE(segs[t].cols == 20);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 20; ++c) {
        CHECK(segs[t].at(r, c) == x.at(r, t * 20 + c));
      }
    }
  }
}

TEST_CASE("trailing scans beyond the last window are discarded") {
  Matrix x(2, 205);
  Rng rng(2);
  for (double& v : x.v) v = rng.normal();
  auto segs = split_windows(series_from(x), spec_10x20());
  CHECK(segs.size() == 10);
  CHECK(segs.back().at(0, 19) == x.at(0, 199));
}

TEST_CASE("infeasible spec reports the max feasible window count") {
  Matrix x(2, 199);
  Rng rng(3);
  for (double& v : x.v) v = rng.normal();
  try {
    split_windows(series_from(x), spec_10x20());
    FAIL("expected validation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Validation);
    CHECK(std::string(e.what()).find("max feasible window_count = 9") != std::string::npos);
  }
}

TEST_CASE("overlapping stride windows start where expected") {
  Matrix x(2, 50);
  for (int t = 0; t < 50; ++t) {
    x.at(0, t) = t;
    x.at(1, t) = -t;
  }
  WindowSpec w;
  w.window_count = 5;
  w.window_length = 10;
  w.stride = 5;
  auto segs = split_windows(series_from(x), w);
  REQUIRE(segs.size() == 5);
  for (int t = 0; t < 5; ++t) CHECK(segs[t].at(0, 0) == 5.0 * t);
}

TEST_CASE("pearson of affinely related rows is 1") {
  Matrix x(2, 4);
  for (int t = 0; t < 4; ++t) {
    x.at(0, t) = t + 1.0;
    x.at(1, t) = 2.0 * (t + 1.0) + 3.0;
  }
  auto res = pearson_matrix(x);
  CHECK(res.adjacency.at(0, 1) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("pearson hand case equals 0.8 exactly") {
  Matrix x(2, 4);
  x.at(0, 0) = 1; x.at(0, 1) = 2; x.at(0, 2) = 3; x.at(0, 3) = 4;
  x.at(1, 0) = 1; x.at(1, 1) = 3; x.at(1, 2) = 2; x.at(1, 3) = 4;
  auto res = pearson_matrix(x);
  CHECK(std::abs(res.adjacency.at(0, 1) - 0.8) <= 1e-12);
  CHECK(std::abs(res.adjacency.at(1, 0) - 0.8) <= 1e-12);
}

TEST_CASE("constant rows correlate zero and are flagged") {
  Matrix x(3, 5);
  for (int t = 0; t < 5; ++t) {
    x.at(0, t) = 2.5;
    x.at(1, t) = t;
    x.at(2, t) = t * t;
  }
  auto res = pearson_matrix(x);
  REQUIRE(res.zero_variance_regions.size() == 1);
  CHECK(res.zero_variance_regions[0] == 0);
  CHECK(res.adjacency.at(0, 1) == 0.0);
  CHECK(res.adjacency.at(0, 2) == 0.0);
  CHECK(res.adjacency.at(0, 0) == 1.0);
}

TEST_CASE("non-finite input names its coordinate") {
  Matrix x(2, 4);
  x.at(1, 2) = std::numeric_limits<double>::infinity();
  try {
    pearson_matrix(x);
    FAIL("expected computation error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("region 1") != std::string::npos);
    CHECK(msg.find("scan 2") != std::string::npos);
  }
}

TEST_CASE("pearson invariants over random segments") {
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    const int m = 2 + static_cast<int>(rng.below(8));
    const int len = 3 + static_cast<int>(rng.below(30));
    Matrix x(m, len);
    for (double& v : x.v) v = rng.normal();
    auto res = pearson_matrix(x);
    const Matrix& a = res.adjacency;
    for (int i = 0; i < m; ++i) {
      CHECK(a.at(i, i) == 1.0);
      for (int j = 0; j < m; ++j) {
        CHECK(std::abs(a.at(i, j) - a.at(j, i)) <= 1e-12);
        CHECK(std::abs(a.at(i, j)) <= 1.0);
      }
    }
  }
}

TEST_CASE("permuting regions permutes the adjacency consistently") {
  Rng rng(13);
  Matrix x(6, 40);
  for (double& v : x.v) v = rng.normal();
  std::vector<int> perm = {3, 1, 5, 0, 4, 2};
  Matrix px(6, 40);
  for (int i = 0; i < 6; ++i) {
    for (int t = 0; t < 40; ++t) px.at(i, t) = x.at(perm[i], t);
  }
  Matrix a = pearson_matrix(x).adjacency;
  Matrix pa = pearson_matrix(px).adjacency;
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      CHECK(pa.at(i, j) == doctest::Approx(a.at(perm[i], perm[j])).epsilon(1e-14));
    }
  }
}

TEST_CASE("dynamic network has valid snapshots of the right shape") {
  GeneratorConfig cfg;
  cfg.regions = 30;
  cfg.scans = 200;
  cfg.subjects_per_group = 1;
  Cohort c = synthcohort::generate_cohort(cfg, 9);
  DynamicBrainNetwork net =
      build_dynamic_network(c.subjects[0].series, c.subjects[0].group, spec_10x20());
  CHECK(net.timesteps() == 10);
  CHECK(net.regions() == 30);
  for (const auto& snap : net.snapshots) {
    validate(snap);
    CHECK(snap.node_features.cols == 20);
  }
  for (int t = 0; t < 10; ++t) CHECK(net.snapshots[t].timestep == t + 1);
}

TEST_CASE("saline snapshots show no regime change on planted edges") {
  GeneratorConfig cfg;
  cfg.regions = 16;
  cfg.scans = 200;
  cfg.subjects_per_group = 4;
  cfg.planted_edge_count = 3;
  const int seeds = 20;
  double worst = 0;
  for (int seed = 0; seed < seeds; ++seed) {
    Cohort c = synthcohort::generate_cohort(cfg, 500 + seed);
    const PlantedCircuit& circuit = c.subjects[cfg.subjects_per_group].circuit;  // nicotine truth
    for (const auto& [i, j] : circuit.edges) {
      double delta = 0;
      int n = 0;
      for (const auto& s : c.subjects) {
        if (s.group != GroupLabel::Saline) continue;
        DynamicBrainNetwork net = build_dynamic_network(s.series, s.group, spec_10x20());
        double pre = 0, post = 0;
        for (int t = 0; t < 5; ++t) pre += net.snapshots[t].adjacency.at(i, j);
        for (int t = 5; t < 10; ++t) post += net.snapshots[t].adjacency.at(i, j);
        delta += (post - pre) / 5.0;
        ++n;
      }
      worst = std::max(worst, std::abs(delta / n));
    }
  }
  CHECK(worst < cfg.effect_low);  // smaller than the weakest planted effect
}

TEST_CASE("high-dose regime change dominates unplanted edges") {
  GeneratorConfig cfg;
  cfg.regions = 16;
  cfg.scans = 200;
  cfg.subjects_per_group = 1;
  cfg.planted_edge_count = 3;
  Cohort c = synthcohort::generate_cohort(cfg, 42);
  const auto* high = &c.subjects[2];
  REQUIRE(high->group == GroupLabel::HighNicotine);
  DynamicBrainNetwork net = build_dynamic_network(high->series, high->group, spec_10x20());
  // brute force |delta| between snapshot halves for every edge
  std::vector<double> unplanted;
  std::vector<double> planted;
  for (int i = 0; i < cfg.regions; ++i) {
    for (int j = i + 1; j < cfg.regions; ++j) {
      double pre = 0, post = 0;
      for (int t = 0; t < 5; ++t) pre += net.snapshots[t].adjacency.at(i, j);
      for (int t = 5; t < 10; ++t) post += net.snapshots[t].adjacency.at(i, j);
      double d = std::abs(post - pre) / 5.0;
      if (high->circuit.contains(i, j)) planted.push_back(d);
      else unplanted.push_back(d);
    }
  }
  std::sort(unplanted.begin(), unplanted.end());
  const double q95 = unplanted[static_cast<size_t>(0.95 * unplanted.size())];
  for (double d : planted) CHECK(d > q95);
}

TEST_CASE("fisher z option widens weights but keeps unit diagonal") {
  Rng rng(14);
  Matrix x(4, 60);
  for (double& v : x.v) v = rng.normal();
  WindowSpec w;
  w.window_count = 3;
  w.window_length = 20;
  w.fisher_z = true;
  DynamicBrainNetwork net = build_dynamic_network(series_from(x), GroupLabel::Saline, w);
  for (const auto& snap : net.snapshots) {
    validate(snap, true);
    for (int i = 0; i < 4; ++i) CHECK(snap.adjacency.at(i, i) == 1.0);
  }
  // z values equal atanh of the raw correlations
  WindowSpec raw = w;
  raw.fisher_z = false;
  DynamicBrainNetwork plain = build_dynamic_network(series_from(x), GroupLabel::Saline, raw);
  for (int t = 0; t < 3; ++t) {
    CHECK(net.snapshots[t].adjacency.at(0, 1) ==
          doctest::Approx(std::atanh(plain.snapshots[t].adjacency.at(0, 1))).epsilon(1e-12));
  }
}
