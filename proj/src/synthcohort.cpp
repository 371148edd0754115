#include "circuitscope/synthcohort.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "circuitscope/parallel.hpp"
#include "circuitscope/rng.hpp"
#include "json.hpp"

namespace circuitscope::synthcohort {

namespace {

constexpr double kMaxAbsCovariance = 0.95;

// Lower-triangular Cholesky; returns false if the matrix is not positive
// definite at working precision.
bool cholesky(const Matrix& a, Matrix& l) {
  const int n = a.rows;
  l = Matrix(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a.at(i, j);
      for (int k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      if (i == j) {
        if (!(s > 1e-12)) return false;
        l.at(i, i) = std::sqrt(s);
      } else {
        l.at(i, j) = s / l.at(j, j);
      }
    }
  }
  return true;
}

// Repairs near-singular matrices by adding eps*I, eps doubling from 1e-6.
bool load_and_factor(const Matrix& a, Matrix& l, int max_rounds = 10) {
  if (cholesky(a, l)) return true;
  double eps = 1e-6;
  for (int round = 0; round < max_rounds; ++round) {
    Matrix b = a;
    for (int i = 0; i < b.rows; ++i) b.at(i, i) += eps;
    if (cholesky(b, l)) return true;
    eps *= 2.0;
  }
  return false;
}

std::string default_label(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "R%03d", i);
  return buf;
}

// Smallest eigenvalue of a symmetric matrix, estimated by power iteration on
// s*I - A with s an upper bound on the spectrum. Deterministic start vector;
// the small slack subtracted at the end keeps the estimate on the safe side.
double min_eigenvalue(const Matrix& a) {
  const int n = a.rows;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int j = 0; j < n; ++j) row += std::abs(a.at(i, j));
    s = std::max(s, row);
  }
  std::vector<double> v(n), w(n);
  for (int i = 0; i < n; ++i) v[i] = 1.0 + 0.01 * i;
  double lambda = 0.0;
  for (int iter = 0; iter < 300; ++iter) {
    for (int i = 0; i < n; ++i) {
      double acc = s * v[i];
      const double* ai = a.row_ptr(i);
      for (int j = 0; j < n; ++j) acc -= ai[j] * v[j];
      w[i] = acc;
    }
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) break;
    lambda = norm;
    for (int i = 0; i < n; ++i) v[i] = w[i] / norm;
  }
  return s - lambda - 0.02;
}

std::string format_double(double x) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

PlantedCircuit sample_circuit(const GeneratorConfig& cfg, uint64_t seed, uint64_t stream,
                              double effect) {
  Rng rng = Rng::derive(seed, 2, stream);
  std::vector<int> order(cfg.regions);
  for (int i = 0; i < cfg.regions; ++i) order[i] = i;
  rng.shuffle(order);
  PlantedCircuit circuit;
  circuit.effect_size = effect;
  circuit.onset_scan = cfg.resolved_onset();
  for (int k = 0; k < cfg.planted_edge_count; ++k) {
    int a = order[2 * k], b = order[2 * k + 1];
    if (a > b) std::swap(a, b);
    circuit.edges.emplace_back(a, b);
  }
  std::sort(circuit.edges.begin(), circuit.edges.end());
  for (size_t k = 0; k < circuit.edges.size(); ++k) {
    circuit.signs.push_back(k % 2 == 0 ? 1 : -1);
  }
  return circuit;
}

Matrix shifted_covariance(const Matrix& base, const PlantedCircuit& circuit, double effect) {
  Matrix m = base;
  for (size_t k = 0; k < circuit.edges.size(); ++k) {
    auto [i, j] = circuit.edges[k];
    double v = m.at(i, j) + circuit.signs[k] * effect;
    v = std::clamp(v, -kMaxAbsCovariance, kMaxAbsCovariance);
    m.at(i, j) = v;
    m.at(j, i) = v;
  }
  return m;
}

[[noreturn]] void generation_failure(const Matrix& m, const PlantedCircuit& circuit) {
  // name the planted edge carrying the largest shifted magnitude
  int bi = circuit.edges.front().first, bj = circuit.edges.front().second;
  double best = -1.0;
  for (const auto& [i, j] : circuit.edges) {
    if (std::abs(m.at(i, j)) > best) {
      best = std::abs(m.at(i, j));
      bi = i;
      bj = j;
    }
  }
  throw Error(ErrorKind::Generation,
              "perturbed covariance is not positive definite after 10 loading rounds; "
              "offending edge (" + std::to_string(bi) + "," + std::to_string(bj) + ")");
}

}  // namespace

const char* to_string(GroupLabel g) {
  switch (g) {
    case GroupLabel::Saline: return "Saline";
    case GroupLabel::LowNicotine: return "LowNicotine";
    case GroupLabel::HighNicotine: return "HighNicotine";
  }
  return "?";
}

GroupLabel group_from_string(const std::string& s) {
  if (s == "Saline") return GroupLabel::Saline;
  if (s == "LowNicotine") return GroupLabel::LowNicotine;
  if (s == "HighNicotine") return GroupLabel::HighNicotine;
  throw Error(ErrorKind::Parse, "unknown group label: " + s);
}

void validate(const GeneratorConfig& cfg) {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Validation, msg); };
  if (cfg.regions < 2) fail("regions must be >= 2");
  if (cfg.scans < 30) fail("scans must be >= 30");
  if (cfg.subjects_per_group < 1) fail("subjects_per_group must be >= 1");
  if (!(cfg.base_density > 0.0 && cfg.base_density <= 1.0)) fail("base_density must be in (0,1]");
  if (!(cfg.base_strength > 0.0)) fail("base_strength must be > 0");
  if (!(cfg.noise_level > 0.0)) fail("noise_level must be > 0");
  if (!(cfg.effect_low > 0.0)) fail("effect sizes require high > low > 0");
  if (!(cfg.effect_high > cfg.effect_low)) fail("effect sizes require high > low > 0");
  if (cfg.planted_edge_count < 1) fail("planted_edge_count must be >= 1");
  if (2 * cfg.planted_edge_count > cfg.regions) {
    fail("planted_edge_count too large: a matching needs 2*edges <= regions");
  }
  int onset = cfg.resolved_onset();
  if (onset < 0 || onset >= cfg.scans) fail("onset_scan must lie in [0, scans)");
  if (!cfg.region_labels.empty()) {
    if (static_cast<int>(cfg.region_labels.size()) != cfg.regions) {
      fail("region_labels size must equal regions");
    }
    std::set<std::string> uniq(cfg.region_labels.begin(), cfg.region_labels.end());
    if (static_cast<int>(uniq.size()) != cfg.regions) fail("region_labels must be unique");
  }
}

GeneratorModel build_model(const GeneratorConfig& cfg, uint64_t seed) {
  validate(cfg);
  const int m = cfg.regions;

  // Base covariance: sparse symmetric entries, repaired to positive definite,
  // rescaled to unit diagonal, then mixed with a white component.
  Rng rng = Rng::derive(seed, 1);
  Matrix base(m, m);
  for (int i = 0; i < m; ++i) base.at(i, i) = 1.0;
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      double u = rng.uniform();
      double mag = rng.uniform(0.5, 1.0) * cfg.base_strength;
      double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      if (u < cfg.base_density) {
        base.at(i, j) = sign * mag;
        base.at(j, i) = sign * mag;
      }
    }
  }
  // Whiten so the spectrum stays clear of the planted shift: a matching of
  // shifted edges moves eigenvalues by at most effect_high, so a floor above
  // that keeps the post-onset matrices positive definite. noise_level sets
  // the minimum white fraction regardless of conditioning.
  {
    const double floor_target = std::min(0.92, cfg.effect_high + 0.05);
    const double lambda_min = min_eigenvalue(base);
    double c = cfg.noise_level * cfg.noise_level;
    if (lambda_min < floor_target) {
      c = std::max(c, (floor_target - lambda_min) / (1.0 - floor_target));
    }
    for (double& v : base.v) v /= (1.0 + c);
    for (int i = 0; i < m; ++i) base.at(i, i) = 1.0;
  }

  GeneratorModel model;
  model.base = base;
  model.circuit_high = sample_circuit(cfg, seed, 0, cfg.effect_high);
  model.circuit_low = cfg.share_circuit_across_doses
                          ? sample_circuit(cfg, seed, 0, cfg.effect_low)
                          : sample_circuit(cfg, seed, 1, cfg.effect_low);
  model.post_low = shifted_covariance(base, model.circuit_low, cfg.effect_low);
  model.post_high = shifted_covariance(base, model.circuit_high, cfg.effect_high);
  return model;
}

Cohort generate_cohort(const GeneratorConfig& cfg, uint64_t seed, int workers) {
  GeneratorModel model = build_model(cfg, seed);
  const int m = cfg.regions;
  const int s = cfg.scans;
  const int onset = cfg.resolved_onset();

  Matrix l_pre, l_low, l_high;
  if (!load_and_factor(model.base, l_pre)) {
    throw Error(ErrorKind::Generation, "base covariance is not positive definite");
  }
  if (!load_and_factor(model.post_low, l_low)) generation_failure(model.post_low, model.circuit_low);
  if (!load_and_factor(model.post_high, l_high)) generation_failure(model.post_high, model.circuit_high);

  std::vector<std::string> labels = cfg.region_labels;
  if (labels.empty()) {
    labels.reserve(m);
    for (int i = 0; i < m; ++i) labels.push_back(default_label(i));
  }

  struct Slot {
    GroupLabel group;
    const Matrix* l_post;
    const PlantedCircuit* circuit;
    const char* prefix;
  };
  PlantedCircuit empty_circuit;
  empty_circuit.onset_scan = onset;
  const std::vector<Slot> slots = {
      {GroupLabel::Saline, &l_pre, &empty_circuit, "sal"},
      {GroupLabel::LowNicotine, &l_low, &model.circuit_low, "low"},
      {GroupLabel::HighNicotine, &l_high, &model.circuit_high, "hig"},
  };

  Cohort cohort;
  cohort.config = cfg;
  cohort.seed = seed;
  cohort.subjects.resize(static_cast<size_t>(3) * cfg.subjects_per_group);

  parallel_for(static_cast<int>(cohort.subjects.size()), workers, [&](int idx) {
    const Slot& slot = slots[static_cast<size_t>(idx) / cfg.subjects_per_group];
    const int within = idx % cfg.subjects_per_group;
    Rng rng = Rng::derive(seed, 100, static_cast<uint64_t>(idx));

    Subject& subject = cohort.subjects[static_cast<size_t>(idx)];
    char id[16];
    std::snprintf(id, sizeof(id), "%s%02d", slot.prefix, within);
    subject.group = slot.group;
    subject.circuit = *slot.circuit;
    subject.series.subject_id = id;
    subject.series.region_labels = labels;
    subject.series.values = Matrix(m, s);

    std::vector<double> z(m);
    for (int t = 0; t < s; ++t) {
      for (int i = 0; i < m; ++i) z[i] = rng.normal();
      const Matrix& l = (slot.group != GroupLabel::Saline && t >= onset) ? *slot.l_post : l_pre;
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        const double* li = l.row_ptr(i);
        for (int k = 0; k <= i; ++k) acc += li[k] * z[k];
        subject.series.values.at(i, t) = acc;
      }
    }
  });
  return cohort;
}

RoiTimeSeries aggregate_voxels(const Matrix& voxel_series, const std::vector<int>& voxel_region,
                               int region_count, const std::string& subject_id,
                               std::vector<std::string> region_labels) {
  if (static_cast<int>(voxel_region.size()) != voxel_series.rows) {
    throw Error(ErrorKind::Validation, "parcellation size does not match voxel count");
  }
  if (region_count < 1) throw Error(ErrorKind::Validation, "region_count must be >= 1");
  for (size_t v = 0; v < voxel_region.size(); ++v) {
    if (voxel_region[v] < 0 || voxel_region[v] >= region_count) {
      throw Error(ErrorKind::Validation,
                  "voxel " + std::to_string(v) + " maps to region " +
                      std::to_string(voxel_region[v]) + " outside [0," +
                      std::to_string(region_count) + ")");
    }
  }
  for (size_t i = 0; i < voxel_series.v.size(); ++i) {
    if (!std::isfinite(voxel_series.v[i])) {
      throw Error(ErrorKind::Parse, "non-finite voxel value at voxel " +
                                        std::to_string(i / voxel_series.cols) + " scan " +
                                        std::to_string(i % voxel_series.cols));
    }
  }
  std::vector<int> counts(region_count, 0);
  for (int r : voxel_region) counts[r]++;
  for (int r = 0; r < region_count; ++r) {
    if (counts[r] == 0) {
      throw Error(ErrorKind::Validation, "region " + std::to_string(r) + " has zero voxels");
    }
  }

  RoiTimeSeries out;
  out.subject_id = subject_id;
  if (region_labels.empty()) {
    for (int r = 0; r < region_count; ++r) region_labels.push_back(default_label(r));
  }
  out.region_labels = std::move(region_labels);
  out.values = Matrix(region_count, voxel_series.cols);
  for (int v = 0; v < voxel_series.rows; ++v) {
    const int r = voxel_region[v];
    for (int t = 0; t < voxel_series.cols; ++t) {
      out.values.at(r, t) += voxel_series.at(v, t);
    }
  }
  for (int r = 0; r < region_count; ++r) {
    for (int t = 0; t < out.values.cols; ++t) out.values.at(r, t) /= counts[r];
  }
  return out;
}

// ---------------------------------------------------------------------------
// cohort files

namespace {

nlohmann::json config_to_json(const GeneratorConfig& cfg) {
  return {{"regions", cfg.regions},
          {"scans", cfg.scans},
          {"subjects_per_group", cfg.subjects_per_group},
          {"base_density", cfg.base_density},
          {"base_strength", cfg.base_strength},
          {"noise_level", cfg.noise_level},
          {"effect_high", cfg.effect_high},
          {"effect_low", cfg.effect_low},
          {"planted_edge_count", cfg.planted_edge_count},
          {"onset_scan", cfg.onset_scan},
          {"share_circuit_across_doses", cfg.share_circuit_across_doses}};
}

GeneratorConfig config_from_json(const nlohmann::json& j) {
  GeneratorConfig cfg;
  cfg.regions = j.at("regions").get<int>();
  cfg.scans = j.at("scans").get<int>();
  cfg.subjects_per_group = j.at("subjects_per_group").get<int>();
  cfg.base_density = j.at("base_density").get<double>();
  cfg.base_strength = j.at("base_strength").get<double>();
  cfg.noise_level = j.at("noise_level").get<double>();
  cfg.effect_high = j.at("effect_high").get<double>();
  cfg.effect_low = j.at("effect_low").get<double>();
  cfg.planted_edge_count = j.at("planted_edge_count").get<int>();
  cfg.onset_scan = j.at("onset_scan").get<int>();
  cfg.share_circuit_across_doses = j.at("share_circuit_across_doses").get<bool>();
  return cfg;
}

nlohmann::json circuit_to_json(const PlantedCircuit& c) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [i, j] : c.edges) edges.push_back({i, j});
  return {{"edges", edges},
          {"signs", c.signs},
          {"effect_size", c.effect_size},
          {"onset_scan", c.onset_scan}};
}

PlantedCircuit circuit_from_json(const nlohmann::json& j) {
  PlantedCircuit c;
  for (const auto& e : j.at("edges")) c.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  c.signs = j.at("signs").get<std::vector<int>>();
  c.effect_size = j.at("effect_size").get<double>();
  c.onset_scan = j.at("onset_scan").get<int>();
  return c;
}

}  // namespace

void write_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  if (cohort.subjects.empty()) {
    throw Error(ErrorKind::Validation, "refusing to write an empty cohort");
  }
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "circuitscope-cohort-v1";
  manifest["seed"] = cohort.seed;
  manifest["config"] = config_to_json(cohort.config);
  manifest["region_labels"] = cohort.region_labels();
  nlohmann::json subjects = nlohmann::json::array();
  for (const Subject& s : cohort.subjects) {
    subjects.push_back({{"id", s.series.subject_id},
                        {"group", to_string(s.group)},
                        {"file", s.series.subject_id + ".csv"},
                        {"circuit", circuit_to_json(s.circuit)}});
  }
  manifest["subjects"] = subjects;
  {
    std::ofstream os(dir / "manifest.json");
    if (!os) throw Error(ErrorKind::Io, "cannot write " + (dir / "manifest.json").string());
    os << manifest.dump(2) << "\n";
  }
  for (const Subject& s : cohort.subjects) {
    std::ofstream os(dir / (s.series.subject_id + ".csv"));
    if (!os) throw Error(ErrorKind::Io, "cannot write subject csv for " + s.series.subject_id);
    const Matrix& v = s.series.values;
    for (int t = 0; t < v.cols; ++t) os << (t ? "," : "") << t;
    os << "\n";
    for (int r = 0; r < v.rows; ++r) {
      for (int t = 0; t < v.cols; ++t) {
        os << (t ? "," : "") << format_double(v.at(r, t));
      }
      os << "\n";
    }
  }
}

Cohort read_cohort(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw Error(ErrorKind::Io, "missing cohort manifest: " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, "bad cohort manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "circuitscope-cohort-v1") {
    throw Error(ErrorKind::Parse, "cohort manifest: unknown format field");
  }

  Cohort cohort;
  try {
    cohort.seed = manifest.at("seed").get<uint64_t>();
    cohort.config = config_from_json(manifest.at("config"));
    cohort.config.region_labels = manifest.at("region_labels").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, "cohort manifest: " + std::string(e.what()));
  }
  const int m = static_cast<int>(cohort.config.region_labels.size());
  const int s = cohort.config.scans;
  if (m < 2) throw Error(ErrorKind::Parse, "cohort manifest: region count must be >= 2");
  if (s < 30) throw Error(ErrorKind::Parse, "cohort manifest: scan count must be >= 30");

  std::set<std::string> seen_ids;
  int subject_index = 0;
  for (const auto& sj : manifest.at("subjects")) {
    Subject subject;
    try {
      subject.series.subject_id = sj.at("id").get<std::string>();
      subject.group = group_from_string(sj.at("group").get<std::string>());
      subject.circuit = circuit_from_json(sj.at("circuit"));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Parse, "cohort manifest subject " + std::to_string(subject_index) +
                                        ": " + std::string(e.what()));
    }
    if (!seen_ids.insert(subject.series.subject_id).second) {
      throw Error(ErrorKind::Parse, "duplicate subject id: " + subject.series.subject_id);
    }
    subject.series.region_labels = cohort.config.region_labels;
    subject.series.values = Matrix(m, s);

    const std::filesystem::path csv = dir / sj.at("file").get<std::string>();
    std::ifstream cs(csv);
    if (!cs) throw Error(ErrorKind::Io, "missing subject csv: " + csv.string());
    std::string line;
    if (!std::getline(cs, line)) {
      throw Error(ErrorKind::Parse, csv.string() + ": missing header row");
    }
    {
      std::stringstream header(line);
      std::string cell;
      int expect = 0;
      while (std::getline(header, cell, ',')) {
        int idx = -1;
        auto res = std::from_chars(cell.data(), cell.data() + cell.size(), idx);
        if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || idx != expect) {
          throw Error(ErrorKind::Parse,
                      csv.string() + ": malformed header at column " + std::to_string(expect));
        }
        ++expect;
      }
      if (expect != s) {
        throw Error(ErrorKind::Parse, csv.string() + ": header has " + std::to_string(expect) +
                                          " scans, manifest says " + std::to_string(s));
      }
    }
    for (int r = 0; r < m; ++r) {
      if (!std::getline(cs, line)) {
        throw Error(ErrorKind::Parse, csv.string() + ": expected " + std::to_string(m) +
                                          " region rows, found " + std::to_string(r));
      }
      std::stringstream row(line);
      std::string cell;
      int t = 0;
      while (std::getline(row, cell, ',')) {
        if (t >= s) {
          ++t;
          break;
        }
        double x = 0.0;
        auto res = std::from_chars(cell.data(), cell.data() + cell.size(), x);
        if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
          throw Error(ErrorKind::Parse, csv.string() + ": unparseable value at subject " +
                                            std::to_string(subject_index) + ", region " +
                                            std::to_string(r) + ", scan " + std::to_string(t));
        }
        if (!std::isfinite(x)) {
          throw Error(ErrorKind::Parse, csv.string() + ": non-finite value at subject " +
                                            std::to_string(subject_index) + ", region " +
                                            std::to_string(r) + ", scan " + std::to_string(t));
        }
        subject.series.values.at(r, t) = x;
        ++t;
      }
      if (t != s) {
        throw Error(ErrorKind::Parse, csv.string() + ": row " + std::to_string(r) + " has " +
                                          std::to_string(t) + " scans, expected " +
                                          std::to_string(s));
      }
    }
    if (std::getline(cs, line) && !line.empty()) {
      throw Error(ErrorKind::Parse, csv.string() + ": trailing rows beyond region count");
    }
    cohort.subjects.push_back(std::move(subject));
    ++subject_index;
  }
  if (cohort.subjects.empty()) {
    throw Error(ErrorKind::Parse, "cohort manifest lists no subjects");
  }
  return cohort;
}

}  // namespace circuitscope::synthcohort
