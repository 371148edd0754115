#include "circuitscope/connectome.hpp"

#include <algorithm>
#include <cmath>

namespace circuitscope::connectome {

WindowSpec WindowSpec::resolved(int scans) const {
  WindowSpec r = *this;
  if (r.window_length <= 0) r.window_length = scans / std::max(1, r.window_count);
  if (r.stride <= 0) r.stride = r.window_length;
  return r;
}

void validate(const WindowSpec& raw, int scans) {
  WindowSpec spec = raw.resolved(scans);
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Validation, msg); };
  if (spec.window_count < 1) fail("window_count must be >= 1");
  if (spec.window_length < 3) fail("window_length must be >= 3");
  if (spec.stride < 1) fail("stride must be >= 1");
  const long long needed =
      static_cast<long long>(spec.window_count) * spec.stride + (spec.window_length - spec.stride);
  if (needed > scans) {
    int max_t = scans >= spec.window_length ? (scans - spec.window_length) / spec.stride + 1 : 0;
    fail("window spec needs " + std::to_string(needed) + " scans but only " +
         std::to_string(scans) + " available; max feasible window_count = " +
         std::to_string(max_t));
  }
}

std::vector<Matrix> split_windows(const RoiTimeSeries& series, const WindowSpec& raw) {
  const int scans = series.values.cols;
  validate(raw, scans);
  WindowSpec spec = raw.resolved(scans);
  const int m = series.values.rows;
  std::vector<Matrix> segments;
  segments.reserve(spec.window_count);
  for (int t = 0; t < spec.window_count; ++t) {
    const int start = t * spec.stride;
    Matrix seg(m, spec.window_length);
    for (int r = 0; r < m; ++r) {
      const double* src = series.values.row_ptr(r) + start;
      std::copy(src, src + spec.window_length, seg.row_ptr(r));
    }
    segments.push_back(std::move(seg));
  }
  return segments;
}

PearsonResult pearson_matrix(const Matrix& segment) {
  const int m = segment.rows;
  const int len = segment.cols;
  if (len < 3) throw Error(ErrorKind::Validation, "pearson_matrix needs segments of length >= 3");
  for (int r = 0; r < m; ++r) {
    for (int t = 0; t < len; ++t) {
      if (!std::isfinite(segment.at(r, t))) {
        throw Error(ErrorKind::Computation, "non-finite input at region " + std::to_string(r) +
                                                ", scan " + std::to_string(t));
      }
    }
  }

  // center rows once, then correlations are normalized dot products
  Matrix centered = segment;
  std::vector<double> norms(m);
  PearsonResult out;
  for (int r = 0; r < m; ++r) {
    double mean = 0;
    for (int t = 0; t < len; ++t) mean += centered.at(r, t);
    mean /= len;
    double ss = 0;
    for (int t = 0; t < len; ++t) {
      centered.at(r, t) -= mean;
      ss += centered.at(r, t) * centered.at(r, t);
    }
    norms[r] = std::sqrt(ss);
    if (norms[r] == 0.0) out.zero_variance_regions.push_back(r);
  }

  out.adjacency = Matrix(m, m);
  for (int i = 0; i < m; ++i) out.adjacency.at(i, i) = 1.0;
  for (int i = 0; i < m; ++i) {
    if (norms[i] == 0.0) continue;
    const double* xi = centered.row_ptr(i);
    for (int j = i + 1; j < m; ++j) {
      if (norms[j] == 0.0) continue;
      const double* xj = centered.row_ptr(j);
      double dot = 0;
      for (int t = 0; t < len; ++t) dot += xi[t] * xj[t];
      double r = dot / (norms[i] * norms[j]);
      r = std::clamp(r, -1.0, 1.0);
      out.adjacency.at(i, j) = r;
      out.adjacency.at(j, i) = r;
    }
  }
  return out;
}

DynamicBrainNetwork build_dynamic_network(const RoiTimeSeries& series, GroupLabel group,
                                          const WindowSpec& raw) {
  WindowSpec spec = raw.resolved(series.values.cols);
  std::vector<Matrix> segments = split_windows(series, spec);
  DynamicBrainNetwork net;
  net.subject_id = series.subject_id;
  net.group = group;
  net.region_labels = series.region_labels;
  net.snapshots.reserve(segments.size());
  for (size_t t = 0; t < segments.size(); ++t) {
    BrainGraphSnapshot snap;
    snap.timestep = static_cast<int>(t) + 1;
    PearsonResult pr = pearson_matrix(segments[t]);
    if (spec.fisher_z) {
      constexpr double kZClip = 0.999999;
      Matrix& a = pr.adjacency;
      for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) {
          if (i == j) continue;
          a.at(i, j) = std::atanh(std::clamp(a.at(i, j), -kZClip, kZClip));
        }
      }
    }
    snap.adjacency = std::move(pr.adjacency);
    snap.zero_variance_regions = std::move(pr.zero_variance_regions);
    snap.node_features = std::move(segments[t]);
    net.snapshots.push_back(std::move(snap));
  }
  return net;
}

std::vector<Edge> edge_set(const BrainGraphSnapshot& snapshot) {
  const int m = snapshot.adjacency.rows;
  std::vector<Edge> edges;
  edges.reserve(static_cast<size_t>(pair_count(m)));
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      edges.push_back({i, j, snapshot.adjacency.at(i, j)});
    }
  }
  return edges;
}

void validate(const BrainGraphSnapshot& snapshot, bool fisher_z) {
  const Matrix& a = snapshot.adjacency;
  if (a.rows != a.cols) {
    throw Error(ErrorKind::Computation, "snapshot adjacency is not square");
  }
  for (int i = 0; i < a.rows; ++i) {
    if (a.at(i, i) != 1.0) {
      throw Error(ErrorKind::Computation,
                  "snapshot diagonal must be exactly 1 at region " + std::to_string(i));
    }
    for (int j = 0; j < a.cols; ++j) {
      if (std::abs(a.at(i, j) - a.at(j, i)) > 1e-12) {
        throw Error(ErrorKind::Computation, "snapshot adjacency asymmetric at (" +
                                                std::to_string(i) + "," + std::to_string(j) + ")");
      }
      if (!fisher_z && std::abs(a.at(i, j)) > 1.0) {
        throw Error(ErrorKind::Computation, "snapshot weight out of [-1,1] at (" +
                                                std::to_string(i) + "," + std::to_string(j) + ")");
      }
    }
  }
  if (snapshot.node_features.rows != a.rows) {
    throw Error(ErrorKind::Computation, "snapshot features row count differs from adjacency");
  }
}

}  // namespace circuitscope::connectome
