#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace circuitscope {

enum class ErrorKind {
  Validation,   // bad config or arguments, caught before any work
  Parse,        // malformed input file
  Computation,  // numeric failure mid-run (non-finite, shape mismatch)
  Generation,   // synthetic generator could not satisfy its contract
  State,        // API called out of order
  Io            // filesystem failure
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

private:
  ErrorKind kind_;
};

// Dense row-major matrix of doubles. The plain data carrier used by the
// pipeline; autodiff lives in diffcore::Tensor.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill) {}

  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  double* row_ptr(int r) { return v.data() + static_cast<size_t>(r) * cols; }
  const double* row_ptr(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
  size_t size() const { return v.size(); }

  bool operator==(const Matrix& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
};

inline bool all_finite(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return std::isfinite(s);
}

// Linear index of unordered pair (i,j), i<j, among the M(M-1)/2 pairs.
inline int pair_index(int i, int j, int m) {
  return i * m - i * (i + 1) / 2 + (j - i - 1);
}

inline int pair_count(int m) { return m * (m - 1) / 2; }

inline std::pair<int, int> pair_from_index(int idx, int m) {
  int i = 0;
  int row_len = m - 1;
  while (idx >= row_len) {
    idx -= row_len;
    ++i;
    --row_len;
  }
  return {i, i + 1 + idx};
}

}  // namespace circuitscope
