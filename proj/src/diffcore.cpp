#include "circuitscope/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "circuitscope/rng.hpp"
#include "json.hpp"

namespace circuitscope::diffcore {

namespace {

std::string shape_str(int r, int c) {
  return "[" + std::to_string(r) + "," + std::to_string(c) + "]";
}

[[noreturn]] void shape_error(const char* prim, int ar, int ac, int br, int bc) {
  throw Error(ErrorKind::Computation, std::string(prim) + ": shape mismatch " +
                                          shape_str(ar, ac) + " vs " + shape_str(br, bc));
}

void write_le_doubles(std::ostream& os, const std::vector<double>& v) {
  for (double x : v) {
    uint64_t bits;
    std::memcpy(&bits, &x, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
  }
}

void read_le_doubles(std::istream& is, std::vector<double>& v) {
  for (double& x : v) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    std::memcpy(&x, &bits, 8);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

Tensor& ParameterStore::add(const std::string& name, int rows, int cols, int fan_in) {
  if (index_.count(name)) {
    throw Error(ErrorKind::Validation, "parameter name already exists: " + name);
  }
  if (rows <= 0 || cols <= 0) {
    throw Error(ErrorKind::Validation, "parameter " + name + " has non-positive extent");
  }
  Tensor t(rows, cols);
  t.fan_in = fan_in > 0 ? fan_in : rows;
  init_tensor(name, t);
  index_[name] = tensors_.size();
  order_.push_back(name);
  tensors_.push_back(std::move(t));
  return tensors_.back();
}

void ParameterStore::init_tensor(const std::string& name, Tensor& t) {
  Rng rng = Rng::derive(seed_, fnv1a(name));
  double bound = 1.0 / std::sqrt(static_cast<double>(t.fan_in));
  for (double& x : t.values) x = rng.uniform(-bound, bound);
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::Validation, "unknown parameter: " + name);
  return tensors_[it->second];
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::Validation, "unknown parameter: " + name);
  return tensors_[it->second];
}

void ParameterStore::zero_grads() {
  for (auto& t : tensors_) t.zero_grad();
}

void ParameterStore::reinit() {
  for (size_t i = 0; i < order_.size(); ++i) init_tensor(order_[i], tensors_[i]);
  step_count = 0;
}

double ParameterStore::grad_norm() const {
  double s = 0.0;
  for (const auto& t : tensors_) {
    for (double g : t.grad) s += g * g;
  }
  return std::sqrt(s);
}

void ParameterStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "circuitscope-params-v1";
  manifest["init_scheme"] = "uniform_inv_sqrt_fan_in";
  manifest["seed"] = seed_;
  manifest["step_count"] = step_count;
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& name : order_) {
    const Tensor& t = at(name);
    plist.push_back({{"name", name},
                     {"rows", t.rows()},
                     {"cols", t.cols()},
                     {"fan_in", t.fan_in}});
  }
  manifest["params"] = plist;
  {
    std::ofstream js(dir / "params.json");
    if (!js) throw Error(ErrorKind::Io, "cannot write " + (dir / "params.json").string());
    js << manifest.dump(2) << "\n";
  }
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw Error(ErrorKind::Io, "cannot write " + (dir / "params.bin").string());
  for (const auto& name : order_) write_le_doubles(bin, at(name).values);
}

ParameterStore ParameterStore::load(const std::filesystem::path& dir) {
  std::ifstream js(dir / "params.json");
  if (!js) throw Error(ErrorKind::Io, "missing checkpoint manifest: " + (dir / "params.json").string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, "bad params.json: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "circuitscope-params-v1") {
    throw Error(ErrorKind::Parse, "params.json: unknown format field");
  }
  ParameterStore store(manifest.at("seed").get<uint64_t>());
  store.step_count = manifest.at("step_count").get<uint64_t>();
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw Error(ErrorKind::Io, "missing checkpoint data: " + (dir / "params.bin").string());
  for (const auto& p : manifest.at("params")) {
    Tensor& t = store.add(p.at("name").get<std::string>(), p.at("rows").get<int>(),
                          p.at("cols").get<int>(), p.at("fan_in").get<int>());
    read_le_doubles(bin, t.values);
    if (!bin) {
      throw Error(ErrorKind::Parse, "params.bin truncated at parameter " +
                                        p.at("name").get<std::string>());
    }
  }
  char extra;
  if (bin.read(&extra, 1)) {
    throw Error(ErrorKind::Parse, "params.bin has trailing bytes beyond the manifest");
  }
  return store;
}

// ---------------------------------------------------------------------------
// Tape

std::vector<double> Tape::take_buffer(size_t size) {
  auto it = pool_.find(size);
  if (it != pool_.end() && !it->second.empty()) {
    std::vector<double> buf = std::move(it->second.back());
    it->second.pop_back();
    std::fill(buf.begin(), buf.end(), 0.0);
    return buf;
  }
  return std::vector<double>(size, 0.0);
}

void Tape::recycle(std::vector<double>&& buf) {
  if (buf.empty()) return;
  pool_[buf.size()].push_back(std::move(buf));
}

void Tape::reset() {
  for (auto& n : nodes_) {
    recycle(std::move(n.values));
    recycle(std::move(n.grad));
  }
  nodes_.clear();
  backward_ran_ = false;
}

void Tape::alloc_values(Node& n) {
  n.values = take_buffer(static_cast<size_t>(n.rows) * n.cols);
}

void Tape::check_finite(const Node& n, ValueId id) const {
  double s = 0.0;
  for (double x : n.values) s += x;
  if (!std::isfinite(s)) {
    throw Error(ErrorKind::Computation,
                "non-finite forward value at node " + std::to_string(id));
  }
}

ValueId Tape::push(Node&& n) {
  ValueId id = static_cast<ValueId>(nodes_.size());
  nodes_.push_back(std::move(n));
  check_finite(nodes_.back(), id);
  return id;
}

Tensor Tape::value(ValueId id) const {
  const Node& n = node(id);
  Tensor view;
  view.shape = {n.rows, n.cols};
  view.values = n.values;
  view.grad = n.grad;
  return view;
}

const std::vector<double>& Tape::values_of(ValueId id) const { return node(id).values; }
int Tape::rows_of(ValueId id) const { return node(id).rows; }
int Tape::cols_of(ValueId id) const { return node(id).cols; }

double Tape::scalar_value(ValueId id) const {
  const Node& n = node(id);
  if (n.values.size() != 1) {
    throw Error(ErrorKind::Computation, "scalar_value on non-scalar node");
  }
  return n.values[0];
}

const std::vector<double>& Tape::grad(ValueId id) const {
  static const std::vector<double> empty;
  const Node& n = node(id);
  return n.grad.empty() ? empty : n.grad;
}

ValueId Tape::constant(const Tensor& t) {
  if (t.shape.size() > 2) {
    throw Error(ErrorKind::Computation, "tape tensors are rank <= 2");
  }
  Node n;
  n.op = Op::Constant;
  n.rows = t.rows();
  n.cols = t.cols();
  n.values = take_buffer(t.numel());
  std::copy(t.values.begin(), t.values.end(), n.values.begin());
  return push(std::move(n));
}

ValueId Tape::scalar(double x) {
  Tensor t(1, 1, x);
  return constant(t);
}

ValueId Tape::param(Tensor& p) {
  Node n;
  n.op = Op::Param;
  n.rows = p.rows();
  n.cols = p.cols();
  n.values = take_buffer(p.numel());
  std::copy(p.values.begin(), p.values.end(), n.values.begin());
  n.needs_grad = true;
  n.sink = &p;
  return push(std::move(n));
}

ValueId Tape::matmul(ValueId a, ValueId b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.cols != nb.rows) shape_error("matmul", na.rows, na.cols, nb.rows, nb.cols);
  Node n;
  n.op = Op::MatMul;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = nb.cols;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  alloc_values(n);
  const int m = na.rows, k = na.cols, c = nb.cols;
  const double* A = na.values.data();
  const double* B = nb.values.data();
  double* C = n.values.data();
  for (int i = 0; i < m; ++i) {
    const double* Ai = A + static_cast<size_t>(i) * k;
    double* Ci = C + static_cast<size_t>(i) * c;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = Ai[kk];
      const double* Bk = B + static_cast<size_t>(kk) * c;
      for (int j = 0; j < c; ++j) Ci[j] += aik * Bk[j];
    }
  }
  return push(std::move(n));
}

ValueId Tape::transpose(ValueId a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::Transpose;
  n.a = a;
  n.rows = na.cols;
  n.cols = na.rows;
  n.needs_grad = na.needs_grad;
  alloc_values(n);
  for (int i = 0; i < na.rows; ++i) {
    for (int j = 0; j < na.cols; ++j) {
      n.values[static_cast<size_t>(j) * n.cols + i] = na.values[static_cast<size_t>(i) * na.cols + j];
    }
  }
  return push(std::move(n));
}

ValueId Tape::add(ValueId a, ValueId b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  const bool broadcast = nb.rows == 1 && na.rows != 1 && nb.cols == na.cols;
  if (!broadcast && (na.rows != nb.rows || na.cols != nb.cols)) {
    shape_error("add", na.rows, na.cols, nb.rows, nb.cols);
  }
  Node n;
  n.op = broadcast ? Op::AddRowBroadcast : Op::Add;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  alloc_values(n);
  if (broadcast) {
    for (int i = 0; i < na.rows; ++i) {
      const double* ra = na.values.data() + static_cast<size_t>(i) * na.cols;
      double* ro = n.values.data() + static_cast<size_t>(i) * na.cols;
      for (int j = 0; j < na.cols; ++j) ro[j] = ra[j] + nb.values[j];
    }
  } else {
    for (size_t i = 0; i < n.values.size(); ++i) n.values[i] = na.values[i] + nb.values[i];
  }
  return push(std::move(n));
}

ValueId Tape::sub(ValueId a, ValueId b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.rows != nb.rows || na.cols != nb.cols) {
    shape_error("sub", na.rows, na.cols, nb.rows, nb.cols);
  }
  Node n;
  n.op = Op::Sub;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  alloc_values(n);
  for (size_t i = 0; i < n.values.size(); ++i) n.values[i] = na.values[i] - nb.values[i];
  return push(std::move(n));
}

ValueId Tape::mul(ValueId a, ValueId b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.rows != nb.rows || na.cols != nb.cols) {
    shape_error("mul", na.rows, na.cols, nb.rows, nb.cols);
  }
  Node n;
  n.op = Op::Mul;
  n.a = a;
  n.b = b;
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  alloc_values(n);
  for (size_t i = 0; i < n.values.size(); ++i) n.values[i] = na.values[i] * nb.values[i];
  return push(std::move(n));
}

ValueId Tape::scalar_mul(ValueId s, ValueId a) {
  const Node& ns = node(s);
  const Node& na = node(a);
  if (ns.rows != 1 || ns.cols != 1) shape_error("scalar_mul", ns.rows, ns.cols, na.rows, na.cols);
  Node n;
  n.op = Op::ScalarMul;
  n.a = s;
  n.b = a;
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = ns.needs_grad || na.needs_grad;
  alloc_values(n);
  const double sv = ns.values[0];
  for (size_t i = 0; i < n.values.size(); ++i) n.values[i] = sv * na.values[i];
  return push(std::move(n));
}

ValueId Tape::scale(ValueId a, double c) {
  const Node& na = node(a);
  Node n;
  n.op = Op::Scale;
  n.a = a;
  n.c = c;
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad;
  alloc_values(n);
  for (size_t i = 0; i < n.values.size(); ++i) n.values[i] = c * na.values[i];
  return push(std::move(n));
}

ValueId Tape::add_const(ValueId a, double c) {
  const Node& na = node(a);
  Node n;
  n.op = Op::AddConst;
  n.a = a;
  n.c = c;
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad;
  alloc_values(n);
  for (size_t i = 0; i < n.values.size(); ++i) n.values[i] = na.values[i] + c;
  return push(std::move(n));
}

#define CIRCUITSCOPE_UNARY(NAME, OP, EXPR)                  \
  ValueId Tape::NAME(ValueId a) {                           \
    const Node& na = node(a);                               \
    Node n;                                                 \
    n.op = OP;                                              \
    n.a = a;                                                \
    n.rows = na.rows;                                       \
    n.cols = na.cols;                                       \
    n.needs_grad = na.needs_grad;                           \
    alloc_values(n);                                        \
    for (size_t i = 0; i < n.values.size(); ++i) {          \
      const double x = na.values[i];                        \
      n.values[i] = (EXPR);                                 \
    }                                                       \
    return push(std::move(n));                              \
  }

CIRCUITSCOPE_UNARY(relu, Op::Relu, x > 0.0 ? x : 0.0)
CIRCUITSCOPE_UNARY(sigmoid, Op::Sigmoid, x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                                  : std::exp(x) / (1.0 + std::exp(x)))
CIRCUITSCOPE_UNARY(tanh, Op::Tanh, std::tanh(x))
CIRCUITSCOPE_UNARY(log, Op::Log, std::log(x))
CIRCUITSCOPE_UNARY(exp, Op::Exp, std::exp(x))
#undef CIRCUITSCOPE_UNARY

ValueId Tape::softmax_rows(ValueId a) {
  return softmax_rows_masked(a, {});
}

ValueId Tape::softmax_rows_masked(ValueId a, std::vector<uint8_t> mask) {
  const Node& na = node(a);
  if (!mask.empty() && mask.size() != na.values.size()) {
    throw Error(ErrorKind::Computation, "softmax mask extent does not match input");
  }
  Node n;
  n.op = mask.empty() ? Op::SoftmaxRows : Op::SoftmaxRowsMasked;
  n.a = a;
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad;
  n.mask = std::move(mask);
  alloc_values(n);
  for (int i = 0; i < n.rows; ++i) {
    const size_t off = static_cast<size_t>(i) * n.cols;
    const double* x = na.values.data() + off;
    const uint8_t* m = n.mask.empty() ? nullptr : n.mask.data() + off;
    double maxv = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n.cols; ++j) {
      if (!m || m[j]) maxv = std::max(maxv, x[j]);
    }
    if (!std::isfinite(maxv)) {
      throw Error(ErrorKind::Computation,
                  "softmax row " + std::to_string(i) + " has every position masked");
    }
    double sum = 0.0;
    double* y = n.values.data() + off;
    for (int j = 0; j < n.cols; ++j) {
      if (!m || m[j]) {
        y[j] = std::exp(x[j] - maxv);
        sum += y[j];
      } else {
        y[j] = 0.0;
      }
    }
    for (int j = 0; j < n.cols; ++j) y[j] /= sum;
  }
  return push(std::move(n));
}

ValueId Tape::logsumexp_rows(ValueId a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::LogSumExpRows;
  n.a = a;
  n.rows = na.rows;
  n.cols = 1;
  n.needs_grad = na.needs_grad;
  alloc_values(n);
  for (int i = 0; i < na.rows; ++i) {
    const double* x = na.values.data() + static_cast<size_t>(i) * na.cols;
    double maxv = x[0];
    for (int j = 1; j < na.cols; ++j) maxv = std::max(maxv, x[j]);
    double sum = 0.0;
    for (int j = 0; j < na.cols; ++j) sum += std::exp(x[j] - maxv);
    n.values[i] = maxv + std::log(sum);
  }
  return push(std::move(n));
}

ValueId Tape::layer_norm_rows(ValueId a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::LayerNormRows;
  n.a = a;
  n.rows = na.rows;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad;
  alloc_values(n);
  const int c = na.cols;
  for (int i = 0; i < na.rows; ++i) {
    const double* x = na.values.data() + static_cast<size_t>(i) * c;
    double* y = n.values.data() + static_cast<size_t>(i) * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += x[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = x[j] - mean;
      var += d * d;
    }
    var /= c;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < c; ++j) y[j] = (x[j] - mean) * inv;
  }
  return push(std::move(n));
}

ValueId Tape::concat_rows(const std::vector<ValueId>& xs) {
  if (xs.empty()) throw Error(ErrorKind::Computation, "concat_rows: empty input list");
  const int cols = node(xs[0]).cols;
  int rows = 0;
  bool needs = false;
  for (ValueId x : xs) {
    const Node& nx = node(x);
    if (nx.cols != cols) shape_error("concat_rows", rows, cols, nx.rows, nx.cols);
    rows += nx.rows;
    needs = needs || nx.needs_grad;
  }
  Node n;
  n.op = Op::ConcatRows;
  n.inputs = xs;
  n.rows = rows;
  n.cols = cols;
  n.needs_grad = needs;
  alloc_values(n);
  size_t off = 0;
  for (ValueId x : xs) {
    const Node& nx = node(x);
    std::copy(nx.values.begin(), nx.values.end(), n.values.begin() + off);
    off += nx.values.size();
  }
  return push(std::move(n));
}

ValueId Tape::concat_cols(const std::vector<ValueId>& xs) {
  if (xs.empty()) throw Error(ErrorKind::Computation, "concat_cols: empty input list");
  const int rows = node(xs[0]).rows;
  int cols = 0;
  bool needs = false;
  for (ValueId x : xs) {
    const Node& nx = node(x);
    if (nx.rows != rows) shape_error("concat_cols", rows, cols, nx.rows, nx.cols);
    cols += nx.cols;
    needs = needs || nx.needs_grad;
  }
  Node n;
  n.op = Op::ConcatCols;
  n.inputs = xs;
  n.rows = rows;
  n.cols = cols;
  n.needs_grad = needs;
  alloc_values(n);
  int col_off = 0;
  for (ValueId x : xs) {
    const Node& nx = node(x);
    for (int i = 0; i < rows; ++i) {
      std::copy(nx.values.begin() + static_cast<size_t>(i) * nx.cols,
                nx.values.begin() + static_cast<size_t>(i + 1) * nx.cols,
                n.values.begin() + static_cast<size_t>(i) * cols + col_off);
    }
    col_off += nx.cols;
  }
  return push(std::move(n));
}

ValueId Tape::mean_rows(ValueId a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::MeanRows;
  n.a = a;
  n.rows = 1;
  n.cols = na.cols;
  n.needs_grad = na.needs_grad;
  alloc_values(n);
  for (int i = 0; i < na.rows; ++i) {
    const double* x = na.values.data() + static_cast<size_t>(i) * na.cols;
    for (int j = 0; j < na.cols; ++j) n.values[j] += x[j];
  }
  for (int j = 0; j < na.cols; ++j) n.values[j] /= na.rows;
  return push(std::move(n));
}

ValueId Tape::mean_cols(ValueId a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::MeanCols;
  n.a = a;
  n.rows = na.rows;
  n.cols = 1;
  n.needs_grad = na.needs_grad;
  alloc_values(n);
  for (int i = 0; i < na.rows; ++i) {
    const double* x = na.values.data() + static_cast<size_t>(i) * na.cols;
    double s = 0.0;
    for (int j = 0; j < na.cols; ++j) s += x[j];
    n.values[i] = s / na.cols;
  }
  return push(std::move(n));
}

ValueId Tape::gather_rows(ValueId a, std::vector<int> idx) {
  const Node& na = node(a);
  for (int i : idx) {
    if (i < 0 || i >= na.rows) {
      throw Error(ErrorKind::Computation,
                  "gather_rows: index " + std::to_string(i) + " out of range for " +
                      std::to_string(na.rows) + " rows");
    }
  }
  Node n;
  n.op = Op::GatherRows;
  n.a = a;
  n.rows = static_cast<int>(idx.size());
  n.cols = na.cols;
  n.needs_grad = na.needs_grad;
  n.indices = std::move(idx);
  alloc_values(n);
  for (int r = 0; r < n.rows; ++r) {
    const double* src = na.values.data() + static_cast<size_t>(n.indices[r]) * na.cols;
    std::copy(src, src + na.cols, n.values.begin() + static_cast<size_t>(r) * na.cols);
  }
  return push(std::move(n));
}

ValueId Tape::reshape(ValueId a, int rows, int cols) {
  const Node& na = node(a);
  if (static_cast<size_t>(rows) * cols != na.values.size()) {
    shape_error("reshape", na.rows, na.cols, rows, cols);
  }
  Node n;
  n.op = Op::Reshape;
  n.a = a;
  n.rows = rows;
  n.cols = cols;
  n.needs_grad = na.needs_grad;
  n.values = take_buffer(na.values.size());
  std::copy(na.values.begin(), na.values.end(), n.values.begin());
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// reverse pass

namespace {
inline void ensure(std::vector<double>& g, size_t size) {
  if (g.size() != size) g.assign(size, 0.0);
}
}  // namespace

void Tape::backward(ValueId loss) {
  if (loss < 0 || static_cast<size_t>(loss) >= nodes_.size()) {
    throw Error(ErrorKind::State, "backward called before any computation was recorded");
  }
  Node& root = node(loss);
  if (root.values.size() != 1) {
    throw Error(ErrorKind::State, "backward requires a scalar loss node");
  }
  ensure(root.grad, 1);
  root.grad[0] += 1.0;
  for (int id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    backward_one(n);
  }
  backward_ran_ = true;
}

void Tape::backward_one(Node& n) {
  auto in_grad = [&](int id) -> std::vector<double>* {
    Node& src = node(id);
    if (!src.needs_grad) return nullptr;
    ensure(src.grad, src.values.size());
    return &src.grad;
  };

  switch (n.op) {
    case Op::Constant:
      break;
    case Op::Param: {
      n.sink->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) n.sink->grad[i] += n.grad[i];
      break;
    }
    case Op::MatMul: {
      Node& na = node(n.a);
      Node& nb = node(n.b);
      const int m = na.rows, k = na.cols, c = nb.cols;
      if (auto* ga = in_grad(n.a)) {
        // dA[i,k] += sum_j dC[i,j] * B[k,j]
        for (int i = 0; i < m; ++i) {
          const double* gi = n.grad.data() + static_cast<size_t>(i) * c;
          double* gai = ga->data() + static_cast<size_t>(i) * k;
          for (int kk = 0; kk < k; ++kk) {
            const double* bk = nb.values.data() + static_cast<size_t>(kk) * c;
            double s = 0.0;
            for (int j = 0; j < c; ++j) s += gi[j] * bk[j];
            gai[kk] += s;
          }
        }
      }
      if (auto* gb = in_grad(n.b)) {
        // dB[k,j] += sum_i A[i,k] * dC[i,j]
        for (int i = 0; i < m; ++i) {
          const double* ai = na.values.data() + static_cast<size_t>(i) * k;
          const double* gi = n.grad.data() + static_cast<size_t>(i) * c;
          for (int kk = 0; kk < k; ++kk) {
            const double aik = ai[kk];
            double* gbk = gb->data() + static_cast<size_t>(kk) * c;
            for (int j = 0; j < c; ++j) gbk[j] += aik * gi[j];
          }
        }
      }
      break;
    }
    case Op::Transpose: {
      if (auto* ga = in_grad(n.a)) {
        Node& na = node(n.a);
        for (int i = 0; i < na.rows; ++i) {
          for (int j = 0; j < na.cols; ++j) {
            (*ga)[static_cast<size_t>(i) * na.cols + j] += n.grad[static_cast<size_t>(j) * n.cols + i];
          }
        }
      }
      break;
    }
    case Op::Add: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
      }
      if (auto* gb = in_grad(n.b)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*gb)[i] += n.grad[i];
      }
      break;
    }
    case Op::AddRowBroadcast: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
      }
      if (auto* gb = in_grad(n.b)) {
        for (int i = 0; i < n.rows; ++i) {
          const double* gi = n.grad.data() + static_cast<size_t>(i) * n.cols;
          for (int j = 0; j < n.cols; ++j) (*gb)[j] += gi[j];
        }
      }
      break;
    }
    case Op::Sub: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
      }
      if (auto* gb = in_grad(n.b)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*gb)[i] -= n.grad[i];
      }
      break;
    }
    case Op::Mul: {
      Node& na = node(n.a);
      Node& nb = node(n.b);
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i] * nb.values[i];
      }
      if (auto* gb = in_grad(n.b)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*gb)[i] += n.grad[i] * na.values[i];
      }
      break;
    }
    case Op::ScalarMul: {
      Node& ns = node(n.a);
      Node& nx = node(n.b);
      if (auto* gs = in_grad(n.a)) {
        double s = 0.0;
        for (size_t i = 0; i < n.grad.size(); ++i) s += n.grad[i] * nx.values[i];
        (*gs)[0] += s;
      }
      if (auto* gx = in_grad(n.b)) {
        const double sv = ns.values[0];
        for (size_t i = 0; i < n.grad.size(); ++i) (*gx)[i] += sv * n.grad[i];
      }
      break;
    }
    case Op::Scale: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.c * n.grad[i];
      }
      break;
    }
    case Op::AddConst: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
      }
      break;
    }
    case Op::Relu: {
      if (auto* ga = in_grad(n.a)) {
        Node& na = node(n.a);
        for (size_t i = 0; i < n.grad.size(); ++i) {
          if (na.values[i] > 0.0) (*ga)[i] += n.grad[i];
        }
      }
      break;
    }
    case Op::Sigmoid: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) {
          const double y = n.values[i];
          (*ga)[i] += n.grad[i] * y * (1.0 - y);
        }
      }
      break;
    }
    case Op::Tanh: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) {
          const double y = n.values[i];
          (*ga)[i] += n.grad[i] * (1.0 - y * y);
        }
      }
      break;
    }
    case Op::Log: {
      if (auto* ga = in_grad(n.a)) {
        Node& na = node(n.a);
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i] / na.values[i];
      }
      break;
    }
    case Op::Exp: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i] * n.values[i];
      }
      break;
    }
    case Op::SoftmaxRows:
    case Op::SoftmaxRowsMasked: {
      if (auto* ga = in_grad(n.a)) {
        for (int i = 0; i < n.rows; ++i) {
          const size_t off = static_cast<size_t>(i) * n.cols;
          const double* y = n.values.data() + off;
          const double* g = n.grad.data() + off;
          double dot = 0.0;
          for (int j = 0; j < n.cols; ++j) dot += g[j] * y[j];
          double* gr = ga->data() + off;
          for (int j = 0; j < n.cols; ++j) gr[j] += y[j] * (g[j] - dot);
        }
      }
      break;
    }
    case Op::LogSumExpRows: {
      if (auto* ga = in_grad(n.a)) {
        Node& na = node(n.a);
        for (int i = 0; i < na.rows; ++i) {
          const double* x = na.values.data() + static_cast<size_t>(i) * na.cols;
          const double lse = n.values[i];
          const double gi = n.grad[i];
          double* gr = ga->data() + static_cast<size_t>(i) * na.cols;
          for (int j = 0; j < na.cols; ++j) gr[j] += gi * std::exp(x[j] - lse);
        }
      }
      break;
    }
    case Op::LayerNormRows: {
      if (auto* ga = in_grad(n.a)) {
        Node& na = node(n.a);
        const int c = n.cols;
        for (int i = 0; i < n.rows; ++i) {
          const size_t off = static_cast<size_t>(i) * c;
          const double* x = na.values.data() + off;
          const double* y = n.values.data() + off;
          const double* g = n.grad.data() + off;
          double mean = 0.0;
          for (int j = 0; j < c; ++j) mean += x[j];
          mean /= c;
          double var = 0.0;
          for (int j = 0; j < c; ++j) {
            const double d = x[j] - mean;
            var += d * d;
          }
          var /= c;
          const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
          double gmean = 0.0, gydot = 0.0;
          for (int j = 0; j < c; ++j) {
            gmean += g[j];
            gydot += g[j] * y[j];
          }
          gmean /= c;
          gydot /= c;
          double* gr = ga->data() + off;
          for (int j = 0; j < c; ++j) gr[j] += inv * (g[j] - gmean - y[j] * gydot);
        }
      }
      break;
    }
    case Op::ConcatRows: {
      size_t off = 0;
      for (ValueId x : n.inputs) {
        Node& nx = node(x);
        if (nx.needs_grad) {
          ensure(nx.grad, nx.values.size());
          for (size_t i = 0; i < nx.values.size(); ++i) nx.grad[i] += n.grad[off + i];
        }
        off += nx.values.size();
      }
      break;
    }
    case Op::ConcatCols: {
      int col_off = 0;
      for (ValueId x : n.inputs) {
        Node& nx = node(x);
        if (nx.needs_grad) {
          ensure(nx.grad, nx.values.size());
          for (int i = 0; i < n.rows; ++i) {
            const double* g = n.grad.data() + static_cast<size_t>(i) * n.cols + col_off;
            double* gr = nx.grad.data() + static_cast<size_t>(i) * nx.cols;
            for (int j = 0; j < nx.cols; ++j) gr[j] += g[j];
          }
        }
        col_off += nx.cols;
      }
      break;
    }
    case Op::MeanRows: {
      if (auto* ga = in_grad(n.a)) {
        Node& na = node(n.a);
        const double inv = 1.0 / na.rows;
        for (int i = 0; i < na.rows; ++i) {
          double* gr = ga->data() + static_cast<size_t>(i) * na.cols;
          for (int j = 0; j < na.cols; ++j) gr[j] += n.grad[j] * inv;
        }
      }
      break;
    }
    case Op::MeanCols: {
      if (auto* ga = in_grad(n.a)) {
        Node& na = node(n.a);
        const double inv = 1.0 / na.cols;
        for (int i = 0; i < na.rows; ++i) {
          double* gr = ga->data() + static_cast<size_t>(i) * na.cols;
          const double gi = n.grad[i] * inv;
          for (int j = 0; j < na.cols; ++j) gr[j] += gi;
        }
      }
      break;
    }
    case Op::GatherRows: {
      if (auto* ga = in_grad(n.a)) {
        for (int r = 0; r < n.rows; ++r) {
          double* gr = ga->data() + static_cast<size_t>(n.indices[r]) * n.cols;
          const double* g = n.grad.data() + static_cast<size_t>(r) * n.cols;
          for (int j = 0; j < n.cols; ++j) gr[j] += g[j];
        }
      }
      break;
    }
    case Op::Reshape: {
      if (auto* ga = in_grad(n.a)) {
        for (size_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// optimizer & gradient check

void SgdOptimizer::step(ParameterStore& store,
                        const std::vector<std::pair<std::string, double>>& prefix_lr_scale) {
  double norm = store.grad_norm();
  const double clip_scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
  for (const auto& name : store.names()) {
    Tensor& p = store.at(name);
    if (p.grad.empty()) continue;
    double lr = learning_rate;
    for (const auto& [prefix, s] : prefix_lr_scale) {
      if (name.rfind(prefix, 0) == 0) {
        lr *= s;
        break;
      }
    }
    auto& vel = velocity_[name];
    if (vel.size() != p.values.size()) vel.assign(p.values.size(), 0.0);
    for (size_t i = 0; i < p.values.size(); ++i) {
      vel[i] = momentum * vel[i] - lr * clip_scale * p.grad[i];
      p.values[i] += vel[i];
    }
  }
  store.step_count++;
}

double grad_check(ParameterStore& store,
                  const std::function<ValueId(Tape&)>& build_loss,
                  double step) {
  store.zero_grads();
  {
    Tape tape;
    ValueId loss = build_loss(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& name : store.names()) analytic.push_back(store.at(name).grad);

  auto eval = [&]() {
    Tape tape;
    return tape.scalar_value(build_loss(tape));
  };

  double max_rel = 0.0;
  size_t pi = 0;
  for (const auto& name : store.names()) {
    Tensor& p = store.at(name);
    for (size_t i = 0; i < p.values.size(); ++i) {
      const double orig = p.values[i];
      p.values[i] = orig + step;
      const double fp = eval();
      p.values[i] = orig - step;
      const double fm = eval();
      p.values[i] = orig;
      const double g_fd = (fp - fm) / (2.0 * step);
      const double g_ad = analytic[pi].empty() ? 0.0 : analytic[pi][i];
      const double rel = std::abs(g_ad - g_fd) / std::max(1e-8, std::abs(g_ad) + std::abs(g_fd));
      max_rel = std::max(max_rel, rel);
    }
    ++pi;
  }
  return max_rel;
}

}  // namespace circuitscope::diffcore
