#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "circuitscope/common.hpp"

namespace circuitscope::diffcore {

// Dense 64-bit tensor. All ops in this engine work on rank-2 tensors;
// vectors travel as [1,n] or [n,1].
struct Tensor {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated on demand, same extent as values
  int fan_in = 0;            // used by the init scheme for parameters

  Tensor() = default;
  Tensor(int rows, int cols, double fill = 0.0)
      : shape{rows, cols}, values(static_cast<size_t>(rows) * cols, fill) {}

  static Tensor from_matrix(const Matrix& m) {
    Tensor t(m.rows, m.cols);
    t.values = m.v;
    return t;
  }

  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  size_t numel() const { return values.size(); }
  double& at(int r, int c) { return values[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return values[static_cast<size_t>(r) * cols() + c]; }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
  void zero_grad() { grad.assign(values.size(), 0.0); }
};

// Named parameter tensors with seeded re-initialization: values are drawn
// uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from a per-name stream, so
// the layout is independent of creation order and bit-identical per seed.
class ParameterStore {
public:
  explicit ParameterStore(uint64_t seed) : seed_(seed) {}

  Tensor& add(const std::string& name, int rows, int cols, int fan_in = -1);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }

  void zero_grads();
  void reinit();  // redraw every parameter from the seed
  double grad_norm() const;

  uint64_t seed() const { return seed_; }
  uint64_t step_count = 0;

  // checkpoint: params.json manifest + params.bin of little-endian doubles
  void save(const std::filesystem::path& dir) const;
  static ParameterStore load(const std::filesystem::path& dir);

private:
  void init_tensor(const std::string& name, Tensor& t);

  uint64_t seed_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, size_t> index_;
  std::deque<Tensor> tensors_;
};

using ValueId = int;

enum class Op : uint8_t {
  Constant, Param,
  MatMul, Transpose,
  Add, AddRowBroadcast, Sub, Mul, ScalarMul, Scale, AddConst,
  Relu, Sigmoid, Tanh, Log, Exp,
  SoftmaxRows, SoftmaxRowsMasked, LogSumExpRows, LayerNormRows,
  ConcatRows, ConcatCols, MeanRows, MeanCols, GatherRows, Reshape,
};

// Eager computation record. Every op computes its value immediately and is
// recorded for the reverse pass. Buffers are recycled through a size-keyed
// pool across reset() calls since training rebuilds the same graph each step.
class Tape {
public:
  static constexpr double kLayerNormEps = 1e-9;

  ValueId constant(const Tensor& t);
  ValueId constant(const Matrix& m) { return constant(Tensor::from_matrix(m)); }
  ValueId scalar(double x);
  ValueId param(Tensor& p);

  ValueId matmul(ValueId a, ValueId b);
  ValueId transpose(ValueId a);
  ValueId add(ValueId a, ValueId b);  // same shape, or b a [1,n] row to broadcast
  ValueId sub(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId scalar_mul(ValueId s, ValueId a);  // s is [1,1]
  ValueId scale(ValueId a, double c);
  ValueId add_const(ValueId a, double c);
  ValueId relu(ValueId a);
  ValueId sigmoid(ValueId a);
  ValueId tanh(ValueId a);
  ValueId log(ValueId a);
  ValueId exp(ValueId a);
  ValueId softmax_rows(ValueId a);
  // mask: row-major 0/1 bytes, 1 = position participates; masked weights are
  // exactly zero and each row must keep at least one open position
  ValueId softmax_rows_masked(ValueId a, std::vector<uint8_t> mask);
  ValueId logsumexp_rows(ValueId a);  // [m,n] -> [m,1]
  ValueId layer_norm_rows(ValueId a);
  ValueId concat_rows(const std::vector<ValueId>& xs);
  ValueId concat_cols(const std::vector<ValueId>& xs);
  ValueId mean_rows(ValueId a);  // [m,n] -> [1,n]
  ValueId mean_cols(ValueId a);  // [m,n] -> [m,1]
  ValueId gather_rows(ValueId a, std::vector<int> idx);
  ValueId row(ValueId a, int i) { return gather_rows(a, {i}); }
  ValueId reshape(ValueId a, int rows, int cols);
  ValueId mean_all(ValueId a) { return mean_cols(mean_rows(a)); }

  Tensor value(ValueId id) const;  // copies; use values_of for hot paths
  const std::vector<double>& values_of(ValueId id) const;
  const std::vector<double>& grad(ValueId id) const;
  int rows_of(ValueId id) const;
  int cols_of(ValueId id) const;
  double scalar_value(ValueId id) const;

  // reverse pass from a [1,1] loss; accumulates into ParameterStore grads
  void backward(ValueId loss);

  void reset();  // drop all nodes, keep buffers for reuse
  size_t node_count() const { return nodes_.size(); }

private:
  struct Node {
    Op op;
    int rows = 0, cols = 0;
    std::vector<double> values;
    std::vector<double> grad;
    bool needs_grad = false;
    int a = -1, b = -1;              // unary/binary inputs
    std::vector<int> inputs;         // n-ary (concat)
    std::vector<int> indices;        // gather
    std::vector<uint8_t> mask;       // masked softmax
    double c = 0.0;                  // scale / add_const
    Tensor* sink = nullptr;          // parameter write-back
  };

  ValueId push(Node&& n);
  Node& node(ValueId id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(ValueId id) const { return nodes_[static_cast<size_t>(id)]; }
  void alloc_values(Node& n);
  void check_finite(const Node& n, ValueId id) const;
  std::vector<double> take_buffer(size_t size);
  void recycle(std::vector<double>&& buf);
  void backward_one(Node& n);

  std::vector<Node> nodes_;
  std::unordered_map<size_t, std::vector<std::vector<double>>> pool_;
  bool backward_ran_ = false;
};

// Stochastic gradient descent with momentum and global gradient-norm
// clipping. Per-name-prefix learning-rate scales cover encoder fine-tuning.
struct SgdOptimizer {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double clip_norm = 5.0;

  void step(ParameterStore& store,
            const std::vector<std::pair<std::string, double>>& prefix_lr_scale = {});

private:
  std::unordered_map<std::string, std::vector<double>> velocity_;
};

// Central-difference check of the reverse pass: rebuilds the loss via
// build_loss for each probe and returns the max over all parameter
// coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
double grad_check(ParameterStore& store,
                  const std::function<ValueId(Tape&)>& build_loss,
                  double step = 1e-5);

}  // namespace circuitscope::diffcore
