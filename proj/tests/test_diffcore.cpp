#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numeric>

#include "circuitscope/diffcore.hpp"
#include "circuitscope/rng.hpp"

using namespace circuitscope;
using namespace circuitscope::diffcore;

namespace {

Tensor make(int r, int c, std::vector<double> v) {
  Tensor t(r, c);
  t.values = std::move(v);
  return t;
}

}  // namespace

TEST_CASE("row softmax of zeros is uniform") {
  Tape tape;
  ValueId y = tape.softmax_rows(tape.constant(make(1, 3, {0, 0, 0})));
  for (double v : tape.values_of(y)) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("relu clamps negatives") {
  Tape tape;
  ValueId y = tape.relu(tape.constant(make(1, 2, {-1, 2})));
  CHECK(tape.values_of(y)[0] == 0.0);
  CHECK(tape.values_of(y)[1] == 2.0);
}

TEST_CASE("matmul hand case") {
  Tape tape;
  ValueId a = tape.constant(make(2, 2, {1, 2, 3, 4}));
  ValueId b = tape.constant(make(2, 1, {1, 1}));
  ValueId c = tape.matmul(a, b);
  CHECK(tape.values_of(c)[0] == 3.0);
  CHECK(tape.values_of(c)[1] == 7.0);
}

TEST_CASE("matmul shape mismatch names the primitive and shapes") {
  Tape tape;
  ValueId a = tape.constant(make(2, 3, {1, 2, 3, 4, 5, 6}));
  ValueId b = tape.constant(make(2, 1, {1, 1}));
  try {
    tape.matmul(a, b);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Computation);
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,1]") != std::string::npos);
  }
}

TEST_CASE("non-finite forward raises with node id") {
  Tape tape;
  ValueId a = tape.constant(make(1, 1, {0.0}));
  CHECK_THROWS_AS(tape.log(a), Error);
}

TEST_CASE("softmax rows sum to one and are positive") {
  Rng rng(5);
  Tape tape;
  Tensor x(7, 9);
  for (double& v : x.values) v = rng.uniform(-4, 4);
  ValueId y = tape.softmax_rows(tape.constant(x));
  const auto& v = tape.values_of(y);
  for (int i = 0; i < 7; ++i) {
    double s = 0;
    for (int j = 0; j < 9; ++j) {
      CHECK(v[i * 9 + j] > 0.0);
      s += v[i * 9 + j];
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("masked softmax zeroes masked entries exactly and renormalizes") {
  Tape tape;
  Tensor x(2, 3);
  x.values = {5.0, 1.0, 2.0, -1.0, 0.0, 3.0};
  std::vector<uint8_t> mask = {1, 0, 1, 1, 1, 0};
  ValueId y = tape.softmax_rows_masked(tape.constant(x), mask);
  const auto& v = tape.values_of(y);
  CHECK(v[1] == 0.0);
  CHECK(v[5] == 0.0);
  CHECK(std::abs(v[0] + v[2] - 1.0) <= 1e-12);
  CHECK(std::abs(v[3] + v[4] - 1.0) <= 1e-12);
}

TEST_CASE("all-masked row is an error") {
  Tape tape;
  Tensor x(1, 2);
  x.values = {1.0, 2.0};
  CHECK_THROWS_AS(tape.softmax_rows_masked(tape.constant(x), {0, 0}), Error);
}

TEST_CASE("layer norm rows have mean 0 and variance 1") {
  Rng rng(6);
  Tape tape;
  Tensor x(5, 16);
  for (double& v : x.values) v = rng.uniform(-3, 7);
  ValueId y = tape.layer_norm_rows(tape.constant(x));
  const auto& v = tape.values_of(y);
  for (int i = 0; i < 5; ++i) {
    double mean = 0, var = 0;
    for (int j = 0; j < 16; ++j) mean += v[i * 16 + j];
    mean /= 16;
    for (int j = 0; j < 16; ++j) var += (v[i * 16 + j] - mean) * (v[i * 16 + j] - mean);
    var /= 16;
    CHECK(std::abs(mean) <= 1e-9);
    CHECK(std::abs(var - 1.0) <= 1e-6);
  }
}

TEST_CASE("backward of x squared at x=3 gives 6") {
  ParameterStore store(0);
  Tensor& x = store.add("x", 1, 1);
  x.values[0] = 3.0;
  store.zero_grads();
  Tape tape;
  ValueId xv = tape.param(x);
  ValueId loss = tape.mul(xv, xv);
  tape.backward(loss);
  CHECK(x.grad[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("mean gradient distributes 1/k") {
  ParameterStore store(0);
  Tensor& x = store.add("x", 1, 4);
  x.values = {1, 2, 3, 4};
  store.zero_grads();
  Tape tape;
  ValueId loss = tape.mean_all(tape.param(x));
  tape.backward(loss);
  for (double g : x.grad) CHECK(g == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("backward before any computation is a state error") {
  Tape tape;
  CHECK_THROWS_AS(tape.backward(0), Error);
}

TEST_CASE("unreachable parameters keep zero grad") {
  ParameterStore store(1);
  Tensor& x = store.add("x", 1, 1);
  Tensor& unused = store.add("unused", 2, 2);
  x.values[0] = 2.0;
  store.zero_grads();
  Tape tape;
  ValueId loss = tape.mul(tape.param(x), tape.param(x));
  tape.backward(loss);
  for (double g : unused.grad) CHECK(g == 0.0);
}

TEST_CASE("linear primitive gradient follows the transpose rule") {
  // loss = sum(A @ B) => dA = ones @ B^T, dB = A^T @ ones
  Rng rng(9);
  ParameterStore store(2);
  Tensor& a = store.add("a", 3, 4);
  Tensor& b = store.add("b", 4, 2);
  for (double& v : a.values) v = rng.uniform(-1, 1);
  for (double& v : b.values) v = rng.uniform(-1, 1);
  store.zero_grads();
  Tape tape;
  ValueId prod = tape.matmul(tape.param(a), tape.param(b));
  ValueId loss = tape.scale(tape.mean_all(prod), 6.0);  // sum = mean * numel
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      double expect = 0;
      for (int j = 0; j < 2; ++j) expect += b.at(k, j);
      CHECK(a.grad[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  for (int k = 0; k < 4; ++k) {
    for (int j = 0; j < 2; ++j) {
      double expect = 0;
      for (int i = 0; i < 3; ++i) expect += a.at(i, k);
      CHECK(b.grad[k * 2 + j] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("grad check on a quadratic form") {
  Rng rng(12);
  ParameterStore store(3);
  Tensor& w = store.add("w", 4, 4);
  Tensor& v = store.add("v", 1, 4);
  for (double& x : w.values) x = rng.uniform(-1, 1);
  for (double& x : v.values) x = rng.uniform(-1, 1);
  auto build = [&](Tape& t) {
    ValueId vv = t.param(v);
    ValueId q = t.matmul(t.matmul(vv, t.param(w)), t.transpose(vv));
    return t.mul(q, q);
  };
  CHECK(grad_check(store, build) < 1e-9);
}

TEST_CASE("grad check on softmax cross-entropy") {
  Rng rng(13);
  ParameterStore store(4);
  Tensor& w = store.add("w", 5, 3);
  for (double& x : w.values) x = rng.uniform(-1, 1);
  Tensor input(2, 5);
  for (double& x : input.values) x = rng.uniform(-1, 1);
  Tensor onehot(3, 1);
  onehot.values = {0, 1, 0};
  auto build = [&](Tape& t) {
    ValueId logits = t.matmul(t.constant(input), t.param(w));
    ValueId lse = t.logsumexp_rows(logits);
    ValueId picked = t.matmul(logits, t.constant(onehot));
    return t.mean_all(t.sub(lse, picked));
  };
  CHECK(grad_check(store, build) < 1e-6);
}

TEST_CASE("grad check covers every primitive") {
  Rng rng(14);
  ParameterStore store(5);
  Tensor& a = store.add("a", 3, 4);
  Tensor& b = store.add("b", 3, 4);
  Tensor& s = store.add("s", 1, 1);
  Tensor& w = store.add("w", 4, 3);
  Tensor& bias = store.add("bias", 1, 3, 4);
  for (auto* t : {&a, &b, &w}) {
    for (double& x : t->values) x = rng.uniform(-0.8, 0.8);
  }
  s.values[0] = 0.7;
  for (double& x : bias.values) x = rng.uniform(-0.3, 0.3);
  auto build = [&](Tape& t) {
    ValueId av = t.param(a);
    ValueId bv = t.param(b);
    ValueId mixed = t.add(t.mul(av, bv), t.sub(av, t.scale(bv, 0.5)));
    ValueId acts = t.add(t.relu(mixed), t.add(t.sigmoid(av), t.tanh(bv)));
    ValueId proj = t.add(t.matmul(acts, t.param(w)), t.param(bias));
    ValueId normd = t.layer_norm_rows(proj);
    ValueId soft = t.softmax_rows(t.scalar_mul(t.param(s), normd));
    std::vector<uint8_t> mask = {1, 1, 0, 1, 0, 1, 1, 1, 1};
    ValueId msoft = t.softmax_rows_masked(t.add_const(normd, 0.1), mask);
    ValueId joined = t.concat_cols({soft, msoft, t.exp(t.scale(normd, 0.3))});
    ValueId gathered = t.gather_rows(joined, {2, 0, 1, 2});
    ValueId shaped = t.reshape(gathered, 4, 9);
    ValueId lse = t.logsumexp_rows(shaped);
    ValueId stacked = t.concat_rows({t.mean_rows(shaped), t.gather_rows(shaped, {1})});
    ValueId safe = t.log(t.add_const(t.mul(stacked, stacked), 1.0));
    ValueId colpath = t.mean_all(t.mul(t.transpose(t.mean_cols(shaped)), t.mean_rows(t.transpose(shaped))));
    return t.add(t.add(t.mean_all(safe), t.mean_all(lse)), colpath);
  };
  CHECK(grad_check(store, build) < 1e-4);
}

TEST_CASE("parameter init is seeded and bounded by fan-in") {
  ParameterStore store(77);
  Tensor& w = store.add("layer.w", 64, 8);
  double bound = 1.0 / std::sqrt(64.0);
  for (double v : w.values) {
    CHECK(v >= -bound);
    CHECK(v <= bound);
  }
  std::vector<double> first = w.values;
  w.values.assign(w.values.size(), 0.0);
  store.reinit();
  CHECK(store.at("layer.w").values == first);

  ParameterStore other(77);
  Tensor& w2 = other.add("layer.w", 64, 8);
  CHECK(w2.values == first);
}

TEST_CASE("optimizer moves parameters against the gradient and clips") {
  ParameterStore store(8);
  Tensor& x = store.add("x", 1, 2);
  x.values = {1.0, -1.0};
  store.zero_grads();
  x.grad = {30.0, -40.0};  // norm 50 -> clipped to 5
  SgdOptimizer opt;
  opt.momentum = 0.0;
  opt.learning_rate = 0.1;
  opt.step(store);
  CHECK(x.values[0] == doctest::Approx(1.0 - 0.1 * 3.0).epsilon(1e-12));
  CHECK(x.values[1] == doctest::Approx(-1.0 + 0.1 * 4.0).epsilon(1e-12));
  CHECK(store.step_count == 1);
}

TEST_CASE("prefix learning-rate scale applies to matching names only") {
  ParameterStore store(8);
  Tensor& enc = store.add("enc.w", 1, 1);
  Tensor& head = store.add("head.w", 1, 1);
  enc.values = {0.0};
  head.values = {0.0};
  store.zero_grads();
  enc.grad = {1.0};
  head.grad = {1.0};
  SgdOptimizer opt;
  opt.momentum = 0.0;
  opt.learning_rate = 1.0;
  opt.clip_norm = 0.0;  // disabled
  opt.step(store, {{"enc.", 0.1}});
  CHECK(enc.values[0] == doctest::Approx(-0.1).epsilon(1e-12));
  CHECK(head.values[0] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(15);
  ParameterStore store(99);
  store.add("m.q", 8, 8);
  store.add("m.k", 8, 8);
  Tensor& odd = store.add("m.bias", 1, 8, 8);
  for (double& v : odd.values) v = rng.uniform(-2, 2);
  store.step_count = 1234;

  auto dir = std::filesystem::temp_directory_path() / "circuitscope_ckpt_test";
  std::filesystem::remove_all(dir);
  store.save(dir);
  ParameterStore loaded = ParameterStore::load(dir);
  CHECK(loaded.step_count == 1234);
  CHECK(loaded.seed() == 99);
  CHECK(loaded.names() == store.names());
  for (const auto& name : store.names()) {
    CHECK(loaded.at(name).values == store.at(name).values);
    CHECK(loaded.at(name).fan_in == store.at(name).fan_in);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("truncated checkpoint data is a parse error") {
  ParameterStore store(1);
  store.add("w", 4, 4);
  auto dir = std::filesystem::temp_directory_path() / "circuitscope_ckpt_trunc";
  std::filesystem::remove_all(dir);
  store.save(dir);
  std::filesystem::resize_file(dir / "params.bin", 8);
  CHECK_THROWS_AS(ParameterStore::load(dir), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("tape reset recycles buffers and allows rebuilding") {
  Tape tape;
  for (int iter = 0; iter < 3; ++iter) {
    ValueId a = tape.constant(make(2, 2, {1, 2, 3, 4}));
    ValueId b = tape.matmul(a, a);
    CHECK(tape.values_of(b)[0] == 7.0);
    tape.reset();
    CHECK(tape.node_count() == 0);
  }
}
