#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mhim/params.hpp"
#include "mhim/rng.hpp"
#include "mhim/tensor.hpp"
#include "test_util.hpp"

using namespace mhim;

namespace {

Tensor random_tensor(std::vector<int> dims, Rng& rng, bool req_grad = false) {
  return Tensor::randn(std::move(dims), rng, 1.0, req_grad);
}

// Independent triple-loop product used as the matmul oracle.
std::vector<Real> naive_matmul(const Tensor& a, const Tensor& b) {
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  std::vector<Real> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < k; ++kk)
        out[static_cast<size_t>(i) * n + j] += a.at(i, kk) * b.at(kk, j);
  return out;
}

}  // namespace

TEST(Tensor, InvariantDataLengthMatchesDims) {
  EXPECT_THROW(Tensor::from_vector({2, 3}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(Tensor({0, 3}), std::invalid_argument);
  Tensor t({2, 3}, true);
  ASSERT_TRUE(t.grad);
  EXPECT_EQ(t.grad->size(), t.numel());
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Rng rng(1);
  Tensor a = random_tensor({2, 5}, rng);
  Tensor out = matmul(Tensor::identity(2), a);
  for (size_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ((*out.data)[i], (*a.data)[i]);
}

TEST(Matmul, HandChecked2x2) {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_vector({2, 1}, {1, 1});
  Tensor out = matmul(a, b);
  EXPECT_DOUBLE_EQ(out.at(0, 0), 3);
  EXPECT_DOUBLE_EQ(out.at(1, 0), 7);
}

TEST(Matmul, MatchesNaiveTripleLoopOracle) {
  Rng rng(42);
  Tensor a = random_tensor({5, 4}, rng);
  Tensor b = random_tensor({4, 3}, rng);
  Tensor out = matmul(a, b);
  const auto expected = naive_matmul(a, b);
  for (size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR((*out.data)[i], expected[i], 1e-12);
}

TEST(Matmul, DimMismatchIsAnError) {
  Tensor a({2, 3});
  Tensor b({4, 2});
  EXPECT_THROW(matmul(a, b), std::invalid_argument);
}

TEST(Softmax, UniformInputGivesUniformOutput) {
  Tensor x = Tensor::from_vector({3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.at(i), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ClosedFormLn2) {
  Tensor x = Tensor::from_vector({2}, {std::log(2.0), 0.0});
  Tensor y = softmax(x, 0);
  EXPECT_NEAR(y.at(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.at(1), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(7);
  Tensor x = random_tensor({4, 5}, rng);
  Tensor shifted = x.clone();
  for (auto& v : *shifted.data) v += 123.456;
  Tensor a = softmax(x, 1);
  Tensor b = softmax(shifted, 1);
  for (size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR((*a.data)[i], (*b.data)[i], 1e-12);
}

TEST(Softmax, RowsSumToOneAndStrictlyPositive) {
  Rng rng(9);
  Tensor x = random_tensor({6, 8}, rng);
  Tensor y = softmax(x, 1);
  for (int i = 0; i < 6; ++i) {
    Real s = 0;
    for (int j = 0; j < 8; ++j) {
      EXPECT_GT(y.at(i, j), 0.0);
      s += y.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Softmax, ColumnAxisAlsoNormalizes) {
  Rng rng(10);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor y = softmax(x, 0);
  for (int j = 0; j < 3; ++j) {
    Real s = 0;
    for (int i = 0; i < 4; ++i) s += y.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Softmax, NonFiniteInputIsAnError) {
  Tensor x = Tensor::from_vector({2}, {1.0, std::numeric_limits<Real>::quiet_NaN()});
  EXPECT_THROW(softmax(x, 0), std::runtime_error);
}

TEST(Backward, SumGivesAllOnes) {
  Rng rng(3);
  Tensor x = random_tensor({3, 4}, rng, true);
  Tensor loss = sum_all(x);
  backward(loss);
  for (size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ((*x.grad)[i], 1.0);
}

TEST(Backward, DotProductSwapsOperands) {
  Rng rng(4);
  Tensor x = random_tensor({5}, rng, true);
  Tensor y = random_tensor({5}, rng, true);
  Tensor loss = dot(x, y);
  backward(loss);
  for (int i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ((*x.grad)[static_cast<size_t>(i)], y.at(i));
    EXPECT_DOUBLE_EQ((*y.grad)[static_cast<size_t>(i)], x.at(i));
  }
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = Tensor::from_vector({2}, {1.0, 2.0}, true);
  Tensor loss = sum_all(x);
  backward(loss);
  Tensor loss2 = sum_all(x);
  backward(loss2);
  EXPECT_DOUBLE_EQ((*x.grad)[0], 2.0);
}

TEST(Backward, NonScalarLossIsAnError) {
  Tensor x({2, 2}, true);
  EXPECT_THROW(backward(x), std::invalid_argument);
}

TEST(Backward, FiniteDifferencesAcrossCoreOps) {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({4, 3}, rng, true);
  Tensor bias = random_tensor({3}, rng, true);
  auto loss_fn = [&]() {
    Tensor h = add_rowvec(matmul(a, b), bias);
    Tensor s = softmax(h, 1);
    Tensor l = log_softmax(h, 1);
    Tensor mixed = add(mul(s, l), relu(h));
    return mean_all(concat_rows(mixed, transpose2d(mixed)));
  };
  EXPECT_LT(testutil::gradient_check(loss_fn, {a, b, bias}), 1e-6);
}

TEST(Backward, FiniteDifferencesThroughGatherAggregateNormalize) {
  Rng rng(12);
  Tensor table = random_tensor({5, 4}, rng, true);
  const std::vector<int> idx = {0, 3, 3, 1};
  const std::vector<std::pair<int, int>> edges = {{0, 1}, {0, 2}, {1, 0}, {2, 3}};
  auto loss_fn = [&]() {
    Tensor g = gather_rows(table, idx);
    Tensor agg = aggregate_rows(g, edges, 3);
    Tensor pooled = mean_rows(agg);
    return sum_all(l2_normalize(pooled));
  };
  EXPECT_LT(testutil::gradient_check(loss_fn, {table}), 1e-6);
}

TEST(Adam, ZeroGradsLeaveParametersUnchanged) {
  Rng rng(5);
  ParameterStore store;
  store.add("w", random_tensor({3, 3}, rng));
  Tensor before = store.get("w").clone();
  AdamState state;
  adam_step(store, state);
  for (size_t i = 0; i < before.numel(); ++i) {
    EXPECT_DOUBLE_EQ((*store.get("w").data)[i], (*before.data)[i]);
  }
}

TEST(Adam, FirstStepMatchesSignedClosedForm) {
  ParameterStore store;
  Tensor& w = store.add("w", Tensor::from_vector({3}, {1.0, -2.0, 0.5}));
  (*w.grad)[0] = 0.3;
  (*w.grad)[1] = -0.7;
  (*w.grad)[2] = 1.1;
  AdamState state;
  state.lr = 0.01;
  adam_step(store, state);
  for (size_t i = 0; i < 3; ++i) {
    const Real g = i == 0 ? 0.3 : (i == 1 ? -0.7 : 1.1);
    const Real base = i == 0 ? 1.0 : (i == 1 ? -2.0 : 0.5);
    const Real expected = base - 0.01 * g / (std::fabs(g) + state.eps);
    EXPECT_NEAR((*w.data)[i], expected, 1e-12);
  }
}

TEST(Adam, QuadraticConvergesAndMatchesScalarOracle) {
  // Library path.
  ParameterStore store;
  Tensor& w = store.add("w", Tensor::from_vector({1}, {1.0}));
  AdamState state;
  state.lr = 0.1;
  for (int step = 0; step < 100; ++step) {
    store.zero_grad();
    Tensor loss = mul(w, w);
    backward(loss);
    adam_step(store, state);
  }
  // Independent scalar recurrence.
  double ow = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    const double g = 2.0 * ow;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    ow -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
  }
  EXPECT_NEAR((*w.data)[0], ow, 1e-12);
  EXPECT_LT(std::fabs((*w.data)[0]), 0.1);
}

TEST(Adam, WeightDecayAddsCoupledL2Term) {
  ParameterStore store;
  Tensor& w = store.add("w", Tensor::from_vector({1}, {2.0}));
  AdamState state;
  state.lr = 0.1;
  state.weight_decay = 0.5;
  adam_step(store, state);  // grad 0, effective grad = wd * w = 1.0
  EXPECT_NEAR((*w.data)[0], 2.0 - 0.1 * 1.0 / (1.0 + 1e-8), 1e-12);
}

TEST(Adam, MomentShapeDriftIsAnError) {
  AdamState state;
  {
    ParameterStore store;
    Tensor& w = store.add("w", Tensor::from_vector({2}, {1.0, 2.0}));
    (*w.grad)[0] = 0.5;
    adam_step(store, state);
  }
  ParameterStore drifted;
  drifted.add("w", Tensor::from_vector({3}, {1.0, 2.0, 3.0}));
  EXPECT_THROW(adam_step(drifted, state), std::logic_error);
}

TEST(ParameterStore, RejectsDuplicatesAndIteratesSorted) {
  ParameterStore store;
  store.add("b", Tensor({1}));
  store.add("a", Tensor({1}));
  EXPECT_THROW(store.add("a", Tensor({1})), std::invalid_argument);
  std::vector<std::string> names;
  for (auto& [name, t] : store) names.push_back(name);
  EXPECT_EQ(names, (std::vector<std::string>{"a", "b"}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const std::string dir = testutil::scratch_dir("ckpt_roundtrip");
  Rng rng(21);
  ParameterStore store;
  store.add("emb.table", random_tensor({4, 3}, rng));
  store.add("rgcn.theta0", random_tensor({3, 3}, rng));
  save_checkpoint(store, dir + "/a.ckpt");
  ParameterStore loaded = load_checkpoint(dir + "/a.ckpt");
  ASSERT_EQ(loaded.size(), store.size());
  for (auto& [name, t] : store) {
    const Tensor& l = loaded.get(name);
    ASSERT_EQ(l.shape, t.shape);
    for (size_t i = 0; i < t.numel(); ++i) EXPECT_EQ((*l.data)[i], (*t.data)[i]);
  }
}

TEST(Checkpoint, F32ModeRoundTripsWithinFloatPrecision) {
  const std::string dir = testutil::scratch_dir("ckpt_f32");
  Rng rng(22);
  ParameterStore store;
  store.add("w", random_tensor({8}, rng));
  save_checkpoint(store, dir + "/a.ckpt", CheckpointDtype::f32);
  ParameterStore loaded = load_checkpoint(dir + "/a.ckpt");
  for (size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR((*loaded.get("w").data)[i], (*store.get("w").data)[i], 1e-6);
  }
}

TEST(Checkpoint, RejectsBadMagicVersionAndDtype) {
  const std::string dir = testutil::scratch_dir("ckpt_reject");
  ParameterStore store;
  store.add("w", Tensor::from_vector({2}, {1.0, 2.0}));
  const std::string path = dir + "/a.ckpt";
  save_checkpoint(store, path);

  auto corrupt_at = [&](size_t offset, char value) {
    std::string bytes = testutil::read_file_bytes(path);
    bytes[offset] = value;
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };

  corrupt_at(0, 'X');  // magic
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  save_checkpoint(store, path);
  corrupt_at(4, 9);  // version
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  save_checkpoint(store, path);
  corrupt_at(4 + 4 + 4 + 4 + 1, 7);  // dtype byte after "MHIM", version, count, name len, "w"
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, WritesAreByteIdentical) {
  const std::string dir = testutil::scratch_dir("ckpt_determinism");
  Rng rng(23);
  ParameterStore store;
  store.add("a", random_tensor({5, 5}, rng));
  store.add("z", random_tensor({2}, rng));
  save_checkpoint(store, dir + "/x.ckpt");
  save_checkpoint(store, dir + "/y.ckpt");
  EXPECT_EQ(testutil::read_file_bytes(dir + "/x.ckpt"), testutil::read_file_bytes(dir + "/y.ckpt"));
}

TEST(Rng, SubstreamsAreDeterministicAndIndependent) {
  Rng a(99);
  Rng b(99);
  Rng s1 = a.substream("walk");
  Rng s2 = b.substream("walk");
  Rng s3 = a.substream("init");
  EXPECT_EQ(s1.next_u64(), s2.next_u64());
  EXPECT_NE(s1.seed(), s3.seed());
}

TEST(Rng, UniformIntStaysInRange) {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const int v = rng.uniform_int(7);
    EXPECT_GE(v, 0);
    EXPECT_LT(v, 7);
  }
  EXPECT_THROW(rng.uniform_int(0), std::invalid_argument);
}

TEST(NoGrad, SuppressesTapeRecording) {
  Tensor x = Tensor::from_vector({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  Tensor y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad);
  EXPECT_FALSE(static_cast<bool>(y.node));
}
