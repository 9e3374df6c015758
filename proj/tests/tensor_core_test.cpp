#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <algorithm>
#include <cstring>
#include <sstream>

#include "rfamoe/autograd.hpp"
#include "rfamoe/gradcheck.hpp"
#include "rfamoe/ops.hpp"
#include "rfamoe/rng.hpp"
#include "rfamoe/tensor_io.hpp"

using namespace rfamoe;

namespace {

// Reference convolution: explicit zero-padded buffer and a direct nested loop.
Tensor naive_conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.dim(0), cin = x.dim(1), t = x.dim(2);
  const std::size_t cout = w.dim(0), s = w.dim(2);
  const std::size_t left = (s - 1) / 2, right = s - 1 - left;
  Tensor out({n, cout, t});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t k = 0; k < t; ++k) {
        double acc = b[co];
        for (std::size_t ci = 0; ci < cin; ++ci) {
          std::vector<double> padded(left, 0.0);
          for (std::size_t q = 0; q < t; ++q) padded.push_back(x.at(i, ci, q));
          padded.insert(padded.end(), right, 0.0);
          for (std::size_t tap = 0; tap < s; ++tap) acc += w.at(co, ci, tap) * padded[k + tap];
        }
        out.at(i, co, k) = acc;
      }
    }
  }
  return out;
}

Tensor row(std::initializer_list<double> v) {
  return Tensor({1, 1, v.size()}, std::vector<double>(v));
}

}  // namespace

TEST(Tensor, RejectsMismatchedDataLength) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
}

TEST(Conv1d, IdentityKernel) {
  auto y = ops::conv1d(row({1, 2, 3}), Tensor({1, 1, 1}, {1.0}), Tensor::from({0.0}));
  EXPECT_EQ(y.values(), (std::vector<double>{1, 2, 3}));
}

TEST(Conv1d, ScalingKernel) {
  auto y = ops::conv1d(row({1, 2, 3}), Tensor({1, 1, 1}, {2.0}), Tensor::from({0.0}));
  EXPECT_EQ(y.values(), (std::vector<double>{2, 4, 6}));
}

TEST(Conv1d, BoxKernelSamePadding) {
  const Tensor x = row({1, 2, 3});
  const Tensor w({1, 1, 3}, {1, 1, 1});
  const Tensor b = Tensor::from({0.0});
  const auto oracle = naive_conv1d(x, w, b);
  EXPECT_EQ(oracle.values(), (std::vector<double>{3, 6, 5}));
  EXPECT_EQ(ops::conv1d(x, w, b).values(), oracle.values());
}

TEST(Conv1d, EvenKernelPadsExtraOnRight) {
  // S=2: no left pad, one right pad, so y[t] = x[t] * w0 + x[t+1] * w1.
  auto y = ops::conv1d(row({1, 2, 3}), Tensor({1, 1, 2}, {1, 10}), Tensor::from({0.0}));
  EXPECT_EQ(y.values(), (std::vector<double>{21, 32, 3}));
}

TEST(Conv1d, MatchesNaiveOracleOnRandomShapes) {
  Rng rng(7);
  for (std::size_t s : {1u, 2u, 3u, 4u, 7u, 12u}) {
    const Tensor x = rng.normal_tensor({2, 3, 9});
    const Tensor w = rng.normal_tensor({4, 3, s});
    const Tensor b = rng.normal_tensor({4});
    EXPECT_LT(max_abs_diff(ops::conv1d(x, w, b), naive_conv1d(x, w, b)), 1e-12) << "S=" << s;
  }
}

TEST(Conv1d, ValidPaddingShrinksOutput) {
  auto y = ops::conv1d(row({1, 2, 3, 4}), Tensor({1, 1, 3}, {1, 1, 1}), Tensor::from({0.0}),
                       ops::Padding::valid);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(y.values(), (std::vector<double>{6, 9}));
}

TEST(Conv1d, ShapeMismatchNamesAxes) {
  try {
    ops::conv1d(Tensor({1, 2, 5}), Tensor({1, 3, 1}), Tensor({1}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("axis 1"), std::string::npos) << msg;
  }
  EXPECT_THROW(ops::conv1d(Tensor({1, 1, 5}), Tensor({2, 1, 1}), Tensor({3})), ShapeError);
}

TEST(Conv1d, IdentityKernelIsIdentity) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = rng.normal_tensor({3, 1, 17});
    EXPECT_EQ(ops::conv1d(x, Tensor({1, 1, 1}, {1.0}), Tensor::from({0.0})), x);
  }
}

TEST(Conv1d, LinearInInputAndWeight) {
  Rng rng(3);
  const Tensor zero_bias({2});
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = rng.normal_tensor({2, 3, 16});
    const Tensor y = rng.normal_tensor({2, 3, 16});
    const Tensor w = rng.normal_tensor({2, 3, 5});
    const Tensor v = rng.normal_tensor({2, 3, 5});
    const double a = rng.normal(), c = rng.normal();
    const Tensor lhs = ops::conv1d(a * x + c * y, w, zero_bias);
    const Tensor rhs = a * ops::conv1d(x, w, zero_bias) + c * ops::conv1d(y, w, zero_bias);
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
    const Tensor lw = ops::conv1d(x, a * w + c * v, zero_bias);
    const Tensor rw = a * ops::conv1d(x, w, zero_bias) + c * ops::conv1d(x, v, zero_bias);
    EXPECT_LT(max_abs_diff(lw, rw), 1e-12);
  }
}

TEST(InstanceNorm, ConstantInputGivesZeros) {
  auto y = ops::instance_norm(Tensor({1, 2, 4}, 3.5), Tensor({2}, 1.0), Tensor({2}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNorm, ZeroGammaCollapsesToBeta) {
  Rng rng(1);
  auto y = ops::instance_norm(rng.normal_tensor({2, 2, 8}), Tensor({2}), Tensor::from({1.5, -2.0}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 8; ++k) {
      EXPECT_EQ(y.at(i, 0, k), 1.5);
      EXPECT_EQ(y.at(i, 1, k), -2.0);
    }
}

TEST(InstanceNorm, TwoPointExample) {
  auto y = ops::instance_norm(row({1, -1}), Tensor({1}, 1.0), Tensor({1}), 1e-5);
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);  // mean 0, var 1
  EXPECT_NEAR(y[0], expected, 1e-15);
  EXPECT_NEAR(y[1], -expected, 1e-15);
  EXPECT_NEAR(y[0], 0.999995, 1e-6);
}

TEST(InstanceNorm, RejectsShortTimeAxis) {
  EXPECT_THROW(ops::instance_norm(Tensor({1, 1, 1}), Tensor({1}), Tensor({1})), ShapeError);
}

TEST(InstanceNorm, NormalizedMoments) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = 3.0 * rng.normal_tensor({2, 3, 32});
    const auto y = ops::instance_norm(x, Tensor({3}, 1.0), Tensor({3}), 1e-14);
    for (std::size_t i = 0; i < 6; ++i) {
      double mean = 0.0, var = 0.0;
      for (std::size_t k = 0; k < 32; ++k) mean += y[i * 32 + k];
      mean /= 32;
      for (std::size_t k = 0; k < 32; ++k) var += (y[i * 32 + k] - mean) * (y[i * 32 + k] - mean);
      var /= 32;
      EXPECT_LE(std::abs(mean), 1e-10);
      EXPECT_LE(std::abs(var - 1.0), 1e-6);
    }
  }
}

TEST(Gelu, Anchors) {
  EXPECT_EQ(ops::gelu(0.0), 0.0);
  EXPECT_NEAR(ops::gelu(10.0), 10.0, 1e-12);
  // Phi(1) = 0.5 * (1 + erf(1/sqrt 2))
  EXPECT_NEAR(ops::gelu(1.0), 0.8413447460685429, 1e-15);
}

TEST(Softmax, Anchors) {
  auto u = ops::softmax(Tensor::from({2.5, 2.5, 2.5}));
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto big = ops::softmax(Tensor::from({1000.0, 0.0}));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);
  auto two = ops::softmax(Tensor::from({0.0, std::log(2.0)}));
  EXPECT_NEAR(two[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(two[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, SlicesSumToOneAndPermutationEquivariant) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = 5.0 * rng.normal_tensor({4, 6});
    const Tensor p = ops::softmax(x);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) s += p.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Tensor xp = x;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 6; ++j) xp.at(i, j) = x.at(i, perm[j]);
    const Tensor pp = ops::softmax(xp);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(pp.at(i, j), p.at(i, perm[j]), 1e-15);
  }
}

TEST(Backward, SumGivesOnes) {
  ad::Graph g;
  auto x = g.leaf(Tensor::from({1, 2, 3}));
  auto grads = ad::backward(g, ad::sum(x).id);
  EXPECT_EQ(grads.at(x.id).values(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SquareAccumulatesAcrossFanOut) {
  ad::Graph g;
  auto x = g.leaf(Tensor::from({1, 2}));
  auto grads = ad::backward(g, ad::sum(ad::mul(x, x)).id);
  EXPECT_EQ(grads.at(x.id).values(), (std::vector<double>{2, 4}));
}

TEST(Backward, RejectsNonScalarLoss) {
  ad::Graph g;
  auto x = g.leaf(Tensor::from({1, 2}));
  EXPECT_THROW(ad::backward(g, ad::scale(x, 2.0).id), ShapeError);
}

TEST(Backward, NodeIdsAreTopological) {
  ad::Graph g;
  auto x = g.leaf(Tensor::from({1, 2}));
  auto y = ad::gelu(ad::add(x, ad::scale(x, 3.0)));
  ad::sum(ad::mul(y, x));
  for (ad::NodeId id = 0; id < g.size(); ++id)
    for (auto in : g.node(id).inputs) EXPECT_LT(in, id);
}

TEST(Backward, ConvMseMatchesFiniteDifferences) {
  Rng rng(21);
  const Tensor target = rng.normal_tensor({2, 2, 10});
  const Tensor w0 = rng.normal_tensor({2, 3, 3});
  const Tensor b0 = rng.normal_tensor({2});
  const Tensor x0 = rng.normal_tensor({2, 3, 10});
  auto wrt_input = [&](ad::Graph& g, ad::Var x) {
    return ad::mse(ad::conv1d(x, g.constant(w0), g.constant(b0)), g.constant(target));
  };
  auto wrt_weight = [&](ad::Graph& g, ad::Var w) {
    return ad::mse(ad::conv1d(g.constant(x0), w, g.constant(b0)), g.constant(target));
  };
  EXPECT_LE(finite_diff_check(wrt_input, x0), 1e-4);
  EXPECT_LE(finite_diff_check(wrt_weight, w0), 1e-4);
}

TEST(FiniteDiff, SumIsExact) {
  Rng rng(2);
  auto f = [](ad::Graph&, ad::Var x) { return ad::sum(x); };
  EXPECT_LE(finite_diff_check(f, rng.normal_tensor({7})), 1e-10);
}

TEST(FiniteDiff, GeluSum) {
  Rng rng(4);
  auto f = [](ad::Graph&, ad::Var x) { return ad::sum(ad::gelu(x)); };
  EXPECT_LE(finite_diff_check(f, rng.normal_tensor({12})), 1e-6);
}

// Every differentiable tape operation, checked at 100 random points through a
// random linear functional so no adjoint entry is masked by symmetry.
class OpGradients : public ::testing::Test {
 protected:
  static constexpr int kPoints = 100;

  template <typename Build>
  void check(const Shape& shape, Build build) {
    Rng rng(1234);
    for (int p = 0; p < kPoints; ++p) {
      const Tensor point = rng.normal_tensor(shape);
      Rng inner = rng.split(static_cast<std::uint64_t>(p));
      Tensor probe;
      auto f = [&](ad::Graph& g, ad::Var x) {
        Rng local = inner;
        ad::Var y = build(g, x, local);
        if (probe.empty()) probe = local.normal_tensor(y.shape());
        return ad::sum(ad::mul(y, g.constant(probe)));
      };
      EXPECT_LE(finite_diff_check(f, point), 1e-4) << "point " << p;
    }
  }
};

TEST_F(OpGradients, Elementwise) {
  check({2, 3, 4}, [](ad::Graph& g, ad::Var x, Rng& r) {
    auto c = g.constant(r.normal_tensor({2, 3, 4}));
    return ad::sub(ad::mul(ad::add(x, c), x), ad::scale(c, 0.5));
  });
}

TEST_F(OpGradients, Conv1dAllArguments) {
  check({2, 3, 8}, [](ad::Graph& g, ad::Var x, Rng& r) {
    auto w = g.constant(r.normal_tensor({2, 3, 4}));
    auto b = g.constant(r.normal_tensor({2}));
    return ad::conv1d(x, w, b);
  });
  check({2, 3, 3}, [](ad::Graph& g, ad::Var w, Rng& r) {
    auto x = g.constant(r.normal_tensor({2, 3, 7}));
    auto b = g.constant(r.normal_tensor({2}));
    return ad::conv1d(x, w, b);
  });
  check({3}, [](ad::Graph& g, ad::Var b, Rng& r) {
    auto x = g.constant(r.normal_tensor({2, 2, 5}));
    auto w = g.constant(r.normal_tensor({3, 2, 4}));
    return ad::conv1d(x, w, b);
  });
}

TEST_F(OpGradients, InstanceNormAllArguments) {
  check({2, 3, 6}, [](ad::Graph& g, ad::Var x, Rng& r) {
    return ad::instance_norm(x, g.constant(r.normal_tensor({3})), g.constant(r.normal_tensor({3})));
  });
  check({3}, [](ad::Graph& g, ad::Var gamma, Rng& r) {
    return ad::instance_norm(g.constant(r.normal_tensor({2, 3, 6})), gamma,
                             g.constant(r.normal_tensor({3})));
  });
}

TEST_F(OpGradients, GeluSoftmaxLinear) {
  check({3, 5}, [](ad::Graph&, ad::Var x, Rng&) { return ad::gelu(x); });
  check({3, 5}, [](ad::Graph&, ad::Var x, Rng&) { return ad::softmax(x); });
  check({4, 3}, [](ad::Graph& g, ad::Var x, Rng& r) {
    return ad::linear(x, g.constant(r.normal_tensor({2, 3})), g.constant(r.normal_tensor({2})));
  });
  check({2, 3}, [](ad::Graph& g, ad::Var w, Rng& r) {
    return ad::linear(g.constant(r.normal_tensor({4, 3})), w, g.constant(r.normal_tensor({2})));
  });
  check({3, 4}, [](ad::Graph& g, ad::Var a, Rng& r) {
    return ad::matmul(a, g.constant(r.normal_tensor({4, 2})));
  });
  check({4, 2}, [](ad::Graph& g, ad::Var b, Rng& r) {
    return ad::matmul(g.constant(r.normal_tensor({3, 4})), b);
  });
}

TEST_F(OpGradients, Reductions) {
  check({2, 3, 5}, [](ad::Graph&, ad::Var x, Rng&) { return ad::mean_last_axis(x); });
  check({2, 3, 5}, [](ad::Graph& g, ad::Var x, Rng& r) {
    return ad::mse(x, g.constant(r.normal_tensor({2, 3, 5})));
  });
  check({2, 4, 3}, [](ad::Graph&, ad::Var x, Rng&) { return ad::channel_slice(x, 1, 3); });
}

TEST_F(OpGradients, RoutingAndMixing) {
  check({3, 2, 4}, [](ad::Graph& g, ad::Var x, Rng& r) {
    return ad::scale_rows(x, g.constant(r.normal_tensor({3})));
  });
  check({3}, [](ad::Graph& g, ad::Var s, Rng& r) {
    return ad::scale_rows(g.constant(r.normal_tensor({3, 2, 4})), s);
  });
  check({3, 4}, [](ad::Graph&, ad::Var p, Rng&) {
    const std::size_t idx[] = {2, 0, 3};
    return ad::gather_rows(ad::softmax(p), idx);
  });
  check({2, 3}, [](ad::Graph& g, ad::Var x, Rng& r) {
    const ad::Var parts[] = {x, g.constant(r.normal_tensor({2, 3})), x};
    return ad::stack(parts);
  });
}

TEST_F(OpGradients, FilmBothArguments) {
  check({4, 2, 3}, [](ad::Graph& g, ad::Var h, Rng& r) {
    return ad::film(h, g.constant(r.normal_tensor({2, 4})));
  });
  check({2, 4}, [](ad::Graph& g, ad::Var f, Rng& r) {
    return ad::film(g.constant(r.normal_tensor({4, 2, 3})), f);
  });
}

TEST_F(OpGradients, PerSampleConvAllArguments) {
  check({3, 4, 5}, [](ad::Graph& g, ad::Var x, Rng& r) {
    return ad::per_sample_conv1x1(x, g.constant(r.normal_tensor({3, 4})),
                                  g.constant(r.normal_tensor({3})));
  });
  check({3, 4}, [](ad::Graph& g, ad::Var w, Rng& r) {
    return ad::per_sample_conv1x1(g.constant(r.normal_tensor({3, 4, 5})), w,
                                  g.constant(r.normal_tensor({3})));
  });
  check({3}, [](ad::Graph& g, ad::Var b, Rng& r) {
    return ad::per_sample_conv1x1(g.constant(r.normal_tensor({3, 4, 5})),
                                  g.constant(r.normal_tensor({3, 4})), b);
  });
}

TEST_F(OpGradients, RoutedConvAllArguments) {
  const std::size_t idx[] = {1, 0, 1, 2};
  check({4, 2, 6}, [&](ad::Graph& g, ad::Var x, Rng& r) {
    std::vector<ad::Var> w, b;
    for (std::size_t s : {3u, 5u, 1u}) {
      w.push_back(g.constant(r.normal_tensor({3, 2, s})));
      b.push_back(g.constant(r.normal_tensor({3})));
    }
    return ad::routed_conv1d(x, w, b, idx);
  });
  check({3, 2, 5}, [&](ad::Graph& g, ad::Var w1, Rng& r) {
    std::vector<ad::Var> w{g.constant(r.normal_tensor({3, 2, 3})), w1,
                           g.constant(r.normal_tensor({3, 2, 1}))};
    std::vector<ad::Var> b;
    for (int e = 0; e < 3; ++e) b.push_back(g.constant(r.normal_tensor({3})));
    return ad::routed_conv1d(g.constant(r.normal_tensor({4, 2, 6})), w, b, idx);
  });
}

TEST(RoutedConv, MatchesPerRowConvolution) {
  Rng rng(8);
  ad::Graph g;
  const Tensor x = rng.normal_tensor({3, 2, 9});
  std::vector<Tensor> ws{rng.normal_tensor({4, 2, 3}), rng.normal_tensor({4, 2, 7})};
  std::vector<Tensor> bs{rng.normal_tensor({4}), rng.normal_tensor({4})};
  std::vector<ad::Var> w{g.constant(ws[0]), g.constant(ws[1])};
  std::vector<ad::Var> b{g.constant(bs[0]), g.constant(bs[1])};
  const std::size_t idx[] = {1, 1, 0};
  const Tensor y = ad::routed_conv1d(g.constant(x), w, b, idx).value();
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor xn({1, 2, 9}, std::vector<double>(x.data().begin() + n * 18, x.data().begin() + n * 18 + 18));
    const Tensor ref = naive_conv1d(xn, ws[idx[n]], bs[idx[n]]);
    for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(y[n * 36 + i], ref[i], 1e-12);
  }
}

TEST(Tsb1, RoundTripIsBitIdentical) {
  Rng rng(1);
  Tensor t = rng.normal_tensor({2, 3, 4});
  t[0] = -0.0;
  t[1] = 1e-310;
  std::stringstream buf;
  write_tsb1(buf, t);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "TSB1");
  EXPECT_EQ(bytes.size(), 4u + 4u + 3 * 4u + 24 * 8u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 3u);  // rank, little-endian
  const Tensor back = read_tsb1(buf);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.data().data(), t.data().data(), t.numel() * 8), 0);
}

TEST(Tsb1, BadMagicNamesBytesFound) {
  std::stringstream buf("XSB1\x01\x00\x00\x00");
  try {
    read_tsb1(buf);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("0x58 0x53 0x42 0x31"), std::string::npos) << e.what();
  }
}

TEST(Tsb1, TruncatedPayloadRejected) {
  std::stringstream buf;
  write_tsb1(buf, Tensor({4}, 1.0));
  std::string bytes = buf.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream cut(bytes);
  EXPECT_THROW(read_tsb1(cut), DataError);
}
