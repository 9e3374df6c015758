#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "rfamoe/moe_blocks.hpp"
#include "test_support.hpp"

using namespace rfamoe;

namespace {

template <typename P>
void zero_all(P& p) {
  for_each_param_rfamoe(p, "", [](const std::string&, Tensor& t) {
    for (auto& v : t.data()) v = 0.0;
  });
}

Tensor eye_kernel(std::size_t n) {
  Tensor w({n, n, 1});
  for (std::size_t i = 0; i < n; ++i) w.at(i, i, 0) = 1.0;
  return w;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST(StepEmbedding, ZeroStepHasUnitCosines) {
  const Tensor e = step_embedding(0, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(e[2 * i], 0.0);
    EXPECT_EQ(e[2 * i + 1], 1.0);
  }
}

TEST(StepEmbedding, ClosedFormAtStepOne) {
  const Tensor e = step_embedding(1, 4);
  EXPECT_DOUBLE_EQ(e[0], std::sin(1.0));
  EXPECT_DOUBLE_EQ(e[1], std::cos(1.0));
  EXPECT_NEAR(e[2], std::sin(1e-2), 1e-16);
  EXPECT_NEAR(e[3], std::cos(1e-2), 1e-16);
}

TEST(StepEmbedding, DistinctOverSchedule) {
  for (int a = 1; a <= 40; ++a)
    for (int b = a + 1; b <= 40; ++b) EXPECT_GT(max_abs_diff(step_embedding(a, 64), step_embedding(b, 64)), 1e-6);
}

TEST(StepEmbedding, RejectsOddSize) { EXPECT_THROW(step_embedding(3, 5), std::invalid_argument); }

TEST(RouteTop1, PicksArgmaxWithUnitGate) {
  LinearParams router{Tensor({3, 2}), Tensor::from({0.1, 2.0, -1.0})};
  const auto r = route_top1(Tensor({2, 2, 4}, 1.0), router);
  EXPECT_EQ(r.index, (std::vector<std::size_t>{1, 1}));
  EXPECT_EQ(r.gate, (std::vector<double>{1.0, 1.0}));
}

TEST(RouteTop1, ExactTieGoesToLowestIndex) {
  LinearParams router{Tensor({3, 2}), Tensor::from({0.5, 2.0, 2.0})};
  EXPECT_EQ(route_top1(Tensor({1, 2, 4}, 0.3), router).index[0], 1u);
  LinearParams zero{Tensor({4, 2}), Tensor({4})};
  Rng rng(1);
  const auto r = route_top1(rng.normal_tensor({5, 2, 6}), zero);
  for (auto i : r.index) EXPECT_EQ(i, 0u);
}

TEST(RouteTop1, RawProbabilityGateIsSoftmaxOfWinner) {
  LinearParams router{Tensor({2, 1}), Tensor::from({0.0, std::log(3.0)})};
  const auto r = route_top1(Tensor({1, 1, 3}), router, GateMode::raw_probability);
  EXPECT_EQ(r.index[0], 1u);
  EXPECT_NEAR(r.gate[0], 0.75, 1e-15);
}

TEST(RouteTop1, InvariantToLogitShift) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    LinearParams router{rng.normal_tensor({5, 3}), rng.normal_tensor({5})};
    const Tensor x = rng.normal_tensor({4, 3, 7});
    LinearParams shifted = router;
    const double c = 10.0 * rng.normal();
    for (auto& v : shifted.bias.data()) v += c;
    EXPECT_EQ(route_top1(x, router).index, route_top1(x, shifted).index);
  }
}

TEST(RFAMoE, ZeroBodyIsResidualProjection) {
  Rng rng(3);
  const std::size_t ks[] = {3, 5};
  auto p = init_rfamoe(2, 4, ks, 3, rng);
  ASSERT_TRUE(p.residual.has_value());
  const ConvParams residual = *p.residual;
  zero_all(p);
  p.residual = residual;
  const Tensor x = rng.normal_tensor({6, 2, 10});
  const Tensor y = rfamoe_forward(x, p, {2, 3});
  EXPECT_LT(max_abs_diff(y, ops::conv1d(x, residual.weight, residual.bias)), 1e-15);

  auto same = init_rfamoe(4, 4, ks, 3, rng);
  zero_all(same);
  const Tensor x4 = rng.normal_tensor({6, 4, 10});
  EXPECT_EQ(rfamoe_forward(x4, same, {2, 3}), x4);
}

TEST(RFAMoE, SingleChannelFusionActsOnItsOwnFeatures) {
  Rng rng(4);
  const std::size_t ks[] = {3, 5, 7};
  const auto p = init_rfamoe(4, 4, ks, 1, rng);
  const Tensor x = rng.normal_tensor({1, 4, 12});
  // Manual composition with value-level kernels.
  const auto route = route_top1(x, p.router);
  const auto& ex = p.experts[route.index[0]];
  Tensor h = ops::conv1d(x, ex.weight, ex.bias);
  h = ops::instance_norm(h, p.norm_gamma, p.norm_beta);
  Tensor gated({1, 2, 12});
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t t = 0; t < 12; ++t) gated.at(0, l, t) = gelu_ref(h.at(0, l, t)) * h.at(0, l + 2, t);
  const Tensor body = ops::conv1d(gated, p.gate_proj.weight, p.gate_proj.bias);
  const Tensor expected = ops::conv1d(body, p.fuse.weight, p.fuse.bias) + x;
  EXPECT_LT(max_abs_diff(rfamoe_forward(x, p, {1, 1}), expected), 1e-12);
}

TEST(RFAMoE, HandTracedSingleExpert) {
  // E=1, kernel 1, identity expert, gamma=1, beta=0, L=2, T=3.
  RFAMoEParams p;
  p.experts = {{eye_kernel(2), Tensor({2})}};
  p.router = {Tensor({1, 2}), Tensor({1})};
  p.norm_gamma = Tensor({2}, 1.0);
  p.norm_beta = Tensor({2});
  p.gate_proj = {Tensor({2, 1, 1}, {1.0, 2.0}), Tensor::from({0.0, 0.5})};
  p.fuse = {eye_kernel(2), Tensor({2})};
  const Tensor x({1, 2, 3}, {1, 2, 3, 0, 1, -1});

  // Both channels have variance 2/3 after centering.
  const double s = 1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
  // normalized: ch0 = [-s, 0, s], ch1 = [0, s, -s]
  // gated = gelu(ch0) * ch1 = [0, 0, -s * gelu(s)]
  const double m2 = -s * gelu_ref(s);
  const Tensor expected({1, 2, 3}, {1.0 + 0.0, 2.0 + 0.0, 3.0 + m2,
                                    0.0 + 0.5, 1.0 + 0.5, -1.0 + 0.5 + 2.0 * m2});
  EXPECT_LT(max_abs_diff(rfamoe_forward(x, p, {1, 1}), expected), 1e-12);
}

TEST(RFAMoE, RejectsBadDims) {
  Rng rng(5);
  const std::size_t ks[] = {3};
  const auto p = init_rfamoe(4, 4, ks, 3, rng);
  EXPECT_THROW(rfamoe_forward(Tensor({5, 4, 8}), p, {2, 3}), ShapeError);
  EXPECT_THROW(init_rfamoe(4, 5, ks, 3, rng), std::invalid_argument);
  const std::size_t even[] = {3, 4};
  EXPECT_THROW(init_rfamoe(4, 4, even, 3, rng), std::invalid_argument);
  const std::size_t dup[] = {3, 3};
  EXPECT_THROW(init_rfamoe(4, 4, dup, 3, rng), std::invalid_argument);
}

TEST(Bridge, FilmExamples) {
  BridgeParams id{{Tensor({4, 6}), Tensor::from({1, 1, 0, 0})}};
  Rng rng(6);
  const Tensor h = rng.normal_tensor({3, 2, 5});
  EXPECT_EQ(bridge_forward(h, 7, id), h);

  BridgeParams constant{{Tensor({4, 6}), Tensor::from({0, 0, 1.5, -2})}};
  const Tensor c = bridge_forward(h, 7, constant);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t t = 0; t < 5; ++t) {
      EXPECT_EQ(c.at(n, 0, t), 1.5);
      EXPECT_EQ(c.at(n, 1, t), -2.0);
    }

  BridgeParams one{{Tensor({2, 2}), Tensor::from({2, -1})}};
  EXPECT_EQ(bridge_forward(Tensor({1, 1, 1}, {3.0}), 1, one).item(), 5.0);
}

TEST(Bridge, AffineInFeatures) {
  Rng rng(7);
  const auto p = init_bridge(8, 3, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor h1 = rng.normal_tensor({2, 3, 4}), h2 = rng.normal_tensor({2, 3, 4});
    const double a = rng.normal(), b = rng.normal();
    const int step = 1 + static_cast<int>(rng.uniform_index(0, 39));
    const Tensor beta_term = bridge_forward(Tensor({2, 3, 4}), step, p);
    const Tensor lhs = bridge_forward(a * h1 + b * h2, step, p);
    const Tensor rhs = a * bridge_forward(h1, step, p) + b * bridge_forward(h2, step, p) +
                       (1.0 - a - b) * beta_term;
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12);
  }
}

TEST(FusionMoE, OneHotGateSelectsExpert) {
  Rng rng(8);
  const auto p = init_fusion_moe(4, 3, rng);
  const Tensor x = rng.normal_tensor({2, 4, 9});
  for (std::size_t k = 0; k < 3; ++k) {
    Tensor gates({2, 3});
    gates.at(0, k) = gates.at(1, k) = 1.0;
    const Tensor expected = ops::conv1d(x, p.experts[k].weight, p.experts[k].bias);
    EXPECT_LT(max_abs_diff(fusion_moe_forward(x, p, &gates), expected), 1e-12);
  }
}

TEST(FusionMoE, SingleExpertIgnoresRouter) {
  Rng rng(9);
  auto p = init_fusion_moe(4, 1, rng);
  p.experts[0].bias[0] = 0.7;
  p.router.weight = rng.normal_tensor({1, 4});
  const Tensor x = rng.normal_tensor({3, 4, 6});
  EXPECT_LT(max_abs_diff(fusion_moe_forward(x, p),
                         ops::conv1d(x, p.experts[0].weight, p.experts[0].bias)),
            1e-12);
}

TEST(FusionMoE, UniformGatesAverageExpertOutputs) {
  Rng rng(10);
  auto p = init_fusion_moe(4, 2, rng);
  p.router.weight = Tensor({2, 4});  // equal logits -> uniform softmax
  p.experts[0].bias[0] = 0.3;
  p.experts[1].bias[0] = -1.1;
  const Tensor x = rng.normal_tensor({3, 4, 6});
  const Tensor y0 = ops::conv1d(x, p.experts[0].weight, p.experts[0].bias);
  const Tensor y1 = ops::conv1d(x, p.experts[1].weight, p.experts[1].bias);
  EXPECT_LT(max_abs_diff(fusion_moe_forward(x, p), 0.5 * (y0 + y1)), 1e-12);
}

TEST(FusionMoE, FusionByWeightsEqualsFusionByOutputs) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.uniform_index(0, 5);
    auto p = init_fusion_moe(6, k, rng);
    for (auto& e : p.experts) e.bias = rng.normal_tensor({1});
    const Tensor x = rng.normal_tensor({3, 6, 11});
    const Tensor gates = ops::softmax(3.0 * rng.normal_tensor({3, k}));
    Tensor by_outputs({3, 1, 11});
    for (std::size_t j = 0; j < k; ++j) {
      const Tensor yj = ops::conv1d(x, p.experts[j].weight, p.experts[j].bias);
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t t = 0; t < 11; ++t) by_outputs.at(n, 0, t) += gates.at(n, j) * yj.at(n, 0, t);
    }
    EXPECT_LT(max_abs_diff(fusion_moe_forward(x, p, &gates), by_outputs), 1e-10);
  }
}

TEST(MoeGradients, EveryRFAMoEParameter) {
  Rng rng(12);
  const std::size_t ks[] = {3, 5, 1};
  auto p = init_rfamoe(2, 4, ks, 2, rng);
  p.norm_beta = rng.normal_tensor({4});
  const Tensor x = rng.normal_tensor({4, 2, 8});
  const Tensor target = rng.normal_tensor({4, 4, 8});
  for (GateMode mode : {GateMode::renormalized, GateMode::raw_probability}) {
    auto loss = [&](ad::ParamScope& s, const RFAMoEParams& params) {
      return ad::mse(layers::rfamoe_forward(s, s.constant(x), params, {2, 2}, mode),
                     s.constant(target));
    };
    auto walk = [](const RFAMoEParams& params, auto&& fn) { for_each_param_rfamoe(params, "", fn); };
    for (const auto& e : test_support::param_gradient_errors(p, walk, loss)) {
      EXPECT_LE(e.error, 1e-4) << e.name << " mode " << to_string(mode);
    }
  }
}

TEST(MoeGradients, BridgeAndFusionParameters) {
  Rng rng(13);
  const auto bridge = init_bridge(6, 3, rng);
  const Tensor h = rng.normal_tensor({4, 3, 5});
  const Tensor target = rng.normal_tensor({4, 3, 5});
  const int steps[] = {3, 17};
  auto bridge_loss = [&](ad::ParamScope& s, const BridgeParams& p) {
    return ad::mse(layers::bridge_forward(s, s.constant(h), steps, p), s.constant(target));
  };
  auto bridge_walk = [](const BridgeParams& p, auto&& fn) { for_each_param_bridge(p, "", fn); };
  for (const auto& e : test_support::param_gradient_errors(bridge, bridge_walk, bridge_loss)) {
    EXPECT_LE(e.error, 1e-4) << e.name;
  }

  auto head = init_fusion_moe(3, 4, rng);
  const Tensor y_target = rng.normal_tensor({4, 1, 5});
  auto head_loss = [&](ad::ParamScope& s, const FusionMoEParams& p) {
    return ad::mse(layers::fusion_moe_forward(s, s.constant(h), p, nullptr), s.constant(y_target));
  };
  auto head_walk = [](const FusionMoEParams& p, auto&& fn) { for_each_param_fusion(p, "", fn); };
  for (const auto& e : test_support::param_gradient_errors(head, head_walk, head_loss)) {
    EXPECT_LE(e.error, 1e-4) << e.name;
  }
}

TEST(MoeGradients, BlockInputs) {
  Rng rng(14);
  const std::size_t ks[] = {3, 5};
  const auto p = init_rfamoe(4, 4, ks, 2, rng);
  const auto head = init_fusion_moe(4, 3, rng);
  const Tensor target = rng.normal_tensor({2, 1, 8});
  for (int trial = 0; trial < 100; ++trial) {
    auto f = [&](ad::Graph& g, ad::Var x) {
      ad::ParamScope s(g, false);
      auto h = layers::rfamoe_forward(s, x, p, {1, 2}, GateMode::renormalized);
      return ad::mse(layers::fusion_moe_forward(s, h, head, nullptr), s.constant(target));
    };
    EXPECT_LE(finite_diff_check(f, rng.normal_tensor({2, 4, 8})), 1e-4) << trial;
  }
}
