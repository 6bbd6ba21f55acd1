#include <gtest/gtest.h>

#include <cmath>

#include "fd_check.hpp"
#include "helpers.hpp"
#include "tslab/losses.hpp"

using namespace tslab;
using namespace tslab::testing;

namespace {

std::vector<double> softmax_of(const std::vector<double>& z) {
  double mx = *std::max_element(z.begin(), z.end()), total = 0;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) total += p[i] = std::exp(z[i] - mx);
  for (auto& v : p) v /= total;
  return p;
}

Tensor<double> row(const std::vector<double>& v) { return Tensor<double>({1, v.size()}, v); }

AdaVitSignals<double> signals(ad::Tape<double>& t, std::vector<double> blocks, std::vector<double> heads,
                              std::vector<double> patches, bool msa_on) {
  AdaVitSignals<double> s;
  s.block_prob = t.constant(Tensor<double>({blocks.size(), 1}, blocks));
  s.head_prob = t.constant(Tensor<double>({heads.size(), 1}, heads));
  s.patch_prob = t.constant(Tensor<double>({patches.size(), 1}, patches));
  s.msa_on = msa_on;
  return s;
}

}  // namespace

TEST(LossCls, SelfCrossEntropyIsScaledEntropyWithZeroGradient) {
  const std::vector<double> z = {1.0, -0.5, 2.0, 0.3};
  const auto p = softmax_of(z);
  double entropy = 0;
  for (double v : p) entropy -= v * std::log(v);
  ad::Tape<double> t;
  auto adv = t.leaf(row(z), true);
  auto loss = loss_cls(adv, row(z));
  EXPECT_NEAR(loss.item(), entropy / 4.0, 1e-12);
  t.backward(loss);
  for (double g : adv.grad()) EXPECT_NEAR(g, 0.0, 1e-6);
}

TEST(LossCls, GibbsInequality) {
  const std::vector<double> clean = {8.0, 0.0, 0.0}, uniform = {0.0, 0.0, 0.0};
  ad::Tape<double> t;
  const double self = loss_cls(t.constant(row(clean)), row(clean)).item();
  const double moved = loss_cls(t.constant(row(uniform)), row(clean)).item();
  EXPECT_GT(moved, self);
}

TEST(LossCls, MatchesDirectSummation) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(10), c(10);
    for (auto& v : a) v = n(rng);
    for (auto& v : c) v = n(rng);
    const auto pa = softmax_of(a), pc = softmax_of(c);
    double expected = 0;
    for (std::size_t m = 0; m < 10; ++m) expected -= pc[m] * std::log(pa[m]);
    ad::Tape<double> t;
    EXPECT_NEAR(loss_cls(t.constant(row(a)), row(c)).item(), expected / 10.0, 1e-12);
  }
}

TEST(LossCls, SizeMismatchThrows) {
  ad::Tape<double> t;
  EXPECT_THROW(loss_cls(t.constant(row({1, 2})), row({1, 2, 3})), ShapeError);
}

TEST(LossAts, UniformScoresGiveZero) {
  ad::Tape<double> t;
  std::vector<ad::Var<double>> s = {t.constant(row({0.25, 0.25, 0.25, 0.25})), t.constant(row({0.5, 0.5}))};
  // The log carries a 1e-12 stabiliser.
  EXPECT_NEAR(loss_ats(s).item(), 0.0, 1e-10);
}

TEST(LossAts, HandExample) {
  ad::Tape<double> t;
  std::vector<ad::Var<double>> s = {t.constant(row({0.5, 0.25, 0.25}))};
  const double expected = 0.5 * std::log(1.5) + 0.5 * std::log(0.75);
  EXPECT_NEAR(loss_ats(s).item(), expected, 1e-10);
  EXPECT_NEAR(loss_ats(s).item(), 0.0589, 1e-4);
}

TEST(LossAts, NonNegativeOnRandomSimplexes) {
  std::mt19937_64 rng(4);
  std::exponential_distribution<double> e(1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 20;
    std::vector<double> s(n);
    double total = 0;
    for (auto& v : s) total += v = e(rng);
    for (auto& v : s) v /= total;
    ad::Tape<double> t;
    std::vector<ad::Var<double>> sv = {t.constant(row(s))};
    EXPECT_GE(loss_ats(sv).item(), 0.0);
  }
}

TEST(LossAdavit, AllOnesGiveZero) {
  ad::Tape<double> t;
  std::vector<AdaVitSignals<double>> d = {signals(t, {1, 1}, {1, 1, 1}, {1, 1, 1, 1}, true)};
  EXPECT_DOUBLE_EQ(loss_adavit(d).item(), 0.0);
}

TEST(LossAdavit, HeadTermGatedByMsa) {
  ad::Tape<double> t;
  std::vector<AdaVitSignals<double>> off = {signals(t, {1, 1}, {0.1, 0.7}, {1, 1}, false)};
  EXPECT_DOUBLE_EQ(loss_adavit(off).item(), 0.0);
  std::vector<AdaVitSignals<double>> on = {signals(t, {1, 1}, {0.1, 0.7}, {1, 1}, true)};
  EXPECT_NEAR(loss_adavit(on).item(), (0.81 + 0.09) / 2.0, 1e-12);
}

TEST(LossAdavit, HandExample) {
  ad::Tape<double> t;
  std::vector<AdaVitSignals<double>> d = {signals(t, {0.5, 0.5}, {1, 1, 1, 1}, {1, 1, 1}, true)};
  EXPECT_NEAR(loss_adavit(d).item(), 0.25, 1e-12);
}

TEST(LossAdavit, AveragesOverBlocks) {
  ad::Tape<double> t;
  std::vector<AdaVitSignals<double>> d = {signals(t, {0.5, 0.5}, {1}, {1}, true),
                                          signals(t, {1, 1}, {1}, {0.0}, true)};
  EXPECT_NEAR(loss_adavit(d).item(), (0.25 + 1.0) / 2.0, 1e-12);
}

TEST(LossAvit, ZeroScoresGiveZero) {
  ad::Tape<double> t;
  std::vector<ad::Var<double>> cum = {t.constant(Tensor<double>({3, 1}, 0.0)), t.constant(Tensor<double>({3, 1}, 0.0))};
  std::vector<Tensor<double>> gates = {Tensor<double>({3, 1}, 1.0), Tensor<double>({3, 1}, 1.0)};
  EXPECT_DOUBLE_EQ(loss_avit(cum, gates).item(), 0.0);
}

TEST(LossAvit, HandExample) {
  ad::Tape<double> t;
  std::vector<ad::Var<double>> cum = {t.constant(Tensor<double>({1, 1}, 0.2)), t.constant(Tensor<double>({1, 1}, 0.5))};
  std::vector<Tensor<double>> gates = {Tensor<double>({1, 1}, 1.0), Tensor<double>({1, 1}, 1.0)};
  EXPECT_NEAR(loss_avit(cum, gates).item(), 0.145, 1e-12);
}

TEST(LossAvit, GateDropsBlocksAfterHalting) {
  ad::Tape<double> t;
  std::vector<ad::Var<double>> cum = {t.constant(Tensor<double>({1, 1}, 0.6)), t.constant(Tensor<double>({1, 1}, 1.2))};
  std::vector<Tensor<double>> gates = {Tensor<double>({1, 1}, 1.0), Tensor<double>({1, 1}, 0.0)};
  EXPECT_NEAR(loss_avit(cum, gates).item(), 0.36 / 2.0, 1e-12);
}

TEST(LossAvit, LoweringOneScoreLowersTheLoss) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.01, 0.3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t blocks = 4, tokens = 3;
    std::vector<std::vector<double>> h(blocks, std::vector<double>(tokens));
    for (auto& b : h)
      for (auto& v : b) v = u(rng);
    auto loss_of = [&](const std::vector<std::vector<double>>& hs) {
      ad::Tape<double> t;
      std::vector<ad::Var<double>> cum;
      std::vector<Tensor<double>> gates;
      std::vector<double> c(tokens, 0.0);
      for (const auto& b : hs) {
        for (std::size_t j = 0; j < tokens; ++j) c[j] += b[j];
        cum.push_back(t.constant(Tensor<double>({tokens, 1}, c)));
        gates.push_back(Tensor<double>({tokens, 1}, 1.0));
      }
      return loss_avit(cum, gates).item();
    };
    auto lower = h;
    const std::size_t b = rng() % blocks, j = rng() % tokens;
    lower[b][j] *= 0.5;
    EXPECT_LT(loss_of(lower), loss_of(h));
  }
}

TEST(AttackLoss, NoneMechanismThrows) {
  ForwardResult<double> r;
  EXPECT_THROW(attack_loss(r, Mechanism::none), std::invalid_argument);
}

class LossTotalTest : public ::testing::TestWithParam<Mechanism> {};

TEST_P(LossTotalTest, LambdaZeroIsPureAttackLoss) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 50);
  const auto m = tiny_mechanism(GetParam());
  ad::Tape<double> t;
  auto b = bind_weights<double>(t, w, false);
  auto img = t.constant(random_image(c, 51).cast<double>());
  auto clean = model_forward(b, img, m).logits.value();
  auto delta = t.leaf(Tensor<double>({3, 16, 16}, 0.01), true);
  auto lt = loss_total(b, img, delta, m, clean, 0.0);
  EXPECT_EQ(lt.loss.item(), lt.attack.item());
  auto l2 = loss_total(b, img, delta, m, clean, 0.5);
  EXPECT_NEAR(l2.loss.item(), l2.attack.item() + 0.5 * l2.cls.item(), 1e-12);
}

TEST_P(LossTotalTest, GradientsMatchFiniteDifferences) {
  const auto c = tiny_config();
  const auto w = spread_weights(c, 52);
  const auto m = tiny_mechanism(GetParam());
  const auto img = random_image(c, 53).cast<double>();
  Tensor<double> clean;
  {
    ad::Tape<double> t;
    auto b = bind_weights<double>(t, w, false);
    clean = model_forward(b, t.constant(img), m).logits.value();
  }
  std::mt19937_64 rng(54);
  auto delta0 = random_tensor({3, 16, 16}, rng, -0.03, 0.03);
  const auto coords = random_coords(delta0.size(), 20, rng);
  for (int part = 0; part < 3; ++part) {
    auto f = [&](ad::Tape<double>& t, ad::Var<double> d) {
      auto b = bind_weights<double>(t, w, false);
      auto lt = loss_total(b, t.constant(img), d, m, clean, 0.3);
      return part == 0 ? lt.loss : part == 1 ? lt.attack : lt.cls;
    };
    const auto res = fd_compare(f, delta0, coords);
    EXPECT_LT(res.max_rel_err, 1e-4) << mechanism_name(GetParam()) << " part " << part;
  }
}

INSTANTIATE_TEST_SUITE_P(Mechanisms, LossTotalTest,
                         ::testing::Values(Mechanism::ats, Mechanism::adavit, Mechanism::avit),
                         [](const auto& info) { return std::string(mechanism_name(info.param)); });
