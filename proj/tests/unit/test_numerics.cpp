#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "varsr/error.hpp"
#include "varsr/numerics/optim.hpp"

using namespace varsr;
using varsr::testing::max_grad_error;
using varsr::testing::random64;
using varsr::testing::weighted_sum;

namespace {
constexpr double kGradTol = 1e-3;
}

TEST_CASE("matmul: identity and hand arithmetic") {
  auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto a = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  auto r = ops::matmul(eye, a);
  CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{1, 2, 3, 4, 5, 6});

  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto ones = Tensor::from({2, 1}, {1, 1});
  auto p = ops::matmul(m, ones);
  CHECK(p.shape() == Shape{2, 1});
  CHECK(p.data()[0] == 3.0f);
  CHECK(p.data()[1] == 7.0f);

  CHECK_THROWS_AS(ops::matmul(m, Tensor::zeros({3, 1})), ShapeError);
}

TEST_CASE("matmul: gradient matches central differences (5x4 * 4x3)") {
  Rng rng(1);
  auto a = random64({5, 4}, rng);
  auto b = random64({4, 3}, rng);
  const double err = max_grad_error([](const auto& in) { return ops::sum(ops::matmul(in[0], in[1])); }, {a, b});
  CHECK(err < 1e-4);
}

TEST_CASE("conv2d: identity kernel, box sum, output size") {
  auto x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto w = Tensor::from({1, 1, 1, 1}, {1});
  auto y = ops::conv2d(x, w, nullptr, 1, 0);
  CHECK(std::vector<float>(y.data().begin(), y.data().end()) == std::vector<float>{1, 2, 3, 4});

  auto ones = Tensor::full({1, 1, 4, 4}, 1.0f);
  auto k = Tensor::full({1, 1, 3, 3}, 1.0f);
  auto s = ops::conv2d(ones, k, nullptr, 1, 0);
  CHECK(s.shape() == Shape{1, 1, 2, 2});
  for (float v : s.data()) CHECK(v == 9.0f);

  // floor((H + 2p - k) / stride) + 1
  auto big = Tensor::zeros({2, 3, 7, 9});
  auto wk = Tensor::zeros({4, 3, 3, 3});
  auto o = ops::conv2d(big, wk, nullptr, 2, 1);
  CHECK(o.shape() == Shape{2, 4, 4, 5});

  CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), nullptr, 1, 0), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), nullptr, 1, 0), ShapeError);
}

TEST_CASE("conv2d: gradient check, strided and padded") {
  Rng rng(2);
  for (int stride : {1, 2}) {
    auto x = random64({2, 2, 5, 5}, rng);
    auto w = random64({3, 2, 3, 3}, rng);
    auto b = random64({3}, rng);
    const double err = max_grad_error(
        [stride](const auto& in) { return weighted_sum(ops::conv2d(in[0], in[1], &in[2], stride, 1)); }, {x, w, b});
    CHECK(err < kGradTol);
  }
  auto x = random64({1, 3, 4, 4}, rng);
  auto w = random64({2, 3, 1, 1}, rng);
  CHECK(max_grad_error([](const std::vector<Tensor64>& in) { return weighted_sum(ops::conv2d(in[0], in[1], nullptr, 1, 0)); },
                       {x, w}) < kGradTol);
}

TEST_CASE("softmax, cross entropy, layer norm") {
  auto c = Tensor::full({2, 5}, 3.0f);
  auto s = ops::softmax(c);
  for (float v : s.data()) CHECK(v == doctest::Approx(0.2f));

  Rng rng(3);
  auto r = Tensor::zeros({16, 64});
  for (auto& v : r.data()) v = static_cast<float>(5.0 * rng.normal());
  auto p = ops::softmax(r);
  for (int i = 0; i < 16; ++i) {
    double total = 0;
    for (int j = 0; j < 64; ++j) {
      CHECK(p.data()[i * 64 + j] >= 0.0f);
      total += p.data()[i * 64 + j];
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }

  // -log softmax([10,0,0])[0] = log(1 + 2 e^-10)
  auto logits = Tensor64::from({1, 3}, {10, 0, 0});
  const int target[] = {0};
  const double ce = ops::cross_entropy(logits, target).item();
  CHECK(ce == doctest::Approx(std::log1p(2 * std::exp(-10.0))).epsilon(1e-9));
  CHECK(ce == doctest::Approx(9.0797e-5).epsilon(1e-3));

  auto far = Tensor64::from({1, 3}, {200, 0, 0});
  CHECK(ops::cross_entropy(far, target).item() < 1e-80);

  const int bad[] = {3};
  CHECK_THROWS_AS(ops::cross_entropy(logits, bad), IndexError);

  auto x = random64({4, 8}, rng, false, 3.0);
  auto y = ops::layer_norm<double>(x, nullptr, nullptr, 0.0);
  for (int i = 0; i < 4; ++i) {
    double mu = 0, var = 0;
    for (int j = 0; j < 8; ++j) mu += y.data()[i * 8 + j];
    mu /= 8;
    for (int j = 0; j < 8; ++j) var += (y.data()[i * 8 + j] - mu) * (y.data()[i * 8 + j] - mu);
    var /= 8;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("gradient checks for every differentiable op") {
  Rng rng(4);
  using In = std::vector<Tensor64>;
  auto check = [](const char* name, auto f, In in) {
    const double err = max_grad_error(f, std::move(in));
    INFO(name << " rel err " << err);
    CHECK(err < kGradTol);
  };

  check("add broadcast", [](const In& in) { return weighted_sum(ops::add(in[0], in[1])); },
        {random64({3, 1, 4}, rng), random64({2, 4}, rng)});
  check("sub broadcast", [](const In& in) { return weighted_sum(ops::sub(in[0], in[1])); },
        {random64({2, 3}, rng), random64({3}, rng)});
  check("mul broadcast", [](const In& in) { return weighted_sum(ops::mul(in[0], in[1])); },
        {random64({2, 3, 4}, rng), random64({2, 1, 4}, rng)});
  check("add_scalar", [](const In& in) { return weighted_sum(ops::add_scalar(in[0], 1.5)); }, {random64({5}, rng)});
  check("mul_scalar", [](const In& in) { return weighted_sum(ops::mul_scalar(in[0], -0.7)); }, {random64({5}, rng)});
  check("silu", [](const In& in) { return weighted_sum(ops::silu(in[0])); }, {random64({3, 4}, rng)});
  check("gelu", [](const In& in) { return weighted_sum(ops::gelu(in[0])); }, {random64({3, 4}, rng)});
  check("reshape", [](const In& in) { return weighted_sum(ops::reshape(in[0], {4, 3})); }, {random64({3, 4}, rng)});
  check("permute", [](const In& in) { return weighted_sum(ops::permute(in[0], {2, 0, 1})); },
        {random64({2, 3, 4}, rng)});
  check("slice", [](const In& in) { return weighted_sum(ops::slice(in[0], 1, 1, 2)); }, {random64({2, 4, 3}, rng)});
  check("concat", [](const In& in) { return weighted_sum(ops::concat<double>({in[0], in[1]}, 1)); },
        {random64({2, 2, 3}, rng), random64({2, 1, 3}, rng)});
  check("sum", [](const In& in) { return ops::sum(in[0]); }, {random64({7}, rng)});
  check("mean", [](const In& in) { return ops::mean(in[0]); }, {random64({7}, rng)});
  check("mean_axis", [](const In& in) { return weighted_sum(ops::mean_axis(in[0], 1, false)); },
        {random64({2, 5, 3}, rng)});
  check("mse_loss", [](const In& in) { return ops::mse_loss(in[0], in[1]); },
        {random64({3, 3}, rng), random64({3, 3}, rng)});
  check("linear", [](const In& in) { return weighted_sum(ops::linear(in[0], in[1], &in[2])); },
        {random64({2, 3, 4}, rng), random64({4, 5}, rng), random64({5}, rng)});
  check("softmax", [](const In& in) { return weighted_sum(ops::softmax(in[0])); }, {random64({3, 6}, rng)});
  check("log_softmax", [](const In& in) { return weighted_sum(ops::log_softmax(in[0])); }, {random64({3, 6}, rng)});
  check("cross_entropy",
        [](const In& in) {
          const int t[] = {1, 0, 5};
          return ops::cross_entropy(in[0], t);
        },
        {random64({3, 6}, rng)});
  check("layer_norm", [](const In& in) { return weighted_sum(ops::layer_norm(in[0], &in[1], &in[2])); },
        {random64({4, 6}, rng), random64({6}, rng), random64({6}, rng)});
  check("upsample_nearest2x", [](const In& in) { return weighted_sum(ops::upsample_nearest2x(in[0])); },
        {random64({1, 2, 3, 3}, rng)});
  check("resize_bilinear", [](const In& in) { return weighted_sum(ops::resize_bilinear(in[0], 5, 4)); },
        {random64({2, 2, 3, 3}, rng)});
  check("index_select",
        [](const In& in) {
          const int idx[] = {2, 0, 2, 1};
          return weighted_sum(ops::index_select(in[0], idx));
        },
        {random64({3, 4}, rng)});

  std::vector<double> cs(3 * 2), sn(3 * 2);
  for (size_t i = 0; i < cs.size(); ++i) {
    cs[i] = std::cos(0.3 * i + 0.1);
    sn[i] = std::sin(0.3 * i + 0.1);
  }
  check("rotate_pairs", [&](const In& in) { return weighted_sum(ops::rotate_pairs<double>(in[0], cs, sn)); },
        {random64({1, 2, 3, 4}, rng)});

  const std::vector<int> limits = {2, 2, 4, 4, 5};
  check("attention",
        [&](const In& in) { return weighted_sum(ops::attention(in[0], in[1], in[2], limits)); },
        {random64({2, 2, 5, 4}, rng), random64({2, 2, 5, 4}, rng), random64({2, 2, 5, 4}, rng)});
}

TEST_CASE("attention honours row limits exactly") {
  Rng rng(5);
  auto q = random64({1, 1, 3, 4}, rng, false);
  auto k = random64({1, 1, 3, 4}, rng, false);
  auto v = random64({1, 1, 3, 4}, rng, false);
  const std::vector<int> limits = {1, 3, 3};
  auto out = ops::attention(q, k, v, limits);
  // Row 0 sees only key 0, so it returns v[0] exactly.
  for (int c = 0; c < 4; ++c) CHECK(out.data()[c] == v.data()[c]);
  auto v2 = v.clone();
  for (int c = 0; c < 4; ++c) v2.data()[8 + c] += 10.0;
  auto out2 = ops::attention(q, k, v2, limits);
  for (int c = 0; c < 4; ++c) CHECK(out2.data()[c] == out.data()[c]);
}

TEST_CASE("AdamW closed-form cases") {
  SUBCASE("zero gradient, no decay leaves params unchanged") {
    auto p = Tensor::from({2}, {0.5f, -1.0f}, true);
    AdamW opt({{"p", p, true}}, {.lr = 0.1});
    p.grad();
    CHECK(opt.step());
    CHECK(p.data()[0] == 0.5f);
    CHECK(p.data()[1] == -1.0f);
  }
  SUBCASE("first step with g=1 moves by -lr") {
    auto p = Tensor::from({1}, {0.0f}, true);
    AdamW opt({{"p", p, true}}, {.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999});
    p.node()->grad_data()[0] = 1.0f;
    CHECK(opt.step());
    CHECK(p.data()[0] == doctest::Approx(-0.1).epsilon(1e-6));
  }
  SUBCASE("decoupled decay shrinks by 1 - lr*wd") {
    auto p = Tensor::from({1}, {2.0f}, true);
    AdamW opt({{"p", p, true}}, {.lr = 0.1, .weight_decay = 5e-2});
    CHECK(opt.step());
    CHECK(p.data()[0] == doctest::Approx(2.0 * (1 - 0.1 * 5e-2)).epsilon(1e-7));
  }
  SUBCASE("non-finite gradient rejects the step") {
    auto p = Tensor::from({2}, {1.0f, 1.0f}, true);
    AdamW opt({{"p", p, true}}, {.lr = 0.1});
    p.node()->grad_data()[1] = std::nanf("");
    CHECK_FALSE(opt.step());
    CHECK(opt.rejected_steps() == 1);
    CHECK(opt.state().step == 0);
    CHECK(p.data()[0] == 1.0f);
  }
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  auto d1 = Rng::stream(7, "data");
  auto d2 = Rng::stream(7, "data");
  auto n1 = Rng::stream(7, "dropout");
  CHECK(d1.next_u64() == d2.next_u64());
  CHECK(d1.next_u64() != n1.next_u64());
  // Golden: splitmix64-seeded xoshiro256** first draw for seed 0.
  Rng g(0);
  const auto first = g.next_u64();
  Rng g2(0);
  CHECK(first == g2.next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(a.below(7) < 7u);
    CHECK(std::abs(a.truncated_normal(0.02)) <= 0.04);
  }
}

TEST_CASE("deterministic ops are bit-identical across runs") {
  auto run = [] {
    Rng rng(11);
    auto x = Tensor::zeros({2, 3, 8, 8}, true);
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    Conv2d<float> conv(3, 4, 3, 2, 1, rng);
    auto y = ops::gelu(conv(x));
    auto loss = ops::mean(ops::softmax(ops::reshape(y, {2, 64})));
    loss.backward();
    std::vector<float> out(y.data().begin(), y.data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("no-grad mode records nothing") {
  auto p = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = ops::mul_scalar(p, 2.0f);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}
