#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "../support/oracles.hpp"
#include "../support/tensor_util.hpp"
#include "seqmask/errors.hpp"
#include "seqmask/losses.hpp"

using namespace seqmask;
using testutil::f64;
using testutil::rel_err;

namespace {

double val(const torch::Tensor& t) { return t.item<double>(); }

torch::Tensor random_mask(torch::Generator& gen, int64_t h, int64_t w) {
  return torch::rand({h, w}, gen, f64()) * 0.9 + 0.05;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("nt_xent: orthogonal pair example") {
  auto z = torch::tensor({{1.0, 0.0}, {0.0, 1.0}}, f64());
  const double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  CHECK(val(losses::nt_xent_masked(z, z, 1.0)) == doctest::Approx(want).epsilon(1e-12));
  CHECK(want == doctest::Approx(0.5514).epsilon(1e-4));
}

TEST_CASE("nt_xent: B=4 d=8 normal draws against oracle") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(11);
  auto za = torch::randn({4, 8}, gen, f64());
  auto zb = torch::randn({4, 8}, gen, f64());
  const double want = oracle::nt_xent(testutil::to_matrix(za), testutil::to_matrix(zb), 0.2);
  CHECK(rel_err(val(losses::nt_xent_masked(za, zb, 0.2)), want) <= 1e-6);
}

TEST_CASE("nt_xent: rescaling and permutation invariance") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(12);
  auto za = torch::randn({5, 6}, gen, f64());
  auto zb = torch::randn({5, 6}, gen, f64());
  const double base = val(losses::nt_xent_masked(za, zb, 0.2));
  auto scale = torch::rand({5, 1}, gen, f64()) * 10 + 0.1;
  CHECK(val(losses::nt_xent_masked(za * scale, zb, 0.2)) == doctest::Approx(base).epsilon(1e-12));
  auto perm = torch::tensor({3, 0, 4, 1, 2}, torch::kLong);
  CHECK(val(losses::nt_xent_masked(za.index_select(0, perm), zb.index_select(0, perm), 0.2)) ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("nt_xent: contract and numeric errors") {
  auto one = torch::ones({1, 3}, f64());
  CHECK_THROWS_AS(losses::nt_xent_masked(one, one, 0.2), ContractViolation);
  auto z = torch::randn({3, 3}, f64());
  CHECK_THROWS_AS(losses::nt_xent_masked(z, z, 0.0), ContractViolation);
  CHECK_THROWS_AS(losses::nt_xent_masked(z, torch::randn({3, 4}, f64()), 0.2), ContractViolation);
  auto bad = z.clone();
  bad[1][1] = std::nan("");
  CHECK_THROWS_AS(losses::nt_xent_masked(bad, z, 0.2), NumericError);
  auto zero = z.clone();
  zero[2].zero_();
  CHECK_THROWS_AS(losses::nt_xent_masked(z, zero, 0.2), NumericError);
}

TEST_CASE("budget penalty examples") {
  CHECK(val(losses::budget_penalty(torch::zeros({4, 4}), 0.25)) == doctest::Approx(0.0625));
  auto quarter = torch::zeros({4, 4});
  quarter.index_put_({0}, 1.0);
  CHECK(val(losses::budget_penalty(quarter, 0.25)) == 0.0);
  auto half = torch::zeros({4, 4});
  half.slice(0, 0, 2).fill_(1.0);
  CHECK(val(losses::budget_penalty(half, 0.25)) == doctest::Approx(0.0625));
  CHECK_THROWS_AS(losses::budget_penalty(half, 0.0), ContractViolation);
  CHECK_THROWS_AS(losses::budget_penalty(half, 1.0), ContractViolation);
  CHECK_THROWS_AS(losses::budget_penalty(half * 2.0, 0.25), ContractViolation);
}

TEST_CASE("overlap penalty examples") {
  auto m = torch::zeros({4, 4});
  m.slice(0, 0, 2).slice(1, 0, 2).fill_(1.0);
  CHECK(val(losses::overlap_penalty(m, {})) == 0.0);
  std::vector<torch::Tensor> self{m};
  CHECK(val(losses::overlap_penalty(m, self)) == doctest::Approx(0.25));
  std::vector<torch::Tensor> disjoint{1.0 - m};
  CHECK(val(losses::overlap_penalty(m, disjoint)) == 0.0);
  std::vector<torch::Tensor> wrong{torch::zeros({4, 5})};
  CHECK_THROWS_AS(losses::overlap_penalty(m, wrong), ContractViolation);
}

TEST_CASE("consistency penalty examples") {
  CHECK(val(losses::consistency_penalty(torch::full({5, 5}, 0.37, f64()))) == doctest::Approx(0.0));
  CHECK(val(losses::consistency_penalty(torch::zeros({5, 5}))) == 0.0);
  auto spike = torch::zeros({7, 7}, f64());
  spike[3][3] = 1.0;
  CHECK(val(losses::consistency_penalty(spike)) == doctest::Approx(8.0 / 9.0).epsilon(1e-12));
  CHECK(val(losses::consistency_penalty(torch::ones({1, 1}))) == 0.0);
}

TEST_CASE("consistency penalty is translation-equivariant in the interior") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  auto patch = torch::rand({3, 3}, gen, f64());
  auto a = torch::zeros({12, 12}, f64());
  auto b = torch::zeros({12, 12}, f64());
  a.slice(0, 2, 5).slice(1, 2, 5).copy_(patch);
  b.slice(0, 6, 9).slice(1, 5, 8).copy_(patch);
  CHECK(val(losses::consistency_penalty(a)) ==
        doctest::Approx(val(losses::consistency_penalty(b))).epsilon(1e-12));
}

TEST_CASE("batched masks average the per-image value") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  auto m = torch::rand({3, 6, 6}, gen, f64());
  auto p = torch::rand({3, 6, 6}, gen, f64());
  double b = 0, o = 0, c = 0;
  std::vector<torch::Tensor> prior{p};
  for (int64_t i = 0; i < 3; ++i) {
    b += oracle::budget(testutil::to_grid(m[i]), 0.3) / 3;
    o += oracle::overlap(testutil::to_grid(m[i]), {testutil::to_grid(p[i])}) / 3;
    c += oracle::consistency(testutil::to_grid(m[i])) / 3;
  }
  CHECK(rel_err(val(losses::budget_penalty(m, 0.3)), b) <= 1e-12);
  CHECK(rel_err(val(losses::overlap_penalty(m, prior)), o) <= 1e-12);
  CHECK(rel_err(val(losses::consistency_penalty(m)), c) <= 1e-12);
}

TEST_CASE("encoder objective is the mean") {
  std::vector<double> one{0.5};
  std::vector<double> three{1.0, 2.0, 3.0};
  CHECK(losses::encoder_objective(one) == 0.5);
  CHECK(losses::encoder_objective(three) == 2.0);
  CHECK_THROWS_AS(losses::encoder_objective(std::span<const double>{}), ContractViolation);
}

TEST_CASE("adversary objective composition") {
  losses::PenaltyWeights w;
  w.budget_weight = w.overlap_weight = w.consistency_weight = 1.0;
  std::vector<losses::PenaltyTerms> t{{0.8, 0.0625, 0.0, 0.0}};
  auto r = losses::adversary_objective(t, w);
  CHECK(r.adversary_objective == doctest::Approx(0.7375).epsilon(1e-12));
  CHECK(r.encoder_objective == 0.8);

  std::vector<losses::PenaltyTerms> free{{1.0, 0, 0, 0}, {2.0, 0, 0, 0}};
  auto f = losses::adversary_objective(free, w);
  CHECK(f.adversary_objective == f.encoder_objective);
  CHECK_THROWS_AS(losses::adversary_objective(std::span<const losses::PenaltyTerms>{}, w),
                  ContractViolation);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<losses::PenaltyTerms> terms(3);
    for (auto& x : terms) x = {u(rng), u(rng), u(rng), u(rng)};
    w = {u(rng) + 0.01, u(rng) + 0.01, u(rng) + 0.01, 0.25, 0.2};
    const double base = losses::adversary_objective(terms, w).adversary_objective;
    auto up = terms;
    up[1].overlap += 0.1;
    CHECK(losses::adversary_objective(up, w).adversary_objective < base);
    up = terms;
    up[2].budget += 0.1;
    CHECK(losses::adversary_objective(up, w).adversary_objective < base);
    up = terms;
    up[0].consistency += 0.1;
    CHECK(losses::adversary_objective(up, w).adversary_objective < base);
  }
}

TEST_CASE("tensor adversary objective matches the scalar form") {
  losses::PenaltyWeights w{1.0, 0.5, 0.25, 0.25, 0.2};
  std::vector<torch::Tensor> c{torch::tensor(1.5, f64()), torch::tensor(2.0, f64())};
  std::vector<torch::Tensor> b{torch::tensor(0.1, f64()), torch::tensor(0.2, f64())};
  std::vector<torch::Tensor> o{torch::tensor(0.0, f64()), torch::tensor(0.3, f64())};
  std::vector<torch::Tensor> s{torch::tensor(0.4, f64()), torch::tensor(0.5, f64())};
  std::vector<losses::PenaltyTerms> t{{1.5, 0.1, 0.0, 0.4}, {2.0, 0.2, 0.3, 0.5}};
  CHECK(val(losses::adversary_objective(c, b, o, s, w)) ==
        doctest::Approx(losses::adversary_objective(t, w).adversary_objective).epsilon(1e-12));
}

TEST_CASE("penalty weights validation") {
  losses::PenaltyWeights w;
  CHECK_NOTHROW(w.validate());
  w.budget_b = 1.0;
  CHECK_THROWS_AS(w.validate(), ContractViolation);
  w = {};
  w.overlap_weight = -1;
  CHECK_THROWS_AS(w.validate(), ContractViolation);
  w = {};
  w.temperature_tau = 0;
  CHECK_THROWS_AS(w.validate(), ContractViolation);
}

TEST_CASE("kernel gradients match central differences of the oracle") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(21);
  const double h = 1e-3;
  for (int trial = 0; trial < 5; ++trial) {
    auto za = torch::randn({4, 5}, gen, f64()).requires_grad_(true);
    auto zb = torch::randn({4, 5}, gen, f64()).requires_grad_(true);
    losses::nt_xent_masked(za, zb, 0.2).backward();
    auto fd_a = testutil::central_diff(za, [&](const torch::Tensor& x) {
      return oracle::nt_xent(testutil::to_matrix(x), testutil::to_matrix(zb.detach()), 0.2);
    }, h);
    auto fd_b = testutil::central_diff(zb, [&](const torch::Tensor& x) {
      return oracle::nt_xent(testutil::to_matrix(za.detach()), testutil::to_matrix(x), 0.2);
    }, h);
    CHECK(rel_err(za.grad(), fd_a) <= 1e-4);
    CHECK(rel_err(zb.grad(), fd_b) <= 1e-4);

    auto m = random_mask(gen, 8, 8).requires_grad_(true);
    auto p = random_mask(gen, 8, 8);
    losses::budget_penalty(m, 0.25).backward();
    auto fd = testutil::central_diff(m, [](const torch::Tensor& x) {
      return oracle::budget(testutil::to_grid(x), 0.25);
    }, h);
    CHECK(rel_err(m.grad(), fd) <= 1e-4);

    m.mutable_grad().reset();
    std::vector<torch::Tensor> prior{p.requires_grad_(true)};
    losses::overlap_penalty(m, prior).backward();
    fd = testutil::central_diff(m, [&](const torch::Tensor& x) {
      return oracle::overlap(testutil::to_grid(x), {testutil::to_grid(p.detach())});
    }, h);
    auto fd_p = testutil::central_diff(p.detach(), [&](const torch::Tensor& x) {
      return oracle::overlap(testutil::to_grid(m.detach()), {testutil::to_grid(x)});
    }, h);
    CHECK(rel_err(m.grad(), fd) <= 1e-4);
    CHECK(rel_err(p.grad(), fd_p) <= 1e-4);

    m.mutable_grad().reset();
    losses::consistency_penalty(m).backward();
    fd = testutil::central_diff(m, [](const torch::Tensor& x) {
      return oracle::consistency(testutil::to_grid(x));
    }, h);
    CHECK(rel_err(m.grad(), fd) <= 1e-4);
  }
}

}  // TEST_SUITE
