#include <doctest.h>

#include "../support/tensor_util.hpp"
#include "seqmask/errors.hpp"
#include "seqmask/losses.hpp"
#include "seqmask/models.hpp"

using namespace seqmask;
using models::Backbone;

namespace {

models::EncoderConfig small_encoder(int64_t size = 32) {
  models::EncoderConfig c;
  c.input_size = size;
  c.width = 4;
  c.projection_dim = 8;
  return c;
}

models::MaskerConfig small_masker(int64_t n, int64_t size = 32) {
  models::MaskerConfig c;
  c.n_masks = n;
  c.base_channels = 4;
  c.depth = 3;
  c.input_size = size;
  return c;
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("config validation") {
  auto e = small_encoder();
  CHECK_NOTHROW(e.validate());
  e.projection_dim = 1;
  CHECK_THROWS_AS(e.validate(), ContractViolation);
  e = small_encoder(20);
  CHECK_THROWS_AS(e.validate(), ContractViolation);
  auto m = small_masker(1);
  m.depth = 1;
  CHECK_THROWS_AS(m.validate(), ContractViolation);
  m = small_masker(0);
  CHECK_THROWS_AS(m.validate(), ContractViolation);
  CHECK(models::backbone_from_string("resnet18_style") == Backbone::resnet18_style);
  CHECK_THROWS_AS(models::backbone_from_string("vit"), ContractViolation);
}

TEST_CASE("encode: identical rows, determinism, sensitivity") {
  auto enc = models::make_encoder(small_encoder(64), 1);
  auto zeros = torch::zeros({2, 3, 64, 64});
  auto z = models::encode(enc, zeros);
  CHECK(z.sizes() == torch::IntArrayRef{2, 8});
  CHECK(torch::isfinite(z).all().item<bool>());
  CHECK(torch::equal(z[0], z[1]));

  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  auto x = torch::rand({3, 3, 64, 64}, gen);
  CHECK(torch::equal(models::encode(enc, x), models::encode(enc, x)));
  auto y = x.clone();
  y[0][1][10][20] += 0.5;
  auto zx = models::encode(enc, x), zy = models::encode(enc, y);
  CHECK_FALSE(torch::equal(zx[0], zy[0]));
  CHECK(torch::equal(zx[1], zy[1]));
  CHECK(enc.net->is_training());
}

TEST_CASE("encode: shape errors and non-finite reporting") {
  auto enc = models::make_encoder(small_encoder(32), 1);
  CHECK_THROWS_AS(models::encode(enc, torch::zeros({2, 3, 64, 64})), ContractViolation);
  CHECK_THROWS_AS(models::encode(enc, torch::zeros({2, 1, 32, 32})), ContractViolation);
  auto x = torch::zeros({2, 3, 32, 32});
  x[0][0][0][0] = std::numeric_limits<float>::infinity();
  try {
    models::encode(enc, x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("backbone.stage0_down") != std::string::npos);
  }
}

TEST_CASE("resnet18_style backbone runs") {
  auto cfg = small_encoder(32);
  cfg.backbone = Backbone::resnet18_style;
  auto enc = models::make_encoder(cfg, 3);
  auto z = models::encode(enc, torch::rand({2, 3, 32, 32}));
  CHECK(z.sizes() == torch::IntArrayRef{2, 8});
  CHECK(enc.net->feature_dim() == 32);
}

TEST_CASE("generate_mask: range, determinism, live conditioning") {
  auto msk = models::make_masker(small_masker(3), 4);
  auto x = torch::rand({2, 3, 32, 32});
  torch::NoGradGuard guard;
  auto m0 = models::generate_mask(msk, x, {}, 0);
  CHECK(m0.sizes() == torch::IntArrayRef{2, 32, 32});
  CHECK(m0.gt(0).all().item<bool>());
  CHECK(m0.lt(1).all().item<bool>());
  CHECK(torch::equal(m0, models::generate_mask(msk, x, {}, 0)));

  auto empty_prior = models::generate_mask(msk, x, {torch::zeros({2, 32, 32})}, 1);
  auto full_prior = models::generate_mask(msk, x, {torch::ones({2, 32, 32})}, 1);
  CHECK_FALSE(torch::equal(empty_prior, full_prior));

  CHECK_THROWS_AS(models::generate_mask(msk, x, {}, 1), ContractViolation);
  CHECK_THROWS_AS(models::generate_mask(msk, x, {}, 3), ContractViolation);
  CHECK_THROWS_AS(models::generate_mask(msk, x, {torch::zeros({2, 16, 16})}, 1), ContractViolation);
}

TEST_CASE("generate_mask_sequence: length, base case, conditioning, batch equivariance") {
  auto one = models::make_masker(small_masker(1), 5);
  auto x = torch::rand({4, 3, 32, 32});
  torch::NoGradGuard guard;
  auto seq1 = models::generate_mask_sequence(one, x);
  REQUIRE(seq1.size() == 1);
  CHECK(torch::equal(seq1[0], models::generate_mask(one, x, {}, 0)));

  auto four = models::make_masker(small_masker(4), 6);
  auto seq = models::generate_mask_sequence(four, x);
  REQUIRE(seq.size() == 4);
  for (std::size_t k = 1; k < seq.size(); ++k) {
    // Ablate the conditioning channel: same slot with an all-zero prior.
    std::vector<torch::Tensor> ablated(k, torch::zeros_like(seq[0]));
    CHECK_FALSE(torch::equal(seq[k], models::generate_mask(four, x, ablated, k)));
  }

  auto perm = torch::tensor({2, 0, 3, 1}, torch::kLong);
  auto permuted = models::generate_mask_sequence(four, x.index_select(0, perm));
  for (std::size_t k = 0; k < seq.size(); ++k) {
    CHECK(torch::allclose(permuted[k], seq[k].index_select(0, perm), 1e-5, 1e-6));
  }
}

TEST_CASE("apply_mask examples") {
  auto x = torch::rand({2, 3, 4, 4});
  CHECK(torch::equal(models::apply_mask(x, torch::zeros({2, 4, 4})), x));
  CHECK(models::apply_mask(x, torch::ones({2, 4, 4})).eq(0).all().item<bool>());
  auto c = models::apply_mask(torch::full({1, 3, 4, 4}, 0.8), torch::full({1, 4, 4}, 0.25));
  CHECK(torch::allclose(c, torch::full({1, 3, 4, 4}, 0.6)));
  auto m = torch::rand({2, 4, 4});
  CHECK(torch::allclose(models::apply_mask(3.0 * x, m), 3.0 * models::apply_mask(x, m)));
  CHECK_THROWS_AS(models::apply_mask(x, torch::zeros({2, 5, 4})), ContractViolation);
}

TEST_CASE("clone and named tensors") {
  auto enc = models::make_encoder(small_encoder(), 7);
  auto copy = models::clone(enc);
  auto a = models::named_tensors(*enc.net);
  auto b = models::named_tensors(*copy.net);
  REQUIRE(a.size() == b.size());
  for (auto& [name, t] : a) {
    CHECK(torch::equal(t, b.at(name)));
    CHECK(t.data_ptr() != b.at(name).data_ptr());
  }
  CHECK(a.count("head.weight") == 1);
  CHECK(a.count("backbone.stage0_down.norm.running_mean") == 1);

  auto again = models::make_encoder(small_encoder(), 7);
  for (auto& [name, t] : models::named_tensors(*again.net)) CHECK(torch::equal(t, a.at(name)));
}

TEST_CASE("end-to-end masker gradient on the micro configuration") {
  models::EncoderConfig ec;
  ec.input_size = 8;
  ec.width = 4;
  ec.projection_dim = 4;
  models::MaskerConfig mc;
  mc.n_masks = 2;
  mc.base_channels = 4;
  mc.depth = 2;
  mc.input_size = 8;
  auto enc = models::make_encoder(ec, 11);
  auto msk = models::make_masker(mc, 12);
  enc.net->to(torch::kFloat64);
  msk.net->to(torch::kFloat64);
  // Batch statistics: fresh running stats collapse the 1x1 features to a constant.
  enc.net->train();
  for (auto& p : enc.net->parameters()) p.requires_grad_(false);

  auto gen = at::make_generator<at::CPUGeneratorImpl>(13);
  auto view_a = torch::rand({4, 3, 8, 8}, gen, testutil::f64());
  auto view_b = torch::rand({4, 3, 8, 8}, gen, testutil::f64());
  auto za = enc.net->forward(view_a);

  auto loss = [&]() {
    auto masks = models::generate_mask_sequence(msk, view_b);
    std::vector<torch::Tensor> per_mask;
    for (const auto& m : masks) {
      per_mask.push_back(losses::nt_xent_masked(za, enc.net->forward(models::apply_mask(view_b, m)), 0.2));
    }
    return losses::encoder_objective(per_mask);
  };

  msk.net->zero_grad();
  loss().backward();
  std::vector<torch::Tensor> analytic, numeric;
  for (auto& p : msk.net->parameters()) {
    analytic.push_back(p.grad().clone().flatten());
    torch::NoGradGuard guard;
    auto original = p.detach().clone();
    numeric.push_back(testutil::central_diff(p, [&](const torch::Tensor& v) {
      p.copy_(v);
      return loss().item<double>();
    }, 1e-6).flatten());
    p.copy_(original);
  }
  auto a = torch::cat(analytic), n = torch::cat(numeric);
  CHECK(a.norm().item<double>() > 0.0);
  CHECK(testutil::rel_err(a, n) <= 1e-3);
}

}  // TEST_SUITE
