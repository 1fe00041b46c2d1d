#include <cmath>
#include <cstdio>
#include <string>
#include <unordered_map>
#include <vector>

#include "doctest.h"
#include "rvit/denoiser.hpp"
#include "rvit/diffusion.hpp"
#include "rvit/rng.hpp"
#include "rvit/schedules.hpp"

using namespace rvit;
using namespace rvit::dn;

namespace {

template <typename S>
Tensor<S> random_mat(int r, int c, uint64_t salt) {
  Rng rng(707, "dn-test", salt);
  Tensor<S> t({r, c});
  for (size_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<S>(rng.normal());
  return t;
}

DenoiserConfig small_config(int d_lat = 8, bool attn = true) {
  DenoiserConfig cfg;
  cfg.n_blocks = 2;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_lat = d_lat;
  cfg.use_self_attention = attn;
  cfg.timestep_embed_dim = 16;
  return cfg;
}

}  // namespace

TEST_CASE("timestep features: t=0 gives zero sines and unit cosines") {
  const auto f = timestep_features<double>(0, 12);
  REQUIRE(f.rows() == 1);
  REQUIRE(f.cols() == 12);
  for (int i = 0; i < 6; ++i) {
    CHECK(f.at2(0, i) == 0.0);
    CHECK(f.at2(0, 6 + i) == 1.0);
  }
}

TEST_CASE("timestep features: distinct t are pairwise distinct, equal t identical") {
  const int dim = 16;
  std::vector<Tensor<double>> feats;
  feats.reserve(1000);
  for (int t = 1; t <= 1000; ++t) feats.push_back(timestep_features<double>(t, dim));
  double min_l2 = 1e300;
  for (int a = 0; a < 1000; ++a) {
    for (int b = a + 1; b < 1000; ++b) {
      double s = 0;
      for (int i = 0; i < dim; ++i) {
        const double d = feats[a].at(i) - feats[b].at(i);
        s += d * d;
      }
      min_l2 = std::min(min_l2, std::sqrt(s));
    }
  }
  CHECK(min_l2 > 0.0);

  const auto x = timestep_features<double>(427, dim);
  const auto y = timestep_features<double>(427, dim);
  for (int i = 0; i < dim; ++i) CHECK(x.at(i) == y.at(i));

  CHECK_THROWS_AS(timestep_features<double>(1, 7), std::invalid_argument);
  CHECK_THROWS_AS(timestep_features<double>(-1, 8), std::invalid_argument);
}

TEST_CASE("denoiser: output shape matches the noisy input over a batch") {
  DenoiserConfig cfg;
  cfg.d_lat = 8;  // defaults otherwise: 2 blocks, d_model 128, 4 heads
  Denoiser<float> dn(cfg, 1);
  for (int b = 0; b < 2; ++b) {
    const auto z = random_mat<float>(64, 8, 10 + uint64_t(b));
    const auto cond = random_mat<float>(64, 128, 20 + uint64_t(b));
    const auto out = dn.forward(z, cond, 3);
    CHECK(out.rows() == 64);
    CHECK(out.cols() == 8);
  }
}

TEST_CASE("denoiser: fixed seed gives bitwise-identical outputs") {
  Denoiser<float> a(small_config(), 5);
  Denoiser<float> b(small_config(), 5);
  const auto z = random_mat<float>(6, 8, 30);
  const auto cond = random_mat<float>(6, 32, 31);
  const auto oa = a.forward(z, cond, 7);
  const auto ob = b.forward(z, cond, 7);
  for (size_t i = 0; i < oa.numel(); ++i) CHECK(oa.at(i) == ob.at(i));
}

TEST_CASE("denoiser: without self-attention a token perturbation stays local") {
  Denoiser<float> dn(small_config(8, /*attn=*/false), 6);
  const int N = 6, j = 2;
  auto z = random_mat<float>(N, 8, 40);
  auto cond = random_mat<float>(N, 32, 41);
  const auto base = dn.forward(z, cond, 4);

  // Perturb both inputs at token j.
  for (int c = 0; c < 8; ++c) z.at2(j, c) += 0.5f;
  for (int c = 0; c < 32; ++c) cond.at2(j, c) -= 0.25f;
  const auto out = dn.forward(z, cond, 4);

  double j_delta = 0;
  for (int r = 0; r < N; ++r) {
    for (int c = 0; c < 8; ++c) {
      if (r == j) {
        j_delta = std::max(j_delta, std::abs(double(out.at2(r, c)) - double(base.at2(r, c))));
      } else {
        CHECK(out.at2(r, c) == base.at2(r, c));  // bitwise unchanged
      }
    }
  }
  CHECK(j_delta > 0.0);
}

TEST_CASE("denoiser: with self-attention a condition perturbation couples tokens") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Denoiser<float> dn(small_config(8, /*attn=*/true), seed);
    const int N = 6, j = 2;
    const auto z = random_mat<float>(N, 8, 50 + seed);
    auto cond = random_mat<float>(N, 32, 60 + seed);
    const auto base = dn.forward(z, cond, 4);
    for (int c = 0; c < 32; ++c) cond.at2(j, c) += 0.5f;
    const auto out = dn.forward(z, cond, 4);
    double off_delta = 0;
    for (int r = 0; r < N; ++r) {
      if (r == j) continue;
      for (int c = 0; c < 8; ++c) {
        off_delta = std::max(off_delta, std::abs(double(out.at2(r, c)) - double(base.at2(r, c))));
      }
    }
    CHECK(off_delta > 0.0);
  }
}

TEST_CASE("denoiser: no-attention variant has strictly fewer parameters") {
  Denoiser<float> with(small_config(8, true), 1);
  Denoiser<float> without(small_config(8, false), 1);
  CHECK(without.param_count() < with.param_count());
  // The gap is exactly the attention + pre-norm parameters per block:
  // 4 d^2 weights + 4 d biases + 2 d layer-norm terms.
  const size_t d = 32;
  const size_t per_block = 4 * d * d + 4 * d + 2 * d;
  CHECK(with.param_count() - without.param_count() == 2 * per_block);
  MESSAGE("params with attention: ", with.param_count(), ", without: ", without.param_count());
}

TEST_CASE("denoiser: input validation") {
  Denoiser<float> dn(small_config(), 2);
  const auto z = random_mat<float>(4, 8, 70);
  const auto cond = random_mat<float>(4, 32, 71);
  CHECK_THROWS_AS(dn.forward(random_mat<float>(4, 5, 72), cond, 1), std::invalid_argument);
  CHECK_THROWS_AS(dn.forward(z, random_mat<float>(4, 16, 73), 1), std::invalid_argument);
  CHECK_THROWS_AS(dn.forward(z, random_mat<float>(3, 32, 74), 1), std::invalid_argument);
  CHECK_THROWS_AS(dn.forward(z, cond, 0), std::out_of_range);

  DenoiserConfig bad = small_config();
  bad.d_lat = 0;
  CHECK_THROWS_AS(Denoiser<float>(bad, 1), std::invalid_argument);
  bad = small_config();
  bad.timestep_embed_dim = 15;
  CHECK_THROWS_AS(Denoiser<float>(bad, 1), std::invalid_argument);
  bad = small_config();
  bad.n_heads = 5;  // 32 not divisible by 5
  CHECK_THROWS_AS(Denoiser<float>(bad, 1), std::invalid_argument);
}

TEST_CASE("fd: denoising objective gradients match finite differences") {
  DenoiserConfig cfg;
  cfg.n_blocks = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_lat = 2;
  cfg.use_self_attention = true;
  cfg.timestep_embed_dim = 8;
  Denoiser<double> dn(cfg, 3);

  const int N = 3;
  const auto z_t = random_mat<double>(N, 2, 80);
  const auto cond0 = random_mat<double>(N, 8, 81);
  const auto target = random_mat<double>(N, 2, 82);
  const int t = 5;

  // loss = mean((eps_hat - target)^2), gradients into params and cond.
  auto loss_at = [&](const Tensor<double>& cond) {
    ag::NoGradGuard ng;
    Binding<double> p(dn.params());
    auto pred = dn.forward_var(p, ag::leaf(z_t), ag::leaf(cond), t);
    return ag::mse_vs_const(pred, target)->value.at(0);
  };

  std::unordered_map<std::string, Tensor<double>> grads;
  Tensor<double> cond_grad;
  {
    Binding<double> p(dn.params());
    auto cv = ag::leaf(cond0);
    auto loss = ag::mse_vs_const(dn.forward_var(p, ag::leaf(z_t), cv, t), target);
    ag::backward(loss);
    p.harvest_grads(grads);
    REQUIRE(cv->grad.defined());
    cond_grad = cv->grad.clone();
  }

  const double h = 1e-5;
  double max_rel = 0;
  std::string worst;
  for (const auto& name : dn.params().names()) {
    Tensor<double>& P = dn.params().get(name);
    REQUIRE(grads.count(name));
    const Tensor<double>& G = grads.at(name);
    for (size_t i = 0; i < P.numel(); ++i) {
      const double orig = P.at(i);
      P.at(i) = orig + h;
      const double lp = loss_at(cond0);
      P.at(i) = orig - h;
      const double lm = loss_at(cond0);
      P.at(i) = orig;
      const double fd = (lp - lm) / (2 * h);
      const double rel =
          std::abs(fd - G.at(i)) / std::max({1e-6, std::abs(fd), std::abs(G.at(i))});
      if (rel > max_rel) {
        max_rel = rel;
        worst = name;
      }
    }
  }
  INFO("worst parameter: ", worst);
  CHECK(max_rel < 1e-4);

  // Gradient into the conditions: the path that trains the upstream model.
  double cond_max_rel = 0;
  Tensor<double> cond = cond0.clone();
  double cond_grad_norm = 0;
  for (size_t i = 0; i < cond.numel(); ++i) {
    const double orig = cond.at(i);
    cond.at(i) = orig + h;
    const double lp = loss_at(cond);
    cond.at(i) = orig - h;
    const double lm = loss_at(cond);
    cond.at(i) = orig;
    const double fd = (lp - lm) / (2 * h);
    const double an = cond_grad.at(i);
    cond_max_rel = std::max(
        cond_max_rel, std::abs(fd - an) / std::max({1e-6, std::abs(fd), std::abs(an)}));
    cond_grad_norm += an * an;
  }
  CHECK(cond_max_rel < 1e-4);
  CHECK(cond_grad_norm > 0.0);
}

TEST_CASE("denoiser: plugs into the diffusion ops end to end") {
  auto cfg = small_config(4);
  Denoiser<float> dn(cfg, 9);
  const auto schedule = make_beta_schedule(ScheduleKind::linear, 10, 1e-4, 0.02);
  const auto z0 = random_mat<float>(5, 4, 90);
  const auto cond = random_mat<float>(5, 32, 91);

  Rng rng(11, "dn-loss");
  Binding<float> p(dn.params());
  auto loss = denoising_loss<float>(dn.predictor(p), z0, ag::leaf(cond), schedule, rng);
  CHECK(loss->value.at(0) >= 0.0f);
  CHECK(std::isfinite(loss->value.at(0)));
  ag::backward(loss);
  std::unordered_map<std::string, Tensor<float>> grads;
  p.harvest_grads(grads);
  CHECK(grads.size() == dn.params().names().size());

  Rng srng(12, "dn-sample");
  const auto sampled = sample_loop<float>(dn.eval_predictor(), cond, schedule, srng, 5, 4);
  CHECK(sampled.rows() == 5);
  CHECK(sampled.cols() == 4);
  for (size_t i = 0; i < sampled.numel(); ++i) CHECK(std::isfinite(sampled.at(i)));
}

TEST_CASE("denoiser: save/load round trips bitwise") {
  Denoiser<float> dn(small_config(6), 13);
  const std::string path = "/tmp/rvit_test_denoiser.ckpt";
  dn.save(path);
  auto u = Denoiser<float>::load(path);
  CHECK(u.config().d_lat == 6);
  REQUIRE(u.params().names() == dn.params().names());
  const auto z = random_mat<float>(4, 6, 95);
  const auto cond = random_mat<float>(4, 32, 96);
  const auto oa = dn.forward(z, cond, 2);
  const auto ob = u.forward(z, cond, 2);
  for (size_t i = 0; i < oa.numel(); ++i) CHECK(oa.at(i) == ob.at(i));
  std::remove(path.c_str());

  // The no-attention variant round trips with its smaller parameter set.
  Denoiser<float> noattn(small_config(6, false), 13);
  noattn.save(path);
  auto v = Denoiser<float>::load(path);
  CHECK(v.param_count() == noattn.param_count());
  CHECK_FALSE(v.config().use_self_attention);
  std::remove(path.c_str());
}
