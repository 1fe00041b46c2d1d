#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "rvit/rng.hpp"
#include "rvit/serialize.hpp"
#include "rvit/synthdata.hpp"
#include "rvit/tokenizers.hpp"

using namespace rvit;
using namespace rvit::tok;

namespace {

template <typename S>
Tensor<S> random_image(int H, int W, int C, uint64_t salt) {
  Rng rng(515, "tok-test", salt);
  Tensor<S> img({H, W, C});
  for (size_t i = 0; i < img.numel(); ++i) img.at(i) = static_cast<S>(rng.uniform());
  return img;
}

std::vector<Tensor<float>> shape_images(uint64_t seed, int count) {
  const auto vocab = synth::Vocabulary::build_default();
  std::vector<Tensor<float>> images;
  images.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    images.push_back(synth::generate_sample(seed, static_cast<uint64_t>(i), vocab).image);
  }
  return images;
}

template <typename S>
double frob_norm(const Tensor<S>& a, const Tensor<S>& b) {
  double s = 0;
  for (size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.at(i)) - static_cast<double>(b.at(i));
    s += d * d;
  }
  return std::sqrt(s);
}

// Largest singular value of w [in x out] by power iteration on w^T w.
template <typename S>
double operator_norm(const Tensor<S>& w) {
  const int in = w.dim(0), out = w.dim(1);
  std::vector<double> v(static_cast<size_t>(out), 1.0 / std::sqrt(double(out)));
  double sigma = 0;
  for (int iter = 0; iter < 200; ++iter) {
    std::vector<double> u(static_cast<size_t>(in), 0.0);
    for (int i = 0; i < in; ++i)
      for (int j = 0; j < out; ++j) u[size_t(i)] += double(w.at2(i, j)) * v[size_t(j)];
    std::vector<double> vn(static_cast<size_t>(out), 0.0);
    for (int i = 0; i < in; ++i)
      for (int j = 0; j < out; ++j) vn[size_t(j)] += double(w.at2(i, j)) * u[size_t(i)];
    double nrm = 0;
    for (double x : vn) nrm += x * x;
    nrm = std::sqrt(nrm);
    for (double& x : vn) x /= nrm;
    v = vn;
    double un = 0;
    for (double x : u) un += x * x;
    sigma = std::sqrt(un);  // ||w v|| with v unit after previous iteration
  }
  return sigma;
}

}  // namespace

TEST_CASE("patchify 2x2 rgb at patch size 1 follows row-major token order") {
  Tensor<double> img({2, 2, 3});
  // Pixel (r, c) gets channels (10r + c, 10r + c + 100, 10r + c + 200).
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c)
      for (int ch = 0; ch < 3; ++ch) img.at(size_t((r * 2 + c) * 3 + ch)) = 10 * r + c + 100 * ch;
  const auto t = patchify(img, 1);
  REQUIRE(t.rows() == 4);
  REQUIRE(t.cols() == 3);
  const double expect[4] = {0, 1, 10, 11};  // token order (0,0),(0,1),(1,0),(1,1)
  for (int tok = 0; tok < 4; ++tok)
    for (int ch = 0; ch < 3; ++ch) CHECK(t.at2(tok, ch) == expect[tok] + 100 * ch);
}

TEST_CASE("patchify pinned pixel and full index-arithmetic oracle") {
  // 4x4 image, every channel replicated, pixel (2,3) = 0.7, patch size 2.
  Tensor<double> img = Tensor<double>::zeros({4, 4, 3});
  for (int ch = 0; ch < 3; ++ch) img.at(size_t((2 * 4 + 3) * 3 + ch)) = 0.7;
  const auto t = patchify(img, 2);
  REQUIRE(t.rows() == 4);
  REQUIRE(t.cols() == 2 * 2 * 3);
  // Token index (2/2)*2 + (3/2) = 3; in-patch offset (0, 1) -> flat (0*2+1)*3.
  for (int tok = 0; tok < 4; ++tok) {
    for (int pos = 0; pos < 12; ++pos) {
      const double want = (tok == 3 && pos >= 3 && pos < 6) ? 0.7 : 0.0;
      CHECK(t.at2(tok, pos) == want);
    }
  }

  // Independent oracle on a random 4x6 image with P = 2.
  const auto img2 = random_image<double>(4, 6, 3, 1);
  const auto t2 = patchify(img2, 2);
  const int gw = 6 / 2;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 6; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const int tok = (r / 2) * gw + (c / 2);
        const int pos = ((r % 2) * 2 + (c % 2)) * 3 + ch;
        CHECK(t2.at2(tok, pos) == img2.at(size_t((r * 6 + c) * 3 + ch)));
      }
}

TEST_CASE("patchify/unpatchify are exact inverses over random geometries") {
  uint64_t salt = 100;
  for (int H : {2, 4, 8}) {
    for (int W : {2, 4, 6}) {
      for (int C : {1, 3}) {
        for (int P : {1, 2}) {
          if (H % P || W % P) continue;
          const auto img = random_image<double>(H, W, C, salt++);
          const auto back = unpatchify(patchify(img, P), P, H, W);
          REQUIRE(back.same_shape(img));
          for (size_t i = 0; i < img.numel(); ++i) CHECK(back.at(i) == img.at(i));
        }
      }
    }
  }
  // And the float instantiation on one case.
  const auto imf = random_image<float>(8, 8, 3, 999);
  const auto backf = unpatchify(patchify(imf, 4), 4, 8, 8);
  for (size_t i = 0; i < imf.numel(); ++i) CHECK(backf.at(i) == imf.at(i));
}

TEST_CASE("patchify and unpatchify reject inconsistent geometry") {
  CHECK_THROWS_AS(patchify(random_image<double>(5, 5, 3, 1), 2), std::invalid_argument);
  CHECK_THROWS_AS(patchify(Tensor<double>::zeros({4, 4}), 2), std::invalid_argument);
  CHECK_THROWS_AS(patchify(random_image<double>(4, 4, 3, 1), 0), std::invalid_argument);
  // Token count does not tile the target image.
  CHECK_THROWS_AS(unpatchify(Tensor<double>::zeros({3, 12}), 2, 4, 4), std::invalid_argument);
  // Width not a multiple of P*P.
  CHECK_THROWS_AS(unpatchify(Tensor<double>::zeros({4, 10}), 2, 4, 4), std::invalid_argument);
  CHECK_THROWS_AS(unpatchify(Tensor<double>::zeros({4, 4, 3}), 2, 4, 4), std::invalid_argument);
}

TEST_CASE("patchify tokenizer round trips exactly and reports geometry") {
  auto t = make_patchify_tokenizer<float>(4);
  CHECK(t.kind() == TokenizerKind::patchify);
  CHECK(t.d_lat() == 48);
  CHECK(t.has_decoder());
  CHECK(t.n_tokens(32) == 64);

  const auto img = random_image<float>(32, 32, 3, 7);
  auto lat = t.encode(img);
  CHECK(lat.source == TokenizerKind::patchify);
  CHECK_FALSE(lat.standardized);
  REQUIRE(lat.z.rows() == 64);
  REQUIRE(lat.z.cols() == 48);
  const auto back = t.decode(lat.z, 32, 32);
  for (size_t i = 0; i < img.numel(); ++i) CHECK(back.at(i) == img.at(i));
}

TEST_CASE("frozen feature tokenizer is deterministic and linear") {
  auto a = make_frozen_feature_tokenizer<double>(42, 16, 4);
  auto b = make_frozen_feature_tokenizer<double>(42, 16, 4);
  const auto& wa = a.params().get("w");
  const auto& wb = b.params().get("w");
  REQUIRE(wa.same_shape(wb));
  for (size_t i = 0; i < wa.numel(); ++i) CHECK(wa.at(i) == wb.at(i));
  CHECK(a.d_lat() == 16);
  CHECK_FALSE(a.has_decoder());

  const auto zero = Tensor<double>::zeros({8, 8, 3});
  const auto z = a.encode(zero).z;
  REQUIRE(z.rows() == 4);
  REQUIRE(z.cols() == 16);
  for (size_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == 0.0);

  CHECK_THROWS_AS(a.decode(z, 8, 8), std::logic_error);

  auto c = make_frozen_feature_tokenizer<double>(43, 16, 4);
  bool differs = false;
  const auto& wc = c.params().get("w");
  for (size_t i = 0; i < wa.numel(); ++i) differs |= (wa.at(i) != wc.at(i));
  CHECK(differs);
}

TEST_CASE("frozen feature encode obeys the operator-norm Lipschitz bound") {
  auto t = make_frozen_feature_tokenizer<double>(5, 16, 4);
  const double sigma = operator_norm(t.params().get("w"));
  CHECK(sigma > 0.0);
  for (uint64_t salt = 0; salt < 10; ++salt) {
    const auto i1 = random_image<double>(8, 8, 3, 2000 + salt);
    const auto i2 = random_image<double>(8, 8, 3, 3000 + salt);
    const double lhs = frob_norm(t.encode(i1).z, t.encode(i2).z);
    const double rhs = sigma * frob_norm(patchify(i1, 4), patchify(i2, 4));
    CHECK(lhs <= rhs * (1.0 + 1e-6) + 1e-12);
  }
}

TEST_CASE("latent autoencoder learns a constant-color dataset in one epoch") {
  // A single constant color; the decoder only has to learn a constant map.
  Tensor<float> img({8, 8, 3});
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      img.at(size_t((r * 8 + c) * 3 + 0)) = 0.30f;
      img.at(size_t((r * 8 + c) * 3 + 1)) = 0.60f;
      img.at(size_t((r * 8 + c) * 3 + 2)) = 0.45f;
    }
  std::vector<Tensor<float>> images(600, img);

  AeConfig cfg;
  cfg.d_lat = 8;
  cfg.hidden = 32;
  cfg.epochs = 1;
  cfg.batch = 8;
  cfg.lr = 2e-2;
  cfg.mse_threshold = 1e-5;
  cfg.seed = 5;
  auto t = train_latent_autoencoder(images, cfg);
  CHECK(t.trained_holdout_mse() < 1e-5);
  CHECK(t.kind() == TokenizerKind::latent_ae);
}

TEST_CASE("latent autoencoder reaches the held-out bound on shape images") {
  const auto images = shape_images(33, 300);
  AeConfig cfg;  // defaults: d_lat 8, downsample 4, hidden 96, epochs 20, 5e-3
  auto t = train_latent_autoencoder(images, cfg);
  const double holdout = t.trained_holdout_mse();
  MESSAGE("latent_ae held-out MSE: ", holdout);
  CHECK(holdout < 5e-3);
  CHECK(t.d_lat() == 8);

  // Encode geometry: 32x32 with downsample 4 -> 64 tokens of width 8.
  auto lat = t.encode(images[0]);
  REQUIRE(lat.z.rows() == 64);
  REQUIRE(lat.z.cols() == 8);
  CHECK(lat.source == TokenizerKind::latent_ae);

  // Training-image reconstruction stays within 2x the held-out bound and
  // decode output is always inside [0, 1].
  double train_mse = 0;
  const int probe = 20;
  for (int i = 0; i < probe; ++i) {
    const auto recon = t.decode(t.encode(images[size_t(i)]).z, 32, 32);
    double s = 0;
    for (size_t k = 0; k < recon.numel(); ++k) {
      CHECK(recon.at(k) >= 0.0f);
      CHECK(recon.at(k) <= 1.0f);
      const double d = double(recon.at(k)) - double(images[size_t(i)].at(k));
      s += d * d;
    }
    train_mse += s / double(recon.numel());
  }
  train_mse /= probe;
  MESSAGE("latent_ae training-image MSE: ", train_mse);
  CHECK(train_mse <= 2.0 * holdout);
}

TEST_CASE("latent autoencoder failure to converge is loud and carries the MSE") {
  const auto images = shape_images(34, 30);
  AeConfig cfg;
  cfg.hidden = 16;
  cfg.epochs = 1;
  cfg.mse_threshold = 1e-9;  // unreachable
  bool threw = false;
  try {
    train_latent_autoencoder(images, cfg);
  } catch (const std::runtime_error& e) {
    threw = true;
    const std::string msg = e.what();
    CHECK(msg.find("held-out MSE") != std::string::npos);
    CHECK(msg.find("1 epochs") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("latent autoencoder rejects bad configs and empty data") {
  AeConfig cfg;
  CHECK_THROWS_AS(train_latent_autoencoder<float>({}, cfg), std::invalid_argument);
  const auto images = shape_images(35, 4);
  AeConfig bad = cfg;
  bad.holdout_fraction = 1.5;
  CHECK_THROWS_AS(train_latent_autoencoder(images, bad), std::invalid_argument);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(train_latent_autoencoder(images, bad), std::invalid_argument);
}

TEST_CASE("decode_patches_var matches decode and is differentiable in the latents") {
  // threshold 1.0 passes before any update, leaving an untrained but fully
  // structured autoencoder; only the function shape matters here.
  const auto images = shape_images(36, 20);
  AeConfig cfg;
  cfg.hidden = 24;
  cfg.epochs = 1;
  cfg.mse_threshold = 1.0;
  auto tf = train_latent_autoencoder(images, cfg);
  auto td = tf.template cast<double>();

  // Value consistency: decode == clamp(unpatchify(decode_patches_var)).
  const auto lat = td.encode(images[3].cast<double>()).z;
  const auto via_decode = td.decode(lat, 32, 32);
  ag::NoGradGuard ng;
  auto patches = td.decode_patches_var(ag::leaf(lat))->value;
  for (size_t i = 0; i < patches.numel(); ++i) {
    patches.at(i) = std::min(1.0, std::max(0.0, patches.at(i)));
  }
  const auto via_var = unpatchify(patches, 4, 32, 32);
  for (size_t i = 0; i < via_decode.numel(); ++i) CHECK(via_decode.at(i) == via_var.at(i));
}

TEST_CASE("fd: decoder gradient flows into latents") {
  const auto images = shape_images(37, 20);
  AeConfig cfg;
  cfg.hidden = 12;
  cfg.d_lat = 4;
  cfg.epochs = 1;
  cfg.mse_threshold = 1.0;
  auto td = train_latent_autoencoder(images, cfg).template cast<double>();

  Rng rng(77, "tok-fd");
  Tensor<double> z({3, 4});
  for (size_t i = 0; i < z.numel(); ++i) z.at(i) = rng.normal();
  Tensor<double> target({3, 48});
  for (size_t i = 0; i < target.numel(); ++i) target.at(i) = rng.uniform();

  std::vector<Tensor<double>> inputs{z};
  const double err = rvit_test::fd_max_rel_err(inputs, [&](std::vector<ag::Var<double>>& in) {
    return ag::mse_vs_const(td.decode_patches_var(in[0]), target);
  });
  CHECK(err < 1e-5);
}

TEST_CASE("vq tokenizer emits codebook rows and trains on shape images") {
  const auto images = shape_images(38, 200);
  AeConfig cfg;
  cfg.vq = true;
  cfg.codebook = 64;
  cfg.epochs = 30;
  cfg.mse_threshold = 2e-2;
  auto t = train_latent_autoencoder(images, cfg);
  MESSAGE("vq held-out MSE: ", t.trained_holdout_mse());
  CHECK(t.kind() == TokenizerKind::vq);
  CHECK(t.trained_holdout_mse() < 2e-2);

  const auto& cb = t.params().get("codebook");
  const auto z = t.encode(images[0]).z;
  REQUIRE(z.cols() == cb.cols());
  for (int r = 0; r < z.rows(); ++r) {
    bool found = false;
    for (int k = 0; k < cb.rows() && !found; ++k) {
      bool equal = true;
      for (int c = 0; c < z.cols(); ++c) {
        if (z.at2(r, c) != cb.at2(k, c)) {
          equal = false;
          break;
        }
      }
      found = equal;
    }
    CHECK(found);
  }
}

TEST_CASE("tokenizer save/load round trips bitwise") {
  const auto images = shape_images(39, 20);
  AeConfig cfg;
  cfg.hidden = 24;
  cfg.epochs = 1;
  cfg.mse_threshold = 1.0;
  auto t = train_latent_autoencoder(images, cfg);
  const std::string path = "/tmp/rvit_test_tok.ckpt";
  t.save(path);
  auto u = Tokenizer<float>::load(path);
  CHECK(u.kind() == t.kind());
  CHECK(u.patch_size() == t.patch_size());
  CHECK(u.d_lat() == t.d_lat());
  CHECK(u.hidden() == t.hidden());
  CHECK(u.trained_holdout_mse() == t.trained_holdout_mse());
  REQUIRE(u.params().names() == t.params().names());
  for (const auto& name : t.params().names()) {
    const auto& a = t.params().get(name);
    const auto& b = u.params().get(name);
    REQUIRE(a.same_shape(b));
    for (size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
  }
  const auto img = images[0];
  const auto za = t.encode(img).z;
  const auto zb = u.encode(img).z;
  for (size_t i = 0; i < za.numel(); ++i) CHECK(za.at(i) == zb.at(i));
  std::remove(path.c_str());

  // Frozen tokenizer round trip as well.
  auto f = make_frozen_feature_tokenizer<float>(9, 16, 4);
  f.save(path);
  auto g = Tokenizer<float>::load(path);
  CHECK(g.kind() == TokenizerKind::frozen_feature);
  const auto& wf = f.params().get("w");
  const auto& wg = g.params().get("w");
  for (size_t i = 0; i < wf.numel(); ++i) CHECK(wf.at(i) == wg.at(i));
  std::remove(path.c_str());
}

TEST_CASE("tokenizer load rejects foreign or corrupt checkpoints") {
  const std::string path = "/tmp/rvit_test_tok_bad.ckpt";
  {
    CheckpointWriter w;
    w.meta()["format"] = "something-else";
    w.save(path);
  }
  CHECK_THROWS_AS(Tokenizer<float>::load(path), std::runtime_error);
  {
    CheckpointWriter w;
    w.meta()["format"] = "rvit-tokenizer";
    w.meta()["version"] = 1;
    w.meta()["kind"] = "banana";
    w.meta()["patch"] = 4;
    w.meta()["d_lat"] = 8;
    w.meta()["hidden"] = 16;
    w.meta()["holdout_mse"] = 0.0;
    w.save(path);
  }
  CHECK_THROWS_AS(Tokenizer<float>::load(path), std::invalid_argument);
  std::remove(path.c_str());
}

TEST_CASE("standardizer zeroes means and unit-scales channels on the fit set") {
  std::vector<Tensor<double>> latents;
  Rng rng(81, "std-test");
  for (int k = 0; k < 5; ++k) {
    Tensor<double> z({7, 6});
    for (size_t i = 0; i < z.numel(); ++i) z.at(i) = 3.0 * rng.normal() + 2.0;
    // Channel 5 is degenerate (constant) to exercise the variance floor.
    for (int r = 0; r < 7; ++r) z.at2(r, 5) = 4.25;
    latents.push_back(z);
  }
  const auto st = Standardizer<double>::fit(latents);

  double sum[6] = {0}, sumsq[6] = {0};
  size_t n = 0;
  for (const auto& z : latents) {
    const auto s = st.standardize(z);
    for (int r = 0; r < s.rows(); ++r)
      for (int c = 0; c < 6; ++c) {
        sum[c] += s.at2(r, c);
        sumsq[c] += s.at2(r, c) * s.at2(r, c);
      }
    n += size_t(s.rows());
  }
  for (int c = 0; c < 5; ++c) {
    const double mean = sum[c] / double(n);
    const double var = sumsq[c] / double(n) - mean * mean;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
  }
  // Degenerate channel maps to exactly zero and stays invertible.
  CHECK(st.stddev().at2(0, 5) == 1.0);
  CHECK(st.standardize(latents[0]).at2(0, 5) == 0.0);

  for (const auto& z : latents) {
    const auto round = st.destandardize(st.standardize(z));
    for (size_t i = 0; i < z.numel(); ++i) CHECK(std::abs(round.at(i) - z.at(i)) < 1e-10);
  }

  CHECK_THROWS_AS(st.standardize(Tensor<double>::zeros({3, 4})), std::invalid_argument);
  CHECK_THROWS_AS(Standardizer<double>::fit({}), std::invalid_argument);
}

TEST_CASE("standardizer save/load round trips bitwise") {
  std::vector<Tensor<float>> latents;
  Rng rng(82, "std-io");
  Tensor<float> z({16, 8});
  for (size_t i = 0; i < z.numel(); ++i) z.at(i) = float(rng.normal());
  latents.push_back(z);
  const auto st = Standardizer<float>::fit(latents);

  const std::string path = "/tmp/rvit_test_std.ckpt";
  {
    CheckpointWriter w;
    st.save(w, "std");
    w.save(path);
  }
  const Checkpoint ck = Checkpoint::load(path);
  const auto lu = Standardizer<float>::load(ck, "std");
  for (int c = 0; c < 8; ++c) {
    CHECK(lu.mean().at2(0, c) == st.mean().at2(0, c));
    CHECK(lu.stddev().at2(0, c) == st.stddev().at2(0, c));
  }
  std::remove(path.c_str());
}
