#include "rvit/tokenizers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rvit/optim.hpp"
#include "rvit/rng.hpp"
#include "rvit/serialize.hpp"

namespace rvit {
namespace tok {

const char* to_string(TokenizerKind k) {
  switch (k) {
    case TokenizerKind::patchify: return "patchify";
    case TokenizerKind::latent_ae: return "latent_ae";
    case TokenizerKind::frozen_feature: return "frozen_feature";
    case TokenizerKind::vq: return "vq";
  }
  throw std::logic_error("bad tokenizer kind");
}

TokenizerKind tokenizer_kind_from_string(const std::string& s) {
  if (s == "patchify") return TokenizerKind::patchify;
  if (s == "latent_ae") return TokenizerKind::latent_ae;
  if (s == "frozen_feature") return TokenizerKind::frozen_feature;
  if (s == "vq") return TokenizerKind::vq;
  throw std::invalid_argument("unknown tokenizer kind: " + s);
}

void to_json(nlohmann::json& j, const AeConfig& c) {
  j = nlohmann::json{{"d_lat", c.d_lat},
                     {"downsample", c.downsample},
                     {"hidden", c.hidden},
                     {"epochs", c.epochs},
                     {"batch", c.batch},
                     {"lr", c.lr},
                     {"mse_threshold", c.mse_threshold},
                     {"holdout_fraction", c.holdout_fraction},
                     {"seed", c.seed},
                     {"vq", c.vq},
                     {"codebook", c.codebook},
                     {"commitment", c.commitment}};
}

void from_json(const nlohmann::json& j, AeConfig& c) {
  c = AeConfig{};
  c.d_lat = j.value("d_lat", c.d_lat);
  c.downsample = j.value("downsample", c.downsample);
  c.hidden = j.value("hidden", c.hidden);
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.mse_threshold = j.value("mse_threshold", c.mse_threshold);
  c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  c.seed = j.value("seed", c.seed);
  c.vq = j.value("vq", c.vq);
  c.codebook = j.value("codebook", c.codebook);
  c.commitment = j.value("commitment", c.commitment);
}

template <typename S>
Tensor<S> patchify(const Tensor<S>& image, int P) {
  if (image.rank() != 3) {
    throw std::invalid_argument("patchify: expected [H x W x C] image, got " + image.shape_str());
  }
  const int H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (P <= 0 || H % P != 0 || W % P != 0) {
    throw std::invalid_argument("patchify: image dims must be divisible by patch size");
  }
  const int gw = W / P;
  const int N = (H / P) * gw;
  Tensor<S> out({N, P * P * C});
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const int t = (r / P) * gw + (c / P);
      const int pos = ((r % P) * P + (c % P)) * C;
      const size_t src = (static_cast<size_t>(r) * W + c) * C;
      for (int ch = 0; ch < C; ++ch) {
        out.at2(t, pos + ch) = image.at(src + ch);
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, int P, int H, int W) {
  if (tokens.rank() != 2) throw std::invalid_argument("unpatchify: expected [N x d] tokens");
  if (P <= 0 || H % P != 0 || W % P != 0 || tokens.cols() % (P * P) != 0) {
    throw std::invalid_argument("unpatchify: inconsistent patch geometry");
  }
  const int C = tokens.cols() / (P * P);
  const int gw = W / P;
  if (static_cast<int64_t>(tokens.rows()) * P * P != static_cast<int64_t>(H) * W) {
    throw std::invalid_argument("unpatchify: token count does not tile H x W");
  }
  Tensor<S> out({H, W, C});
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const int t = (r / P) * gw + (c / P);
      const int pos = ((r % P) * P + (c % P)) * C;
      const size_t dst = (static_cast<size_t>(r) * W + c) * C;
      for (int ch = 0; ch < C; ++ch) {
        out.at(dst + ch) = tokens.at2(t, pos + ch);
      }
    }
  }
  return out;
}

// ---- tokenizer ----

namespace {

// Deterministic nearest-codebook assignment (lowest index wins ties).
template <typename S>
std::vector<int> nearest_codes(const Tensor<S>& z, const Tensor<S>& codebook) {
  std::vector<int> idx(static_cast<size_t>(z.rows()));
  for (int r = 0; r < z.rows(); ++r) {
    S best = S(0);
    int arg = -1;
    for (int k = 0; k < codebook.rows(); ++k) {
      S d = S(0);
      for (int c = 0; c < z.cols(); ++c) {
        const S diff = z.at2(r, c) - codebook.at2(k, c);
        d += diff * diff;
      }
      if (arg < 0 || d < best) {
        best = d;
        arg = k;
      }
    }
    idx[static_cast<size_t>(r)] = arg;
  }
  return idx;
}

}  // namespace

template <typename S>
ag::Var<S> Tokenizer<S>::encode_bound(Binding<S>& p, const ag::Var<S>& patches) {
  switch (kind_) {
    case TokenizerKind::patchify:
      return patches;
    case TokenizerKind::frozen_feature:
      return ag::matmul(patches, ag::leaf(params_.get("w")));
    case TokenizerKind::latent_ae:
    case TokenizerKind::vq: {
      auto h = ag::gelu(ag::linear(patches, p("enc.fc1.w"), p("enc.fc1.b")));
      return ag::linear(h, p("enc.fc2.w"), p("enc.fc2.b"));
    }
  }
  throw std::logic_error("bad tokenizer kind");
}

template <typename S>
ag::Var<S> Tokenizer<S>::decode_bound(Binding<S>& p, const ag::Var<S>& latents) {
  switch (kind_) {
    case TokenizerKind::patchify:
      return latents;
    case TokenizerKind::frozen_feature:
      throw std::logic_error("unsupported operation: frozen_feature tokenizer has no decoder");
    case TokenizerKind::latent_ae:
    case TokenizerKind::vq: {
      // Linear output head: the pixel targets sit exactly at 0 and 1, which a
      // sigmoid only reaches asymptotically; decode() clamps to [0, 1].
      auto h = ag::gelu(ag::linear(latents, p("dec.fc1.w"), p("dec.fc1.b")));
      return ag::linear(h, p("dec.fc2.w"), p("dec.fc2.b"));
    }
  }
  throw std::logic_error("bad tokenizer kind");
}

template <typename S>
ag::Var<S> Tokenizer<S>::encode_patches_var(const ag::Var<S>& patches) {
  Binding<S> p(params_);
  return encode_bound(p, patches);
}

template <typename S>
ag::Var<S> Tokenizer<S>::decode_patches_var(const ag::Var<S>& latents) {
  Binding<S> p(params_);
  return decode_bound(p, latents);
}

template <typename S>
LatentTokens<S> Tokenizer<S>::encode(const Tensor<S>& image) {
  ag::NoGradGuard ng;
  const Tensor<S> patches = patchify(image, patch_);
  Tensor<S> z = encode_patches_var(ag::leaf(patches))->value;
  if (kind_ == TokenizerKind::vq) {
    const Tensor<S>& cb = params_.get("codebook");
    const std::vector<int> idx = nearest_codes(z, cb);
    Tensor<S> q({z.rows(), z.cols()});
    for (int r = 0; r < z.rows(); ++r) {
      for (int c = 0; c < z.cols(); ++c) q.at2(r, c) = cb.at2(idx[static_cast<size_t>(r)], c);
    }
    z = q;
  }
  LatentTokens<S> out;
  out.z = z;
  out.source = kind_;
  out.standardized = false;
  return out;
}

template <typename S>
Tensor<S> Tokenizer<S>::decode(const Tensor<S>& latents, int H, int W) {
  if (!has_decoder()) {
    throw std::logic_error("unsupported operation: frozen_feature tokenizer has no decoder");
  }
  ag::NoGradGuard ng;
  Tensor<S> patches = decode_patches_var(ag::leaf(latents))->value;
  for (size_t i = 0; i < patches.numel(); ++i) {
    patches.at(i) = std::min(S(1), std::max(S(0), patches.at(i)));
  }
  return unpatchify(patches, patch_, H, W);
}

template <typename S>
void Tokenizer<S>::save(const std::string& path) const {
  CheckpointWriter w;
  w.meta()["format"] = "rvit-tokenizer";
  w.meta()["version"] = 1;
  w.meta()["kind"] = to_string(kind_);
  w.meta()["patch"] = patch_;
  w.meta()["d_lat"] = d_lat_;
  w.meta()["hidden"] = hidden_;
  w.meta()["holdout_mse"] = holdout_mse_;
  for (const auto& name : params_.names()) w.put(name, params_.get(name));
  w.save(path);
}

template <typename S>
Tokenizer<S> Tokenizer<S>::load(const std::string& path) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.meta().value("format", "") != "rvit-tokenizer") {
    throw std::runtime_error("not a tokenizer checkpoint: " + path);
  }
  if (ck.meta().at("version").get<int>() != 1) {
    throw std::runtime_error("unsupported tokenizer checkpoint version");
  }
  Tokenizer t;
  t.kind_ = tokenizer_kind_from_string(ck.meta().at("kind").get<std::string>());
  t.patch_ = ck.meta().at("patch").get<int>();
  t.d_lat_ = ck.meta().at("d_lat").get<int>();
  t.hidden_ = ck.meta().at("hidden").get<int>();
  t.holdout_mse_ = ck.meta().at("holdout_mse").get<double>();
  for (const auto& name : ck.names()) {
    Tensor<S> v = ck.template tensor<S>(name);
    t.params_.add(name, v.shape());
    t.params_.get(name) = v;
  }
  if (t.kind_ == TokenizerKind::latent_ae || t.kind_ == TokenizerKind::vq) {
    for (const char* req : {"enc.fc1.w", "enc.fc2.w", "dec.fc1.w", "dec.fc2.w"}) {
      if (!t.params_.has(req)) {
        throw std::runtime_error(std::string("tokenizer checkpoint missing ") + req);
      }
    }
  }
  if (t.kind_ == TokenizerKind::vq && !t.params_.has("codebook")) {
    throw std::runtime_error("vq tokenizer checkpoint missing codebook");
  }
  if (t.kind_ == TokenizerKind::frozen_feature && !t.params_.has("w")) {
    throw std::runtime_error("frozen_feature tokenizer checkpoint missing w");
  }
  return t;
}

template <typename S>
void Tokenizer<S>::save_into(CheckpointWriter& w, const std::string& prefix) const {
  nlohmann::json meta;
  meta["kind"] = to_string(kind_);
  meta["patch"] = patch_;
  meta["d_lat"] = d_lat_;
  meta["hidden"] = hidden_;
  meta["holdout_mse"] = holdout_mse_;
  meta["names"] = params_.names();
  w.meta()[prefix + ".config"] = meta;
  for (const auto& name : params_.names()) w.put(prefix + ".p." + name, params_.get(name));
}

template <typename S>
Tokenizer<S> Tokenizer<S>::load_from(const Checkpoint& ck, const std::string& prefix) {
  if (!ck.meta().contains(prefix + ".config")) {
    throw std::runtime_error("checkpoint has no tokenizer under prefix " + prefix);
  }
  const nlohmann::json& meta = ck.meta().at(prefix + ".config");
  Tokenizer t;
  t.kind_ = tokenizer_kind_from_string(meta.at("kind").get<std::string>());
  t.patch_ = meta.at("patch").get<int>();
  t.d_lat_ = meta.at("d_lat").get<int>();
  t.hidden_ = meta.at("hidden").get<int>();
  t.holdout_mse_ = meta.at("holdout_mse").get<double>();
  for (const auto& name : meta.at("names").get<std::vector<std::string>>()) {
    Tensor<S> v = ck.template tensor<S>(prefix + ".p." + name);
    t.params_.add(name, v.shape());
    t.params_.get(name) = v;
  }
  return t;
}

template <typename S>
Tokenizer<S> make_patchify_tokenizer(int P) {
  if (P <= 0) throw std::invalid_argument("patch size must be positive");
  Tokenizer<S> t;
  t.kind_ = TokenizerKind::patchify;
  t.patch_ = P;
  t.d_lat_ = 3 * P * P;
  return t;
}

template <typename S>
Tokenizer<S> make_frozen_feature_tokenizer(uint64_t seed, int d_lat, int P) {
  if (P <= 0 || d_lat <= 0) throw std::invalid_argument("bad frozen tokenizer geometry");
  Tokenizer<S> t;
  t.kind_ = TokenizerKind::frozen_feature;
  t.patch_ = P;
  t.d_lat_ = d_lat;
  const int in = 3 * P * P;
  t.params_.add("w", {in, d_lat});
  t.params_.init_normal("w", seed, S(1) / std::sqrt(S(in)));
  return t;
}

// ---- latent autoencoder training ----

template <typename S>
Tokenizer<S> train_latent_autoencoder(const std::vector<Tensor<S>>& images, const AeConfig& cfg) {
  if (images.empty()) throw std::invalid_argument("train_latent_autoencoder: no images");
  if (cfg.d_lat <= 0 || cfg.downsample <= 0 || cfg.hidden <= 0 || cfg.epochs < 1 ||
      cfg.batch < 1 || cfg.holdout_fraction <= 0.0 || cfg.holdout_fraction >= 1.0) {
    throw std::invalid_argument("train_latent_autoencoder: bad config");
  }
  const int P = cfg.downsample;
  const int d_patch = 3 * P * P;

  const size_t n_hold = std::max<size_t>(
      1, static_cast<size_t>(std::llround(cfg.holdout_fraction * images.size())));
  if (n_hold >= images.size()) {
    throw std::invalid_argument("train_latent_autoencoder: holdout leaves no training images");
  }
  const size_t n_fit = images.size() - n_hold;

  auto stack_patches = [&](size_t begin, size_t count) {
    const Tensor<S> first = patchify(images[begin], P);
    if (first.cols() != d_patch) {
      throw std::invalid_argument("train_latent_autoencoder: images must be 3-channel");
    }
    const int per = first.rows();
    Tensor<S> out({static_cast<int>(count) * per, d_patch});
    for (size_t i = 0; i < count; ++i) {
      const Tensor<S> p = i == 0 ? first : patchify(images[begin + i], P);
      if (p.rows() != per) {
        throw std::invalid_argument("train_latent_autoencoder: images differ in size");
      }
      std::copy(p.data(), p.data() + p.numel(),
                out.data() + i * static_cast<size_t>(per) * d_patch);
    }
    return out;
  };
  const Tensor<S> fit = stack_patches(0, n_fit);
  const Tensor<S> hold = stack_patches(n_fit, n_hold);

  Tokenizer<S> t;
  t.kind_ = cfg.vq ? TokenizerKind::vq : TokenizerKind::latent_ae;
  t.patch_ = P;
  t.d_lat_ = cfg.d_lat;
  t.hidden_ = cfg.hidden;
  nn::Linear<S> efc1, efc2, dfc1, dfc2;
  efc1.init(t.params_, "enc.fc1", d_patch, cfg.hidden, cfg.seed, S(0.1));
  efc2.init(t.params_, "enc.fc2", cfg.hidden, cfg.d_lat, cfg.seed, S(0.1));
  dfc1.init(t.params_, "dec.fc1", cfg.d_lat, cfg.hidden, cfg.seed, S(0.1));
  dfc2.init(t.params_, "dec.fc2", cfg.hidden, d_patch, cfg.seed, S(0.1));
  if (cfg.vq) {
    if (cfg.codebook < 1) throw std::invalid_argument("vq: codebook must be positive");
    t.params_.add("codebook", {cfg.codebook, cfg.d_lat});
    t.params_.init_normal("codebook", cfg.seed, S(0.1));
  }

  AdamWConfig<S> ocfg;
  ocfg.lr = static_cast<S>(cfg.lr);
  AdamW<S> opt(t.params_, ocfg);

  const int n_rows = fit.rows();
  std::vector<int> order(static_cast<size_t>(n_rows));
  for (int i = 0; i < n_rows; ++i) order[static_cast<size_t>(i)] = i;

  auto holdout_mse = [&]() {
    ag::NoGradGuard ng;
    auto x = ag::leaf(hold);
    auto z = t.encode_patches_var(x);
    if (cfg.vq) {
      const Tensor<S>& cb = t.params_.get("codebook");
      const std::vector<int> idx = nearest_codes(z->value, cb);
      Tensor<S> q({z->value.rows(), z->value.cols()});
      for (int r = 0; r < q.rows(); ++r) {
        for (int c = 0; c < q.cols(); ++c) q.at2(r, c) = cb.at2(idx[static_cast<size_t>(r)], c);
      }
      z = ag::leaf(q);
    }
    auto recon = t.decode_patches_var(z);
    return static_cast<double>(ag::mse_vs_const(recon, hold)->value.at(0));
  };

  double mse = holdout_mse();
  for (int epoch = 0; epoch < cfg.epochs && mse >= cfg.mse_threshold; ++epoch) {
    Rng shuffle(cfg.seed, "ae/shuffle", static_cast<uint64_t>(epoch));
    for (int i = n_rows - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle.uniform_int(0, i));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    for (int begin = 0; begin < n_rows; begin += cfg.batch) {
      const int b = std::min(cfg.batch, n_rows - begin);
      Tensor<S> x({b, d_patch});
      for (int r = 0; r < b; ++r) {
        const int src = order[static_cast<size_t>(begin + r)];
        std::copy(fit.data() + static_cast<size_t>(src) * d_patch,
                  fit.data() + static_cast<size_t>(src + 1) * d_patch,
                  x.data() + static_cast<size_t>(r) * d_patch);
      }
      Binding<S> p(t.params_);
      auto xv = ag::leaf(x);
      auto z_e = t.encode_bound(p, xv);
      ag::Var<S> loss;
      if (cfg.vq) {
        const std::vector<int> idx = nearest_codes(z_e->value, t.params_.get("codebook"));
        auto zq = ag::embedding(p("codebook"), idx);
        // Straight-through: decoder sees the quantized value, gradient flows
        // to the encoder output.
        Tensor<S> delta = zq->value.clone();
        {
          const S* ze = z_e->value.data();
          for (size_t k = 0; k < delta.numel(); ++k) delta.at(k) -= ze[k];
        }
        auto z_st = ag::add(z_e, ag::leaf(delta));
        auto recon = t.decode_bound(p, z_st);
        auto recon_loss = ag::mse_vs_const(recon, x);
        auto cb_loss = ag::mse_vs_const(zq, z_e->value);
        auto commit = ag::mse_vs_const(z_e, zq->value);
        loss = ag::add(recon_loss,
                       ag::add(cb_loss, ag::scale(commit, static_cast<S>(cfg.commitment))));
      } else {
        auto recon = t.decode_bound(p, z_e);
        loss = ag::mse_vs_const(recon, x);
      }
      ag::backward(loss);
      std::unordered_map<std::string, Tensor<S>> grads;
      p.harvest_grads(grads);
      opt.step(grads);
    }
    mse = holdout_mse();
  }
  if (!(mse < cfg.mse_threshold)) {
    throw std::runtime_error("latent autoencoder failed to converge: held-out MSE " +
                             std::to_string(mse) + " after " + std::to_string(cfg.epochs) +
                             " epochs (threshold " + std::to_string(cfg.mse_threshold) + ")");
  }
  t.holdout_mse_ = mse;
  return t;
}

// ---- standardizer ----

template <typename S>
Standardizer<S> Standardizer<S>::fit(const std::vector<Tensor<S>>& latents) {
  if (latents.empty()) throw std::invalid_argument("Standardizer::fit: no latents");
  const int d = latents[0].cols();
  size_t n = 0;
  std::vector<double> sum(static_cast<size_t>(d), 0.0), sumsq(static_cast<size_t>(d), 0.0);
  for (const Tensor<S>& z : latents) {
    if (z.rank() != 2 || z.cols() != d) {
      throw std::invalid_argument("Standardizer::fit: inconsistent latent shapes");
    }
    for (int r = 0; r < z.rows(); ++r) {
      for (int c = 0; c < d; ++c) {
        const double v = static_cast<double>(z.at2(r, c));
        sum[static_cast<size_t>(c)] += v;
        sumsq[static_cast<size_t>(c)] += v * v;
      }
    }
    n += static_cast<size_t>(z.rows());
  }
  Standardizer st;
  st.mean_ = Tensor<S>({1, d});
  st.std_ = Tensor<S>({1, d});
  for (int c = 0; c < d; ++c) {
    const double mu = sum[static_cast<size_t>(c)] / static_cast<double>(n);
    const double var = sumsq[static_cast<size_t>(c)] / static_cast<double>(n) - mu * mu;
    double sd = std::sqrt(std::max(0.0, var));
    // Degenerate channels stay unscaled so the round trip remains exact.
    if (sd < 1e-12) sd = 1.0;
    st.mean_.at2(0, c) = static_cast<S>(mu);
    st.std_.at2(0, c) = static_cast<S>(sd);
  }
  return st;
}

template <typename S>
Tensor<S> Standardizer<S>::standardize(const Tensor<S>& z) const {
  if (z.rank() != 2 || z.cols() != mean_.cols()) {
    throw std::invalid_argument("standardize: latent width mismatch");
  }
  Tensor<S> out = z.clone();
  for (int r = 0; r < out.rows(); ++r) {
    for (int c = 0; c < out.cols(); ++c) {
      out.at2(r, c) = (out.at2(r, c) - mean_.at2(0, c)) / std_.at2(0, c);
    }
  }
  return out;
}

template <typename S>
Tensor<S> Standardizer<S>::destandardize(const Tensor<S>& z) const {
  if (z.rank() != 2 || z.cols() != mean_.cols()) {
    throw std::invalid_argument("destandardize: latent width mismatch");
  }
  Tensor<S> out = z.clone();
  for (int r = 0; r < out.rows(); ++r) {
    for (int c = 0; c < out.cols(); ++c) {
      out.at2(r, c) = out.at2(r, c) * std_.at2(0, c) + mean_.at2(0, c);
    }
  }
  return out;
}

template <typename S>
void Standardizer<S>::save(CheckpointWriter& w, const std::string& prefix) const {
  w.put(prefix + ".mean", mean_);
  w.put(prefix + ".std", std_);
}

template <typename S>
Standardizer<S> Standardizer<S>::load(const Checkpoint& ck, const std::string& prefix) {
  Standardizer st;
  st.mean_ = ck.template tensor<S>(prefix + ".mean");
  st.std_ = ck.template tensor<S>(prefix + ".std");
  return st;
}

// ---- explicit instantiations ----

template Tensor<float> patchify<float>(const Tensor<float>&, int);
template Tensor<double> patchify<double>(const Tensor<double>&, int);
template Tensor<float> unpatchify<float>(const Tensor<float>&, int, int, int);
template Tensor<double> unpatchify<double>(const Tensor<double>&, int, int, int);
template class Tokenizer<float>;
template class Tokenizer<double>;
template Tokenizer<float> make_patchify_tokenizer<float>(int);
template Tokenizer<double> make_patchify_tokenizer<double>(int);
template Tokenizer<float> make_frozen_feature_tokenizer<float>(uint64_t, int, int);
template Tokenizer<double> make_frozen_feature_tokenizer<double>(uint64_t, int, int);
template Tokenizer<float> train_latent_autoencoder<float>(const std::vector<Tensor<float>>&,
                                                          const AeConfig&);
template Tokenizer<double> train_latent_autoencoder<double>(const std::vector<Tensor<double>>&,
                                                            const AeConfig&);
template class Standardizer<float>;
template class Standardizer<double>;

}  // namespace tok
}  // namespace rvit
