#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rvit/autodiff.hpp"
#include "rvit/nn.hpp"
#include "rvit/serialize.hpp"
#include "rvit/tensor.hpp"

namespace rvit {
namespace tok {

enum class TokenizerKind { patchify, latent_ae, frozen_feature, vq };

const char* to_string(TokenizerKind k);
TokenizerKind tokenizer_kind_from_string(const std::string& s);

template <typename S>
struct LatentTokens {
  Tensor<S> z;  // [N x d_lat]
  TokenizerKind source = TokenizerKind::patchify;
  bool standardized = false;
};

// Splits an [H x W x C] image into non-overlapping P x P patches in row-major
// patch order; within a patch, pixels are row-major with channel fastest.
// Output is [N x P*P*C] with N = (H/P)*(W/P).
template <typename S>
Tensor<S> patchify(const Tensor<S>& image, int P);

// Exact inverse of patchify.
template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, int P, int H, int W);

struct AeConfig {
  int d_lat = 8;
  int downsample = 4;  // patch size of the per-patch MLP
  int hidden = 96;
  int epochs = 20;
  int batch = 64;
  double lr = 3e-3;
  double mse_threshold = 5e-3;
  double holdout_fraction = 0.1;
  uint64_t seed = 1;
  // VQ variant
  bool vq = false;
  int codebook = 64;
  double commitment = 0.25;
};

void to_json(nlohmann::json& j, const AeConfig& c);
void from_json(const nlohmann::json& j, AeConfig& c);

// Teacher tokenizer F (and decoder F^-1 where the kind supports one).
// Parameters are frozen after construction; encode/decode never mutate them,
// so concurrent use on a built tokenizer is safe.
template <typename S>
class Tokenizer {
 public:
  TokenizerKind kind() const { return kind_; }
  int patch_size() const { return patch_; }
  int d_lat() const { return d_lat_; }
  int hidden() const { return hidden_; }
  bool has_decoder() const { return kind_ != TokenizerKind::frozen_feature; }
  int n_tokens(int image_size) const {
    return (image_size / patch_) * (image_size / patch_);
  }
  double trained_holdout_mse() const { return holdout_mse_; }

  LatentTokens<S> encode(const Tensor<S>& image);
  // Decodes [N x d_lat] latents to an [H x W x 3] image clamped to [0, 1].
  Tensor<S> decode(const Tensor<S>& latents, int H, int W);
  // Differentiable decode to patch layout [N x P*P*3] (no clamp); gradients
  // flow through the frozen decoder into `latents`. Pixel-space MSE equals
  // patch-layout MSE because unpatchify only permutes elements.
  ag::Var<S> decode_patches_var(const ag::Var<S>& latents);

  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);
  // Embeds the tokenizer under `prefix` inside a larger checkpoint.
  void save_into(CheckpointWriter& w, const std::string& prefix = "teacher") const;
  static Tokenizer load_from(const Checkpoint& ck, const std::string& prefix = "teacher");

  template <typename T>
  Tokenizer<T> cast() const {
    Tokenizer<T> out;
    out.kind_ = kind_;
    out.patch_ = patch_;
    out.d_lat_ = d_lat_;
    out.hidden_ = hidden_;
    out.holdout_mse_ = holdout_mse_;
    out.params_ = params_.template cast<T>();
    return out;
  }

  template <typename T>
  friend class Tokenizer;

  template <typename T>
  friend Tokenizer<T> make_patchify_tokenizer(int);
  template <typename T>
  friend Tokenizer<T> make_frozen_feature_tokenizer(uint64_t, int, int);
  template <typename T>
  friend Tokenizer<T> train_latent_autoencoder(const std::vector<Tensor<T>>&, const AeConfig&);

 private:
  ag::Var<S> encode_patches_var(const ag::Var<S>& patches);
  // Binding-sharing variants used during autoencoder training so parameter
  // gradients land on leaves the caller can harvest.
  ag::Var<S> encode_bound(Binding<S>& p, const ag::Var<S>& patches);
  ag::Var<S> decode_bound(Binding<S>& p, const ag::Var<S>& latents);

  TokenizerKind kind_ = TokenizerKind::patchify;
  int patch_ = 4;
  int d_lat_ = 48;
  int hidden_ = 0;
  double holdout_mse_ = 0.0;
  ParamStore<S> params_;
};

template <typename S>
Tokenizer<S> make_patchify_tokenizer(int P = 4);

// encode(I) = patchify(I, P) * W with W a fixed seeded Gaussian scaled by
// 1/sqrt(3 P^2). No decoder.
template <typename S>
Tokenizer<S> make_frozen_feature_tokenizer(uint64_t seed, int d_lat = 16, int P = 4);

// Trains the per-patch MLP autoencoder (optionally VQ-quantized) until the
// held-out reconstruction MSE drops below config.mse_threshold; throws with
// the final MSE if the threshold is not reached within config.epochs.
template <typename S>
Tokenizer<S> train_latent_autoencoder(const std::vector<Tensor<S>>& images, const AeConfig& cfg);

// Per-channel affine normalization fitted on a set of latent matrices.
template <typename S>
class Standardizer {
 public:
  static Standardizer fit(const std::vector<Tensor<S>>& latents);

  Tensor<S> standardize(const Tensor<S>& z) const;
  Tensor<S> destandardize(const Tensor<S>& z) const;

  const Tensor<S>& mean() const { return mean_; }
  const Tensor<S>& stddev() const { return std_; }

  void save(CheckpointWriter& w, const std::string& prefix) const;
  static Standardizer load(const Checkpoint& ck, const std::string& prefix);

  template <typename T>
  Standardizer<T> cast() const {
    Standardizer<T> out;
    out.mean_ = mean_.template cast<T>();
    out.std_ = std_.template cast<T>();
    return out;
  }

  template <typename T>
  friend class Standardizer;

 private:
  Tensor<S> mean_, std_;  // [1 x d_lat]
};

}  // namespace tok
}  // namespace rvit
