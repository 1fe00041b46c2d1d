#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "rvit/autodiff.hpp"
#include "rvit/diffusion.hpp"
#include "rvit/nn.hpp"
#include "rvit/serialize.hpp"
#include "rvit/tensor.hpp"

namespace rvit::dn {

struct DenoiserConfig {
  int n_blocks = 2;
  int d_model = 128;
  int n_heads = 4;
  int d_lat = 0;  // latent width of the teacher tokenizer; must be set
  bool use_self_attention = true;
  int timestep_embed_dim = 128;

  void validate() const;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// Raw sinusoidal timestep features [1 x dim]: the first half holds
// sin(t / 10000^{2i/dim}), the second half the matching cosines.
template <typename S>
Tensor<S> timestep_features(int t, int dim);

// Conditional noise predictor over one sample's token grid. Each block adds
// fresh projections of the noisy latents, the conditions, and the timestep
// embedding into the residual stream, optionally mixes tokens with
// bidirectional self-attention, then applies an MLP; a linear head maps the
// stream back to latent width. Without self-attention every op is row-local,
// so the predictor factorizes exactly over tokens.
template <typename S>
class Denoiser {
 public:
  Denoiser(DenoiserConfig cfg, uint64_t seed);

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  size_t param_count() const { return params_.numel(); }

  // Graph-building forward; gradients reach the parameters bound through `p`
  // and the `cond` input (the path that trains the upstream model).
  ag::Var<S> forward_var(Binding<S>& p, const ag::Var<S>& z_t, const ag::Var<S>& cond,
                         int t) const;

  // Inference-only forward on plain tensors.
  Tensor<S> forward(const Tensor<S>& z_t, const Tensor<S>& cond, int t) const;

  // Adapters for the diffusion ops. The graph-building predictor shares the
  // caller's Binding so harvested gradients include denoiser parameters.
  NoisePredictor<S> predictor(Binding<S>& p) const;
  NoisePredictorEval<S> eval_predictor() const;

  void save_into(CheckpointWriter& w, const std::string& prefix = "denoiser") const;
  static Denoiser load_from(const Checkpoint& ck, const std::string& prefix = "denoiser");
  void save(const std::string& path) const;
  static Denoiser load(const std::string& path);

  template <typename T>
  Denoiser<T> cast() const {
    Denoiser<T> out;
    out.cfg_ = cfg_;
    out.params_ = params_.template cast<T>();
    out.wire();
    return out;
  }

 private:
  Denoiser() = default;
  template <typename T>
  friend class Denoiser;

  void build(uint64_t seed);
  void wire();

  struct Block {
    nn::Linear<S> in, cond, time;
    nn::LayerNorm<S> ln1;
    nn::MultiheadAttention<S> attn;
    nn::LayerNorm<S> ln2;
    nn::Mlp<S> mlp;
  };

  DenoiserConfig cfg_;
  ParamStore<S> params_;
  nn::Mlp<S> time_mlp_;
  std::vector<Block> blocks_;
  nn::LayerNorm<S> ln_f_;
  nn::Linear<S> head_;
};

}  // namespace rvit::dn
