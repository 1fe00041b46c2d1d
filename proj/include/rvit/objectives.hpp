#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "rvit/autodiff.hpp"
#include "rvit/diffusion.hpp"
#include "rvit/mmlm.hpp"
#include "rvit/nn.hpp"
#include "rvit/serialize.hpp"
#include "rvit/tokenizers.hpp"

namespace rvit::obj {

// Supervision applied to the model's visual outputs. `none` is the plain
// visual-instruction-tuning baseline; r_* regress teacher targets through a
// learned projection; d_* supervise via conditional denoising; `generative`
// is the text-to-image baseline with learnable query tokens.
enum class RossKind { none, r_pixel, r_latent, r_latent2pixel, d_latent, d_pixel, generative };

std::string to_string(RossKind k);
RossKind ross_kind_from_string(const std::string& s);

struct RossVariant {
  RossKind kind = RossKind::none;
  tok::TokenizerKind tokenizer_kind = tok::TokenizerKind::latent_ae;
  double lambda_visual = 1.0;
  int query_count = 16;  // generative only

  void validate() const;
  bool needs_projector() const {
    return kind == RossKind::r_pixel || kind == RossKind::r_latent ||
           kind == RossKind::r_latent2pixel;
  }
  bool needs_diffusion() const {
    return kind == RossKind::d_latent || kind == RossKind::d_pixel ||
           kind == RossKind::generative;
  }
  bool needs_decoder() const {
    return kind == RossKind::r_latent2pixel || kind == RossKind::d_latent ||
           kind == RossKind::d_pixel;
  }
};

void to_json(nlohmann::json& j, const RossVariant& v);
void from_json(const nlohmann::json& j, RossVariant& v);

// Everything the denoising variants need, bundled. The predictor is the
// graph-building adapter of a denoiser whose parameters are bound elsewhere.
template <typename S>
struct DiffusionParts {
  NoisePredictor<S> predictor;
  const BetaSchedule* schedule = nullptr;
  Rng* rng = nullptr;

  bool complete() const { return predictor && schedule != nullptr && rng != nullptr; }
};

// Total training loss: text + lambda * visual. A null visual node means the
// visual path was not built (kind none, or lambda 0 with the path skipped),
// and the text node is returned untouched so the baseline is recovered
// bitwise. Non-finite inputs abort with a diagnostic.
template <typename S>
ag::Var<S> combined_loss(const ag::Var<S>& text, const ag::Var<S>& visual, double lambda);

// Scalar form used for metric reporting.
double combined_loss(double text, double visual, double lambda);

// Width of the r_* post-projection target for this teacher.
int projection_target_dim(RossKind kind, int patch_size, int d_lat);

// Owns the learnable machinery on the objective side: the two-layer GELU
// post-projection for r_* variants and the query embeddings for the
// generative baseline. Teacher targets are always detached; gradients reach
// the upstream model only through the visual outputs (and, for d_*, through
// the denoiser's condition path).
template <typename S>
class VisualObjective {
 public:
  VisualObjective(RossVariant v, int d_model, int patch_size, int d_lat, uint64_t seed);

  const RossVariant& variant() const { return variant_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  int d_model() const { return d_model_; }
  int d_target() const { return d_target_; }

  // Per-sample visual loss for the reconstruction variants (r_*, d_*).
  // `visual` is the [N x d_model] graph slice of the model's visual outputs;
  // `image` is the input the teacher re-encodes. d_* variants additionally
  // require `standardizer` and `diff`.
  ag::Var<S> visual_loss(Binding<S>& p, const ag::Var<S>& visual, const Tensor<S>& image,
                         tok::Tokenizer<S>& tokenizer, const tok::Standardizer<S>* standardizer,
                         const DiffusionParts<S>* diff) const;

  // Per-sample loss for the generative baseline: runs the model on
  // [text; queries], pools the teacher latents of the target image down to
  // query_count tokens, and applies the denoising loss with the query
  // hidden states as conditions.
  ag::Var<S> generative_loss(Binding<S>& p, mm::Model<S>& model, Binding<S>& pm,
                             const std::vector<int>& ids, const Tensor<S>& image,
                             tok::Tokenizer<S>& tokenizer, const tok::Standardizer<S>* standardizer,
                             const DiffusionParts<S>& diff) const;

  void save_into(CheckpointWriter& w, const std::string& prefix = "objective") const;
  static VisualObjective load_from(const Checkpoint& ck,
                                   const std::string& prefix = "objective");

  template <typename T>
  VisualObjective<T> cast() const {
    VisualObjective<T> out;
    out.variant_ = variant_;
    out.d_model_ = d_model_;
    out.d_target_ = d_target_;
    out.params_ = params_.template cast<T>();
    out.wire();
    return out;
  }

 private:
  VisualObjective() = default;
  template <typename T>
  friend class VisualObjective;

  void build(uint64_t seed);
  void wire();
  ag::Var<S> project(Binding<S>& p, const ag::Var<S>& visual) const;

  RossVariant variant_;
  int d_model_ = 0;
  int d_target_ = 0;
  ParamStore<S> params_;
  nn::Linear<S> proj_fc1_, proj_fc2_;
};

// Mean-pools an [N x d] token grid (row-major square layout) down to
// [Q x d], Q a smaller square count dividing evenly into N.
template <typename S>
Tensor<S> pool_token_grid(const Tensor<S>& tokens, int q_count);

}  // namespace rvit::obj
