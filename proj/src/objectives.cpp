#include "rvit/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace rvit::obj {

std::string to_string(RossKind k) {
  switch (k) {
    case RossKind::none: return "none";
    case RossKind::r_pixel: return "r_pixel";
    case RossKind::r_latent: return "r_latent";
    case RossKind::r_latent2pixel: return "r_latent2pixel";
    case RossKind::d_latent: return "d_latent";
    case RossKind::d_pixel: return "d_pixel";
    case RossKind::generative: return "generative";
  }
  throw std::logic_error("unreachable ross kind");
}

RossKind ross_kind_from_string(const std::string& s) {
  for (RossKind k : {RossKind::none, RossKind::r_pixel, RossKind::r_latent,
                     RossKind::r_latent2pixel, RossKind::d_latent, RossKind::d_pixel,
                     RossKind::generative}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown objective kind: " + s);
}

void RossVariant::validate() const {
  if (!(lambda_visual >= 0.0) || !std::isfinite(lambda_visual)) {
    throw std::invalid_argument("objective: lambda_visual must be finite and >= 0");
  }
  if (kind == RossKind::generative && query_count <= 0) {
    throw std::invalid_argument("objective: generative requires query_count > 0");
  }
}

void to_json(nlohmann::json& j, const RossVariant& v) {
  j = nlohmann::json{{"kind", to_string(v.kind)},
                     {"tokenizer_kind", tok::to_string(v.tokenizer_kind)},
                     {"lambda_visual", v.lambda_visual},
                     {"query_count", v.query_count}};
}

void from_json(const nlohmann::json& j, RossVariant& v) {
  v.kind = ross_kind_from_string(j.at("kind").get<std::string>());
  v.tokenizer_kind = tok::tokenizer_kind_from_string(j.at("tokenizer_kind").get<std::string>());
  j.at("lambda_visual").get_to(v.lambda_visual);
  j.at("query_count").get_to(v.query_count);
}

namespace {
void check_finite(double x, const char* what) {
  if (!std::isfinite(x)) {
    throw std::runtime_error(std::string("non-finite ") + what + " (" + std::to_string(x) +
                             "); aborting the step");
  }
}
}  // namespace

template <typename S>
ag::Var<S> combined_loss(const ag::Var<S>& text, const ag::Var<S>& visual, double lambda) {
  if (!text) throw std::invalid_argument("combined_loss: text loss missing");
  if (lambda < 0.0 || !std::isfinite(lambda)) {
    throw std::invalid_argument("combined_loss: lambda must be finite and >= 0");
  }
  check_finite(static_cast<double>(text->value.at(0)), "text loss");
  if (!visual) return text;
  check_finite(static_cast<double>(visual->value.at(0)), "visual loss");
  return ag::add(text, ag::scale(visual, static_cast<S>(lambda)));
}

double combined_loss(double text, double visual, double lambda) {
  if (lambda < 0.0 || !std::isfinite(lambda)) {
    throw std::invalid_argument("combined_loss: lambda must be finite and >= 0");
  }
  check_finite(text, "text loss");
  check_finite(visual, "visual loss");
  return text + lambda * visual;
}

int projection_target_dim(RossKind kind, int patch_size, int d_lat) {
  switch (kind) {
    case RossKind::r_pixel: return 3 * patch_size * patch_size;
    case RossKind::r_latent:
    case RossKind::r_latent2pixel: return d_lat;
    default: return 0;
  }
}

template <typename S>
Tensor<S> pool_token_grid(const Tensor<S>& tokens, int q_count) {
  if (tokens.rank() != 2) throw std::invalid_argument("pool: tokens must be 2-D");
  const int n = tokens.rows();
  const int d = tokens.cols();
  const int g = static_cast<int>(std::lround(std::sqrt(double(n))));
  const int q = static_cast<int>(std::lround(std::sqrt(double(q_count))));
  if (g * g != n || q * q != q_count || q <= 0 || g % q != 0) {
    throw std::invalid_argument("pool: token count " + std::to_string(n) +
                                " does not pool to " + std::to_string(q_count) +
                                " square tokens");
  }
  const int k = g / q;
  Tensor<S> out({q_count, d});
  for (int r = 0; r < q; ++r) {
    for (int c = 0; c < q; ++c) {
      for (int ch = 0; ch < d; ++ch) {
        double acc = 0;
        for (int i = 0; i < k; ++i) {
          for (int j = 0; j < k; ++j) {
            acc += tokens.at2((r * k + i) * g + (c * k + j), ch);
          }
        }
        out.at2(r * q + c, ch) = static_cast<S>(acc / double(k * k));
      }
    }
  }
  return out;
}

template <typename S>
VisualObjective<S>::VisualObjective(RossVariant v, int d_model, int patch_size, int d_lat,
                                    uint64_t seed)
    : variant_(v), d_model_(d_model) {
  variant_.validate();
  if (d_model <= 0) throw std::invalid_argument("objective: d_model must be positive");
  d_target_ = projection_target_dim(variant_.kind, patch_size, d_lat);
  if (variant_.needs_projector() && d_target_ <= 0) {
    throw std::invalid_argument("objective: projection target dimension must be positive");
  }
  build(seed);
}

template <typename S>
void VisualObjective<S>::wire() {
  if (variant_.needs_projector()) {
    proj_fc1_.wire("proj.fc1");
    proj_fc2_.wire("proj.fc2");
  }
}

template <typename S>
void VisualObjective<S>::build(uint64_t seed) {
  if (variant_.needs_projector()) {
    proj_fc1_.init(params_, "proj.fc1", d_model_, d_model_, seed);
    proj_fc2_.init(params_, "proj.fc2", d_model_, d_target_, seed);
  }
  if (variant_.kind == RossKind::generative) {
    params_.add("queries", {variant_.query_count, d_model_});
    params_.init_normal("queries", seed, S(0.02));
  }
}

template <typename S>
ag::Var<S> VisualObjective<S>::project(Binding<S>& p, const ag::Var<S>& visual) const {
  return proj_fc2_.forward(p, ag::gelu(proj_fc1_.forward(p, visual)));
}

template <typename S>
ag::Var<S> VisualObjective<S>::visual_loss(Binding<S>& p, const ag::Var<S>& visual,
                                           const Tensor<S>& image, tok::Tokenizer<S>& tokenizer,
                                           const tok::Standardizer<S>* standardizer,
                                           const DiffusionParts<S>* diff) const {
  if (variant_.kind == RossKind::none || variant_.kind == RossKind::generative) {
    throw std::logic_error("visual_loss: kind " + to_string(variant_.kind) +
                           " has no reconstruction loss");
  }
  if (tokenizer.kind() != variant_.tokenizer_kind) {
    throw std::invalid_argument("visual_loss: tokenizer kind " + std::string(tok::to_string(tokenizer.kind())) +
                                " does not match objective (" +
                                tok::to_string(variant_.tokenizer_kind) + ")");
  }
  if (variant_.needs_decoder() && !tokenizer.has_decoder()) {
    throw std::invalid_argument("visual_loss: " + to_string(variant_.kind) +
                                " requires a decoder-capable tokenizer");
  }
  if (visual->value.rank() != 2 || visual->value.cols() != d_model_) {
    throw std::invalid_argument("visual_loss: visual outputs must be [N x d_model]");
  }

  switch (variant_.kind) {
    case RossKind::r_pixel: {
      const Tensor<S> targets = tok::patchify(image, tokenizer.patch_size());
      if (targets.rows() != visual->value.rows()) {
        throw std::invalid_argument("visual_loss: token count mismatch between visual outputs and targets");
      }
      return ag::mse_vs_const(project(p, visual), targets);
    }
    case RossKind::r_latent: {
      const Tensor<S> targets = tokenizer.encode(image).z;
      if (targets.rows() != visual->value.rows()) {
        throw std::invalid_argument("visual_loss: token count mismatch between visual outputs and targets");
      }
      return ag::cosine_loss_vs_const(project(p, visual), targets);
    }
    case RossKind::r_latent2pixel: {
      const Tensor<S> targets = tok::patchify(image, tokenizer.patch_size());
      auto decoded = tokenizer.decode_patches_var(project(p, visual));
      if (decoded->value.rows() != targets.rows()) {
        throw std::invalid_argument("visual_loss: token count mismatch between visual outputs and targets");
      }
      return ag::mse_vs_const(decoded, targets);
    }
    case RossKind::d_latent: [[fallthrough]];
    case RossKind::d_pixel: {
      if (standardizer == nullptr) {
        throw std::invalid_argument("visual_loss: " + to_string(variant_.kind) +
                                    " requires a fitted standardizer");
      }
      if (diff == nullptr || !diff->complete()) {
        throw std::invalid_argument("visual_loss: " + to_string(variant_.kind) +
                                    " requires denoiser, schedule, and rng");
      }
      const Tensor<S> z0 = standardizer->standardize(tokenizer.encode(image).z);
      if (z0.rows() != visual->value.rows()) {
        throw std::invalid_argument("visual_loss: token count mismatch between visual outputs and targets");
      }
      return denoising_loss<S>(diff->predictor, z0, visual, *diff->schedule, *diff->rng);
    }
    default: throw std::logic_error("unreachable ross kind");
  }
}

template <typename S>
ag::Var<S> VisualObjective<S>::generative_loss(Binding<S>& p, mm::Model<S>& model,
                                               Binding<S>& pm, const std::vector<int>& ids,
                                               const Tensor<S>& image, tok::Tokenizer<S>& tokenizer,
                                               const tok::Standardizer<S>* standardizer,
                                               const DiffusionParts<S>& diff) const {
  if (variant_.kind != RossKind::generative) {
    throw std::logic_error("generative_loss: objective kind is " + to_string(variant_.kind));
  }
  if (tokenizer.kind() != variant_.tokenizer_kind) {
    throw std::invalid_argument("generative_loss: tokenizer kind mismatch");
  }
  if (standardizer == nullptr) {
    throw std::invalid_argument("generative_loss: requires a fitted standardizer");
  }
  if (!diff.complete()) {
    throw std::invalid_argument("generative_loss: requires denoiser, schedule, and rng");
  }
  auto g = model.forward_with_queries(pm, ids, p("queries"));
  const Tensor<S> pooled = pool_token_grid(tokenizer.encode(image).z, variant_.query_count);
  const Tensor<S> z0 = standardizer->standardize(pooled);
  return denoising_loss<S>(diff.predictor, z0, g.visual, *diff.schedule, *diff.rng);
}

template <typename S>
void VisualObjective<S>::save_into(CheckpointWriter& w, const std::string& prefix) const {
  nlohmann::json jc;
  to_json(jc, variant_);
  jc["d_model"] = d_model_;
  jc["d_target"] = d_target_;
  w.meta()[prefix + ".config"] = jc;
  for (const auto& name : params_.names()) w.put(prefix + ".p." + name, params_.get(name));
}

template <typename S>
VisualObjective<S> VisualObjective<S>::load_from(const Checkpoint& ck,
                                                 const std::string& prefix) {
  VisualObjective o;
  const nlohmann::json& jc = ck.meta().at(prefix + ".config");
  from_json(jc, o.variant_);
  o.variant_.validate();
  jc.at("d_model").get_to(o.d_model_);
  jc.at("d_target").get_to(o.d_target_);
  o.build(/*seed=*/0);  // same registration order as construction
  for (const auto& name : o.params_.names()) {
    const std::string key = prefix + ".p." + name;
    if (!ck.has(key)) throw std::runtime_error("objective checkpoint missing tensor " + key);
    Tensor<S> v = ck.template tensor<S>(key);
    if (!v.same_shape(o.params_.get(name))) {
      throw std::runtime_error("objective checkpoint shape mismatch for " + key);
    }
    o.params_.get(name) = v;
  }
  return o;
}

template ag::Var<float> combined_loss<float>(const ag::Var<float>&, const ag::Var<float>&,
                                             double);
template ag::Var<double> combined_loss<double>(const ag::Var<double>&, const ag::Var<double>&,
                                               double);
template Tensor<float> pool_token_grid<float>(const Tensor<float>&, int);
template Tensor<double> pool_token_grid<double>(const Tensor<double>&, int);
template class VisualObjective<float>;
template class VisualObjective<double>;

}  // namespace rvit::obj
