#include "rvit/denoiser.hpp"

#include <cmath>
#include <stdexcept>

namespace rvit::dn {

void DenoiserConfig::validate() const {
  if (n_blocks <= 0 || d_model <= 0 || n_heads <= 0 || timestep_embed_dim <= 0) {
    throw std::invalid_argument("denoiser config: sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("denoiser config: d_model must be divisible by n_heads");
  }
  if (d_lat <= 0) throw std::invalid_argument("denoiser config: d_lat must be set");
  if (timestep_embed_dim % 2 != 0) {
    throw std::invalid_argument("denoiser config: timestep_embed_dim must be even");
  }
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"n_blocks", c.n_blocks},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"d_lat", c.d_lat},
                     {"use_self_attention", c.use_self_attention},
                     {"timestep_embed_dim", c.timestep_embed_dim}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  j.at("n_blocks").get_to(c.n_blocks);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_lat").get_to(c.d_lat);
  j.at("use_self_attention").get_to(c.use_self_attention);
  j.at("timestep_embed_dim").get_to(c.timestep_embed_dim);
}

template <typename S>
Tensor<S> timestep_features(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) {
    throw std::invalid_argument("timestep features: dim must be positive and even");
  }
  if (t < 0) throw std::invalid_argument("timestep features: t must be non-negative");
  const int half = dim / 2;
  Tensor<S> out({1, dim});
  for (int i = 0; i < half; ++i) {
    const double angle = double(t) * std::pow(10000.0, -2.0 * double(i) / double(dim));
    out.at2(0, i) = static_cast<S>(std::sin(angle));
    out.at2(0, half + i) = static_cast<S>(std::cos(angle));
  }
  return out;
}

template <typename S>
Denoiser<S>::Denoiser(DenoiserConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  build(seed);
}

template <typename S>
void Denoiser<S>::wire() {
  time_mlp_.wire("time");
  blocks_.assign(static_cast<size_t>(cfg_.n_blocks), Block{});
  for (int i = 0; i < cfg_.n_blocks; ++i) {
    Block& b = blocks_[static_cast<size_t>(i)];
    const std::string pre = "b" + std::to_string(i);
    b.in.wire(pre + ".in");
    b.cond.wire(pre + ".cond");
    b.time.wire(pre + ".time");
    if (cfg_.use_self_attention) {
      b.ln1.wire(pre + ".ln1");
      b.attn.wire(pre + ".attn", cfg_.n_heads);
    }
    b.ln2.wire(pre + ".ln2");
    b.mlp.wire(pre + ".mlp");
  }
  ln_f_.wire("ln_f");
  head_.wire("head");
}

template <typename S>
void Denoiser<S>::build(uint64_t seed) {
  const int d = cfg_.d_model;
  const int ted = cfg_.timestep_embed_dim;
  time_mlp_.init(params_, "time", ted, ted, seed);
  blocks_.clear();
  for (int i = 0; i < cfg_.n_blocks; ++i) {
    Block b;
    const std::string pre = "b" + std::to_string(i);
    b.in.init(params_, pre + ".in", cfg_.d_lat, d, seed);
    b.cond.init(params_, pre + ".cond", d, d, seed);
    b.time.init(params_, pre + ".time", ted, d, seed);
    if (cfg_.use_self_attention) {
      b.ln1.init(params_, pre + ".ln1", d);
      b.attn.init(params_, pre + ".attn", d, cfg_.n_heads, seed);
    }
    b.ln2.init(params_, pre + ".ln2", d);
    b.mlp.init(params_, pre + ".mlp", d, 4 * d, seed);
    blocks_.push_back(b);
  }
  ln_f_.init(params_, "ln_f", d);
  head_.init(params_, "head", d, cfg_.d_lat, seed);
}

template <typename S>
ag::Var<S> Denoiser<S>::forward_var(Binding<S>& p, const ag::Var<S>& z_t,
                                    const ag::Var<S>& cond, int t) const {
  if (z_t->value.rank() != 2 || z_t->value.cols() != cfg_.d_lat) {
    throw std::invalid_argument("denoiser: z_t must be [N x d_lat], got " +
                                z_t->value.shape_str());
  }
  if (cond->value.rank() != 2 || cond->value.cols() != cfg_.d_model) {
    throw std::invalid_argument("denoiser: cond must be [N x d_model], got " +
                                cond->value.shape_str());
  }
  if (cond->value.rows() != z_t->value.rows()) {
    throw std::invalid_argument("denoiser: z_t and cond token counts differ");
  }
  if (t < 1) throw std::out_of_range("denoiser: t out of range");

  const auto features = ag::leaf(timestep_features<S>(t, cfg_.timestep_embed_dim));
  const auto temb = time_mlp_.forward(p, features);  // [1 x ted]

  ag::Var<S> h;
  for (const Block& b : blocks_) {
    auto inject = ag::add_rowvec(ag::add(b.in.forward(p, z_t), b.cond.forward(p, cond)),
                                 b.time.forward(p, temb));
    h = h ? ag::add(h, inject) : inject;
    if (cfg_.use_self_attention) {
      h = ag::add(h, b.attn.forward(p, b.ln1.forward(p, h), /*causal=*/false));
    }
    h = ag::add(h, b.mlp.forward(p, b.ln2.forward(p, h)));
  }
  return head_.forward(p, ln_f_.forward(p, h));
}

template <typename S>
Tensor<S> Denoiser<S>::forward(const Tensor<S>& z_t, const Tensor<S>& cond, int t) const {
  ag::NoGradGuard ng;
  Binding<S> p(const_cast<ParamStore<S>&>(params_));
  return forward_var(p, ag::leaf(z_t), ag::leaf(cond), t)->value;
}

template <typename S>
NoisePredictor<S> Denoiser<S>::predictor(Binding<S>& p) const {
  return [this, &p](const ag::Var<S>& z_t, const ag::Var<S>& cond, int t) {
    return forward_var(p, z_t, cond, t);
  };
}

template <typename S>
NoisePredictorEval<S> Denoiser<S>::eval_predictor() const {
  return [this](const Tensor<S>& z_t, const Tensor<S>& cond, int t) {
    return forward(z_t, cond, t);
  };
}

template <typename S>
void Denoiser<S>::save_into(CheckpointWriter& w, const std::string& prefix) const {
  nlohmann::json jc;
  to_json(jc, cfg_);
  w.meta()[prefix + ".config"] = jc;
  for (const auto& name : params_.names()) w.put(prefix + ".p." + name, params_.get(name));
}

template <typename S>
Denoiser<S> Denoiser<S>::load_from(const Checkpoint& ck, const std::string& prefix) {
  Denoiser d;
  from_json(ck.meta().at(prefix + ".config"), d.cfg_);
  d.cfg_.validate();
  d.build(/*seed=*/0);  // same registration order as construction
  for (const auto& name : d.params_.names()) {
    const std::string key = prefix + ".p." + name;
    if (!ck.has(key)) throw std::runtime_error("denoiser checkpoint missing tensor " + key);
    Tensor<S> v = ck.template tensor<S>(key);
    if (!v.same_shape(d.params_.get(name))) {
      throw std::runtime_error("denoiser checkpoint shape mismatch for " + key);
    }
    d.params_.get(name) = v;
  }
  return d;
}

template <typename S>
void Denoiser<S>::save(const std::string& path) const {
  CheckpointWriter w;
  w.meta()["format"] = "rvit-denoiser";
  w.meta()["version"] = 1;
  save_into(w);
  w.save(path);
}

template <typename S>
Denoiser<S> Denoiser<S>::load(const std::string& path) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.meta().value("format", "") != "rvit-denoiser") {
    throw std::runtime_error("not a denoiser checkpoint: " + path);
  }
  return load_from(ck);
}

template Tensor<float> timestep_features<float>(int, int);
template Tensor<double> timestep_features<double>(int, int);
template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace rvit::dn
