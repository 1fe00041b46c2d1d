#include "rvit/mmlm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rvit/tokenizers.hpp"

namespace rvit {
namespace mm {

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || encoder_layers <= 0) {
    throw std::invalid_argument("model config: sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model must be divisible by n_heads");
  }
  if (vocab_size <= 0) throw std::invalid_argument("model config: vocab_size must be set");
  if (patch_size <= 0 || image_size % patch_size != 0) {
    throw std::invalid_argument("model config: image_size must be divisible by patch_size");
  }
  if (visual_output_layer < 0 || visual_output_layer > n_layers) {
    throw std::invalid_argument("model config: visual_output_layer out of range");
  }
  if (max_seq < n_visual() + 1) {
    throw std::invalid_argument("model config: max_seq too small for the visual prefix");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"vocab_size", c.vocab_size},
                     {"max_seq", c.max_seq},
                     {"patch_size", c.patch_size},
                     {"image_size", c.image_size},
                     {"encoder_layers", c.encoder_layers},
                     {"visual_output_layer", c.visual_output_layer}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("d_model").get_to(c.d_model);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq").get_to(c.max_seq);
  j.at("patch_size").get_to(c.patch_size);
  j.at("image_size").get_to(c.image_size);
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("visual_output_layer").get_to(c.visual_output_layer);
}

template <typename S>
void MultimodalBatch<S>::validate(const ModelConfig& cfg) const {
  if (images.size() != token_ids.size() || images.size() != loss_mask.size()) {
    throw std::invalid_argument("batch: images/token_ids/loss_mask sizes differ");
  }
  if (visual_count != cfg.n_visual()) {
    throw std::invalid_argument("batch: visual_count does not match the model config");
  }
  for (size_t s = 0; s < images.size(); ++s) {
    if (images[s].rank() != 3 || images[s].dim(0) != cfg.image_size ||
        images[s].dim(1) != cfg.image_size || images[s].dim(2) != 3) {
      throw std::invalid_argument("batch: image shape mismatch");
    }
    if (token_ids[s].size() != loss_mask[s].size()) {
      throw std::invalid_argument("batch: token/mask length mismatch");
    }
    if (!loss_mask[s].empty() && loss_mask[s][0]) {
      throw std::invalid_argument("batch: position 0 must never be supervised");
    }
    if (cfg.n_visual() + static_cast<int>(token_ids[s].size()) > cfg.max_seq) {
      throw std::invalid_argument("batch: sequence overflows max_seq");
    }
  }
}

template <typename S>
Model<S>::Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  build(seed);
}

template <typename S>
void Model<S>::wire() {
  patch_embed_.wire("enc.patch");
  enc_blocks_.assign(static_cast<size_t>(cfg_.encoder_layers), nn::TransformerBlock<S>{});
  for (int i = 0; i < cfg_.encoder_layers; ++i) {
    enc_blocks_[static_cast<size_t>(i)].wire("enc.b" + std::to_string(i), cfg_.n_heads);
  }
  enc_ln_f_.wire("enc.ln_f");
  proj_fc1_.wire("proj.fc1");
  proj_fc2_.wire("proj.fc2");
  dec_blocks_.assign(static_cast<size_t>(cfg_.n_layers), nn::TransformerBlock<S>{});
  for (int i = 0; i < cfg_.n_layers; ++i) {
    dec_blocks_[static_cast<size_t>(i)].wire("dec.b" + std::to_string(i), cfg_.n_heads);
  }
  dec_ln_f_.wire("dec.ln_f");
  head_.wire("dec.head");
}

template <typename S>
void Model<S>::build(uint64_t seed) {
  const int d = cfg_.d_model;
  const int d_patch = 3 * cfg_.patch_size * cfg_.patch_size;
  const int N = cfg_.n_visual();

  patch_embed_.init(params_, "enc.patch", d_patch, d, seed);
  params_.add("enc.pos", {N, d});
  params_.init_normal("enc.pos", seed, S(0.02));
  enc_blocks_.clear();
  for (int i = 0; i < cfg_.encoder_layers; ++i) {
    nn::TransformerBlock<S> b;
    b.init(params_, "enc.b" + std::to_string(i), d, cfg_.n_heads, 4 * d, seed);
    enc_blocks_.push_back(b);
  }
  enc_ln_f_.init(params_, "enc.ln_f", d);
  proj_fc1_.init(params_, "proj.fc1", d, d, seed);
  proj_fc2_.init(params_, "proj.fc2", d, d, seed);

  params_.add("dec.embed", {cfg_.vocab_size, d});
  params_.init_normal("dec.embed", seed, S(0.02));
  params_.add("dec.pos", {cfg_.max_seq, d});
  params_.init_normal("dec.pos", seed, S(0.02));
  dec_blocks_.clear();
  for (int i = 0; i < cfg_.n_layers; ++i) {
    nn::TransformerBlock<S> b;
    b.init(params_, "dec.b" + std::to_string(i), d, cfg_.n_heads, 4 * d, seed);
    dec_blocks_.push_back(b);
  }
  dec_ln_f_.init(params_, "dec.ln_f", d);
  head_.init(params_, "dec.head", d, cfg_.vocab_size, seed);
}

template <typename S>
ag::Var<S> Model<S>::encode_image_var(Binding<S>& p, const Tensor<S>& image) {
  if (image.rank() != 3 || image.dim(0) != cfg_.image_size || image.dim(1) != cfg_.image_size ||
      image.dim(2) != 3) {
    throw std::invalid_argument("encode_image: image shape mismatch, got " + image.shape_str());
  }
  auto patches = ag::leaf(tok::patchify(image, cfg_.patch_size));
  auto x = ag::add(patch_embed_.forward(p, patches), p("enc.pos"));
  for (auto& b : enc_blocks_) x = b.forward(p, x, /*causal=*/false);
  x = enc_ln_f_.forward(p, x);
  return proj_fc2_.forward(p, ag::gelu(proj_fc1_.forward(p, x)));
}

template <typename S>
Tensor<S> Model<S>::encode_image(const Tensor<S>& image) {
  ag::NoGradGuard ng;
  Binding<S> p(params_);
  return encode_image_var(p, image)->value;
}

template <typename S>
typename Model<S>::Graph Model<S>::forward_graph(Binding<S>& p, const Tensor<S>& image,
                                                 const std::vector<int>& ids, bool capture_attn) {
  const int N = cfg_.n_visual();
  const int L = static_cast<int>(ids.size());
  if (N + L > cfg_.max_seq) {
    throw std::invalid_argument("forward: sequence overflows max_seq (" + std::to_string(N + L) +
                                " > " + std::to_string(cfg_.max_seq) + ")");
  }
  Graph g;
  g.n_visual = N;

  auto v = encode_image_var(p, image);
  ag::Var<S> x = v;
  if (L > 0) {
    auto text = ag::embedding(p("dec.embed"), ids);
    x = ag::concat_rows(v, text);
  }
  x = ag::add(x, ag::slice_rows(p("dec.pos"), 0, N + L));

  g.hidden.reserve(dec_blocks_.size());
  for (size_t i = 0; i < dec_blocks_.size(); ++i) {
    const bool last = (i + 1 == dec_blocks_.size());
    Tensor<S>* attn_sink = (capture_attn && last) ? &g.attn_final : nullptr;
    x = dec_blocks_[i].forward(p, x, /*causal=*/true, attn_sink);
    g.hidden.push_back(x);
  }
  g.visual = ag::slice_rows(g.hidden[static_cast<size_t>(cfg_.resolved_visual_layer() - 1)], 0, N);
  g.logits = head_.forward(p, dec_ln_f_.forward(p, x));
  return g;
}

template <typename S>
typename Model<S>::Graph Model<S>::forward_with_queries(Binding<S>& p,
                                                        const std::vector<int>& ids,
                                                        const ag::Var<S>& queries) {
  if (ids.empty()) {
    throw std::invalid_argument("forward_with_queries: creation format needs text first");
  }
  if (queries->value.rank() != 2 || queries->value.cols() != cfg_.d_model ||
      queries->value.rows() <= 0) {
    throw std::invalid_argument("forward_with_queries: queries must be [Q x d_model]");
  }
  const int L = static_cast<int>(ids.size());
  const int Q = queries->value.rows();
  if (L + Q > cfg_.max_seq) {
    throw std::invalid_argument("forward_with_queries: sequence overflows max_seq (" +
                                std::to_string(L + Q) + " > " + std::to_string(cfg_.max_seq) +
                                ")");
  }
  Graph g;
  g.n_visual = 0;

  auto x = ag::concat_rows(ag::embedding(p("dec.embed"), ids), queries);
  x = ag::add(x, ag::slice_rows(p("dec.pos"), 0, L + Q));
  g.hidden.reserve(dec_blocks_.size());
  for (size_t i = 0; i < dec_blocks_.size(); ++i) {
    x = dec_blocks_[i].forward(p, x, /*causal=*/true, nullptr);
    g.hidden.push_back(x);
  }
  g.visual = ag::slice_rows(g.hidden.back(), L, Q);
  g.logits = head_.forward(p, dec_ln_f_.forward(p, x));
  return g;
}

template <typename S>
ForwardValues<S> Model<S>::forward(const Tensor<S>& image, const std::vector<int>& ids,
                                   bool capture_attn) {
  ag::NoGradGuard ng;
  Binding<S> p(params_);
  Graph g = forward_graph(p, image, ids, capture_attn);
  ForwardValues<S> out;
  out.logits = g.logits->value;
  out.visual = g.visual->value;
  out.hidden.reserve(g.hidden.size());
  for (auto& h : g.hidden) out.hidden.push_back(h->value);
  out.attn_final = g.attn_final;
  return out;
}

template <typename S>
std::vector<ForwardValues<S>> Model<S>::forward_batch(const MultimodalBatch<S>& batch,
                                                      bool capture_attn) {
  batch.validate(cfg_);
  std::vector<ForwardValues<S>> out;
  out.reserve(batch.size());
  for (size_t s = 0; s < batch.size(); ++s) {
    out.push_back(forward(batch.images[s], batch.token_ids[s], capture_attn));
  }
  return out;
}

template <typename S>
ag::Var<S> Model<S>::text_loss_var(const Graph& g, const std::vector<int>& ids,
                                   const std::vector<bool>& mask) {
  const int N = g.n_visual;
  const int L = static_cast<int>(ids.size());
  if (mask.size() != ids.size()) {
    throw std::invalid_argument("text_loss: mask length mismatch");
  }
  if (L > 0 && mask[0]) {
    throw std::invalid_argument("text_loss: position 0 must never be supervised");
  }
  const int rows = g.logits->value.rows();
  std::vector<int> targets(static_cast<size_t>(rows), 0);
  std::vector<bool> row_mask(static_cast<size_t>(rows), false);
  for (int i = 1; i < L; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    // The row one position to the left of target i predicts it.
    targets[static_cast<size_t>(N + i - 1)] = ids[static_cast<size_t>(i)];
    row_mask[static_cast<size_t>(N + i - 1)] = true;
  }
  return ag::masked_cross_entropy(g.logits, targets, row_mask);
}

template <typename S>
double text_loss(const std::vector<Tensor<S>>& logits, const MultimodalBatch<S>& batch) {
  if (logits.size() != batch.size()) {
    throw std::invalid_argument("text_loss: logits/batch size mismatch");
  }
  const int N = batch.visual_count;
  double total = 0.0;
  int64_t count = 0;
  for (size_t s = 0; s < logits.size(); ++s) {
    const Tensor<S>& lg = logits[s];
    const auto& ids = batch.token_ids[s];
    const auto& mask = batch.loss_mask[s];
    const int vocab = lg.cols();
    if (lg.rows() != N + static_cast<int>(ids.size())) {
      throw std::invalid_argument("text_loss: logits rows do not match N + L_text");
    }
    for (size_t i = 1; i < ids.size(); ++i) {
      if (!mask[i]) continue;
      if (ids[i] < 0 || ids[i] >= vocab) throw std::out_of_range("text_loss: target id range");
      const S* row = lg.data() + (static_cast<size_t>(N) + i - 1) * static_cast<size_t>(vocab);
      double mx = static_cast<double>(row[0]);
      for (int c = 1; c < vocab; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double z = 0.0;
      for (int c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      total += std::log(z) + mx - static_cast<double>(row[ids[i]]);
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("text_loss: no supervised positions in batch");
  return total / static_cast<double>(count);
}

template <typename S>
double Model<S>::text_loss(const MultimodalBatch<S>& batch) {
  batch.validate(cfg_);
  std::vector<Tensor<S>> logits;
  logits.reserve(batch.size());
  for (size_t s = 0; s < batch.size(); ++s) {
    logits.push_back(forward(batch.images[s], batch.token_ids[s]).logits);
  }
  return mm::text_loss(logits, batch);
}

template <typename S>
int Model<S>::greedy_answer(const Tensor<S>& image, const std::vector<int>& prompt_ids,
                            const std::vector<int>& candidates) {
  if (prompt_ids.empty()) throw std::invalid_argument("greedy_answer: empty prompt");
  if (candidates.empty()) throw std::invalid_argument("greedy_answer: no candidates");
  const ForwardValues<S> out = forward(image, prompt_ids);
  const int last = out.logits.rows() - 1;
  // Scan a sorted copy so ties resolve to the lowest id.
  std::vector<int> sorted = candidates;
  std::sort(sorted.begin(), sorted.end());
  int best = -1;
  S best_score = S(0);
  for (int id : sorted) {
    if (id < 0 || id >= out.logits.cols()) {
      throw std::out_of_range("greedy_answer: candidate id out of range");
    }
    const S score = out.logits.at2(last, id);
    if (best < 0 || score > best_score) {
      best = id;
      best_score = score;
    }
  }
  return best;
}

template <typename S>
void Model<S>::save_into(CheckpointWriter& w, const std::string& prefix) const {
  nlohmann::json jc;
  to_json(jc, cfg_);
  w.meta()[prefix + ".config"] = jc;
  for (const auto& name : params_.names()) w.put(prefix + ".p." + name, params_.get(name));
}

template <typename S>
Model<S> Model<S>::load_from(const Checkpoint& ck, const std::string& prefix) {
  Model m;
  from_json(ck.meta().at(prefix + ".config"), m.cfg_);
  m.cfg_.validate();
  m.build(/*seed=*/0);  // same registration order as construction
  for (const auto& name : m.params_.names()) {
    const std::string key = prefix + ".p." + name;
    if (!ck.has(key)) throw std::runtime_error("model checkpoint missing tensor " + key);
    Tensor<S> v = ck.template tensor<S>(key);
    if (!v.same_shape(m.params_.get(name))) {
      throw std::runtime_error("model checkpoint shape mismatch for " + key);
    }
    m.params_.get(name) = v;
  }
  return m;
}

template <typename S>
void Model<S>::save(const std::string& path) const {
  CheckpointWriter w;
  w.meta()["format"] = "rvit-model";
  w.meta()["version"] = 1;
  save_into(w);
  w.save(path);
}

template <typename S>
Model<S> Model<S>::load(const std::string& path) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.meta().value("format", "") != "rvit-model") {
    throw std::runtime_error("not a model checkpoint: " + path);
  }
  return load_from(ck);
}

template struct MultimodalBatch<float>;
template struct MultimodalBatch<double>;
template class Model<float>;
template class Model<double>;
template double text_loss<float>(const std::vector<Tensor<float>>&,
                                 const MultimodalBatch<float>&);
template double text_loss<double>(const std::vector<Tensor<double>>&,
                                  const MultimodalBatch<double>&);

}  // namespace mm
}  // namespace rvit
