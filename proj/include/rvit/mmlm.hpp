#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rvit/autodiff.hpp"
#include "rvit/nn.hpp"
#include "rvit/serialize.hpp"
#include "rvit/tensor.hpp"

namespace rvit {
namespace mm {

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int vocab_size = 0;  // set from the dataset vocabulary
  int max_seq = 96;    // visual prefix + longest text row
  int patch_size = 4;
  int image_size = 32;
  int encoder_layers = 2;
  // 1-based decoder block whose output supplies the visual outputs;
  // 0 selects the final block (the default).
  int visual_output_layer = 0;

  int n_visual() const {
    return (image_size / patch_size) * (image_size / patch_size);
  }
  int resolved_visual_layer() const {
    return visual_output_layer == 0 ? n_layers : visual_output_layer;
  }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// One B-sized batch; text rows are rectangular only if the caller pads them.
template <typename S>
struct MultimodalBatch {
  std::vector<Tensor<S>> images;              // B x [H x W x 3]
  std::vector<std::vector<int>> token_ids;    // B x L_text
  std::vector<std::vector<bool>> loss_mask;   // B x L_text, true = supervised
  int visual_count = 0;

  size_t size() const { return images.size(); }
  void validate(const ModelConfig& cfg) const;
};

// Values-only result of a single-sample forward pass.
template <typename S>
struct ForwardValues {
  Tensor<S> logits;               // [(N + L_text) x vocab]
  std::vector<Tensor<S>> hidden;  // decoder block outputs, each [(N+L) x d]
  Tensor<S> visual;               // [N x d] designated-layer visual outputs
  Tensor<S> attn_final;           // [heads x Ltot x Ltot] final decoder block
};

template <typename S>
class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  // Graph-building single-sample forward. All parameter leaves come from the
  // caller's Binding so gradients can be harvested after backward().
  struct Graph {
    ag::Var<S> logits;               // [(N+L) x vocab]
    ag::Var<S> visual;               // [N x d] designated layer, rows 0..N-1
    std::vector<ag::Var<S>> hidden;  // decoder block outputs (full sequence)
    Tensor<S> attn_final;            // final block attention (values)
    int n_visual = 0;
  };
  Graph forward_graph(Binding<S>& p, const Tensor<S>& image, const std::vector<int>& ids,
                      bool capture_attn = false);

  // Creation-format forward: no visual prefix; the text embeddings are
  // followed by `queries` (one learnable row per query token). `visual`
  // holds the final-block hidden states at the query positions — the
  // conditions for generation, which see the instruction through causal
  // attention.
  Graph forward_with_queries(Binding<S>& p, const std::vector<int>& ids,
                             const ag::Var<S>& queries);

  // Projected visual prefix v = H_phi(G_xi(I)), graph and value forms.
  ag::Var<S> encode_image_var(Binding<S>& p, const Tensor<S>& image);
  Tensor<S> encode_image(const Tensor<S>& image);

  // Values-only single-sample forward (no tape).
  ForwardValues<S> forward(const Tensor<S>& image, const std::vector<int>& ids,
                           bool capture_attn = false);

  // Batch forward: one ForwardValues per sample, in batch order.
  std::vector<ForwardValues<S>> forward_batch(const MultimodalBatch<S>& batch,
                                              bool capture_attn = false);

  // Mean NLL over supervised positions of one sample, as a graph node.
  // Predictions come from the logits row one position to the left of each
  // target. Throws if the mask has no supervised position.
  ag::Var<S> text_loss_var(const Graph& g, const std::vector<int>& ids,
                           const std::vector<bool>& mask);

  // Batch text loss (values only): sum of NLL over all supervised positions
  // in the batch divided by their count.
  double text_loss(const MultimodalBatch<S>& batch);

  // Greedy next-token choice after `prompt_ids`, restricted to `candidates`
  // (ties break toward the lowest id). Used by the QA probe.
  int greedy_answer(const Tensor<S>& image, const std::vector<int>& prompt_ids,
                    const std::vector<int>& candidates);

  void save_into(CheckpointWriter& w, const std::string& prefix = "model") const;
  static Model load_from(const Checkpoint& ck, const std::string& prefix = "model");
  void save(const std::string& path) const;
  static Model load(const std::string& path);

  template <typename T>
  Model<T> cast() const {
    Model<T> out;
    out.cfg_ = cfg_;
    out.params_ = params_.template cast<T>();
    out.wire();
    return out;
  }

  template <typename T>
  friend class Model;

 private:
  void build(uint64_t seed);  // registers + initializes parameters
  void wire();                // re-binds layer name handles to cfg_

  ModelConfig cfg_;
  ParamStore<S> params_;

  nn::Linear<S> patch_embed_;
  std::vector<nn::TransformerBlock<S>> enc_blocks_;
  nn::LayerNorm<S> enc_ln_f_;
  nn::Linear<S> proj_fc1_, proj_fc2_;
  std::vector<nn::TransformerBlock<S>> dec_blocks_;
  nn::LayerNorm<S> dec_ln_f_;
  nn::Linear<S> head_;
};

// Free-function form of the batch text loss matching the module contract.
template <typename S>
double text_loss(const std::vector<Tensor<S>>& logits, const MultimodalBatch<S>& batch);

}  // namespace mm
}  // namespace rvit
