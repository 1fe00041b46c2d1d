#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rvit/denoiser.hpp"
#include "rvit/mmlm.hpp"
#include "rvit/objectives.hpp"
#include "rvit/optim.hpp"
#include "rvit/schedules.hpp"
#include "rvit/synthdata.hpp"
#include "rvit/tokenizers.hpp"

namespace rvit {
namespace tr {

// Learning rate at 0-based step `step` of `total_steps`: linear warmup over
// round(warmup_ratio * total_steps) steps up to base_lr, then half-cosine
// decay that reaches exactly 0 at the step == total_steps boundary.
double lr_at(int step, int total_steps, double base_lr, double warmup_ratio);

struct OptimizerConfig {
  std::string name = "adamw";
  double lr = 3e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;

  void validate() const;
};
void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

// Corruption process used by the denoising objectives.
struct DiffusionConfig {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = kDefaultDiffusionSteps;
  double beta_min = 0.0;  // 0 together with beta_max 0 selects kind defaults
  double beta_max = 0.0;

  void validate() const;
  BetaSchedule build() const;
};
void to_json(nlohmann::json& j, const DiffusionConfig& c);
void from_json(const nlohmann::json& j, DiffusionConfig& c);

struct TrainConfig {
  obj::RossVariant objective;
  mm::ModelConfig model;
  dn::DenoiserConfig denoiser;  // d_lat 0 = derive from the teacher tokenizer
  DiffusionConfig diffusion;
  tok::AeConfig tokenizer;       // teacher training settings (latent_ae / vq)
  int tokenizer_fit_images = 256;  // images used to fit the teacher/standardizer
  OptimizerConfig optimizer;
  int batch_size = 32;
  int epochs = 10;
  int max_steps = 0;  // 0 = epochs decide; otherwise caps the total step count
  double warmup_ratio = 0.03;
  std::string lr_decay = "cosine";
  double grad_clip = 1.0;  // global L2 norm bound across all stores; 0 = off
  uint64_t seed = 0;
  int eval_every = 0;     // steps between val evaluations; 0 = final eval only
  int eval_examples = 0;  // cap on rows per evaluation; 0 = whole split
  bool two_stage = false;          // freeze the LM decoder for the first
  double stage1_fraction = 0.25;   // fraction of steps when two_stage is set

  void validate() const;
};
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepStats {
  int step = 0;  // 1-based count of completed steps
  double text_loss = 0.0;
  double visual_loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct EvalResult {
  double probe_accuracy = 0.0;
  double text_loss = 0.0;
  double visual_loss = 0.0;
  int n_rows = 0;
};
void to_json(nlohmann::json& j, const EvalResult& r);

// Joint optimization of the combined loss over a generated dataset. One
// trainer owns the model, the visual objective, the denoiser (when the
// variant needs one), the frozen teacher tokenizer, and one AdamW per
// parameter store, all advanced in lockstep. Randomness is derived from
// (seed, purpose, step) keys, so a resumed run replays the interrupted run's
// draws without serializing generator state.
template <typename S>
class Trainer {
 public:
  // Builds everything from the config seed; trains the teacher autoencoder
  // on the first `tokenizer_fit_images` images when the variant asks for a
  // learned tokenizer. The dataset reference must outlive the trainer.
  Trainer(const TrainConfig& cfg, const synth::Dataset& train);
  // The model lives by value, so moving re-points its optimizer at the new
  // parameter store.
  Trainer(Trainer&& other) noexcept;
  Trainer& operator=(Trainer&&) = delete;

  const TrainConfig& config() const { return cfg_; }
  int step() const { return step_; }
  int steps_per_epoch() const;
  int total_steps() const;
  bool done() const { return step_ >= total_steps(); }
  int stage1_steps() const;

  // Runs one minibatch step: builds per-sample graphs, accumulates gradients,
  // clips their joint global norm, and steps every optimizer at the scheduled
  // learning rate. Throws std::runtime_error if the loss goes non-finite; the
  // parameters are left at their pre-step values in that case.
  StepStats train_step();

  // Frozen-parameter pass over (a cap-limited prefix of) a split: pooled
  // mean text loss over caption+QA rows, mean visual loss per image with
  // deterministic per-row noise keys, and the QA probe accuracy.
  EvalResult evaluate_split(const synth::Dataset& split, int cap = 0);

  // Everything needed to resume or evaluate in one file: config, parameters,
  // optimizer moments, and the step counter. `extra` merges into the meta.
  void save_checkpoint(const std::string& path,
                       const nlohmann::json& extra = nlohmann::json::object()) const;
  // `train` may be null for an evaluation-only trainer (train_step throws).
  static Trainer load_checkpoint(const std::string& path, const synth::Dataset* train);

  mm::Model<S>& model() { return model_; }
  obj::VisualObjective<S>& objective() { return *objective_; }
  dn::Denoiser<S>* denoiser() { return denoiser_ ? denoiser_.get() : nullptr; }
  tok::Tokenizer<S>* teacher() { return teacher_ ? teacher_.get() : nullptr; }
  const BetaSchedule* schedule() const { return schedule_ ? &*schedule_ : nullptr; }
  const tok::Standardizer<S>* standardizer() const {
    return standardizer_ ? &*standardizer_ : nullptr;
  }

 private:
  struct Example {
    size_t row = 0;  // index into dataset rows
    int qa = -1;     // -1 = caption row, otherwise index into row's qa pairs
  };

  explicit Trainer(const TrainConfig& cfg);  // members only; no building
  void build_fresh(const synth::Dataset& train);
  void attach_dataset(const synth::Dataset& train);
  bool visual_enabled() const;
  std::vector<size_t> epoch_order(int epoch) const;
  synth::TextRow example_row(const Example& ex) const;
  const synth::DatasetRow& dataset_row(const Example& ex) const;

  TrainConfig cfg_;
  const synth::Dataset* train_ = nullptr;
  std::vector<Example> examples_;
  int step_ = 0;

  mm::Model<S> model_;
  std::unique_ptr<obj::VisualObjective<S>> objective_;
  std::unique_ptr<dn::Denoiser<S>> denoiser_;
  std::unique_ptr<tok::Tokenizer<S>> teacher_;
  std::optional<BetaSchedule> schedule_;
  std::optional<tok::Standardizer<S>> standardizer_;

  std::unique_ptr<AdamW<S>> opt_model_, opt_objective_, opt_denoiser_;
};

// Full training loop: runs every step, appends one JSON line per step to
// <out_dir>/metrics.jsonl, evaluates the val split every `eval_every` steps
// (writing ckpt/step_<n>.ckpt with the probe accuracy in its meta), and ends
// with ckpt/final.ckpt plus a final evaluation. Returns the final eval (zeros
// if `val` is null). On a non-finite loss the last written checkpoint is left
// in place and the error propagates.
template <typename S>
EvalResult train(const TrainConfig& cfg, const synth::Dataset& train, const synth::Dataset* val,
                 const std::string& out_dir);

// Loads a checkpoint produced by save_checkpoint/train and evaluates a split.
template <typename S>
EvalResult evaluate_checkpoint(const std::string& ckpt_path, const synth::Dataset& split,
                               int cap = 0);

}  // namespace tr
}  // namespace rvit
