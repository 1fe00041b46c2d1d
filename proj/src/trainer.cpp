#include "rvit/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <utility>

namespace rvit {
namespace tr {

double lr_at(int step, int total_steps, double base_lr, double warmup_ratio) {
  if (total_steps <= 0) throw std::invalid_argument("lr_at: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("lr_at: step out of [0, total_steps]");
  }
  if (!(base_lr > 0) || !std::isfinite(base_lr)) {
    throw std::invalid_argument("lr_at: base_lr must be positive and finite");
  }
  if (!(warmup_ratio >= 0.0) || warmup_ratio >= 1.0) {
    throw std::invalid_argument("lr_at: warmup_ratio must be in [0, 1)");
  }
  int warm = static_cast<int>(std::llround(warmup_ratio * total_steps));
  if (warmup_ratio > 0.0 && warm == 0) warm = 1;
  if (warm > total_steps) warm = total_steps;
  if (step < warm) return base_lr * double(step + 1) / double(warm);
  if (total_steps == warm) return base_lr;
  const double progress = double(step - warm) / double(total_steps - warm);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---- configs ----

void OptimizerConfig::validate() const {
  if (name != "adamw") throw std::invalid_argument("unknown optimizer: " + name);
  if (!(lr > 0) || !std::isfinite(lr)) throw std::invalid_argument("optimizer lr must be > 0");
  if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  }
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = nlohmann::json{{"name", c.name},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c = OptimizerConfig{};
  c.name = j.value("name", c.name);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
}

void DiffusionConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("diffusion steps must be >= 1");
  const bool has_min = beta_min != 0.0, has_max = beta_max != 0.0;
  if (has_min != has_max) {
    throw std::invalid_argument("set both beta bounds or neither");
  }
  if (has_min && !(beta_min > 0 && beta_max > beta_min)) {
    throw std::invalid_argument("need 0 < beta_min < beta_max");
  }
}

BetaSchedule DiffusionConfig::build() const {
  validate();
  double lo = beta_min, hi = beta_max;
  if (lo == 0.0 && hi == 0.0) default_beta_bounds(kind, lo, hi);
  return make_beta_schedule(kind, steps, lo, hi);
}

void to_json(nlohmann::json& j, const DiffusionConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"steps", c.steps},
                     {"beta_min", c.beta_min},
                     {"beta_max", c.beta_max}};
}

void from_json(const nlohmann::json& j, DiffusionConfig& c) {
  c = DiffusionConfig{};
  if (j.contains("kind")) c.kind = schedule_kind_from_string(j.at("kind").get<std::string>());
  c.steps = j.value("steps", c.steps);
  c.beta_min = j.value("beta_min", c.beta_min);
  c.beta_max = j.value("beta_max", c.beta_max);
}

void TrainConfig::validate() const {
  objective.validate();
  model.validate();
  diffusion.validate();
  optimizer.validate();
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
  if (!(warmup_ratio >= 0.0) || warmup_ratio >= 1.0) {
    throw std::invalid_argument("warmup_ratio must be in [0, 1)");
  }
  if (lr_decay != "cosine") throw std::invalid_argument("unknown lr_decay: " + lr_decay);
  if (grad_clip < 0 || !std::isfinite(grad_clip)) {
    throw std::invalid_argument("grad_clip must be finite and >= 0");
  }
  if (eval_every < 0) throw std::invalid_argument("eval_every must be >= 0");
  if (eval_examples < 0) throw std::invalid_argument("eval_examples must be >= 0");
  if (!(stage1_fraction >= 0.0 && stage1_fraction <= 1.0)) {
    throw std::invalid_argument("stage1_fraction must be in [0, 1]");
  }
  if (tokenizer_fit_images < 2) {
    throw std::invalid_argument("tokenizer_fit_images must be >= 2");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"objective", c.objective},
                     {"model", c.model},
                     {"denoiser", c.denoiser},
                     {"diffusion", c.diffusion},
                     {"tokenizer", c.tokenizer},
                     {"tokenizer_fit_images", c.tokenizer_fit_images},
                     {"optimizer", c.optimizer},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"max_steps", c.max_steps},
                     {"warmup_ratio", c.warmup_ratio},
                     {"lr_decay", c.lr_decay},
                     {"grad_clip", c.grad_clip},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"eval_examples", c.eval_examples},
                     {"two_stage", c.two_stage},
                     {"stage1_fraction", c.stage1_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("objective")) j.at("objective").get_to(c.objective);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("denoiser")) j.at("denoiser").get_to(c.denoiser);
  if (j.contains("diffusion")) j.at("diffusion").get_to(c.diffusion);
  if (j.contains("tokenizer")) j.at("tokenizer").get_to(c.tokenizer);
  c.tokenizer_fit_images = j.value("tokenizer_fit_images", c.tokenizer_fit_images);
  if (j.contains("optimizer")) j.at("optimizer").get_to(c.optimizer);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_examples = j.value("eval_examples", c.eval_examples);
  c.two_stage = j.value("two_stage", c.two_stage);
  c.stage1_fraction = j.value("stage1_fraction", c.stage1_fraction);
}

void to_json(nlohmann::json& j, const EvalResult& r) {
  j = nlohmann::json{{"probe_accuracy", r.probe_accuracy},
                     {"text_loss", r.text_loss},
                     {"visual_loss", r.visual_loss},
                     {"n_rows", r.n_rows}};
}

// ---- trainer ----

namespace {

template <typename S>
AdamWConfig<S> adamw_config(const OptimizerConfig& o) {
  AdamWConfig<S> a;
  a.lr = static_cast<S>(o.lr);
  a.beta1 = static_cast<S>(o.beta1);
  a.beta2 = static_cast<S>(o.beta2);
  a.weight_decay = static_cast<S>(o.weight_decay);
  return a;
}

// Joint global-norm clip across several stores' gradient maps; store
// registration order fixes the summation order. Returns the pre-clip norm.
template <typename S>
double clip_joint(std::vector<std::pair<std::unordered_map<std::string, Tensor<S>>*,
                                        const ParamStore<S>*>>
                      parts,
                  double max_norm) {
  double sq = 0;
  for (auto& [grads, store] : parts) {
    for (const auto& name : store->names()) {
      auto it = grads->find(name);
      if (it == grads->end()) continue;
      const S* g = it->second.data();
      for (size_t i = 0; i < it->second.numel(); ++i) sq += double(g[i]) * double(g[i]);
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm && norm > 0) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto& [grads, store] : parts) {
      for (auto& [name, g] : *grads) g.scale_(scale);
    }
  }
  return norm;
}

int count_targets(const synth::TextRow& row) {
  int n = 0;
  for (bool b : row.target_mask) n += b ? 1 : 0;
  return n;
}

}  // namespace

template <typename S>
Trainer<S>::Trainer(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
}

template <typename S>
Trainer<S>::Trainer(const TrainConfig& cfg, const synth::Dataset& train) : Trainer(cfg) {
  attach_dataset(train);
  build_fresh(train);
}

template <typename S>
Trainer<S>::Trainer(Trainer&& o) noexcept
    : cfg_(std::move(o.cfg_)),
      train_(o.train_),
      examples_(std::move(o.examples_)),
      step_(o.step_),
      model_(std::move(o.model_)),
      objective_(std::move(o.objective_)),
      denoiser_(std::move(o.denoiser_)),
      teacher_(std::move(o.teacher_)),
      schedule_(std::move(o.schedule_)),
      standardizer_(std::move(o.standardizer_)),
      opt_model_(std::move(o.opt_model_)),
      opt_objective_(std::move(o.opt_objective_)),
      opt_denoiser_(std::move(o.opt_denoiser_)) {
  // The objective and denoiser stores sit behind pointers and did not move;
  // only the by-value model's store needs re-pointing.
  if (opt_model_) opt_model_->rebind(model_.params());
}

template <typename S>
bool Trainer<S>::visual_enabled() const {
  return cfg_.objective.kind != obj::RossKind::none && cfg_.objective.lambda_visual > 0;
}

template <typename S>
void Trainer<S>::attach_dataset(const synth::Dataset& train) {
  if (train.rows.empty()) throw std::invalid_argument("training split is empty");
  if (cfg_.model.vocab_size != train.vocab.size()) {
    throw std::invalid_argument("model vocab_size " + std::to_string(cfg_.model.vocab_size) +
                                " does not match dataset vocabulary " +
                                std::to_string(train.vocab.size()));
  }
  train_ = &train;
  examples_.clear();
  for (size_t r = 0; r < train.rows.size(); ++r) {
    examples_.push_back({r, -1});
    for (int q = 0; q < static_cast<int>(train.rows[r].qa.size()); ++q) {
      examples_.push_back({r, q});
    }
  }
}

template <typename S>
void Trainer<S>::build_fresh(const synth::Dataset& train) {
  model_ = mm::Model<S>(cfg_.model, cfg_.seed);

  const bool needs_teacher = cfg_.objective.kind != obj::RossKind::none;
  if (needs_teacher) {
    switch (cfg_.objective.tokenizer_kind) {
      case tok::TokenizerKind::patchify:
        teacher_ = std::make_unique<tok::Tokenizer<S>>(
            tok::make_patchify_tokenizer<S>(cfg_.tokenizer.downsample));
        break;
      case tok::TokenizerKind::frozen_feature:
        teacher_ = std::make_unique<tok::Tokenizer<S>>(tok::make_frozen_feature_tokenizer<S>(
            cfg_.tokenizer.seed, cfg_.tokenizer.d_lat, cfg_.tokenizer.downsample));
        break;
      case tok::TokenizerKind::latent_ae:
      case tok::TokenizerKind::vq: {
        tok::AeConfig ae = cfg_.tokenizer;
        ae.vq = cfg_.objective.tokenizer_kind == tok::TokenizerKind::vq;
        std::vector<Tensor<S>> images;
        const size_t n = std::min<size_t>(train.rows.size(), size_t(cfg_.tokenizer_fit_images));
        for (size_t i = 0; i < n; ++i) {
          images.push_back(train.rows[i].image.template cast<S>());
        }
        teacher_ =
            std::make_unique<tok::Tokenizer<S>>(tok::train_latent_autoencoder<S>(images, ae));
        break;
      }
    }
    const int image_size = cfg_.model.image_size;
    const bool gen = cfg_.objective.kind == obj::RossKind::generative;
    if (!gen && teacher_->n_tokens(image_size) != cfg_.model.n_visual()) {
      throw std::invalid_argument(
          "teacher token count " + std::to_string(teacher_->n_tokens(image_size)) +
          " does not match the model's visual outputs " + std::to_string(cfg_.model.n_visual()));
    }
  }

  objective_ = std::make_unique<obj::VisualObjective<S>>(
      cfg_.objective, cfg_.model.d_model,
      teacher_ ? teacher_->patch_size() : cfg_.model.patch_size,
      teacher_ ? teacher_->d_lat() : 0, cfg_.seed + 1);

  if (cfg_.objective.needs_diffusion()) {
    dn::DenoiserConfig dc = cfg_.denoiser;
    if (dc.d_lat == 0) dc.d_lat = teacher_->d_lat();
    if (dc.d_model != cfg_.model.d_model) {
      throw std::invalid_argument(
          "denoiser d_model must equal model d_model (the conditions are visual outputs)");
    }
    cfg_.denoiser = dc;
    denoiser_ = std::make_unique<dn::Denoiser<S>>(dc, cfg_.seed + 2);
    schedule_.emplace(cfg_.diffusion.build());

    std::vector<Tensor<S>> latents;
    const size_t n =
        std::min<size_t>(train.rows.size(), size_t(cfg_.tokenizer_fit_images));
    for (size_t i = 0; i < n; ++i) {
      Tensor<S> z = teacher_->encode(train.rows[i].image.template cast<S>()).z;
      if (cfg_.objective.kind == obj::RossKind::generative) {
        z = obj::pool_token_grid(z, cfg_.objective.query_count);
      }
      latents.push_back(std::move(z));
    }
    standardizer_.emplace(tok::Standardizer<S>::fit(latents));
  }

  const auto acfg = adamw_config<S>(cfg_.optimizer);
  opt_model_ = std::make_unique<AdamW<S>>(model_.params(), acfg);
  opt_objective_ = std::make_unique<AdamW<S>>(objective_->params(), acfg);
  if (denoiser_) opt_denoiser_ = std::make_unique<AdamW<S>>(denoiser_->params(), acfg);
}

template <typename S>
int Trainer<S>::steps_per_epoch() const {
  if (!train_) throw std::logic_error("trainer has no training dataset attached");
  const int b = cfg_.batch_size;
  return static_cast<int>((examples_.size() + b - 1) / b);
}

template <typename S>
int Trainer<S>::total_steps() const {
  const long long full = 1LL * steps_per_epoch() * cfg_.epochs;
  if (cfg_.max_steps > 0 && cfg_.max_steps < full) return cfg_.max_steps;
  return static_cast<int>(full);
}

template <typename S>
int Trainer<S>::stage1_steps() const {
  if (!cfg_.two_stage) return 0;
  return static_cast<int>(std::llround(cfg_.stage1_fraction * total_steps()));
}

template <typename S>
std::vector<size_t> Trainer<S>::epoch_order(int epoch) const {
  std::vector<size_t> order(examples_.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg_.seed, "train-shuffle", static_cast<uint64_t>(epoch));
  for (size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

template <typename S>
synth::TextRow Trainer<S>::example_row(const Example& ex) const {
  const synth::DatasetRow& row = train_->rows[ex.row];
  if (ex.qa < 0) return synth::make_caption_row(row.caption, train_->vocab);
  return synth::make_qa_row(row.qa[ex.qa], train_->vocab);
}

template <typename S>
const synth::DatasetRow& Trainer<S>::dataset_row(const Example& ex) const {
  return train_->rows[ex.row];
}

template <typename S>
StepStats Trainer<S>::train_step() {
  if (!train_) throw std::logic_error("trainer has no training dataset attached");
  if (done()) throw std::logic_error("training already complete");
  const auto t0 = std::chrono::steady_clock::now();

  const int s = step_;
  const int spe = steps_per_epoch();
  const int epoch = s / spe;
  const int bidx = s % spe;
  const auto order = epoch_order(epoch);
  const size_t begin = size_t(bidx) * size_t(cfg_.batch_size);
  const size_t end = std::min(begin + size_t(cfg_.batch_size), order.size());
  const size_t bsz = end - begin;

  std::vector<synth::TextRow> rows;
  rows.reserve(bsz);
  int total_targets = 0;
  for (size_t k = begin; k < end; ++k) {
    rows.push_back(example_row(examples_[order[k]]));
    total_targets += count_targets(rows.back());
  }

  const bool use_visual = visual_enabled();
  const bool gen = cfg_.objective.kind == obj::RossKind::generative;
  Binding<S> pm(model_.params());
  Binding<S> po(objective_->params());
  std::optional<Binding<S>> pd;
  if (denoiser_) pd.emplace(denoiser_->params());

  double text_mean = 0.0, visual_mean = 0.0;
  for (size_t k = 0; k < bsz; ++k) {
    const Example& ex = examples_[order[begin + k]];
    const synth::DatasetRow& drow = dataset_row(ex);
    const synth::TextRow& trow = rows[k];
    const Tensor<S> image = drow.image.template cast<S>();

    auto g = model_.forward_graph(pm, image, trow.ids);
    auto text = model_.text_loss_var(g, trow.ids, trow.target_mask);
    const double w_text = double(count_targets(trow)) / double(total_targets);
    text_mean += double(text->value.at(0)) * w_text;
    ag::Var<S> piece = ag::scale(text, static_cast<S>(w_text));

    if (use_visual) {
      Rng rng(cfg_.seed, "train-diff", static_cast<uint64_t>(s), static_cast<uint64_t>(k));
      ag::Var<S> vis;
      if (gen) {
        const auto ids = synth::make_caption_row(drow.caption, train_->vocab).ids;
        obj::DiffusionParts<S> parts{denoiser_->predictor(*pd), &*schedule_, &rng};
        vis = objective_->generative_loss(po, model_, pm, ids, image, *teacher_,
                                          &*standardizer_, parts);
      } else {
        std::optional<obj::DiffusionParts<S>> parts;
        if (denoiser_) parts.emplace(obj::DiffusionParts<S>{denoiser_->predictor(*pd),
                                                            &*schedule_, &rng});
        vis = objective_->visual_loss(po, g.visual, image, *teacher_,
                                      standardizer_ ? &*standardizer_ : nullptr,
                                      parts ? &*parts : nullptr);
      }
      visual_mean += double(vis->value.at(0)) / double(bsz);
      piece = ag::add(piece, ag::scale(vis, static_cast<S>(cfg_.objective.lambda_visual /
                                                           double(bsz))));
    }
    ag::backward(piece);
  }

  // The contract's non-finite gate: throws before any parameter moves, so
  // the in-memory state (and any checkpoint on disk) stays last-good.
  obj::combined_loss(text_mean, use_visual ? visual_mean : 0.0,
                     use_visual ? cfg_.objective.lambda_visual : 0.0);

  std::unordered_map<std::string, Tensor<S>> gm, go, gd;
  pm.harvest_grads(gm);
  po.harvest_grads(go);
  if (pd) pd->harvest_grads(gd);

  if (cfg_.two_stage && s < stage1_steps()) {
    for (auto it = gm.begin(); it != gm.end();) {
      if (it->first.rfind("dec.", 0) == 0) {
        it = gm.erase(it);
      } else {
        ++it;
      }
    }
  }

  std::vector<std::pair<std::unordered_map<std::string, Tensor<S>>*, const ParamStore<S>*>>
      parts{{&gm, &model_.params()}};
  parts.push_back({&go, &objective_->params()});
  if (denoiser_) parts.push_back({&gd, &denoiser_->params()});
  clip_joint<S>(parts, cfg_.grad_clip);

  const double lr = lr_at(s, total_steps(), cfg_.optimizer.lr, cfg_.warmup_ratio);
  opt_model_->step(gm, static_cast<S>(lr));
  opt_objective_->step(go, static_cast<S>(lr));
  if (opt_denoiser_) opt_denoiser_->step(gd, static_cast<S>(lr));
  ++step_;

  const auto t1 = std::chrono::steady_clock::now();
  StepStats st;
  st.step = step_;
  st.text_loss = text_mean;
  st.visual_loss = use_visual ? visual_mean : 0.0;
  st.lr = lr;
  st.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return st;
}

template <typename S>
EvalResult Trainer<S>::evaluate_split(const synth::Dataset& split, int cap) {
  if (split.rows.empty()) {
    throw std::invalid_argument("evaluation split '" + split.split + "' is empty");
  }
  if (cfg_.model.vocab_size != split.vocab.size()) {
    throw std::invalid_argument("split vocabulary does not match the model");
  }
  const size_t n = cap > 0 ? std::min(split.rows.size(), size_t(cap)) : split.rows.size();
  const bool use_visual = visual_enabled();
  const bool gen = cfg_.objective.kind == obj::RossKind::generative;

  ag::NoGradGuard ng;
  double text_sum = 0.0;
  long long target_total = 0;
  double visual_sum = 0.0;

  Binding<S> pm(model_.params());
  Binding<S> po(objective_->params());
  std::optional<Binding<S>> pd;
  if (denoiser_) pd.emplace(denoiser_->params());

  for (size_t i = 0; i < n; ++i) {
    const synth::DatasetRow& drow = split.rows[i];
    const Tensor<S> image = drow.image.template cast<S>();

    std::vector<synth::TextRow> rows;
    rows.push_back(synth::make_caption_row(drow.caption, split.vocab));
    for (const auto& qa : drow.qa) rows.push_back(synth::make_qa_row(qa, split.vocab));
    for (const auto& trow : rows) {
      auto g = model_.forward_graph(pm, image, trow.ids);
      auto text = model_.text_loss_var(g, trow.ids, trow.target_mask);
      const int c = count_targets(trow);
      text_sum += double(text->value.at(0)) * c;
      target_total += c;
    }

    if (use_visual) {
      Rng rng(cfg_.seed, "eval-diff", drow.index);
      if (gen) {
        const auto ids = synth::make_caption_row(drow.caption, split.vocab).ids;
        obj::DiffusionParts<S> parts{denoiser_->predictor(*pd), &*schedule_, &rng};
        auto vis = objective_->generative_loss(po, model_, pm, ids, image, *teacher_,
                                               &*standardizer_, parts);
        visual_sum += double(vis->value.at(0));
      } else {
        auto g = model_.forward_graph(pm, image, {split.vocab.bos()});
        std::optional<obj::DiffusionParts<S>> parts;
        if (denoiser_) parts.emplace(obj::DiffusionParts<S>{denoiser_->predictor(*pd),
                                                            &*schedule_, &rng});
        auto vis = objective_->visual_loss(po, g.visual, image, *teacher_,
                                           standardizer_ ? &*standardizer_ : nullptr,
                                           parts ? &*parts : nullptr);
        visual_sum += double(vis->value.at(0));
      }
    }
  }

  std::vector<synth::DatasetRow> capped;
  const std::vector<synth::DatasetRow>* probe_rows = &split.rows;
  if (n < split.rows.size()) {
    capped.assign(split.rows.begin(), split.rows.begin() + n);
    probe_rows = &capped;
  }
  const auto answer = [&](const Tensor<float>& image, const std::vector<int>& question) {
    std::vector<int> prompt;
    prompt.push_back(split.vocab.bos());
    prompt.insert(prompt.end(), question.begin(), question.end());
    prompt.push_back(split.vocab.sep());
    return model_.greedy_answer(image.template cast<S>(), prompt, split.vocab.answer_ids());
  };

  EvalResult r;
  r.probe_accuracy = synth::qa_accuracy(answer, *probe_rows);
  r.text_loss = target_total > 0 ? text_sum / double(target_total) : 0.0;
  r.visual_loss = use_visual ? visual_sum / double(n) : 0.0;
  r.n_rows = static_cast<int>(n);
  return r;
}

template <typename S>
void Trainer<S>::save_checkpoint(const std::string& path, const nlohmann::json& extra) const {
  CheckpointWriter w;
  w.meta()["format"] = "rvit-train";
  w.meta()["version"] = 1;
  w.meta()["config"] = cfg_;
  w.meta()["step"] = step_;
  w.meta()["has_teacher"] = bool(teacher_);
  w.meta()["has_denoiser"] = bool(denoiser_);
  w.meta()["has_standardizer"] = bool(standardizer_);
  model_.save_into(w, "model");
  objective_->save_into(w, "objective");
  if (denoiser_) denoiser_->save_into(w, "denoiser");
  if (teacher_) teacher_->save_into(w, "teacher");
  if (standardizer_) standardizer_->save(w, "std");
  opt_model_->save(w, "opt.model");
  opt_objective_->save(w, "opt.objective");
  if (opt_denoiser_) opt_denoiser_->save(w, "opt.denoiser");
  for (auto it = extra.begin(); it != extra.end(); ++it) w.meta()[it.key()] = it.value();
  w.save(path);
}

template <typename S>
Trainer<S> Trainer<S>::load_checkpoint(const std::string& path, const synth::Dataset* train) {
  const Checkpoint ck = Checkpoint::load(path);
  if (ck.meta().value("format", "") != "rvit-train") {
    throw std::runtime_error("not a training checkpoint: " + path);
  }
  if (ck.meta().at("version").get<int>() != 1) {
    throw std::runtime_error("unsupported training checkpoint version");
  }
  TrainConfig cfg = ck.meta().at("config").get<TrainConfig>();
  Trainer t(cfg);
  t.model_ = mm::Model<S>::load_from(ck, "model");
  t.objective_ =
      std::make_unique<obj::VisualObjective<S>>(obj::VisualObjective<S>::load_from(ck, "objective"));
  if (ck.meta().at("has_teacher").get<bool>()) {
    t.teacher_ = std::make_unique<tok::Tokenizer<S>>(tok::Tokenizer<S>::load_from(ck, "teacher"));
  }
  if (ck.meta().at("has_denoiser").get<bool>()) {
    t.denoiser_ = std::make_unique<dn::Denoiser<S>>(dn::Denoiser<S>::load_from(ck, "denoiser"));
    t.schedule_.emplace(t.cfg_.diffusion.build());
  }
  if (ck.meta().at("has_standardizer").get<bool>()) {
    t.standardizer_.emplace(tok::Standardizer<S>::load(ck, "std"));
  }
  const auto acfg = adamw_config<S>(t.cfg_.optimizer);
  t.opt_model_ = std::make_unique<AdamW<S>>(t.model_.params(), acfg);
  t.opt_model_->load(ck, "opt.model");
  t.opt_objective_ = std::make_unique<AdamW<S>>(t.objective_->params(), acfg);
  t.opt_objective_->load(ck, "opt.objective");
  if (t.denoiser_) {
    t.opt_denoiser_ = std::make_unique<AdamW<S>>(t.denoiser_->params(), acfg);
    t.opt_denoiser_->load(ck, "opt.denoiser");
  }
  t.step_ = ck.meta().at("step").get<int>();
  if (train) t.attach_dataset(*train);
  return t;
}

// ---- full loop ----

template <typename S>
EvalResult train(const TrainConfig& cfg, const synth::Dataset& train, const synth::Dataset* val,
                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "ckpt");
  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write metrics file: " + metrics_path);

  Trainer<S> t(cfg, train);
  while (!t.done()) {
    const StepStats st = t.train_step();
    nlohmann::json line{{"step", st.step},
                        {"text_loss", st.text_loss},
                        {"visual_loss", st.visual_loss},
                        {"lr", st.lr},
                        {"wall_ms", st.wall_ms}};
    metrics << line.dump() << "\n";
    metrics.flush();
    if (!metrics) throw std::runtime_error("metrics write failed: " + metrics_path);

    if (cfg.eval_every > 0 && val && st.step % cfg.eval_every == 0 && !t.done()) {
      const EvalResult er = t.evaluate_split(*val, cfg.eval_examples);
      nlohmann::json eline = er;
      eline["step"] = st.step;
      eline["event"] = "eval";
      metrics << eline.dump() << "\n";
      metrics.flush();
      char name[32];
      std::snprintf(name, sizeof(name), "step_%06d.ckpt", st.step);
      t.save_checkpoint((fs::path(out_dir) / "ckpt" / name).string(),
                        {{"val_probe_accuracy", er.probe_accuracy}});
    }
  }

  EvalResult final_eval{};
  nlohmann::json extra = nlohmann::json::object();
  if (val) {
    final_eval = t.evaluate_split(*val, cfg.eval_examples);
    nlohmann::json eline = final_eval;
    eline["step"] = t.step();
    eline["event"] = "eval_final";
    metrics << eline.dump() << "\n";
    metrics.flush();
    extra["val_probe_accuracy"] = final_eval.probe_accuracy;
  }
  t.save_checkpoint((fs::path(out_dir) / "ckpt" / "final.ckpt").string(), extra);
  return final_eval;
}

template <typename S>
EvalResult evaluate_checkpoint(const std::string& ckpt_path, const synth::Dataset& split,
                               int cap) {
  Trainer<S> t = Trainer<S>::load_checkpoint(ckpt_path, nullptr);
  return t.evaluate_split(split, cap);
}

// ---- explicit instantiations ----

template class Trainer<float>;
template class Trainer<double>;
template EvalResult train<float>(const TrainConfig&, const synth::Dataset&,
                                 const synth::Dataset*, const std::string&);
template EvalResult train<double>(const TrainConfig&, const synth::Dataset&,
                                  const synth::Dataset*, const std::string&);
template EvalResult evaluate_checkpoint<float>(const std::string&, const synth::Dataset&, int);
template EvalResult evaluate_checkpoint<double>(const std::string&, const synth::Dataset&, int);

}  // namespace tr
}  // namespace rvit
