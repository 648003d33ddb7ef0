#pragma once

// AdamW, schedule, clipping, pretraining, KL-regularized SFT, pairwise
// reward modelling and elastic weight consolidation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdlm/model.hpp"
#include "sdlm/rng.hpp"
#include "sdlm/tensor.hpp"

namespace sdlm {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double peak_lr = 6e-5;
  double floor_lr = 6e-6;
  std::size_t warmup_steps = 2000;
  std::size_t total_steps = 20000;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

/// Linear 0 -> peak over warmup, cosine peak -> floor at total_steps.
/// Steps outside [0, total_steps] are clamped to the endpoints.
double lr_schedule(std::size_t step, const OptimizerConfig& cfg);

/// Scales grads in place so the global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
double clip_grad_norm(std::vector<std::span<double>> grads, double max_norm);
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);
double global_grad_norm(const std::vector<Tensor>& params);

/// One AdamW update of a flat parameter block; step counts from 1.
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::size_t step, double lr, const OptimizerConfig& cfg, bool decay = true);

class AdamW {
 public:
  /// decay[i] selects decoupled weight decay for params[i]; empty means all.
  AdamW(std::vector<Tensor> params, OptimizerConfig cfg, std::vector<bool> decay = {});

  /// Applies one update from the parameters' accumulated gradients.
  void step(double lr);
  std::size_t steps_taken() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<bool> decay_;
  std::vector<std::vector<double>> m_, v_;
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
};

/// Weight matrices and embeddings decay; norms, biases and scalars do not.
std::vector<bool> decay_mask(const std::vector<std::pair<std::string, Tensor>>& named);

struct StepLog {
  std::size_t step = 0;
  double lr = 0, l_clm = 0, l_doctrine = 0, l_temporal = 0, total = 0, grad_norm = 0;
};

void write_step_log_csv(const std::filesystem::path& path, const std::vector<StepLog>& log);

struct PretrainConfig {
  OptimizerConfig opt;
  std::size_t steps = 1000;
  std::size_t batch_size = 1;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  double contrastive_weight = 0.0;
  std::uint64_t seed = 0;
};

struct SftConfig {
  double kl_weight = 0.02;
  std::string reference;  // checkpoint id of the frozen reference
};

struct EwcConfig {
  double lambda = 10.0;
  std::size_t samples = 256;
};

/// Everything a training run reads from its config file.
struct TrainingConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  SftConfig sft;
  EwcConfig ewc;
  std::size_t context = 128;
  std::size_t stride = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j);
  static TrainingConfig load(const std::filesystem::path& path);
};

/// Hex FNV-1a of the canonical JSON dump.
std::string config_hash(const nlohmann::json& j);

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  /// Called with (step, model) at checkpoint steps and after the last step.
  std::function<void(std::size_t, const SdlmModel&)> on_checkpoint;
};

/// Eq.-5 pretraining over randomly drawn windows. Deterministic given seed.
/// Throws DivergenceError on a non-finite loss or gradient.
std::vector<StepLog> pretrain(SdlmModel& model, const std::vector<PackedContext>& windows,
                              const PretrainConfig& cfg, const TrainHooks& hooks = {});

// ---------------------------------------------------------------------------
// Supervised fine-tuning

/// KL(p || q) of two discrete distributions.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct SftLoss {
  Tensor ce, kl, total;
};

/// CE + kl_weight * mean over positions of KL(current || reference).
SftLoss sft_loss(const SdlmModel& model, const SdlmModel& reference, const PackedContext& ctx, double kl_weight);

/// Mean token-level KL(current || reference) over windows (no graph).
double mean_kl_to_reference(const SdlmModel& model, const SdlmModel& reference,
                            const std::vector<PackedContext>& windows);

struct FinetuneConfig {
  OptimizerConfig opt;
  std::size_t steps = 200;
  std::uint64_t seed = 0;
};

std::vector<StepLog> sft_train(SdlmModel& model, const SdlmModel& reference, const std::vector<PackedContext>& windows,
                               const FinetuneConfig& cfg, double kl_weight);

// ---------------------------------------------------------------------------
// Reward model

struct PreferencePair {
  std::vector<int> prompt;
  std::vector<int> completion_a;
  std::vector<int> completion_b;
  bool chosen_a = true;

  void validate() const;
  std::vector<int> sequence(bool a) const;
};

/// -ln sigmoid(chosen - rejected).
Tensor reward_pref_loss(const Tensor& score_chosen, const Tensor& score_rejected);
double reward_pref_loss(double score_chosen, double score_rejected);

/// Toy transformer body plus a scalar head on the mean final hidden state.
class RewardModel {
 public:
  explicit RewardModel(const ModelConfig& cfg);

  Tensor score(const std::vector<int>& tokens) const;
  double score_value(const std::vector<int>& tokens) const;
  std::vector<Tensor> parameters() const;
  std::vector<bool> decay() const;

  SdlmModel body;
  Tensor head;  // d x 1
};

using Scorer = std::function<double(const std::vector<int>&)>;

/// Fraction of pairs where the chosen completion scores higher; ties count 0.5.
double reward_accuracy(const Scorer& scorer, const std::vector<PreferencePair>& pairs);
double reward_accuracy(const RewardModel& model, const std::vector<PreferencePair>& pairs);

std::vector<StepLog> reward_train(RewardModel& model, const std::vector<PreferencePair>& pairs,
                                  const FinetuneConfig& cfg);

std::vector<PreferencePair> read_preferences_jsonl(const std::filesystem::path& path);
void write_preferences_jsonl(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);

/// Pairs whose preference follows a hidden per-token utility: the completion
/// with the larger summed utility is chosen.
struct PlantedPreferences {
  std::vector<double> utility;  // per token id
  std::vector<PreferencePair> train, test;
};
PlantedPreferences planted_preferences(std::size_t vocab_size, std::size_t n_train, std::size_t n_test,
                                       std::size_t completion_len, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Elastic weight consolidation

/// Mean over samples of squared gradients of sample_nll(i) w.r.t. params.
std::vector<std::vector<double>> fisher_diag(const std::function<Tensor(std::size_t)>& sample_nll,
                                             const std::vector<Tensor>& params, std::size_t n_samples);
/// Per-window CLM loss as the sample likelihood, over the first n windows.
std::vector<std::vector<double>> fisher_diag(const SdlmModel& model, const std::vector<PackedContext>& windows,
                                             std::size_t n_samples);

struct EwcState {
  std::vector<std::vector<double>> anchor;
  std::vector<std::vector<double>> fisher;
  double lambda = 10.0;

  static EwcState capture(const std::vector<Tensor>& params, std::vector<std::vector<double>> fisher,
                          double lambda);
  void validate() const;
};

/// sum_i (lambda / 2) F_i (theta_i - anchor_i)^2
Tensor ewc_penalty(const std::vector<Tensor>& params, const EwcState& state);

/// CBOR; `meta` (e.g. provenance) is stored alongside and ignored on load.
void save_ewc_state(const std::filesystem::path& path, const EwcState& state, const nlohmann::json& meta = {});
EwcState load_ewc_state(const std::filesystem::path& path);

/// CLM fine-tuning, optionally anchored by an EWC penalty.
std::vector<StepLog> finetune(SdlmModel& model, const std::vector<PackedContext>& windows, const FinetuneConfig& cfg,
                              const EwcState* ewc = nullptr);

}  // namespace sdlm
