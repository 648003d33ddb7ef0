#include "sdlm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "sdlm/init.hpp"

namespace sdlm {

namespace {

void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void read_into(const nlohmann::json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void clear_grads(const std::vector<Tensor>& params) {
  for (const auto& p : params) p.node()->grad.clear();
}

struct StepLoss {
  Tensor total;
  double clm = 0, doctrine = 0, temporal = 0;
};

// Shared optimisation loop: steps are numbered from 1 and the schedule is
// evaluated at the step number.
std::vector<StepLog> run_loop(const std::vector<Tensor>& params, const std::vector<bool>& decay,
                              const OptimizerConfig& opt, std::size_t steps,
                              const std::function<StepLoss(std::size_t)>& loss_fn, const TrainHooks& hooks,
                              std::size_t checkpoint_every, const SdlmModel* model) {
  opt.validate();
  AdamW adam(params, opt, decay);
  std::vector<StepLog> log;
  for (std::size_t s = 1; s <= steps; ++s) {
    clear_grads(params);
    StepLoss l;
    try {
      l = loss_fn(s);
    } catch (const NumericError& e) {
      throw DivergenceError("training diverged at step " + std::to_string(s) + ": " + e.what());
    }
    const double total = l.total.item();
    if (!std::isfinite(total))
      throw DivergenceError("training diverged at step " + std::to_string(s) + ": total loss " +
                            std::to_string(total) + " (l_clm " + std::to_string(l.clm) + ")");
    try {
      backward(l.total);
    } catch (const NumericError& e) {
      throw DivergenceError("training diverged at step " + std::to_string(s) + ": " + e.what());
    }
    const double norm = clip_grad_norm(params, opt.clip_norm);
    if (!std::isfinite(norm))
      throw DivergenceError("training diverged at step " + std::to_string(s) + ": non-finite gradient norm");
    const double lr = lr_schedule(s, opt);
    adam.step(lr);
    StepLog e{s, lr, l.clm, l.doctrine, l.temporal, total, norm};
    log.push_back(e);
    if (hooks.on_step) hooks.on_step(e);
    if (model && hooks.on_checkpoint && ((checkpoint_every && s % checkpoint_every == 0) || s == steps))
      hooks.on_checkpoint(s, *model);
  }
  clear_grads(params);
  return log;
}

PackedContext plain_context(const std::vector<int>& tokens) {
  PackedContext c;
  c.tokens = tokens;
  c.targets.assign(tokens.size(), 0);
  c.doc_index.assign(tokens.size(), 0);
  c.days.assign(tokens.size(), 0.0);
  c.domains.assign(tokens.size(), Domain::land);
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Optimizer

void OptimizerConfig::validate() const {
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
    throw ConfigError("optimizer: betas must lie in (0, 1)");
  if (!(floor_lr > 0.0) || !(peak_lr >= floor_lr)) throw ConfigError("optimizer: need peak_lr >= floor_lr > 0");
  if (warmup_steps >= total_steps) throw ConfigError("optimizer: warmup_steps must be below total_steps");
  if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be non-negative");
  if (!(adam_eps > 0.0)) throw ConfigError("optimizer: adam_eps must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("optimizer: clip_norm must be positive");
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"beta1", beta1},       {"beta2", beta2},          {"weight_decay", weight_decay},
          {"peak_lr", peak_lr},   {"floor_lr", floor_lr},    {"warmup_steps", warmup_steps},
          {"total_steps", total_steps}, {"adam_eps", adam_eps}, {"clip_norm", clip_norm}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  const std::string w = "optimizer";
  reject_unknown(j, {"beta1", "beta2", "weight_decay", "peak_lr", "floor_lr", "warmup_steps", "total_steps",
                     "adam_eps", "clip_norm"},
                 w);
  OptimizerConfig c;
  read_into(j, "beta1", c.beta1, w);
  read_into(j, "beta2", c.beta2, w);
  read_into(j, "weight_decay", c.weight_decay, w);
  read_into(j, "peak_lr", c.peak_lr, w);
  read_into(j, "floor_lr", c.floor_lr, w);
  read_into(j, "warmup_steps", c.warmup_steps, w);
  read_into(j, "total_steps", c.total_steps, w);
  read_into(j, "adam_eps", c.adam_eps, w);
  read_into(j, "clip_norm", c.clip_norm, w);
  c.validate();
  return c;
}

double lr_schedule(std::size_t step, const OptimizerConfig& cfg) {
  step = std::min(step, cfg.total_steps);
  if (step <= cfg.warmup_steps) {
    if (cfg.warmup_steps == 0) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(std::vector<std::span<double>> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (auto g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto g : grads)
      for (double& v : g) v *= s;
  }
  return norm;
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  std::vector<std::span<double>> g;
  for (const auto& p : params) g.emplace_back(p.node()->grad);
  return clip_grad_norm(std::move(g), max_norm);
}

double global_grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double v : p.node()->grad) sq += v * v;
  return std::sqrt(sq);
}

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::size_t step, double lr, const OptimizerConfig& cfg, bool decay) {
  if (step < 1) throw ContractError("adamw_update: step counts from 1");
  if (m.size() != theta.size() || v.size() != theta.size() || (!grad.empty() && grad.size() != theta.size()))
    throw DimensionError("adamw_update: parameter, gradient and moment sizes differ");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    if (decay) theta[i] -= lr * cfg.weight_decay * theta[i];
    theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
  }
}

AdamW::AdamW(std::vector<Tensor> params, OptimizerConfig cfg, std::vector<bool> decay)
    : params_(std::move(params)), decay_(std::move(decay)), cfg_(cfg) {
  cfg_.validate();
  if (decay_.empty()) decay_.assign(params_.size(), true);
  if (decay_.size() != params_.size()) throw DimensionError("AdamW: decay mask length differs from parameters");
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i)
    adamw_update(params_[i].mutable_data(), params_[i].node()->grad, m_[i], v_[i], t_, lr, cfg_, decay_[i]);
}

std::vector<bool> decay_mask(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<bool> out;
  for (const auto& [name, t] : named) {
    const auto dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    out.push_back(name == "tok_emb" || name == "doc_proj" || (!leaf.empty() && leaf[0] == 'W'));
  }
  return out;
}

void write_step_log_csv(const std::filesystem::path& path, const std::vector<StepLog>& log) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path.string());
  f.precision(17);
  f << "step,lr,l_clm,l_doctrine,l_temporal,total,grad_norm\n";
  for (const auto& e : log)
    f << e.step << ',' << e.lr << ',' << e.l_clm << ',' << e.l_doctrine << ',' << e.l_temporal << ',' << e.total
      << ',' << e.grad_norm << '\n';
}

// ---------------------------------------------------------------------------
// Config

void TrainingConfig::validate() const {
  model.validate();
  pretrain.opt.validate();
  if (pretrain.steps < 1) throw ConfigError("pretrain.steps must be at least 1");
  if (pretrain.batch_size < 1) throw ConfigError("pretrain.batch_size must be at least 1");
  if (pretrain.contrastive_weight < 0.0) throw ConfigError("pretrain.contrastive_weight must be non-negative");
  if (sft.kl_weight < 0.0) throw ConfigError("sft.kl_weight must be non-negative");
  if (ewc.lambda < 0.0) throw ConfigError("ewc.lambda must be non-negative");
  if (ewc.samples < 1) throw ConfigError("ewc.samples must be at least 1");
  if (context < 1 || context > model.max_context) throw ConfigError("data.context must lie in [1, max_context]");
  if (stride < 1) throw ConfigError("data.stride must be at least 1");
}

nlohmann::json TrainingConfig::to_json() const {
  return {{"model", model.to_json()},
          {"optimizer", pretrain.opt.to_json()},
          {"pretrain",
           {{"steps", pretrain.steps},
            {"batch_size", pretrain.batch_size},
            {"checkpoint_every", pretrain.checkpoint_every},
            {"contrastive_weight", pretrain.contrastive_weight},
            {"seed", pretrain.seed}}},
          {"sft", {{"kl_weight", sft.kl_weight}, {"reference", sft.reference}}},
          {"ewc", {{"lambda", ewc.lambda}, {"samples", ewc.samples}}},
          {"data", {{"context", context}, {"stride", stride}}}};
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"model", "optimizer", "pretrain", "sft", "ewc", "data"}, "config");
  TrainingConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("optimizer")) c.pretrain.opt = OptimizerConfig::from_json(j.at("optimizer"));
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    reject_unknown(p, {"steps", "batch_size", "checkpoint_every", "contrastive_weight", "seed"}, "pretrain");
    read_into(p, "steps", c.pretrain.steps, "pretrain");
    read_into(p, "batch_size", c.pretrain.batch_size, "pretrain");
    read_into(p, "checkpoint_every", c.pretrain.checkpoint_every, "pretrain");
    read_into(p, "contrastive_weight", c.pretrain.contrastive_weight, "pretrain");
    read_into(p, "seed", c.pretrain.seed, "pretrain");
  }
  if (j.contains("sft")) {
    const auto& s = j.at("sft");
    reject_unknown(s, {"kl_weight", "reference"}, "sft");
    read_into(s, "kl_weight", c.sft.kl_weight, "sft");
    read_into(s, "reference", c.sft.reference, "sft");
  }
  if (j.contains("ewc")) {
    const auto& e = j.at("ewc");
    reject_unknown(e, {"lambda", "samples"}, "ewc");
    read_into(e, "lambda", c.ewc.lambda, "ewc");
    read_into(e, "samples", c.ewc.samples, "ewc");
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"context", "stride"}, "data");
    read_into(d, "context", c.context, "data");
    read_into(d, "stride", c.stride, "data");
  }
  c.validate();
  return c;
}

TrainingConfig TrainingConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(s.data(), s.size())));
  return buf;
}

// ---------------------------------------------------------------------------
// Pretraining

std::vector<StepLog> pretrain(SdlmModel& model, const std::vector<PackedContext>& windows, const PretrainConfig& cfg,
                              const TrainHooks& hooks) {
  if (windows.empty()) throw InputError("pretrain: no training windows");
  if (cfg.batch_size < 1) throw ConfigError("pretrain: batch_size must be at least 1");
  if (cfg.contrastive_weight < 0.0) throw ConfigError("pretrain: contrastive_weight must be non-negative");
  Rng rng(cfg.seed);
  const auto named = model.named_parameters();
  std::vector<Tensor> params;
  for (const auto& [n, t] : named) params.push_back(t);
  const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);

  auto loss_fn = [&](std::size_t) {
    StepLoss out;
    std::vector<AttentionOutput> att;
    std::vector<bool> multi;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& w = windows[rng.below(windows.size())];
      auto fwd = model.forward(w);
      auto lb = model.total_loss(w, fwd);
      out.total = out.total.defined() ? add(out.total, scale(lb.total, inv_b)) : scale(lb.total, inv_b);
      out.clm += lb.clm() * inv_b;
      out.doctrine += lb.doctrine() * inv_b;
      out.temporal += lb.temporal() * inv_b;
      if (cfg.contrastive_weight > 0.0) {
        att.push_back({Tensor(), Tensor(), fwd.layers.front().cross_doc_mass});
        multi.push_back(w.num_docs() > 1);
      }
    }
    const bool two_sided = std::find(multi.begin(), multi.end(), true) != multi.end() &&
                           std::find(multi.begin(), multi.end(), false) != multi.end();
    if (cfg.contrastive_weight > 0.0 && two_sided)
      out.total = add(out.total, scale(cross_doc_contrastive_loss(att, multi), cfg.contrastive_weight));
    return out;
  };
  return run_loop(params, decay_mask(named), cfg.opt, cfg.steps, loss_fn, hooks, cfg.checkpoint_every, &model);
}

// ---------------------------------------------------------------------------
// SFT

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("kl_divergence: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return INFINITY;
    s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

SftLoss sft_loss(const SdlmModel& model, const SdlmModel& reference, const PackedContext& ctx, double kl_weight) {
  if (kl_weight < 0.0) throw ConfigError("sft: kl_weight must be non-negative");
  if (model.config().vocab_size != reference.config().vocab_size)
    throw ConfigError("sft: reference vocabulary size differs from the model's");
  Tensor ref_lp;
  {
    NoGradGuard guard;
    ref_lp = log_softmax_rows(reference.forward(ctx).logits).detach();
  }
  auto logits = model.forward(ctx).logits;
  SftLoss l;
  l.ce = cross_entropy(logits, ctx.targets);
  auto lp = log_softmax_rows(logits);
  l.kl = scale(sum(mul(exp(lp), sub(lp, ref_lp))), 1.0 / static_cast<double>(ctx.size()));
  l.total = kl_weight == 0.0 ? l.ce : add(l.ce, scale(l.kl, kl_weight));
  return l;
}

double mean_kl_to_reference(const SdlmModel& model, const SdlmModel& reference,
                            const std::vector<PackedContext>& windows) {
  if (windows.empty()) throw InputError("mean_kl_to_reference: no windows");
  NoGradGuard guard;
  double s = 0.0;
  for (const auto& w : windows) s += sft_loss(model, reference, w, 0.0).kl.item();
  return s / static_cast<double>(windows.size());
}

std::vector<StepLog> sft_train(SdlmModel& model, const SdlmModel& reference, const std::vector<PackedContext>& windows,
                               const FinetuneConfig& cfg, double kl_weight) {
  if (windows.empty()) throw InputError("sft: no windows");
  Rng rng(cfg.seed);
  const auto named = model.named_parameters();
  std::vector<Tensor> params;
  for (const auto& [n, t] : named) params.push_back(t);
  auto loss_fn = [&](std::size_t) {
    auto l = sft_loss(model, reference, windows[rng.below(windows.size())], kl_weight);
    return StepLoss{l.total, l.ce.item(), 0.0, 0.0};
  };
  return run_loop(params, decay_mask(named), cfg.opt, cfg.steps, loss_fn, {}, 0, nullptr);
}

// ---------------------------------------------------------------------------
// Reward model

void PreferencePair::validate() const {
  if (completion_a.empty() || completion_b.empty()) throw InputError("preference pair: empty completion");
}

std::vector<int> PreferencePair::sequence(bool a) const {
  std::vector<int> s = prompt;
  const auto& c = a ? completion_a : completion_b;
  s.insert(s.end(), c.begin(), c.end());
  return s;
}

Tensor reward_pref_loss(const Tensor& score_chosen, const Tensor& score_rejected) {
  return softplus(sub(score_rejected, score_chosen));
}

double reward_pref_loss(double score_chosen, double score_rejected) {
  const double x = score_rejected - score_chosen;
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

RewardModel::RewardModel(const ModelConfig& cfg) : body(cfg) {
  Rng rng(cfg.seed ^ 0x5eedULL);
  head = normal_param(cfg.d_model, 1, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
}

Tensor RewardModel::score(const std::vector<int>& tokens) const {
  return matmul(mean_rows(body.forward(plain_context(tokens)).hidden), head);
}

double RewardModel::score_value(const std::vector<int>& tokens) const {
  NoGradGuard guard;
  return score(tokens).item();
}

std::vector<Tensor> RewardModel::parameters() const {
  auto p = body.parameters();
  p.push_back(head);
  return p;
}

std::vector<bool> RewardModel::decay() const {
  auto d = decay_mask(body.named_parameters());
  d.push_back(true);
  return d;
}

double reward_accuracy(const Scorer& scorer, const std::vector<PreferencePair>& pairs) {
  if (pairs.empty()) throw InputError("reward_accuracy: no pairs");
  double hits = 0.0;
  for (const auto& p : pairs) {
    p.validate();
    const double a = scorer(p.sequence(true)), b = scorer(p.sequence(false));
    const double chosen = p.chosen_a ? a : b, rejected = p.chosen_a ? b : a;
    hits += chosen > rejected ? 1.0 : chosen == rejected ? 0.5 : 0.0;
  }
  return hits / static_cast<double>(pairs.size());
}

double reward_accuracy(const RewardModel& model, const std::vector<PreferencePair>& pairs) {
  return reward_accuracy([&](const std::vector<int>& t) { return model.score_value(t); }, pairs);
}

std::vector<StepLog> reward_train(RewardModel& model, const std::vector<PreferencePair>& pairs,
                                  const FinetuneConfig& cfg) {
  if (pairs.empty()) throw InputError("reward_train: no pairs");
  for (const auto& p : pairs) p.validate();
  Rng rng(cfg.seed);
  auto loss_fn = [&](std::size_t) {
    const auto& p = pairs[rng.below(pairs.size())];
    auto a = model.score(p.sequence(true)), b = model.score(p.sequence(false));
    auto l = p.chosen_a ? reward_pref_loss(a, b) : reward_pref_loss(b, a);
    return StepLoss{l, l.item(), 0.0, 0.0};
  };
  return run_loop(model.parameters(), model.decay(), cfg.opt, cfg.steps, loss_fn, {}, 0, nullptr);
}

std::vector<PreferencePair> read_preferences_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read " + path.string());
  std::vector<PreferencePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      PreferencePair p;
      p.prompt = j.at("prompt").get<std::vector<int>>();
      p.completion_a = j.at("completion_a").get<std::vector<int>>();
      p.completion_b = j.at("completion_b").get<std::vector<int>>();
      const auto c = j.at("chosen").get<std::string>();
      if (c != "a" && c != "b") throw InputError("chosen must be \"a\" or \"b\"");
      p.chosen_a = c == "a";
      p.validate();
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_preferences_jsonl(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path.string());
  for (const auto& p : pairs)
    f << nlohmann::json{{"prompt", p.prompt},
                        {"completion_a", p.completion_a},
                        {"completion_b", p.completion_b},
                        {"chosen", p.chosen_a ? "a" : "b"}}
                .dump()
      << '\n';
}

PlantedPreferences planted_preferences(std::size_t vocab_size, std::size_t n_train, std::size_t n_test,
                                       std::size_t completion_len, std::uint64_t seed) {
  if (vocab_size < 4 || completion_len < 1) throw ConfigError("planted_preferences: vocabulary or length too small");
  Rng rng(seed);
  PlantedPreferences out;
  out.utility.assign(vocab_size, 0.0);
  for (std::size_t v = 2; v < vocab_size; ++v) out.utility[v] = rng.normal();
  auto draw = [&](std::size_t n) {
    std::vector<int> t(n);
    for (auto& x : t) x = 2 + static_cast<int>(rng.below(vocab_size - 2));
    return t;
  };
  auto utility = [&](const std::vector<int>& t) {
    double s = 0.0;
    for (int x : t) s += out.utility[static_cast<std::size_t>(x)];
    return s;
  };
  auto make = [&](std::size_t n, std::vector<PreferencePair>& dst) {
    while (dst.size() < n) {
      PreferencePair p{draw(4), draw(completion_len), draw(completion_len), true};
      const double ua = utility(p.completion_a), ub = utility(p.completion_b);
      if (ua == ub) continue;
      p.chosen_a = ua > ub;
      dst.push_back(std::move(p));
    }
  };
  make(n_train, out.train);
  make(n_test, out.test);
  return out;
}

// ---------------------------------------------------------------------------
// EWC

std::vector<std::vector<double>> fisher_diag(const std::function<Tensor(std::size_t)>& sample_nll,
                                             const std::vector<Tensor>& params, std::size_t n_samples) {
  if (n_samples < 1) throw InputError("fisher_diag: need at least one sample");
  std::vector<std::vector<double>> f;
  for (const auto& p : params) f.emplace_back(p.numel(), 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    clear_grads(params);
    backward(sample_nll(s));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& g = params[i].node()->grad;
      for (std::size_t k = 0; k < g.size(); ++k) f[i][k] += g[k] * g[k];
    }
  }
  clear_grads(params);
  for (auto& v : f)
    for (auto& x : v) x /= static_cast<double>(n_samples);
  return f;
}

std::vector<std::vector<double>> fisher_diag(const SdlmModel& model, const std::vector<PackedContext>& windows,
                                             std::size_t n_samples) {
  if (windows.empty()) throw InputError("fisher_diag: no data");
  const std::size_t n = std::min(n_samples, windows.size());
  return fisher_diag([&](std::size_t i) { return cross_entropy(model.forward(windows[i]).logits, windows[i].targets); },
                     model.parameters(), n);
}

EwcState EwcState::capture(const std::vector<Tensor>& params, std::vector<std::vector<double>> fisher,
                           double lambda) {
  EwcState s;
  for (const auto& p : params) s.anchor.emplace_back(p.data().begin(), p.data().end());
  s.fisher = std::move(fisher);
  s.lambda = lambda;
  s.validate();
  return s;
}

void EwcState::validate() const {
  if (lambda < 0.0) throw ConfigError("ewc: lambda must be non-negative");
  if (anchor.size() != fisher.size()) throw DimensionError("ewc: anchor and Fisher counts differ");
  for (std::size_t i = 0; i < anchor.size(); ++i) {
    if (anchor[i].size() != fisher[i].size()) throw DimensionError("ewc: anchor and Fisher shapes differ");
    for (double f : fisher[i])
      if (!(f >= 0.0)) throw NumericError("ewc: Fisher entries must be non-negative");
  }
}

Tensor ewc_penalty(const std::vector<Tensor>& params, const EwcState& state) {
  if (params.size() != state.anchor.size()) throw DimensionError("ewc_penalty: parameter count differs from anchor");
  Tensor acc;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.numel() != state.anchor[i].size()) throw DimensionError("ewc_penalty: parameter shape differs from anchor");
    Tensor anchor(p.shape(), state.anchor[i]);
    Tensor f(p.shape(), state.fisher[i]);
    Tensor term = sum(mul(f, square(sub(p, anchor))));
    acc = acc.defined() ? add(acc, term) : term;
  }
  if (!acc.defined()) return Tensor::scalar(0.0);
  return scale(acc, state.lambda / 2.0);
}

void save_ewc_state(const std::filesystem::path& path, const EwcState& state, const nlohmann::json& meta) {
  nlohmann::json j{{"lambda", state.lambda}, {"anchor", state.anchor}, {"fisher", state.fisher}};
  if (!meta.is_null()) j["meta"] = meta;
  const auto bytes = nlohmann::json::to_cbor(j);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

EwcState load_ewc_state(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    auto j = nlohmann::json::from_cbor(bytes);
    EwcState s;
    s.lambda = j.at("lambda").get<double>();
    s.anchor = j.at("anchor").get<std::vector<std::vector<double>>>();
    s.fisher = j.at("fisher").get<std::vector<std::vector<double>>>();
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::vector<StepLog> finetune(SdlmModel& model, const std::vector<PackedContext>& windows, const FinetuneConfig& cfg,
                              const EwcState* ewc) {
  if (windows.empty()) throw InputError("finetune: no windows");
  Rng rng(cfg.seed);
  const auto named = model.named_parameters();
  std::vector<Tensor> params;
  for (const auto& [n, t] : named) params.push_back(t);
  if (ewc) ewc->validate();
  auto loss_fn = [&](std::size_t) {
    const auto& w = windows[rng.below(windows.size())];
    Tensor ce = cross_entropy(model.forward(w).logits, w.targets);
    Tensor total = ewc ? add(ce, ewc_penalty(params, *ewc)) : ce;
    return StepLoss{total, ce.item(), 0.0, 0.0};
  };
  return run_loop(params, decay_mask(named), cfg.opt, cfg.steps, loss_fn, {}, 0, nullptr);
}

}  // namespace sdlm
