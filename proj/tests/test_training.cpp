#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "sdlm/training.hpp"

using namespace sdlm;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 0) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 16;
  c.vocab_size = 12;
  c.max_context = 32;
  c.seed = seed;
  return c;
}

// Repeating pattern with a little noise: easy to learn.
std::vector<PackedContext> pattern_windows(std::uint64_t seed, std::size_t n = 12) {
  Rng rng(seed);
  std::vector<DocumentSegment> segs;
  for (std::size_t i = 0; i < n; ++i) {
    DocumentSegment s;
    s.doc_id = "d" + std::to_string(i);
    s.domain = kAllDomains[i % kNumDomains];
    s.temporal_index = static_cast<std::int64_t>(rng.below(3000));
    for (int k = 0; k < 10; ++k) s.tokens.push_back(2 + (k % 5) * 2 + (rng.bernoulli(0.1) ? 1 : 0));
    segs.push_back(std::move(s));
  }
  return make_windows(build_stream(segs), 16, 8);
}

OptimizerConfig fast_opt(std::size_t steps) {
  OptimizerConfig o;
  o.peak_lr = 1e-2;
  o.floor_lr = 1e-3;
  o.warmup_steps = steps / 10;
  o.total_steps = steps;
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  OptimizerConfig c;
  c.total_steps = 20000;
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK(lr_schedule(1000, c) == doctest::Approx(3e-5).epsilon(1e-12));
  CHECK(lr_schedule(2000, c) == 6e-5);
  CHECK(lr_schedule(20000, c) == 6e-6);
  CHECK(lr_schedule(11000, c) == 3.3e-5);
  CHECK(lr_schedule(50000, c) == 6e-6);
  double prev = lr_schedule(2000, c);
  for (std::size_t s = 2001; s <= 20000; s += 37) {
    const double lr = lr_schedule(s, c);
    CHECK(lr <= prev);
    prev = lr;
  }
  c.warmup_steps = 0;
  CHECK(lr_schedule(0, c) == 6e-5);
}

TEST_CASE("optimizer config validation and json") {
  OptimizerConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(OptimizerConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(OptimizerConfig::from_json({{"beta1", 1.0}}), ConfigError);
  CHECK_THROWS_AS(OptimizerConfig::from_json({{"peak_lr", 1e-6}}), ConfigError);
  CHECK_THROWS_AS(OptimizerConfig::from_json({{"warmup_steps", 20000}}), ConfigError);
  CHECK_THROWS_AS(OptimizerConfig::from_json({{"lr", 1.0}}), ConfigError);

  TrainingConfig t;
  t.context = 64;
  auto back = TrainingConfig::from_json(t.to_json());
  CHECK(back.to_json() == t.to_json());
  CHECK(config_hash(back.to_json()) == config_hash(t.to_json()));
  CHECK(config_hash(back.to_json()).size() == 16);
  CHECK_THROWS_AS(TrainingConfig::from_json({{"sft", {{"kl_weight", -1.0}}}}), ConfigError);
  CHECK_THROWS_AS(TrainingConfig::from_json({{"data", {{"context", 100000}}}}), ConfigError);
  CHECK_THROWS_AS(TrainingConfig::from_json({{"extra", 1}}), ConfigError);
  CHECK_THROWS_AS(TrainingConfig::load("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("gradient clipping") {
  std::vector<double> a{0.3, 0.4};
  CHECK(clip_grad_norm({std::span<double>(a)}, 1.0) == doctest::Approx(0.5));
  CHECK(a == std::vector<double>{0.3, 0.4});

  std::vector<double> b{1.2, 1.6};
  CHECK(clip_grad_norm({std::span<double>(b)}, 1.0) == doctest::Approx(2.0));
  CHECK(b[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(b[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(std::abs(std::hypot(b[0], b[1]) - 1.0) <= 1e-12);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> gs(1 + rng.below(4));
    std::vector<double> flat;
    for (auto& g : gs) {
      g.resize(1 + rng.below(7));
      for (auto& v : g) flat.push_back(v = rng.normal() * 2);
    }
    double sq = 0;
    for (double v : flat) sq += v * v;
    const double max_norm = 0.5 + rng.uniform() * 3;
    std::vector<std::span<double>> spans(gs.begin(), gs.end());
    CHECK(clip_grad_norm(spans, max_norm) == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
    double post = 0;
    for (auto& g : gs)
      for (double v : g) post += v * v;
    CHECK(std::abs(std::sqrt(post) - std::min(std::sqrt(sq), max_norm)) <= 1e-12);
  }
  CHECK_THROWS_AS(clip_grad_norm({std::span<double>(a)}, 0.0), ConfigError);
}

TEST_CASE("adamw update") {
  OptimizerConfig c;
  c.weight_decay = 0.0;
  std::vector<double> th{1.0, -2.0, 3.0}, m(3, 0.0), v(3, 0.0), z(3, 0.0);
  adamw_update(th, z, m, v, 1, 1e-3, c);
  CHECK(th == std::vector<double>{1.0, -2.0, 3.0});

  c.weight_decay = 0.1;
  const double lr = 1e-2;
  adamw_update(th, z, m, v, 2, lr, c);
  CHECK(th[0] == 1.0 - lr * 0.1 * 1.0);
  CHECK(th[1] == -2.0 - lr * 0.1 * -2.0);

  c.weight_decay = 0.0;
  std::vector<double> t2{0.5, 0.5, 0.5}, g{0.2, -3.0, 1e-3}, m2(3, 0.0), v2(3, 0.0);
  adamw_update(t2, g, m2, v2, 1, lr, c);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::abs(t2[i] - (0.5 - lr * g[i] / (std::abs(g[i]) + c.adam_eps))) <= 1e-12);

  std::vector<double> bad(2);
  CHECK_THROWS_AS(adamw_update(t2, bad, m2, v2, 2, lr, c), DimensionError);
  CHECK_THROWS_AS(adamw_update(t2, g, m2, v2, 0, lr, c), ContractError);
}

TEST_CASE("decay mask and step log csv") {
  SdlmModel m(tiny_config());
  auto named = m.named_parameters();
  auto mask = decay_mask(named);
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& n = named[i].first;
    const bool expect = n == "tok_emb" || n.find(".W") != std::string::npos || n == "doc_proj";
    CHECK(mask[i] == expect);
  }
  const auto p = std::filesystem::temp_directory_path() / "sdlm_steplog.csv";
  write_step_log_csv(p, {{1, 0.1, 2.0, 0.5, 0.25, 2.06, 1.5}});
  std::ifstream f(p);
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  CHECK(header == "step,lr,l_clm,l_doctrine,l_temporal,total,grad_norm");
  CHECK(row.rfind("1,0.1", 0) == 0);
  std::filesystem::remove(p);
}

TEST_CASE("pretraining reduces loss, logs components and is deterministic") {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SdlmModel m(tiny_config(seed));
    PretrainConfig pc;
    pc.opt = fast_opt(200);
    pc.steps = 200;
    pc.seed = seed;
    auto w = pattern_windows(seed);
    const double before = evaluate_perplexity(m, w);
    auto log = pretrain(m, w, pc);
    REQUIRE(log.size() == 200);
    wins += evaluate_perplexity(m, w) < before && log.back().l_clm < log.front().l_clm;
    for (const auto& e : log) CHECK(std::abs(e.total - (e.l_clm + 0.15 * e.l_doctrine + 0.08 * e.l_temporal)) <= 1e-12);
  }
  CHECK(wins >= 2);

  auto cfg = tiny_config(4);
  cfg.lambda_doc = cfg.lambda_temp = 0.0;
  const auto dir = std::filesystem::temp_directory_path() / "sdlm_pretrain_test";
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  for (int run = 0; run < 2; ++run) {
    SdlmModel m(cfg);
    PretrainConfig pc;
    pc.opt = fast_opt(40);
    pc.steps = 40;
    pc.checkpoint_every = 20;
    pc.seed = 9;
    std::vector<std::size_t> ck;
    TrainHooks hooks;
    hooks.on_checkpoint = [&](std::size_t s, const SdlmModel& mm) {
      ck.push_back(s);
      save_checkpoint(dir / ("run" + std::to_string(run) + ".ckpt"), mm, {9, "h", "test", s});
    };
    auto log = pretrain(m, pattern_windows(1), pc, hooks);
    CHECK(ck == std::vector<std::size_t>{20, 40});
    for (const auto& e : log) CHECK(e.total == e.l_clm);
    files.push_back(slurp(dir / ("run" + std::to_string(run) + ".ckpt")));
  }
  CHECK(files[0] == files[1]);
  CHECK(checkpoint_checksum(dir / "run0.ckpt") == checkpoint_checksum(dir / "run1.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("contrastive term and divergence") {
  SdlmModel m(tiny_config(2));
  PretrainConfig pc;
  pc.opt = fast_opt(20);
  pc.steps = 20;
  pc.batch_size = 4;
  pc.contrastive_weight = 0.5;
  const double bc = m.mask.b_cross.item();
  CHECK_NOTHROW(pretrain(m, pattern_windows(3), pc));
  CHECK(m.mask.b_cross.item() != bc);

  SdlmModel bad(tiny_config(2));
  bad.blocks[0].W1.at(0, 0) = std::nan("");
  CHECK_THROWS_AS(pretrain(bad, pattern_windows(3), pc), DivergenceError);
  CHECK_THROWS_AS(pretrain(m, {}, pc), InputError);
}

TEST_CASE("KL divergence and SFT loss") {
  const double p[] = {0.8, 0.2}, q[] = {0.5, 0.5};
  CHECK(kl_divergence(p, q) == doctest::Approx(0.8 * std::log(1.6) + 0.2 * std::log(0.4)).epsilon(1e-14));
  CHECK(kl_divergence(p, q) == doctest::Approx(0.1927).epsilon(1e-3));
  CHECK(kl_divergence(p, p) == 0.0);

  SdlmModel m(tiny_config(1));
  auto ref = m.clone();
  auto w = pattern_windows(2);
  auto same = sft_loss(m, ref, w[0], 0.02);
  CHECK(std::abs(same.kl.item()) <= 1e-14);
  CHECK(std::abs(same.total.item() - same.ce.item()) <= 1e-15);
  auto zero = sft_loss(m, ref, w[0], 0.0);
  CHECK(zero.total.item() == zero.ce.item());

  SdlmModel other(tiny_config(7));
  for (const auto& ctx : w) {
    auto l = sft_loss(other, ref, ctx, 0.02);
    CHECK(l.kl.item() > 0.0);
    CHECK(l.total.item() >= l.ce.item());
  }
  // Token-level KL against a direct per-position oracle.
  auto lo = other.forward(w[0]).logits, lr = ref.forward(w[0]).logits;
  double oracle = 0;
  for (std::size_t i = 0; i < w[0].size(); ++i) {
    std::vector<double> a(12), b(12);
    double za = 0, zb = 0;
    for (std::size_t v = 0; v < 12; ++v) {
      za += (a[v] = std::exp(lo(i, v)));
      zb += (b[v] = std::exp(lr(i, v)));
    }
    for (std::size_t v = 0; v < 12; ++v) {
      a[v] /= za;
      b[v] /= zb;
    }
    oracle += kl_divergence(a, b);
  }
  CHECK(sft_loss(other, ref, w[0], 0.02).kl.item() == doctest::Approx(oracle / w[0].size()).epsilon(1e-12));

  auto r = grad_check([&] { return sft_loss(other, ref, w[0], 0.5).total; }, other.parameters());
  CHECK(r.max_rel_error < 1e-4);
  ref.zero_grad();
  for (auto& [n, t] : ref.named_tensors()) CHECK_FALSE(t.has_grad());

  auto cfg = tiny_config(1);
  cfg.vocab_size = 13;
  SdlmModel wide(cfg);
  CHECK_THROWS_AS(sft_loss(wide, ref, w[0], 0.02), ConfigError);
  CHECK_THROWS_AS(sft_loss(m, ref, w[0], -1.0), ConfigError);
}

TEST_CASE("SFT with KL stays closer to the reference") {
  SdlmModel ref(tiny_config(3));
  auto data = pattern_windows(8);
  FinetuneConfig fc;
  fc.opt = fast_opt(60);
  fc.steps = 60;
  fc.seed = 1;
  auto a = ref.clone(), b = ref.clone();
  sft_train(a, ref, data, fc, 0.0);
  sft_train(b, ref, data, fc, 1.0);
  CHECK(mean_kl_to_reference(b, ref, data) < mean_kl_to_reference(a, ref, data));
}

TEST_CASE("preference loss") {
  CHECK(reward_pref_loss(0.3, 0.3) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(reward_pref_loss(1.0, 0.0) == doctest::Approx(0.31326168751822286).epsilon(1e-14));
  CHECK(reward_pref_loss(1000.0, 0.0) < 1e-300);
  CHECK(std::isfinite(reward_pref_loss(0.0, 1000.0)));
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.normal() * 3, b = rng.normal() * 3;
    CHECK(reward_pref_loss(a, b) > 0.0);
    CHECK(reward_pref_loss(a, b) + reward_pref_loss(b, a) >= 2 * std::log(2.0) - 1e-15);
    CHECK(reward_pref_loss(Tensor::scalar(a), Tensor::scalar(b)).item() ==
          doctest::Approx(reward_pref_loss(a, b)).epsilon(1e-12));
  }
  CHECK(reward_pref_loss(0.7, 0.7) + reward_pref_loss(0.7, 0.7) == doctest::Approx(2 * std::log(2.0)));
}

TEST_CASE("reward accuracy and reward model") {
  auto planted = planted_preferences(12, 40, 40, 3, 4);
  CHECK(reward_accuracy([](const std::vector<int>&) { return 1.5; }, planted.test) == 0.5);
  auto oracle = [&](const std::vector<int>& t) {
    double s = 0;
    for (std::size_t i = 4; i < t.size(); ++i) s += planted.utility[t[i]];
    return s;
  };
  CHECK(reward_accuracy(oracle, planted.test) == 1.0);
  CHECK(reward_accuracy([&](const std::vector<int>& t) { return -oracle(t); }, planted.test) == 0.0);
  CHECK_THROWS_AS(reward_accuracy(oracle, {}), InputError);
  PreferencePair empty{{2}, {}, {3}, true};
  CHECK_THROWS_AS(reward_accuracy(oracle, {empty}), InputError);

  auto rcfg = tiny_config(5);
  rcfg.doc_mask = false;
  RewardModel rm(rcfg);
  const auto& p = planted.train[0];
  auto r = grad_check([&] { return rm.score(p.sequence(true)); }, rm.parameters());
  CHECK(r.max_rel_error < 1e-4);

  const auto path = std::filesystem::temp_directory_path() / "sdlm_prefs.jsonl";
  write_preferences_jsonl(path, planted.train);
  auto back = read_preferences_jsonl(path);
  REQUIRE(back.size() == planted.train.size());
  CHECK(back[3].completion_b == planted.train[3].completion_b);
  CHECK(back[3].chosen_a == planted.train[3].chosen_a);
  std::ofstream(path) << "{\"prompt\":[1],\"completion_a\":[2],\"completion_b\":[3],\"chosen\":\"c\"}\n";
  CHECK_THROWS_AS(read_preferences_jsonl(path), InputError);
  std::filesystem::remove(path);
}

TEST_CASE("fisher diagonal") {
  // nll_i(theta) = (theta * x_i - y_i)^2, gradient 2 x_i (theta x_i - y_i).
  Tensor theta = Tensor::scalar(0.5).set_requires_grad();
  Tensor unused = Tensor::scalar(3.0).set_requires_grad();
  const double xs[] = {1.0, -2.0, 0.5}, ys[] = {2.0, 1.0, -1.0};
  auto f = fisher_diag(
      [&](std::size_t i) { return square(add_constant(scale(theta, xs[i]), -ys[i])); }, {theta, unused}, 3);
  double hand = 0;
  for (int i = 0; i < 3; ++i) {
    const double g = 2 * xs[i] * (0.5 * xs[i] - ys[i]);
    hand += g * g / 3;
  }
  CHECK(f[0][0] == doctest::Approx(hand).epsilon(1e-14));
  CHECK(f[1][0] == 0.0);

  SdlmModel m(tiny_config(1));
  auto w = pattern_windows(1);
  auto f1 = fisher_diag(m, w, 5), f2 = fisher_diag(m, w, 5);
  CHECK(f1 == f2);
  for (const auto& v : f1)
    for (double x : v) CHECK(x >= 0.0);
  CHECK_THROWS_AS(fisher_diag(m, {}, 5), InputError);
}

TEST_CASE("ewc penalty") {
  Tensor p = Tensor::scalar(4.0).set_requires_grad();
  auto st = EwcState::capture({Tensor::scalar(1.0)}, {{2.0}}, 1.0);
  CHECK(ewc_penalty({p}, st).item() == 9.0);
  auto at = EwcState::capture({p}, {{2.0}}, 1.0);
  CHECK(ewc_penalty({p}, at).item() == 0.0);
  auto nof = EwcState::capture({Tensor::scalar(-7.0)}, {{0.0}}, 10.0);
  CHECK(ewc_penalty({p}, nof).item() == 0.0);

  SdlmModel m(tiny_config(2));
  auto params = m.parameters();
  auto fisher = fisher_diag(m, pattern_windows(2), 4);
  auto state = EwcState::capture(params, fisher, 10.0);
  CHECK(ewc_penalty(params, state).item() == 0.0);
  Rng rng(3);
  for (auto& t : params)
    for (auto& v : t.mutable_data()) v += rng.normal() * 0.1;
  CHECK(ewc_penalty(params, state).item() > 0.0);
  std::vector<std::vector<double>> unit_f;
  for (const auto& f : fisher) {
    unit_f.emplace_back(f.size());
    for (auto& v : unit_f.back()) v = 0.5 + rng.uniform();
  }
  auto unit_state = EwcState::capture(m.parameters(), unit_f, 3.0);
  auto r = grad_check([&] { return ewc_penalty(params, unit_state); }, params);
  CHECK(r.max_rel_error < 1e-4);

  // Second differences along random directions are non-negative.
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::vector<double>> dir;
    for (const auto& t : params) {
      std::vector<double> d(t.numel());
      for (auto& v : d) v = rng.normal();
      dir.push_back(std::move(d));
    }
    auto shifted = [&](double s) {
      std::vector<Tensor> q;
      for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor c = params[i].clone();
        auto cd = c.mutable_data();
        for (std::size_t k = 0; k < cd.size(); ++k) cd[k] += s * dir[i][k];
        q.push_back(c);
      }
      return ewc_penalty(q, state).item();
    };
    CHECK(shifted(1.0) + shifted(-1.0) - 2 * shifted(0.0) >= -1e-9);
  }

  CHECK_THROWS_AS(ewc_penalty({p}, state), DimensionError);
  CHECK_THROWS_AS(EwcState::capture({p}, {{-1.0}}, 1.0), NumericError);
  CHECK_THROWS_AS(EwcState::capture({p}, {{1.0, 2.0}}, 1.0), DimensionError);

  const auto path = std::filesystem::temp_directory_path() / "sdlm_ewc.cbor";
  save_ewc_state(path, state);
  auto back = load_ewc_state(path);
  CHECK(back.lambda == 10.0);
  CHECK(back.anchor == state.anchor);
  CHECK(back.fisher == state.fisher);
  std::filesystem::remove(path);
}

TEST_CASE("EWC anchors fine-tuning") {
  SdlmModel base(tiny_config(6));
  auto task_a = pattern_windows(11);
  FinetuneConfig fc;
  fc.opt = fast_opt(80);
  fc.steps = 80;
  finetune(base, task_a, fc);

  // Task B: a different repeating pattern.
  std::vector<DocumentSegment> segs;
  for (int i = 0; i < 8; ++i) {
    DocumentSegment s;
    s.doc_id = "b" + std::to_string(i);
    for (int k = 0; k < 10; ++k) s.tokens.push_back(11 - (k % 3));
    segs.push_back(std::move(s));
  }
  auto task_b = make_windows(build_stream(segs), 16, 8);
  const double ppl_a = evaluate_perplexity(base, task_a);
  auto state = EwcState::capture(base.parameters(), fisher_diag(base, task_a, 16), 100.0);
  auto plain = base.clone(), anchored = base.clone();
  finetune(plain, task_b, fc);
  finetune(anchored, task_b, fc, &state);
  const double reg_plain = evaluate_perplexity(plain, task_a) - ppl_a;
  const double reg_ewc = evaluate_perplexity(anchored, task_a) - ppl_a;
  CHECK(reg_ewc < reg_plain);
}
