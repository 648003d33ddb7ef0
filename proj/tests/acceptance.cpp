// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Tolerances and run sizes are pinned below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sdlm/experiment.hpp"
#include "sdlm/quant.hpp"
#include "sdlm/stats.hpp"
#include "sdlm/training.hpp"
#include "sdlm/wargame.hpp"

using namespace sdlm;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSuiteSeconds = 300.0;
constexpr double kReductionTol = 1e-12;
constexpr double kPplDrop = 0.30;
constexpr double kPretrainSeconds = 600.0;
constexpr double kAnachronismDrop = 0.20;
constexpr double kStatsTol = 1e-9;
constexpr double kCalibrationGap = 0.02;
constexpr double kJaccardError = 0.05;
constexpr double kQuantPplDegradation = 0.05;
constexpr double kSlopeLo = 1.8, kSlopeHi = 2.2;
constexpr double kRewardAccuracy = 0.90;

// Toy pretraining schedule shared by criteria 3, 4 and 5.
PretrainConfig toy_schedule(std::size_t steps, std::uint64_t seed) {
  PretrainConfig pc;
  pc.steps = steps;
  pc.opt.peak_lr = 3e-3;
  pc.opt.floor_lr = 3e-4;
  pc.opt.warmup_steps = steps / 10;
  pc.opt.total_steps = steps;
  pc.seed = seed;
  return pc;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "!") + what);
  }
  std::string summary() const {
    std::string s;
    for (const auto& n : notes) s += (s.empty() ? "" : "; ") + n;
    return s;
  }
};

fs::path scratch_dir() {
  auto p = fs::temp_directory_path() / "sdlm_acceptance";
  fs::create_directories(p);
  return p;
}

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t({r, c});
  for (auto& v : t.mutable_data()) v = rng.normal();
  return t;
}

Tensor param(Rng& rng, std::size_t r, std::size_t c) {
  auto t = random_matrix(rng, r, c);
  t.set_requires_grad();
  return t;
}

ModelConfig tiny_model(std::size_t V, std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 16;
  c.vocab_size = V;
  c.max_context = 64;
  c.seed = seed;
  return c;
}

DoctrineEmbeddingSet random_doctrine(std::size_t n, std::size_t w, Rng& rng) {
  std::vector<std::string> names;
  std::vector<std::vector<double>> embs;
  for (std::size_t i = 0; i < n; ++i) {
    names.push_back("p" + std::to_string(i));
    std::vector<double> e(w);
    for (auto& v : e) v = rng.normal();
    embs.push_back(std::move(e));
  }
  return DoctrineEmbeddingSet(names, embs, true);
}

// Ten short documents across all domains with decreasing dates.
PackedContext mixed_context(std::size_t V, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DocumentSegment> segs;
  std::int64_t day = 4000;
  for (std::size_t i = 0; i < 10; ++i) {
    DocumentSegment s;
    s.doc_id = "d" + std::to_string(i);
    s.domain = kAllDomains[(i * 3) % kNumDomains];
    s.temporal_index = day;
    day -= 300;
    for (int k = 0; k < 3; ++k) s.tokens.push_back(2 + static_cast<int>(rng.below(V - 2)));
    segs.push_back(std::move(s));
  }
  std::vector<const DocumentSegment*> ptrs;
  for (const auto& s : segs) ptrs.push_back(&s);
  return pack_segments(ptrs, 1000);
}

// ---------------------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  Rng rng(9);
  auto a = param(rng, 3, 4), b = param(rng, 3, 4), c = param(rng, 4, 2), row = param(rng, 1, 4);
  auto s = param(rng, 1, 1), pos = param(rng, 3, 4);
  for (auto& x : pos.mutable_data()) x = 0.5 + std::abs(x);
  auto weighted = [](const Tensor& t) {
    Tensor w({t.rows(), t.cols()});
    Rng wr(t.numel());
    for (auto& x : w.mutable_data()) x = wr.normal();
    return sum(t * w);
  };
  const std::vector<int> ids{2, 0, 2, 1}, tg{1, 0, 3};
  const std::vector<std::size_t> rows{2, 0, 2};

  // Attention, temporal PE, doctrine and fusion operands.
  const std::size_t T = 5, dk = 3;
  auto Q = param(rng, T, dk), K = param(rng, T, dk), V = param(rng, T, 2);
  const std::vector<int> docs{0, 0, 1, 1, 2};
  auto mask = DocMaskParams::constant(0.3, -0.2);
  mask.b_same.set_requires_grad();
  mask.b_cross.set_requires_grad();
  auto alpha = Tensor::scalar(0.4);
  alpha.set_requires_grad();
  const std::vector<double> days{0, 900, 1825, 3000, 6100};
  auto hidden = param(rng, 4, 3), proj = param(rng, 3, 2);
  auto doctrine = random_doctrine(3, 2, rng);
  auto fusion = DomainFusionParams::init(3, rng);
  auto HA = param(rng, 2, 3), HB = param(rng, 3, 3);
  std::vector<Tensor> fusion_inputs{HA, HB};
  for (auto& p : fusion.parameters()) fusion_inputs.push_back(p);

  struct Case {
    const char* name;
    std::function<Tensor()> fn;
    std::vector<Tensor> inputs;
  };
  std::vector<Case> cases{
      {"matmul", [&] { return weighted(matmul(a, c)); }, {a, c}},
      {"matmul_nt", [&] { return weighted(matmul_nt(a, b)); }, {a, b}},
      {"transpose", [&] { return weighted(transpose(a)); }, {a}},
      {"add", [&] { return weighted(a + b); }, {a, b}},
      {"sub", [&] { return weighted(a - b); }, {a, b}},
      {"mul", [&] { return weighted(a * b); }, {a, b}},
      {"add_row", [&] { return weighted(add_row(a, row)); }, {a, row}},
      {"scale", [&] { return weighted(scale(a, -1.7)); }, {a}},
      {"mul_scalar", [&] { return weighted(mul_scalar(s, a)); }, {s, a}},
      {"add_constant", [&] { return weighted(add_constant(a, 0.3)); }, {a}},
      {"sum", [&] { return sum(a * b); }, {a, b}},
      {"mean", [&] { return mean(a * b); }, {a, b}},
      {"mean_rows", [&] { return weighted(mean_rows(a)); }, {a}},
      {"sum_cols", [&] { return weighted(sum_cols(a)); }, {a}},
      {"softmax_rows", [&] { return weighted(softmax_rows(a)); }, {a}},
      {"log_softmax_rows", [&] { return weighted(log_softmax_rows(a)); }, {a}},
      {"layer_norm", [&] { return weighted(layer_norm(a, row, row, 1e-5)); }, {a, row}},
      {"rms_norm", [&] { return weighted(rms_norm(a, row, row, 1e-5)); }, {a, row}},
      {"gelu", [&] { return weighted(gelu(a)); }, {a}},
      {"exp", [&] { return weighted(exp(a)); }, {a}},
      {"log", [&] { return weighted(log(pos)); }, {pos}},
      {"sqrt", [&] { return weighted(sqrt(pos)); }, {pos}},
      {"square", [&] { return weighted(square(a)); }, {a}},
      {"sigmoid", [&] { return weighted(sigmoid(a)); }, {a}},
      {"softplus", [&] { return weighted(softplus(a)); }, {a}},
      {"l2_norm", [&] { return l2_norm(a); }, {a}},
      {"cross_entropy", [&] { return cross_entropy(a, tg); }, {a}},
      {"embedding", [&] { return weighted(embedding(a, ids)); }, {a}},
      {"slice_cols", [&] { return weighted(slice_cols(a, 1, 2)); }, {a}},
      {"concat_cols", [&] { return weighted(concat_cols({a, b})); }, {a, b}},
      {"gather_rows", [&] { return weighted(gather_rows(a, rows)); }, {a}},
      {"concat_rows", [&] { return weighted(concat_rows({a, b})); }, {a, b}},
      {"scatter_rows", [&] { return weighted(scatter_rows(a, std::vector<std::size_t>{2, 0, 4}, 5)); }, {a}},
      {"element", [&] { return element(a, 1, 2); }, {a}},
      {"multi_doc_attention",
       [&] {
         return weighted(multi_doc_attention(Q, K, V, dk, build_doc_mask(docs, mask), true, docs, docs).values);
       },
       {Q, K, V, mask.b_same, mask.b_cross}},
      {"cross_doc_contrastive_loss",
       [&] {
         auto o1 = multi_doc_attention(Q, K, V, dk, build_doc_mask(docs, mask), true, docs, docs);
         const std::vector<int> one(T, 0);
         auto o2 = multi_doc_attention(K, Q, V, dk, build_doc_mask(one, mask), true, one, one);
         return cross_doc_contrastive_loss({o1, o2}, {true, false});
       },
       {Q, K, mask.b_same, mask.b_cross}},
      {"temporal_pe_matrix", [&] { return weighted(temporal_pe_matrix(days, 4, 7300.0, alpha)); }, {alpha}},
      {"pool_output_embedding", [&] { return weighted(pool_output_embedding(hidden, proj)); }, {hidden, proj}},
      {"doctrine_loss", [&] { return doctrine_loss(pool_output_embedding(hidden, proj), doctrine, 0.15); },
       {hidden, proj}},
      {"domain_fuse",
       [&] {
         return weighted(domain_fuse({{Domain::land, HA, {0, 3}}, {Domain::sea, HB, {1, 2, 4}}}, fusion).fused);
       },
       fusion_inputs},
  };
  double worst = 0.0;
  std::string worst_name;
  for (auto& cs : cases) {
    const auto r = grad_check(cs.fn, cs.inputs, 1e-5);
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = cs.name;
    }
    if (r.max_rel_error >= kGradTol) v.check(false, std::string(cs.name) + fmt(" rel err %.2e", r.max_rel_error));
  }
  v.check(worst < kGradTol, std::to_string(cases.size()) + " ops, worst " + worst_name + fmt(" %.2e", worst));

  // Full composite loss on a 2-layer toy model, every feature on.
  SdlmModel m(tiny_model(16, 3));
  m.mask = DocMaskParams::constant(0.2, -0.4);
  m.mask.b_same.set_requires_grad();
  m.mask.b_cross.set_requires_grad();
  m.doctrine = random_doctrine(3, m.config().d_model, rng);
  const auto ctx = mixed_context(16, 8);
  const auto lb = m.total_loss(ctx);
  v.check(lb.doctrine() > 0 && lb.temporal() > 0, "all loss terms active");
  const auto full = grad_check([&] { return m.total_loss(ctx).total; }, m.parameters());
  v.check(full.max_rel_error < kGradTol, fmt("full loss rel err %.2e", full.max_rel_error) + " over " +
                                             std::to_string(m.parameters().size()) + " tensors");
  const double secs = seconds_since(t0);
  v.check(secs < kGradSuiteSeconds, fmt("%.1f s", secs));
  return v;
}

Verdict reduction_suite() {
  Verdict v;
  Rng rng(3);
  double attn = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng.below(12), d = 1 + rng.below(8);
    const auto Q = random_matrix(rng, T, d), K = random_matrix(rng, T, d), Vv = random_matrix(rng, T, 3);
    const bool causal = rng.bernoulli(0.5);
    std::vector<int> docs(T);
    for (auto& x : docs) x = static_cast<int>(rng.below(3));
    const auto ref = reference_attention(Q, K, Vv, d, causal);
    const auto got = multi_doc_attention(Q, K, Vv, d, build_doc_mask(docs, DocMaskParams::zeros()), causal).values;
    for (std::size_t i = 0; i < ref.size(); ++i) attn = std::max(attn, std::abs(ref[i] - got.data()[i]));
  }
  v.check(attn <= kReductionTol, fmt("M_doc=0 attention max diff %.1e", attn));

  bool pe_exact = true;
  TemporalPEConfig pc;
  pc.alpha = 0.0;
  for (std::size_t d : {2u, 8u, 64u}) {
    pc.d_model = d;
    for (int t = 0; t < 200; ++t)
      pe_exact = pe_exact && temporal_pe(t, rng.uniform(0, 20000), pc) == sinusoidal_pe(t, d);
  }
  const std::vector<double> days{0, 17, 1825, 4000, 7299};
  const auto tm = temporal_pe_matrix(days, 16, 7300.0, Tensor::scalar(0.0));
  const auto sm = sinusoidal_pe_matrix(days.size(), 16);
  pe_exact = pe_exact && std::equal(tm.data().begin(), tm.data().end(), sm.data().begin());
  v.check(pe_exact, std::string("alpha=0 PE ") + (pe_exact ? "exact" : "differs"));

  double loss = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto cfg = tiny_model(16, s);
    cfg.lambda_doc = cfg.lambda_temp = 0.0;
    SdlmModel m(cfg);
    Rng dr(s);
    m.doctrine = random_doctrine(3, cfg.d_model, dr);
    const auto lb = m.total_loss(mixed_context(16, 40 + s));
    loss = std::max(loss, std::abs(lb.value() - lb.clm()));
  }
  v.check(loss <= kReductionTol, fmt("lambda=0 loss vs CLM diff %.1e", loss));

  bool fuse_exact = true;
  for (std::size_t dom = 0; dom < kNumDomains; ++dom) {
    auto params = DomainFusionParams::init(6, rng);
    params.gate[dom].mutable_data()[0] = 1.0;
    const auto H = random_matrix(rng, 1 + rng.below(9), 6);
    const auto out = domain_fuse({{kAllDomains[dom], H, {}}}, params).fused;
    fuse_exact = fuse_exact && std::equal(H.data().begin(), H.data().end(), out.data().begin());
  }
  v.check(fuse_exact, std::string("single-domain fusion ") + (fuse_exact ? "exact pass-through" : "differs"));
  return v;
}

// Shared with criterion 10.
struct PretrainedToy {
  ToyData data;
  SdlmModel model{ModelConfig{}};
  bool ready = false;
};

Verdict toy_pretraining(PretrainedToy& keep) {
  Verdict v;
  ToyDataSpec spec;
  spec.corpus.num_docs = 2200;
  const std::uint64_t seed = 1;
  const std::size_t steps = 1000;
  auto data = make_toy_data(spec, seed);
  v.check(data.train_tokens >= 150000 && data.train_tokens <= 250000,
          std::to_string(data.train_tokens) + " training tokens");
  const auto dir = scratch_dir();
  std::vector<std::uint64_t> checksums;
  std::vector<std::string> bytes;
  double p0 = 0, p1 = 0, secs = 0;
  for (int run = 0; run < 2; ++run) {
    ModelConfig mc;
    mc.vocab_size = data.vocab.size();
    mc.seed = seed;
    SdlmModel m(mc);
    install_doctrine(m, data.vocab, default_doctrine_principles());
    if (run == 0) p0 = evaluate_perplexity(m, data.val_windows);
    const auto t0 = std::chrono::steady_clock::now();
    pretrain(m, data.train_windows, toy_schedule(steps, seed));
    if (run == 0) secs = seconds_since(t0);
    const auto path = dir / ("pretrain_run" + std::to_string(run) + ".ckpt");
    save_checkpoint(path, m, {seed, config_hash(mc.to_json()), "acceptance", steps});
    checksums.push_back(checkpoint_checksum(path));
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    bytes.push_back(ss.str());
    if (run == 0) {
      p1 = evaluate_perplexity(m, data.val_windows);
      keep.model = m.clone();
    }
  }
  const double drop = (p0 - p1) / p0;
  v.check(drop >= kPplDrop, fmt("val ppl %.2f", p0) + fmt(" -> %.3f", p1) + fmt(" (drop %.1f%%)", 100 * drop));
  v.check(secs < kPretrainSeconds, fmt("%.0f s training", secs));
  v.check(bytes[0] == bytes[1], "rerun checkpoint " + std::string(bytes[0] == bytes[1] ? "bit-identical" : "differs") +
                                    " (checksum " + std::to_string(checksums[0]) + ")");
  keep.data = std::move(data);
  keep.ready = true;
  return v;
}

Verdict probe_ablation() {
  Verdict v;
  constexpr std::size_t kProbes = 800, kTest = 100, kSteps = 2000;
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ToyDataSpec spec;
    spec.corpus.num_probes = kProbes;
    spec.corpus.num_docs = 2 * kProbes;
    spec.corpus.min_sentences = 1;
    spec.corpus.max_sentences = 3;
    spec.corpus.distractors_per_probe = 0;
    const auto data = make_toy_data(spec, seed);
    const std::vector<QaProbe> train(data.corpus.probes.begin(), data.corpus.probes.end() - kTest);
    const std::vector<QaProbe> test(data.corpus.probes.end() - kTest, data.corpus.probes.end());
    std::vector<PackedContext> windows;
    for (const auto& p : train) {
      try {
        windows.push_back(pack_probe(p, data.vocab, data.corpus.segments, ModelConfig{}.max_context));
      } catch (const TruncationError&) {
      }
    }
    double acc[2];
    for (int on = 0; on < 2; ++on) {
      ModelConfig mc;
      mc.vocab_size = data.vocab.size();
      mc.seed = seed;
      mc.doc_mask = on == 1;
      SdlmModel m(mc);
      install_doctrine(m, data.vocab, default_doctrine_principles());
      pretrain(m, windows, toy_schedule(kSteps, seed));
      acc[on] = probe_accuracy(m, data.vocab, test, data.corpus.segments).accuracy;
    }
    wins += acc[1] >= acc[0];
    v.notes.push_back("seed " + std::to_string(seed) + fmt(" on %.2f", acc[1]) + fmt(" off %.2f", acc[0]));
  }
  v.notes.push_back("chance 0.125");
  v.check(wins >= 2, std::to_string(wins) + "/3 seeds with mask >= no mask");
  return v;
}

Verdict temporal_regularizer() {
  Verdict v;
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ToyDataSpec spec;
    spec.corpus.num_docs = 800;
    const auto data = make_toy_data(spec, seed);
    double mass[2];
    for (int on = 0; on < 2; ++on) {
      ModelConfig mc;
      mc.vocab_size = data.vocab.size();
      mc.seed = seed;
      mc.lambda_temp = on ? 0.08 : 0.0;
      SdlmModel m(mc);
      install_doctrine(m, data.vocab, default_doctrine_principles());
      pretrain(m, data.train_windows, toy_schedule(1000, seed));
      mass[on] = evaluate_anachronism(m, data.val_windows);
    }
    const double rel = (mass[0] - mass[1]) / mass[0];
    wins += rel >= kAnachronismDrop;
    v.notes.push_back("seed " + std::to_string(seed) + fmt(" mass %.4f", mass[0]) + fmt(" -> %.4f", mass[1]) +
                      fmt(" (%.1f%%)", 100 * rel));
  }
  v.check(wins >= 2, std::to_string(wins) + "/3 seeds reduce by >= 20%");
  return v;
}

Verdict statistics_oracles() {
  Verdict v;
  Rng rng(17);
  std::vector<ForecastRecord> recs;
  for (int i = 0; i < 2000; ++i) {
    const double p = rng.uniform();
    recs.push_back({p, rng.bernoulli(0.3 + 0.4 * p) ? 1 : 0, 12});
  }
  recs.push_back({1.0, 1, 12});
  recs.push_back({0.0, 0, 12});
  double brier = 0;
  for (const auto& r : recs) brier += (r.probability - r.outcome) * (r.probability - r.outcome);
  brier /= static_cast<double>(recs.size());
  double ece = 0;
  for (int b = 0; b < 10; ++b) {
    double ps = 0, ys = 0, n = 0;
    for (const auto& r : recs) {
      const int bin = std::min(9, static_cast<int>(std::floor(r.probability * 10)));
      if (bin != b) continue;
      ps += r.probability;
      ys += r.outcome;
      n += 1;
    }
    if (n > 0) ece += n / static_cast<double>(recs.size()) * std::abs(ps / n - ys / n);
  }
  const auto rep = reliability_report(recs, 10);
  v.check(std::abs(brier_score(recs) - brier) < kStatsTol && std::abs(rep.brier - brier) < kStatsTol, "Brier");
  v.check(std::abs(rep.ece - ece) < kStatsTol, "ECE");

  // Cohen: contingency counts by hand.
  const std::vector<int> ka{0, 0, 0, 1, 1, 2, 2, 2, 1, 0}, kb{0, 1, 0, 1, 1, 2, 0, 2, 2, 0};
  // p_o = 7/10; marginals A (4,3,3), B (4,3,3): p_e = 34/100.
  v.check(std::abs(cohen_kappa(ka, kb) - (0.7 - 0.34) / 0.66) < kStatsTol, "Cohen kappa");
  // Fleiss: items {1,1} and {2,0}: P = (0, 1), p = (3/4, 1/4), P_e = 10/16.
  v.check(std::abs(fleiss_kappa({{1, 1}, {2, 0}}, 2) - (0.5 - 0.625) / 0.375) < kStatsTol, "Fleiss kappa");

  std::vector<std::vector<double>> groups{{2.1, 3.4, 1.9, 2.8}, {4.2, 3.9, 5.1}, {1.0, 0.4, 1.7, 1.2, 0.9}};
  double grand = 0, n = 0;
  for (const auto& g : groups)
    for (double x : g) grand += x, n += 1;
  grand /= n;
  double ssb = 0, ssw = 0;
  for (const auto& g : groups) {
    double m = 0;
    for (double x : g) m += x;
    m /= static_cast<double>(g.size());
    ssb += static_cast<double>(g.size()) * (m - grand) * (m - grand);
    for (double x : g) ssw += (x - m) * (x - m);
  }
  const double f_oracle = (ssb / 2) / (ssw / (n - 3));
  v.check(std::abs(anova_f(groups).F - f_oracle) < kStatsTol, "ANOVA F");

  const std::vector<double> x{1, 2, 3, 4, 5.5}, y{2, 4.5, 5, 9, 10};
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / 5, my += y[i] / 5;
  double sxy = 0, sxx = 0, syy = 0, abs_err = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    abs_err += std::abs(x[i] - y[i]) / 5;
  }
  v.check(std::abs(pearson_r(x, y) - sxy / std::sqrt(sxx * syy)) < kStatsTol, "Pearson");
  v.check(std::abs(mae(x, y) - abs_err) < kStatsTol, "MAE");

  std::vector<ForecastRecord> half;
  for (int i = 0; i < 7; ++i) half.push_back({0.5, i % 3 == 0 ? 1 : 0, 12});
  v.check(brier_score(half) == 0.25, "constant-0.5 Brier = 0.25");
  v.check(anova_f({{1, 2, 3}, {4, 5, 6}}).F == 13.5, "hand ANOVA F = 13.5");
  return v;
}

Verdict calibration_sanity() {
  Verdict v;
  Rng rng(2024);
  std::vector<ForecastRecord> recs;
  for (int i = 0; i < 100000; ++i) {
    const double p = rng.uniform();
    recs.push_back({p, rng.bernoulli(p) ? 1 : 0, 12});
  }
  const auto rep = reliability_report(recs, 10);
  double worst = 0;
  for (const auto& b : rep.bins) worst = std::max(worst, std::abs(b.mean_predicted - b.empirical_frequency));
  v.check(rep.bins.size() == 10, "10 bins");
  v.check(rep.mean_abs_gap() < kCalibrationGap, fmt("mean |gap| %.4f", rep.mean_abs_gap()) + fmt(" (worst bin %.4f)", worst));
  return v;
}

// Best local score by an independent formulation: for every start pair run
// a forward DP over alignments anchored there, keep the best prefix.
double anchored_oracle(const std::string& a, const std::string& b, const AlignmentScoring& s) {
  double best = 0.0;
  const std::size_t n = a.size(), m = b.size();
  std::vector<double> D((n + 1) * (m + 1));
  for (std::size_t i0 = 0; i0 < n; ++i0)
    for (std::size_t j0 = 0; j0 < m; ++j0) {
      if (a[i0] != b[j0]) continue;  // an optimal local alignment starts with a match
      const std::size_t rn = n - i0, rm = m - j0;
      auto at = [&](std::size_t i, std::size_t j) -> double& { return D[i * (rm + 1) + j]; };
      at(0, 0) = 0;
      for (std::size_t i = 1; i <= rn; ++i) at(i, 0) = at(i - 1, 0) + s.gap;
      for (std::size_t j = 1; j <= rm; ++j) at(0, j) = at(0, j - 1) + s.gap;
      for (std::size_t i = 1; i <= rn; ++i)
        for (std::size_t j = 1; j <= rm; ++j) {
          const double sub = a[i0 + i - 1] == b[j0 + j - 1] ? s.match : s.mismatch;
          at(i, j) = std::max({at(i - 1, j - 1) + sub, at(i - 1, j) + s.gap, at(i, j - 1) + s.gap});
          best = std::max(best, at(i, j));
        }
    }
  return best;
}

Verdict smith_waterman_check() {
  Verdict v;
  std::vector<std::string> all{""};
  for (std::size_t len = 1; len <= 6; ++len) {
    const std::size_t start = all.size();
    for (std::size_t i = 0; i < start; ++i)
      if (all[i].size() == len - 1)
        for (char c : {'A', 'B', 'C'}) all.push_back(all[i] + c);
  }
  all.erase(all.begin());
  const AlignmentScoring s{2, -1, -1};
  std::size_t pairs = 0, mismatched = 0;
  for (const auto& a : all)
    for (const auto& b : all) {
      ++pairs;
      if (smith_waterman(a, b, s).score != anchored_oracle(a, b, s)) ++mismatched;
    }
  v.check(mismatched == 0, std::to_string(pairs) + " pairs, " + std::to_string(mismatched) + " disagree with oracle");
  const auto al = smith_waterman("AGC", "AAC", s);
  v.check(al.score == 3.0, fmt("AGC/AAC score %.0f", al.score));
  // score / (match * min length) = 3 / (2 * 3).
  const double norm = normalized_alignment("AGC", "AAC", s);
  v.check(norm == 3.0 / 6.0, fmt("normalized %.2f", norm) + " by score/(match*min len); stated 0.75 is not 3/6");
  return v;
}

Verdict minhash_check() {
  Verdict v;
  Rng rng(77);
  double err = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto n = 40 + rng.below(160);
    const auto shift = rng.below(n + 1);
    const auto base = rng.below(1'000'000'000);
    std::vector<std::uint64_t> a, b;
    for (auto x = base; x < base + n; ++x) a.push_back(fnv1a64(&x, sizeof x));
    for (auto x = base + shift; x < base + shift + n; ++x) b.push_back(fnv1a64(&x, sizeof x));
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const auto seed = static_cast<std::uint64_t>(i);
    err += std::abs(estimate_jaccard(minhash_of_set(a, 128, seed), minhash_of_set(b, 128, seed)) -
                    exact_jaccard(a, b));
  }
  err /= 1000;
  v.check(err < kJaccardError, fmt("mean |error| %.4f at k=128", err));

  std::vector<DocumentSegment> docs;
  std::set<std::size_t> expected;
  for (int i = 0; i < 120; ++i) {
    DocumentSegment d;
    d.doc_id = "d" + std::to_string(i);
    if (i > 5 && rng.bernoulli(0.2)) {
      d.raw_text = docs[rng.below(docs.size())].raw_text;
    } else if (i > 5 && rng.bernoulli(0.3)) {
      d.raw_text = docs[rng.below(docs.size())].raw_text;
      d.raw_text[d.raw_text.size() / 2] ^= 1;
    } else {
      for (int k = 0; k < 250; ++k) d.raw_text.push_back(static_cast<char>('a' + rng.below(26)));
    }
    docs.push_back(std::move(d));
  }
  for (std::size_t i = 0; i < docs.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (docs[i].raw_text == docs[j].raw_text) expected.insert(i);
  DedupConfig cfg;
  cfg.jaccard_threshold = 1.0;
  std::set<std::size_t> got;
  for (const auto& r : lsh_dedup(docs, cfg).removed) got.insert(r.segment);
  v.check(got == expected, "threshold 1.0 removed " + std::to_string(got.size()) + " of " +
                               std::to_string(expected.size()) + " exact duplicates, nothing else");
  return v;
}

Verdict int8_check(const PretrainedToy& toy) {
  Verdict v;
  Rng rng(5);
  std::size_t violations = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto r = 1 + rng.below(16), c = 1 + rng.below(16);
    const double spread = std::pow(10.0, rng.uniform(-4, 4));
    Tensor w({r, c});
    for (auto& x : w.mutable_data()) x = spread * rng.normal();
    if (trial % 7 == 0)
      for (std::size_t j = 0; j < c; ++j) w.at(0, j) = 0.0;
    const auto q = quantize_int8(w);
    const auto back = q.dequantize();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        if (std::abs(back(i, j) - w(i, j)) > q.scales[i] / 2 * (1 + 1e-12)) ++violations;
  }
  v.check(violations == 0, std::to_string(violations) + " roundtrip bound violations in 500 matrices");
  if (!toy.ready) {
    v.check(false, "toy model unavailable");
    return v;
  }
  auto m = toy.model.clone();
  const double before = evaluate_perplexity(m, toy.data.val_windows);
  const auto rep = quantize_model_weights(m);
  const double after = evaluate_perplexity(m, toy.data.val_windows);
  const double rel = after / before - 1.0;
  v.check(rel < kQuantPplDegradation, std::to_string(rep.matrices) + " matrices, val ppl " + fmt("%.4f", before) +
                                          fmt(" -> %.4f", after) + fmt(" (%+.2f%%)", 100 * rel));
  return v;
}

Verdict latency_check() {
  Verdict v;
  const auto prof = attention_profile({256, 512, 1024, 2048, 4096}, 64, 3, 1);
  const auto fit = prof.fit("attention-naive");
  v.check(fit.slope >= kSlopeLo && fit.slope <= kSlopeHi, fmt("attention slope %.3f", fit.slope));
  SdlmModel m(ModelConfig{});
  const auto full = latency_profile(m, {32, 64, 128, 256}, 3, 1);
  auto merged = prof;
  merged.points.insert(merged.points.end(), full.points.begin(), full.points.end());
  merged.fits.insert(merged.fits.end(), full.fits.begin(), full.fits.end());
  const auto path = scratch_dir() / "latency_profile.csv";
  write_latency_csv(path, merged);
  std::ifstream f(path);
  std::size_t rows = 0;
  bool header = false;
  for (std::string line; std::getline(f, line);) {
    if (line == "length,seconds,tokens_per_sec,variant") header = true;
    else if (header && !line.empty()) ++rows;
  }
  v.check(header && rows == merged.points.size(), std::to_string(rows) + " CSV rows at " + path.string());
  return v;
}

ModelConfig small_body(std::size_t V, std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_head = 8;
  c.d_ff = 32;
  c.vocab_size = V;
  c.max_context = 64;
  c.seed = seed;
  return c;
}

FinetuneConfig finetune_schedule(std::size_t steps, std::uint64_t seed) {
  FinetuneConfig f;
  f.steps = steps;
  f.opt.peak_lr = 3e-3;
  f.opt.floor_lr = 3e-4;
  f.opt.warmup_steps = steps / 10;
  f.opt.total_steps = steps;
  f.seed = seed;
  return f;
}

// Noisy periodic token pattern.
std::vector<PackedContext> pattern_task(std::uint64_t seed, int period, int offset) {
  Rng rng(seed);
  std::vector<DocumentSegment> segs;
  for (std::size_t i = 0; i < 16; ++i) {
    DocumentSegment s;
    s.doc_id = "d" + std::to_string(i);
    s.domain = kAllDomains[i % kNumDomains];
    s.temporal_index = static_cast<std::int64_t>(rng.below(3000));
    for (int k = 0; k < 20; ++k) s.tokens.push_back(offset + k % period + (rng.bernoulli(0.15) ? period : 0));
    segs.push_back(std::move(s));
  }
  return make_windows(build_stream(segs), 32, 16);
}

Verdict alignment_training() {
  Verdict v;
  int reward_ok = 0, sft_ok = 0, ewc_ok = 0;
  std::string reward_notes, sft_notes, ewc_notes;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto planted = planted_preferences(24, 4000, 200, 6, seed);
    auto rcfg = small_body(24, seed);
    rcfg.doc_mask = rcfg.fusion = false;
    RewardModel rm(rcfg);
    reward_train(rm, planted.train, finetune_schedule(8000, seed));
    const double acc = reward_accuracy(rm, planted.test);
    reward_ok += acc >= kRewardAccuracy;
    reward_notes += fmt(" %.3f", acc);

    const std::size_t V = 24;
    SdlmModel ref(small_body(V, seed));
    const auto task_a = pattern_task(seed, 4, 2);
    finetune(ref, task_a, finetune_schedule(300, seed));
    const auto task_b = pattern_task(seed + 100, 3, 12);

    auto plain = ref.clone(), kl = ref.clone();
    sft_train(plain, ref, task_b, finetune_schedule(200, seed), 0.0);
    sft_train(kl, ref, task_b, finetune_schedule(200, seed), 0.02);
    const double kl0 = mean_kl_to_reference(plain, ref, task_b), kl1 = mean_kl_to_reference(kl, ref, task_b);
    sft_ok += kl1 < kl0;
    sft_notes += fmt(" %.3f", kl1) + fmt("<%.3f", kl0);

    const double base = evaluate_perplexity(ref, task_a);
    const auto state = EwcState::capture(ref.parameters(), fisher_diag(ref, task_a, 16), 100.0);
    auto free = ref.clone(), anchored = ref.clone();
    finetune(free, task_b, finetune_schedule(200, seed));
    finetune(anchored, task_b, finetune_schedule(200, seed), &state);
    const double reg0 = evaluate_perplexity(free, task_a) - base, reg1 = evaluate_perplexity(anchored, task_a) - base;
    ewc_ok += reg1 < reg0;
    ewc_notes += fmt(" %.2f", reg1) + fmt("<%.2f", reg0);
  }
  v.check(reward_ok >= 2, "reward held-out acc" + reward_notes);
  v.check(sft_ok >= 2, "KL(w=0.02)<KL(w=0)" + sft_notes);
  v.check(ewc_ok >= 2, "task-A ppl regression EWC<plain" + ewc_notes);
  return v;
}

Verdict schedule_clipping() {
  Verdict v;
  OptimizerConfig c;
  c.total_steps = 20000;
  v.check(lr_schedule(2000, c) == 6e-5, fmt("lr(2000)=%.3g", lr_schedule(2000, c)));
  v.check(lr_schedule(20000, c) == 6e-6, fmt("lr(end)=%.3g", lr_schedule(20000, c)));
  v.check(lr_schedule(11000, c) == 3.3e-5, fmt("lr(mid)=%.3g", lr_schedule(11000, c)));
  std::vector<double> g{1.2, 1.6};
  const double pre = clip_grad_norm({std::span<double>(g)}, 1.0);
  const double post = std::sqrt(g[0] * g[0] + g[1] * g[1]);
  v.check(pre == 2.0 && post == 1.0, fmt("clip norm %.1f", pre) + fmt(" -> %.17g", post));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  PretrainedToy toy;
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite},
      {"reduction suite", reduction_suite},
      {"toy pretraining", [&] { return toy_pretraining(toy); }},
      {"document-mask probe ablation", probe_ablation},
      {"temporal regularizer", temporal_regularizer},
      {"statistics oracles", statistics_oracles},
      {"calibration sanity", calibration_sanity},
      {"smith-waterman", smith_waterman_check},
      {"minhash/lsh", minhash_check},
      {"int8 quantization", [&] { return int8_check(toy); }},
      {"latency scaling", latency_check},
      {"alignment training", alignment_training},
      {"schedule and clipping", schedule_clipping},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id) && !(id == 3 && only.count(10))) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << ' ' << id << ' ' << criteria[i].first << ": " << v.summary()
              << fmt(" [%.1f s]", seconds_since(t0)) << std::endl;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << failed << " failing" << std::endl;
  return failed ? 1 : 0;
}
