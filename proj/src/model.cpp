#include "sdlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "sdlm/init.hpp"
#include "sdlm/rng.hpp"

namespace sdlm {

namespace {

constexpr double kNormEps = 1e-5;

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("model: n_layers must be at least 1");
  if (n_heads < 1 || d_head < 1) throw ConfigError("model: n_heads and d_head must be positive");
  if (d_model != n_heads * d_head)
    throw ConfigError("model: d_model (" + std::to_string(d_model) + ") != n_heads x d_head (" +
                      std::to_string(n_heads) + " x " + std::to_string(d_head) + ")");
  if (d_model % 2 != 0) throw ConfigError("model: d_model must be even");
  if (d_ff < 1) throw ConfigError("model: d_ff must be positive");
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be at least 2");
  if (max_context < 1) throw ConfigError("model: max_context must be at least 1");
  if (lambda_doc < 0.0 || lambda_temp < 0.0) throw ConfigError("model: lambdas must be non-negative");
  if (!(T_strategic > 0.0)) throw ConfigError("model: T_strategic must be positive");
  if (!std::isfinite(alpha_init)) throw ConfigError("model: alpha_init must be finite");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},       {"n_heads", n_heads},         {"d_model", d_model},
          {"d_head", d_head},           {"d_ff", d_ff},               {"vocab_size", vocab_size},
          {"max_context", max_context}, {"lambda_doc", lambda_doc},   {"lambda_temp", lambda_temp},
          {"T_strategic", T_strategic}, {"alpha_init", alpha_init},   {"temporal_pe", temporal_pe},
          {"doc_mask", doc_mask},       {"fusion", fusion},           {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{
      "n_layers",    "n_heads",     "d_model",    "d_head",      "d_ff",     "vocab_size", "max_context",
      "lambda_doc",  "lambda_temp", "T_strategic", "alpha_init", "temporal_pe", "doc_mask", "fusion", "seed"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("model config: unknown key '" + k + "'");
  ModelConfig c;
  try {
    c.n_layers = get_or(j, "n_layers", c.n_layers);
    c.n_heads = get_or(j, "n_heads", c.n_heads);
    c.d_model = get_or(j, "d_model", c.d_model);
    c.d_head = get_or(j, "d_head", c.d_model / c.n_heads);
    c.d_ff = get_or(j, "d_ff", 4 * c.d_model);
    c.vocab_size = get_or(j, "vocab_size", c.vocab_size);
    c.max_context = get_or(j, "max_context", c.max_context);
    c.lambda_doc = get_or(j, "lambda_doc", c.lambda_doc);
    c.lambda_temp = get_or(j, "lambda_temp", c.lambda_temp);
    c.T_strategic = get_or(j, "T_strategic", c.T_strategic);
    c.alpha_init = get_or(j, "alpha_init", c.alpha_init);
    c.temporal_pe = get_or(j, "temporal_pe", c.temporal_pe);
    c.doc_mask = get_or(j, "doc_mask", c.doc_mask);
    c.fusion = get_or(j, "fusion", c.fusion);
    c.seed = get_or(j, "seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Packing

std::size_t PackedContext::num_docs() const {
  return doc_index.empty() ? 0 : static_cast<std::size_t>(*std::max_element(doc_index.begin(), doc_index.end())) + 1;
}

void PackedContext::validate(std::size_t vocab_size) const {
  const auto T = tokens.size();
  if (T == 0) throw InputError("context is empty");
  if (targets.size() != T || doc_index.size() != T || days.size() != T || domains.size() != T)
    throw DimensionError("context: per-position metadata must match token count");
  for (std::size_t i = 0; i < T; ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab_size)
      throw IndexError("context: token id " + std::to_string(tokens[i]) + " outside vocabulary");
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab_size)
      throw IndexError("context: target id " + std::to_string(targets[i]) + " outside vocabulary");
    if (days[i] < 0.0) throw InputError("context: negative day index");
  }
}

TokenStream build_stream(const std::vector<DocumentSegment>& segments) {
  TokenStream s;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& seg = segments[i];
    if (seg.tokens.empty() && !seg.raw_text.empty())
      throw InputError("segment '" + seg.doc_id + "' has not been tokenized");
    for (std::size_t k = 0; k <= seg.tokens.size(); ++k) {
      s.tokens.push_back(k < seg.tokens.size() ? seg.tokens[k] : kSepId);
      s.segment.push_back(static_cast<int>(i));
      s.days.push_back(static_cast<double>(seg.temporal_index));
      s.domains.push_back(seg.domain);
    }
  }
  return s;
}

namespace {

PackedContext window_of(const TokenStream& s, std::size_t start, std::size_t length) {
  PackedContext c;
  std::map<int, int> dense;
  for (std::size_t i = start; i < start + length; ++i) {
    c.tokens.push_back(s.tokens[i]);
    c.targets.push_back(s.tokens[i + 1]);
    auto it = dense.try_emplace(s.segment[i], static_cast<int>(dense.size())).first;
    c.doc_index.push_back(it->second);
    c.days.push_back(s.days[i]);
    c.domains.push_back(s.domains[i]);
  }
  return c;
}

}  // namespace

std::vector<PackedContext> make_windows(const TokenStream& stream, std::size_t length, std::size_t stride) {
  if (length < 1 || stride < 1) throw ConfigError("make_windows: length and stride must be positive");
  std::vector<PackedContext> out;
  const auto n = stream.tokens.size();
  if (n < 2) return out;
  if (n < length + 1) {
    out.push_back(window_of(stream, 0, n - 1));
    return out;
  }
  for (std::size_t s = 0; s + length + 1 <= n; s += stride) out.push_back(window_of(stream, s, length));
  return out;
}

PackedContext pack_segments(const std::vector<const DocumentSegment*>& segments, std::size_t max_context) {
  TokenStream s;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& seg = *segments[i];
    std::vector<int> toks = seg.tokens;
    if (i + 1 < segments.size()) toks.push_back(kSepId);
    for (int t : toks) {
      s.tokens.push_back(t);
      s.segment.push_back(static_cast<int>(i));
      s.days.push_back(static_cast<double>(seg.temporal_index));
      s.domains.push_back(seg.domain);
    }
  }
  if (s.tokens.size() < 2) throw InputError("pack_segments: need at least two tokens");
  if (s.tokens.size() - 1 > max_context)
    throw TruncationError("pack_segments: " + std::to_string(s.tokens.size() - 1) +
                          " positions exceed the context window of " + std::to_string(max_context));
  return window_of(s, 0, s.tokens.size() - 1);
}

// ---------------------------------------------------------------------------
// Model

SdlmModel::SdlmModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const auto d = cfg_.d_model;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_res = sd / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  tok_emb = normal_param(cfg_.vocab_size, d, sd, rng);
  alpha = scalar_param(cfg_.alpha_init);
  mask = DocMaskParams::zeros();
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    BlockParams b;
    b.ln1_g = const_param(1, d, 1.0);
    b.ln1_b = const_param(1, d, 0.0);
    b.Wq = normal_param(d, d, sd, rng);
    b.Wk = normal_param(d, d, sd, rng);
    b.Wv = normal_param(d, d, sd, rng);
    b.Wo = normal_param(d, d, sd_res, rng);
    b.ln2_g = const_param(1, d, 1.0);
    b.ln2_b = const_param(1, d, 0.0);
    b.W1 = normal_param(d, cfg_.d_ff, sd, rng);
    b.b1 = const_param(1, cfg_.d_ff, 0.0);
    b.W2 = normal_param(cfg_.d_ff, d, 1.0 / std::sqrt(static_cast<double>(cfg_.d_ff * 2 * cfg_.n_layers)), rng);
    b.b2 = const_param(1, d, 0.0);
    blocks.push_back(std::move(b));
  }
  lnf_g = const_param(1, d, 1.0);
  lnf_b = const_param(1, d, 0.0);
  fusion = DomainFusionParams::init(d, rng);
  doc_proj = normal_param(d, d, sd, rng);
}

std::vector<std::pair<std::string, Tensor>> SdlmModel::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("temporal.alpha", alpha);
  out.emplace_back("doc_mask.b_same", mask.b_same);
  out.emplace_back("doc_mask.b_cross", mask.b_cross);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    for (auto& [n, t] : std::vector<std::pair<const char*, Tensor>>{
             {"ln1_g", b.ln1_g}, {"ln1_b", b.ln1_b}, {"Wq", b.Wq}, {"Wk", b.Wk}, {"Wv", b.Wv}, {"Wo", b.Wo},
             {"ln2_g", b.ln2_g}, {"ln2_b", b.ln2_b}, {"W1", b.W1}, {"b1", b.b1}, {"W2", b.W2}, {"b2", b.b2}})
      out.emplace_back(p + n, t);
  }
  out.emplace_back("lnf_g", lnf_g);
  out.emplace_back("lnf_b", lnf_b);
  for (std::size_t d = 0; d < kNumDomains; ++d) {
    const std::string p = "fusion." + std::string(to_string(kAllDomains[d])) + ".";
    out.emplace_back(p + "gate", fusion.gate[d]);
    out.emplace_back(p + "Wq", fusion.attn[d].Wq);
    out.emplace_back(p + "Wk", fusion.attn[d].Wk);
    out.emplace_back(p + "Wv", fusion.attn[d].Wv);
    out.emplace_back(p + "Wo", fusion.attn[d].Wo);
  }
  out.emplace_back("doc_proj", doc_proj);
  return out;
}

std::vector<std::pair<std::string, Tensor>> SdlmModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, t] : named_tensors()) {
    if (!cfg_.temporal_pe && name == "temporal.alpha") continue;
    if (!cfg_.doc_mask && name.rfind("doc_mask.", 0) == 0) continue;
    if (!cfg_.fusion && name.rfind("fusion.", 0) == 0) continue;
    if ((doctrine.size() == 0 || cfg_.lambda_doc == 0.0) && name == "doc_proj") continue;
    out.emplace_back(name, t);
  }
  return out;
}

std::vector<Tensor> SdlmModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [n, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t SdlmModel::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

SdlmModel SdlmModel::clone() const {
  SdlmModel c(cfg_);
  auto src = named_tensors();
  auto dst = c.named_tensors();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto s = src[i].second.data();
    auto d = dst[i].second.mutable_data();
    std::copy(s.begin(), s.end(), d.begin());
  }
  c.doctrine = doctrine;
  return c;
}

void SdlmModel::zero_grad() const {
  for (auto& [n, t] : named_tensors()) {
    Tensor h = t;
    h.zero_grad();
  }
}

ForwardOutput SdlmModel::forward(const PackedContext& ctx) const {
  ctx.validate(cfg_.vocab_size);
  const std::size_t T = ctx.size(), d = cfg_.d_model, dh = cfg_.d_head;
  if (T > cfg_.max_context)
    throw InputError("forward: context of " + std::to_string(T) + " exceeds max_context " +
                     std::to_string(cfg_.max_context));
  Tensor x = scale(embedding(tok_emb, ctx.tokens), std::sqrt(static_cast<double>(d)));
  x = add(x, cfg_.temporal_pe ? temporal_pe_matrix(ctx.days, d, cfg_.T_strategic, alpha)
                              : sinusoidal_pe_matrix(T, d));
  Tensor M;
  if (cfg_.doc_mask) M = build_doc_mask(ctx.doc_index, mask);

  ForwardOutput out;
  for (const auto& b : blocks) {
    Tensor a = rms_norm(x, b.ln1_g, b.ln1_b, kNormEps);
    Tensor Q = matmul(a, b.Wq), K = matmul(a, b.Wk), V = matmul(a, b.Wv);
    std::vector<Tensor> heads;
    LayerRecord rec;
    Tensor mass;
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
      auto att = multi_doc_attention(slice_cols(Q, h * dh, dh), slice_cols(K, h * dh, dh),
                                     slice_cols(V, h * dh, dh), dh, M, true, ctx.doc_index, ctx.doc_index);
      heads.push_back(att.values);
      rec.head_weights.push_back(att.weights);
      mass = mass.defined() ? add(mass, att.cross_doc_mass) : att.cross_doc_mass;
    }
    rec.cross_doc_mass = scale(mass, 1.0 / static_cast<double>(cfg_.n_heads));
    out.layers.push_back(std::move(rec));
    x = add(x, matmul(heads.size() == 1 ? heads[0] : concat_cols(heads), b.Wo));
    Tensor m = rms_norm(x, b.ln2_g, b.ln2_b, kNormEps);
    x = add(x, add_row(matmul(gelu(add_row(matmul(m, b.W1), b.b1)), b.W2), b.b2));
  }

  if (cfg_.fusion) {
    std::array<std::vector<std::size_t>, kNumDomains> pos;
    for (std::size_t i = 0; i < T; ++i) pos[static_cast<std::size_t>(ctx.domains[i])].push_back(i);
    std::vector<DomainStates> states;
    std::vector<std::size_t> order;
    for (std::size_t dom = 0; dom < kNumDomains; ++dom) {
      if (pos[dom].empty()) continue;
      states.push_back({kAllDomains[dom], gather_rows(x, pos[dom]), pos[dom]});
      order.insert(order.end(), pos[dom].begin(), pos[dom].end());
    }
    auto fused = domain_fuse(states, fusion);
    x = add(x, scatter_rows(fused.fused, order, T));
  }

  out.hidden = rms_norm(x, lnf_g, lnf_b, kNormEps);
  out.logits = matmul_nt(out.hidden, tok_emb);
  out.pooled = pool_output_embedding(out.hidden, doc_proj);
  return out;
}

Tensor temporal_coherence_loss(const std::vector<LayerRecord>& layers, std::span<const double> days) {
  const std::size_t T = days.size();
  Tensor later({T, T});
  auto l = later.mutable_data();
  bool any = false;
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j)
      if (days[j] > days[i]) {
        l[i * T + j] = 1.0;
        any = true;
      }
  std::size_t heads = 0;
  Tensor acc;
  for (const auto& rec : layers)
    for (const auto& w : rec.head_weights) {
      if (w.rows() != T || w.cols() != T) throw DimensionError("temporal_coherence_loss: weight shape mismatch");
      ++heads;
      if (!any) continue;
      Tensor s = sum(mul(w, later));
      acc = acc.defined() ? add(acc, s) : s;
    }
  if (heads == 0) throw InputError("temporal_coherence_loss: no attention records");
  if (!acc.defined()) return Tensor::scalar(0.0);
  return scale(acc, 1.0 / static_cast<double>(heads * T));
}

LossBreakdown SdlmModel::total_loss(const PackedContext& ctx) const { return total_loss(ctx, forward(ctx)); }

LossBreakdown SdlmModel::total_loss(const PackedContext& ctx, const ForwardOutput& out) const {
  LossBreakdown lb;
  lb.l_clm = cross_entropy(out.logits, ctx.targets);
  lb.l_doctrine = doctrine.size() > 0 ? doctrine_loss(out.pooled, doctrine, 1.0) : Tensor::scalar(0.0);
  lb.l_temporal = temporal_coherence_loss(out.layers, ctx.days);
  lb.total = add(add(lb.l_clm, scale(lb.l_doctrine, cfg_.lambda_doc)), scale(lb.l_temporal, cfg_.lambda_temp));
  return lb;
}

// ---------------------------------------------------------------------------
// Doctrine

std::vector<double> embed_text(const SdlmModel& model, const Vocabulary& vocab, std::string_view text) {
  auto ids = vocab.encode(text);
  if (ids.empty()) throw InputError("embed_text: empty text");
  const auto d = model.config().d_model;
  const double s = std::sqrt(static_cast<double>(d));
  std::vector<double> out(d, 0.0);
  for (int id : ids) {
    if (static_cast<std::size_t>(id) >= model.config().vocab_size)
      throw IndexError("embed_text: token id outside the model vocabulary");
    for (std::size_t c = 0; c < d; ++c) out[c] += s * model.tok_emb(static_cast<std::size_t>(id), c);
  }
  for (auto& v : out) v /= static_cast<double>(ids.size());
  return out;
}

const std::vector<DoctrinePrincipleText>& default_doctrine_principles() {
  static const std::vector<DoctrinePrincipleText> p{
      {"mass", "Commanders concentrate combat power at the decisive point and time."},
      {"unity_of_command", "Every unit answers to a single commander for each objective."},
      {"security", "Forces protect the supply route and never permit the enemy an unexpected advantage."},
      {"economy_of_force", "Minimal combat power is allocated to secondary efforts."},
      {"joint_action", "Land, air, sea, space and cyber forces act together under one plan."},
      {"restraint", "Force is used only as far as the mission requires, under the rules of engagement."}};
  return p;
}

std::vector<DoctrinePrincipleText> read_doctrine_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read doctrine file " + path.string());
  std::vector<DoctrinePrincipleText> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("name").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw InputError(path.string() + ": no principles");
  return out;
}

void install_doctrine(SdlmModel& model, const Vocabulary& vocab,
                      const std::vector<DoctrinePrincipleText>& principles) {
  std::vector<std::string> names;
  std::vector<std::vector<double>> embs;
  for (const auto& p : principles) {
    names.push_back(p.name);
    embs.push_back(embed_text(model, vocab, p.text));
  }
  model.doctrine = DoctrineEmbeddingSet(std::move(names), std::move(embs), true);
}

// ---------------------------------------------------------------------------
// Evaluation and decoding

std::vector<double> token_nll(const SdlmModel& model, const std::vector<PackedContext>& windows) {
  NoGradGuard guard;
  std::vector<double> out;
  for (const auto& w : windows) {
    auto lsm = log_softmax_rows(model.forward(w).logits);
    for (std::size_t i = 0; i < w.size(); ++i)
      out.push_back(-lsm(i, static_cast<std::size_t>(w.targets[i])));
  }
  return out;
}

double evaluate_perplexity(const SdlmModel& model, const std::vector<PackedContext>& windows) {
  auto nll = token_nll(model, windows);
  if (nll.empty()) throw InputError("evaluate_perplexity: no windows");
  double s = 0.0;
  for (double v : nll) s += v;
  return std::exp(s / static_cast<double>(nll.size()));
}

double evaluate_anachronism(const SdlmModel& model, const std::vector<PackedContext>& windows) {
  if (windows.empty()) throw InputError("evaluate_anachronism: no windows");
  NoGradGuard guard;
  double s = 0.0;
  for (const auto& w : windows) s += temporal_coherence_loss(model.forward(w).layers, w.days).item();
  return s / static_cast<double>(windows.size());
}

std::vector<int> generate(const SdlmModel& model, const std::vector<int>& prompt, const GenerateOptions& opts) {
  if (opts.max_new < 1) throw InputError("generate: max_new must be at least 1");
  if (prompt.empty()) throw InputError("generate: empty prompt");
  if (!opts.greedy && !(opts.temperature > 0.0)) throw InputError("generate: temperature must be positive");
  if (prompt.size() + opts.max_new - 1 > model.config().max_context)
    throw TruncationError("generate: prompt of " + std::to_string(prompt.size()) + " plus " +
                          std::to_string(opts.max_new) + " new tokens exceeds max_context " +
                          std::to_string(model.config().max_context));
  NoGradGuard guard;
  Rng rng(opts.seed);
  std::vector<int> seq = prompt;
  const std::size_t V = model.config().vocab_size;
  for (std::size_t step = 0; step < opts.max_new; ++step) {
    PackedContext ctx;
    ctx.tokens = seq;
    ctx.targets.assign(seq.size(), 0);
    ctx.doc_index.assign(seq.size(), 0);
    ctx.days.assign(seq.size(), 0.0);
    ctx.domains.assign(seq.size(), Domain::land);
    auto logits = model.forward(ctx).logits;
    const std::size_t last = seq.size() - 1;
    int next = 0;
    if (opts.greedy) {
      double best = -INFINITY;
      for (std::size_t v = 0; v < V; ++v)
        if (logits(last, v) > best) {
          best = logits(last, v);
          next = static_cast<int>(v);
        }
    } else {
      double mx = -INFINITY;
      for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, logits(last, v));
      std::vector<double> p(V);
      double z = 0.0;
      for (std::size_t v = 0; v < V; ++v) z += (p[v] = std::exp((logits(last, v) - mx) / opts.temperature));
      double u = rng.uniform() * z;
      next = static_cast<int>(V - 1);
      for (std::size_t v = 0; v < V; ++v) {
        u -= p[v];
        if (u < 0.0) {
          next = static_cast<int>(v);
          break;
        }
      }
    }
    seq.push_back(next);
  }
  return seq;
}

}  // namespace sdlm
