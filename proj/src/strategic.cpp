#include "sdlm/strategic.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "sdlm/attention.hpp"
#include "sdlm/init.hpp"

namespace sdlm {

DoctrineEmbeddingSet::DoctrineEmbeddingSet(std::vector<std::string> names,
                                           std::vector<std::vector<double>> embeddings,
                                           bool frozen) {
  if (names.size() != embeddings.size())
    throw DimensionError("doctrine set: one embedding per principle name required");
  for (std::size_t i = 0; i < names.size(); ++i) add(std::move(names[i]), std::move(embeddings[i]));
  frozen_ = frozen;
}

void DoctrineEmbeddingSet::add(std::string name, std::vector<double> embedding) {
  if (frozen_) throw ContractError("doctrine set is frozen");
  if (embedding.empty()) throw InputError("doctrine set: empty embedding for '" + name + "'");
  if (width_ == 0) width_ = embedding.size();
  if (embedding.size() != width_)
    throw DimensionError("doctrine set: embedding width " + std::to_string(embedding.size()) +
                         " != " + std::to_string(width_));
  for (double v : embedding)
    if (!std::isfinite(v)) throw NumericError("doctrine set: non-finite embedding for '" + name + "'");
  names_.push_back(std::move(name));
  data_.insert(data_.end(), embedding.begin(), embedding.end());
}

std::span<const double> DoctrineEmbeddingSet::embedding(std::size_t i) const {
  if (i >= size()) throw IndexError("doctrine set: principle index out of range");
  return std::span<const double>(data_).subspan(i * width_, width_);
}

Tensor DoctrineEmbeddingSet::row(std::size_t i) const {
  auto e = embedding(i);
  return Tensor({1, width_}, std::vector<double>(e.begin(), e.end()));
}

Tensor pool_output_embedding(const Tensor& hidden, const Tensor& projection) {
  if (!hidden.defined() || hidden.rows() == 0 || hidden.numel() == 0)
    throw InputError("pool_output_embedding: empty sequence");
  if (hidden.cols() != projection.rows())
    throw DimensionError("pool_output_embedding: hidden width " + std::to_string(hidden.cols()) +
                         " != projection rows " + std::to_string(projection.rows()));
  return matmul(mean_rows(hidden), projection);
}

namespace {

double euclid(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw InputError("cosine similarity of a zero vector");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace

std::size_t nearest_principle(std::span<const double> emb, const DoctrineEmbeddingSet& doctrine) {
  if (doctrine.size() == 0) throw InputError("doctrine set is empty");
  if (emb.size() != doctrine.width())
    throw DimensionError("doctrine: embedding width " + std::to_string(emb.size()) +
                         " != principle width " + std::to_string(doctrine.width()));
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t p = 0; p < doctrine.size(); ++p) {
    const double d = euclid(emb, doctrine.embedding(p));
    if (d < best_d) {
      best_d = d;
      best = p;
    }
  }
  return best;
}

Tensor doctrine_loss(const Tensor& emb_out, const DoctrineEmbeddingSet& doctrine, double lambda) {
  if (lambda < 0.0) throw ConfigError("doctrine_loss: lambda must be non-negative");
  const auto p = nearest_principle(emb_out.data(), doctrine);
  if (emb_out.rows() != 1) throw DimensionError("doctrine_loss: expected a single embedding row");
  return scale(l2_norm(sub(emb_out, doctrine.row(p))), lambda);
}

double doctrine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("doctrine_similarity: width mismatch");
  return cosine(a, b);
}

ConsistencyVerdict consistency_verdict(std::span<const double> statement,
                                       const DoctrineEmbeddingSet& doctrine, double threshold) {
  if (!(threshold >= -1.0 && threshold <= 1.0))
    throw InputError("consistency_verdict: threshold must lie in [-1, 1]");
  if (doctrine.size() == 0) throw InputError("doctrine set is empty");
  if (statement.size() != doctrine.width()) throw DimensionError("consistency_verdict: width mismatch");
  ConsistencyVerdict v;
  v.similarity = -INFINITY;
  for (std::size_t p = 0; p < doctrine.size(); ++p) {
    const double c = cosine(statement, doctrine.embedding(p));
    if (c > v.similarity) {
      v.similarity = c;
      v.principle = p;
    }
  }
  v.consistent = v.similarity >= threshold;
  return v;
}

// ---------------------------------------------------------------------------

DomainFusionParams DomainFusionParams::init(std::size_t d_model, Rng& rng) {
  DomainFusionParams p;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d_model));
  for (std::size_t d = 0; d < kNumDomains; ++d) {
    p.gate[d] = scalar_param(1.0 / static_cast<double>(kNumDomains));
    p.attn[d].Wq = normal_param(d_model, d_model, sd, rng);
    p.attn[d].Wk = normal_param(d_model, d_model, sd, rng);
    p.attn[d].Wv = normal_param(d_model, d_model, sd, rng);
    p.attn[d].Wo = normal_param(d_model, d_model, sd, rng);
  }
  return p;
}

std::vector<Tensor> DomainFusionParams::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t d = 0; d < kNumDomains; ++d) {
    out.push_back(gate[d]);
    out.push_back(attn[d].Wq);
    out.push_back(attn[d].Wk);
    out.push_back(attn[d].Wv);
    out.push_back(attn[d].Wo);
  }
  return out;
}

FusionResult domain_fuse(const std::vector<DomainStates>& states, const DomainFusionParams& params) {
  if (states.empty()) throw InputError("domain_fuse: no domain present");
  const std::size_t width = params.width();
  std::vector<const DomainStates*> sorted;
  std::set<Domain> seen;
  bool with_positions = true;
  for (const auto& s : states) {
    if (!seen.insert(s.domain).second)
      throw InputError("domain_fuse: domain '" + std::string(to_string(s.domain)) + "' given twice");
    if (s.states.cols() != width)
      throw DimensionError("domain_fuse: state width " + std::to_string(s.states.cols()) +
                           " != fusion width " + std::to_string(width));
    if (s.positions.empty()) {
      with_positions = false;
    } else if (s.positions.size() != s.states.rows()) {
      throw DimensionError("domain_fuse: one position per state row required");
    }
    sorted.push_back(&s);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const DomainStates* a, const DomainStates* b) { return a->domain < b->domain; });

  FusionResult res;
  for (const auto* cur : sorted) {
    const auto di = static_cast<std::size_t>(cur->domain);
    const Tensor& H = cur->states;
    std::vector<Tensor> others;
    std::vector<std::size_t> other_pos;
    for (const auto* o : sorted) {
      if (o == cur) continue;
      others.push_back(o->states);
      if (with_positions) other_pos.insert(other_pos.end(), o->positions.begin(), o->positions.end());
    }
    res.order.push_back(cur->domain);
    if (others.empty()) {
      res.terms.push_back(mul_scalar(params.gate[di], H));
      continue;
    }
    const auto& P = params.attn[di];
    Tensor Ho = concat_rows(others);
    Tensor Q = matmul(H, P.Wq), K = matmul(Ho, P.Wk), V = matmul(Ho, P.Wv);
    Tensor mask;
    std::vector<bool> blind(H.rows(), false);
    bool any_blind = false;
    if (with_positions) {
      mask = Tensor::zeros(H.rows(), Ho.rows());
      auto m = mask.mutable_data();
      for (std::size_t i = 0; i < H.rows(); ++i) {
        bool visible = false;
        for (std::size_t j = 0; j < Ho.rows(); ++j) {
          if (other_pos[j] > cur->positions[i]) {
            m[i * Ho.rows() + j] = kMaskedScore;
          } else {
            visible = true;
          }
        }
        blind[i] = !visible;
        any_blind = any_blind || !visible;
      }
    }
    Tensor out = matmul(multi_doc_attention(Q, K, V, width, mask, false).values, P.Wo);
    if (any_blind) {
      Tensor keep({H.rows(), width}), pass({H.rows(), width});
      auto k = keep.mutable_data(), p = pass.mutable_data();
      for (std::size_t i = 0; i < H.rows(); ++i)
        for (std::size_t c = 0; c < width; ++c) {
          k[i * width + c] = blind[i] ? 0.0 : 1.0;
          p[i * width + c] = blind[i] ? 1.0 : 0.0;
        }
      out = add(mul(out, keep), mul(H, pass));
    }
    res.terms.push_back(mul_scalar(params.gate[di], out));
  }
  res.fused = res.terms.size() == 1 ? res.terms[0] : concat_rows(res.terms);
  return res;
}

}  // namespace sdlm
