#pragma once

// Doctrine-consistency head and multi-domain fusion.

#include <array>
#include <span>
#include <string>
#include <vector>

#include "sdlm/corpus.hpp"
#include "sdlm/errors.hpp"
#include "sdlm/rng.hpp"
#include "sdlm/tensor.hpp"

namespace sdlm {

inline constexpr double kDefaultDoctrineLambda = 0.15;

/// Named principle embeddings. A frozen set refuses mutation.
class DoctrineEmbeddingSet {
 public:
  DoctrineEmbeddingSet() = default;
  DoctrineEmbeddingSet(std::vector<std::string> names, std::vector<std::vector<double>> embeddings,
                       bool frozen = true);

  std::size_t size() const { return names_.size(); }
  std::size_t width() const { return width_; }
  bool frozen() const { return frozen_; }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  std::span<const double> embedding(std::size_t i) const;
  /// Constant 1 x width row for principle i.
  Tensor row(std::size_t i) const;

  void add(std::string name, std::vector<double> embedding);
  void freeze() { frozen_ = true; }

 private:
  std::vector<std::string> names_;
  std::vector<double> data_;
  std::size_t width_ = 0;
  bool frozen_ = false;
};

struct DoctrineHeadConfig {
  double lambda = kDefaultDoctrineLambda;
};

/// Mean over positions, then hidden-to-doctrine projection. Returns 1 x d_doc.
Tensor pool_output_embedding(const Tensor& hidden, const Tensor& projection);

/// lambda * min_p ||emb_out - p||_2. Ties pick the first principle.
Tensor doctrine_loss(const Tensor& emb_out, const DoctrineEmbeddingSet& doctrine, double lambda);

/// Index of the nearest principle by Euclidean distance (first on ties).
std::size_t nearest_principle(std::span<const double> emb, const DoctrineEmbeddingSet& doctrine);

double doctrine_similarity(std::span<const double> a, std::span<const double> b);

struct ConsistencyVerdict {
  bool consistent = false;
  std::size_t principle = 0;  // argmax cosine, first on ties
  double similarity = 0.0;
};

ConsistencyVerdict consistency_verdict(std::span<const double> statement,
                                       const DoctrineEmbeddingSet& doctrine, double threshold);

// ---------------------------------------------------------------------------
// Multi-domain fusion

struct CrossAttentionParams {
  Tensor Wq, Wk, Wv, Wo;  // d x d each
};

struct DomainFusionParams {
  std::array<Tensor, kNumDomains> gate;  // one-element W_d
  std::array<CrossAttentionParams, kNumDomains> attn;

  /// Gates start at 1/kNumDomains; projections N(0, 1/d).
  static DomainFusionParams init(std::size_t d_model, Rng& rng);
  std::vector<Tensor> parameters() const;
  std::size_t width() const { return attn[0].Wq.rows(); }
};

struct DomainStates {
  Domain domain = Domain::land;
  Tensor states;  // rows of this domain
  /// Original sequence positions of the rows. When set for every domain, a
  /// query only sees other-domain rows at earlier or equal positions.
  std::vector<std::size_t> positions;
};

struct FusionResult {
  std::vector<Domain> order;  // present domains, ascending
  std::vector<Tensor> terms;  // W_d * CrossAttention(H_d, H_other), aligned with order
  Tensor fused;               // terms stacked by row in `order`
};

/// Queries with no visible other-domain row (including the single-domain
/// case) pass through as W_d * H_d.
FusionResult domain_fuse(const std::vector<DomainStates>& states, const DomainFusionParams& params);

}  // namespace sdlm
