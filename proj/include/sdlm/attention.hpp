#pragma once

// Position encodings and attention with a learned document-level bias.

#include <cstdint>
#include <span>
#include <vector>

#include "sdlm/errors.hpp"
#include "sdlm/tensor.hpp"

namespace sdlm {

inline constexpr double kMaskedScore = -1e9;
inline constexpr double kDefaultStrategicPeriod = 7300.0;

struct TemporalPEConfig {
  std::size_t d_model = 64;
  double T_strategic = kDefaultStrategicPeriod;
  double alpha = 0.1;  // initial value when used as a learned parameter

  void validate() const;
};

/// Interleaved sin/cos: entry 2i = sin(pos / 10000^(2i/d)), entry 2i+1 = cos(...).
std::vector<double> sinusoidal_pe(std::int64_t pos, std::size_t d_model);

/// sinusoidal_pe(pos) + alpha * sin(2 pi t / T_strategic) on every coordinate.
std::vector<double> temporal_pe(std::int64_t pos, double t, const TemporalPEConfig& cfg);

/// T x d matrix of sinusoidal_pe rows for positions 0..T-1.
Tensor sinusoidal_pe_matrix(std::size_t T, std::size_t d_model);

/// Differentiable in alpha (a one-element tensor): PE rows plus alpha * sin(2 pi t_i / period).
Tensor temporal_pe_matrix(std::span<const double> days, std::size_t d_model, double period,
                          const Tensor& alpha);

struct DocMaskParams {
  Tensor b_same;
  Tensor b_cross;

  /// Both biases zero, marked as trainable.
  static DocMaskParams zeros();
  static DocMaskParams constant(double same, double cross);
};

/// M[i,j] = b_same if doc(i) == doc(j) else b_cross. Differentiable in both scalars.
Tensor build_doc_mask(std::span<const int> query_docs, std::span<const int> key_docs,
                      const DocMaskParams& params);
inline Tensor build_doc_mask(std::span<const int> doc_ids, const DocMaskParams& params) {
  return build_doc_mask(doc_ids, doc_ids, params);
}

/// Constant matrix: 0 on and below the diagonal, kMaskedScore above.
Tensor causal_mask(std::size_t T);

/// 1 where key and query documents differ, else 0.
Tensor cross_doc_indicator(std::span<const int> query_docs, std::span<const int> key_docs);

struct AttentionOutput {
  Tensor values;          // Tq x d_v
  Tensor weights;         // Tq x Tk, rows sum to 1
  Tensor cross_doc_mass;  // Tq x 1; zeros when document ids are not supplied
};

/// softmax(Q K^T / sqrt(d_k) + M_doc [+ causal]) V. M_doc may be undefined
/// (treated as zero). Document ids, when given, drive cross_doc_mass.
AttentionOutput multi_doc_attention(const Tensor& Q, const Tensor& K, const Tensor& V,
                                    std::size_t d_k, const Tensor& M_doc, bool causal,
                                    std::span<const int> query_docs = {},
                                    std::span<const int> key_docs = {});

/// Reference scaled dot-product attention built from plain loops.
std::vector<double> reference_attention(const Tensor& Q, const Tensor& K, const Tensor& V,
                                        std::size_t d_k, bool causal);

/// -log sigmoid(mean multi-doc mass - mean single-doc mass), where an
/// example's mass is the mean of its per-query cross_doc_mass.
Tensor cross_doc_contrastive_loss(const std::vector<AttentionOutput>& outputs,
                                  const std::vector<bool>& is_multi_doc);

}  // namespace sdlm
