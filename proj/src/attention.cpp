#include "sdlm/attention.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace sdlm {

void TemporalPEConfig::validate() const {
  if (d_model == 0 || d_model % 2 != 0)
    throw ConfigError("temporal PE: d_model must be positive and even, got " + std::to_string(d_model));
  if (!(T_strategic > 0.0)) throw ConfigError("temporal PE: T_strategic must be positive");
  if (!std::isfinite(alpha)) throw ConfigError("temporal PE: alpha must be finite");
}

std::vector<double> sinusoidal_pe(std::int64_t pos, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0)
    throw ConfigError("sinusoidal_pe: d_model must be positive and even, got " + std::to_string(d_model));
  if (pos < 0) throw InputError("sinusoidal_pe: negative position");
  std::vector<double> out(d_model);
  for (std::size_t i = 0; i < d_model / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d_model));
    const double a = static_cast<double>(pos) * freq;
    out[2 * i] = std::sin(a);
    out[2 * i + 1] = std::cos(a);
  }
  return out;
}

std::vector<double> temporal_pe(std::int64_t pos, double t, const TemporalPEConfig& cfg) {
  cfg.validate();
  if (t < 0.0) throw InputError("temporal_pe: negative day index");
  auto pe = sinusoidal_pe(pos, cfg.d_model);
  const double offset = cfg.alpha * std::sin(2.0 * std::numbers::pi * t / cfg.T_strategic);
  for (auto& v : pe) v += offset;
  return pe;
}

Tensor sinusoidal_pe_matrix(std::size_t T, std::size_t d_model) {
  std::vector<double> data;
  data.reserve(T * d_model);
  for (std::size_t p = 0; p < T; ++p) {
    auto row = sinusoidal_pe(static_cast<std::int64_t>(p), d_model);
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({T, d_model}, std::move(data));
}

Tensor temporal_pe_matrix(std::span<const double> days, std::size_t d_model, double period,
                          const Tensor& alpha) {
  if (!(period > 0.0)) throw ConfigError("temporal_pe_matrix: period must be positive");
  const std::size_t T = days.size();
  Tensor base = sinusoidal_pe_matrix(T, d_model);
  Tensor wave({T, d_model});
  auto w = wave.mutable_data();
  for (std::size_t p = 0; p < T; ++p) {
    if (days[p] < 0.0) throw InputError("temporal_pe_matrix: negative day index");
    const double s = std::sin(2.0 * std::numbers::pi * days[p] / period);
    for (std::size_t c = 0; c < d_model; ++c) w[p * d_model + c] = s;
  }
  return add(base, mul_scalar(alpha, wave));
}

DocMaskParams DocMaskParams::zeros() { return constant(0.0, 0.0); }

DocMaskParams DocMaskParams::constant(double same, double cross) {
  DocMaskParams p;
  p.b_same = Tensor::scalar(same);
  p.b_cross = Tensor::scalar(cross);
  p.b_same.set_requires_grad();
  p.b_cross.set_requires_grad();
  return p;
}

Tensor cross_doc_indicator(std::span<const int> query_docs, std::span<const int> key_docs) {
  Tensor m({query_docs.size(), key_docs.size()});
  auto d = m.mutable_data();
  for (std::size_t i = 0; i < query_docs.size(); ++i)
    for (std::size_t j = 0; j < key_docs.size(); ++j)
      d[i * key_docs.size() + j] = query_docs[i] != key_docs[j] ? 1.0 : 0.0;
  return m;
}

Tensor build_doc_mask(std::span<const int> query_docs, std::span<const int> key_docs,
                      const DocMaskParams& params) {
  Tensor cross = cross_doc_indicator(query_docs, key_docs);
  Tensor same({query_docs.size(), key_docs.size()});
  auto s = same.mutable_data();
  const auto c = cross.data();
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = 1.0 - c[i];
  return add(mul_scalar(params.b_same, same), mul_scalar(params.b_cross, cross));
}

Tensor causal_mask(std::size_t T) {
  if (T < 1) throw InputError("causal_mask: T must be at least 1");
  Tensor m({T, T});
  auto d = m.mutable_data();
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) d[i * T + j] = kMaskedScore;
  return m;
}

AttentionOutput multi_doc_attention(const Tensor& Q, const Tensor& K, const Tensor& V,
                                    std::size_t d_k, const Tensor& M_doc, bool causal,
                                    std::span<const int> query_docs,
                                    std::span<const int> key_docs) {
  if (Q.cols() != K.cols())
    throw DimensionError("multi_doc_attention: query width " + std::to_string(Q.cols()) +
                         " != key width " + std::to_string(K.cols()));
  if (d_k != K.cols())
    throw DimensionError("multi_doc_attention: d_k " + std::to_string(d_k) + " != key width " +
                         std::to_string(K.cols()));
  if (K.rows() != V.rows())
    throw DimensionError("multi_doc_attention: key rows " + std::to_string(K.rows()) +
                         " != value rows " + std::to_string(V.rows()));
  if (causal && Q.rows() != K.rows())
    throw DimensionError("multi_doc_attention: causal attention needs square scores");
  const std::size_t Tq = Q.rows(), Tk = K.rows();
  Tensor scores = scale(matmul_nt(Q, K), 1.0 / std::sqrt(static_cast<double>(d_k)));
  if (M_doc.defined()) {
    if (M_doc.rows() != Tq || M_doc.cols() != Tk)
      throw DimensionError("multi_doc_attention: M_doc must be " + std::to_string(Tq) + "x" +
                           std::to_string(Tk));
    scores = add(scores, M_doc);
  }
  if (causal) scores = add(scores, causal_mask(Tq));
  AttentionOutput out;
  out.weights = softmax_rows(scores);
  out.values = matmul(out.weights, V);
  if (!query_docs.empty() || !key_docs.empty()) {
    if (query_docs.size() != Tq || key_docs.size() != Tk)
      throw DimensionError("multi_doc_attention: document id lengths do not match Q/K rows");
    out.cross_doc_mass = sum_cols(mul(out.weights, cross_doc_indicator(query_docs, key_docs)));
  } else {
    out.cross_doc_mass = Tensor::zeros(Tq, 1);
  }
  return out;
}

std::vector<double> reference_attention(const Tensor& Q, const Tensor& K, const Tensor& V,
                                        std::size_t d_k, bool causal) {
  const std::size_t Tq = Q.rows(), Tk = K.rows(), dv = V.cols();
  std::vector<double> out(Tq * dv, 0.0);
  for (std::size_t i = 0; i < Tq; ++i) {
    const std::size_t limit = causal ? i + 1 : Tk;
    std::vector<double> s(limit);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < limit; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < Q.cols(); ++c) acc += Q(i, c) * K(j, c);
      s[j] = acc / std::sqrt(static_cast<double>(d_k));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& v : s) z += (v = std::exp(v - mx));
    for (std::size_t j = 0; j < limit; ++j)
      for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += s[j] / z * V(j, c);
  }
  return out;
}

Tensor cross_doc_contrastive_loss(const std::vector<AttentionOutput>& outputs,
                                  const std::vector<bool>& is_multi_doc) {
  if (outputs.size() != is_multi_doc.size())
    throw DimensionError("cross_doc_contrastive_loss: one label per example required");
  std::vector<Tensor> multi, single;
  for (std::size_t i = 0; i < outputs.size(); ++i)
    (is_multi_doc[i] ? multi : single).push_back(mean(outputs[i].cross_doc_mass));
  if (multi.empty() || single.empty())
    throw InputError("cross_doc_contrastive_loss: batch needs both multi-doc and single-doc examples");
  auto avg = [](const std::vector<Tensor>& v) {
    Tensor acc = v[0];
    for (std::size_t i = 1; i < v.size(); ++i) acc = add(acc, v[i]);
    return scale(acc, 1.0 / static_cast<double>(v.size()));
  };
  return softplus(scale(sub(avg(multi), avg(single)), -1.0));
}

}  // namespace sdlm
