#pragma once

// Post-training INT8 weight quantization and latency profiling.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sdlm/model.hpp"
#include "sdlm/tensor.hpp"

namespace sdlm {

/// Per-row symmetric INT8: w[i][j] ~= values[i][j] * scales[i].
struct QuantizedMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::int8_t> values;  // row-major
  std::vector<double> scales;       // one per row, positive

  std::int8_t value(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  Tensor dequantize() const;
};

/// scale = max|row| / 127 (1 for an all-zero row); values rounded half away from zero.
QuantizedMatrix quantize_int8(const Tensor& w);

/// q (R x C) times x (C x N); accumulates int8 * double per row, then rescales.
Tensor quantized_matmul(const QuantizedMatrix& q, const Tensor& x);
/// x (N x C) times q^T, i.e. a linear layer whose output channels are q's rows.
Tensor quantized_linear(const Tensor& x, const QuantizedMatrix& q);

struct QuantizationReport {
  std::size_t matrices = 0;
  std::size_t weights = 0;
  double max_abs_error = 0.0;
  std::vector<std::string> names;
};

/// Replaces every weight matrix (projections, embeddings, doctrine projection)
/// with its INT8 round trip, one scale per output channel. Norm parameters,
/// biases and scalars are left in full precision.
QuantizationReport quantize_model_weights(SdlmModel& model);

// ---------------------------------------------------------------------------
// Latency

struct LatencyPoint {
  std::size_t length = 0;
  double seconds = 0.0;  // median over repetitions
  double tokens_per_sec = 0.0;
  std::string variant;
};

struct LogLogFit {
  std::string variant;
  double slope = 0.0;
  double intercept = 0.0;
  double residual = 0.0;  // RMS residual in log space
};

struct LatencyProfile {
  std::vector<LatencyPoint> points;
  std::vector<LogLogFit> fits;
  std::string machine;

  const LogLogFit& fit(const std::string& variant) const;
};

/// Least squares of log(seconds) on log(length).
LogLogFit fit_loglog(const std::vector<LatencyPoint>& points, const std::string& variant);

/// Single-head attention, T x d inputs, no mask; naive materialises the
/// score matrix, blocked streams key tiles with an online softmax.
std::vector<double> attention_naive(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, std::size_t T, std::size_t d);
std::vector<double> attention_blocked(const std::vector<double>& q, const std::vector<double>& k,
                                      const std::vector<double>& v, std::size_t T, std::size_t d,
                                      std::size_t block = 64);

/// Attention-only microbenchmark: variants attention-naive and attention-blocked.
LatencyProfile attention_profile(const std::vector<std::size_t>& lengths, std::size_t d_head, int repetitions,
                                 std::uint64_t seed);

/// Full forward of the model (variant "model") and a T x d by d x d projection
/// in full precision and INT8 (variants "linear-fp64", "linear-int8").
/// One warm-up run per point is excluded from the median.
LatencyProfile latency_profile(const SdlmModel& model, const std::vector<std::size_t>& lengths, int repetitions,
                               std::uint64_t seed);

/// length,seconds,tokens_per_sec,variant with machine and fit header comments.
void write_latency_csv(const std::filesystem::path& path, const LatencyProfile& profile);

}  // namespace sdlm
