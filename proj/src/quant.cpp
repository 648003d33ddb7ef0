#include "sdlm/quant.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "sdlm/errors.hpp"
#include "sdlm/machine.hpp"
#include "sdlm/rng.hpp"

namespace sdlm {

Tensor QuantizedMatrix::dequantize() const {
  Tensor out({rows, cols});
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = static_cast<double>(values[r * cols + c]) * scales[r];
  return out;
}

QuantizedMatrix quantize_int8(const Tensor& w) {
  if (w.rank() != 2) throw DimensionError("quantize_int8: expected a matrix");
  QuantizedMatrix q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.values.resize(q.rows * q.cols);
  q.scales.resize(q.rows);
  const auto d = w.data();
  for (std::size_t r = 0; r < q.rows; ++r) {
    double amax = 0.0;
    for (std::size_t c = 0; c < q.cols; ++c) {
      const double x = d[r * q.cols + c];
      if (!std::isfinite(x)) throw NumericError("quantize_int8: non-finite weight");
      amax = std::max(amax, std::abs(x));
    }
    const double scale = amax > 0.0 ? amax / 127.0 : 1.0;
    q.scales[r] = scale;
    for (std::size_t c = 0; c < q.cols; ++c) {
      const double v = std::clamp(std::round(d[r * q.cols + c] / scale), -127.0, 127.0);
      q.values[r * q.cols + c] = static_cast<std::int8_t>(v);
    }
  }
  return q;
}

Tensor quantized_matmul(const QuantizedMatrix& q, const Tensor& x) {
  if (x.rank() != 2 || x.rows() != q.cols)
    throw DimensionError("quantized_matmul: " + std::to_string(q.rows) + "x" + std::to_string(q.cols) +
                         " weights cannot multiply the input");
  const std::size_t N = x.cols();
  Tensor out({q.rows, N});
  auto o = out.mutable_data();
  const auto xd = x.data();
  std::vector<double> acc(N);
  for (std::size_t r = 0; r < q.rows; ++r) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t c = 0; c < q.cols; ++c) {
      const double v = q.values[r * q.cols + c];
      if (v == 0.0) continue;
      const double* xr = &xd[c * N];
      for (std::size_t n = 0; n < N; ++n) acc[n] += v * xr[n];
    }
    for (std::size_t n = 0; n < N; ++n) o[r * N + n] = acc[n] * q.scales[r];
  }
  return out;
}

Tensor quantized_linear(const Tensor& x, const QuantizedMatrix& q) {
  if (x.rank() != 2 || x.cols() != q.cols)
    throw DimensionError("quantized_linear: input width " + std::to_string(x.rank() == 2 ? x.cols() : 0) +
                         " does not match " + std::to_string(q.cols));
  const std::size_t N = x.rows();
  Tensor out({N, q.rows});
  auto o = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t n = 0; n < N; ++n) {
    const double* xr = &xd[n * q.cols];
    for (std::size_t r = 0; r < q.rows; ++r) {
      const std::int8_t* qr = &q.values[r * q.cols];
      double acc = 0.0;
      for (std::size_t c = 0; c < q.cols; ++c) acc += static_cast<double>(qr[c]) * xr[c];
      o[n * q.rows + r] = acc * q.scales[r];
    }
  }
  return out;
}

namespace {

Tensor transposed(const Tensor& w) {
  Tensor t({w.cols(), w.rows()});
  auto o = t.mutable_data();
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) o[c * w.rows() + r] = w(r, c);
  return t;
}

std::string leaf(const std::string& name) {
  const auto dot = name.rfind('.');
  return dot == std::string::npos ? name : name.substr(dot + 1);
}

}  // namespace

QuantizationReport quantize_model_weights(SdlmModel& model) {
  QuantizationReport rep;
  for (auto& [name, t] : model.named_tensors()) {
    if (t.rank() != 2 || t.rows() < 2 || t.cols() < 2) continue;
    const std::string l = leaf(name);
    const bool projection = !l.empty() && l[0] == 'W';
    if (!projection && name != "tok_emb" && name != "doc_proj") continue;
    // Projections are applied as x * W, so output channels are columns.
    const Tensor src = projection ? transposed(t) : t;
    const Tensor back = quantize_int8(src).dequantize();
    const Tensor restored = projection ? transposed(back) : back;
    auto dst = t.mutable_data();
    const auto r = restored.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      rep.max_abs_error = std::max(rep.max_abs_error, std::abs(dst[i] - r[i]));
      dst[i] = r[i];
    }
    ++rep.matrices;
    rep.weights += dst.size();
    rep.names.push_back(name);
  }
  return rep;
}

// ---------------------------------------------------------------------------

const LogLogFit& LatencyProfile::fit(const std::string& variant) const {
  for (const auto& f : fits)
    if (f.variant == variant) return f;
  throw InputError("latency profile has no variant '" + variant + "'");
}

LogLogFit fit_loglog(const std::vector<LatencyPoint>& points, const std::string& variant) {
  std::vector<double> xs, ys;
  for (const auto& p : points)
    if (p.variant == variant) {
      if (!(p.seconds > 0.0) || p.length == 0) throw NumericError("fit_loglog: non-positive measurement");
      xs.push_back(std::log(static_cast<double>(p.length)));
      ys.push_back(std::log(p.seconds));
    }
  if (xs.size() < 2) throw InputError("fit_loglog: need at least two points for '" + variant + "'");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0.0) throw InputError("fit_loglog: lengths must differ");
  LogLogFit f;
  f.variant = variant;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double e = ys[i] - (f.intercept + f.slope * xs[i]);
    ss += e * e;
  }
  f.residual = std::sqrt(ss / n);
  return f;
}

std::vector<double> attention_naive(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, std::size_t T, std::size_t d) {
  if (q.size() != T * d || k.size() != T * d || v.size() != T * d)
    throw DimensionError("attention_naive: inputs must be T x d");
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> s(T * T), out(T * d, 0.0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += q[i * d + c] * k[j * d + c];
      s[i * T + j] = acc * inv;
    }
  for (std::size_t i = 0; i < T; ++i) {
    double* row = &s[i * T];
    const double m = *std::max_element(row, row + T);
    double z = 0.0;
    for (std::size_t j = 0; j < T; ++j) z += (row[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < T; ++j) {
      const double p = row[j] / z;
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += p * v[j * d + c];
    }
  }
  return out;
}

std::vector<double> attention_blocked(const std::vector<double>& q, const std::vector<double>& k,
                                      const std::vector<double>& v, std::size_t T, std::size_t d,
                                      std::size_t block) {
  if (q.size() != T * d || k.size() != T * d || v.size() != T * d)
    throw DimensionError("attention_blocked: inputs must be T x d");
  if (block == 0) throw ContractError("attention_blocked: block size must be positive");
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> out(T * d, 0.0), s(block), acc(d);
  for (std::size_t i = 0; i < T; ++i) {
    double m = -INFINITY, z = 0.0;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j0 = 0; j0 < T; j0 += block) {
      const std::size_t j1 = std::min(T, j0 + block);
      double bm = -INFINITY;
      for (std::size_t j = j0; j < j1; ++j) {
        double a = 0.0;
        for (std::size_t c = 0; c < d; ++c) a += q[i * d + c] * k[j * d + c];
        s[j - j0] = a * inv;
        bm = std::max(bm, s[j - j0]);
      }
      const double nm = std::max(m, bm);
      const double rescale = std::exp(m - nm);
      z *= rescale;
      for (auto& a : acc) a *= rescale;
      for (std::size_t j = j0; j < j1; ++j) {
        const double p = std::exp(s[j - j0] - nm);
        z += p;
        for (std::size_t c = 0; c < d; ++c) acc[c] += p * v[j * d + c];
      }
      m = nm;
    }
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = acc[c] / z;
  }
  return out;
}

namespace {

void check_lengths(const std::vector<std::size_t>& lengths, int repetitions) {
  if (lengths.size() < 2) throw InputError("latency profile: need at least two lengths");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == 0) throw InputError("latency profile: zero length");
    if (i > 0 && lengths[i] <= lengths[i - 1]) throw InputError("latency profile: lengths must strictly increase");
  }
  if (repetitions < 3) throw InputError("latency profile: need at least three repetitions");
}

template <class F>
double median_seconds(int repetitions, F&& f) {
  f();  // warm-up
  std::vector<double> t;
  for (int r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  const auto n = t.size();
  return n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
}

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

void add_point(LatencyProfile& p, std::size_t len, double sec, const std::string& variant) {
  p.points.push_back({len, sec, sec > 0.0 ? static_cast<double>(len) / sec : 0.0, variant});
}

// Keeps the optimiser from discarding benchmark results.
volatile double g_sink = 0.0;

}  // namespace

LatencyProfile attention_profile(const std::vector<std::size_t>& lengths, std::size_t d_head, int repetitions,
                                 std::uint64_t seed) {
  check_lengths(lengths, repetitions);
  if (d_head == 0) throw InputError("attention_profile: d_head must be positive");
  LatencyProfile p;
  p.machine = machine_descriptor();
  Rng rng(seed);
  for (std::size_t T : lengths) {
    const auto q = random_vec(rng, T * d_head), k = random_vec(rng, T * d_head), v = random_vec(rng, T * d_head);
    add_point(p, T, median_seconds(repetitions, [&] { g_sink = g_sink + attention_naive(q, k, v, T, d_head)[0]; }),
              "attention-naive");
    add_point(p, T,
              median_seconds(repetitions, [&] { g_sink = g_sink + attention_blocked(q, k, v, T, d_head)[0]; }),
              "attention-blocked");
  }
  for (const char* v : {"attention-naive", "attention-blocked"}) p.fits.push_back(fit_loglog(p.points, v));
  return p;
}

LatencyProfile latency_profile(const SdlmModel& model, const std::vector<std::size_t>& lengths, int repetitions,
                               std::uint64_t seed) {
  check_lengths(lengths, repetitions);
  const auto& cfg = model.config();
  if (lengths.back() > cfg.max_context)
    throw InputError("latency_profile: length " + std::to_string(lengths.back()) + " exceeds max_context " +
                     std::to_string(cfg.max_context));
  LatencyProfile p;
  p.machine = machine_descriptor();
  Rng rng(seed);
  NoGradGuard guard;
  const std::size_t d = cfg.d_model;
  Tensor w({d, d});
  for (auto& x : w.mutable_data()) x = rng.normal() / std::sqrt(static_cast<double>(d));
  const auto qw = quantize_int8(w);
  for (std::size_t T : lengths) {
    PackedContext ctx;
    for (std::size_t i = 0; i < T; ++i) {
      ctx.tokens.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
      ctx.targets.push_back(static_cast<int>(rng.below(cfg.vocab_size)));
    }
    ctx.doc_index.assign(T, 0);
    ctx.days.assign(T, 0.0);
    ctx.domains.assign(T, Domain::land);
    add_point(p, T, median_seconds(repetitions, [&] { g_sink = g_sink + model.forward(ctx).logits.data()[0]; }),
              "model");
    Tensor x({T, d});
    for (auto& v : x.mutable_data()) v = rng.normal();
    add_point(p, T, median_seconds(repetitions, [&] { g_sink = g_sink + matmul(x, w).data()[0]; }), "linear-fp64");
    add_point(p, T, median_seconds(repetitions, [&] { g_sink = g_sink + quantized_linear(x, qw).data()[0]; }),
              "linear-int8");
  }
  for (const char* v : {"model", "linear-fp64", "linear-int8"}) p.fits.push_back(fit_loglog(p.points, v));
  return p;
}

void write_latency_csv(const std::filesystem::path& path, const LatencyProfile& profile) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write latency csv " + path.string());
  out.precision(9);
  out << "# machine: " << profile.machine << '\n';
  for (const auto& f : profile.fits)
    out << "# fit " << f.variant << " slope=" << f.slope << " intercept=" << f.intercept << " residual=" << f.residual
        << '\n';
  out << "length,seconds,tokens_per_sec,variant\n";
  for (const auto& p : profile.points) out << p.length << ',' << p.seconds << ',' << p.tokens_per_sec << ',' << p.variant << '\n';
}

}  // namespace sdlm
