#include "sdlm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace sdlm {

double perplexity(std::span<const double> token_nll) {
  if (token_nll.empty()) throw InputError("perplexity: empty corpus");
  double s = 0.0;
  for (double v : token_nll) {
    if (!std::isfinite(v) || v < 0.0) throw NumericError("perplexity: invalid token NLL");
    s += v;
  }
  return std::exp(s / static_cast<double>(token_nll.size()));
}

void validate_forecasts(std::span<const ForecastRecord> records) {
  for (const auto& r : records) {
    if (!(r.probability >= 0.0 && r.probability <= 1.0))
      throw InputError("forecast probability outside [0, 1]");
    if (r.outcome != 0 && r.outcome != 1) throw InputError("forecast outcome must be 0 or 1");
    if (r.horizon_months < 1) throw InputError("forecast horizon must be positive");
  }
}

double brier_score(std::span<const ForecastRecord> records) {
  if (records.empty()) throw InputError("brier_score: no records");
  validate_forecasts(records);
  double s = 0.0;
  for (const auto& r : records) {
    const double e = r.probability - r.outcome;
    s += e * e;
  }
  return s / static_cast<double>(records.size());
}

double ReliabilityReport::mean_abs_gap() const {
  double s = 0.0;
  std::size_t k = 0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    s += std::abs(b.mean_predicted - b.empirical_frequency);
    ++k;
  }
  return k ? s / static_cast<double>(k) : 0.0;
}

ReliabilityReport reliability_report(std::span<const ForecastRecord> records, std::size_t n_bins) {
  if (n_bins < 1) throw ConfigError("reliability_report: need at least one bin");
  if (records.empty()) throw InputError("reliability_report: no records");
  validate_forecasts(records);
  ReliabilityReport rep;
  rep.n = records.size();
  rep.bins.resize(n_bins);
  std::vector<double> psum(n_bins, 0.0), ysum(n_bins, 0.0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    rep.bins[b].lo = static_cast<double>(b) / static_cast<double>(n_bins);
    rep.bins[b].hi = static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  for (const auto& r : records) {
    auto b = static_cast<std::size_t>(r.probability * static_cast<double>(n_bins));
    if (b >= n_bins) b = n_bins - 1;
    psum[b] += r.probability;
    ysum[b] += r.outcome;
    ++rep.bins[b].count;
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    auto& bin = rep.bins[b];
    if (bin.count == 0) {
      bin.mean_predicted = bin.empirical_frequency = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const auto c = static_cast<double>(bin.count);
    bin.mean_predicted = psum[b] / c;
    bin.empirical_frequency = ysum[b] / c;
    rep.ece += c / static_cast<double>(rep.n) * std::abs(bin.mean_predicted - bin.empirical_frequency);
  }
  rep.brier = brier_score(records);
  return rep;
}

void write_reliability_csv(const std::filesystem::path& path, const ReliabilityReport& report) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path.string());
  f.precision(17);
  f << "bin_lo,bin_hi,bin_center,mean_predicted,empirical_frequency,count,gap\n";
  for (const auto& b : report.bins) {
    f << b.lo << ',' << b.hi << ',' << (b.lo + b.hi) / 2 << ',';
    if (b.count) {
      f << b.mean_predicted << ',' << b.empirical_frequency << ',' << b.count << ','
        << b.mean_predicted - b.empirical_frequency << '\n';
    } else {
      f << ",,0,\n";
    }
  }
}

std::map<int, HorizonAccuracy> accuracy_by_horizon(std::span<const ForecastRecord> records) {
  validate_forecasts(records);
  std::map<int, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  for (const auto& r : records) {
    const int pred = r.probability >= 0.5 ? 1 : 0;
    auto& t = tally[r.horizon_months];
    t.first += pred == r.outcome;
    ++t.second;
  }
  std::map<int, HorizonAccuracy> out;
  for (const auto& [h, t] : tally)
    out[h] = {static_cast<double>(t.first) / static_cast<double>(t.second), t.second};
  return out;
}

double cohen_kappa(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw DimensionError("cohen_kappa: label sequences differ in length");
  if (a.size() < 2) throw InputError("cohen_kappa: need at least two items");
  const auto n = static_cast<double>(a.size());
  std::map<int, double> ma, mb;
  double agree = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    agree += a[i] == b[i];
    ma[a[i]] += 1.0;
    mb[b[i]] += 1.0;
  }
  const double po = agree / n;
  double pe = 0.0;
  for (const auto& [cat, c] : ma) {
    auto it = mb.find(cat);
    if (it != mb.end()) pe += (c / n) * (it->second / n);
  }
  if (pe >= 1.0) {
    if (po == 1.0) return 1.0;
    throw NumericError("cohen_kappa: undefined (chance agreement is 1)");
  }
  return (po - pe) / (1.0 - pe);
}

double fleiss_kappa(const std::vector<std::vector<int>>& counts, int n_raters) {
  if (n_raters < 2) throw InputError("fleiss_kappa: need at least two raters");
  if (counts.empty()) throw InputError("fleiss_kappa: no items");
  const std::size_t k = counts[0].size();
  const auto n = static_cast<double>(n_raters);
  std::vector<double> col(k, 0.0);
  double pbar = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i].size() != k) throw DimensionError("fleiss_kappa: ragged count matrix");
    long row = 0;
    double sq = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[i][j] < 0) throw InputError("fleiss_kappa: negative count");
      row += counts[i][j];
      sq += static_cast<double>(counts[i][j]) * counts[i][j];
      col[j] += counts[i][j];
    }
    if (row != n_raters)
      throw InputError("fleiss_kappa: item " + std::to_string(i) + " has " + std::to_string(row) +
                       " ratings, expected " + std::to_string(n_raters));
    pbar += (sq - n) / (n * (n - 1.0));
  }
  const auto N = static_cast<double>(counts.size());
  pbar /= N;
  double pe = 0.0;
  for (double c : col) pe += (c / (N * n)) * (c / (N * n));
  if (pe >= 1.0) throw NumericError("fleiss_kappa: degenerate (every rating in one category)");
  return (pbar - pe) / (1.0 - pe);
}

AnovaResult anova_f(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw InputError("anova_f: need at least two groups");
  double grand = 0.0;
  std::size_t N = 0;
  for (const auto& g : groups) {
    if (g.size() < 2) throw InputError("anova_f: every group needs at least two samples");
    for (double v : g) grand += v;
    N += g.size();
  }
  grand /= static_cast<double>(N);
  double ssb = 0.0, ssw = 0.0;
  for (const auto& g : groups) {
    double m = 0.0;
    for (double v : g) m += v;
    m /= static_cast<double>(g.size());
    ssb += static_cast<double>(g.size()) * (m - grand) * (m - grand);
    for (double v : g) ssw += (v - m) * (v - m);
  }
  AnovaResult r;
  r.df_between = static_cast<int>(groups.size()) - 1;
  r.df_within = static_cast<int>(N - groups.size());
  const double msb = ssb / r.df_between, msw = ssw / r.df_within;
  if (msw == 0.0) {
    r.infinite = true;
    r.F = std::numeric_limits<double>::infinity();
  } else {
    r.F = msb / msw;
  }
  return r;
}

namespace {

void check_pair(std::span<const double> x, std::span<const double> y, const char* op) {
  if (x.size() != y.size()) throw DimensionError(std::string(op) + ": length mismatch");
  if (x.size() < 2) throw InputError(std::string(op) + ": need at least two values");
}

}  // namespace

double pearson_r(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, "pearson_r");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson_r: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double mae(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

PrfResult precision_recall_f1(const std::vector<bool>& predicted, const std::vector<bool>& gold) {
  if (predicted.size() != gold.size()) throw DimensionError("precision_recall_f1: length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    tp += predicted[i] && gold[i];
    fp += predicted[i] && !gold[i];
    fn += !predicted[i] && gold[i];
  }
  PrfResult r;
  if (tp + fp == 0) {
    r.precision_undefined = true;
  } else {
    r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  if (tp + fn == 0) {
    r.recall_undefined = true;
  } else {
    r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  if (r.precision + r.recall > 0.0) r.f1 = 2 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

std::vector<ForecastRecord> read_forecasts_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw InputError(path.string() + ": empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  int ip = -1, io = -1, ih = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "probability") ip = static_cast<int>(i);
    if (header[i] == "outcome") io = static_cast<int>(i);
    if (header[i] == "horizon_months") ih = static_cast<int>(i);
  }
  if (ip < 0 || io < 0) throw InputError(path.string() + ": header needs probability and outcome");
  std::vector<ForecastRecord> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    try {
      ForecastRecord r;
      r.probability = std::stod(cells.at(static_cast<std::size_t>(ip)));
      r.outcome = std::stoi(cells.at(static_cast<std::size_t>(io)));
      if (ih >= 0) r.horizon_months = std::stoi(cells.at(static_cast<std::size_t>(ih)));
      out.push_back(r);
    } catch (const std::exception&) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
  }
  validate_forecasts(out);
  return out;
}

}  // namespace sdlm
