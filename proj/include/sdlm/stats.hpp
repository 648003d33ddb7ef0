#pragma once

// Evaluation statistics: perplexity, calibration, agreement, ANOVA and
// classification summaries.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sdlm/errors.hpp"

namespace sdlm {

/// exp(mean negative log-likelihood per token).
double perplexity(std::span<const double> token_nll);

struct ForecastRecord {
  double probability = 0.5;
  int outcome = 0;  // 0 or 1
  int horizon_months = 12;
};

void validate_forecasts(std::span<const ForecastRecord> records);

double brier_score(std::span<const ForecastRecord> records);

struct ReliabilityBin {
  double lo = 0.0, hi = 0.0;
  double mean_predicted = 0.0;  // NaN when count == 0
  double empirical_frequency = 0.0;
  std::size_t count = 0;
};

struct ReliabilityReport {
  std::vector<ReliabilityBin> bins;
  double ece = 0.0;
  double brier = 0.0;
  std::size_t n = 0;

  /// Unweighted mean of |mean_predicted - empirical_frequency| over non-empty bins.
  double mean_abs_gap() const;
};

/// Equal-width bins over [0, 1]; p == 1 falls in the last bin.
ReliabilityReport reliability_report(std::span<const ForecastRecord> records, std::size_t n_bins = 10);

/// Columns: bin_lo,bin_hi,bin_center,mean_predicted,empirical_frequency,count,gap
void write_reliability_csv(const std::filesystem::path& path, const ReliabilityReport& report);

struct HorizonAccuracy {
  double accuracy = 0.0;
  std::size_t count = 0;
};

/// Prediction is 1 when p >= 0.5.
std::map<int, HorizonAccuracy> accuracy_by_horizon(std::span<const ForecastRecord> records);

double cohen_kappa(std::span<const int> labels_a, std::span<const int> labels_b);

/// counts[item][category]; every row must sum to n_raters.
double fleiss_kappa(const std::vector<std::vector<int>>& counts, int n_raters);

struct AnovaResult {
  double F = 0.0;
  int df_between = 0;
  int df_within = 0;
  bool infinite = false;  // within-group variance is zero
};

AnovaResult anova_f(const std::vector<std::vector<double>>& groups);

double pearson_r(std::span<const double> x, std::span<const double> y);
double mae(std::span<const double> x, std::span<const double> y);

struct PrfResult {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  bool precision_undefined = false;  // no predicted positives
  bool recall_undefined = false;     // no gold positives
};

/// Positive class is "violation": true entries mark violations.
PrfResult precision_recall_f1(const std::vector<bool>& predicted, const std::vector<bool>& gold);

/// CSV with header probability,outcome[,horizon_months].
std::vector<ForecastRecord> read_forecasts_csv(const std::filesystem::path& path);

}  // namespace sdlm
