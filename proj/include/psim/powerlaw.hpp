#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <psim/metrics.hpp>

namespace psim {

struct PowerLawError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Least-squares line log|c| = -alpha*log(t) + log_a over one step window.
struct PowerLawFit {
  int64_t start = 0;   // first fitted step
  int64_t end = 0;     // last fitted step
  double alpha = 0;    // decay exponent: |c| ~ a * t^-alpha
  double log_a = 0;    // intercept, natural log
  double r2 = 0;       // in [0,1]; a constant series counts as r2 = 1
  double ci95 = 0;     // 95% confidence half-width on alpha, >= 0
  int64_t points = 0;  // samples in the window
  int sign = 0;        // +1 all c > 0, -1 all c < 0, 0 mixed
};

// Fits the samples with start <= t <= end.  The window must hold at least
// three points, every one with t > 0 and c != 0.
PowerLawFit loglog_fit(const std::vector<std::pair<int64_t, double>>& series,
                       int64_t start, int64_t end);

// Acceptance thresholds for automatic window detection.
struct WindowConfig {
  int min_points = 8;
  double min_r2 = 0.8;
  double curvature_tol = 0.1;  // largest allowed jump between local log-log slopes

  void validate() const;
};

// Longest window ending at the final checkpoint whose fit reaches min_r2 and
// whose consecutive local log-log slopes never jump by more than
// curvature_tol.  Points with t <= 0 or c == 0 are skipped; nullopt when no
// window of min_points or more qualifies.
std::optional<PowerLawFit> detect_window(
    const std::vector<std::pair<int64_t, double>>& series,
    const WindowConfig& cfg = {});

// Detected fits per head plus the heads with no qualifying window, both
// sorted by (run, block, head).
struct FitReport {
  std::vector<std::pair<HeadId, PowerLawFit>> rows;
  std::vector<HeadId> undetected;
};

FitReport fit_report(const std::vector<CorrelationSeries>& heads,
                     const WindowConfig& cfg = {});

// run,block,head,exponent,ci95,log_a,r2,sign,start,end rows; the exponent
// column is the signed log-log slope -alpha.
void write_fit_report_csv(const std::string& path, const FitReport& report);

// run,block,head rows for the heads without a detected window.
void write_undetected_csv(const std::string& path, const FitReport& report);

}  // namespace psim
