#include <psim/powerlaw.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <tuple>

#include <boost/math/distributions/students_t.hpp>

namespace psim {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct LogPoint {
  int64_t step = 0;
  double x = 0;  // log step
  double y = 0;  // log |c|
  bool positive = false;
};

LogPoint log_point(int64_t step, double c) {
  return {step, std::log(static_cast<double>(step)), std::log(std::fabs(c)), c > 0.0};
}

// OLS of y on x over pts[from..], with the flat case pinned to a zero slope
// and r2 = 1.
PowerLawFit fit_points(const std::vector<LogPoint>& pts, size_t from) {
  size_t n = pts.size() - from;
  PowerLawFit fit;
  fit.start = pts[from].step;
  fit.end = pts.back().step;
  fit.points = static_cast<int64_t>(n);
  bool all_pos = true;
  bool all_neg = true;
  for (size_t i = from; i < pts.size(); ++i) {
    all_pos = all_pos && pts[i].positive;
    all_neg = all_neg && !pts[i].positive;
  }
  fit.sign = all_pos ? 1 : (all_neg ? -1 : 0);

  bool flat = true;
  for (size_t i = from + 1; i < pts.size() && flat; ++i) flat = pts[i].y == pts[from].y;
  if (flat) {
    fit.log_a = pts[from].y;
    fit.r2 = 1.0;
    return fit;
  }

  double mx = 0.0, my = 0.0;
  for (size_t i = from; i < pts.size(); ++i) {
    mx += pts[i].x;
    my += pts[i].y;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (size_t i = from; i < pts.size(); ++i) {
    double dx = pts[i].x - mx;
    double dy = pts[i].y - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx <= 0.0) throw PowerLawError("fit window has no spread in log step");
  double slope = sxy / sxx;
  fit.alpha = slope == 0.0 ? 0.0 : -slope;
  fit.log_a = my - slope * mx;
  double ss_res = 0.0;
  for (size_t i = from; i < pts.size(); ++i) {
    double r = (pts[i].y - my) - slope * (pts[i].x - mx);
    ss_res += r * r;
  }
  fit.r2 = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  boost::math::students_t dist(static_cast<double>(n - 2));
  double se = std::sqrt(ss_res / static_cast<double>(n - 2) / sxx);
  fit.ci95 = boost::math::quantile(dist, 0.975) * se;
  return fit;
}

void write_text(const std::string& path, const std::string& text, const char* what) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw PowerLawError(std::string("cannot open ") + what + " file " + path + " for writing");
  out << text;
  if (!out) throw PowerLawError(std::string("failed writing ") + what + " file " + path);
}

bool head_before(const HeadId& a, const HeadId& b) {
  return std::tie(a.run, a.block, a.head) < std::tie(b.run, b.block, b.head);
}

}  // namespace

PowerLawFit loglog_fit(const std::vector<std::pair<int64_t, double>>& series,
                       int64_t start, int64_t end) {
  if (end <= start) throw PowerLawError("fit window end must exceed its start");
  std::vector<LogPoint> pts;
  for (const auto& [step, c] : series) {
    if (step < start || step > end) continue;
    if (step <= 0) throw PowerLawError("nonpositive step " + std::to_string(step) + " in fit window");
    if (!std::isfinite(c)) throw PowerLawError("non-finite correlation at step " + std::to_string(step));
    if (c == 0.0) throw PowerLawError("zero correlation at step " + std::to_string(step));
    pts.push_back(log_point(step, c));
  }
  if (pts.size() < 3) throw PowerLawError("fit window holds fewer than three points");
  return fit_points(pts, 0);
}

void WindowConfig::validate() const {
  if (min_points < 3) throw PowerLawError("window detection needs min_points of at least 3");
  if (!(min_r2 >= 0.0 && min_r2 <= 1.0)) throw PowerLawError("min_r2 must lie in [0, 1]");
  if (!(curvature_tol > 0.0)) throw PowerLawError("curvature tolerance must be positive");
}

std::optional<PowerLawFit> detect_window(
    const std::vector<std::pair<int64_t, double>>& series, const WindowConfig& cfg) {
  cfg.validate();
  std::vector<LogPoint> pts;
  for (const auto& [step, c] : series) {
    if (step > 0 && std::isfinite(c) && c != 0.0) pts.push_back(log_point(step, c));
  }
  size_t n = pts.size();
  if (n < static_cast<size_t>(cfg.min_points)) return std::nullopt;
  std::vector<double> slope(n - 1);
  for (size_t k = 0; k + 1 < n; ++k) {
    slope[k] = (pts[k + 1].y - pts[k].y) / (pts[k + 1].x - pts[k].x);
  }
  for (size_t from = 0; n - from >= static_cast<size_t>(cfg.min_points); ++from) {
    bool smooth = true;
    for (size_t k = from; k + 2 < n && smooth; ++k) {
      smooth = std::fabs(slope[k + 1] - slope[k]) <= cfg.curvature_tol;
    }
    if (!smooth) continue;
    PowerLawFit fit = fit_points(pts, from);
    if (fit.r2 >= cfg.min_r2) return fit;
  }
  return std::nullopt;
}

FitReport fit_report(const std::vector<CorrelationSeries>& heads, const WindowConfig& cfg) {
  cfg.validate();
  FitReport report;
  for (const auto& series : heads) {
    if (auto fit = detect_window(series.points, cfg)) {
      report.rows.emplace_back(series.head, *fit);
    } else {
      report.undetected.push_back(series.head);
    }
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const auto& a, const auto& b) { return head_before(a.first, b.first); });
  std::sort(report.undetected.begin(), report.undetected.end(), head_before);
  return report;
}

void write_fit_report_csv(const std::string& path, const FitReport& report) {
  std::string text = "run,block,head,exponent,ci95,log_a,r2,sign,start,end\n";
  for (const auto& [head, fit] : report.rows) {
    double exponent = fit.alpha == 0.0 ? 0.0 : -fit.alpha;
    text += std::to_string(head.run) + ',' + std::to_string(head.block) + ',' +
            std::to_string(head.head) + ',' + fmt(exponent) + ',' + fmt(fit.ci95) + ',' +
            fmt(fit.log_a) + ',' + fmt(fit.r2) + ',' + std::to_string(fit.sign) + ',' +
            std::to_string(fit.start) + ',' + std::to_string(fit.end) + '\n';
  }
  write_text(path, text, "fit report");
}

void write_undetected_csv(const std::string& path, const FitReport& report) {
  std::string text = "run,block,head\n";
  for (const auto& head : report.undetected) {
    text += std::to_string(head.run) + ',' + std::to_string(head.block) + ',' +
            std::to_string(head.head) + '\n';
  }
  write_text(path, text, "undetected heads");
}

}  // namespace psim
