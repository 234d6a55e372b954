#include <psim/theory.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>

namespace psim {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

double potential_energy(const FlowConfig& cfg, double x) {
  switch (cfg.potential) {
    case Potential::quadratic:
      return 0.5 * cfg.r * x * x;
    case Potential::pitchfork:
      return 0.5 * cfg.r * x * x + 0.25 * x * x * x * x;
    case Potential::quartic:
      return 0.25 * x * x * x * x;
  }
  return 0.0;
}

double force(const FlowConfig& cfg, double x) {
  switch (cfg.potential) {
    case Potential::quadratic:
      return -cfg.r * x;
    case Potential::pitchfork:
      return -cfg.r * x - x * x * x;
    case Potential::quartic:
      return -x * x * x;
  }
  return 0.0;
}

double rk4_step(const FlowConfig& cfg, double x, double h) {
  double k1 = force(cfg, x);
  double k2 = force(cfg, x + 0.5 * h * k1);
  double k3 = force(cfg, x + 0.5 * h * k2);
  double k4 = force(cfg, x + h * k3);
  return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

struct Line {
  double slope = 0;
  double intercept = 0;
  double r2 = 1;
};

Line fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
  size_t n = xs.size();
  bool flat = true;
  for (size_t i = 1; i < n && flat; ++i) flat = ys[i] == ys[0];
  if (flat) return {0.0, ys.empty() ? 0.0 : ys[0], 1.0};
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double dx = xs[i] - mx;
    double dy = ys[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx <= 0.0) throw TheoryError("fit abscissa has no spread");
  Line line;
  line.slope = sxy / sxx;
  line.intercept = my - line.slope * mx;
  double ss_res = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double res = (ys[i] - my) - line.slope * (xs[i] - mx);
    ss_res += res * res;
  }
  line.r2 = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  return line;
}

// Log-log line of |x| over the positive-time, positive-|x| samples; zero
// slope when fewer than three survive.
Line abs_decay_fit(const FlowResult& flow) {
  std::vector<double> lt, lx;
  for (size_t i = 0; i < flow.times.size(); ++i) {
    double a = std::fabs(flow.x[i]);
    if (flow.times[i] > 0.0 && a > 0.0 && std::isfinite(a)) {
      lt.push_back(std::log(flow.times[i]));
      lx.push_back(std::log(a));
    }
  }
  if (lt.size() < 3) return {};
  return fit_line(lt, lx);
}

void write_text(const std::string& path, const std::string& text, const char* what) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TheoryError(std::string("cannot open ") + what + " file " + path + " for writing");
  out << text;
  if (!out) throw TheoryError(std::string("failed writing ") + what + " file " + path);
}

}  // namespace

const char* flow_class_name(FlowClass c) {
  switch (c) {
    case FlowClass::exponential:
      return "exponential";
    case FlowClass::power_law:
      return "power-law";
    case FlowClass::ambiguous:
      return "ambiguous";
  }
  return "ambiguous";
}

void FlowConfig::validate() const {
  if (!(step > 0.0) || !std::isfinite(step)) throw TheoryError("step must be positive");
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw TheoryError("horizon must be positive");
  if (samples < 2) throw TheoryError("need at least two samples");
  if (!std::isfinite(x0)) throw TheoryError("x0 must be finite");
  if (potential == Potential::quadratic && !(r > 0.0)) {
    throw TheoryError("quadratic potential needs r > 0");
  }
  if (sample_min < 0.0) throw TheoryError("sample_min must be nonnegative");
  if (sample_min > 0.0 && sample_min >= horizon) {
    throw TheoryError("sample_min must lie below horizon");
  }
}

FlowResult gradient_flow(const FlowConfig& cfg) {
  cfg.validate();
  double tmin = cfg.sample_min > 0.0 ? cfg.sample_min : cfg.horizon / 1000.0;
  std::vector<double> targets;
  for (int j = 0; j < cfg.samples; ++j) {
    double u = double(j) / double(cfg.samples - 1);
    targets.push_back(tmin * std::pow(cfg.horizon / tmin, u));
  }
  targets.back() = cfg.horizon;

  FlowResult out;
  out.times.push_back(0.0);
  out.x.push_back(cfg.x0);
  out.energy.push_back(potential_energy(cfg, cfg.x0));
  double x = cfg.x0;
  double f_cur = out.energy[0];
  double t = 0.0;
  for (double target : targets) {
    if (target <= t) continue;
    double span = target - t;
    auto nsub = static_cast<int64_t>(std::ceil(span / cfg.step - 1e-12));
    if (nsub < 1) nsub = 1;
    double h = span / double(nsub);
    for (int64_t s = 0; s < nsub; ++s) {
      double xn = rk4_step(cfg, x, h);
      double fn = potential_energy(cfg, xn);
      double slack = 1e-12 * std::max(1.0, std::fabs(f_cur));
      if (!std::isfinite(xn) || fn > f_cur + slack) {
        throw TheoryError("flow unstable at t = " + fmt_short(t + double(s) * h) +
                          "; retry with step <= " + fmt_short(cfg.step / 10.0));
      }
      x = xn;
      f_cur = fn;
    }
    t = target;
    out.times.push_back(t);
    out.x.push_back(x);
    out.energy.push_back(f_cur);
  }
  return out;
}

Classification classify_convergence(const FlowResult& flow) {
  if (flow.times.size() != flow.x.size()) throw TheoryError("flow samples are inconsistent");
  std::vector<double> t, lt, lx;
  for (size_t i = 0; i < flow.times.size(); ++i) {
    double a = std::fabs(flow.x[i]);
    if (flow.times[i] > 0.0 && a > 0.0 && std::isfinite(a)) {
      t.push_back(flow.times[i]);
      lt.push_back(std::log(flow.times[i]));
      lx.push_back(std::log(a));
    }
  }
  if (t.size() < 16) throw TheoryError("classification needs at least 16 positive samples");
  auto [tmin, tmax] = std::minmax_element(t.begin(), t.end());
  if (*tmax < 100.0 * *tmin * (1.0 - 1e-12)) {
    throw TheoryError("classification needs samples spanning two decades");
  }
  Line ex = fit_line(t, lx);
  Line pw = fit_line(lt, lx);
  Classification cls;
  cls.rate = ex.slope == 0.0 ? 0.0 : -ex.slope;
  cls.alpha = pw.slope == 0.0 ? 0.0 : -pw.slope;
  cls.r2_exponential = ex.r2;
  cls.r2_power = pw.r2;
  if (std::fabs(ex.r2 - pw.r2) < 0.01) {
    cls.kind = FlowClass::ambiguous;
  } else if (ex.r2 > pw.r2) {
    cls.kind = FlowClass::exponential;
    cls.theta = 0.5;
  } else {
    cls.kind = FlowClass::power_law;
    if (cls.alpha > 0.0) cls.theta = (1.0 + cls.alpha) / (1.0 + 2.0 * cls.alpha);
  }
  return cls;
}

HolderCheck holder_observable_check(const FlowResult& flow, double beta, double x_limit) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw TheoryError("Holder exponent must lie in [0, 1]");
  if (flow.times.size() != flow.x.size()) throw TheoryError("flow samples are inconsistent");
  HolderCheck hc;
  hc.beta = beta;
  double q_star = std::pow(std::fabs(x_limit), beta);
  std::vector<double> lt, ld;
  for (size_t i = 0; i < flow.times.size(); ++i) {
    double d = std::fabs(std::pow(std::fabs(flow.x[i]), beta) - q_star);
    hc.max_difference = std::max(hc.max_difference, d);
    if (flow.times[i] > 0.0 && d > 0.0 && std::isfinite(d)) {
      lt.push_back(std::log(flow.times[i]));
      ld.push_back(std::log(d));
    }
  }
  Line decay = abs_decay_fit(flow);
  hc.bound = beta * (decay.slope == 0.0 ? 0.0 : -decay.slope);
  if (hc.max_difference == 0.0) {
    hc.satisfied = hc.fitted_exponent >= hc.bound - 0.05;
    return hc;
  }
  if (ld.size() < 16) throw TheoryError("Holder check needs at least 16 decaying samples");
  Line dfit = fit_line(lt, ld);
  hc.fitted_exponent = dfit.slope == 0.0 ? 0.0 : -dfit.slope;
  hc.satisfied = hc.fitted_exponent >= hc.bound - 0.05;
  return hc;
}

IsingSolve ising_magnetization(double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw TheoryError("inverse temperature must be positive");
  }
  IsingSolve out;
  out.beta = beta;
  if (beta <= 1.0) return out;
  double lo = 1e-12, hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (std::tanh(beta * mid) - mid > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  out.m = 0.5 * (lo + hi);
  out.branch = 1;
  return out;
}

IsingScan ising_critical_scan(const std::vector<double>& r) {
  if (r.size() < 3) throw TheoryError("scan needs at least three r values");
  IsingScan scan;
  std::vector<double> lr, lm;
  for (double ri : r) {
    if (!(ri < 0.0) || !(ri > -1.0)) {
      throw TheoryError("reduced temperature must lie in (-1, 0), got " + fmt_short(ri));
    }
    double m = ising_magnetization(1.0 / (1.0 + ri)).m;
    if (m <= 0.0) throw TheoryError("magnetization vanished; r too close to zero");
    scan.r.push_back(ri);
    scan.m.push_back(m);
    lr.push_back(std::log(-ri));
    lm.push_back(std::log(m));
  }
  Line fit = fit_line(lr, lm);
  scan.slope = fit.slope;
  scan.r2 = fit.r2;
  return scan;
}

void write_flow_csv(const std::string& path, const FlowResult& flow) {
  if (flow.times.size() != flow.x.size() || flow.times.size() != flow.energy.size()) {
    throw TheoryError("flow samples are inconsistent");
  }
  std::string text = "t,abs_x,energy\n";
  for (size_t i = 0; i < flow.times.size(); ++i) {
    text += fmt(flow.times[i]) + ',' + fmt(std::fabs(flow.x[i])) + ',' + fmt(flow.energy[i]) + '\n';
  }
  write_text(path, text, "flow");
}

void write_ising_csv(const std::string& path, const IsingScan& scan) {
  if (scan.r.size() != scan.m.size()) throw TheoryError("scan samples are inconsistent");
  std::string text = "r,m\n";
  for (size_t i = 0; i < scan.r.size(); ++i) {
    text += fmt(scan.r[i]) + ',' + fmt(scan.m[i]) + '\n';
  }
  write_text(path, text, "ising scan");
}

void write_flow_summary_csv(const std::string& path, const std::vector<FlowSummaryRow>& rows) {
  std::string text = "name,class,rate,alpha,theta,r2_exponential,r2_power\n";
  for (const auto& row : rows) {
    text += row.name + ',' + flow_class_name(row.cls.kind) + ',' + fmt(row.cls.rate) + ',' +
            fmt(row.cls.alpha) + ',' + fmt(row.cls.theta) + ',' + fmt(row.cls.r2_exponential) +
            ',' + fmt(row.cls.r2_power) + '\n';
  }
  write_text(path, text, "flow summary");
}

}  // namespace psim
