#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace psim {

struct TheoryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Potential { quadratic, pitchfork, quartic };

enum class FlowClass { exponential, power_law, ambiguous };

const char* flow_class_name(FlowClass c);

// Scalar gradient flow x' = -f'(x) for f one of
//   quadratic: (r/2) x^2 with r > 0
//   pitchfork: (r/2) x^2 + (1/4) x^4
//   quartic:   (1/4) x^4
struct FlowConfig {
  Potential potential = Potential::quartic;
  double r = 0.0;  // stiffness for quadratic, bifurcation parameter for pitchfork
  double x0 = 1.0;
  double horizon = 1e4;
  double step = 1e-3;     // RK4 step bound; segments to sample times subdivide it
  int samples = 64;       // log-spaced sample count after t = 0
  double sample_min = 0;  // first positive sample time; horizon/1000 when 0

  void validate() const;
};

struct FlowResult {
  std::vector<double> times;   // 0 followed by the log-spaced grid up to horizon
  std::vector<double> x;       // signed state at each time
  std::vector<double> energy;  // f(x) at each time, nonincreasing
};

// Integrates with RK4, landing exactly on every sample time.  Throws when the
// energy rises along a step (unstable step size) or the state leaves the
// representable range.
FlowResult gradient_flow(const FlowConfig& cfg);

struct Classification {
  FlowClass kind = FlowClass::ambiguous;
  double rate = 0;   // decay rate when exponential: |x| ~ e^{-rate t}
  double alpha = 0;  // decay exponent when power law: |x| ~ t^-alpha
  double theta = 0;  // implied Lojasiewicz exponent: (1+alpha)/(1+2alpha), 1/2 when exponential
  double r2_exponential = 0;
  double r2_power = 0;
};

// Fits log|x| against t and against log t and keeps the better line; within
// an r2 gap of 0.01 the flow is reported ambiguous.  Needs at least 16
// samples with t > 0 and |x| > 0 spanning two decades of t.
Classification classify_convergence(const FlowResult& flow);

struct HolderCheck {
  double beta = 1;             // Holder exponent of Q(x) = |x|^beta
  double fitted_exponent = 0;  // decay exponent fitted to |Q(x(t)) - Q*|
  double bound = 0;            // beta times the flow's own fitted decay exponent
  double max_difference = 0;   // largest |Q(x(t)) - Q*| over the samples
  bool satisfied = false;      // fitted_exponent >= bound - 0.05
};

// Checks the decay of the observable Q(x) = |x|^beta toward Q* = |x_limit|^beta
// against the flow's fitted power law.  beta must lie in [0, 1]; beta = 0 makes
// Q constant and the difference identically zero.
HolderCheck holder_observable_check(const FlowResult& flow, double beta, double x_limit = 0.0);

struct IsingSolve {
  double beta = 0;  // inverse temperature
  double m = 0;     // nonnegative root of tanh(beta m) = m
  int branch = 0;   // +1 on the positive branch, 0 at the trivial root
};

// Positive-branch mean-field magnetization; m = 0 is the only root for
// beta <= 1.  beta must be positive.
IsingSolve ising_magnetization(double beta);

struct IsingScan {
  std::vector<double> r;  // reduced temperatures, each in (-1, 0)
  std::vector<double> m;  // positive-branch roots at beta = 1/(1 + r)
  double slope = 0;       // log m against log|r| slope
  double r2 = 0;
};

// Solves the magnetization across the given reduced temperatures and fits
// the scaling law |m| ~ |r|^slope.  Needs at least three values, each in
// (-1, 0).
IsingScan ising_critical_scan(const std::vector<double>& r);

// t,abs_x,energy rows.
void write_flow_csv(const std::string& path, const FlowResult& flow);

// r,m rows.
void write_ising_csv(const std::string& path, const IsingScan& scan);

struct FlowSummaryRow {
  std::string name;
  Classification cls;
};

// name,class,rate,alpha,theta,r2_exponential,r2_power rows.
void write_flow_summary_csv(const std::string& path, const std::vector<FlowSummaryRow>& rows);

}  // namespace psim
