#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "psim/data.hpp"
#include "psim/metrics.hpp"
#include "psim/model.hpp"
#include "psim/rng.hpp"

namespace psim {

struct LLCError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// SGLD hyperparameters for restricted learning-coefficient estimation.
struct SgldConfig {
  double epsilon = 0.00075;     // step size
  double gamma = 1.0;           // localisation strength
  double beta_tilde = 1385.0;   // gradient factor
  int batch_size = 256;         // minibatch size m
  int64_t total_steps = 10000;  // T; the chain visits w_0..w_T
  int64_t burn_in = 9000;       // B; the estimate averages t = B..T
  int chains = 8;               // independent chains per estimate
  uint64_t seed = 0;
  bool qkv_only = false;        // leave the head's output projection frozen

  void validate() const;
};

// One attention head's weights as a flat double vector, plus the bookkeeping
// needed to write a perturbed vector back into a full parameter set.
struct Restriction {
  int block = 0;
  int head = 0;
  std::vector<std::string> names;  // head-owned tensors, fixed order
  std::vector<int64_t> offsets;    // start of each tensor inside w
  int64_t dim = 0;                 // total free dimensions
  std::vector<double> w0;          // flattened values at restriction time
};

Restriction restrict_head(const ModelParams& params, int block, int head, bool qkv_only = false);

// Copy of `base` with the restricted tensors overwritten from w.
ModelParams reassemble(const ModelParams& base, const Restriction& r, const std::vector<double>& w);

// Pulls the restricted tensors out of a full per-tensor gradient map; entries
// for frozen tensors are never read.
std::vector<double> restricted_grad(const std::map<std::string, Tensor32>& grads,
                                    const Restriction& r);

// One minibatch loss and its gradient at w.  Implementations must draw fresh
// samples on every call; rng is the calling chain's stream.
struct LossSample {
  double loss = 0.0;
  std::vector<double> grad;
};
using LossSampler = std::function<LossSample(const std::vector<double>& w, Rng& rng)>;

// Loss and restricted gradient of the model on one fixed batch.
LossSample model_loss_grad(const ModelParams& base, const Restriction& r,
                           const BoundaryLayout& layout, const std::vector<StatePair>& batch,
                           const std::vector<double>& w);

struct ChainResult {
  int chain = 0;
  std::vector<double> trace;      // minibatch loss at w_t, t = 0.. (cut short on abort)
  double lambda_hat = 0.0;        // NaN when aborted
  double post_mean = 0.0;         // mean of trace[burn_in..]; NaN when aborted
  double trace_min = 0.0;         // NaN when the trace is empty
  double trace_max = 0.0;
  double max_displacement = 0.0;  // max ||w_t - w0|| seen
  bool aborted = false;
  int64_t abort_step = -1;
  std::string abort_reason;
};

// beta_tilde * (mean of trace[burn_in..] - anchor_loss): the estimator the
// chain itself uses, exposed so estimates can be recomputed from saved traces.
double lambda_hat(const std::vector<double>& trace, int64_t burn_in, double beta_tilde,
                  double anchor_loss);

// Runs one SGLD chain from w0:
//   w <- w - (eps/2) * (gamma * (w - w0) + beta_tilde * grad) + noise
// with per-coordinate Gaussian noise of variance eps.  A non-finite loss,
// gradient or state aborts the chain and records the offending step; sampler
// exceptions abort the same way.
ChainResult sgld_chain(const std::vector<double>& w0, const LossSampler& sample,
                       const SgldConfig& cfg, uint64_t seed, double anchor_loss);

struct LLCEstimate {
  HeadId head;
  int64_t checkpoint_step = 0;
  double anchor_loss = 0.0;          // loss at w0 on the 16x-batch reference
  std::vector<ChainResult> chains;   // one entry per chain, aborted or not
  std::vector<double> lambda_hats;   // per chain; NaN for aborted chains
  double mean_lambda = 0.0;          // mean over surviving chains
  bool partial = false;              // true when at least one chain aborted
};

// Runs cfg.chains independent chains in parallel, each seeded from its own
// substream of cfg.seed.  make_sampler(i) must build a fresh sampler for
// chain i; index -1 builds the sampler used for the anchor-loss estimate
// (16 batches at w0).  Throws if every chain aborts.
LLCEstimate estimate_chains(const std::vector<double>& w0,
                            const std::function<LossSampler(int)>& make_sampler,
                            const SgldConfig& cfg);

// Weight-restricted estimate for one attention head of a trained model.
// Each chain draws minibatches of cfg.batch_size without replacement from its
// own shuffle of ds, so no sample is reused within a chain.
LLCEstimate estimate_llc(const ModelParams& params, const BoundaryLayout& layout,
                         const Dataset& ds, int block, int head, int64_t checkpoint_step,
                         const SgldConfig& cfg);

// Centered moving average; the window shrinks near the edges.  Window must be
// odd so the average stays centered.
std::vector<double> smooth_series(const std::vector<double>& xs, int window);
std::vector<std::pair<int64_t, double>> smooth_series(
    const std::vector<std::pair<int64_t, double>>& xs, int window);

struct TraceReport {
  bool converged = false;
  int64_t spike_count = 0;
  int64_t suggested_burn_in = 0;  // trace length when no stable suffix exists
  double slope = 0.0;             // least-squares slope per step after burn-in
  double level = 0.0;             // mean after burn-in
};

// Convergence and spike diagnostics for one loss trace.  The trace counts as
// converged when the total post-burn-in linear drift stays within 10% of the
// post-burn-in level; spikes are points more than 5 scaled MADs above a
// width-31 rolling median.
TraceReport trace_report(const std::vector<double>& trace, int64_t burn_in);

// chain,lambda_hat,aborted,abort_step,post_mean,trace_min,trace_max rows.
void write_llc_csv(const std::string& path, const LLCEstimate& est);
// step,loss rows of one chain's trace.
void write_trace_csv(const std::string& path, const ChainResult& chain);
// step,lambda_hat,smoothed rows; both series must cover the same steps.
void write_llc_series_csv(const std::string& path,
                          const std::vector<std::pair<int64_t, double>>& raw,
                          const std::vector<std::pair<int64_t, double>>& smoothed);
// key=value lines describing one estimate.
void write_llc_metadata(const std::string& path, const LLCEstimate& est);

}  // namespace psim
