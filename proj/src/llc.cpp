#include <psim/llc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <thread>

namespace psim {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double post_burnin_mean(const std::vector<double>& trace, int64_t burn_in) {
  double sum = 0.0;
  int64_t n = 0;
  for (size_t t = static_cast<size_t>(burn_in); t < trace.size(); ++t) {
    sum += trace[t];
    ++n;
  }
  return sum / static_cast<double>(n);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct SegmentFit {
  double slope = 0.0;
  double level = 0.0;
};

SegmentFit fit_segment(const std::vector<double>& x, int64_t from) {
  int64_t n = static_cast<int64_t>(x.size()) - from;
  SegmentFit f;
  double mean_t = 0.5 * static_cast<double>(n - 1);
  double mean_x = 0.0;
  for (int64_t i = 0; i < n; ++i) mean_x += x[from + i];
  mean_x /= static_cast<double>(n);
  f.level = mean_x;
  double stt = 0.0, stx = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double dt = static_cast<double>(i) - mean_t;
    stt += dt * dt;
    stx += dt * (x[from + i] - mean_x);
  }
  if (stt > 0.0) f.slope = stx / stt;
  return f;
}

bool drift_ok(const SegmentFit& f, int64_t len) {
  double drift = f.slope * static_cast<double>(len - 1);
  return std::abs(drift) <= 0.1 * std::max(std::abs(f.level), 1e-9);
}

void check_restriction_tensor(const Restriction& r, size_t i, int64_t numel) {
  int64_t expect = (i + 1 < r.offsets.size() ? r.offsets[i + 1] : r.dim) - r.offsets[i];
  if (numel != expect)
    throw LLCError("tensor " + r.names[i] + " holds " + std::to_string(numel) +
                   " values, restriction expects " + std::to_string(expect));
}

LossSampler minibatch_sampler(const ModelParams& base, const Restriction& r,
                              const BoundaryLayout& layout, const Dataset* ds, int m) {
  auto base_p = std::make_shared<const ModelParams>(base);
  auto order = std::make_shared<std::vector<int64_t>>();
  auto next = std::make_shared<size_t>(0);
  return [base_p, r, layout, ds, m, order, next](const std::vector<double>& w,
                                                 Rng& rng) -> LossSample {
    if (order->empty()) {
      order->resize(ds->pairs.size());
      std::iota(order->begin(), order->end(), 0);
      for (size_t k = order->size(); k > 1; --k)
        std::swap((*order)[k - 1], (*order)[rng.below(k)]);
    }
    if (*next + static_cast<size_t>(m) > order->size())
      throw LLCError("dataset exhausted after " + std::to_string(*next) + " of " +
                     std::to_string(order->size()) + " pairs");
    std::vector<StatePair> batch;
    batch.reserve(m);
    for (int k = 0; k < m; ++k) batch.push_back(ds->pairs[(*order)[(*next)++]]);
    return model_loss_grad(*base_p, r, layout, batch, w);
  };
}

}  // namespace

void SgldConfig::validate() const {
  if (!(epsilon > 0))
    throw LLCError("sgld step size must be positive, got " + std::to_string(epsilon));
  if (!(gamma > 0))
    throw LLCError("sgld localisation must be positive, got " + std::to_string(gamma));
  if (!(beta_tilde > 0))
    throw LLCError("sgld gradient factor must be positive, got " + std::to_string(beta_tilde));
  if (batch_size < 1)
    throw LLCError("sgld batch size must be at least 1, got " + std::to_string(batch_size));
  if (!(burn_in > 0 && burn_in < total_steps))
    throw LLCError("sgld burn-in must lie strictly between 0 and total steps, got B=" +
                   std::to_string(burn_in) + " T=" + std::to_string(total_steps));
  if (chains < 1)
    throw LLCError("sgld needs at least one chain, got " + std::to_string(chains));
}

Restriction restrict_head(const ModelParams& params, int block, int head, bool qkv_only) {
  const ModelConfig& cfg = params.config;
  if (block < 0 || block >= cfg.blocks)
    throw LLCError("block " + std::to_string(block) + " out of range for " +
                   std::to_string(cfg.blocks) + " blocks");
  if (head < 0 || head >= cfg.heads)
    throw LLCError("head " + std::to_string(head) + " out of range for " +
                   std::to_string(cfg.heads) + " heads");
  Restriction r;
  r.block = block;
  r.head = head;
  std::string prefix = "block" + std::to_string(block) + ".head" + std::to_string(head) + ".";
  std::vector<std::string> parts = {"wq", "wk", "wv", "wo"};
  if (qkv_only) parts.pop_back();
  for (const auto& part : parts) {
    std::string name = prefix + part;
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw LLCError("params missing tensor " + name);
    r.names.push_back(name);
    r.offsets.push_back(r.dim);
    r.dim += it->second.numel();
    for (float v : it->second.data) r.w0.push_back(static_cast<double>(v));
  }
  return r;
}

ModelParams reassemble(const ModelParams& base, const Restriction& r,
                       const std::vector<double>& w) {
  if (static_cast<int64_t>(w.size()) != r.dim)
    throw LLCError("free vector has " + std::to_string(w.size()) + " entries, restriction needs " +
                   std::to_string(r.dim));
  ModelParams out = base;
  for (size_t i = 0; i < r.names.size(); ++i) {
    auto it = out.tensors.find(r.names[i]);
    if (it == out.tensors.end()) throw LLCError("params missing tensor " + r.names[i]);
    check_restriction_tensor(r, i, it->second.numel());
    int64_t off = r.offsets[i];
    for (int64_t k = 0; k < it->second.numel(); ++k)
      it->second.data[k] = static_cast<float>(w[off + k]);
  }
  return out;
}

std::vector<double> restricted_grad(const std::map<std::string, Tensor32>& grads,
                                    const Restriction& r) {
  std::vector<double> g(r.dim, 0.0);
  for (size_t i = 0; i < r.names.size(); ++i) {
    auto it = grads.find(r.names[i]);
    if (it == grads.end()) throw LLCError("gradient map missing tensor " + r.names[i]);
    check_restriction_tensor(r, i, it->second.numel());
    int64_t off = r.offsets[i];
    for (int64_t k = 0; k < it->second.numel(); ++k)
      g[off + k] = static_cast<double>(it->second.data[k]);
  }
  return g;
}

LossSample model_loss_grad(const ModelParams& base, const Restriction& r,
                           const BoundaryLayout& layout, const std::vector<StatePair>& batch,
                           const std::vector<double>& w) {
  if (batch.empty()) throw LLCError("model_loss_grad needs a non-empty batch");
  ModelParams p = reassemble(base, r, w);
  std::vector<ParticleState> xs, ys;
  xs.reserve(batch.size());
  ys.reserve(batch.size());
  for (const auto& pr : batch) {
    xs.push_back(pr.x);
    ys.push_back(pr.y);
  }
  auto mg = build_forward<float>(p, layout, xs, &ys);
  mg.graph.backward(mg.loss);
  std::map<std::string, Tensor32> grads;
  for (const auto& [name, leaf] : mg.param_leaf) grads.emplace(name, mg.graph.grad(leaf));
  LossSample out;
  out.loss = static_cast<double>(mg.graph.value(mg.loss).data[0]);
  out.grad = restricted_grad(grads, r);
  return out;
}

double lambda_hat(const std::vector<double>& trace, int64_t burn_in, double beta_tilde,
                  double anchor_loss) {
  if (trace.empty()) throw LLCError("lambda_hat needs a non-empty trace");
  if (burn_in < 0 || burn_in >= static_cast<int64_t>(trace.size()))
    throw LLCError("burn-in " + std::to_string(burn_in) +
                   " leaves no samples in a trace of length " + std::to_string(trace.size()));
  return beta_tilde * (post_burnin_mean(trace, burn_in) - anchor_loss);
}

ChainResult sgld_chain(const std::vector<double>& w0, const LossSampler& sample,
                       const SgldConfig& cfg, uint64_t seed, double anchor_loss) {
  cfg.validate();
  if (w0.empty()) throw LLCError("sgld_chain needs at least one free dimension");
  Rng rng(seed);
  ChainResult out;
  out.lambda_hat = kNan;
  out.post_mean = kNan;
  std::vector<double> w = w0;
  double noise_sd = std::sqrt(cfg.epsilon);
  out.trace.reserve(cfg.total_steps + 1);
  for (int64_t t = 0; t <= cfg.total_steps && !out.aborted; ++t) {
    LossSample s;
    try {
      s = sample(w, rng);
    } catch (const std::exception& e) {
      out.aborted = true;
      out.abort_step = t;
      out.abort_reason = "sampler failed at step " + std::to_string(t) + ": " + e.what();
      break;
    }
    if (!std::isfinite(s.loss)) {
      out.aborted = true;
      out.abort_step = t;
      out.abort_reason = "non-finite loss at step " + std::to_string(t);
      break;
    }
    out.trace.push_back(s.loss);
    if (t == cfg.total_steps) break;
    if (s.grad.size() != w.size())
      throw LLCError("sampler returned gradient of dimension " + std::to_string(s.grad.size()) +
                     ", expected " + std::to_string(w.size()));
    double d2 = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
      double g = cfg.gamma * (w[i] - w0[i]) + cfg.beta_tilde * s.grad[i];
      if (!std::isfinite(g)) {
        out.aborted = true;
        out.abort_step = t;
        out.abort_reason = "non-finite gradient at step " + std::to_string(t);
        break;
      }
      w[i] += -0.5 * cfg.epsilon * g + rng.normal(0.0, noise_sd);
      double diff = w[i] - w0[i];
      d2 += diff * diff;
    }
    if (out.aborted) break;
    if (!std::isfinite(d2)) {
      out.aborted = true;
      out.abort_step = t + 1;
      out.abort_reason = "non-finite parameter state at step " + std::to_string(t + 1);
      break;
    }
    out.max_displacement = std::max(out.max_displacement, std::sqrt(d2));
  }
  if (!out.trace.empty()) {
    out.trace_min = *std::min_element(out.trace.begin(), out.trace.end());
    out.trace_max = *std::max_element(out.trace.begin(), out.trace.end());
  } else {
    out.trace_min = kNan;
    out.trace_max = kNan;
  }
  if (!out.aborted) {
    out.post_mean = post_burnin_mean(out.trace, cfg.burn_in);
    out.lambda_hat = cfg.beta_tilde * (out.post_mean - anchor_loss);
  }
  return out;
}

LLCEstimate estimate_chains(const std::vector<double>& w0,
                            const std::function<LossSampler(int)>& make_sampler,
                            const SgldConfig& cfg) {
  cfg.validate();
  if (w0.empty()) throw LLCError("estimate needs at least one free dimension");
  LLCEstimate est;
  {
    Rng rng = Rng::substream(cfg.seed, "anchor");
    LossSampler anchor = make_sampler(-1);
    double sum = 0.0;
    for (int k = 0; k < 16; ++k) {
      LossSample s;
      try {
        s = anchor(w0, rng);
      } catch (const std::exception& e) {
        throw LLCError(std::string("anchor loss estimation failed: ") + e.what());
      }
      if (!std::isfinite(s.loss)) throw LLCError("anchor loss is non-finite");
      sum += s.loss;
    }
    est.anchor_loss = sum / 16.0;
  }
  est.chains.resize(cfg.chains);
  std::vector<std::thread> pool;
  pool.reserve(cfg.chains);
  for (int i = 0; i < cfg.chains; ++i) {
    pool.emplace_back([&, i] {
      ChainResult r;
      try {
        LossSampler s = make_sampler(i);
        uint64_t seed = Rng::substream_seed(cfg.seed, "chain/" + std::to_string(i));
        r = sgld_chain(w0, s, cfg, seed, est.anchor_loss);
      } catch (const std::exception& e) {
        r.aborted = true;
        r.abort_step = 0;
        r.abort_reason = e.what();
        r.lambda_hat = kNan;
        r.post_mean = kNan;
        r.trace_min = kNan;
        r.trace_max = kNan;
      }
      r.chain = i;
      est.chains[i] = std::move(r);
    });
  }
  for (auto& th : pool) th.join();
  double sum = 0.0;
  int survivors = 0;
  for (const auto& c : est.chains) {
    est.lambda_hats.push_back(c.lambda_hat);
    if (!c.aborted) {
      sum += c.lambda_hat;
      ++survivors;
    }
  }
  est.partial = survivors < cfg.chains;
  if (survivors == 0)
    throw LLCError("all " + std::to_string(cfg.chains) +
                   " chains aborted; first: " + est.chains.front().abort_reason);
  est.mean_lambda = sum / static_cast<double>(survivors);
  return est;
}

LLCEstimate estimate_llc(const ModelParams& params, const BoundaryLayout& layout,
                         const Dataset& ds, int block, int head, int64_t checkpoint_step,
                         const SgldConfig& cfg) {
  cfg.validate();
  if (static_cast<int64_t>(ds.pairs.size()) < cfg.batch_size)
    throw LLCError("dataset holds " + std::to_string(ds.pairs.size()) +
                   " pairs, fewer than one minibatch of " + std::to_string(cfg.batch_size));
  Restriction r = restrict_head(params, block, head, cfg.qkv_only);
  auto make_sampler = [&](int) {
    return minibatch_sampler(params, r, layout, &ds, cfg.batch_size);
  };
  LLCEstimate est = estimate_chains(r.w0, make_sampler, cfg);
  est.head = HeadId{0, block, head};
  est.checkpoint_step = checkpoint_step;
  return est;
}

std::vector<double> smooth_series(const std::vector<double>& xs, int window) {
  if (window < 1 || window % 2 == 0)
    throw LLCError("smoothing window must be odd and at least 1, got " + std::to_string(window));
  int64_t n = static_cast<int64_t>(xs.size());
  int64_t half = window / 2;
  std::vector<double> out(xs.size());
  for (int64_t i = 0; i < n; ++i) {
    int64_t lo = std::max<int64_t>(0, i - half);
    int64_t hi = std::min(n - 1, i + half);
    double sum = 0.0;
    for (int64_t j = lo; j <= hi; ++j) sum += xs[j];
    out[i] = sum / static_cast<double>(hi - lo + 1);
  }
  return out;
}

std::vector<std::pair<int64_t, double>> smooth_series(
    const std::vector<std::pair<int64_t, double>>& xs, int window) {
  std::vector<double> values;
  values.reserve(xs.size());
  for (const auto& [step, v] : xs) values.push_back(v);
  values = smooth_series(values, window);
  std::vector<std::pair<int64_t, double>> out;
  out.reserve(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out.emplace_back(xs[i].first, values[i]);
  return out;
}

TraceReport trace_report(const std::vector<double>& trace, int64_t burn_in) {
  if (trace.empty()) throw LLCError("trace_report needs a non-empty trace");
  int64_t n = static_cast<int64_t>(trace.size());
  if (burn_in < 0 || burn_in >= n)
    throw LLCError("burn-in " + std::to_string(burn_in) +
                   " leaves no samples in a trace of length " + std::to_string(n));
  TraceReport rep;
  SegmentFit f = fit_segment(trace, burn_in);
  rep.slope = f.slope;
  rep.level = f.level;
  rep.converged = drift_ok(f, n - burn_in);

  const int64_t half = 15;  // width-31 rolling median
  std::vector<double> resid(n), absresid(n);
  for (int64_t i = 0; i < n; ++i) {
    int64_t lo = std::max<int64_t>(0, i - half);
    int64_t hi = std::min(n - 1, i + half);
    std::vector<double> seg(trace.begin() + lo, trace.begin() + hi + 1);
    resid[i] = trace[i] - median_of(std::move(seg));
    absresid[i] = std::abs(resid[i]);
  }
  double med = median_of(std::vector<double>(trace.begin(), trace.end()));
  double mad = std::max(median_of(std::move(absresid)), 1e-12 * std::max(1.0, std::abs(med)));
  for (int64_t i = 0; i < n; ++i)
    if (resid[i] > 5.0 * mad) ++rep.spike_count;

  rep.suggested_burn_in = n;
  for (int k = 0; k < 20; ++k) {
    int64_t b = k * n / 20;
    if (drift_ok(fit_segment(trace, b), n - b)) {
      rep.suggested_burn_in = b;
      break;
    }
  }
  return rep;
}

namespace {

void write_text(const std::string& path, const std::string& text, const char* what) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LLCError(std::string("cannot open ") + what + " file " + path + " for writing");
  out << text;
  if (!out) throw LLCError(std::string("failed writing ") + what + " file " + path);
}

}  // namespace

void write_llc_csv(const std::string& path, const LLCEstimate& est) {
  std::string text = "chain,lambda_hat,aborted,abort_step,post_mean,trace_min,trace_max\n";
  for (const auto& c : est.chains) {
    text += std::to_string(c.chain) + "," + fmt(c.lambda_hat) + "," +
            std::to_string(c.aborted ? 1 : 0) + "," + std::to_string(c.abort_step) + "," +
            fmt(c.post_mean) + "," + fmt(c.trace_min) + "," + fmt(c.trace_max) + "\n";
  }
  write_text(path, text, "chain summary");
}

void write_trace_csv(const std::string& path, const ChainResult& chain) {
  std::string text = "step,loss\n";
  for (size_t t = 0; t < chain.trace.size(); ++t)
    text += std::to_string(t) + "," + fmt(chain.trace[t]) + "\n";
  write_text(path, text, "trace");
}

void write_llc_series_csv(const std::string& path,
                          const std::vector<std::pair<int64_t, double>>& raw,
                          const std::vector<std::pair<int64_t, double>>& smoothed) {
  if (raw.size() != smoothed.size())
    throw LLCError("series length " + std::to_string(raw.size()) + " vs smoothed " +
                   std::to_string(smoothed.size()));
  std::string text = "step,lambda_hat,smoothed\n";
  for (size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].first != smoothed[i].first)
      throw LLCError("series step mismatch at row " + std::to_string(i));
    text += std::to_string(raw[i].first) + "," + fmt(raw[i].second) + "," +
            fmt(smoothed[i].second) + "\n";
  }
  write_text(path, text, "series");
}

void write_llc_metadata(const std::string& path, const LLCEstimate& est) {
  int aborted = 0;
  for (const auto& c : est.chains) aborted += c.aborted ? 1 : 0;
  std::string text;
  text += "block=" + std::to_string(est.head.block) + "\n";
  text += "head=" + std::to_string(est.head.head) + "\n";
  text += "checkpoint=" + std::to_string(est.checkpoint_step) + "\n";
  text += "chains=" + std::to_string(est.chains.size()) + "\n";
  text += "aborted=" + std::to_string(aborted) + "\n";
  text += "anchor_loss=" + fmt(est.anchor_loss) + "\n";
  text += "mean_lambda=" + fmt(est.mean_lambda) + "\n";
  write_text(path, text, "metadata");
}

}  // namespace psim
