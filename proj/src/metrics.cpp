#include <psim/metrics.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <psim/rng.hpp>

namespace psim {

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void check_alpha_shape(const char* where, const Tensor32& alpha,
                       const std::vector<ParticleState>& states) {
  if (states.empty()) throw MetricsError(std::string(where) + ": empty evaluation set");
  int64_t b = static_cast<int64_t>(states.size());
  int64_t n = states[0].n();
  for (const ParticleState& s : states)
    if (s.n() != n)
      throw MetricsError(std::string(where) + ": evaluation states have mixed particle counts");
  if (alpha.shape != Shape{b, n, n})
    throw MetricsError(std::string(where) + ": attention shape " + shape_str(alpha.shape) +
                       " does not match " + std::to_string(b) + " states of " +
                       std::to_string(n) + " particles");
}

void check_head(const ModelParams& params, const HeadId& head) {
  const ModelConfig& cfg = params.config;
  if (head.block < 0 || head.block >= cfg.blocks || head.head < 0 || head.head >= cfg.heads)
    throw MetricsError("head (" + std::to_string(head.block) + "," + std::to_string(head.head) +
                       ") out of range for " + std::to_string(cfg.blocks) + " blocks of " +
                       std::to_string(cfg.heads) + " heads");
}

// One capture pass over the eval states in fixed-size chunks, reassembled
// into a [B,N,N] tensor per head.
std::map<std::pair<int, int>, Tensor32> collect_attention(
    const ModelParams& params, const BoundaryLayout& layout,
    const std::vector<ParticleState>& states) {
  if (states.empty())
    throw MetricsError("attention metrics: empty evaluation set");
  const size_t chunk = 32;
  int64_t b = static_cast<int64_t>(states.size());
  int64_t n = states[0].n();
  std::map<std::pair<int, int>, Tensor32> out;
  for (size_t start = 0; start < states.size(); start += chunk) {
    size_t stop = std::min(states.size(), start + chunk);
    std::vector<ParticleState> sub(states.begin() + static_cast<ptrdiff_t>(start),
                                   states.begin() + static_cast<ptrdiff_t>(stop));
    auto [preds, records] = forward_with_attention(params, layout, sub);
    (void)preds;
    for (const AttentionRecord& rec : records) {
      Tensor32& dst =
          out.try_emplace({rec.block, rec.head}, Tensor32{Shape{b, n, n}}).first->second;
      size_t rows = (stop - start) * static_cast<size_t>(n * n);
      std::copy(rec.alpha.data.begin(), rec.alpha.data.begin() + static_cast<ptrdiff_t>(rows),
                dst.data.begin() + static_cast<ptrdiff_t>(start * static_cast<size_t>(n * n)));
    }
  }
  return out;
}

Tensor32 head_attention(const ModelParams& params, const BoundaryLayout& layout,
                        const HeadId& head, const std::vector<ParticleState>& states) {
  check_head(params, head);
  auto all = collect_attention(params, layout, states);
  return std::move(all.at({head.block, head.head}));
}

double pair_distance(const ParticleState& s, int64_t i, int64_t j) {
  return (s.pos[static_cast<size_t>(i)] - s.pos[static_cast<size_t>(j)]).norm();
}

}  // namespace

std::vector<ParticleState> eval_states(const SimConfig& cfg, uint64_t master_seed,
                                       int trajectories, int per_trajectory) {
  if (trajectories < 1) throw MetricsError("eval_states needs at least one trajectory");
  if (per_trajectory < 1)
    throw MetricsError("eval_states needs at least one state per trajectory");
  std::vector<ParticleState> out;
  out.reserve(static_cast<size_t>(trajectories) * static_cast<size_t>(per_trajectory));
  for (int t = 0; t < trajectories; ++t) {
    uint64_t seed = Rng::substream_seed(master_seed, "eval/" + std::to_string(t));
    std::vector<ParticleState> traj = simulate_trajectory(cfg, seed);
    if (per_trajectory == 1) {
      out.push_back(traj.front());
      continue;
    }
    for (int j = 0; j < per_trajectory; ++j) {
      size_t idx = static_cast<size_t>((static_cast<int64_t>(j) * cfg.steps) /
                                       (per_trajectory - 1));
      out.push_back(traj[idx]);
    }
  }
  return out;
}

double score_from_attention(const Tensor32& alpha, const std::vector<ParticleState>& states,
                            double radius) {
  check_alpha_shape("collision score", alpha, states);
  if (!(radius > 0))
    throw MetricsError("collision score: radius must be positive, got " + std::to_string(radius));
  int64_t b = static_cast<int64_t>(states.size());
  int64_t n = states[0].n();
  double sum = 0;
  for (int64_t s = 0; s < b; ++s)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        if (i == j) continue;
        if (pair_distance(states[static_cast<size_t>(s)], i, j) < radius)
          sum += static_cast<double>(alpha.at({s, i, j}));
      }
  return sum / (static_cast<double>(b) * static_cast<double>(n));
}

double correlation_from_attention(const Tensor32& alpha,
                                  const std::vector<ParticleState>& states) {
  check_alpha_shape("attention-distance correlation", alpha, states);
  if (states.size() < 2)
    throw MetricsError("attention-distance correlation needs at least 2 states, got " +
                       std::to_string(states.size()));
  int64_t b = static_cast<int64_t>(states.size());
  int64_t n = states[0].n();
  double total = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double dm = 0, am = 0;
      for (int64_t s = 0; s < b; ++s) {
        dm += pair_distance(states[static_cast<size_t>(s)], i, j);
        am += static_cast<double>(alpha.at({s, i, j}));
      }
      dm /= static_cast<double>(b);
      am /= static_cast<double>(b);
      double sdd = 0, saa = 0, sda = 0;
      for (int64_t s = 0; s < b; ++s) {
        double dd = pair_distance(states[static_cast<size_t>(s)], i, j) - dm;
        double da = static_cast<double>(alpha.at({s, i, j})) - am;
        sdd += dd * dd;
        saa += da * da;
        sda += dd * da;
      }
      if (sdd > 0 && saa > 0) total += sda / std::sqrt(sdd * saa);
    }
  return total / (static_cast<double>(n) * static_cast<double>(n - 1));
}

double collision_detection_score(const ModelParams& params, const BoundaryLayout& layout,
                                 const HeadId& head, const std::vector<ParticleState>& states,
                                 double radius) {
  return score_from_attention(head_attention(params, layout, head, states), states, radius);
}

double attention_distance_correlation(const ModelParams& params, const BoundaryLayout& layout,
                                      const HeadId& head,
                                      const std::vector<ParticleState>& states) {
  return correlation_from_attention(head_attention(params, layout, head, states), states);
}

std::vector<HeadMetrics> analyze_heads(const ModelParams& params, const BoundaryLayout& layout,
                                       const std::vector<ParticleState>& states, double radius) {
  auto all = collect_attention(params, layout, states);
  std::vector<HeadMetrics> out;
  out.reserve(all.size());
  for (const auto& [key, alpha] : all)
    out.push_back({key.first, key.second, score_from_attention(alpha, states, radius),
                   correlation_from_attention(alpha, states)});
  return out;
}

HeadClass classify_head(double score, const ClassifyBands& bands) {
  if (!(score >= 0 && score <= 1))
    throw MetricsError("classify_head: score outside [0,1]: " + std::to_string(score));
  if (!(bands.partial >= 0 && bands.partial < bands.full && bands.full <= 1))
    throw MetricsError("classify_head: bands must satisfy 0 <= partial < full <= 1");
  if (score >= bands.full) return HeadClass::full;
  if (score >= bands.partial) return HeadClass::partial;
  return HeadClass::none;
}

std::string head_class_name(HeadClass c) {
  switch (c) {
    case HeadClass::full:
      return "true";
    case HeadClass::partial:
      return "partial";
    default:
      return "none";
  }
}

std::string attention_svg(const std::vector<Vec2>& positions, const Tensor32& alpha,
                          double box_width, double box_height, double particle_radius) {
  int64_t n = static_cast<int64_t>(positions.size());
  if (n < 1) throw MetricsError("attention_svg: no particles");
  if (alpha.shape != Shape{n, n})
    throw MetricsError("attention_svg: attention shape " + shape_str(alpha.shape) +
                       " does not match " + std::to_string(n) + " particles");
  if (!(box_width > 0) || !(box_height > 0))
    throw MetricsError("attention_svg: box dimensions must be positive");
  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"-1 -1 " +
         fmt6(box_width + 2) + " " + fmt6(box_height + 2) + "\">\n";
  svg += "<g transform=\"translate(0," + fmt6(box_height) + ") scale(1,-1)\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + fmt6(box_width) + "\" height=\"" +
         fmt6(box_height) + "\" fill=\"none\" stroke=\"#999\" stroke-width=\"0.05\"/>\n";
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double a = static_cast<double>(alpha.at({i, j}));
      if (a <= 1e-6) continue;
      svg += "<line x1=\"" + fmt6(positions[static_cast<size_t>(i)].x) + "\" y1=\"" +
             fmt6(positions[static_cast<size_t>(i)].y) + "\" x2=\"" +
             fmt6(positions[static_cast<size_t>(j)].x) + "\" y2=\"" +
             fmt6(positions[static_cast<size_t>(j)].y) +
             "\" stroke=\"#1f77b4\" stroke-width=\"0.08\" stroke-opacity=\"" +
             fmt6(std::min(a, 1.0)) + "\"/>\n";
    }
  for (int64_t i = 0; i < n; ++i)
    svg += "<circle cx=\"" + fmt6(positions[static_cast<size_t>(i)].x) + "\" cy=\"" +
           fmt6(positions[static_cast<size_t>(i)].y) + "\" r=\"" + fmt6(particle_radius) +
           "\" fill=\"#d62728\" fill-opacity=\"0.85\"/>\n";
  svg += "</g>\n</svg>\n";
  return svg;
}

std::string render_attention_svg(const ModelParams& params, const BoundaryLayout& layout,
                                 const HeadId& head, const ParticleState& state,
                                 double particle_radius) {
  Tensor32 alpha = head_attention(params, layout, head, {state});
  int64_t n = state.n();
  Tensor32 flat{Shape{n, n}};
  flat.data = alpha.data;
  double w = 0, h = 0;
  for (const Vec2& p : layout.points) {
    w = std::max(w, p.x);
    h = std::max(h, p.y);
  }
  return attention_svg(state.pos, flat, w, h, particle_radius);
}

void render_attention(const ModelParams& params, const BoundaryLayout& layout,
                      const HeadId& head, const ParticleState& state, const std::string& path,
                      double particle_radius) {
  std::string svg = render_attention_svg(params, layout, head, state, particle_radius);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MetricsError("cannot open " + path + " for writing");
  out << svg;
  if (!out) throw MetricsError("write to " + path + " failed");
}

ScoreHistogram score_histogram(const std::vector<HeadScoreSeries>& series) {
  if (series.empty()) throw MetricsError("score_histogram: no head series");
  std::set<int64_t> step_set;
  for (const HeadScoreSeries& hs : series) {
    if (hs.points.empty())
      throw MetricsError("score_histogram: a head series is empty");
    for (const auto& [step, score] : hs.points) {
      if (!(score >= 0 && score <= 1))
        throw MetricsError("score_histogram: score outside [0,1]: " + std::to_string(score));
      step_set.insert(step);
    }
  }
  ScoreHistogram hist;
  hist.steps.assign(step_set.begin(), step_set.end());
  std::map<int64_t, size_t> col;
  for (size_t c = 0; c < hist.steps.size(); ++c) col[hist.steps[c]] = c;
  hist.counts.assign(hist.steps.size(), std::vector<int64_t>(static_cast<size_t>(hist.bins), 0));
  for (const HeadScoreSeries& hs : series)
    for (const auto& [step, score] : hs.points) {
      auto bin = static_cast<size_t>(std::min<int64_t>(
          hist.bins - 1, static_cast<int64_t>(score * hist.bins)));
      hist.counts[col[step]][bin] += 1;
    }
  std::vector<int64_t> nonzero;
  for (const auto& column : hist.counts)
    for (int64_t c : column)
      if (c > 0) nonzero.push_back(c);
  std::sort(nonzero.begin(), nonzero.end());
  size_t idx = static_cast<size_t>(
      std::ceil(0.95 * static_cast<double>(nonzero.size()))) - 1;
  hist.clip_threshold = static_cast<double>(nonzero[idx]);
  hist.clipped.assign(hist.steps.size(),
                      std::vector<uint8_t>(static_cast<size_t>(hist.bins), 0));
  for (size_t c = 0; c < hist.counts.size(); ++c)
    for (size_t b = 0; b < hist.counts[c].size(); ++b)
      hist.clipped[c][b] =
          hist.counts[c][b] > 0 &&
          static_cast<double>(hist.counts[c][b]) >= hist.clip_threshold;
  return hist;
}

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MetricsError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw MetricsError("write to " + path + " failed");
}

}  // namespace

void write_head_series_csv(const std::string& path, const HeadScoreSeries& scores,
                           const CorrelationSeries& correlations) {
  if (scores.points.size() != correlations.points.size())
    throw MetricsError("head series csv: score and correlation series cover different steps");
  std::string text = "step,score,correlation\n";
  for (size_t i = 0; i < scores.points.size(); ++i) {
    if (scores.points[i].first != correlations.points[i].first)
      throw MetricsError("head series csv: score and correlation series cover different steps");
    text += std::to_string(scores.points[i].first) + "," + fmt_g(scores.points[i].second) + "," +
            fmt_g(correlations.points[i].second) + "\n";
  }
  write_text(path, text);
}

void write_histogram_csv(const std::string& path, const ScoreHistogram& hist) {
  std::string text = "step,score_lo,score_hi,density,clipped\n";
  for (size_t c = 0; c < hist.steps.size(); ++c)
    for (size_t b = 0; b < static_cast<size_t>(hist.bins); ++b)
      text += std::to_string(hist.steps[c]) + "," +
              fmt6(static_cast<double>(b) / hist.bins) + "," +
              fmt6(static_cast<double>(b + 1) / hist.bins) + "," +
              std::to_string(hist.counts[c][b]) + "," +
              std::to_string(static_cast<int>(hist.clipped[c][b])) + "\n";
  write_text(path, text);
}

void write_metrics_metadata(const std::string& path, double radius,
                            const ClassifyBands& bands) {
  std::string text = "score_radius=" + fmt6(radius) + "\n" +
                     "band_full=" + fmt6(bands.full) + "\n" +
                     "band_partial=" + fmt6(bands.partial) + "\n";
  write_text(path, text);
}

}  // namespace psim
