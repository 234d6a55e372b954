#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "psim/metrics.hpp"
#include "psim/model.hpp"
#include "psim/rng.hpp"
#include "psim/sim.hpp"

using psim::BoundaryLayout;
using psim::ClassifyBands;
using psim::CorrelationSeries;
using psim::HeadClass;
using psim::HeadId;
using psim::HeadScoreSeries;
using psim::MetricsError;
using psim::ModelConfig;
using psim::ModelParams;
using psim::ParticleState;
using psim::ScoreHistogram;
using psim::SimConfig;
using psim::Tensor32;
using psim::Vec2;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.embed_dim = 16;
  return cfg;
}

ParticleState state_at(std::vector<Vec2> pos) {
  ParticleState s;
  s.pos = std::move(pos);
  s.vel.assign(s.pos.size(), Vec2{});
  return s;
}

std::vector<ParticleState> random_states(int count, int particles, uint64_t seed) {
  SimConfig cfg;
  cfg.particle_count = particles;
  std::vector<ParticleState> out;
  for (int i = 0; i < count; ++i)
    out.push_back(psim::init_random_state(cfg, seed + static_cast<uint64_t>(i)));
  return out;
}

Tensor32 alpha_from(const std::vector<ParticleState>& states,
                    double (*fn)(double dist)) {
  int64_t b = static_cast<int64_t>(states.size());
  int64_t n = states[0].n();
  Tensor32 a{psim::Shape{b, n, n}};
  for (int64_t s = 0; s < b; ++s)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        if (i == j) continue;
        double d = (states[static_cast<size_t>(s)].pos[static_cast<size_t>(i)] -
                    states[static_cast<size_t>(s)].pos[static_cast<size_t>(j)])
                       .norm();
        a.at({s, i, j}) = static_cast<float>(fn(d));
      }
  return a;
}

// Pearson through explicit z-scores, a different route than the library's
// covariance ratio.
double zscore_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += (x[i] - mx) * (x[i] - mx);
    sy += (y[i] - my) * (y[i] - my);
  }
  if (sx == 0 || sy == 0) return 0;
  sx = std::sqrt(sx);
  sy = std::sqrt(sy);
  double r = 0;
  for (size_t i = 0; i < x.size(); ++i) r += ((x[i] - mx) / sx) * ((y[i] - my) / sy);
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

size_t count_of(const std::string& hay, const std::string& needle) {
  size_t count = 0;
  for (size_t at = hay.find(needle); at != std::string::npos;
       at = hay.find(needle, at + needle.size()))
    ++count;
  return count;
}

}  // namespace

TEST_CASE("collision score sums attention inside the radius") {
  ParticleState s = state_at({{5, 5}, {5.8, 5}, {12, 5}});
  Tensor32 a{psim::Shape{1, 3, 3}};
  a.at({0, 0, 1}) = 0.7f;
  a.at({0, 0, 2}) = 0.2f;
  a.at({0, 1, 0}) = 0.5f;
  a.at({0, 1, 2}) = 0.3f;
  a.at({0, 2, 0}) = 0.1f;
  a.at({0, 2, 1}) = 0.2f;
  double s105 = psim::score_from_attention(a, {s}, psim::score_radius(1.0));
  CHECK(s105 == doctest::Approx((0.7 + 0.5) / 3.0).epsilon(1e-6));
}

TEST_CASE("collision score hits the extremes") {
  ParticleState near = state_at({{5, 5}, {5.8, 5}});
  Tensor32 a{psim::Shape{1, 2, 2}};
  a.at({0, 0, 1}) = 0.9f;
  a.at({0, 1, 0}) = 0.6f;
  CHECK(psim::score_from_attention(a, {near}, 1.05) ==
        doctest::Approx((0.9 + 0.6) / 2.0).epsilon(1e-12));

  ParticleState far = state_at({{5, 5}, {20, 5}});
  CHECK(psim::score_from_attention(a, {far}, 1.05) == 0.0);
}

TEST_CASE("uniform attention scores the in-radius pair fraction") {
  std::vector<ParticleState> states = random_states(6, 6, 100);
  int64_t n = states[0].n();
  Tensor32 a{psim::Shape{static_cast<int64_t>(states.size()), n, n}};
  for (int64_t s = 0; s < static_cast<int64_t>(states.size()); ++s)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j)
        if (i != j) a.at({s, i, j}) = 1.0f / static_cast<float>(n - 1);
  double radius = 4.0;
  int64_t inside = 0, total = 0;
  for (const ParticleState& st : states)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        if (i == j) continue;
        total += 1;
        if ((st.pos[static_cast<size_t>(i)] - st.pos[static_cast<size_t>(j)]).norm() < radius)
          inside += 1;
      }
  double q = static_cast<double>(inside) / static_cast<double>(total);
  CHECK(q > 0.05);
  double got = psim::score_from_attention(a, states, radius);
  CHECK(got == doctest::Approx(q).epsilon(1e-6));
}

TEST_CASE("collision score validates its inputs") {
  Tensor32 a{psim::Shape{1, 2, 2}};
  ParticleState s = state_at({{1, 1}, {2, 2}});
  CHECK_THROWS_AS(psim::score_from_attention(a, {}, 1.0), MetricsError);
  CHECK_THROWS_AS(psim::score_from_attention(a, {s}, 0.0), MetricsError);
  CHECK_THROWS_WITH_AS(psim::score_from_attention(a, {s, s}, 1.0),
                       doctest::Contains("does not match"), MetricsError);
}

TEST_CASE("constant attention has zero distance correlation") {
  std::vector<ParticleState> states = random_states(4, 4, 50);
  Tensor32 a = alpha_from(states, [](double) { return 0.25; });
  CHECK(psim::correlation_from_attention(a, states) == 0.0);
}

TEST_CASE("attention linear in distance correlates perfectly") {
  std::vector<ParticleState> states = random_states(5, 4, 60);
  Tensor32 a = alpha_from(states, [](double d) { return 0.01 * d + 0.002; });
  CHECK(psim::correlation_from_attention(a, states) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("decaying attention anticorrelates and matches a z-score oracle") {
  std::vector<ParticleState> states = random_states(7, 5, 70);
  Tensor32 a = alpha_from(states, [](double d) { return std::exp(-d); });
  double got = psim::correlation_from_attention(a, states);
  CHECK(got < 0.0);

  int64_t n = states[0].n();
  double want = 0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      std::vector<double> xs, ys;
      for (size_t s = 0; s < states.size(); ++s) {
        xs.push_back((states[s].pos[static_cast<size_t>(i)] -
                      states[s].pos[static_cast<size_t>(j)])
                         .norm());
        ys.push_back(a.at({static_cast<int64_t>(s), i, j}));
      }
      want += zscore_pearson(xs, ys);
    }
  want /= static_cast<double>(n * (n - 1));
  CHECK(got == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("correlation is invariant under positive affine rescaling") {
  std::vector<ParticleState> states = random_states(6, 4, 80);
  Tensor32 a = alpha_from(states, [](double d) { return std::exp(-0.5 * d); });
  Tensor32 scaled = a;
  for (float& v : scaled.data) v = 2.0f * v + 0.1f;
  double c1 = psim::correlation_from_attention(a, states);
  double c2 = psim::correlation_from_attention(scaled, states);
  CHECK(c2 == doctest::Approx(c1).epsilon(1e-5));
}

TEST_CASE("correlation flips sign when attention is negated") {
  std::vector<ParticleState> states = random_states(6, 4, 90);
  Tensor32 a = alpha_from(states, [](double d) { return std::exp(-d); });
  Tensor32 neg = a;
  for (float& v : neg.data) v = -v;
  CHECK(psim::correlation_from_attention(neg, states) ==
        doctest::Approx(-psim::correlation_from_attention(a, states)).epsilon(1e-12));
}

TEST_CASE("correlation needs at least two states") {
  std::vector<ParticleState> states = random_states(1, 4, 95);
  Tensor32 a = alpha_from(states, [](double) { return 0.1; });
  CHECK_THROWS_WITH_AS(psim::correlation_from_attention(a, states),
                       doctest::Contains("at least 2"), MetricsError);
}

TEST_CASE("head classification uses the banded thresholds") {
  CHECK(psim::classify_head(0.95) == HeadClass::full);
  CHECK(psim::classify_head(0.78) == HeadClass::partial);
  CHECK(psim::classify_head(0.02) == HeadClass::none);
  CHECK(psim::classify_head(0.85) == HeadClass::full);
  CHECK(psim::classify_head(0.25) == HeadClass::partial);
  CHECK(psim::classify_head(0.2499) == HeadClass::none);
  CHECK(psim::head_class_name(HeadClass::full) == "true");
  CHECK(psim::head_class_name(HeadClass::partial) == "partial");
  CHECK(psim::head_class_name(HeadClass::none) == "none");
}

TEST_CASE("head classification is monotone in the score") {
  auto rank = [](HeadClass c) {
    return c == HeadClass::none ? 0 : c == HeadClass::partial ? 1 : 2;
  };
  int last = 0;
  for (int i = 0; i <= 100; ++i) {
    int r = rank(psim::classify_head(i / 100.0));
    CHECK(r >= last);
    last = r;
  }
}

TEST_CASE("head classification honours overridden bands and rejects bad input") {
  ClassifyBands bands{0.9, 0.3};
  CHECK(psim::classify_head(0.88, bands) == HeadClass::partial);
  CHECK(psim::classify_head(0.91, bands) == HeadClass::full);
  CHECK(psim::classify_head(0.29, bands) == HeadClass::none);
  CHECK_THROWS_AS(psim::classify_head(-0.1), MetricsError);
  CHECK_THROWS_AS(psim::classify_head(1.1), MetricsError);
  CHECK_THROWS_AS(psim::classify_head(0.5, ClassifyBands{0.2, 0.8}), MetricsError);
}

TEST_CASE("eval states sample trajectories from their own substreams") {
  SimConfig cfg;
  cfg.particle_count = 5;
  cfg.steps = 64;
  std::vector<ParticleState> states = psim::eval_states(cfg, 123, 3, 4);
  REQUIRE(states.size() == 12);
  std::vector<ParticleState> again = psim::eval_states(cfg, 123, 3, 4);
  CHECK(states[0].pos[0].x == again[0].pos[0].x);
  CHECK(states[11].vel[4].y == again[11].vel[4].y);
  std::vector<ParticleState> other = psim::eval_states(cfg, 124, 3, 4);
  CHECK(states[0].pos[0].x != other[0].pos[0].x);

  uint64_t seed0 = psim::Rng::substream_seed(123, "eval/0");
  std::vector<ParticleState> traj = psim::simulate_trajectory(cfg, seed0);
  CHECK(states[0].pos[0].x == traj[0].pos[0].x);
  CHECK(states[3].pos[0].x == traj[64].pos[0].x);
  CHECK_THROWS_AS(psim::eval_states(cfg, 1, 0, 4), MetricsError);
}

TEST_CASE("live-model metrics stay in range and match the per-head path") {
  ModelConfig mcfg = tiny_config();
  ModelParams params = psim::init_params(mcfg, 7);
  BoundaryLayout layout = psim::boundary_layout(28, 14);
  std::vector<ParticleState> states = random_states(5, 5, 200);
  double radius = psim::score_radius(1.0);
  auto rows = psim::analyze_heads(params, layout, states, radius);
  REQUIRE(rows.size() == 2);
  for (const auto& row : rows) {
    CHECK(row.block == 0);
    CHECK(row.score >= 0.0);
    CHECK(row.score <= 1.0);
    CHECK(row.correlation >= -1.0);
    CHECK(row.correlation <= 1.0);
    HeadId id{0, row.block, row.head};
    CHECK(psim::collision_detection_score(params, layout, id, states, radius) == row.score);
    CHECK(psim::attention_distance_correlation(params, layout, id, states) == row.correlation);
  }
  CHECK(rows[0].head == 0);
  CHECK(rows[1].head == 1);
  CHECK_THROWS_WITH_AS(
      psim::collision_detection_score(params, layout, HeadId{0, 5, 0}, states, radius),
      doctest::Contains("out of range"), MetricsError);
}

TEST_CASE("chunked attention collection matches per-state scores") {
  ModelConfig mcfg = tiny_config();
  ModelParams params = psim::init_params(mcfg, 7);
  BoundaryLayout layout = psim::boundary_layout(28, 14);
  std::vector<ParticleState> states = random_states(70, 4, 300);
  double radius = 1.5;
  HeadId id{0, 0, 1};
  double whole = psim::collision_detection_score(params, layout, id, states, radius);
  double acc = 0;
  for (const ParticleState& s : states)
    acc += psim::collision_detection_score(params, layout, id, {s}, radius);
  CHECK(whole == doctest::Approx(acc / static_cast<double>(states.size())).epsilon(1e-12));
}

TEST_CASE("attention svg draws one line per visible attention entry") {
  std::vector<Vec2> pos = {{3, 3}, {6, 3}};
  Tensor32 a{psim::Shape{2, 2}};
  a.at({0, 1}) = 1.0f;
  std::string svg = psim::attention_svg(pos, a, 28, 14);
  CHECK(count_of(svg, "<line") == 1);
  CHECK(count_of(svg, "<circle") == 2);
  CHECK(svg.find("stroke-opacity=\"1\"") != std::string::npos);

  Tensor32 zero{psim::Shape{2, 2}};
  std::string blank = psim::attention_svg(pos, zero, 28, 14);
  CHECK(count_of(blank, "<line") == 0);
  CHECK(count_of(blank, "<circle") == 2);
}

TEST_CASE("rendered svg bytes are deterministic") {
  ModelConfig mcfg = tiny_config();
  ModelParams params = psim::init_params(mcfg, 7);
  BoundaryLayout layout = psim::boundary_layout(28, 14);
  ParticleState s = psim::init_random_state(SimConfig{}, 17);
  HeadId id{0, 0, 0};
  std::string first = psim::render_attention_svg(params, layout, id, s);
  std::string second = psim::render_attention_svg(params, layout, id, s);
  CHECK(first == second);
  CHECK(first.find("<svg") == 0);
  const std::string path = "test_metrics_head.svg";
  psim::render_attention(params, layout, id, s, path);
  CHECK(slurp(path) == first);
  std::remove(path.c_str());
}

TEST_CASE("score histogram puts a lone score in a single cell") {
  HeadScoreSeries one;
  one.points = {{0, 0.5}};
  ScoreHistogram hist = psim::score_histogram({one});
  REQUIRE(hist.steps == std::vector<int64_t>{0});
  int64_t nonzero = 0;
  for (int64_t c : hist.counts[0]) nonzero += (c != 0);
  CHECK(nonzero == 1);
  CHECK(hist.counts[0][25] == 1);
}

TEST_CASE("score histogram columns sum to the head count") {
  std::vector<HeadScoreSeries> series(3);
  series[0].points = {{0, 0.5}, {10, 0.95}};
  series[1].points = {{0, 0.5}, {10, 0.02}};
  series[2].points = {{0, 0.51}, {10, 1.0}};
  ScoreHistogram hist = psim::score_histogram(series);
  REQUIRE(hist.steps == (std::vector<int64_t>{0, 10}));
  for (const auto& column : hist.counts) {
    int64_t sum = 0;
    for (int64_t c : column) sum += c;
    CHECK(sum == 3);
  }
  CHECK(hist.counts[0][25] == 3);
  CHECK(hist.counts[1][47] == 1);
  CHECK(hist.counts[1][1] == 1);
  CHECK(hist.counts[1][49] == 1);
}

TEST_CASE("histogram clipping marks the top densities") {
  std::vector<HeadScoreSeries> series(5);
  for (int h = 0; h < 4; ++h) series[static_cast<size_t>(h)].points = {{0, 0.1 + 0.2 * h}};
  series[4].points = {{0, 0.1}};
  ScoreHistogram hist = psim::score_histogram(series);

  std::vector<int64_t> nonzero;
  for (const auto& column : hist.counts)
    for (int64_t c : column)
      if (c > 0) nonzero.push_back(c);
  std::sort(nonzero.begin(), nonzero.end());
  auto idx = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(nonzero.size()))) - 1;
  CHECK(hist.clip_threshold == static_cast<double>(nonzero[idx]));
  CHECK(hist.clip_threshold == 2.0);
  int clipped_cells = 0;
  for (size_t c = 0; c < hist.counts.size(); ++c)
    for (size_t b = 0; b < hist.counts[c].size(); ++b) {
      if (hist.clipped[c][b]) ++clipped_cells;
      CHECK(static_cast<bool>(hist.clipped[c][b]) ==
            (hist.counts[c][b] > 0 &&
             static_cast<double>(hist.counts[c][b]) >= hist.clip_threshold));
    }
  CHECK(clipped_cells == 1);
}

TEST_CASE("score histogram rejects malformed series") {
  CHECK_THROWS_AS(psim::score_histogram({}), MetricsError);
  HeadScoreSeries empty;
  CHECK_THROWS_AS(psim::score_histogram({empty}), MetricsError);
  HeadScoreSeries bad;
  bad.points = {{0, 1.5}};
  CHECK_THROWS_AS(psim::score_histogram({bad}), MetricsError);
}

TEST_CASE("metric csv files carry stable rows") {
  HeadScoreSeries scores;
  scores.points = {{0, 0.5}, {10, 0.75}};
  CorrelationSeries corr;
  corr.points = {{0, -0.25}, {10, 0.125}};
  const std::string spath = "test_metrics_series.csv";
  psim::write_head_series_csv(spath, scores, corr);
  CHECK(slurp(spath) == "step,score,correlation\n0,0.5,-0.25\n10,0.75,0.125\n");
  std::remove(spath.c_str());

  CorrelationSeries off;
  off.points = {{0, 0.0}};
  CHECK_THROWS_AS(psim::write_head_series_csv(spath, scores, off), MetricsError);

  HeadScoreSeries one;
  one.points = {{5, 0.61}};
  ScoreHistogram hist = psim::score_histogram({one});
  const std::string hpath = "test_metrics_hist.csv";
  psim::write_histogram_csv(hpath, hist);
  std::string text = slurp(hpath);
  CHECK(count_of(text, "\n") == 51);
  CHECK(text.find("5,0.6,0.62,1,1\n") != std::string::npos);
  std::remove(hpath.c_str());

  const std::string mpath = "test_metrics_meta.txt";
  psim::write_metrics_metadata(mpath, psim::score_radius(1.0), ClassifyBands{});
  CHECK(slurp(mpath) ==
        "score_radius=1.05\nband_full=0.85\nband_partial=0.25\n");
  std::remove(mpath.c_str());
}
