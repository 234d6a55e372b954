#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <psim/model.hpp>
#include <psim/sim.hpp>

namespace psim {

struct MetricsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct HeadId {
  int run = 0;
  int block = 0;
  int head = 0;
};

// Collision detection score per checkpoint step, each value in [0,1].
struct HeadScoreSeries {
  HeadId head;
  std::vector<std::pair<int64_t, double>> points;
};

// Attention-distance correlation per checkpoint step, each value in [-1,1].
struct CorrelationSeries {
  HeadId head;
  std::vector<std::pair<int64_t, double>> points;
};

// Just above contact for unit-diameter particles.
inline double score_radius(double diameter) { return 1.05 * diameter; }

// Held-out evaluation states: `trajectories` runs seeded from the "eval/<i>"
// substreams of master_seed (disjoint from the dataset's "traj/<i>" streams),
// each sampled evenly at per_trajectory states including both endpoints.
std::vector<ParticleState> eval_states(const SimConfig& cfg, uint64_t master_seed,
                                       int trajectories = 8, int per_trajectory = 32);

// Mean over states and query particles of the attention mass a head puts on
// neighbours strictly inside `radius`.  alpha is [B,N,N] matching states.
double score_from_attention(const Tensor32& alpha, const std::vector<ParticleState>& states,
                            double radius);

// Mean over the N^2-N ordered pairs of the Pearson correlation, across
// states, between inter-particle distance and attention score.  A pair with
// zero variance on either side contributes 0.  Needs at least two states.
double correlation_from_attention(const Tensor32& alpha,
                                  const std::vector<ParticleState>& states);

// The same metrics evaluated on a live model: run the forward pass with
// attention capture over the eval states (chunked) and reduce one head.
double collision_detection_score(const ModelParams& params, const BoundaryLayout& layout,
                                 const HeadId& head, const std::vector<ParticleState>& states,
                                 double radius);
double attention_distance_correlation(const ModelParams& params, const BoundaryLayout& layout,
                                      const HeadId& head,
                                      const std::vector<ParticleState>& states);

// Score and correlation for every head of the model in one sweep over the
// eval states; rows ordered by (block, head).
struct HeadMetrics {
  int block = 0;
  int head = 0;
  double score = 0;
  double correlation = 0;
};

std::vector<HeadMetrics> analyze_heads(const ModelParams& params, const BoundaryLayout& layout,
                                       const std::vector<ParticleState>& states, double radius);

// Score bands; a head at or above `full` is a collision detector, below
// `partial` it is none, in between partial.
struct ClassifyBands {
  double full = 0.85;
  double partial = 0.25;
};

enum class HeadClass { full, partial, none };

HeadClass classify_head(double score, const ClassifyBands& bands = {});
std::string head_class_name(HeadClass c);

// Particles as circles plus one line per ordered pair carrying visible
// attention (alpha > 1e-6), stroke opacity equal to the attention score.
// Byte-deterministic for fixed inputs.  alpha is [N,N] over the positions.
std::string attention_svg(const std::vector<Vec2>& positions, const Tensor32& alpha,
                          double box_width, double box_height, double particle_radius = 0.5);

// The same picture for a live head on one state; the box is taken from the
// extent of the boundary points.
std::string render_attention_svg(const ModelParams& params, const BoundaryLayout& layout,
                                 const HeadId& head, const ParticleState& state,
                                 double particle_radius = 0.5);
void render_attention(const ModelParams& params, const BoundaryLayout& layout,
                      const HeadId& head, const ParticleState& state, const std::string& path,
                      double particle_radius = 0.5);

// Scores binned 50 ways over [0,1] per checkpoint step (columns are the
// sorted union of series steps).  Each column's counts sum to the number of
// heads reporting at that step.  clip_threshold is the nearest-rank 95th
// percentile of the nonzero cell densities; cells at or above it carry the
// clipped flag.
struct ScoreHistogram {
  std::vector<int64_t> steps;
  int bins = 50;
  std::vector<std::vector<int64_t>> counts;
  std::vector<std::vector<uint8_t>> clipped;
  double clip_threshold = 0;
};

ScoreHistogram score_histogram(const std::vector<HeadScoreSeries>& series);

// step,score,correlation rows; the two series must cover the same steps.
void write_head_series_csv(const std::string& path, const HeadScoreSeries& scores,
                           const CorrelationSeries& correlations);
// step,score_lo,score_hi,density,clipped rows in (step, bin) order.
void write_histogram_csv(const std::string& path, const ScoreHistogram& hist);
// Records the analysis constants (radius, bands) next to the outputs.
void write_metrics_metadata(const std::string& path, double radius,
                            const ClassifyBands& bands);

}  // namespace psim
