#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "psim/autodiff.hpp"
#include "psim/sim.hpp"
#include "psim/tensor.hpp"

namespace psim {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int blocks = 4;
  int heads = 8;
  int embed_dim = 128;
  double boundary_mask_radius = 2.0;
  int spatial_dim = 2;
  std::string activation = "relu";
  double dt = 0.005;
  double gravity = 9.8;

  int head_dim() const { return embed_dim / heads; }
  void validate() const;
};

// Fixed particles placed every `spacing` along all four walls; corners appear
// once.  Any point on a wall is within spacing/2 of some boundary particle.
struct BoundaryLayout {
  double spacing = 0.5;
  std::vector<Vec2> points;
};

BoundaryLayout boundary_layout(double box_width, double box_height, double spacing = 0.5);

// Tensors keyed by name; the canonical set and shapes come from param_layout.
// Matrices are stored [in, out] for row-vector application, vectors rank 1.
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor32> tensors;
};

std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& cfg);
std::vector<std::string> param_names(const ModelConfig& cfg);
Shape param_shape(const ModelConfig& cfg, const std::string& name);

// Fan-in-scaled uniform weights (+-sqrt(1/fan_in)), zero biases, unit
// layer-norm gains.  Each tensor draws from its own named substream, so the
// values do not depend on initialization order.
ModelParams init_params(const ModelConfig& cfg, uint64_t seed);

void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

// Attention weights of one head on one batch: [batch, N, N] with zero
// diagonal; each row sums to less than one because of the zero slot.
struct AttentionRecord {
  int block = 0;
  int head = 0;
  Tensor32 alpha;
};

// A fully built forward (and optionally loss) graph plus the node ids needed
// to read predictions, per-parameter gradients and captured attention.
template <typename T>
struct ModelGraph {
  GraphT<T> graph;
  std::map<std::string, int> param_leaf;
  int prediction = -1;  // [batch, N, 2D], rows [p' v']
  int loss = -1;        // batch-mean squared state error, -1 if no targets
  struct Alpha {
    int block;
    int head;
    int node;
  };
  std::vector<Alpha> alphas;
};

// Builds the whole model on a fresh graph: embed, boundary term, L pre-norm
// blocks, final layer norm, unembed and the in-graph Euler update.  All
// parameter leaves require grad.  Non-finite intermediates surface as
// ModelError naming the block/head being evaluated.
template <typename T>
ModelGraph<T> build_forward(const ModelParams& params, const BoundaryLayout& layout,
                            const std::vector<ParticleState>& inputs,
                            const std::vector<ParticleState>* targets, bool capture = false);

// Plain float32 evaluation helpers on top of build_forward.
std::vector<ParticleState> predict_batch(const ModelParams& params, const BoundaryLayout& layout,
                                         const std::vector<ParticleState>& inputs);
ParticleState predict_state(const ModelParams& params, const BoundaryLayout& layout,
                            const ParticleState& input);
std::pair<std::vector<ParticleState>, std::vector<AttentionRecord>> forward_with_attention(
    const ModelParams& params, const BoundaryLayout& layout,
    const std::vector<ParticleState>& inputs);
double batch_loss(const ModelParams& params, const BoundaryLayout& layout,
                  const std::vector<ParticleState>& inputs,
                  const std::vector<ParticleState>& targets);

// Stage evaluators shared with the full pass, exposed for direct testing.
Tensor32 embed_batch(const ModelParams& params, const std::vector<ParticleState>& inputs);
Tensor32 boundary_embed_batch(const ModelParams& params, const BoundaryLayout& layout,
                              const std::vector<ParticleState>& inputs);
std::pair<Tensor32, std::vector<AttentionRecord>> attention_forward(const ModelParams& params,
                                                                    int block, const Tensor32& x,
                                                                    bool capture = false);
Tensor32 block_forward(const ModelParams& params, int block, const Tensor32& x);

}  // namespace psim
