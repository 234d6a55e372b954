#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <psim/data.hpp>
#include <psim/model.hpp>
#include <psim/sim.hpp>

namespace psim {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Optimizer and loop settings.  Checkpoint steps are not stored here; they
// come from checkpoint_schedule(total_steps, checkpoint_points).
struct TrainConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  int batch_size = 64;
  int64_t total_steps = 64000;
  int checkpoint_points = 60;
  uint64_t seed = 0;

  void validate() const;
};

// Step 0, then about `points` log-spaced steps ending exactly at total_steps.
// Strictly increasing; early steps collapse under rounding, so the result can
// hold fewer than points+1 entries.
std::vector<int64_t> checkpoint_schedule(int64_t total_steps, int points = 60);

// Squared Frobenius norm of the state difference for one sample; the batch
// overload averages the per-sample values and is the training loss.
double mse_loss(const ParticleState& pred, const ParticleState& target);
double mse_loss(const std::vector<ParticleState>& pred,
                const std::vector<ParticleState>& target);

// Per-tensor first and second moment estimates; t counts completed steps.
struct AdamState {
  std::map<std::string, Tensor32> m;
  std::map<std::string, Tensor32> v;
  int64_t t = 0;
};

// One bias-corrected Adam update in place.  Moments are created on first use.
// A non-finite gradient is rejected naming the offending tensor.
void adam_step(ModelParams& params, const std::map<std::string, Tensor32>& grads,
               AdamState& state, const TrainConfig& cfg);

// Parameters at a scheduled step.  loss_avg is the mean minibatch loss since
// the previous checkpoint; the step-0 snapshot has seen no batches and
// carries 0.
struct Checkpoint {
  int64_t step = 0;
  ModelParams params;
  double loss_avg = 0;
};

struct TrainResult {
  std::vector<int64_t> schedule;
  std::vector<Checkpoint> checkpoints;
  std::vector<std::pair<int64_t, double>> loss_log;  // (step, minibatch loss)
  BatchCursor cursor;                                // dataset position after the run
};

// Full training loop: sequential batches, Adam updates, a checkpoint at every
// scheduled step.  Deterministic for fixed configs and dataset.  Dataset
// exhaustion and non-finite losses abort with the step number.
TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& data,
                  const BoundaryLayout& layout);

// Model as simulator: x_{n+1} = f(x_n).  states and energies hold steps+1
// entries including the start.  A non-finite state aborts with the step
// reached.
struct RolloutResult {
  std::vector<ParticleState> states;
  std::vector<double> energies;
};

RolloutResult rollout(const ModelParams& params, const BoundaryLayout& layout,
                      const SimConfig& sim_cfg, const ParticleState& initial, int steps);

// step,loss rows for the training log; step,total_energy rows for rollouts.
void write_loss_csv(const std::string& path,
                    const std::vector<std::pair<int64_t, double>>& log);
void write_energy_csv(const std::string& path, const std::vector<double>& energies);

// ckpt_00000123.bin
std::string checkpoint_filename(int64_t step);

// Writes loss.csv, index.csv and one checkpoint file per scheduled step under
// dir, creating the directory if needed.  Byte-stable across reruns.
void save_run(const std::string& dir, const TrainResult& result);

}  // namespace psim
