#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "psim/sim.hpp"

namespace psim {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One training sample: y is the state one dt after x on the same trajectory.
struct StatePair {
  ParticleState x;
  ParticleState y;
};

// On-disk layout, little-endian throughout:
//   offset 0   4 bytes   magic "PDS1"
//   offset 4   u32       version (currently 1)
//   offset 8   u32       particle count N
//   offset 12  u32       spatial dims D (2)
//   offset 16  u64       pair count
//   offset 24  u32       source seed count
//   offset 28  u64[]     source seeds
//   then pair_count records, each 2*N*2D float32: state x then state y,
//   row-major, one row per particle [pos.x pos.y vel.x vel.y].
struct DatasetHeader {
  uint32_t version = 1;
  uint32_t particle_count = 0;
  uint32_t dims = 2;
  std::vector<uint64_t> source_seeds;
};

struct Dataset {
  DatasetHeader header;
  std::vector<StatePair> pairs;
};

// Consecutive (x_t, x_{t+1}) pairs; a trajectory of k states yields k-1 pairs.
std::vector<StatePair> trajectory_to_pairs(const std::vector<ParticleState>& traj);

// Concatenates the streams and applies a seeded Fisher-Yates shuffle.  Every
// input pair appears exactly once; the order is deterministic per seed.
std::vector<StatePair> shuffle_merge(const std::vector<std::vector<StatePair>>& streams,
                                     uint64_t seed);

void write_dataset(const std::string& path, const Dataset& ds);

// Parses and validates the full file; malformed input is rejected with the
// byte offset where the problem sits.
Dataset read_dataset(const std::string& path);

// Position of the next unconsumed pair.  Batches are taken sequentially and
// never recycled, so the cursor is the complete sampler state.
struct BatchCursor {
  uint64_t next = 0;
};

// Next batch_size pairs starting at the cursor.  Exhaustion (fewer than
// batch_size remaining) is an error: more data must be generated instead.
std::pair<std::vector<StatePair>, BatchCursor> sample_batch(const Dataset& ds,
                                                            int batch_size,
                                                            BatchCursor cursor);

void save_cursor(const std::string& path, BatchCursor cursor);
BatchCursor load_cursor(const std::string& path);

// Simulates ceil(min_pairs / cfg.steps) trajectories with float32-quantized
// feedback, converts each to pairs and shuffles them together.  Trajectory
// seeds and the shuffle seed are substreams of master_seed; the trajectory
// seeds are recorded in the header.
Dataset generate_dataset(const SimConfig& cfg, int64_t min_pairs, uint64_t master_seed);

}  // namespace psim
