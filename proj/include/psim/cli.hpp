#pragma once

#include <cstdint>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "psim/llc.hpp"
#include "psim/model.hpp"
#include "psim/powerlaw.hpp"
#include "psim/sim.hpp"
#include "psim/train.hpp"

namespace psim {

// Invalid configuration or invocation; exits with code 1.
struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An artifact in the run directory disagrees with what the same config just
// produced (or has no recorded provenance); exits with code 2.
struct ArtifactConflictError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A module reported numeric divergence (non-finite loss, unstable flow,
// aborted chains); exits with code 3.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything one invocation needs: the four module configs plus run-level
// plumbing.  Defaults reproduce the reference setup; the desk preset swaps in
// a laptop-sized variant.
struct RunConfig {
  SimConfig sim;
  ModelConfig model;  // dt, gravity and spatial_dim mirror sim
  TrainConfig train;  // seed is derived from the master seed at use time
  SgldConfig sgld;
  WindowConfig fit;
  double boundary_spacing = 0.5;
  std::string out = "run";
  uint64_t seed = 0;
  bool desk = false;
  int run_index = 0;
  int64_t data_pairs = 0;  // 0 resolves to train.total_steps * train.batch_size
  int eval_trajectories = 8;
  int eval_per_trajectory = 32;
  int64_t rollout_steps = 1000;
  int llc_block = -1;  // -1 sweeps every block
  int llc_head = -1;   // -1 sweeps every head
  int llc_smooth_window = 5;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// key=value lines; '#' starts a comment, blank lines are skipped.  Duplicate
// keys and lines without '=' are rejected with their line number.
KeyValues parse_config_text(const std::string& text);
KeyValues parse_config_file(const std::string& path);

// Defaults, then the desk overlay when desk=true appears anywhere, then file
// entries, then overrides (so command-line settings win).  All problems are
// aggregated into one CliError listing each offending key path.
RunConfig resolve_config(const KeyValues& file_kvs, const KeyValues& overrides = {});

// Every key with its resolved value, one per line, in canonical order.  The
// echo is itself a valid config file that resolves back to the same values.
std::string echo_config(const RunConfig& cfg);

// FNV-1a over the canonical echo, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// Artifact store for one run directory.  Every artifact is committed through
// a staged file plus a manifest row naming the config hash that produced it;
// committing bytes that differ from an existing artifact of the same hash is
// a conflict, never a silent overwrite.
class RunDir {
 public:
  RunDir(const RunConfig& cfg);

  const std::string& root() const { return root_; }
  const std::string& hash() const { return hash_; }

  std::string path(const std::string& rel) const;
  bool exists(const std::string& rel) const;
  std::string stage_path(const std::string& rel);

  void commit_text(const std::string& rel, const std::string& bytes);
  void commit_staged(const std::string& rel);
  void commit_config(const RunConfig& cfg);

  // Timestamped line in the sidecar log; the only place wall-clock time goes.
  void log_line(const std::string& text);

 private:
  void load_manifest();
  void flush_manifest();

  std::string root_;
  std::string hash_;
  std::map<std::string, std::string> manifest_;
};

// Full command-line entry point; argv[0] is not expected in args.  Returns
// the process exit code: 0 ok, 1 config error, 2 runtime error, 3 numeric
// divergence.
int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
            std::ostream& err = std::cerr);

}  // namespace psim
