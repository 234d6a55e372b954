#include "psim/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <CLI11.hpp>

#include "psim/data.hpp"
#include "psim/metrics.hpp"
#include "psim/rng.hpp"
#include "psim/theory.hpp"

namespace psim {
namespace {

namespace fs = std::filesystem;

const char* kToolVersion = "psim 1.0.0";

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_f64(const std::string& s, double& out) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) return false;
    out = v;
    return true;
  } catch (...) {
    return false;
  }
}

bool parse_i64(const std::string& s, int64_t& out) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) return false;
    out = v;
    return true;
  } catch (...) {
    return false;
  }
}

bool parse_int(const std::string& s, int& out) {
  int64_t v = 0;
  if (!parse_i64(s, v)) return false;
  if (v < INT32_MIN || v > INT32_MAX) return false;
  out = static_cast<int>(v);
  return true;
}

bool parse_u64(const std::string& s, uint64_t& out) {
  if (s.empty() || s[0] == '-') return false;
  try {
    size_t pos = 0;
    uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) return false;
    out = v;
    return true;
  } catch (...) {
    return false;
  }
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0") {
    out = false;
    return true;
  }
  return false;
}

// One settable/echoable config key; set returns an error line or "".
struct KeySpec {
  std::string key;
  std::function<std::string(RunConfig&, const std::string&)> set;
  std::function<std::string(RunConfig&)> get;
};

KeySpec f64_key(const std::string& key, std::function<double&(RunConfig&)> acc) {
  return {key,
          [key, acc](RunConfig& c, const std::string& v) -> std::string {
            double x;
            if (!parse_f64(v, x)) return key + ": expected a real number, got '" + v + "'";
            acc(c) = x;
            return "";
          },
          [acc](RunConfig& c) { return fmt(acc(c)); }};
}

KeySpec int_key(const std::string& key, std::function<int&(RunConfig&)> acc) {
  return {key,
          [key, acc](RunConfig& c, const std::string& v) -> std::string {
            int x;
            if (!parse_int(v, x)) return key + ": expected an integer, got '" + v + "'";
            acc(c) = x;
            return "";
          },
          [acc](RunConfig& c) { return std::to_string(acc(c)); }};
}

KeySpec i64_key(const std::string& key, std::function<int64_t&(RunConfig&)> acc) {
  return {key,
          [key, acc](RunConfig& c, const std::string& v) -> std::string {
            int64_t x;
            if (!parse_i64(v, x)) return key + ": expected an integer, got '" + v + "'";
            acc(c) = x;
            return "";
          },
          [acc](RunConfig& c) { return std::to_string(acc(c)); }};
}

KeySpec u64_key(const std::string& key, std::function<uint64_t&(RunConfig&)> acc) {
  return {key,
          [key, acc](RunConfig& c, const std::string& v) -> std::string {
            uint64_t x;
            if (!parse_u64(v, x)) return key + ": expected a nonnegative integer, got '" + v + "'";
            acc(c) = x;
            return "";
          },
          [acc](RunConfig& c) { return std::to_string(acc(c)); }};
}

KeySpec bool_key(const std::string& key, std::function<bool&(RunConfig&)> acc) {
  return {key,
          [key, acc](RunConfig& c, const std::string& v) -> std::string {
            bool x;
            if (!parse_bool(v, x)) return key + ": expected true or false, got '" + v + "'";
            acc(c) = x;
            return "";
          },
          [acc](RunConfig& c) { return acc(c) ? "true" : "false"; }};
}

KeySpec str_key(const std::string& key, std::function<std::string&(RunConfig&)> acc) {
  return {key,
          [acc](RunConfig& c, const std::string& v) -> std::string {
            acc(c) = v;
            return "";
          },
          [acc](RunConfig& c) { return acc(c); }};
}

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = {
      u64_key("seed", [](RunConfig& c) -> uint64_t& { return c.seed; }),
      str_key("out", [](RunConfig& c) -> std::string& { return c.out; }),
      bool_key("desk", [](RunConfig& c) -> bool& { return c.desk; }),
      int_key("run", [](RunConfig& c) -> int& { return c.run_index; }),
      i64_key("data_pairs", [](RunConfig& c) -> int64_t& { return c.data_pairs; }),
      int_key("eval_trajectories", [](RunConfig& c) -> int& { return c.eval_trajectories; }),
      int_key("eval_per_trajectory",
              [](RunConfig& c) -> int& { return c.eval_per_trajectory; }),
      i64_key("rollout_steps", [](RunConfig& c) -> int64_t& { return c.rollout_steps; }),
      int_key("llc_block", [](RunConfig& c) -> int& { return c.llc_block; }),
      int_key("llc_head", [](RunConfig& c) -> int& { return c.llc_head; }),
      int_key("llc_smooth_window", [](RunConfig& c) -> int& { return c.llc_smooth_window; }),
      int_key("fit_min_points", [](RunConfig& c) -> int& { return c.fit.min_points; }),
      f64_key("fit_min_r2", [](RunConfig& c) -> double& { return c.fit.min_r2; }),
      f64_key("fit_curvature_tol", [](RunConfig& c) -> double& { return c.fit.curvature_tol; }),
      int_key("sim.particle_count", [](RunConfig& c) -> int& { return c.sim.particle_count; }),
      f64_key("sim.diameter", [](RunConfig& c) -> double& { return c.sim.diameter; }),
      f64_key("sim.mass", [](RunConfig& c) -> double& { return c.sim.mass; }),
      f64_key("sim.dt", [](RunConfig& c) -> double& { return c.sim.dt; }),
      f64_key("sim.spring_k", [](RunConfig& c) -> double& { return c.sim.spring_k; }),
      f64_key("sim.damping_c", [](RunConfig& c) -> double& { return c.sim.damping_c; }),
      f64_key("sim.gravity", [](RunConfig& c) -> double& { return c.sim.gravity; }),
      f64_key("sim.box_width", [](RunConfig& c) -> double& { return c.sim.box_width; }),
      f64_key("sim.box_height", [](RunConfig& c) -> double& { return c.sim.box_height; }),
      int_key("sim.steps", [](RunConfig& c) -> int& { return c.sim.steps; }),
      int_key("model.blocks", [](RunConfig& c) -> int& { return c.model.blocks; }),
      int_key("model.heads", [](RunConfig& c) -> int& { return c.model.heads; }),
      int_key("model.embed_dim", [](RunConfig& c) -> int& { return c.model.embed_dim; }),
      f64_key("model.boundary_mask_radius",
              [](RunConfig& c) -> double& { return c.model.boundary_mask_radius; }),
      str_key("model.activation",
              [](RunConfig& c) -> std::string& { return c.model.activation; }),
      f64_key("model.boundary_spacing",
              [](RunConfig& c) -> double& { return c.boundary_spacing; }),
      f64_key("train.lr", [](RunConfig& c) -> double& { return c.train.lr; }),
      f64_key("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; }),
      f64_key("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; }),
      f64_key("train.adam_eps", [](RunConfig& c) -> double& { return c.train.adam_eps; }),
      f64_key("train.weight_decay",
              [](RunConfig& c) -> double& { return c.train.weight_decay; }),
      int_key("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; }),
      i64_key("train.total_steps",
              [](RunConfig& c) -> int64_t& { return c.train.total_steps; }),
      int_key("train.checkpoint_points",
              [](RunConfig& c) -> int& { return c.train.checkpoint_points; }),
      f64_key("sgld.epsilon", [](RunConfig& c) -> double& { return c.sgld.epsilon; }),
      f64_key("sgld.gamma", [](RunConfig& c) -> double& { return c.sgld.gamma; }),
      f64_key("sgld.beta_tilde", [](RunConfig& c) -> double& { return c.sgld.beta_tilde; }),
      int_key("sgld.batch_size", [](RunConfig& c) -> int& { return c.sgld.batch_size; }),
      i64_key("sgld.total_steps",
              [](RunConfig& c) -> int64_t& { return c.sgld.total_steps; }),
      i64_key("sgld.burn_in", [](RunConfig& c) -> int64_t& { return c.sgld.burn_in; }),
      int_key("sgld.chains", [](RunConfig& c) -> int& { return c.sgld.chains; }),
      bool_key("sgld.qkv_only", [](RunConfig& c) -> bool& { return c.sgld.qkv_only; }),
  };
  return table;
}

const KeySpec* find_key(const std::string& key) {
  for (const KeySpec& spec : key_table())
    if (spec.key == key) return &spec;
  return nullptr;
}

void apply_desk_preset(RunConfig& cfg) {
  cfg.sim.particle_count = 16;
  cfg.model.embed_dim = 32;
  cfg.model.blocks = 2;
  cfg.model.heads = 4;
  cfg.train.total_steps = 5000;
  cfg.sgld.total_steps = 1000;
  cfg.sgld.burn_in = 800;
  cfg.sgld.batch_size = 64;
  cfg.sgld.chains = 4;
}

void validate_sections(const RunConfig& cfg, std::vector<std::string>& errors) {
  if (cfg.sim.particle_count < 1) errors.push_back("sim.particle_count: must be at least 1");
  if (!(cfg.sim.diameter > 0)) errors.push_back("sim.diameter: must be positive");
  if (!(cfg.sim.mass > 0)) errors.push_back("sim.mass: must be positive");
  if (!(cfg.sim.dt > 0)) errors.push_back("sim.dt: must be positive");
  if (!(cfg.sim.spring_k >= 0)) errors.push_back("sim.spring_k: must be nonnegative");
  if (!(cfg.sim.damping_c >= 0)) errors.push_back("sim.damping_c: must be nonnegative");
  if (!(cfg.sim.gravity >= 0)) errors.push_back("sim.gravity: must be nonnegative");
  if (!(cfg.sim.box_width > cfg.sim.diameter))
    errors.push_back("sim.box_width: box must exceed one particle diameter");
  if (!(cfg.sim.box_height > cfg.sim.diameter))
    errors.push_back("sim.box_height: box must exceed one particle diameter");
  if (cfg.sim.steps < 1) errors.push_back("sim.steps: must be at least 1");

  try {
    cfg.model.validate();
  } catch (const ModelError& e) {
    errors.push_back(std::string("model: ") + e.what());
  }
  if (!(cfg.boundary_spacing > 0))
    errors.push_back("model.boundary_spacing: must be positive");
  try {
    cfg.train.validate();
  } catch (const TrainError& e) {
    errors.push_back(std::string("train: ") + e.what());
  }
  try {
    cfg.sgld.validate();
  } catch (const LLCError& e) {
    errors.push_back(std::string("sgld: ") + e.what());
  }
  try {
    cfg.fit.validate();
  } catch (const PowerLawError& e) {
    errors.push_back(std::string("fit: ") + e.what());
  }

  if (cfg.out.empty()) errors.push_back("out: must not be empty");
  if (cfg.run_index < 0) errors.push_back("run: must be nonnegative");
  if (cfg.data_pairs < 1)
    errors.push_back("data_pairs: must be positive (0 selects the training budget)");
  if (cfg.eval_trajectories < 1) errors.push_back("eval_trajectories: must be at least 1");
  if (cfg.eval_per_trajectory < 2) errors.push_back("eval_per_trajectory: must be at least 2");
  if (cfg.rollout_steps < 1 || cfg.rollout_steps > 1000000000)
    errors.push_back("rollout_steps: must lie in [1, 1e9]");
  if (cfg.llc_smooth_window < 1 || cfg.llc_smooth_window % 2 == 0)
    errors.push_back("llc_smooth_window: must be odd and positive");
  if (cfg.llc_block < -1 || cfg.llc_block >= cfg.model.blocks)
    errors.push_back("llc_block: " + std::to_string(cfg.llc_block) + " out of range for " +
                     std::to_string(cfg.model.blocks) + " blocks (-1 sweeps all)");
  if (cfg.llc_head < -1 || cfg.llc_head >= cfg.model.heads)
    errors.push_back("llc_head: " + std::to_string(cfg.llc_head) + " out of range for " +
                     std::to_string(cfg.model.heads) + " heads (-1 sweeps all)");
}

std::string read_file(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw CliError("cannot open " + what + " file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool files_equal(const std::string& a, const std::string& b) {
  std::error_code ec;
  auto sa = fs::file_size(a, ec);
  if (ec) return false;
  auto sb = fs::file_size(b, ec);
  if (ec || sa != sb) return false;
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::vector<char> ba(65536), bb(65536);
  while (fa && fb) {
    fa.read(ba.data(), ba.size());
    fb.read(bb.data(), bb.size());
    if (fa.gcount() != fb.gcount()) return false;
    if (!std::equal(ba.begin(), ba.begin() + fa.gcount(), bb.begin())) return false;
    if (fa.eof() || fb.eof()) break;
  }
  return fa.eof() == fb.eof();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  size_t pos = 0;
  while (true) {
    size_t comma = line.find(',', pos);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(pos));
      return fields;
    }
    fields.push_back(line.substr(pos, comma - pos));
    pos = comma + 1;
  }
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

KeyValues parse_config_text(const std::string& text) {
  KeyValues kvs;
  std::vector<std::string> errors;
  std::vector<std::string> lines = split_lines(text);
  for (size_t i = 0; i < lines.size(); ++i) {
    std::string line = lines[i];
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(i + 1) + ": expected key=value, got '" + line +
                       "'");
      continue;
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      errors.push_back("line " + std::to_string(i + 1) + ": empty key");
      continue;
    }
    for (const auto& kv : kvs)
      if (kv.first == key) {
        errors.push_back("line " + std::to_string(i + 1) + ": duplicate key '" + key + "'");
        break;
      }
    kvs.emplace_back(key, value);
  }
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw CliError(msg);
  }
  return kvs;
}

KeyValues parse_config_file(const std::string& path) {
  return parse_config_text(read_file(path, "config"));
}

RunConfig resolve_config(const KeyValues& file_kvs, const KeyValues& overrides) {
  std::vector<std::string> errors;
  RunConfig cfg;

  bool desk = false;
  for (const KeyValues* src : {&file_kvs, &overrides})
    for (const auto& [key, value] : *src)
      if (key == "desk" && !parse_bool(value, desk))
        errors.push_back("desk: expected true or false, got '" + value + "'");
  if (desk) apply_desk_preset(cfg);
  cfg.desk = desk;

  for (const KeyValues* src : {&file_kvs, &overrides})
    for (const auto& [key, value] : *src) {
      if (key == "desk") continue;
      const KeySpec* spec = find_key(key);
      if (!spec) {
        errors.push_back("unknown key '" + key + "'");
        continue;
      }
      std::string err = spec->set(cfg, value);
      if (!err.empty()) errors.push_back(err);
    }

  cfg.model.dt = cfg.sim.dt;
  cfg.model.gravity = cfg.sim.gravity;
  cfg.model.spatial_dim = 2;

  if (cfg.data_pairs == 0 && cfg.train.total_steps > 0 && cfg.train.batch_size > 0) {
    if (cfg.train.total_steps > INT64_MAX / cfg.train.batch_size)
      errors.push_back("data_pairs: training budget overflows");
    else
      cfg.data_pairs = cfg.train.total_steps * cfg.train.batch_size;
  }

  validate_sections(cfg, errors);

  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw CliError(msg);
  }
  return cfg;
}

std::string echo_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::string text;
  for (const KeySpec& spec : key_table()) text += spec.key + "=" + spec.get(copy) + "\n";
  return text;
}

std::string config_hash(const RunConfig& cfg) {
  std::string echo = echo_config(cfg);
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : echo) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunDir::RunDir(const RunConfig& cfg) : root_(cfg.out), hash_(config_hash(cfg)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw CliError("cannot create run directory " + root_ + ": " + ec.message());
  load_manifest();
}

std::string RunDir::path(const std::string& rel) const { return root_ + "/" + rel; }

bool RunDir::exists(const std::string& rel) const { return fs::exists(path(rel)); }

std::string RunDir::stage_path(const std::string& rel) {
  std::string p = root_ + "/.stage/" + rel;
  std::error_code ec;
  fs::create_directories(fs::path(p).parent_path(), ec);
  if (ec) throw CliError("cannot create staging directory for " + rel + ": " + ec.message());
  return p;
}

void RunDir::commit_text(const std::string& rel, const std::string& bytes) {
  std::string staged = stage_path(rel);
  std::ofstream out(staged, std::ios::binary | std::ios::trunc);
  if (!out.good()) throw CliError("cannot open staging file for " + rel);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out.good()) throw CliError("cannot write staging file for " + rel);
  commit_staged(rel);
}

void RunDir::commit_staged(const std::string& rel) {
  std::string staged = root_ + "/.stage/" + rel;
  std::string dst = path(rel);
  if (!fs::exists(staged))
    throw CliError("staged artifact " + rel + " was never written");
  std::error_code ec;
  fs::create_directories(fs::path(dst).parent_path(), ec);
  if (ec) throw CliError("cannot create directory for " + rel + ": " + ec.message());

  if (fs::exists(dst)) {
    if (files_equal(dst, staged)) {
      fs::remove(staged, ec);
      auto it = manifest_.find(rel);
      if (it == manifest_.end() || it->second != hash_) {
        manifest_[rel] = hash_;
        flush_manifest();
      }
      return;
    }
    auto it = manifest_.find(rel);
    if (it == manifest_.end())
      throw ArtifactConflictError("artifact " + rel + " exists in " + root_ +
                                  " without a manifest entry; refusing to overwrite");
    if (it->second == hash_)
      throw ArtifactConflictError("artifact " + rel +
                                  " differs from the existing bytes produced by the same config " +
                                  hash_ + "; refusing silent overwrite");
  }
  fs::rename(staged, dst, ec);
  if (ec) throw CliError("cannot move " + rel + " into place: " + ec.message());
  manifest_[rel] = hash_;
  flush_manifest();
}

void RunDir::commit_config(const RunConfig& cfg) {
  commit_text("config.txt", echo_config(cfg));
  commit_text("version.txt", std::string(kToolVersion) + "\n");
}

void RunDir::log_line(const std::string& text) {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &tm);
  std::ofstream out(path("log.txt"), std::ios::app);
  out << stamp << " " << text << "\n";
}

void RunDir::load_manifest() {
  if (!exists("manifest.csv")) return;
  std::string text = read_file(path("manifest.csv"), "manifest");
  std::vector<std::string> lines = split_lines(text);
  if (lines.empty() || lines[0] != "artifact,config_hash")
    throw ArtifactConflictError("manifest.csv in " + root_ + " is malformed");
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    size_t comma = lines[i].rfind(',');
    if (comma == std::string::npos)
      throw ArtifactConflictError("manifest.csv in " + root_ + " is malformed at line " +
                                  std::to_string(i + 1));
    manifest_[lines[i].substr(0, comma)] = lines[i].substr(comma + 1);
  }
}

void RunDir::flush_manifest() {
  std::string text = "artifact,config_hash\n";
  for (const auto& [rel, hash] : manifest_) text += rel + "," + hash + "\n";
  std::ofstream out(path("manifest.csv"), std::ios::binary | std::ios::trunc);
  if (!out.good()) throw CliError("cannot write manifest.csv in " + root_);
  out << text;
}

namespace {

struct Ctx {
  const RunConfig& cfg;
  RunDir& dir;
  std::ostream& out;
};

void require_artifact(const Ctx& ctx, const std::string& rel, const std::string& producer) {
  if (!ctx.dir.exists(rel))
    throw CliError("missing dependency artifact " + rel + " in " + ctx.dir.root() + "; run " +
                   producer + " first");
}

BoundaryLayout layout_for(const RunConfig& cfg) {
  return boundary_layout(cfg.sim.box_width, cfg.sim.box_height, cfg.boundary_spacing);
}

// step → checkpoint file, in schedule order.
std::vector<std::pair<int64_t, std::string>> read_train_index(const Ctx& ctx) {
  require_artifact(ctx, "train/index.csv", "train");
  std::vector<std::string> lines = split_lines(read_file(ctx.dir.path("train/index.csv"), "index"));
  if (lines.empty() || lines[0] != "step,loss_avg,file")
    throw std::runtime_error("train/index.csv in " + ctx.dir.root() + " is malformed");
  std::vector<std::pair<int64_t, std::string>> index;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> fields = split_csv_line(lines[i]);
    int64_t step = 0;
    if (fields.size() != 3 || !parse_i64(fields[0], step))
      throw std::runtime_error("train/index.csv row " + std::to_string(i + 1) + " is malformed");
    index.emplace_back(step, fields[2]);
  }
  if (index.empty()) throw std::runtime_error("train/index.csv lists no checkpoints");
  return index;
}

ModelParams load_checkpoint_checked(const Ctx& ctx, const std::string& file) {
  ModelParams params = load_checkpoint(ctx.dir.path("train/" + file));
  const ModelConfig& a = params.config;
  const ModelConfig& b = ctx.cfg.model;
  if (a.blocks != b.blocks || a.heads != b.heads || a.embed_dim != b.embed_dim ||
      a.activation != b.activation || a.dt != b.dt || a.gravity != b.gravity ||
      a.boundary_mask_radius != b.boundary_mask_radius)
    throw CliError("checkpoint " + file + " was trained with blocks=" + std::to_string(a.blocks) +
                   " heads=" + std::to_string(a.heads) +
                   " embed_dim=" + std::to_string(a.embed_dim) +
                   "; the current config expects blocks=" + std::to_string(b.blocks) +
                   " heads=" + std::to_string(b.heads) +
                   " embed_dim=" + std::to_string(b.embed_dim));
  return params;
}

bool mentions(const std::exception& e, const char* needle) {
  return std::string(e.what()).find(needle) != std::string::npos;
}

void cmd_gen_data(Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  Dataset ds = generate_dataset(cfg.sim, cfg.data_pairs, Rng::substream_seed(cfg.seed, "data"));
  write_dataset(ctx.dir.stage_path("dataset.bin"), ds);
  ctx.dir.commit_staged("dataset.bin");
  ctx.out << "dataset.bin: " << ds.pairs.size() << " pairs from "
          << ds.header.source_seeds.size() << " trajectories of " << cfg.sim.particle_count
          << " particles\n";
}

void cmd_train(Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  require_artifact(ctx, "dataset.bin", "gen-data");
  Dataset ds = read_dataset(ctx.dir.path("dataset.bin"));
  if (ds.header.particle_count != static_cast<uint32_t>(cfg.sim.particle_count))
    throw CliError("dataset.bin holds " + std::to_string(ds.header.particle_count) +
                   " particles per state; the current config expects " +
                   std::to_string(cfg.sim.particle_count));
  BoundaryLayout layout = layout_for(cfg);
  TrainConfig tcfg = cfg.train;
  tcfg.seed = Rng::substream_seed(cfg.seed, "train");
  TrainResult result;
  try {
    result = train(cfg.model, tcfg, ds, layout);
  } catch (const TrainError& e) {
    if (mentions(e, "non-finite")) throw DivergenceError(e.what());
    throw;
  }
  save_run(ctx.dir.stage_path("train"), result);
  ctx.dir.commit_staged("train/loss.csv");
  ctx.dir.commit_staged("train/index.csv");
  for (const Checkpoint& c : result.checkpoints)
    ctx.dir.commit_staged("train/" + checkpoint_filename(c.step));

  size_t n = result.loss_log.size();
  size_t window = std::min<size_t>(100, n);
  double head = 0, tail = 0;
  for (size_t i = 0; i < window; ++i) {
    head += result.loss_log[i].second;
    tail += result.loss_log[n - window + i].second;
  }
  ctx.out << "trained " << tcfg.total_steps << " steps; " << result.checkpoints.size()
          << " checkpoints; mean loss over first " << window << " steps " << head / window
          << ", last " << window << " steps " << tail / window << "\n";
}

void cmd_analyze_heads(Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  auto index = read_train_index(ctx);
  BoundaryLayout layout = layout_for(cfg);
  std::vector<ParticleState> states =
      eval_states(cfg.sim, cfg.seed, cfg.eval_trajectories, cfg.eval_per_trajectory);
  double radius = score_radius(cfg.sim.diameter);

  int heads = cfg.model.heads;
  int cells = cfg.model.blocks * heads;
  std::vector<HeadScoreSeries> scores(cells);
  std::vector<CorrelationSeries> correlations(cells);
  for (int b = 0; b < cfg.model.blocks; ++b)
    for (int h = 0; h < heads; ++h) {
      scores[b * heads + h].head = {cfg.run_index, b, h};
      correlations[b * heads + h].head = {cfg.run_index, b, h};
    }

  for (const auto& [step, file] : index) {
    ModelParams params = load_checkpoint_checked(ctx, file);
    std::vector<HeadMetrics> metrics;
    try {
      metrics = analyze_heads(params, layout, states, radius);
    } catch (const ModelError& e) {
      if (mentions(e, "non-finite")) throw DivergenceError(e.what());
      throw;
    }
    for (const HeadMetrics& m : metrics) {
      int cell = m.block * heads + m.head;
      scores[cell].points.emplace_back(step, m.score);
      correlations[cell].points.emplace_back(step, m.correlation);
    }
  }

  for (int cell = 0; cell < cells; ++cell) {
    if (scores[cell].points.size() != index.size())
      throw std::runtime_error("head analysis produced an incomplete series for head (" +
                               std::to_string(scores[cell].head.block) + "," +
                               std::to_string(scores[cell].head.head) + ")");
    std::string rel = "heads/head_" + std::to_string(scores[cell].head.block) + "_" +
                      std::to_string(scores[cell].head.head) + ".csv";
    write_head_series_csv(ctx.dir.stage_path(rel), scores[cell], correlations[cell]);
    ctx.dir.commit_staged(rel);
  }
  write_histogram_csv(ctx.dir.stage_path("heads/histogram.csv"), score_histogram(scores));
  ctx.dir.commit_staged("heads/histogram.csv");
  write_metrics_metadata(ctx.dir.stage_path("heads/metadata.txt"), radius, ClassifyBands{});
  ctx.dir.commit_staged("heads/metadata.txt");

  double best = 0;
  int best_cell = 0;
  for (int cell = 0; cell < cells; ++cell) {
    double final_score = scores[cell].points.back().second;
    if (final_score > best) {
      best = final_score;
      best_cell = cell;
    }
  }
  ctx.out << "analyzed " << index.size() << " checkpoints x " << cells << " heads over "
          << states.size() << " eval states; best final score " << best << " at head ("
          << scores[best_cell].head.block << "," << scores[best_cell].head.head << ")\n";
}

void cmd_estimate_llc(Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  auto index = read_train_index(ctx);
  require_artifact(ctx, "dataset.bin", "gen-data");
  Dataset ds = read_dataset(ctx.dir.path("dataset.bin"));
  BoundaryLayout layout = layout_for(cfg);

  std::vector<std::pair<int, int>> cells;
  for (int b = 0; b < cfg.model.blocks; ++b) {
    if (cfg.llc_block != -1 && b != cfg.llc_block) continue;
    for (int h = 0; h < cfg.model.heads; ++h) {
      if (cfg.llc_head != -1 && h != cfg.llc_head) continue;
      cells.emplace_back(b, h);
    }
  }

  std::map<std::pair<int, int>, std::vector<std::pair<int64_t, double>>> raw;
  for (const auto& [step, file] : index) {
    ModelParams params = load_checkpoint_checked(ctx, file);
    for (const auto& [b, h] : cells) {
      SgldConfig scfg = cfg.sgld;
      scfg.seed = Rng::substream_seed(cfg.seed, "sgld/" + std::to_string(b) + "/" +
                                                    std::to_string(h) + "/" + std::to_string(step));
      LLCEstimate est;
      try {
        est = estimate_llc(params, layout, ds, b, h, step, scfg);
      } catch (const LLCError& e) {
        if (mentions(e, "aborted")) throw DivergenceError(e.what());
        throw;
      }
      std::string rel = "llc/chains_" + std::to_string(b) + "_" + std::to_string(h) + "_" +
                        std::to_string(step) + ".csv";
      write_llc_csv(ctx.dir.stage_path(rel), est);
      ctx.dir.commit_staged(rel);
      raw[{b, h}].emplace_back(step, est.mean_lambda);
    }
  }

  for (const auto& [b, h] : cells) {
    const auto& series = raw[{b, h}];
    auto smoothed = smooth_series(series, cfg.llc_smooth_window);
    std::string rel = "llc/head_" + std::to_string(b) + "_" + std::to_string(h) + ".csv";
    write_llc_series_csv(ctx.dir.stage_path(rel), series, smoothed);
    ctx.dir.commit_staged(rel);
    ctx.out << "head (" << b << "," << h << "): lambda_hat " << series.back().second
            << " at step " << series.back().first << " (" << series.size() << " checkpoints)\n";
  }
}

std::vector<std::vector<std::string>> read_csv_rows(const Ctx& ctx, const std::string& rel,
                                                    const std::string& header, size_t fields) {
  std::vector<std::string> lines = split_lines(read_file(ctx.dir.path(rel), "artifact"));
  if (lines.empty() || lines[0] != header)
    throw std::runtime_error(rel + " in " + ctx.dir.root() + " is malformed");
  std::vector<std::vector<std::string>> rows;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> row = split_csv_line(lines[i]);
    if (row.size() != fields)
      throw std::runtime_error(rel + " row " + std::to_string(i + 1) + " is malformed");
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string head_rel(int b, int h) {
  return "heads/head_" + std::to_string(b) + "_" + std::to_string(h) + ".csv";
}

void cmd_fit_powerlaws(Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  std::vector<CorrelationSeries> series;
  for (int b = 0; b < cfg.model.blocks; ++b)
    for (int h = 0; h < cfg.model.heads; ++h) {
      require_artifact(ctx, head_rel(b, h), "analyze-heads");
      CorrelationSeries s;
      s.head = {cfg.run_index, b, h};
      for (const auto& row : read_csv_rows(ctx, head_rel(b, h), "step,score,correlation", 3)) {
        int64_t step = 0;
        if (!parse_i64(row[0], step))
          throw std::runtime_error(head_rel(b, h) + " has a malformed step column");
        s.points.emplace_back(step, std::stod(row[2]));
      }
      series.push_back(std::move(s));
    }

  FitReport report = fit_report(series, cfg.fit);
  write_fit_report_csv(ctx.dir.stage_path("fits/fits.csv"), report);
  ctx.dir.commit_staged("fits/fits.csv");
  write_undetected_csv(ctx.dir.stage_path("fits/undetected.csv"), report);
  ctx.dir.commit_staged("fits/undetected.csv");
  ctx.out << "fitted " << report.rows.size() << " of " << series.size() << " heads; "
          << report.undetected.size() << " without a detectable power-law window\n";
}

void cmd_rollout(Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  auto index = read_train_index(ctx);
  ModelParams params = load_checkpoint_checked(ctx, index.back().second);
  BoundaryLayout layout = layout_for(cfg);
  ParticleState initial = init_random_state(cfg.sim, Rng::substream_seed(cfg.seed, "rollout"));
  RolloutResult rr;
  try {
    rr = rollout(params, layout, cfg.sim, initial, static_cast<int>(cfg.rollout_steps));
  } catch (const TrainError& e) {
    if (mentions(e, "non-finite")) throw DivergenceError(e.what());
    throw;
  }
  write_energy_csv(ctx.dir.stage_path("rollout/energy.csv"), rr.energies);
  ctx.dir.commit_staged("rollout/energy.csv");
  double peak = *std::max_element(rr.energies.begin(), rr.energies.end());
  ctx.out << "rolled out " << cfg.rollout_steps << " steps from checkpoint "
          << index.back().first << "; energy start " << rr.energies.front() << ", end "
          << rr.energies.back() << ", peak " << peak << "\n";
}

void cmd_theory_lab(Ctx& ctx) {
  FlowConfig quartic_cfg;
  FlowResult quartic = gradient_flow(quartic_cfg);

  FlowConfig quadratic_cfg;
  quadratic_cfg.potential = Potential::quadratic;
  quadratic_cfg.r = 1.0;
  quadratic_cfg.horizon = 30.0;
  FlowResult quadratic = gradient_flow(quadratic_cfg);

  FlowConfig pitchfork_cfg;
  pitchfork_cfg.potential = Potential::pitchfork;
  pitchfork_cfg.r = -1.0;
  pitchfork_cfg.x0 = 0.1;
  pitchfork_cfg.horizon = 20.0;
  FlowResult pitchfork = gradient_flow(pitchfork_cfg);

  FlowConfig tail_cfg;
  tail_cfg.potential = Potential::pitchfork;
  tail_cfg.r = -0.01;
  tail_cfg.x0 = 0.101;
  tail_cfg.horizon = 400.0;
  FlowResult tail = gradient_flow(tail_cfg);
  FlowResult distance;
  distance.times = tail.times;
  distance.energy = tail.energy;
  for (double xv : tail.x) distance.x.push_back(xv - 0.1);

  std::vector<FlowSummaryRow> rows(3);
  rows[0].name = "quartic";
  rows[0].cls = classify_convergence(quartic);
  rows[1].name = "quadratic";
  rows[1].cls = classify_convergence(quadratic);
  rows[2].name = "pitchfork-distance";
  rows[2].cls = classify_convergence(distance);

  write_flow_csv(ctx.dir.stage_path("theory/quartic_flow.csv"), quartic);
  ctx.dir.commit_staged("theory/quartic_flow.csv");
  write_flow_csv(ctx.dir.stage_path("theory/quadratic_flow.csv"), quadratic);
  ctx.dir.commit_staged("theory/quadratic_flow.csv");
  write_flow_csv(ctx.dir.stage_path("theory/pitchfork_flow.csv"), pitchfork);
  ctx.dir.commit_staged("theory/pitchfork_flow.csv");
  write_flow_summary_csv(ctx.dir.stage_path("theory/summary.csv"), rows);
  ctx.dir.commit_staged("theory/summary.csv");

  std::string holder = "beta,fitted_exponent,bound,satisfied\n";
  for (double beta : {1.0, 0.5}) {
    HolderCheck check = holder_observable_check(quartic, beta);
    holder += fmt(beta) + "," + fmt(check.fitted_exponent) + "," + fmt(check.bound) + "," +
              (check.satisfied ? "true" : "false") + "\n";
  }
  ctx.dir.commit_text("theory/holder.csv", holder);

  std::vector<double> reduced;
  for (int j = 0; j < 20; ++j) reduced.push_back(-0.001 * std::pow(50.0, double(j) / 19.0));
  IsingScan scan = ising_critical_scan(reduced);
  write_ising_csv(ctx.dir.stage_path("theory/ising_scan.csv"), scan);
  ctx.dir.commit_staged("theory/ising_scan.csv");
  ctx.dir.commit_text("theory/ising_fit.txt", "slope=" + fmt(scan.slope) + "\nr2=" +
                                                  fmt(scan.r2) + "\npoints=" +
                                                  std::to_string(scan.r.size()) + "\n");

  ctx.out << "quartic: " << flow_class_name(rows[0].cls.kind) << " alpha " << rows[0].cls.alpha
          << " theta " << rows[0].cls.theta << "\n"
          << "quadratic: " << flow_class_name(rows[1].cls.kind) << " rate " << rows[1].cls.rate
          << "\n"
          << "pitchfork distance: " << flow_class_name(rows[2].cls.kind) << " rate "
          << rows[2].cls.rate << "\n"
          << "ising scan slope " << scan.slope << " (r2 " << scan.r2 << ")\n";
}

void cmd_report(Ctx& ctx) {
  const RunConfig& cfg = ctx.cfg;
  require_artifact(ctx, "fits/fits.csv", "fit-powerlaws");
  require_artifact(ctx, "fits/undetected.csv", "fit-powerlaws");

  struct FitRow {
    double exponent = 0, ci95 = 0, log_a = 0, r2 = 0;
    int64_t start = 0, end = 0;
  };
  std::map<std::pair<int, int>, FitRow> fits;
  for (const auto& row : read_csv_rows(ctx, "fits/fits.csv",
                                       "run,block,head,exponent,ci95,log_a,r2,sign,start,end",
                                       10)) {
    FitRow fit;
    int b = 0, h = 0;
    int64_t s = 0, e = 0;
    if (!parse_int(row[1], b) || !parse_int(row[2], h) || !parse_i64(row[8], s) ||
        !parse_i64(row[9], e))
      throw std::runtime_error("fits/fits.csv has a malformed row");
    fit.exponent = std::stod(row[3]);
    fit.ci95 = std::stod(row[4]);
    fit.log_a = std::stod(row[5]);
    fit.r2 = std::stod(row[6]);
    fit.start = s;
    fit.end = e;
    fits[{b, h}] = fit;
  }

  int detected = 0, full = 0, partial = 0;
  std::string summary = "block,head,final_score,class,detected,exponent,ci95,r2\n";
  for (int b = 0; b < cfg.model.blocks; ++b)
    for (int h = 0; h < cfg.model.heads; ++h) {
      require_artifact(ctx, head_rel(b, h), "analyze-heads");
      auto rows = read_csv_rows(ctx, head_rel(b, h), "step,score,correlation", 3);
      if (rows.empty()) throw std::runtime_error(head_rel(b, h) + " lists no checkpoints");

      std::map<int64_t, std::string> llc;
      std::string llc_rel = "llc/head_" + std::to_string(b) + "_" + std::to_string(h) + ".csv";
      if (ctx.dir.exists(llc_rel))
        for (const auto& row : read_csv_rows(ctx, llc_rel, "step,lambda_hat,smoothed", 3)) {
          int64_t step = 0;
          if (!parse_i64(row[0], step))
            throw std::runtime_error(llc_rel + " has a malformed step column");
          llc[step] = row[2];
        }

      auto fit = fits.find({b, h});
      std::string bundle = "step,score,correlation,abs_correlation,fit_abs_correlation,llc_smoothed\n";
      for (const auto& row : rows) {
        int64_t step = 0;
        if (!parse_i64(row[0], step))
          throw std::runtime_error(head_rel(b, h) + " has a malformed step column");
        double corr = std::stod(row[2]);
        std::string fit_cell;
        if (fit != fits.end() && step >= fit->second.start && step <= fit->second.end)
          fit_cell = fmt(std::exp(fit->second.log_a) *
                         std::pow(static_cast<double>(step), fit->second.exponent));
        auto lit = llc.find(step);
        bundle += row[0] + "," + row[1] + "," + row[2] + "," + fmt(std::fabs(corr)) + "," +
                  fit_cell + "," + (lit == llc.end() ? "" : lit->second) + "\n";
      }
      std::string rel = "report/head_" + std::to_string(b) + "_" + std::to_string(h) + ".csv";
      ctx.dir.commit_text(rel, bundle);

      double final_score = std::stod(rows.back()[1]);
      HeadClass cls = classify_head(final_score);
      if (cls == HeadClass::full) ++full;
      if (cls == HeadClass::partial) ++partial;
      bool has_fit = fit != fits.end();
      if (has_fit) ++detected;
      summary += std::to_string(b) + "," + std::to_string(h) + "," + fmt(final_score) + "," +
                 head_class_name(cls) + "," + (has_fit ? "1" : "0") + ",";
      if (has_fit)
        summary += fmt(fit->second.exponent) + "," + fmt(fit->second.ci95) + "," +
                   fmt(fit->second.r2);
      else
        summary += ",,";
      summary += "\n";
    }
  ctx.dir.commit_text("report/summary.csv", summary);

  int cells = cfg.model.blocks * cfg.model.heads;
  ctx.out << "report bundle: " << cells << " heads; " << detected
          << " with fitted power laws; classes: " << full << " full, " << partial
          << " partial, " << (cells - full - partial) << " none\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"deterministic particle-transformer pipeline"};
  app.fallthrough();
  std::string config_path, out_dir, seed_str;
  std::vector<std::string> sets;
  bool desk_flag = false;
  app.add_option("-c,--config", config_path, "key=value config file");
  app.add_option("-s,--set", sets, "override one config key (repeatable)");
  auto* desk_opt = app.add_flag("--desk", desk_flag, "apply the desk-scale preset");
  auto* out_opt = app.add_option("-o,--out", out_dir, "run directory (config key 'out')");
  auto* seed_opt = app.add_option("--seed", seed_str, "master seed (config key 'seed')");
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::function<void(Ctx&)>>> commands = {
      {"gen-data", cmd_gen_data},        {"train", cmd_train},
      {"analyze-heads", cmd_analyze_heads}, {"estimate-llc", cmd_estimate_llc},
      {"fit-powerlaws", cmd_fit_powerlaws}, {"rollout", cmd_rollout},
      {"theory-lab", cmd_theory_lab},    {"report", cmd_report},
  };
  const std::map<std::string, std::string> descriptions = {
      {"gen-data", "simulate trajectories into a training dataset"},
      {"train", "train the model on dataset.bin"},
      {"analyze-heads", "score and correlation series per head per checkpoint"},
      {"estimate-llc", "restricted SGLD learning-coefficient sweep"},
      {"fit-powerlaws", "fit decay exponents to correlation series"},
      {"rollout", "run the trained model as a simulator"},
      {"theory-lab", "gradient-flow and mean-field reference results"},
      {"report", "assemble per-head CSV bundles from the other artifacts"},
  };
  for (const auto& [name, fn] : commands)
    app.add_subcommand(name, descriptions.at(name))->fallthrough();

  std::vector<std::string> argv_store;
  argv_store.push_back("psim");
  for (const std::string& a : args) argv_store.push_back(a);
  std::vector<const char*> argv;
  for (const std::string& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  }

  std::string sub = app.get_subcommands().front()->get_name();
  try {
    KeyValues overrides;
    for (const std::string& s : sets) {
      size_t eq = s.find('=');
      if (eq == std::string::npos || eq == 0)
        throw CliError("override '" + s + "' is not key=value");
      overrides.emplace_back(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    if (desk_opt->count() > 0) overrides.emplace_back("desk", "true");
    if (out_opt->count() > 0) overrides.emplace_back("out", out_dir);
    if (seed_opt->count() > 0) overrides.emplace_back("seed", seed_str);

    KeyValues file_kvs;
    if (!config_path.empty()) file_kvs = parse_config_file(config_path);
    RunConfig cfg = resolve_config(file_kvs, overrides);

    RunDir dir(cfg);
    dir.commit_config(cfg);
    Ctx ctx{cfg, dir, out};
    try {
      for (const auto& [name, fn] : commands)
        if (name == sub) {
          fn(ctx);
          break;
        }
    } catch (const std::exception& e) {
      dir.log_line(sub + " failed: " + std::string(e.what()).substr(0, 200));
      throw;
    }
    dir.log_line(sub + " ok");
    std::error_code ec;
    fs::remove_all(dir.path(".stage"), ec);
    return 0;
  } catch (const CliError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const ArtifactConflictError& e) {
    err << "conflict: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace psim
