#include <psim/train.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <psim/rng.hpp>

namespace psim {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw TrainError("lr must be positive, got " + std::to_string(lr));
  if (!(beta1 >= 0 && beta1 < 1))
    throw TrainError("beta1 must lie in [0,1), got " + std::to_string(beta1));
  if (!(beta2 >= 0 && beta2 < 1))
    throw TrainError("beta2 must lie in [0,1), got " + std::to_string(beta2));
  if (!(adam_eps > 0)) throw TrainError("adam_eps must be positive, got " + std::to_string(adam_eps));
  if (weight_decay < 0)
    throw TrainError("weight_decay must be non-negative, got " + std::to_string(weight_decay));
  if (batch_size < 1)
    throw TrainError("batch_size must be at least 1, got " + std::to_string(batch_size));
  if (total_steps < 1)
    throw TrainError("total_steps must be at least 1, got " + std::to_string(total_steps));
  if (checkpoint_points < 1)
    throw TrainError("checkpoint_points must be at least 1, got " +
                     std::to_string(checkpoint_points));
}

std::vector<int64_t> checkpoint_schedule(int64_t total_steps, int points) {
  if (total_steps < 1)
    throw TrainError("checkpoint schedule needs total_steps >= 1, got " +
                     std::to_string(total_steps));
  if (points < 1) throw TrainError("checkpoint schedule needs at least one point");
  std::set<int64_t> steps;
  for (int i = 1; i <= points; ++i) {
    double e = static_cast<double>(i) / static_cast<double>(points);
    auto s = static_cast<int64_t>(std::llround(std::pow(static_cast<double>(total_steps), e)));
    steps.insert(std::clamp<int64_t>(s, 1, total_steps));
  }
  steps.insert(total_steps);
  std::vector<int64_t> out{0};
  out.insert(out.end(), steps.begin(), steps.end());
  return out;
}

double mse_loss(const ParticleState& pred, const ParticleState& target) {
  if (pred.n() != target.n())
    throw TrainError("mse_loss: particle counts differ, " + std::to_string(pred.n()) + " vs " +
                     std::to_string(target.n()));
  double sum = 0;
  for (int i = 0; i < pred.n(); ++i) {
    Vec2 dp = pred.pos[i] - target.pos[i];
    Vec2 dv = pred.vel[i] - target.vel[i];
    sum += dp.x * dp.x + dp.y * dp.y + dv.x * dv.x + dv.y * dv.y;
  }
  return sum;
}

double mse_loss(const std::vector<ParticleState>& pred,
                const std::vector<ParticleState>& target) {
  if (pred.empty() || pred.size() != target.size())
    throw TrainError("mse_loss: batch sizes differ (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(target.size()) + ") or empty");
  double sum = 0;
  for (size_t b = 0; b < pred.size(); ++b) sum += mse_loss(pred[b], target[b]);
  return sum / static_cast<double>(pred.size());
}

void adam_step(ModelParams& params, const std::map<std::string, Tensor32>& grads,
               AdamState& state, const TrainConfig& cfg) {
  cfg.validate();
  for (const auto& [name, w] : params.tensors) {
    auto it = grads.find(name);
    if (it == grads.end()) throw TrainError("adam_step: missing gradient for tensor " + name);
    if (it->second.shape != w.shape)
      throw TrainError("adam_step: gradient shape " + shape_str(it->second.shape) +
                       " does not match tensor " + name + " " + shape_str(w.shape));
    if (!it->second.all_finite())
      throw TrainError("adam_step: non-finite gradient for tensor " + name);
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, w] : params.tensors) {
    const Tensor32& g = grads.at(name);
    Tensor32& m = state.m.try_emplace(name, Tensor32{w.shape}).first->second;
    Tensor32& v = state.v.try_emplace(name, Tensor32{w.shape}).first->second;
    if (m.shape != w.shape || v.shape != w.shape)
      throw TrainError("adam_step: moment shape does not match tensor " + name);
    for (size_t i = 0; i < w.data.size(); ++i) {
      double gi = g.data[i] + cfg.weight_decay * w.data[i];
      double mi = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
      double vi = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      double update = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
      w.data[i] = static_cast<float>(w.data[i] - update);
    }
  }
}

TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& data,
                  const BoundaryLayout& layout) {
  mcfg.validate();
  tcfg.validate();
  TrainResult res;
  res.schedule = checkpoint_schedule(tcfg.total_steps, tcfg.checkpoint_points);
  std::set<int64_t> scheduled(res.schedule.begin(), res.schedule.end());
  ModelParams params = init_params(mcfg, Rng::substream_seed(tcfg.seed, "init"));
  AdamState opt;
  res.loss_log.reserve(static_cast<size_t>(tcfg.total_steps));
  res.checkpoints.push_back({0, params, 0.0});
  double window_sum = 0;
  int64_t window_count = 0;
  for (int64_t step = 1; step <= tcfg.total_steps; ++step) {
    std::vector<StatePair> batch;
    try {
      auto [pairs, next] = sample_batch(data, tcfg.batch_size, res.cursor);
      batch = std::move(pairs);
      res.cursor = next;
    } catch (const DataError& e) {
      throw TrainError("dataset exhausted at step " + std::to_string(step) + ": " + e.what());
    }
    double loss = 0;
    try {
      std::vector<ParticleState> inputs, targets;
      inputs.reserve(batch.size());
      targets.reserve(batch.size());
      for (StatePair& p : batch) {
        inputs.push_back(std::move(p.x));
        targets.push_back(std::move(p.y));
      }
      auto mg = build_forward<float>(params, layout, inputs, &targets);
      loss = static_cast<double>(mg.graph.value(mg.loss).data[0]);
      if (!std::isfinite(loss)) throw TrainError("non-finite loss");
      mg.graph.backward(mg.loss);
      std::map<std::string, Tensor32> grads;
      for (const auto& [name, leaf] : mg.param_leaf) grads.emplace(name, mg.graph.grad(leaf));
      adam_step(params, grads, opt, tcfg);
    } catch (const std::exception& e) {
      throw TrainError("training aborted at step " + std::to_string(step) + ": " + e.what());
    }
    res.loss_log.emplace_back(step, loss);
    window_sum += loss;
    window_count += 1;
    if (scheduled.count(step)) {
      res.checkpoints.push_back({step, params, window_sum / static_cast<double>(window_count)});
      window_sum = 0;
      window_count = 0;
    }
  }
  return res;
}

RolloutResult rollout(const ModelParams& params, const BoundaryLayout& layout,
                      const SimConfig& sim_cfg, const ParticleState& initial, int steps) {
  if (steps < 0)
    throw TrainError("rollout steps must be non-negative, got " + std::to_string(steps));
  RolloutResult res;
  res.states.reserve(static_cast<size_t>(steps) + 1);
  res.energies.reserve(static_cast<size_t>(steps) + 1);
  res.states.push_back(initial);
  res.energies.push_back(total_energy(sim_cfg, initial));
  for (int i = 1; i <= steps; ++i) {
    ParticleState next;
    try {
      next = predict_state(params, layout, res.states.back());
    } catch (const std::exception& e) {
      throw TrainError("rollout aborted at step " + std::to_string(i) + ": " + e.what());
    }
    bool finite = true;
    for (const Vec2& p : next.pos) finite = finite && std::isfinite(p.x) && std::isfinite(p.y);
    for (const Vec2& v : next.vel) finite = finite && std::isfinite(v.x) && std::isfinite(v.y);
    if (!finite)
      throw TrainError("rollout produced a non-finite state at step " + std::to_string(i));
    res.states.push_back(std::move(next));
    res.energies.push_back(total_energy(sim_cfg, res.states.back()));
  }
  return res;
}

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TrainError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw TrainError("write to " + path + " failed");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_loss_csv(const std::string& path,
                    const std::vector<std::pair<int64_t, double>>& log) {
  std::string text = "step,loss\n";
  for (const auto& [step, loss] : log)
    text += std::to_string(step) + "," + format_double(loss) + "\n";
  write_text(path, text);
}

void write_energy_csv(const std::string& path, const std::vector<double>& energies) {
  std::string text = "step,total_energy\n";
  for (size_t i = 0; i < energies.size(); ++i)
    text += std::to_string(i) + "," + format_double(energies[i]) + "\n";
  write_text(path, text);
}

std::string checkpoint_filename(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%08lld.bin", static_cast<long long>(step));
  return buf;
}

void save_run(const std::string& dir, const TrainResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw TrainError("cannot create run directory " + dir + ": " + ec.message());
  write_loss_csv(dir + "/loss.csv", result.loss_log);
  std::string index = "step,loss_avg,file\n";
  for (const Checkpoint& c : result.checkpoints) {
    std::string file = checkpoint_filename(c.step);
    save_checkpoint(dir + "/" + file, c.params);
    index += std::to_string(c.step) + "," + format_double(c.loss_avg) + "," + file + "\n";
  }
  write_text(dir + "/index.csv", index);
}

}  // namespace psim
