#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "psim/data.hpp"
#include "psim/model.hpp"
#include "psim/sim.hpp"
#include "psim/train.hpp"

using psim::AdamState;
using psim::BoundaryLayout;
using psim::Checkpoint;
using psim::Dataset;
using psim::ModelConfig;
using psim::ModelParams;
using psim::ParticleState;
using psim::SimConfig;
using psim::StatePair;
using psim::Tensor32;
using psim::TrainConfig;
using psim::TrainError;
using psim::TrainResult;

namespace {

SimConfig small_sim() {
  SimConfig cfg;
  cfg.particle_count = 6;
  cfg.steps = 256;
  return cfg;
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.embed_dim = 16;
  return cfg;
}

ModelParams one_tensor(const std::string& name, float value) {
  ModelParams p;
  p.tensors[name] = Tensor32{psim::Shape{1}, {value}};
  return p;
}

std::map<std::string, Tensor32> one_grad(const std::string& name, float value) {
  std::map<std::string, Tensor32> g;
  g[name] = Tensor32{psim::Shape{1}, {value}};
  return g;
}

bool same_bits(const Tensor32& a, const Tensor32& b) {
  return a.shape == b.shape &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end() || !same_bits(t, it->second)) return false;
  }
  return true;
}

ParticleState flat_state(std::vector<double> vals) {
  ParticleState s;
  for (size_t i = 0; i + 3 < vals.size(); i += 4) {
    s.pos.push_back({vals[i], vals[i + 1]});
    s.vel.push_back({vals[i + 2], vals[i + 3]});
  }
  return s;
}

Dataset constant_dataset(const ParticleState& x, const ParticleState& y, int count) {
  Dataset ds;
  ds.header.particle_count = static_cast<uint32_t>(x.n());
  for (int i = 0; i < count; ++i) ds.pairs.push_back({x, y});
  return ds;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("checkpoint schedule starts at zero and ends at the final step") {
  for (int64_t total : {int64_t{1}, int64_t{2}, int64_t{10}, int64_t{5000}, int64_t{64000}}) {
    auto sched = psim::checkpoint_schedule(total, 60);
    REQUIRE(sched.size() >= 2);
    CHECK(sched.front() == 0);
    CHECK(sched.back() == total);
    for (size_t i = 1; i < sched.size(); ++i) CHECK(sched[i] > sched[i - 1]);
  }
}

TEST_CASE("checkpoint schedule is dense early and sparse late") {
  auto sched = psim::checkpoint_schedule(64000, 60);
  CHECK(sched.size() >= 40);
  CHECK(sched.size() <= 61);
  int early = 0, late = 0;
  for (int64_t s : sched) {
    if (s > 0 && s <= 100) ++early;
    if (s > 32000) ++late;
  }
  CHECK(early >= 10);
  CHECK(late <= 5);
}

TEST_CASE("checkpoint schedule rejects bad arguments") {
  CHECK_THROWS_AS(psim::checkpoint_schedule(0, 60), TrainError);
  CHECK_THROWS_AS(psim::checkpoint_schedule(100, 0), TrainError);
}

TEST_CASE("mse loss of identical states is zero") {
  ParticleState s = flat_state({1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(psim::mse_loss(s, s) == 0.0);
  CHECK(psim::mse_loss({s, s}, {s, s}) == 0.0);
}

TEST_CASE("mse loss is the squared state difference norm") {
  ParticleState target = flat_state({1, 2, 3, 4});
  ParticleState pred = flat_state({1.1, 2, 3, 4});
  CHECK(psim::mse_loss(pred, target) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("mse loss averages over the batch") {
  ParticleState a = flat_state({1, 2, 3, 4});
  ParticleState b_target = flat_state({5, 6, 7, 8});
  ParticleState b_pred = flat_state({5, 6, 7.1, 8.1});
  CHECK(psim::mse_loss(b_pred, b_target) == doctest::Approx(0.02).epsilon(1e-12));
  CHECK(psim::mse_loss({a, b_pred}, {a, b_target}) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("mse loss rejects mismatched particle counts") {
  ParticleState a = flat_state({1, 2, 3, 4});
  ParticleState b = flat_state({1, 2, 3, 4, 5, 6, 7, 8});
  CHECK_THROWS_AS(psim::mse_loss(a, b), TrainError);
  CHECK_THROWS_AS(psim::mse_loss({a}, {a, b}), TrainError);
}

TEST_CASE("adam first step moves by almost exactly the learning rate") {
  ModelParams p = one_tensor("w", 0.0f);
  AdamState st;
  TrainConfig cfg;
  psim::adam_step(p, one_grad("w", 1.0f), st, cfg);
  CHECK(st.t == 1);
  CHECK(p.tensors["w"].data[0] ==
        doctest::Approx(-0.001 / (1.0 + 1e-8)).epsilon(1e-6));
  CHECK(st.m["w"].data[0] == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(st.v["w"].data[0] == doctest::Approx(0.001).epsilon(1e-6));
}

TEST_CASE("adam first-step update is nearly scale invariant") {
  ModelParams p1 = one_tensor("w", 0.0f);
  ModelParams p2 = one_tensor("w", 0.0f);
  AdamState s1, s2;
  TrainConfig cfg;
  psim::adam_step(p1, one_grad("w", 1.0f), s1, cfg);
  psim::adam_step(p2, one_grad("w", 1000.0f), s2, cfg);
  double d1 = p1.tensors["w"].data[0];
  double d2 = p2.tensors["w"].data[0];
  CHECK(d1 < 0);
  CHECK(d2 / d1 == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("adam leaves a tensor with all-zero gradients untouched") {
  ModelParams p = one_tensor("a", 0.7f);
  p.tensors["b"] = Tensor32{psim::Shape{2}, {0.25f, -1.5f}};
  AdamState st;
  TrainConfig cfg;
  std::map<std::string, Tensor32> grads = one_grad("a", 1.0f);
  grads["b"] = Tensor32{psim::Shape{2}};
  for (int i = 0; i < 5; ++i) psim::adam_step(p, grads, st, cfg);
  CHECK(p.tensors["b"].data[0] == 0.25f);
  CHECK(p.tensors["b"].data[1] == -1.5f);
  CHECK(p.tensors["a"].data[0] < 0.7f);
}

TEST_CASE("adam moments decay under a zero gradient") {
  ModelParams p = one_tensor("w", 0.0f);
  AdamState st;
  TrainConfig cfg;
  psim::adam_step(p, one_grad("w", 1.0f), st, cfg);
  float m1 = st.m["w"].data[0];
  float v1 = st.v["w"].data[0];
  psim::adam_step(p, one_grad("w", 0.0f), st, cfg);
  CHECK(st.m["w"].data[0] == doctest::Approx(0.9 * m1).epsilon(1e-6));
  CHECK(st.v["w"].data[0] == doctest::Approx(0.999 * v1).epsilon(1e-6));
}

TEST_CASE("adam rejects a non-finite gradient naming the tensor") {
  ModelParams p = one_tensor("blob.w", 0.0f);
  AdamState st;
  TrainConfig cfg;
  auto grads = one_grad("blob.w", std::numeric_limits<float>::quiet_NaN());
  CHECK_THROWS_WITH_AS(psim::adam_step(p, grads, st, cfg),
                       doctest::Contains("blob.w"), TrainError);
  CHECK(st.t == 0);
  CHECK(p.tensors["blob.w"].data[0] == 0.0f);
}

TEST_CASE("adam rejects missing and misshapen gradients") {
  ModelParams p = one_tensor("w", 0.0f);
  AdamState st;
  TrainConfig cfg;
  std::map<std::string, Tensor32> none;
  CHECK_THROWS_WITH_AS(psim::adam_step(p, none, st, cfg),
                       doctest::Contains("missing gradient"), TrainError);
  std::map<std::string, Tensor32> wide;
  wide["w"] = Tensor32{psim::Shape{2}};
  CHECK_THROWS_WITH_AS(psim::adam_step(p, wide, st, cfg), doctest::Contains("shape"),
                       TrainError);
}

TEST_CASE("train config validation catches bad fields") {
  TrainConfig cfg;
  cfg.lr = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("lr"), TrainError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("batch_size"), TrainError);
  cfg = TrainConfig{};
  cfg.total_steps = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("total_steps"), TrainError);
}

TEST_CASE("training is deterministic and checkpoints follow the schedule") {
  SimConfig scfg = small_sim();
  Dataset data = psim::generate_dataset(scfg, 1800, 42);
  BoundaryLayout layout = psim::boundary_layout(scfg.box_width, scfg.box_height);
  ModelConfig mcfg = small_model();
  TrainConfig tcfg;
  tcfg.batch_size = 8;
  tcfg.total_steps = 40;
  tcfg.checkpoint_points = 8;
  tcfg.seed = 2024;
  TrainResult r1 = psim::train(mcfg, tcfg, data, layout);
  TrainResult r2 = psim::train(mcfg, tcfg, data, layout);

  CHECK(r1.schedule == psim::checkpoint_schedule(40, 8));
  REQUIRE(r1.checkpoints.size() == r1.schedule.size());
  for (size_t i = 0; i < r1.checkpoints.size(); ++i)
    CHECK(r1.checkpoints[i].step == r1.schedule[i]);
  REQUIRE(r1.loss_log.size() == 40);
  CHECK(r1.loss_log.front().first == 1);
  CHECK(r1.loss_log.back().first == 40);
  CHECK(r1.cursor.next == 40 * 8);

  REQUIRE(r2.loss_log.size() == r1.loss_log.size());
  for (size_t i = 0; i < r1.loss_log.size(); ++i) {
    CHECK(r1.loss_log[i].first == r2.loss_log[i].first);
    CHECK(r1.loss_log[i].second == r2.loss_log[i].second);
  }
  REQUIRE(r2.checkpoints.size() == r1.checkpoints.size());
  for (size_t i = 0; i < r1.checkpoints.size(); ++i) {
    CHECK(same_params(r1.checkpoints[i].params, r2.checkpoints[i].params));
    CHECK(r1.checkpoints[i].loss_avg == r2.checkpoints[i].loss_avg);
  }
  CHECK_FALSE(same_params(r1.checkpoints.front().params, r1.checkpoints.back().params));

  double first_avg = 0;
  int64_t first_ck = r1.schedule[1];
  for (const auto& [step, loss] : r1.loss_log)
    if (step <= first_ck) first_avg += loss;
  first_avg /= static_cast<double>(first_ck);
  CHECK(r1.checkpoints[1].loss_avg == doctest::Approx(first_avg).epsilon(1e-12));
  CHECK(r1.checkpoints[0].loss_avg == 0.0);

  TrainConfig other = tcfg;
  other.seed = 2025;
  TrainResult r3 = psim::train(mcfg, other, data, layout);
  CHECK_FALSE(same_params(r1.checkpoints.back().params, r3.checkpoints.back().params));
}

TEST_CASE("training halves the loss on a small run") {
  SimConfig scfg = small_sim();
  Dataset data = psim::generate_dataset(scfg, 24000, 7);
  BoundaryLayout layout = psim::boundary_layout(scfg.box_width, scfg.box_height);
  ModelConfig mcfg = small_model();
  TrainConfig tcfg;
  tcfg.lr = 0.003;
  tcfg.batch_size = 16;
  tcfg.total_steps = 1500;
  tcfg.checkpoint_points = 10;
  tcfg.seed = 5;
  TrainResult r = psim::train(mcfg, tcfg, data, layout);
  REQUIRE(r.loss_log.size() == 1500);
  double head = 0, tail = 0;
  for (int i = 0; i < 100; ++i) {
    head += r.loss_log[static_cast<size_t>(i)].second;
    tail += r.loss_log[static_cast<size_t>(1400 + i)].second;
  }
  CHECK(tail < 0.5 * head);
}

TEST_CASE("training aborts with the step number when the dataset runs out") {
  ParticleState x = flat_state({3, 3, 0.1, -0.2});
  ParticleState y = flat_state({3.001, 2.999, 0.1, -0.249});
  Dataset ds = constant_dataset(x, y, 10);
  BoundaryLayout layout = psim::boundary_layout(28, 14);
  ModelConfig mcfg = small_model();
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.total_steps = 3;
  tcfg.checkpoint_points = 2;
  CHECK_THROWS_WITH_AS(psim::train(mcfg, tcfg, ds, layout),
                       doctest::Contains("at step 3"), TrainError);
}

TEST_CASE("training aborts with the step number on a blown-up loss") {
  ParticleState x = flat_state({3, 3, 1e19, 1e19, 5, 5, -1e19, 1e19});
  ParticleState y = flat_state({3, 3, 0, 0, 5, 5, 0, 0});
  Dataset ds = constant_dataset(x, y, 64);
  BoundaryLayout layout = psim::boundary_layout(28, 14);
  ModelConfig mcfg = small_model();
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.total_steps = 8;
  tcfg.checkpoint_points = 2;
  CHECK_THROWS_WITH_AS(psim::train(mcfg, tcfg, ds, layout),
                       doctest::Contains("at step 1"), TrainError);
}

TEST_CASE("rollout returns one more state and energy than steps") {
  SimConfig scfg = small_sim();
  ModelConfig mcfg = small_model();
  ModelParams params = psim::init_params(mcfg, 99);
  BoundaryLayout layout = psim::boundary_layout(scfg.box_width, scfg.box_height);
  ParticleState start = psim::init_random_state(scfg, 31);
  auto res = psim::rollout(params, layout, scfg, start, 1000);
  REQUIRE(res.states.size() == 1001);
  REQUIRE(res.energies.size() == 1001);
  CHECK(res.states[0].pos[0].x == start.pos[0].x);
  CHECK(res.energies[0] == psim::total_energy(scfg, start));
  for (double e : res.energies) CHECK(std::isfinite(e));
  bool moved = false;
  for (int i = 0; i < start.n(); ++i)
    if (res.states[1].pos[i].x != start.pos[i].x) moved = true;
  CHECK(moved);
}

TEST_CASE("rollout aborts with the step reached on divergence") {
  SimConfig scfg = small_sim();
  ModelConfig mcfg = small_model();
  ModelParams params = psim::init_params(mcfg, 99);
  params.tensors["unembed.b"].data[1] = 3e38f;
  BoundaryLayout layout = psim::boundary_layout(scfg.box_width, scfg.box_height);
  ParticleState start = psim::init_random_state(scfg, 31);
  CHECK_THROWS_WITH_AS(psim::rollout(params, layout, scfg, start, 400),
                       doctest::Contains("step"), TrainError);
}

TEST_CASE("loss and energy csv rows are stable") {
  const std::string lpath = "test_train_loss.csv";
  psim::write_loss_csv(lpath, {{1, 0.5}, {2, 0.25}});
  CHECK(slurp(lpath) == "step,loss\n1,0.5\n2,0.25\n");
  const std::string epath = "test_train_energy.csv";
  psim::write_energy_csv(epath, {2.0, 1.5});
  CHECK(slurp(epath) == "step,total_energy\n0,2\n1,1.5\n");
  std::remove(lpath.c_str());
  std::remove(epath.c_str());
}

TEST_CASE("save_run writes a reloadable byte-stable bundle") {
  SimConfig scfg = small_sim();
  Dataset data = psim::generate_dataset(scfg, 200, 11);
  BoundaryLayout layout = psim::boundary_layout(scfg.box_width, scfg.box_height);
  ModelConfig mcfg = small_model();
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.total_steps = 10;
  tcfg.checkpoint_points = 3;
  TrainResult r = psim::train(mcfg, tcfg, data, layout);
  const std::string dir = "test_train_run";
  psim::save_run(dir, r);
  std::string loss_first = slurp(dir + "/loss.csv");
  std::string index_first = slurp(dir + "/index.csv");
  CHECK(loss_first.substr(0, 10) == "step,loss\n");
  CHECK(static_cast<size_t>(std::count(index_first.begin(), index_first.end(), '\n')) ==
        r.checkpoints.size() + 1);
  for (const Checkpoint& c : r.checkpoints) {
    ModelParams back = psim::load_checkpoint(dir + "/" + psim::checkpoint_filename(c.step));
    CHECK(same_params(back, c.params));
  }
  psim::save_run(dir, r);
  CHECK(slurp(dir + "/loss.csv") == loss_first);
  CHECK(slurp(dir + "/index.csv") == index_first);
  std::filesystem::remove_all(dir);
}
