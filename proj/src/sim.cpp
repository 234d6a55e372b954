#include "psim/sim.hpp"

#include <cmath>
#include <string>

#include "psim/rng.hpp"

namespace psim {

double Vec2::norm() const { return std::sqrt(x * x + y * y); }

static void check_state(const SimConfig& cfg, const ParticleState& s, const char* where) {
  if (s.pos.size() != s.vel.size())
    throw SimError(std::string(where) + ": position/velocity count mismatch");
  if (s.n() != cfg.particle_count)
    throw SimError(std::string(where) + ": state has " + std::to_string(s.n()) +
                   " particles, config says " + std::to_string(cfg.particle_count));
}

static Vec2 pair_force(const SimConfig& cfg, const ParticleState& s, int i, int j) {
  Vec2 d = s.pos[static_cast<size_t>(i)] - s.pos[static_cast<size_t>(j)];
  double dist = d.norm();
  if (dist == 0.0)
    throw SimError("pairwise_contact_forces: particles " + std::to_string(i) + " and " +
                   std::to_string(j) + " have coincident centres");
  double overlap = cfg.diameter - dist;
  if (overlap <= 0.0) return {};
  Vec2 nhat = d * (1.0 / dist);
  Vec2 vrel = s.vel[static_cast<size_t>(i)] - s.vel[static_cast<size_t>(j)];
  // Spring on the overlap plus a dashpot on the whole relative velocity.
  // Damping only the normal component leaves particles sliding frictionlessly
  // along the floor forever, and the bed never actually comes to rest.
  return nhat * (cfg.spring_k * overlap) - vrel * cfg.damping_c;
}

Vec2 contact_force_on(const SimConfig& cfg, const ParticleState& s, int i, int j) {
  check_state(cfg, s, "contact_force_on");
  return pair_force(cfg, s, i, j);
}

std::vector<Vec2> pairwise_contact_forces(const SimConfig& cfg, const ParticleState& s) {
  check_state(cfg, s, "pairwise_contact_forces");
  int n = s.n();
  std::vector<Vec2> f(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      Vec2 fi = pair_force(cfg, s, i, j);
      f[static_cast<size_t>(i)] += fi;
      f[static_cast<size_t>(j)] -= fi;
    }
  }
  return f;
}

std::vector<Vec2> wall_forces(const SimConfig& cfg, const ParticleState& s) {
  check_state(cfg, s, "wall_forces");
  int n = s.n();
  double r = cfg.radius();
  std::vector<Vec2> f(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Vec2 p = s.pos[static_cast<size_t>(i)];
    Vec2 v = s.vel[static_cast<size_t>(i)];
    // {overlap, inward normal} per wall
    struct Wall {
      double overlap;
      Vec2 nhat;
    } walls[4] = {
        {r - p.y, {0, 1}},                    // floor
        {r - (cfg.box_height - p.y), {0, -1}},  // ceiling
        {r - p.x, {1, 0}},                    // left
        {r - (cfg.box_width - p.x), {-1, 0}},   // right
    };
    for (const Wall& w : walls) {
      if (w.overlap <= 0.0) continue;
      f[static_cast<size_t>(i)] += w.nhat * (cfg.spring_k * w.overlap) - v * cfg.damping_c;
    }
  }
  return f;
}

ParticleState step_state(const SimConfig& cfg, const ParticleState& s) {
  check_state(cfg, s, "step_state");
  std::vector<Vec2> fc = pairwise_contact_forces(cfg, s);
  std::vector<Vec2> fw = wall_forces(cfg, s);
  Vec2 g{0, -cfg.gravity};
  ParticleState out;
  out.pos.resize(s.pos.size());
  out.vel.resize(s.vel.size());
  double inv_m = 1.0 / cfg.mass;
  for (size_t i = 0; i < s.pos.size(); ++i) {
    Vec2 a = (fc[i] + fw[i]) * inv_m;
    Vec2 v = s.vel[i] + (a + g) * cfg.dt;
    out.vel[i] = v;
    out.pos[i] = s.pos[i] + v * cfg.dt;
  }
  return out;
}

ParticleState init_random_state(const SimConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  double r = cfg.radius();
  double lo_x = r, hi_x = cfg.box_width - r;
  double lo_y = r, hi_y = cfg.box_height - r;
  if (lo_x >= hi_x || lo_y >= hi_y)
    throw SimError("init_random_state: box cannot contain a particle");
  const int max_attempts = 100000;
  ParticleState s;
  s.pos.reserve(static_cast<size_t>(cfg.particle_count));
  for (int i = 0; i < cfg.particle_count; ++i) {
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt >= max_attempts)
        throw SimError("init_random_state: could not place particle " + std::to_string(i) +
                       " after " + std::to_string(max_attempts) + " attempts");
      Vec2 cand{rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)};
      bool ok = true;
      for (const Vec2& q : s.pos)
        if ((cand - q).norm() < cfg.diameter) {
          ok = false;
          break;
        }
      if (ok) {
        s.pos.push_back(cand);
        break;
      }
    }
  }
  s.vel.resize(static_cast<size_t>(cfg.particle_count));
  for (Vec2& v : s.vel) {
    v.x = rng.normal();
    v.y = rng.normal();
  }
  return s;
}

namespace {

// The volatile keeps the vectorizer away from this loop; gcc 11 at -O3
// miscompiles the plain double->float->double form (tail elements skipped).
double round_through_f32(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

}  // namespace

ParticleState quantize_state_f32(const ParticleState& s) {
  ParticleState q = s;
  for (Vec2& p : q.pos) {
    p.x = round_through_f32(p.x);
    p.y = round_through_f32(p.y);
  }
  for (Vec2& v : q.vel) {
    v.x = round_through_f32(v.x);
    v.y = round_through_f32(v.y);
  }
  return q;
}

std::vector<ParticleState> simulate_trajectory(const SimConfig& cfg, uint64_t seed,
                                               bool quantize_f32) {
  std::vector<ParticleState> traj;
  traj.reserve(static_cast<size_t>(cfg.steps) + 1);
  ParticleState s = init_random_state(cfg, seed);
  if (quantize_f32) s = quantize_state_f32(s);
  traj.push_back(s);
  for (int t = 0; t < cfg.steps; ++t) {
    s = step_state(cfg, s);
    if (quantize_f32) s = quantize_state_f32(s);
    traj.push_back(s);
  }
  return traj;
}

double total_energy(const SimConfig& cfg, const ParticleState& s) {
  check_state(cfg, s, "total_energy");
  double e = 0;
  double r = cfg.radius();
  int n = s.n();
  for (int i = 0; i < n; ++i) {
    const Vec2& p = s.pos[static_cast<size_t>(i)];
    const Vec2& v = s.vel[static_cast<size_t>(i)];
    e += 0.5 * cfg.mass * v.dot(v);
    e += cfg.mass * cfg.gravity * p.y;
    double wall_overlaps[4] = {r - p.y, r - (cfg.box_height - p.y), r - p.x,
                               r - (cfg.box_width - p.x)};
    for (double ov : wall_overlaps)
      if (ov > 0) e += 0.5 * cfg.spring_k * ov * ov;
    for (int j = i + 1; j < n; ++j) {
      double dist = (p - s.pos[static_cast<size_t>(j)]).norm();
      double ov = cfg.diameter - dist;
      if (ov > 0) e += 0.5 * cfg.spring_k * ov * ov;
    }
  }
  return e;
}

double mean_speed(const ParticleState& s) {
  if (s.pos.empty()) return 0;
  double acc = 0;
  for (const Vec2& v : s.vel) acc += v.norm();
  return acc / static_cast<double>(s.vel.size());
}

}  // namespace psim
