#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace psim {

struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vec2 {
  double x = 0, y = 0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  Vec2& operator-=(Vec2 o) {
    x -= o.x;
    y -= o.y;
    return *this;
  }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const;
};

// Box with the floor at y=0, ceiling at y=box_height, side walls at x=0 and
// x=box_width; gravity pulls along -y.  Contacts are damped linear springs
// acting on the overlap, integrated with semi-implicit Euler.
struct SimConfig {
  int particle_count = 64;
  double diameter = 1.0;
  double mass = 1.0;
  double dt = 0.005;
  double spring_k = 1000.0;
  double damping_c = 10.0;
  double gravity = 9.8;
  double box_width = 28.0;
  double box_height = 14.0;
  int steps = 1024;

  double radius() const { return 0.5 * diameter; }
};

struct ParticleState {
  std::vector<Vec2> pos;
  std::vector<Vec2> vel;

  int n() const { return static_cast<int>(pos.size()); }
};

// Sum of damped-spring contact forces between overlapping particle pairs.
// The force on i from j is k*overlap along the unit vector from j to i, plus
// a dashpot -c*(v_i - v_j) on the full relative velocity; the reaction on j
// is the exact negation.  Coincident centres have no defined normal and
// raise SimError.
std::vector<Vec2> pairwise_contact_forces(const SimConfig& cfg, const ParticleState& s);

// Force on i from j alone (zero when not in contact).  Same code path as the
// full scan; exposed so antisymmetry can be checked pair by pair.
Vec2 contact_force_on(const SimConfig& cfg, const ParticleState& s, int i, int j);

// Same spring-damper law against the four walls, overlap measured from the
// particle radius, normals pointing into the box.
std::vector<Vec2> wall_forces(const SimConfig& cfg, const ParticleState& s);

// Semi-implicit Euler: v' = v + dt*(F/m + g), p' = p + dt*v'.
ParticleState step_state(const SimConfig& cfg, const ParticleState& s);

// Rejection-sampled non-overlapping positions (centres inset by one radius),
// standard-normal velocities.  Deterministic per seed; throws SimError if a
// particle cannot be placed within the retry budget.
ParticleState init_random_state(const SimConfig& cfg, uint64_t seed);

// cfg.steps steps from the seeded initial state; returns steps+1 states.
// With quantize_f32 every stored state is rounded to float32 and the rounded
// state is what gets integrated next, which is the contract the float32
// dataset files need (stepping a stored x reproduces the stored y to within
// one rounding).
std::vector<ParticleState> simulate_trajectory(const SimConfig& cfg, uint64_t seed,
                                               bool quantize_f32 = false);

// Kinetic + gravitational (datum y=0) + elastic overlap energy, walls included.
double total_energy(const SimConfig& cfg, const ParticleState& s);

double mean_speed(const ParticleState& s);

ParticleState quantize_state_f32(const ParticleState& s);

}  // namespace psim
