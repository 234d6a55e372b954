#include "psim/data.hpp"

#include <bit>
#include <cstdio>
#include <fstream>

#include "psim/rng.hpp"

namespace psim {
namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<uint32_t>(v)); }

struct FileParser {
  std::string bytes;
  size_t at = 0;
  const std::string& path;

  explicit FileParser(const std::string& p) : path(p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file: " + p);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void need(size_t n, const char* what) {
    if (at + n > bytes.size()) {
      throw DataError("dataset file " + path + " truncated at byte offset " +
                      std::to_string(bytes.size()) + ": need " + std::to_string(at + n) +
                      " bytes to read " + what);
    }
  }

  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    at += 4;
    return v;
  }

  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    at += 8;
    return v;
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
};

void append_state(std::string& out, const ParticleState& s) {
  for (int i = 0; i < s.n(); ++i) {
    put_f32(out, static_cast<float>(s.pos[i].x));
    put_f32(out, static_cast<float>(s.pos[i].y));
    put_f32(out, static_cast<float>(s.vel[i].x));
    put_f32(out, static_cast<float>(s.vel[i].y));
  }
}

ParticleState parse_state(FileParser& p, uint32_t n) {
  ParticleState s;
  s.pos.resize(n);
  s.vel.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    s.pos[i].x = p.f32("state row");
    s.pos[i].y = p.f32("state row");
    s.vel[i].x = p.f32("state row");
    s.vel[i].y = p.f32("state row");
  }
  return s;
}

}  // namespace

std::vector<StatePair> trajectory_to_pairs(const std::vector<ParticleState>& traj) {
  if (traj.size() < 2)
    throw DataError("trajectory_to_pairs needs at least 2 states, got " +
                    std::to_string(traj.size()));
  std::vector<StatePair> pairs(traj.size() - 1);
  for (size_t t = 0; t + 1 < traj.size(); ++t) pairs[t] = {traj[t], traj[t + 1]};
  return pairs;
}

std::vector<StatePair> shuffle_merge(const std::vector<std::vector<StatePair>>& streams,
                                     uint64_t seed) {
  if (streams.empty()) throw DataError("shuffle_merge needs at least one stream");
  std::vector<StatePair> out;
  for (const auto& s : streams) out.insert(out.end(), s.begin(), s.end());
  Rng rng(seed);
  for (size_t i = out.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.below(i));
    std::swap(out[i - 1], out[j]);
  }
  return out;
}

void write_dataset(const std::string& path, const Dataset& ds) {
  uint32_t n = ds.header.particle_count;
  for (const auto& p : ds.pairs) {
    if (p.x.n() != static_cast<int>(n) || p.y.n() != static_cast<int>(n))
      throw DataError("pair particle count does not match header N=" + std::to_string(n));
  }
  std::string out;
  out += "PDS1";
  put_u32(out, ds.header.version);
  put_u32(out, n);
  put_u32(out, ds.header.dims);
  put_u64(out, ds.pairs.size());
  put_u32(out, static_cast<uint32_t>(ds.header.source_seeds.size()));
  for (uint64_t s : ds.header.source_seeds) put_u64(out, s);
  for (const auto& p : ds.pairs) {
    append_state(out, p.x);
    append_state(out, p.y);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open dataset file for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("write failed: " + path);
}

Dataset read_dataset(const std::string& path) {
  FileParser p(path);
  p.need(4, "magic");
  if (p.bytes.compare(0, 4, "PDS1") != 0)
    throw DataError("dataset file " + path + " has bad magic at byte offset 0, expected PDS1");
  p.at = 4;
  Dataset ds;
  ds.header.version = p.u32("version");
  if (ds.header.version != 1)
    throw DataError("dataset file " + path + " has unsupported version " +
                    std::to_string(ds.header.version) + " at byte offset 4");
  ds.header.particle_count = p.u32("particle count");
  ds.header.dims = p.u32("dims");
  if (ds.header.dims != 2)
    throw DataError("dataset file " + path + " has dims=" + std::to_string(ds.header.dims) +
                    " at byte offset 12, expected 2");
  uint64_t pair_count = p.u64("pair count");
  uint32_t seed_count = p.u32("seed count");
  ds.header.source_seeds.resize(seed_count);
  for (uint32_t i = 0; i < seed_count; ++i) ds.header.source_seeds[i] = p.u64("source seed");

  size_t record_bytes = 2ull * ds.header.particle_count * 4 * 4;
  size_t expect = p.at + pair_count * record_bytes;
  if (p.bytes.size() != expect) {
    throw DataError("dataset file " + path + " length mismatch: header promises " +
                    std::to_string(pair_count) + " pairs ending at byte offset " +
                    std::to_string(expect) + ", file has " + std::to_string(p.bytes.size()) +
                    " bytes");
  }
  ds.pairs.resize(pair_count);
  for (uint64_t i = 0; i < pair_count; ++i) {
    ds.pairs[i].x = parse_state(p, ds.header.particle_count);
    ds.pairs[i].y = parse_state(p, ds.header.particle_count);
  }
  return ds;
}

std::pair<std::vector<StatePair>, BatchCursor> sample_batch(const Dataset& ds,
                                                            int batch_size,
                                                            BatchCursor cursor) {
  if (batch_size < 1) throw DataError("batch_size must be positive");
  uint64_t total = ds.pairs.size();
  if (cursor.next > total)
    throw DataError("cursor " + std::to_string(cursor.next) + " is past the dataset end " +
                    std::to_string(total));
  uint64_t remaining = total - cursor.next;
  if (remaining < static_cast<uint64_t>(batch_size))
    throw DataError("dataset exhausted: " + std::to_string(remaining) + " pairs left, batch of " +
                    std::to_string(batch_size) + " requested; generate more data");
  std::vector<StatePair> batch(ds.pairs.begin() + static_cast<ptrdiff_t>(cursor.next),
                               ds.pairs.begin() + static_cast<ptrdiff_t>(cursor.next) + batch_size);
  return {std::move(batch), BatchCursor{cursor.next + static_cast<uint64_t>(batch_size)}};
}

void save_cursor(const std::string& path, BatchCursor cursor) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open cursor file for writing: " + path);
  f << cursor.next << "\n";
  if (!f) throw DataError("write failed: " + path);
}

BatchCursor load_cursor(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open cursor file: " + path);
  uint64_t v = 0;
  if (!(f >> v)) throw DataError("cursor file is not a number: " + path);
  return BatchCursor{v};
}

Dataset generate_dataset(const SimConfig& cfg, int64_t min_pairs, uint64_t master_seed) {
  if (min_pairs < 1) throw DataError("min_pairs must be positive");
  if (cfg.steps < 1) throw DataError("cfg.steps must be positive");
  int64_t traj_count = (min_pairs + cfg.steps - 1) / cfg.steps;
  Dataset ds;
  ds.header.particle_count = static_cast<uint32_t>(cfg.particle_count);
  std::vector<std::vector<StatePair>> streams;
  streams.reserve(static_cast<size_t>(traj_count));
  for (int64_t i = 0; i < traj_count; ++i) {
    uint64_t seed = Rng::substream_seed(master_seed, "traj/" + std::to_string(i));
    ds.header.source_seeds.push_back(seed);
    streams.push_back(trajectory_to_pairs(simulate_trajectory(cfg, seed, /*quantize_f32=*/true)));
  }
  ds.pairs = shuffle_merge(streams, Rng::substream_seed(master_seed, "shuffle"));
  return ds;
}

}  // namespace psim
