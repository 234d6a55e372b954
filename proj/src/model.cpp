#include "psim/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>

#include "psim/rng.hpp"

namespace psim {
namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i64(std::string& out, int64_t v) { put_u64(out, static_cast<uint64_t>(v)); }
void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<uint32_t>(v)); }
void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct CheckpointReader {
  std::string bytes;
  size_t at = 0;
  const std::string& path;

  explicit CheckpointReader(const std::string& p) : path(p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ModelError("cannot open checkpoint file: " + p);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void need(size_t n, const char* what) {
    if (at + n > bytes.size()) {
      throw ModelError("checkpoint file " + path + " truncated at byte offset " +
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

  int64_t i64(const char* what) { return static_cast<int64_t>(u64(what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

  std::string str(const char* what) {
    uint32_t len = u32(what);
    need(len, what);
    std::string s = bytes.substr(at, len);
    at += len;
    return s;
  }
};

void check_params(const ModelParams& p) {
  p.config.validate();
  auto layout = param_layout(p.config);
  if (p.tensors.size() != layout.size())
    throw ModelError("parameter set has " + std::to_string(p.tensors.size()) +
                     " tensors, expected " + std::to_string(layout.size()));
  for (const auto& [name, shape] : layout) {
    auto it = p.tensors.find(name);
    if (it == p.tensors.end()) throw ModelError("missing parameter tensor: " + name);
    if (it->second.shape != shape)
      throw ModelError("parameter " + name + " has shape " + shape_str(it->second.shape) +
                       ", expected " + shape_str(shape));
  }
}

int64_t check_batch(const std::vector<ParticleState>& states) {
  if (states.empty()) throw ModelError("empty state batch");
  int64_t n = states[0].n();
  if (n < 1) throw ModelError("state has no particles");
  for (const auto& s : states) {
    if (s.n() != n)
      throw ModelError("batch mixes particle counts " + std::to_string(n) + " and " +
                       std::to_string(s.n()));
    if (s.pos.size() != s.vel.size()) throw ModelError("state pos/vel lengths differ");
  }
  return n;
}

template <typename T>
TensorT<T> pos_tensor(const std::vector<ParticleState>& states, int64_t n) {
  TensorT<T> t{Shape{static_cast<int64_t>(states.size()), n, 2}};
  size_t k = 0;
  for (const auto& s : states)
    for (const auto& p : s.pos) {
      t.data[k++] = static_cast<T>(p.x);
      t.data[k++] = static_cast<T>(p.y);
    }
  return t;
}

template <typename T>
TensorT<T> vel_tensor(const std::vector<ParticleState>& states, int64_t n) {
  TensorT<T> t{Shape{static_cast<int64_t>(states.size()), n, 2}};
  size_t k = 0;
  for (const auto& s : states)
    for (const auto& v : s.vel) {
      t.data[k++] = static_cast<T>(v.x);
      t.data[k++] = static_cast<T>(v.y);
    }
  return t;
}

template <typename T>
TensorT<T> state_features(const std::vector<ParticleState>& states, int64_t n) {
  TensorT<T> t{Shape{static_cast<int64_t>(states.size()), n, 4}};
  size_t k = 0;
  for (const auto& s : states)
    for (int i = 0; i < s.n(); ++i) {
      t.data[k++] = static_cast<T>(s.pos[i].x);
      t.data[k++] = static_cast<T>(s.pos[i].y);
      t.data[k++] = static_cast<T>(s.vel[i].x);
      t.data[k++] = static_cast<T>(s.vel[i].y);
    }
  return t;
}

template <typename Fn>
decltype(auto) locate(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const TensorError& e) {
    throw ModelError(where + ": " + e.what());
  }
}

// Shared graph construction for every public evaluation entry point.
template <typename T>
struct Builder {
  const ModelParams& params;
  GraphT<T>& g;
  std::map<std::string, int>& leaf_of;

  int param(const std::string& name) {
    auto it = leaf_of.find(name);
    if (it != leaf_of.end()) return it->second;
    int id = g.leaf(tensor_cast<T>(params.tensors.at(name)), /*requires_grad=*/true, name);
    leaf_of.emplace(name, id);
    return id;
  }

  int affine(int x, const std::string& w, const std::string& b) {
    return g.add(g.matmul(x, param(w)), param(b));
  }

  int two_layer(int x, const std::string& prefix) {
    return affine(g.relu(affine(x, prefix + ".w1", prefix + ".b1")), prefix + ".w2",
                  prefix + ".b2");
  }

  int embed(int x_in) {
    return locate("embedding", [&] { return two_layer(x_in, "embed"); });
  }

  // Masked sum of the shared per-boundary-particle embeddings: mask [B,N,Bp]
  // times embeddings [Bp,E].
  int boundary_term(const std::vector<ParticleState>& inputs, const BoundaryLayout& layout,
                    int64_t n) {
    return locate("boundary embedding", [&] {
      int64_t bp = static_cast<int64_t>(layout.points.size());
      TensorT<T> pts{Shape{bp, 2}};
      for (int64_t j = 0; j < bp; ++j) {
        pts.data[static_cast<size_t>(2 * j)] = static_cast<T>(layout.points[j].x);
        pts.data[static_cast<size_t>(2 * j + 1)] = static_cast<T>(layout.points[j].y);
      }
      int bemb = two_layer(g.leaf(std::move(pts)), "boundary");
      double r = params.config.boundary_mask_radius;
      TensorT<T> mask{Shape{static_cast<int64_t>(inputs.size()), n, bp}};
      size_t k = 0;
      for (const auto& s : inputs)
        for (const auto& p : s.pos)
          for (const auto& b : layout.points) {
            double dx = p.x - b.x, dy = p.y - b.y;
            mask.data[k++] = std::sqrt(dx * dx + dy * dy) < r ? T(1) : T(0);
          }
      return g.matmul(g.leaf(std::move(mask)), bemb);
    });
  }

  int attention(int x_ln, int blk, int64_t n, bool capture,
                std::vector<typename ModelGraph<T>::Alpha>* alphas) {
    int64_t dh = params.config.head_dim();
    T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    TensorT<uint8_t> eye{Shape{n, n}};
    for (int64_t i = 0; i < n; ++i) eye.data[static_cast<size_t>(i * n + i)] = 1;
    int acc = -1;
    for (int h = 0; h < params.config.heads; ++h) {
      locate("block " + std::to_string(blk) + " head " + std::to_string(h), [&] {
        std::string hp = "block" + std::to_string(blk) + ".head" + std::to_string(h) + ".";
        int q = g.matmul(x_ln, param(hp + "wq"));
        int key = g.matmul(x_ln, param(hp + "wk"));
        int v = g.matmul(x_ln, param(hp + "wv"));
        int logits = g.scale(g.matmul_nt(q, key), inv_scale);
        int masked = g.mask_fill(logits, eye, -std::numeric_limits<T>::infinity());
        int alpha = g.softmax_lastdim(masked, /*zero_logit=*/true);
        if (capture && alphas) alphas->push_back({blk, h, alpha});
        int head_out = g.matmul(alpha, v);
        int contrib = g.matmul(head_out, param(hp + "wo"));
        acc = acc < 0 ? contrib : g.add(acc, contrib);
        return 0;
      });
    }
    return acc;
  }

  int transformer_block(int x, int blk, int64_t n, bool capture,
                        std::vector<typename ModelGraph<T>::Alpha>* alphas) {
    std::string p = "block" + std::to_string(blk) + ".";
    return locate("block " + std::to_string(blk), [&] {
      int ln1 = g.layer_norm(x, param(p + "ln1.gain"), param(p + "ln1.bias"));
      x = g.add(x, attention(ln1, blk, n, capture, alphas));
      int ln2 = g.layer_norm(x, param(p + "ln2.gain"), param(p + "ln2.bias"));
      return g.add(x, two_layer(ln2, p + "mlp"));
    });
  }
};

}  // namespace

void ModelConfig::validate() const {
  if (blocks < 1) throw ModelError("blocks must be positive, got " + std::to_string(blocks));
  if (heads < 1) throw ModelError("heads must be positive, got " + std::to_string(heads));
  if (embed_dim < 1)
    throw ModelError("embed_dim must be positive, got " + std::to_string(embed_dim));
  if (embed_dim % heads != 0)
    throw ModelError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                     std::to_string(heads));
  if (spatial_dim != 2)
    throw ModelError("spatial_dim must be 2, got " + std::to_string(spatial_dim));
  if (activation != "relu") throw ModelError("unsupported activation: " + activation);
  if (!(boundary_mask_radius > 0))
    throw ModelError("boundary_mask_radius must be positive");
  if (!(dt > 0)) throw ModelError("dt must be positive");
  if (!std::isfinite(gravity) || gravity < 0)
    throw ModelError("gravity must be finite and non-negative");
}

BoundaryLayout boundary_layout(double box_width, double box_height, double spacing) {
  if (!(box_width > 0) || !(box_height > 0)) throw ModelError("box dimensions must be positive");
  if (!(spacing > 0)) throw ModelError("boundary spacing must be positive");
  BoundaryLayout layout;
  layout.spacing = spacing;
  auto intervals = [&](double len) {
    return std::max<int64_t>(1, static_cast<int64_t>(std::ceil(len / spacing - 1e-9)));
  };
  int64_t nx = intervals(box_width);
  int64_t ny = intervals(box_height);
  for (int64_t i = 0; i <= nx; ++i) {
    double x = box_width * static_cast<double>(i) / static_cast<double>(nx);
    layout.points.push_back({x, 0.0});
    layout.points.push_back({x, box_height});
  }
  for (int64_t j = 1; j < ny; ++j) {
    double y = box_height * static_cast<double>(j) / static_cast<double>(ny);
    layout.points.push_back({0.0, y});
    layout.points.push_back({box_width, y});
  }
  return layout;
}

std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& cfg) {
  cfg.validate();
  int64_t e = cfg.embed_dim;
  int64_t dh = cfg.head_dim();
  int64_t d = cfg.spatial_dim;
  std::vector<std::pair<std::string, Shape>> out;
  out.push_back({"embed.w1", {2 * d, e}});
  out.push_back({"embed.b1", {e}});
  out.push_back({"embed.w2", {e, e}});
  out.push_back({"embed.b2", {e}});
  out.push_back({"boundary.w1", {d, e}});
  out.push_back({"boundary.b1", {e}});
  out.push_back({"boundary.w2", {e, e}});
  out.push_back({"boundary.b2", {e}});
  for (int b = 0; b < cfg.blocks; ++b) {
    std::string bp = "block" + std::to_string(b) + ".";
    for (int h = 0; h < cfg.heads; ++h) {
      std::string hp = bp + "head" + std::to_string(h) + ".";
      out.push_back({hp + "wq", {e, dh}});
      out.push_back({hp + "wk", {e, dh}});
      out.push_back({hp + "wv", {e, dh}});
      out.push_back({hp + "wo", {dh, e}});
    }
    out.push_back({bp + "ln1.gain", {e}});
    out.push_back({bp + "ln1.bias", {e}});
    out.push_back({bp + "ln2.gain", {e}});
    out.push_back({bp + "ln2.bias", {e}});
    out.push_back({bp + "mlp.w1", {e, e}});
    out.push_back({bp + "mlp.b1", {e}});
    out.push_back({bp + "mlp.w2", {e, e}});
    out.push_back({bp + "mlp.b2", {e}});
  }
  out.push_back({"final_ln.gain", {e}});
  out.push_back({"final_ln.bias", {e}});
  out.push_back({"unembed.w", {e, d}});
  out.push_back({"unembed.b", {d}});
  return out;
}

std::vector<std::string> param_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (const auto& [name, shape] : param_layout(cfg)) names.push_back(name);
  return names;
}

Shape param_shape(const ModelConfig& cfg, const std::string& name) {
  for (const auto& [n, shape] : param_layout(cfg))
    if (n == name) return shape;
  throw ModelError("unknown parameter name: " + name);
}

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
  ModelParams p;
  p.config = cfg;
  for (const auto& [name, shape] : param_layout(cfg)) {
    Tensor32 t{shape};
    if (t.rank() == 2) {
      Rng rng = Rng::substream(seed, "param/" + name);
      double bound = std::sqrt(1.0 / static_cast<double>(shape[0]));
      for (float& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
    } else if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0) {
      for (float& v : t.data) v = 1.0f;
    }
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

void save_checkpoint(const std::string& path, const ModelParams& params) {
  check_params(params);
  const ModelConfig& cfg = params.config;
  std::string out;
  out += "PTC1";
  put_u32(out, 1);
  put_u32(out, static_cast<uint32_t>(cfg.blocks));
  put_u32(out, static_cast<uint32_t>(cfg.heads));
  put_u32(out, static_cast<uint32_t>(cfg.embed_dim));
  put_f64(out, cfg.boundary_mask_radius);
  put_u32(out, static_cast<uint32_t>(cfg.spatial_dim));
  put_u32(out, static_cast<uint32_t>(cfg.activation.size()));
  out += cfg.activation;
  put_f64(out, cfg.dt);
  put_f64(out, cfg.gravity);
  auto layout = param_layout(cfg);
  put_u32(out, static_cast<uint32_t>(layout.size()));
  for (const auto& [name, shape] : layout) {
    const Tensor32& t = params.tensors.at(name);
    if (!t.all_finite()) throw ModelError("parameter " + name + " contains non-finite values");
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape) put_i64(out, d);
    for (float v : t.data) put_f32(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ModelError("cannot open checkpoint file for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ModelError("write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  CheckpointReader r(path);
  r.need(4, "magic");
  if (r.bytes.compare(0, 4, "PTC1") != 0)
    throw ModelError("checkpoint file " + path + " has bad magic at byte offset 0, expected PTC1");
  r.at = 4;
  uint32_t version = r.u32("version");
  if (version != 1)
    throw ModelError("checkpoint file " + path + " has unsupported version " +
                     std::to_string(version) + " at byte offset 4");
  ModelParams p;
  p.config.blocks = static_cast<int>(r.u32("blocks"));
  p.config.heads = static_cast<int>(r.u32("heads"));
  p.config.embed_dim = static_cast<int>(r.u32("embed_dim"));
  p.config.boundary_mask_radius = r.f64("boundary_mask_radius");
  p.config.spatial_dim = static_cast<int>(r.u32("spatial_dim"));
  p.config.activation = r.str("activation");
  p.config.dt = r.f64("dt");
  p.config.gravity = r.f64("gravity");
  p.config.validate();
  auto layout = param_layout(p.config);
  uint32_t count = r.u32("tensor count");
  if (count != layout.size())
    throw ModelError("checkpoint file " + path + " holds " + std::to_string(count) +
                     " tensors, expected " + std::to_string(layout.size()));
  for (size_t i = 0; i < layout.size(); ++i) {
    std::string name = r.str("tensor name");
    if (name != layout[i].first)
      throw ModelError("checkpoint tensor " + std::to_string(i) + " is named " + name +
                       ", expected " + layout[i].first);
    uint32_t rank = r.u32("tensor rank");
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = r.i64("tensor dim");
    if (shape != layout[i].second)
      throw ModelError("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                       ", expected " + shape_str(layout[i].second));
    Tensor32 t{shape};
    for (float& v : t.data) v = r.f32("tensor data");
    if (!t.all_finite()) throw ModelError("checkpoint tensor " + name + " is not finite");
    p.tensors.emplace(std::move(name), std::move(t));
  }
  if (r.at != r.bytes.size())
    throw ModelError("checkpoint file " + path + " has " +
                     std::to_string(r.bytes.size() - r.at) + " trailing bytes at offset " +
                     std::to_string(r.at));
  return p;
}

template <typename T>
ModelGraph<T> build_forward(const ModelParams& params, const BoundaryLayout& layout,
                            const std::vector<ParticleState>& inputs,
                            const std::vector<ParticleState>* targets, bool capture) {
  check_params(params);
  int64_t n = check_batch(inputs);
  if (targets) {
    if (targets->size() != inputs.size())
      throw ModelError("target batch size " + std::to_string(targets->size()) +
                       " does not match input batch size " + std::to_string(inputs.size()));
    if (check_batch(*targets) != n) throw ModelError("target particle count differs from input");
  }
  const ModelConfig& cfg = params.config;
  ModelGraph<T> mg;
  GraphT<T>& g = mg.graph;
  Builder<T> b{params, g, mg.param_leaf};
  int pos = locate("inputs", [&] { return g.leaf(pos_tensor<T>(inputs, n)); });
  int vel = locate("inputs", [&] { return g.leaf(vel_tensor<T>(inputs, n)); });
  int x = b.embed(g.concat(pos, vel, 2));
  x = g.add(x, b.boundary_term(inputs, layout, n));
  for (int blk = 0; blk < cfg.blocks; ++blk)
    x = b.transformer_block(x, blk, n, capture, &mg.alphas);
  locate("output stage", [&] {
    int fx = g.layer_norm(x, b.param("final_ln.gain"), b.param("final_ln.bias"));
    int accel = g.add(g.matmul(fx, b.param("unembed.w")), b.param("unembed.b"));
    TensorT<T> gvec{Shape{2}};
    gvec.data[1] = static_cast<T>(-cfg.gravity);
    int v_next = g.add(vel, g.scale(g.add(accel, g.leaf(std::move(gvec))), static_cast<T>(cfg.dt)));
    int p_next = g.add(pos, g.scale(v_next, static_cast<T>(cfg.dt)));
    mg.prediction = g.concat(p_next, v_next, 2);
    return 0;
  });
  if (targets) {
    locate("loss", [&] {
      int tgt = g.leaf(state_features<T>(*targets, n));
      double count = static_cast<double>(inputs.size());
      mg.loss = g.scale(g.squared_error(mg.prediction, tgt), static_cast<T>(1.0 / count));
      return 0;
    });
  }
  return mg;
}

template ModelGraph<float> build_forward<float>(const ModelParams&, const BoundaryLayout&,
                                                const std::vector<ParticleState>&,
                                                const std::vector<ParticleState>*, bool);
template ModelGraph<double> build_forward<double>(const ModelParams&, const BoundaryLayout&,
                                                  const std::vector<ParticleState>&,
                                                  const std::vector<ParticleState>*, bool);

namespace {

std::vector<ParticleState> states_from_prediction(const Tensor32& pred) {
  int64_t batch = pred.shape[0];
  int64_t n = pred.shape[1];
  std::vector<ParticleState> out(static_cast<size_t>(batch));
  const float* d = pred.data.data();
  for (int64_t s = 0; s < batch; ++s) {
    ParticleState& st = out[static_cast<size_t>(s)];
    st.pos.resize(static_cast<size_t>(n));
    st.vel.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      st.pos[static_cast<size_t>(i)] = {d[0], d[1]};
      st.vel[static_cast<size_t>(i)] = {d[2], d[3]};
      d += 4;
    }
  }
  return out;
}

}  // namespace

std::vector<ParticleState> predict_batch(const ModelParams& params, const BoundaryLayout& layout,
                                         const std::vector<ParticleState>& inputs) {
  ModelGraph<float> mg = build_forward<float>(params, layout, inputs, nullptr);
  return states_from_prediction(mg.graph.value(mg.prediction));
}

ParticleState predict_state(const ModelParams& params, const BoundaryLayout& layout,
                            const ParticleState& input) {
  return predict_batch(params, layout, {input})[0];
}

std::pair<std::vector<ParticleState>, std::vector<AttentionRecord>> forward_with_attention(
    const ModelParams& params, const BoundaryLayout& layout,
    const std::vector<ParticleState>& inputs) {
  ModelGraph<float> mg = build_forward<float>(params, layout, inputs, nullptr, /*capture=*/true);
  std::vector<AttentionRecord> records;
  records.reserve(mg.alphas.size());
  for (const auto& a : mg.alphas)
    records.push_back({a.block, a.head, mg.graph.value(a.node)});
  return {states_from_prediction(mg.graph.value(mg.prediction)), std::move(records)};
}

double batch_loss(const ModelParams& params, const BoundaryLayout& layout,
                  const std::vector<ParticleState>& inputs,
                  const std::vector<ParticleState>& targets) {
  ModelGraph<float> mg = build_forward<float>(params, layout, inputs, &targets);
  return static_cast<double>(mg.graph.value(mg.loss).data[0]);
}

Tensor32 embed_batch(const ModelParams& params, const std::vector<ParticleState>& inputs) {
  check_params(params);
  int64_t n = check_batch(inputs);
  GraphT<float> g;
  std::map<std::string, int> ids;
  Builder<float> b{params, g, ids};
  int x = locate("inputs", [&] { return g.leaf(state_features<float>(inputs, n)); });
  return g.value(b.embed(x));
}

Tensor32 boundary_embed_batch(const ModelParams& params, const BoundaryLayout& layout,
                              const std::vector<ParticleState>& inputs) {
  check_params(params);
  int64_t n = check_batch(inputs);
  GraphT<float> g;
  std::map<std::string, int> ids;
  Builder<float> b{params, g, ids};
  return g.value(b.boundary_term(inputs, layout, n));
}

std::pair<Tensor32, std::vector<AttentionRecord>> attention_forward(const ModelParams& params,
                                                                    int block, const Tensor32& x,
                                                                    bool capture) {
  check_params(params);
  if (block < 0 || block >= params.config.blocks)
    throw ModelError("block index " + std::to_string(block) + " out of range");
  if (x.rank() != 3 || x.shape[2] != params.config.embed_dim)
    throw ModelError("attention input must be [batch, N, embed_dim], got " + shape_str(x.shape));
  GraphT<float> g;
  std::map<std::string, int> ids;
  Builder<float> b{params, g, ids};
  int xn = locate("inputs", [&] { return g.leaf(x); });
  std::vector<ModelGraph<float>::Alpha> alphas;
  int out = b.attention(xn, block, x.shape[1], capture, &alphas);
  std::vector<AttentionRecord> records;
  for (const auto& a : alphas) records.push_back({a.block, a.head, g.value(a.node)});
  return {g.value(out), std::move(records)};
}

Tensor32 block_forward(const ModelParams& params, int block, const Tensor32& x) {
  check_params(params);
  if (block < 0 || block >= params.config.blocks)
    throw ModelError("block index " + std::to_string(block) + " out of range");
  if (x.rank() != 3 || x.shape[2] != params.config.embed_dim)
    throw ModelError("block input must be [batch, N, embed_dim], got " + shape_str(x.shape));
  GraphT<float> g;
  std::map<std::string, int> ids;
  Builder<float> b{params, g, ids};
  int xn = locate("inputs", [&] { return g.leaf(x); });
  return g.value(b.transformer_block(xn, block, x.shape[1], false, nullptr));
}

}  // namespace psim
