// Four-stage Context Cluster backbone: declarative stage configs, named
// presets, deterministic construction, classification forward pass,
// parameter/MAC accounting, and the checkpoint format.
#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "coc/cluster.hpp"
#include "coc/points.hpp"
#include "coc/tensor.hpp"

namespace coc {

struct StageConfig {
  int k_neighbors = 9;
  int downsample_r = 4;
  int dim = 32;
  int regions = 1;
  int local_centers = 4;
  int heads = 4;
  int head_dim = 24;
  int mlp_ratio = 4;
  int depth = 1;
};

struct AblationFlags {
  bool no_position = false;
  bool no_cluster_op = false;
  bool single_head = false;
  bool no_partition = false;
  int center_update_iters = 0;
};

struct ModelConfig {
  std::array<StageConfig, 4> stages;
  int num_classes = 1000;
  int input_h = 224;
  int input_w = 224;
  bool standardize_input = false;
  AblationFlags ablation;
};

inline ModelConfig model_preset(const std::string& name) {
  auto mk = [](std::array<int, 4> k, std::array<int, 4> r, std::array<int, 4> dim,
               std::array<int, 4> regions, std::array<int, 4> centers, std::array<int, 4> heads,
               int head_dim, std::array<int, 4> mlp, std::array<int, 4> depth) {
    ModelConfig c;
    for (int s = 0; s < 4; ++s)
      c.stages[static_cast<std::size_t>(s)] =
          StageConfig{k[static_cast<std::size_t>(s)], r[static_cast<std::size_t>(s)],
                      dim[static_cast<std::size_t>(s)], regions[static_cast<std::size_t>(s)],
                      centers[static_cast<std::size_t>(s)], heads[static_cast<std::size_t>(s)],
                      head_dim, mlp[static_cast<std::size_t>(s)], depth[static_cast<std::size_t>(s)]};
    return c;
  };
  if (name == "tiny")
    return mk({16, 9, 9, 9}, {16, 4, 4, 4}, {32, 64, 196, 320}, {64, 16, 4, 1}, {4, 4, 4, 4},
              {4, 4, 8, 8}, 24, {8, 8, 4, 4}, {3, 4, 5, 2});
  if (name == "tiny-dagger")
    return mk({16, 9, 9, 9}, {16, 4, 4, 4}, {32, 64, 196, 320}, {49, 49, 1, 1}, {16, 4, 49, 16},
              {4, 4, 8, 8}, 24, {8, 8, 4, 4}, {3, 4, 5, 2});
  if (name == "small")
    return mk({16, 9, 9, 9}, {16, 4, 4, 4}, {64, 128, 320, 512}, {64, 16, 4, 1}, {4, 4, 4, 4},
              {4, 4, 8, 8}, 32, {8, 8, 4, 4}, {2, 2, 6, 2});
  if (name == "medium")
    return mk({16, 9, 9, 9}, {16, 4, 4, 4}, {64, 128, 320, 512}, {64, 16, 4, 1}, {4, 4, 4, 4},
              {6, 6, 12, 12}, 32, {8, 8, 4, 4}, {4, 4, 12, 4});
  if (name == "micro32") {
    ModelConfig c = mk({9, 9, 9, 9}, {4, 4, 4, 4}, {32, 64, 128, 256}, {4, 4, 1, 1}, {4, 4, 4, 4},
                       {2, 2, 4, 4}, 16, {4, 4, 4, 4}, {1, 1, 2, 1});
    c.num_classes = 10;
    c.input_h = c.input_w = 32;
    return c;
  }
  throw config_error("unknown preset: " + name);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class S>
struct ReducerParams {
  Tensor<S> w;  // (k*d_in) x d_out
  Tensor<S> gamma, beta;
  int k = 0, downsample_r = 0;
};

template <class S>
struct Model {
  ModelConfig cfg;
  std::vector<ReducerParams<S>> reducers;             // one per stage
  std::vector<std::vector<BlockParams<S>>> stages;    // blocks per stage
  Tensor<S> final_gamma, final_beta;
  Tensor<S> head_w, head_b;
  // Every parameter under a unique dotted name, in construction order.
  std::vector<std::pair<std::string, Tensor<S>>> registry;
};

namespace detail {

// Resolved per-stage settings after ablation flags.
inline ModelConfig effective_config(ModelConfig cfg) {
  if (cfg.ablation.single_head)
    for (auto& s : cfg.stages) s.heads = 1;
  if (cfg.ablation.no_partition) {
    const std::array<int, 4> centers{16, 16, 4, 4};
    for (int s = 0; s < 4; ++s) {
      cfg.stages[static_cast<std::size_t>(s)].regions = 1;
      cfg.stages[static_cast<std::size_t>(s)].local_centers = centers[static_cast<std::size_t>(s)];
    }
  }
  return cfg;
}

inline void validate_config(const ModelConfig& cfg) {
  GridMeta g{cfg.input_h, cfg.input_w};
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[static_cast<std::size_t>(s)];
    const std::string where = "stage " + std::to_string(s + 1);
    for (int v : {st.k_neighbors, st.downsample_r, st.dim, st.regions, st.local_centers,
                  st.heads, st.head_dim, st.mlp_ratio})
      if (v < 1) throw config_error(where + ": non-positive field in stage config");
    if (st.depth < 0) throw config_error(where + ": negative depth");
    const bool valid_combo = (st.k_neighbors == 16 && st.downsample_r == 16) ||
                             (st.k_neighbors == 9 && st.downsample_r == 4) ||
                             (st.k_neighbors == 4 && st.downsample_r == 4);
    if (!valid_combo)
      throw config_error(where + ": k_neighbors=" + std::to_string(st.k_neighbors) +
                         " incompatible with downsample_r=" + std::to_string(st.downsample_r));
    const int stride = st.downsample_r == 16 ? 4 : 2;
    if (g.height % stride != 0 || g.width % stride != 0)
      throw config_error(where + ": grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                         " not divisible by reducer stride " + std::to_string(stride));
    g = GridMeta{g.height / stride, g.width / stride};
    const int rside = isqrt_exact(st.regions, (where + " regions").c_str());
    if (g.height % rside != 0 || g.width % rside != 0)
      throw config_error(where + ": grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                         " not divisible into " + std::to_string(st.regions) + " regions");
    const GridMeta tile{g.height / rside, g.width / rside};
    const int cside = isqrt_exact(st.local_centers, (where + " local_centers").c_str());
    if (tile.height < cside || tile.width < cside)
      throw config_error(where + ": region tile " + std::to_string(tile.height) + "x" +
                         std::to_string(tile.width) + " too small for " +
                         std::to_string(st.local_centers) + " centers");
  }
}

template <class S>
Tensor<S> kaiming_uniform(int fan_in, int fan_out, std::mt19937& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rand_uniform<S>({fan_in, fan_out}, -bound, bound, rng);
}

}  // namespace detail

template <class S>
Model<S> build_model(const ModelConfig& raw_cfg, unsigned seed) {
  ModelConfig cfg = detail::effective_config(raw_cfg);
  detail::validate_config(cfg);

  Model<S> m;
  m.cfg = cfg;
  std::mt19937 rng(seed);
  auto reg = [&m](const std::string& name, Tensor<S> t) {
    t.set_requires_grad(true);
    m.registry.emplace_back(name, t);
    return t;
  };

  int d_in = 5;
  for (int s = 0; s < 4; ++s) {
    const StageConfig& st = cfg.stages[static_cast<std::size_t>(s)];
    const std::string sp = "stage" + std::to_string(s) + ".";
    ReducerParams<S> red;
    red.k = st.k_neighbors;
    red.downsample_r = st.downsample_r;
    red.w = reg(sp + "reducer.w", detail::kaiming_uniform<S>(st.k_neighbors * d_in, st.dim, rng));
    red.gamma = reg(sp + "reducer.gamma", Tensor<S>::full({st.dim}, S(1)));
    red.beta = reg(sp + "reducer.beta", Tensor<S>::zeros({st.dim}));
    m.reducers.push_back(std::move(red));

    std::vector<BlockParams<S>> blocks;
    for (int b = 0; b < st.depth; ++b) {
      const std::string bp = sp + "block" + std::to_string(b) + ".";
      BlockParams<S> blk;
      blk.regions = st.regions;
      blk.no_cluster_op = cfg.ablation.no_cluster_op;
      blk.norm1_gamma = reg(bp + "norm1.gamma", Tensor<S>::full({st.dim}, S(1)));
      blk.norm1_beta = reg(bp + "norm1.beta", Tensor<S>::zeros({st.dim}));
      CocOpParams<S>& op = blk.op;
      op.heads = st.heads;
      op.head_dim = st.head_dim;
      op.local_centers = st.local_centers;
      op.center_update_iters = cfg.ablation.center_update_iters;
      for (int h = 0; h < st.heads; ++h) {
        const std::string hp = bp + "op.head" + std::to_string(h) + ".";
        op.w_s.push_back(reg(hp + "w_s", detail::kaiming_uniform<S>(st.dim, st.head_dim, rng)));
        op.w_v.push_back(reg(hp + "w_v", detail::kaiming_uniform<S>(st.dim, st.head_dim, rng)));
        op.alpha.push_back(reg(hp + "alpha", Tensor<S>::scalar(S(1))));
        op.beta.push_back(reg(hp + "beta", Tensor<S>::scalar(S(0))));
      }
      op.w_f = reg(bp + "op.w_f", detail::kaiming_uniform<S>(st.head_dim, st.head_dim, rng));
      op.b_f = reg(bp + "op.b_f", Tensor<S>::zeros({st.head_dim}));
      op.w_o = reg(bp + "op.w_o", detail::kaiming_uniform<S>(st.heads * st.head_dim, st.dim, rng));
      blk.norm2_gamma = reg(bp + "norm2.gamma", Tensor<S>::full({st.dim}, S(1)));
      blk.norm2_beta = reg(bp + "norm2.beta", Tensor<S>::zeros({st.dim}));
      const int hidden = st.mlp_ratio * st.dim;
      blk.mlp_w1 = reg(bp + "mlp.w1", detail::kaiming_uniform<S>(st.dim, hidden, rng));
      blk.mlp_b1 = reg(bp + "mlp.b1", Tensor<S>::zeros({hidden}));
      blk.mlp_w2 = reg(bp + "mlp.w2", detail::kaiming_uniform<S>(hidden, st.dim, rng));
      blk.mlp_b2 = reg(bp + "mlp.b2", Tensor<S>::zeros({st.dim}));
      blocks.push_back(std::move(blk));
    }
    m.stages.push_back(std::move(blocks));
    d_in = st.dim;
  }
  m.final_gamma = reg("final_norm.gamma", Tensor<S>::full({d_in}, S(1)));
  m.final_beta = reg("final_norm.beta", Tensor<S>::zeros({d_in}));
  m.head_w = reg("head.w", detail::kaiming_uniform<S>(d_in, cfg.num_classes, rng));
  m.head_b = reg("head.b", Tensor<S>::zeros({cfg.num_classes}));
  return m;
}

// Fresh storages with identical values; used for per-worker training replicas.
template <class S>
Model<S> clone_model(const Model<S>& src) {
  Model<S> m = build_model<S>(src.cfg, 0);
  for (std::size_t i = 0; i < m.registry.size(); ++i)
    m.registry[i].second.values() = src.registry[i].second.values();
  return m;
}

template <class S>
void copy_parameters(Model<S>& dst, const Model<S>& src) {
  if (dst.registry.size() != src.registry.size()) throw contract_error("copy_parameters: registry mismatch");
  for (std::size_t i = 0; i < dst.registry.size(); ++i)
    dst.registry[i].second.values() = src.registry[i].second.values();
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// One image, row-major h x w x 3 in [0,1]; returns 1 x num_classes logits.
template <class S>
Tensor<S> forward_one(const Model<S>& m, const float* image, Instrumentation* hook = nullptr) {
  const int h = m.cfg.input_h, w = m.cfg.input_w;
  std::vector<float> buf(image, image + static_cast<std::size_t>(h) * w * 3);
  if (m.cfg.standardize_input) {
    for (int ch = 0; ch < 3; ++ch) {
      double mu = 0;
      for (int p = 0; p < h * w; ++p) mu += buf[static_cast<std::size_t>(p) * 3 + ch];
      mu /= h * w;
      double var = 0;
      for (int p = 0; p < h * w; ++p) {
        const double dv = buf[static_cast<std::size_t>(p) * 3 + ch] - mu;
        var += dv * dv;
      }
      const double sd = std::sqrt(var / (h * w) + 1e-6);
      for (int p = 0; p < h * w; ++p)
        buf[static_cast<std::size_t>(p) * 3 + ch] = static_cast<float>((buf[static_cast<std::size_t>(p) * 3 + ch] - mu) / sd);
    }
  }
  PointSet<S> ps = image_to_points<S>(buf, h, w);
  if (m.cfg.ablation.no_position)
    for (int p = 0; p < ps.n(); ++p) ps.features.at(p, 3) = ps.features.at(p, 4) = S(0);

  for (int s = 0; s < 4; ++s) {
    const auto& red = m.reducers[static_cast<std::size_t>(s)];
    ps = reduce_points(ps, red.k, red.downsample_r, red.w, red.gamma, red.beta);
    int b = 0;
    for (const auto& blk : m.stages[static_cast<std::size_t>(s)]) ps = coc_block(ps, blk, hook, s, b++);
  }
  Tensor<S> f = group_norm(ps.features, 1, m.final_gamma, m.final_beta);
  Tensor<S> pooled = mean(f, 0);
  return add_rowvec(matmul(reshape(pooled, {1, pooled.dim(0)}), m.head_w), m.head_b);
}

// Batch forward (inference); images packed contiguously.
template <class S>
Tensor<S> forward_batch(const Model<S>& m, const float* images, int batch) {
  std::vector<Tensor<S>> rows;
  const std::size_t stride = static_cast<std::size_t>(m.cfg.input_h) * m.cfg.input_w * 3;
  rows.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) rows.push_back(forward_one(m, images + stride * static_cast<std::size_t>(i)));
  return concat(rows, 0);
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

template <class S>
long long count_parameters(const Model<S>& m) {
  long long total = 0;
  for (const auto& [name, t] : m.registry) total += t.size();
  return total;
}

// Parameters excluding the classification head; this is the scope the
// reference parameter tables use.
template <class S>
long long count_parameters_backbone(const Model<S>& m) {
  long long total = 0;
  for (const auto& [name, t] : m.registry)
    if (name.rfind("head.", 0) != 0) total += t.size();
  return total;
}

struct MacReport {
  unsigned long long matmul = 0;
  unsigned long long similarity = 0;
  unsigned long long total() const { return matmul + similarity; }
};

// Multiply-accumulates of one instrumented forward (linear projections plus
// similarity dot products; normalization and pooling are not MACs).
template <class S>
MacReport count_macs(const Model<S>& m, unsigned seed = 1) {
  std::mt19937 rng(seed);
  std::vector<float> img(static_cast<std::size_t>(m.cfg.input_h) * m.cfg.input_w * 3);
  for (auto& v : img) v = static_cast<float>(rng_uniform01(rng));
  mac_counters().reset();
  forward_one(m, img.data());
  MacReport r{mac_counters().matmul, mac_counters().similarity};
  mac_counters().reset();
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "COC1", version, tensor count, then per tensor
// name length + name, rank, dims, raw little-endian f32 data.
// ---------------------------------------------------------------------------

namespace detail {
inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw checkpoint_error("checkpoint truncated");
  return v;
}
}  // namespace detail

template <class S>
void save_checkpoint(const Model<S>& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw checkpoint_error("cannot open for write: " + path);
  os.write("COC1", 4);
  detail::write_u32(os, 1);
  detail::write_u32(os, static_cast<std::uint32_t>(m.registry.size()));
  for (const auto& [name, t] : m.registry) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(d));
    for (std::int64_t i = 0; i < t.size(); ++i) {
      const float v = static_cast<float>(t.data()[i]);
      os.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
  if (!os) throw checkpoint_error("write failed: " + path);
}

template <class S>
void load_checkpoint(Model<S>& m, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw checkpoint_error("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "COC1", 4) != 0) throw checkpoint_error("bad checkpoint magic");
  if (detail::read_u32(is) != 1) throw checkpoint_error("unsupported checkpoint version");
  const std::uint32_t count = detail::read_u32(is);
  if (count != m.registry.size())
    throw checkpoint_error("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                           std::to_string(m.registry.size()));
  for (std::uint32_t ti = 0; ti < count; ++ti) {
    const std::uint32_t nl = detail::read_u32(is);
    std::string name(nl, '\0');
    is.read(name.data(), nl);
    auto& [ename, t] = m.registry[ti];
    if (name != ename)
      throw checkpoint_error("tensor name mismatch: checkpoint has '" + name + "', model expects '" + ename + "'");
    const std::uint32_t rank = detail::read_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_u32(is));
    if (shape != t.shape())
      throw checkpoint_error("shape mismatch for tensor '" + name + "': checkpoint " + shape_str(shape) +
                             " vs model " + shape_str(t.shape()));
    for (std::int64_t i = 0; i < t.size(); ++i) {
      float v;
      is.read(reinterpret_cast<char*>(&v), 4);
      if (!is) throw checkpoint_error("checkpoint truncated in tensor '" + name + "'");
      t.data()[i] = static_cast<S>(v);
    }
  }
}

// ---------------------------------------------------------------------------
// Flat key-value config files; values override the base config field-by-field.
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw format_error("cannot open config: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw format_error("config line missing '=': " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline void apply_config(ModelConfig& cfg, const std::map<std::string, std::string>& kv) {
  auto as_int = [](const std::string& k, const std::string& v) {
    try {
      return std::stoi(v);
    } catch (...) {
      throw format_error("config key '" + k + "': not an integer: " + v);
    }
  };
  for (const auto& [k, v] : kv) {
    const int iv = as_int(k, v);
    if (k == "num_classes") cfg.num_classes = iv;
    else if (k == "input_h") cfg.input_h = iv;
    else if (k == "input_w") cfg.input_w = iv;
    else if (k == "standardize_input") cfg.standardize_input = iv != 0;
    else if (k == "center_update_iters") cfg.ablation.center_update_iters = iv;
    else if (k == "ablate.no_position") cfg.ablation.no_position = iv != 0;
    else if (k == "ablate.no_cluster_op") cfg.ablation.no_cluster_op = iv != 0;
    else if (k == "ablate.single_head") cfg.ablation.single_head = iv != 0;
    else if (k == "ablate.no_partition") cfg.ablation.no_partition = iv != 0;
    else if (k.rfind("stage", 0) == 0 && k.size() > 6 && k[6] == '.') {
      const int s = k[5] - '1';
      if (s < 0 || s > 3) throw format_error("config key '" + k + "': stage must be 1..4");
      StageConfig& st = cfg.stages[static_cast<std::size_t>(s)];
      const std::string f = k.substr(7);
      if (f == "k_neighbors") st.k_neighbors = iv;
      else if (f == "downsample_r") st.downsample_r = iv;
      else if (f == "dim") st.dim = iv;
      else if (f == "regions") st.regions = iv;
      else if (f == "local_centers") st.local_centers = iv;
      else if (f == "heads") st.heads = iv;
      else if (f == "head_dim") st.head_dim = iv;
      else if (f == "mlp_ratio") st.mlp_ratio = iv;
      else if (f == "depth") st.depth = iv;
      else throw format_error("unknown stage field in config: " + k);
    } else {
      throw format_error("unknown config key: " + k);
    }
  }
}

}  // namespace coc
