// The context cluster operation: center proposal, cosine similarity, hard
// assignment, similarity-weighted aggregation, dispatch back to the points,
// multi-head fusion, and the full block (op + MLP with pre-norms).
#pragma once

#include <array>
#include <limits>
#include <utility>
#include <vector>

#include "coc/points.hpp"
#include "coc/tensor.hpp"

namespace coc {

template <class S>
struct SimilarityMatrix {
  Tensor<S> values;  // c x n, cosine range [-1, 1]
};

struct ClusterAssignment {
  std::vector<int> center_index;  // per point, in [0, c)
  std::vector<int> cluster_sizes; // per center; clusters may be empty
};

// All learnable state of one context-cluster operation. W_s/W_v and the
// scalars are per head; W_f (applied inside each head's dispatch) and the
// multi-head fuse W_o are shared.
template <class S>
struct CocOpParams {
  int heads = 1;
  int head_dim = 0;
  int local_centers = 1;
  int center_neighbors = 0;   // used by the FPS center path
  int center_update_iters = 0;
  std::vector<Tensor<S>> w_s;     // per head: d x d'
  std::vector<Tensor<S>> w_v;     // per head: d x d'
  std::vector<Tensor<S>> alpha;   // per head scalar
  std::vector<Tensor<S>> beta;    // per head scalar
  Tensor<S> w_f;                  // d' x d'
  Tensor<S> b_f;                  // d'
  Tensor<S> w_o;                  // (heads*head_dim) x d
};

// ---------------------------------------------------------------------------
// Center proposal
// ---------------------------------------------------------------------------

struct CenterBlocks {
  std::vector<int> block_of_point;  // per point, in [0, c)
  std::vector<int> block_sizes;
  int c = 0;
};

// Uniform sqrt(c) x sqrt(c) tiling of the grid; non-divisible sides split
// ceiling-first (7 into 2 -> 4+3).
inline CenterBlocks center_blocks(const GridMeta& grid, int c) {
  const int side = isqrt_exact(c, "propose_centers");
  if (grid.height < side || grid.width < side)
    throw config_error("propose_centers: grid " + std::to_string(grid.height) + "x" +
                       std::to_string(grid.width) + " too small for " + std::to_string(c) + " centers");
  auto band = [side](int extent, int pos) {
    const int base = extent / side, rem = extent % side;
    // first `rem` bands have size base+1
    const int cut = rem * (base + 1);
    return pos < cut ? pos / (base + 1) : rem + (pos - cut) / base;
  };
  CenterBlocks out;
  out.c = c;
  out.block_of_point.resize(static_cast<std::size_t>(grid.points()));
  out.block_sizes.assign(static_cast<std::size_t>(c), 0);
  for (int i = 0; i < grid.height; ++i)
    for (int j = 0; j < grid.width; ++j) {
      const int b = band(grid.height, i) * side + band(grid.width, j);
      out.block_of_point[static_cast<std::size_t>(i) * grid.width + j] = b;
      out.block_sizes[static_cast<std::size_t>(b)]++;
    }
  return out;
}

// Centers on a uniform grid; each center's feature is the mean of the points
// in its block (block average pooling).
template <class S>
Tensor<S> propose_centers(const Tensor<S>& features, const GridMeta& grid, int c) {
  if (features.rows() != grid.points())
    throw shape_error("propose_centers: features/grid mismatch");
  CenterBlocks blocks = center_blocks(grid, c);
  return mean_rows_by_group(features, blocks.block_of_point, c);
}

struct FpsResult {
  std::vector<int> chosen;  // indices of the c sampled points
};

// Farthest point sampling on explicit positions (for discrete / masked /
// irregular point sets). First pick is seed % n; ties go to the lowest index.
inline FpsResult farthest_point_sampling(const std::vector<std::pair<float, float>>& positions,
                                         int c, unsigned seed = 0) {
  const int n = static_cast<int>(positions.size());
  if (n < c) throw error("farthest_point_sampling: fewer points than centers");
  FpsResult out;
  out.chosen.reserve(static_cast<std::size_t>(c));
  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  int cur = static_cast<int>(seed % static_cast<unsigned>(n));
  for (int pick = 0; pick < c; ++pick) {
    out.chosen.push_back(cur);
    double best = -1.0;
    int next = 0;
    for (int i = 0; i < n; ++i) {
      const double dx = positions[static_cast<std::size_t>(i)].first - positions[static_cast<std::size_t>(cur)].first;
      const double dy = positions[static_cast<std::size_t>(i)].second - positions[static_cast<std::size_t>(cur)].second;
      dist[static_cast<std::size_t>(i)] = std::min(dist[static_cast<std::size_t>(i)], dx * dx + dy * dy);
      if (dist[static_cast<std::size_t>(i)] > best) {
        best = dist[static_cast<std::size_t>(i)];
        next = i;
      }
    }
    cur = next;
  }
  return out;
}

// FPS center proposal: sample c points by position, each center's feature is
// the mean of its k nearest points (Euclidean on positions, ties by index).
template <class S>
std::pair<Tensor<S>, FpsResult> propose_centers_fps(const Tensor<S>& features,
                                                    const std::vector<std::pair<float, float>>& positions,
                                                    int c, int k, unsigned seed = 0) {
  const int n = features.rows();
  if (static_cast<int>(positions.size()) != n)
    throw shape_error("propose_centers_fps: positions/features mismatch");
  if (n < c) throw error("propose_centers_fps: fewer points than centers");
  k = std::min(k, n);
  FpsResult fps = farthest_point_sampling(positions, c, seed);
  std::vector<Tensor<S>> rows;
  for (int ci = 0; ci < c; ++ci) {
    const auto& p = positions[static_cast<std::size_t>(fps.chosen[static_cast<std::size_t>(ci)])];
    std::vector<std::pair<double, int>> by_dist;
    by_dist.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double dx = positions[static_cast<std::size_t>(i)].first - p.first;
      const double dy = positions[static_cast<std::size_t>(i)].second - p.second;
      by_dist.emplace_back(dx * dx + dy * dy, i);
    }
    std::sort(by_dist.begin(), by_dist.end());
    std::vector<int> knn;
    for (int i = 0; i < k; ++i) knn.push_back(by_dist[static_cast<std::size_t>(i)].second);
    Tensor<S> gathered = gather_rows(features, knn);
    rows.push_back(reshape(mean(gathered, 0), {1, features.cols()}));
  }
  return {concat(rows, 0), fps};
}

// ---------------------------------------------------------------------------
// Similarity and assignment
// ---------------------------------------------------------------------------

// S[j,i] = <center_j, p_i> / (max(|center_j|, eps) * max(|p_i|, eps)),
// clamped to [-1,1] against rounding (gradient passes through the clamp).
template <class S>
SimilarityMatrix<S> cosine_similarity(const Tensor<S>& points, const Tensor<S>& centers,
                                      S eps = static_cast<S>(1e-6)) {
  detail::require_rank2(points, "cosine_similarity");
  detail::require_rank2(centers, "cosine_similarity");
  if (points.cols() != centers.cols())
    throw shape_error("cosine_similarity: dimension mismatch " + shape_str(points.shape()) + " vs " + shape_str(centers.shape()));
  const int n = points.rows(), c = centers.rows(), d = points.cols();

  std::vector<S> pn(static_cast<std::size_t>(n)), cn(static_cast<std::size_t>(c));
  for (int i = 0; i < n; ++i) {
    S acc = 0;
    for (int j = 0; j < d; ++j) acc += points.at(i, j) * points.at(i, j);
    pn[static_cast<std::size_t>(i)] = std::max(std::sqrt(acc), eps);
  }
  for (int i = 0; i < c; ++i) {
    S acc = 0;
    for (int j = 0; j < d; ++j) acc += centers.at(i, j) * centers.at(i, j);
    cn[static_cast<std::size_t>(i)] = std::max(std::sqrt(acc), eps);
  }
  Tensor<S> out = Tensor<S>::zeros({c, n});
  std::vector<S> raw(static_cast<std::size_t>(c) * n);  // unclamped values, saved for backward
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < n; ++i) {
      S dot = 0;
      for (int l = 0; l < d; ++l) dot += centers.at(j, l) * points.at(i, l);
      const S s = dot / (cn[static_cast<std::size_t>(j)] * pn[static_cast<std::size_t>(i)]);
      raw[static_cast<std::size_t>(j) * n + i] = s;
      out.at(j, i) = std::clamp(s, S(-1), S(1));
    }
  mac_counters().similarity += static_cast<unsigned long long>(c) * n * d;

  bool gp = detail::wants_grad(points), gc = detail::wants_grad(centers);
  auto sp = points.storage(), sc = centers.storage(), so = out.storage();
  detail::record_op<S>("cosine_similarity", {&points, &centers}, out,
                       [sp, sc, so, gp, gc, pn, cn, raw, n, c, d, eps] {
    if (so->grad.empty()) return;
    if (gp) sp->ensure_grad();
    if (gc) sc->ensure_grad();
    for (int j = 0; j < c; ++j) {
      const S a = cn[static_cast<std::size_t>(j)];
      const bool a_free = a > eps;  // below eps the norm is a constant
      for (int i = 0; i < n; ++i) {
        const S dy = so->grad[static_cast<std::size_t>(j) * n + i];
        if (dy == S(0)) continue;
        const S b = pn[static_cast<std::size_t>(i)];
        const bool b_free = b > eps;
        const S s = raw[static_cast<std::size_t>(j) * n + i];
        const S inv = S(1) / (a * b);
        for (int l = 0; l < d; ++l) {
          const S pv = sp->data[static_cast<std::size_t>(i) * d + l];
          const S cv = sc->data[static_cast<std::size_t>(j) * d + l];
          if (gp) sp->grad[static_cast<std::size_t>(i) * d + l] += dy * (cv * inv - (b_free ? s * pv / (b * b) : S(0)));
          if (gc) sc->grad[static_cast<std::size_t>(j) * d + l] += dy * (pv * inv - (a_free ? s * cv / (a * a) : S(0)));
        }
      }
    }
  });
  return SimilarityMatrix<S>{std::move(out)};
}

// Hard non-overlapping assignment: each point goes to its most similar
// center, ties to the lowest center index.
template <class S>
ClusterAssignment assign_clusters(const SimilarityMatrix<S>& sim) {
  const int c = sim.values.rows(), n = sim.values.cols();
  if (c < 1) throw error("assign_clusters: need at least one center");
  ClusterAssignment out;
  out.center_index.resize(static_cast<std::size_t>(n));
  out.cluster_sizes.assign(static_cast<std::size_t>(c), 0);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    S bv = sim.values.at(0, i);
    for (int j = 1; j < c; ++j)
      if (sim.values.at(j, i) > bv) {
        bv = sim.values.at(j, i);
        best = j;
      }
    out.center_index[static_cast<std::size_t>(i)] = best;
    out.cluster_sizes[static_cast<std::size_t>(best)]++;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation (Eq. 1) and dispatch (Eq. 2), per cluster / per point
// ---------------------------------------------------------------------------

// g = (v_c + sum_i sig(alpha*s_i + beta) * v_i) / (1 + sum_i sig(alpha*s_i + beta)).
// m = 0 is valid and yields g = v_c exactly.
template <class S>
Tensor<S> aggregate(const Tensor<S>& cluster_values, const Tensor<S>& value_center,
                    const Tensor<S>& sims, const Tensor<S>& alpha, const Tensor<S>& beta) {
  if (value_center.rank() != 1) throw shape_error("aggregate: value center must be rank-1");
  const int m = cluster_values.rows();
  if (m == 0) return value_center;
  if (sims.size() != m) throw shape_error("aggregate: similarity count != cluster size");
  Tensor<S> w = sigmoid(add(mul(sims, alpha), beta));
  Tensor<S> weighted = sum(mul_colvec(cluster_values, w), 0);   // d'
  Tensor<S> numer = add(weighted, value_center);
  Tensor<S> denom = add(sum_all(w), Tensor<S>::scalar(S(1)));
  return div(numer, denom);
}

// p' = p + W_f(sig(alpha*s + beta) * g) + b_f. The same scalars treat the
// similarity as in aggregation.
template <class S>
Tensor<S> dispatch(const Tensor<S>& point, const Tensor<S>& aggregated, const Tensor<S>& sim,
                   const Tensor<S>& alpha, const Tensor<S>& beta,
                   const Tensor<S>& w_f, const Tensor<S>& b_f) {
  if (point.rank() != 1 || aggregated.rank() != 1) throw shape_error("dispatch: expects rank-1 point and aggregate");
  Tensor<S> w = sigmoid(add(mul(sim, alpha), beta));
  Tensor<S> scaled = mul(aggregated, w);
  Tensor<S> fc = add_rowvec(matmul(reshape(scaled, {1, scaled.dim(0)}), w_f), b_f);
  return add(point, reshape(fc, {point.dim(0)}));
}

// Iterative center refinement (k-means style): each center moves to the mean
// of its assigned rows (empty clusters keep their previous value), then
// points are re-assigned. iters = 0 is the fixed-center default.
template <class S>
struct CenterUpdateResult {
  Tensor<S> centers;
  ClusterAssignment assignment;
  SimilarityMatrix<S> similarity;
};

template <class S>
CenterUpdateResult<S> update_centers(const Tensor<S>& p_sim, ClusterAssignment assignment,
                                     Tensor<S> centers, int iters, S eps = static_cast<S>(1e-6)) {
  SimilarityMatrix<S> sim = cosine_similarity(p_sim, centers, eps);
  for (int it = 0; it < iters; ++it) {
    centers = mean_rows_by_group(p_sim, assignment.center_index,
                                 static_cast<int>(assignment.cluster_sizes.size()), &centers);
    sim = cosine_similarity(p_sim, centers, eps);
    assignment = assign_clusters(sim);
  }
  return {std::move(centers), std::move(assignment), std::move(sim)};
}

// ---------------------------------------------------------------------------
// Full context cluster operation
// ---------------------------------------------------------------------------

// One record per executed (op, head): assignments across all regions plus
// similarity statistics, in execution order.
struct ClusterRecord {
  int stage = -1, block = -1, head = -1;
  GridMeta stage_grid;             // grid of the full point set at this op
  int tiles_y = 1, tiles_x = 1;    // region layout
  GridMeta tile_grid;
  int local_centers = 0;
  std::vector<int> assignment;       // per parent point: cluster index within its region
  std::vector<int> region_of_point;  // per parent point
  std::vector<int> cluster_sizes;    // tiles * local_centers entries
  double sim_min = 0, sim_max = 0, sim_mean = 0;
  long long sim_count = 0;
};

struct OpCallStats {
  int stage = -1, block = -1;
  unsigned long long matmul_macs = 0;
  unsigned long long similarity_macs = 0;
};

struct Instrumentation {
  std::vector<ClusterRecord> records;
  std::vector<OpCallStats> op_calls;
};

namespace detail {

// Vectorized Eq.1/Eq.2 over one region and one head. Mathematically equal to
// running aggregate() per cluster and dispatch() per point: the assignment
// mask zeroes every non-member weight, so row j of `summed` is the masked
// weighted sum and the denominator row is 1 + the masked weight sum.
template <class S>
Tensor<S> cluster_head_forward(const Tensor<S>& p_sim, const Tensor<S>& p_val,
                               const GridMeta& grid, const CocOpParams<S>& params, int head,
                               ClusterAssignment* out_assign, SimilarityMatrix<S>* out_sim) {
  const int n = p_sim.rows();
  const int c = params.local_centers;
  Tensor<S> centers_s = propose_centers(p_sim, grid, c);
  Tensor<S> centers_v = propose_centers(p_val, grid, c);

  SimilarityMatrix<S> sim = cosine_similarity(p_sim, centers_s, S(1e-6));
  ClusterAssignment assign = assign_clusters(sim);
  if (params.center_update_iters > 0) {
    auto upd = update_centers(p_sim, std::move(assign), std::move(centers_s), params.center_update_iters);
    sim = std::move(upd.similarity);
    assign = std::move(upd.assignment);
  }

  // sig(alpha*S + beta), masked down to assigned entries only
  Tensor<S> w_full = sigmoid(add(mul(sim.values, params.alpha[static_cast<std::size_t>(head)]),
                                 params.beta[static_cast<std::size_t>(head)]));
  Tensor<S> mask = Tensor<S>::zeros({c, n});
  for (int i = 0; i < n; ++i) mask.at(assign.center_index[static_cast<std::size_t>(i)], i) = S(1);
  Tensor<S> w = mul(w_full, mask);

  // Eq. 1 for every cluster at once
  Tensor<S> summed = matmul(w, p_val);                                   // c x d'
  Tensor<S> numer = add(summed, centers_v);
  Tensor<S> denom = add(sum(w, 1), Tensor<S>::full({c}, S(1)));          // c
  Tensor<S> agg = div_colvec(numer, denom);

  // Eq. 2 for every point at once
  Tensor<S> g_per_point = gather_rows(agg, assign.center_index);         // n x d'
  Tensor<S> w_sel = take_per_row(transpose(w), assign.center_index);     // n
  Tensor<S> scaled = mul_colvec(g_per_point, w_sel);
  Tensor<S> fc = add_rowvec(matmul(scaled, params.w_f), params.b_f);
  Tensor<S> out = add(p_val, fc);

  if (out_assign) *out_assign = std::move(assign);
  if (out_sim) *out_sim = std::move(sim);
  return out;
}

}  // namespace detail

// Applies the context cluster operation to one tile: per head, project to
// similarity/value space, cluster, aggregate, dispatch; heads concatenate.
// The multi-head fuse (w_o) is applied by the caller after regions merge.
template <class S>
Tensor<S> cluster_tile_forward(const PointSet<S>& tile, const CocOpParams<S>& params,
                               std::vector<ClusterAssignment>* head_assignments = nullptr,
                               std::vector<SimilarityMatrix<S>>* head_sims = nullptr) {
  std::vector<Tensor<S>> head_outs;
  head_outs.reserve(static_cast<std::size_t>(params.heads));
  for (int h = 0; h < params.heads; ++h) {
    Tensor<S> p_sim = matmul(tile.features, params.w_s[static_cast<std::size_t>(h)]);
    Tensor<S> p_val = matmul(tile.features, params.w_v[static_cast<std::size_t>(h)]);
    ClusterAssignment assign;
    SimilarityMatrix<S> sim;
    head_outs.push_back(detail::cluster_head_forward(p_sim, p_val, tile.grid, params, h, &assign, &sim));
    if (head_assignments) head_assignments->push_back(std::move(assign));
    if (head_sims) head_sims->push_back(std::move(sim));
  }
  return params.heads == 1 ? head_outs[0] : concat(head_outs, 1);
}

// The full operation over a point set: partition into regions, run every
// (region, head), fuse the concatenated heads with w_o, merge regions.
template <class S>
PointSet<S> context_cluster_op(const PointSet<S>& ps, const CocOpParams<S>& params, int regions,
                               Instrumentation* hook = nullptr, int stage = -1, int block = -1) {
  ps.check();
  const auto mac0 = mac_counters();

  std::vector<ClusterRecord> recs;
  if (hook) {
    recs.resize(static_cast<std::size_t>(params.heads));
    for (int h = 0; h < params.heads; ++h) {
      auto& r = recs[static_cast<std::size_t>(h)];
      r.stage = stage;
      r.block = block;
      r.head = h;
      r.stage_grid = ps.grid;
      r.local_centers = params.local_centers;
      r.assignment.assign(static_cast<std::size_t>(ps.n()), 0);
      r.region_of_point.assign(static_cast<std::size_t>(ps.n()), 0);
      r.sim_min = std::numeric_limits<double>::infinity();
      r.sim_max = -std::numeric_limits<double>::infinity();
    }
  }

  auto note_head = [&](int h, int region, const std::vector<int>& parent_rows,
                       const GridMeta& tile_grid, int tiles_y, int tiles_x,
                       const ClusterAssignment& assign, const SimilarityMatrix<S>& sim) {
    if (!hook) return;
    auto& r = recs[static_cast<std::size_t>(h)];
    r.tiles_y = tiles_y;
    r.tiles_x = tiles_x;
    r.tile_grid = tile_grid;
    for (std::size_t i = 0; i < parent_rows.size(); ++i) {
      r.assignment[static_cast<std::size_t>(parent_rows[i])] = assign.center_index[i];
      r.region_of_point[static_cast<std::size_t>(parent_rows[i])] = region;
    }
    r.cluster_sizes.insert(r.cluster_sizes.end(), assign.cluster_sizes.begin(), assign.cluster_sizes.end());
    for (std::int64_t i = 0; i < sim.values.size(); ++i) {
      const double v = static_cast<double>(sim.values.data()[i]);
      r.sim_min = std::min(r.sim_min, v);
      r.sim_max = std::max(r.sim_max, v);
      r.sim_mean += v;
    }
    r.sim_count += sim.values.size();
  };

  Tensor<S> mixed;  // n x heads*head_dim, parent row order
  if (regions == 1) {
    std::vector<ClusterAssignment> assigns;
    std::vector<SimilarityMatrix<S>> sims;
    mixed = cluster_tile_forward(ps, params, hook ? &assigns : nullptr, hook ? &sims : nullptr);
    if (hook) {
      std::vector<int> ident(static_cast<std::size_t>(ps.n()));
      std::iota(ident.begin(), ident.end(), 0);
      for (int h = 0; h < params.heads; ++h)
        note_head(h, 0, ident, ps.grid, 1, 1, assigns[static_cast<std::size_t>(h)], sims[static_cast<std::size_t>(h)]);
    }
  } else {
    RegionView<S> rv = partition_regions(ps, regions);
    std::vector<Tensor<S>> tile_outs;
    std::vector<int> all_rows;
    all_rows.reserve(static_cast<std::size_t>(ps.n()));
    for (std::size_t t = 0; t < rv.tiles.size(); ++t) {
      std::vector<ClusterAssignment> assigns;
      std::vector<SimilarityMatrix<S>> sims;
      tile_outs.push_back(cluster_tile_forward(rv.tiles[t], params,
                                               hook ? &assigns : nullptr, hook ? &sims : nullptr));
      if (hook)
        for (int h = 0; h < params.heads; ++h)
          note_head(h, static_cast<int>(t), rv.parent_rows[t], rv.tiles[t].grid,
                    rv.tiles_y, rv.tiles_x, assigns[static_cast<std::size_t>(h)], sims[static_cast<std::size_t>(h)]);
      all_rows.insert(all_rows.end(), rv.parent_rows[t].begin(), rv.parent_rows[t].end());
    }
    mixed = scatter_rows(concat(tile_outs, 0), all_rows, ps.n());
  }

  Tensor<S> fused = matmul(mixed, params.w_o);

  if (hook) {
    for (auto& r : recs) {
      if (r.sim_count > 0) r.sim_mean /= static_cast<double>(r.sim_count);
      hook->records.push_back(std::move(r));
    }
    const auto mac1 = mac_counters();
    hook->op_calls.push_back(OpCallStats{stage, block, mac1.matmul - mac0.matmul,
                                         mac1.similarity - mac0.similarity});
  }
  return PointSet<S>{std::move(fused), ps.grid, ps.channel_note};
}

// ---------------------------------------------------------------------------
// Block: pre-norm cluster op + pre-norm MLP, both residual
// ---------------------------------------------------------------------------

template <class S>
struct BlockParams {
  Tensor<S> norm1_gamma, norm1_beta;
  CocOpParams<S> op;
  Tensor<S> norm2_gamma, norm2_beta;
  Tensor<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  int regions = 1;
  bool no_cluster_op = false;
};

template <class S>
PointSet<S> coc_block(const PointSet<S>& ps, const BlockParams<S>& bp,
                      Instrumentation* hook = nullptr, int stage = -1, int block = -1) {
  PointSet<S> x = ps;
  if (!bp.no_cluster_op) {
    PointSet<S> normed{group_norm(x.features, 1, bp.norm1_gamma, bp.norm1_beta), x.grid, x.channel_note};
    PointSet<S> mixed = context_cluster_op(normed, bp.op, bp.regions, hook, stage, block);
    x.features = add(x.features, mixed.features);
  }
  Tensor<S> y = group_norm(x.features, 1, bp.norm2_gamma, bp.norm2_beta);
  y = add_rowvec(matmul(y, bp.mlp_w1), bp.mlp_b1);
  y = gelu(y);
  y = add_rowvec(matmul(y, bp.mlp_w2), bp.mlp_b2);
  x.features = add(x.features, y);
  return x;
}

}  // namespace coc
