// Image -> point set conversion, anchor proposal, point reduction, and
// region partition. Everything here moves points around; no feature mixing
// across clusters happens in this header.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "coc/tensor.hpp"

namespace coc {

struct GridMeta {
  int height = 0;
  int width = 0;
  int points() const { return height * width; }
  bool operator==(const GridMeta&) const = default;
};

// n points x d channels. The math treats points as unordered; the grid
// records their spatial arrangement for anchor/center proposal.
template <class S>
struct PointSet {
  Tensor<S> features;  // n x d
  GridMeta grid;
  std::string channel_note;

  int n() const { return features.rows(); }
  int d() const { return features.cols(); }
  void check() const {
    if (features.rank() != 2 || grid.points() != n())
      throw contract_error("PointSet: grid " + std::to_string(grid.height) + "x" +
                           std::to_string(grid.width) + " does not match " +
                           std::to_string(n()) + " points");
  }
};

// r rectangular tiles plus the row mapping back into the parent.
template <class S>
struct RegionView {
  std::vector<PointSet<S>> tiles;
  std::vector<std::vector<int>> parent_rows;  // per tile, parent row of each tile row
  GridMeta parent_grid;
  int tiles_y = 0, tiles_x = 0;
};

inline int isqrt_exact(int v, const char* who) {
  int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(v))));
  if (r * r != v) throw config_error(std::string(who) + ": " + std::to_string(v) + " is not a perfect square");
  return r;
}

// Pixels in [0,1], row-major h x w x 3. Output channels: 3 color followed by
// the two normalized coordinates (row/h - 0.5, col/w - 0.5).
template <class S>
PointSet<S> image_to_points(const std::vector<float>& image, int h, int w, int channels = 3) {
  if (channels != 3) throw format_error("image_to_points: expected 3 channels, got " + std::to_string(channels));
  if (h < 1 || w < 1) throw format_error("image_to_points: degenerate image size");
  if (static_cast<std::int64_t>(image.size()) != static_cast<std::int64_t>(h) * w * 3)
    throw format_error("image_to_points: buffer size does not match " + std::to_string(h) + "x" + std::to_string(w) + "x3");
  Tensor<S> f = Tensor<S>::zeros({h * w, 5});
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const int p = r * w + c;
      for (int ch = 0; ch < 3; ++ch)
        f.at(p, ch) = static_cast<S>(image[static_cast<std::size_t>(p) * 3 + ch]);
      f.at(p, 3) = static_cast<S>(r) / static_cast<S>(h) - static_cast<S>(0.5);
      f.at(p, 4) = static_cast<S>(c) / static_cast<S>(w) - static_cast<S>(0.5);
    }
  return PointSet<S>{std::move(f), GridMeta{h, w}, "3 color + 2 coordinate channels"};
}

struct AnchorGrid {
  GridMeta grid;                              // anchors arranged as a sub-grid
  std::vector<std::pair<float, float>> positions;  // block-center (row, col) in parent pixels
};

// Uniform sub-grid of anchors, one at the center of each non-overlapping
// sqrt(r) x sqrt(r) block.
inline AnchorGrid propose_anchors(const GridMeta& grid, int downsample_r) {
  if (downsample_r != 4 && downsample_r != 16)
    throw config_error("propose_anchors: downsample_r must be 4 or 16, got " + std::to_string(downsample_r));
  const int side = isqrt_exact(downsample_r, "propose_anchors");
  if (grid.height % side != 0 || grid.width % side != 0)
    throw config_error("propose_anchors: grid " + std::to_string(grid.height) + "x" + std::to_string(grid.width) +
                       " not divisible by " + std::to_string(side));
  AnchorGrid out;
  out.grid = GridMeta{grid.height / side, grid.width / side};
  out.positions.reserve(static_cast<std::size_t>(out.grid.points()));
  for (int i = 0; i < out.grid.height; ++i)
    for (int j = 0; j < out.grid.width; ++j)
      out.positions.emplace_back(i * side + (side - 1) / 2.0f, j * side + (side - 1) / 2.0f);
  return out;
}

namespace detail {

// Neighborhood row/col offsets for one anchor, row-major, clamped to the
// border for the overlapping 3x3 case.
inline void neighbor_cells(int k, int oi, int oj, const GridMeta& g, std::vector<int>& out) {
  out.clear();
  if (k == 16) {  // non-overlapping 4x4 blocks, stride 4
    for (int di = 0; di < 4; ++di)
      for (int dj = 0; dj < 4; ++dj) out.push_back((oi * 4 + di) * g.width + (oj * 4 + dj));
  } else if (k == 4) {  // non-overlapping 2x2 blocks, stride 2
    for (int di = 0; di < 2; ++di)
      for (int dj = 0; dj < 2; ++dj) out.push_back((oi * 2 + di) * g.width + (oj * 2 + dj));
  } else {  // k == 9: 3x3 neighborhoods, stride 2, replicate at the border
    for (int di = -1; di <= 1; ++di)
      for (int dj = -1; dj <= 1; ++dj) {
        const int r = std::clamp(oi * 2 + di, 0, g.height - 1);
        const int c = std::clamp(oj * 2 + dj, 0, g.width - 1);
        out.push_back(r * g.width + c);
      }
  }
}

}  // namespace detail

// Shrinks n by downsample_r: per anchor, gather its k nearest points in
// fixed row-major order, concatenate channels, fuse with w_reduce, then
// group_norm(groups=1).
template <class S>
PointSet<S> reduce_points(const PointSet<S>& ps, int k_neighbors, int downsample_r,
                          const Tensor<S>& w_reduce, const Tensor<S>& gamma, const Tensor<S>& beta) {
  ps.check();
  const bool valid_combo = (k_neighbors == 16 && downsample_r == 16) ||
                           (k_neighbors == 9 && downsample_r == 4) ||
                           (k_neighbors == 4 && downsample_r == 4);
  if (!valid_combo)
    throw config_error("reduce_points: unsupported k=" + std::to_string(k_neighbors) +
                       " with downsample_r=" + std::to_string(downsample_r));
  const int stride = downsample_r == 16 ? 4 : 2;
  if (ps.grid.height % stride != 0 || ps.grid.width % stride != 0 ||
      ps.grid.height < stride || ps.grid.width < stride)
    throw config_error("reduce_points: grid " + std::to_string(ps.grid.height) + "x" +
                       std::to_string(ps.grid.width) + " too small or not divisible by stride " +
                       std::to_string(stride));
  const int d_in = ps.d();
  if (w_reduce.rank() != 2 || w_reduce.rows() != k_neighbors * d_in)
    throw shape_error("reduce_points: fuse weight expects " + std::to_string(k_neighbors * d_in) +
                      " input channels, got " + shape_str(w_reduce.shape()));
  GridMeta og{ps.grid.height / stride, ps.grid.width / stride};

  // One gather builds the (n_out x k*d_in) neighbor-concat matrix.
  std::vector<int> flat;
  flat.reserve(static_cast<std::size_t>(og.points()) * k_neighbors);
  std::vector<int> cells;
  for (int oi = 0; oi < og.height; ++oi)
    for (int oj = 0; oj < og.width; ++oj) {
      detail::neighbor_cells(k_neighbors, oi, oj, ps.grid, cells);
      flat.insert(flat.end(), cells.begin(), cells.end());
    }
  Tensor<S> gathered = gather_rows(ps.features, flat);              // (n_out*k) x d_in
  Tensor<S> stacked = reshape(gathered, {og.points(), k_neighbors * d_in});
  Tensor<S> fused = matmul(stacked, w_reduce);
  Tensor<S> normed = group_norm(fused, 1, gamma, beta);
  return PointSet<S>{std::move(normed), og, "reduced"};
}

// Splits into `regions` equal rectangular tiles (row-major tile order).
template <class S>
RegionView<S> partition_regions(const PointSet<S>& ps, int regions) {
  ps.check();
  const int side = isqrt_exact(regions, "partition_regions");
  if (ps.grid.height % side != 0 || ps.grid.width % side != 0)
    throw config_error("partition_regions: grid " + std::to_string(ps.grid.height) + "x" +
                       std::to_string(ps.grid.width) + " not divisible into " + std::to_string(regions) + " regions");
  const int th = ps.grid.height / side, tw = ps.grid.width / side;
  RegionView<S> rv;
  rv.parent_grid = ps.grid;
  rv.tiles_y = rv.tiles_x = side;
  for (int ti = 0; ti < side; ++ti)
    for (int tj = 0; tj < side; ++tj) {
      std::vector<int> rows;
      rows.reserve(static_cast<std::size_t>(th) * tw);
      for (int i = 0; i < th; ++i)
        for (int j = 0; j < tw; ++j) rows.push_back((ti * th + i) * ps.grid.width + (tj * tw + j));
      PointSet<S> tile{gather_rows(ps.features, rows), GridMeta{th, tw}, ps.channel_note};
      rv.tiles.push_back(std::move(tile));
      rv.parent_rows.push_back(std::move(rows));
    }
  return rv;
}

// Exact inverse of partition_regions.
template <class S>
PointSet<S> merge_regions(const RegionView<S>& rv) {
  if (rv.tiles.empty() || rv.tiles.size() != rv.parent_rows.size())
    throw contract_error("merge_regions: incomplete region view");
  const int n = rv.parent_grid.points();
  const int d = rv.tiles[0].d();
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  int covered = 0;
  for (const auto& rows : rv.parent_rows)
    for (int r : rows) {
      if (r < 0 || r >= n || seen[static_cast<std::size_t>(r)])
        throw contract_error("merge_regions: mapping is not a bijection on parent rows");
      seen[static_cast<std::size_t>(r)] = 1;
      ++covered;
    }
  if (covered != n) throw contract_error("merge_regions: tiles do not cover the parent");

  std::vector<Tensor<S>> feats;
  std::vector<int> all_rows;
  all_rows.reserve(static_cast<std::size_t>(n));
  for (std::size_t t = 0; t < rv.tiles.size(); ++t) {
    if (rv.tiles[t].d() != d || rv.tiles[t].n() != static_cast<int>(rv.parent_rows[t].size()))
      throw contract_error("merge_regions: tile/mapping mismatch");
    feats.push_back(rv.tiles[t].features);
    all_rows.insert(all_rows.end(), rv.parent_rows[t].begin(), rv.parent_rows[t].end());
  }
  Tensor<S> stacked = concat(feats, 0);
  Tensor<S> merged = scatter_rows(stacked, all_rows, n);
  return PointSet<S>{std::move(merged), rv.parent_grid, rv.tiles[0].channel_note};
}

}  // namespace coc
