#pragma once

#include "gifstream/model.hpp"

namespace gifstream {

constexpr uint32_t kSortKeyDims = 6;  // (x, y, z, pc1, pc2, pc3)
constexpr uint32_t kEmptyCell = 0xffffffffu;

// Per-anchor sort keys, each component min-max normalized to [0, 1].
struct SortKeys {
  size_t count = 0;
  std::vector<float> values;  // count x kSortKeyDims

  std::span<const float> key(size_t i) const {
    return std::span<const float>(values).subspan(i * kSortKeyDims, kSortKeyDims);
  }
};

// Grid placement plus the sparse packing map for time-dependent streams.
struct LayoutMaps {
  uint32_t grid_h = 0;
  uint32_t grid_w = 0;
  std::vector<uint32_t> ti_grid;  // grid_h*grid_w cells, anchor index or kEmptyCell
  std::vector<uint32_t> gf_order;  // present-stream anchors in row-major scan order
  uint32_t gf_h = 0;
  uint32_t gf_w = 0;
};

// ---------------------------------------------------------------------------
// PCA of the time-independent features
// ---------------------------------------------------------------------------
namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric d x d matrix. Vectors are
// returned as rows of `vecs`.
inline void jacobi_eigen(std::vector<double> a, size_t d, std::vector<double>* vals,
                         std::vector<double>* vecs) {
  std::vector<double> v(d * d, 0.0);
  for (size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (size_t p = 0; p < d; ++p)
      for (size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    if (off < 1e-24) break;
    for (size_t p = 0; p < d; ++p) {
      for (size_t q = p + 1; q < d; ++q) {
        double apq = a[p * d + q];
        if (std::fabs(apq) < 1e-300) continue;
        double app = a[p * d + p], aqq = a[q * d + q];
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (size_t i = 0; i < d; ++i) {
          double aip = a[i * d + p], aiq = a[i * d + q];
          a[i * d + p] = c * aip - s * aiq;
          a[i * d + q] = s * aip + c * aiq;
        }
        for (size_t i = 0; i < d; ++i) {
          double api = a[p * d + i], aqi = a[q * d + i];
          a[p * d + i] = c * api - s * aqi;
          a[q * d + i] = s * api + c * aqi;
        }
        for (size_t i = 0; i < d; ++i) {
          double vip = v[i * d + p], viq = v[i * d + q];
          v[i * d + p] = c * vip - s * viq;
          v[i * d + q] = s * vip + c * viq;
        }
      }
    }
  }
  vals->resize(d);
  vecs->assign(d * d, 0.0);
  for (size_t i = 0; i < d; ++i) {
    (*vals)[i] = a[i * d + i];
    for (size_t j = 0; j < d; ++j) (*vecs)[i * d + j] = v[j * d + i];
  }
}

}  // namespace detail

// Projects each feature row onto the top-3 principal directions. Directions
// are sign-fixed to a nonnegative component sum; components whose variance is
// (numerically) zero project to zero. The covariance is accumulated from raw
// sums, which makes the result independent of row order for integer-valued
// inputs.
inline std::vector<float> pca3(std::span<const float> features, size_t n, size_t channels) {
  if (n < 1 || channels < 1) throw std::invalid_argument("pca3: empty input");
  std::vector<float> out(n * 3, 0.f);
  if (n == 1) return out;

  std::vector<double> sum(channels, 0.0);
  std::vector<double> cross(channels * channels, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const float* row = features.data() + i * channels;
    for (size_t a = 0; a < channels; ++a) {
      sum[a] += row[a];
      for (size_t b = a; b < channels; ++b) cross[a * channels + b] += (double)row[a] * row[b];
    }
  }
  std::vector<double> cov(channels * channels, 0.0);
  for (size_t a = 0; a < channels; ++a) {
    for (size_t b = a; b < channels; ++b) {
      double c = (cross[a * channels + b] - sum[a] * sum[b] / (double)n) / (double)n;
      cov[a * channels + b] = cov[b * channels + a] = c;
    }
  }

  std::vector<double> vals, vecs;
  detail::jacobi_eigen(cov, channels, &vals, &vecs);
  std::vector<size_t> order(channels);
  for (size_t i = 0; i < channels; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return vals[a] > vals[b] || (vals[a] == vals[b] && a < b);
  });

  double max_val = 0.0;
  for (double v : vals) max_val = std::max(max_val, std::fabs(v));
  double floor = std::max(1e-12, max_val * 1e-9);

  std::vector<double> mean(channels);
  for (size_t a = 0; a < channels; ++a) mean[a] = sum[a] / (double)n;

  size_t comps = std::min<size_t>(3, channels);
  for (size_t c = 0; c < comps; ++c) {
    size_t e = order[c];
    if (vals[e] <= floor) continue;  // rank-deficient: leave projection at zero
    const double* dir = vecs.data() + e * channels;
    double dir_sum = 0.0;
    for (size_t a = 0; a < channels; ++a) dir_sum += dir[a];
    double sign = dir_sum < 0.0 ? -1.0 : 1.0;
    for (size_t i = 0; i < n; ++i) {
      const float* row = features.data() + i * channels;
      double proj = 0.0;
      for (size_t a = 0; a < channels; ++a) proj += ((double)row[a] - mean[a]) * dir[a];
      out[i * 3 + c] = (float)(sign * proj);
    }
  }
  return out;
}

// Per-column (v - min) / (max - min); a constant column maps to 0.5.
inline std::vector<float> minmax_normalize(std::span<const float> columns, size_t n, size_t d) {
  std::vector<float> out(columns.begin(), columns.end());
  for (size_t c = 0; c < d; ++c) {
    float lo = 1e30f, hi = -1e30f;
    for (size_t i = 0; i < n; ++i) {
      lo = std::min(lo, out[i * d + c]);
      hi = std::max(hi, out[i * d + c]);
    }
    if (hi > lo) {
      float inv = 1.f / (hi - lo);
      for (size_t i = 0; i < n; ++i) out[i * d + c] = (out[i * d + c] - lo) * inv;
    } else {
      for (size_t i = 0; i < n; ++i) out[i * d + c] = 0.5f;
    }
  }
  return out;
}

inline SortKeys build_sort_keys(const GopModel& model) {
  const size_t n = model.config.n_anchors;
  const size_t c = model.config.feature_channels;
  std::vector<float> features(n * c);
  std::vector<float> raw(n * kSortKeyDims);
  for (size_t i = 0; i < n; ++i)
    std::copy(model.anchors[i].feature.begin(), model.anchors[i].feature.end(),
              features.begin() + i * c);
  std::vector<float> proj = pca3(features, n, c);
  for (size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) raw[i * kSortKeyDims + a] = model.anchors[i].position[a];
    for (int a = 0; a < 3; ++a) raw[i * kSortKeyDims + 3 + a] = proj[i * 3 + a];
  }
  SortKeys keys;
  keys.count = n;
  keys.values = minmax_normalize(raw, n, kSortKeyDims);
  return keys;
}

// ---------------------------------------------------------------------------
// Grid sort: Morton initialization + greedy neighbour-swap refinement
// ---------------------------------------------------------------------------
namespace detail {

inline uint32_t part1by2(uint32_t v) {
  v &= 0x3ff;
  v = (v | (v << 16)) & 0x030000ffu;
  v = (v | (v << 8)) & 0x0300f00fu;
  v = (v | (v << 4)) & 0x030c30c3u;
  v = (v | (v << 2)) & 0x09249249u;
  return v;
}

inline uint32_t morton3(const std::span<const float> key) {
  auto q = [](float v) { return std::min(1023u, (uint32_t)std::max(0.f, v * 1024.f)); };
  return part1by2(q(key[0])) | (part1by2(q(key[1])) << 1) | (part1by2(q(key[2])) << 2);
}

inline float key_dist2(std::span<const float> a, std::span<const float> b) {
  float acc = 0.f;
  for (uint32_t i = 0; i < kSortKeyDims; ++i) {
    float d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// Sum of squared key distances from `cell` to its occupied 4-neighbours.
inline double cell_neighbor_cost(const std::vector<uint32_t>& grid, uint32_t h, uint32_t w,
                                 const SortKeys& keys, uint32_t cell) {
  uint32_t a = grid[cell];
  if (a == kEmptyCell) return 0.0;
  uint32_t r = cell / w, c = cell % w;
  double acc = 0.0;
  auto edge = [&](uint32_t rr, uint32_t cc) {
    uint32_t b = grid[rr * w + cc];
    if (b != kEmptyCell) acc += key_dist2(keys.key(a), keys.key(b));
  };
  if (r > 0) edge(r - 1, c);
  if (r + 1 < h) edge(r + 1, c);
  if (c > 0) edge(r, c - 1);
  if (c + 1 < w) edge(r, c + 1);
  return acc;
}

}  // namespace detail

// Anchors sorted by the Morton code of their (x, y, z) key components and
// placed into the leading cells in row-major order; trailing cells stay
// empty. Stable with respect to the input order on full key ties so a
// re-encode of an already sorted model reproduces the same arrangement.
inline std::vector<uint32_t> morton_init_grid(const SortKeys& keys, uint32_t grid_h,
                                              uint32_t grid_w) {
  const size_t n = keys.count;
  if ((uint64_t)grid_h * grid_w < n) throw std::invalid_argument("morton_init_grid: grid too small");
  std::vector<uint32_t> order(n);
  for (uint32_t i = 0; i < n; ++i) order[i] = i;
  std::vector<uint32_t> codes(n);
  for (size_t i = 0; i < n; ++i) codes[i] = detail::morton3(keys.key(i));
  std::stable_sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (codes[a] != codes[b]) return codes[a] < codes[b];
    auto ka = keys.key(a), kb = keys.key(b);
    return std::lexicographical_compare(ka.begin(), ka.end(), kb.begin(), kb.end());
  });
  std::vector<uint32_t> grid(grid_h * grid_w, kEmptyCell);
  for (size_t i = 0; i < n; ++i) grid[i] = order[i];
  return grid;
}

// Smoothness-seeking permutation placement. Starts from the Morton order and
// runs a seeded, bounded schedule of pairwise swaps, accepting a swap only on
// a strict decrease of the local 4-neighbour key distance, so the result is
// never worse than its own initialization.
inline std::vector<uint32_t> grid_sort(const SortKeys& keys, uint32_t grid_h, uint32_t grid_w,
                                       uint64_t seed) {
  std::vector<uint32_t> grid = morton_init_grid(keys, grid_h, grid_w);
  const size_t n = keys.count;
  if (n < 3) return grid;

  Rng rng(sub_seed(seed, 0x50));
  std::vector<uint32_t> scan(n);
  constexpr int kPasses = 8;
  for (int pass = 0; pass < kPasses; ++pass) {
    uint32_t radius = std::max<uint32_t>(1, std::max(grid_h, grid_w) >> (pass + 1));
    for (uint32_t i = 0; i < n; ++i) scan[i] = i;
    for (uint32_t i = (uint32_t)n; i > 1; --i) {
      uint32_t j = (uint32_t)rng.below(i);
      std::swap(scan[i - 1], scan[j]);
    }
    for (uint32_t cell_a : scan) {
      uint32_t ra = cell_a / grid_w, ca = cell_a % grid_w;
      int64_t rb = (int64_t)ra + (int64_t)rng.below(2 * radius + 1) - radius;
      int64_t cb = (int64_t)ca + (int64_t)rng.below(2 * radius + 1) - radius;
      if (rb < 0 || cb < 0 || rb >= (int64_t)grid_h || cb >= (int64_t)grid_w) continue;
      uint32_t cell_b = (uint32_t)(rb * grid_w + cb);
      if (cell_b == cell_a || cell_b >= n) continue;  // occupied cells only
      double before = detail::cell_neighbor_cost(grid, grid_h, grid_w, keys, cell_a) +
                      detail::cell_neighbor_cost(grid, grid_h, grid_w, keys, cell_b);
      std::swap(grid[cell_a], grid[cell_b]);
      double after = detail::cell_neighbor_cost(grid, grid_h, grid_w, keys, cell_a) +
                     detail::cell_neighbor_cost(grid, grid_h, grid_w, keys, cell_b);
      if (!(after < before - 1e-12)) std::swap(grid[cell_a], grid[cell_b]);
    }
  }
  return grid;
}

// Sum over horizontally/vertically adjacent non-empty cell pairs of the
// squared key distance.
inline double smoothness_energy(const std::vector<uint32_t>& ti_grid, uint32_t grid_h,
                                uint32_t grid_w, const SortKeys& keys) {
  if (ti_grid.size() != (size_t)grid_h * grid_w)
    throw std::invalid_argument("smoothness_energy: grid size mismatch");
  double acc = 0.0;
  for (uint32_t r = 0; r < grid_h; ++r) {
    for (uint32_t c = 0; c < grid_w; ++c) {
      uint32_t a = ti_grid[r * grid_w + c];
      if (a == kEmptyCell) continue;
      if (c + 1 < grid_w) {
        uint32_t b = ti_grid[r * grid_w + c + 1];
        if (b != kEmptyCell) acc += detail::key_dist2(keys.key(a), keys.key(b));
      }
      if (r + 1 < grid_h) {
        uint32_t b = ti_grid[(r + 1) * grid_w + c];
        if (b != kEmptyCell) acc += detail::key_dist2(keys.key(a), keys.key(b));
      }
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Layout assembly
// ---------------------------------------------------------------------------

// The prune test shared by encoder and decoder: a stream survives iff its
// m_de quantized to the 1/15 grid is nonzero.
inline int32_t quantize_mask_de(float m_de) {
  long level = std::lround((double)m_de * kMaskQuantLevels);
  return (int32_t)std::clamp<long>(level, 0, kMaskQuantLevels);
}

// Near-square packing dims: w = ceil(sqrt(len)), h = ceil(len / w).
inline std::pair<uint32_t, uint32_t> gf_dims_for(size_t len) {
  if (len == 0) return {0, 0};
  uint32_t w = (uint32_t)std::ceil(std::sqrt((double)len));
  uint32_t h = (uint32_t)((len + w - 1) / w);
  return {h, w};
}

// Row-major scan of ti_grid keeping anchors whose quantized m_de is nonzero.
// Both encoder and decoder derive gf_order through this function, from
// transmitted data only.
inline std::vector<uint32_t> gf_order_from_grid(const std::vector<uint32_t>& ti_grid,
                                                std::span<const float> mask_de) {
  std::vector<uint32_t> order;
  for (uint32_t a : ti_grid) {
    if (a == kEmptyCell) continue;
    if (quantize_mask_de(mask_de[a]) > 0) order.push_back(a);
  }
  return order;
}

inline LayoutMaps build_layout(const GopModel& model, uint64_t seed) {
  const auto& cfg = model.config;
  if ((uint64_t)cfg.grid_h * cfg.grid_w < cfg.n_anchors)
    throw std::invalid_argument("build_layout: grid too small");
  LayoutMaps layout;
  layout.grid_h = cfg.grid_h;
  layout.grid_w = cfg.grid_w;
  SortKeys keys = build_sort_keys(model);
  layout.ti_grid = grid_sort(keys, cfg.grid_h, cfg.grid_w, seed);
  std::vector<float> mask_de(cfg.n_anchors);
  for (size_t i = 0; i < cfg.n_anchors; ++i) mask_de[i] = model.anchors[i].mask_de;
  layout.gf_order = gf_order_from_grid(layout.ti_grid, mask_de);
  auto [h, w] = gf_dims_for(layout.gf_order.size());
  layout.gf_h = h;
  layout.gf_w = w;
  return layout;
}

// ---------------------------------------------------------------------------
// V_TI / V_GF assembly
// ---------------------------------------------------------------------------

inline uint32_t vti_channel_count(const GopConfig& cfg) {
  return attr_channel_count(cfg) + cfg.feature_channels;  // 12 + 3K + C
}

// Channel planes in fixed order: x(3), S1(3), S2(3), offsets(3K), M(3), f(C).
// Empty cells are zero-filled.
inline Grid3f assemble_vti(const GopModel& model, const LayoutMaps& layout) {
  const auto& cfg = model.config;
  if (layout.ti_grid.size() != (size_t)layout.grid_h * layout.grid_w)
    throw std::invalid_argument("assemble_vti: layout/model mismatch");
  Grid3f video(vti_channel_count(cfg), layout.grid_h, layout.grid_w);
  const uint32_t kOff = attr_idx_offsets();
  const uint32_t kMde = attr_idx_mask_de(cfg);
  const uint32_t kAttr = attr_channel_count(cfg);
  for (uint32_t cell = 0; cell < layout.ti_grid.size(); ++cell) {
    uint32_t a = layout.ti_grid[cell];
    if (a == kEmptyCell) continue;
    if (a >= model.anchors.size()) throw std::invalid_argument("assemble_vti: bad anchor index");
    const Anchor& anchor = model.anchors[a];
    uint32_t r = cell / layout.grid_w, c = cell % layout.grid_w;
    for (int i = 0; i < 3; ++i) {
      video.at(attr_idx_position() + i, r, c) = anchor.position[i];
      video.at(attr_idx_attr_scale() + i, r, c) = anchor.attr_scale[i];
      video.at(attr_idx_offset_scale() + i, r, c) = anchor.offset_scale[i];
    }
    for (uint32_t i = 0; i < 3 * cfg.gaussians_per_anchor; ++i)
      video.at(kOff + i, r, c) = anchor.offsets[i];
    video.at(kMde, r, c) = anchor.mask_de;
    video.at(kMde + 1, r, c) = anchor.mask_knn;
    video.at(kMde + 2, r, c) = anchor.mask_dy;
    for (uint32_t i = 0; i < cfg.feature_channels; ++i)
      video.at(kAttr + i, r, c) = anchor.feature[i];
  }
  return video;
}

// Exact inverse of assemble_vti on anchor data.
inline void disassemble_vti(const Grid3f& video, const LayoutMaps& layout, GopModel* model) {
  const auto& cfg = model->config;
  if (video.channels != vti_channel_count(cfg) || video.h != layout.grid_h ||
      video.w != layout.grid_w)
    throw std::invalid_argument("disassemble_vti: layout/model mismatch");
  const uint32_t kOff = attr_idx_offsets();
  const uint32_t kMde = attr_idx_mask_de(cfg);
  const uint32_t kAttr = attr_channel_count(cfg);
  for (uint32_t cell = 0; cell < layout.ti_grid.size(); ++cell) {
    uint32_t a = layout.ti_grid[cell];
    if (a == kEmptyCell) continue;
    Anchor& anchor = model->anchors[a];
    uint32_t r = cell / layout.grid_w, c = cell % layout.grid_w;
    anchor.offsets.resize((size_t)3 * cfg.gaussians_per_anchor);
    anchor.feature.resize(cfg.feature_channels);
    for (int i = 0; i < 3; ++i) {
      anchor.position[i] = video.at(attr_idx_position() + i, r, c);
      anchor.attr_scale[i] = video.at(attr_idx_attr_scale() + i, r, c);
      anchor.offset_scale[i] = video.at(attr_idx_offset_scale() + i, r, c);
    }
    for (uint32_t i = 0; i < 3 * cfg.gaussians_per_anchor; ++i)
      anchor.offsets[i] = video.at(kOff + i, r, c);
    anchor.mask_de = video.at(kMde, r, c);
    anchor.mask_knn = video.at(kMde + 1, r, c);
    anchor.mask_dy = video.at(kMde + 2, r, c);
    for (uint32_t i = 0; i < cfg.feature_channels; ++i)
      anchor.feature[i] = video.at(kAttr + i, r, c);
  }
}

// Frame t holds the f_t of present anchors in gf_order, row-major, with a
// zero-padded tail.
inline std::vector<Grid3f> pack_vgf(const GopModel& model, const LayoutMaps& layout) {
  const auto& cfg = model.config;
  std::vector<Grid3f> frames(cfg.frame_count);
  for (uint32_t t = 0; t < cfg.frame_count; ++t) {
    Grid3f& frame = frames[t];
    frame = Grid3f(cfg.stream_channels, layout.gf_h, layout.gf_w);
    for (size_t j = 0; j < layout.gf_order.size(); ++j) {
      uint32_t a = layout.gf_order[j];
      if (a >= model.streams.size()) throw std::invalid_argument("pack_vgf: layout/model mismatch");
      uint32_t r = (uint32_t)(j / layout.gf_w), c = (uint32_t)(j % layout.gf_w);
      const float* src = model.streams[a].frames.data() + (size_t)t * cfg.stream_channels;
      for (uint32_t ch = 0; ch < cfg.stream_channels; ++ch) frame.at(ch, r, c) = src[ch];
    }
  }
  return frames;
}

// Reconstructs all streams from packed frames; anchors outside gf_order get
// zero streams with present=false.
inline void unpack_vgf(std::span<const Grid3f> frames, const LayoutMaps& layout,
                       GopModel* model) {
  const auto& cfg = model->config;
  if (frames.size() != cfg.frame_count) throw std::invalid_argument("unpack_vgf: frame count mismatch");
  for (auto& s : model->streams) {
    s.frames.assign((size_t)cfg.frame_count * cfg.stream_channels, 0.f);
    s.present = false;
  }
  for (size_t j = 0; j < layout.gf_order.size(); ++j) {
    uint32_t a = layout.gf_order[j];
    FeatureStream& s = model->streams[a];
    s.present = true;
    uint32_t r = (uint32_t)(j / layout.gf_w), c = (uint32_t)(j % layout.gf_w);
    for (uint32_t t = 0; t < cfg.frame_count; ++t) {
      const Grid3f& frame = frames[t];
      if (frame.channels != cfg.stream_channels || frame.h != layout.gf_h ||
          frame.w != layout.gf_w)
        throw std::invalid_argument("unpack_vgf: layout/model mismatch");
      for (uint32_t ch = 0; ch < cfg.stream_channels; ++ch)
        s.frames[(size_t)t * cfg.stream_channels + ch] = frame.at(ch, r, c);
    }
  }
}

}  // namespace gifstream
