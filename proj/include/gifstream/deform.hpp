#pragma once

#include "gifstream/model.hpp"

namespace gifstream {

struct AnchorMotion {
  std::array<float, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  Vec3f translation{0, 0, 0};
};

// Per-anchor neighbour lists over canonical positions, self excluded.
struct NeighborIndex {
  uint32_t k = 0;  // entries per anchor (min(knn_k, n-1))
  std::vector<uint32_t> flat;

  std::span<const uint32_t> neighbors(size_t anchor) const {
    return std::span<const uint32_t>(flat).subspan(anchor * k, k);
  }
};

// ---------------------------------------------------------------------------
// KNN over anchor positions. A kd-tree with (distance^2, index) ordering so
// ties resolve to the lower anchor index, exactly matching exhaustive search.
// ---------------------------------------------------------------------------
namespace detail {

class KdTree3 {
 public:
  explicit KdTree3(std::span<const Vec3f> points) : points_(points) {
    order_.resize(points.size());
    for (uint32_t i = 0; i < points.size(); ++i) order_[i] = i;
    nodes_.reserve(points.size());
    root_ = build(0, (uint32_t)points.size());
  }

  // k nearest to points_[query], excluding query itself, sorted by
  // (distance^2, index).
  void knn(uint32_t query, uint32_t k, std::vector<uint32_t>* out) const {
    heap_.clear();
    query_ = points_[query];
    exclude_ = query;
    want_ = k;
    search(root_);
    std::sort(heap_.begin(), heap_.end());
    out->clear();
    out->reserve(heap_.size());
    for (const auto& e : heap_) out->push_back(e.second);
  }

 private:
  struct Node {
    uint32_t point = 0;
    int32_t left = -1;
    int32_t right = -1;
    uint8_t axis = 0;
  };

  int32_t build(uint32_t begin, uint32_t end) {
    if (begin >= end) return -1;
    // Split on the widest axis for balanced trees on clustered data.
    float lo[3] = {1e30f, 1e30f, 1e30f}, hi[3] = {-1e30f, -1e30f, -1e30f};
    for (uint32_t i = begin; i < end; ++i) {
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], points_[order_[i]][a]);
        hi[a] = std::max(hi[a], points_[order_[i]][a]);
      }
    }
    uint8_t axis = 0;
    for (int a = 1; a < 3; ++a)
      if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = (uint8_t)a;
    uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](uint32_t a, uint32_t b) {
                       float va = points_[a][axis], vb = points_[b][axis];
                       return va < vb || (va == vb && a < b);
                     });
    Node node;
    node.point = order_[mid];
    node.axis = axis;
    int32_t idx = (int32_t)nodes_.size();
    nodes_.push_back(node);
    int32_t l = build(begin, mid);
    int32_t r = build(mid + 1, end);
    nodes_[idx].left = l;
    nodes_[idx].right = r;
    return idx;
  }

  static float dist2(const Vec3f& a, const Vec3f& b) {
    float dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
  }

  void consider(uint32_t point) const {
    if (point == exclude_) return;
    std::pair<float, uint32_t> cand{dist2(query_, points_[point]), point};
    if (heap_.size() < want_) {
      heap_.push_back(cand);
      std::push_heap(heap_.begin(), heap_.end());
    } else if (cand < heap_.front()) {
      std::pop_heap(heap_.begin(), heap_.end());
      heap_.back() = cand;
      std::push_heap(heap_.begin(), heap_.end());
    }
  }

  void search(int32_t node_idx) const {
    if (node_idx < 0) return;
    const Node& node = nodes_[node_idx];
    consider(node.point);
    float diff = query_[node.axis] - points_[node.point][node.axis];
    int32_t near = diff < 0 ? node.left : node.right;
    int32_t far = diff < 0 ? node.right : node.left;
    search(near);
    // The far side may still hold an equal-distance lower-index candidate, so
    // prune only on strict inequality.
    if (heap_.size() < want_ || diff * diff <= heap_.front().first) search(far);
  }

  std::span<const Vec3f> points_;
  std::vector<uint32_t> order_;
  std::vector<Node> nodes_;
  int32_t root_ = -1;
  mutable std::vector<std::pair<float, uint32_t>> heap_;
  mutable Vec3f query_{};
  mutable uint32_t exclude_ = 0;
  mutable uint32_t want_ = 0;
};

}  // namespace detail

// For each anchor, the knn_k nearest other anchors by Euclidean distance,
// ties broken toward the lower anchor index.
inline NeighborIndex build_knn(std::span<const Vec3f> positions, uint32_t knn_k) {
  const size_t n = positions.size();
  if (n < 2) throw std::invalid_argument("build_knn: need at least 2 anchors");
  NeighborIndex index;
  index.k = (uint32_t)std::min<size_t>(knn_k, n - 1);
  index.flat.resize(n * index.k);
  detail::KdTree3 tree(positions);
  std::vector<uint32_t> nbrs;
  for (size_t i = 0; i < n; ++i) {
    tree.knn((uint32_t)i, index.k, &nbrs);
    std::copy(nbrs.begin(), nbrs.end(), index.flat.begin() + i * index.k);
  }
  return index;
}

// ---------------------------------------------------------------------------
// Forward path operations
// ---------------------------------------------------------------------------

// Scales every frame of a stream by the anchor's m_de; a zero mask yields an
// exactly-zero pruned stream.
inline FeatureStream apply_de_mask(const FeatureStream& stream, float m_de) {
  if (!(m_de >= 0.f && m_de <= 1.f))
    throw std::invalid_argument("apply_de_mask: m_de outside [0, 1]");
  FeatureStream out;
  out.frames.resize(stream.frames.size());
  if (m_de == 0.f) {
    std::fill(out.frames.begin(), out.frames.end(), 0.f);
    out.present = false;
    return out;
  }
  for (size_t i = 0; i < stream.frames.size(); ++i) out.frames[i] = m_de * stream.frames[i];
  out.present = stream.present;
  return out;
}

// out_i = m_knn_i * feat_i + (1 - m_knn_i) * mean of neighbour features.
// An empty neighbour set (single-anchor model) contributes zero.
inline std::vector<float> aggregate(std::span<const float> features, size_t dim,
                                    const NeighborIndex& nbrs,
                                    std::span<const float> m_knn) {
  const size_t n = m_knn.size();
  if (features.size() != n * dim) throw std::invalid_argument("aggregate: feature size mismatch");
  std::vector<float> out(n * dim);
  for (size_t i = 0; i < n; ++i) {
    float m = m_knn[i];
    if (!(m >= 0.f && m <= 1.f)) throw std::invalid_argument("aggregate: m_knn outside [0, 1]");
    auto neigh = nbrs.k > 0 ? nbrs.neighbors(i) : std::span<const uint32_t>();
    for (size_t d = 0; d < dim; ++d) {
      float mean = 0.f;
      if (!neigh.empty()) {
        for (uint32_t j : neigh) mean += features[(size_t)j * dim + d];
        mean /= (float)neigh.size();
      }
      out[i * dim + d] = m * features[i * dim + d] + (1.f - m) * mean;
    }
  }
  return out;
}

// Hamilton-convention rotation matrix of q / |q|; near-zero quaternions fall
// back to the identity.
inline std::array<float, 9> quat_to_matrix(const std::array<float, 4>& q) {
  float norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (norm <= 1e-8f) return {1, 0, 0, 0, 1, 0, 0, 0, 1};
  float w = q[0] / norm, x = q[1] / norm, y = q[2] / norm, z = q[3] / norm;
  return {
      1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
      2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y),
  };
}

// Fixed sinusoidal time encoding fed to the motion head (3 octaves).
inline std::array<float, kTimeEncodingWidth> encode_time(float t) {
  constexpr float pi = 3.14159265358979323846f;
  return {std::sin(pi * t),     std::cos(pi * t),     std::sin(2 * pi * t),
          std::cos(2 * pi * t), std::sin(4 * pi * t), std::cos(4 * pi * t)};
}

struct PrimitiveAttributes {
  float opacity = 0.f;
  Vec3f scale{};
  std::array<float, 4> rotation{};
  Vec3f color{};
};

// Decodes the attribute head output for one anchor: per primitive
// [opacity, scale x3, rotation x4, color x3]. Opacity and color are sigmoid
// bounded, scaling is sigmoid times the per-anchor factor, the rotation is
// normalized (zero raw quaternion falls back to identity).
inline std::vector<PrimitiveAttributes> predict_attributes(
    std::span<const float> feature, std::span<const float> masked_stream_frame,
    const Vec3f& attr_scale, uint32_t gaussians_per_anchor,
    std::span<const DenseLayer> att_head) {
  std::vector<float> input;
  input.reserve(feature.size() + masked_stream_frame.size());
  input.insert(input.end(), feature.begin(), feature.end());
  input.insert(input.end(), masked_stream_frame.begin(), masked_stream_frame.end());
  std::vector<float> raw = mlp_forward(att_head, input);
  if (raw.size() != (size_t)gaussians_per_anchor * 11)
    throw std::invalid_argument("predict_attributes: head output size mismatch");

  auto sigmoid = [](float x) { return 1.f / (1.f + std::exp(-x)); };
  std::vector<PrimitiveAttributes> out(gaussians_per_anchor);
  for (uint32_t i = 0; i < gaussians_per_anchor; ++i) {
    const float* r = raw.data() + (size_t)i * 11;
    auto& p = out[i];
    p.opacity = sigmoid(r[0]);
    for (int a = 0; a < 3; ++a) p.scale[a] = sigmoid(r[1 + a]) * attr_scale[a];
    std::array<float, 4> q = {r[4], r[5], r[6], r[7]};
    float norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (norm <= 1e-8f) {
      p.rotation = {1, 0, 0, 0};
    } else {
      p.rotation = {q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm};
    }
    for (int a = 0; a < 3; ++a) p.color[a] = sigmoid(r[8 + a]);
  }
  return out;
}

// Motion head: maps aggregated features plus the time encoding to a
// quaternion perturbation and translation, both scaled by m_dy. The perturbed
// quaternion (1,0,0,0) + m_dy*q is renormalized before conversion, so
// m_dy = 0 yields exactly the identity motion.
inline AnchorMotion predict_motion(std::span<const float> agg_feature,
                                   std::span<const float> agg_stream_frame, float t,
                                   float m_dy, std::span<const DenseLayer> mot_head) {
  if (!(t >= 0.f && t <= 1.f)) throw std::invalid_argument("predict_motion: t outside [0, 1]");
  if (!(m_dy >= 0.f && m_dy <= 1.f))
    throw std::invalid_argument("predict_motion: m_dy outside [0, 1]");
  std::vector<float> input;
  input.reserve(agg_feature.size() + agg_stream_frame.size() + kTimeEncodingWidth);
  input.insert(input.end(), agg_feature.begin(), agg_feature.end());
  input.insert(input.end(), agg_stream_frame.begin(), agg_stream_frame.end());
  auto te = encode_time(t);
  input.insert(input.end(), te.begin(), te.end());
  std::vector<float> raw = mlp_forward(mot_head, input);
  if (raw.size() != 7) throw std::invalid_argument("predict_motion: head output size mismatch");

  AnchorMotion motion;
  std::array<float, 4> q = {1.f + m_dy * raw[0], m_dy * raw[1], m_dy * raw[2], m_dy * raw[3]};
  motion.rotation = quat_to_matrix(q);
  motion.translation = {m_dy * raw[4], m_dy * raw[5], m_dy * raw[6]};
  return motion;
}

// p^i = R * (S2 .* o^i) + x + T for each of the anchor's K offsets.
inline std::vector<Vec3f> gaussian_positions(const Anchor& anchor, const AnchorMotion& motion) {
  size_t count = anchor.offsets.size() / 3;
  std::vector<Vec3f> out(count);
  const auto& r = motion.rotation;
  for (size_t i = 0; i < count; ++i) {
    float ox = anchor.offset_scale[0] * anchor.offsets[3 * i + 0];
    float oy = anchor.offset_scale[1] * anchor.offsets[3 * i + 1];
    float oz = anchor.offset_scale[2] * anchor.offsets[3 * i + 2];
    out[i] = {
        r[0] * ox + r[1] * oy + r[2] * oz + anchor.position[0] + motion.translation[0],
        r[3] * ox + r[4] * oy + r[5] * oz + anchor.position[1] + motion.translation[1],
        r[6] * ox + r[7] * oy + r[8] * oz + anchor.position[2] + motion.translation[2],
    };
  }
  return out;
}

inline float normalized_time(const GopConfig& cfg, uint32_t t_index) {
  return cfg.frame_count <= 1 ? 0.f : (float)t_index / (float)(cfg.frame_count - 1);
}

// Full forward path for one timestamp: mask -> KNN aggregation -> attribute
// head (raw features) and motion head (aggregated features) -> positions.
// Pure in (model, t_index); per-anchor work runs data-parallel.
inline GaussianFrame decode_frame(const GopModel& model, uint32_t t_index) {
  const auto& cfg = model.config;
  if (t_index >= cfg.frame_count) throw std::out_of_range("decode_frame: t_index out of range");
  const size_t n = cfg.n_anchors;
  const uint32_t p_dim = cfg.stream_channels;
  const uint32_t c_dim = cfg.feature_channels;
  const float t = normalized_time(cfg, t_index);

  // Masked per-anchor stream frames at this timestamp (the f_hat_t).
  std::vector<float> masked(n * p_dim, 0.f);
  for (size_t i = 0; i < n; ++i) {
    float m = model.anchors[i].mask_de;
    if (m == 0.f) continue;
    const float* src = model.streams[i].frames.data() + (size_t)t_index * p_dim;
    for (uint32_t c = 0; c < p_dim; ++c) masked[i * p_dim + c] = m * src[c];
  }

  NeighborIndex nbrs;
  if (n >= 2) {
    std::vector<Vec3f> positions(n);
    for (size_t i = 0; i < n; ++i) positions[i] = model.anchors[i].position;
    nbrs = build_knn(positions, cfg.knn_k);
  }

  std::vector<float> features(n * c_dim);
  std::vector<float> m_knn(n);
  for (size_t i = 0; i < n; ++i) {
    std::copy(model.anchors[i].feature.begin(), model.anchors[i].feature.end(),
              features.begin() + i * c_dim);
    m_knn[i] = model.anchors[i].mask_knn;
  }
  std::vector<float> agg_features = aggregate(features, c_dim, nbrs, m_knn);
  std::vector<float> agg_masked = aggregate(masked, p_dim, nbrs, m_knn);

  GaussianFrame frame;
  frame.time = t;
  frame.primitives.resize(n * cfg.gaussians_per_anchor);
  parallel_for(n, [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      const Anchor& a = model.anchors[i];
      auto attrs = predict_attributes(
          std::span<const float>(features).subspan(i * c_dim, c_dim),
          std::span<const float>(masked).subspan(i * p_dim, p_dim), a.attr_scale,
          cfg.gaussians_per_anchor, model.weights.att_head);
      AnchorMotion motion = predict_motion(
          std::span<const float>(agg_features).subspan(i * c_dim, c_dim),
          std::span<const float>(agg_masked).subspan(i * p_dim, p_dim), t, a.mask_dy,
          model.weights.mot_head);
      auto positions = gaussian_positions(a, motion);
      for (uint32_t g = 0; g < cfg.gaussians_per_anchor; ++g) {
        GaussianPrimitive& prim = frame.primitives[i * cfg.gaussians_per_anchor + g];
        prim.position = positions[g];
        prim.opacity = attrs[g].opacity;
        prim.scale = attrs[g].scale;
        prim.rotation = attrs[g].rotation;
        prim.color = attrs[g].color;
      }
    }
  });
  return frame;
}

}  // namespace gifstream
