#pragma once

#include "gifstream/nn.hpp"

namespace gifstream {

// Pipeline-wide constants. These are fixed by the format: changing any of
// them changes the bitstream layout.
constexpr uint32_t kContextFrames = 2;     // auto-regressive conditioning depth (k)
constexpr uint32_t kFragmentWidth = 8;     // feature channels per coded fragment (G)
constexpr uint32_t kTimeEncodingWidth = 6; // sin/cos at 3 octaves
constexpr int32_t kMaskQuantLevels = 15;   // m_de coded on a 1/15 grid (4-bit levels)
constexpr int32_t kFeatureSymbolMin = -255;
constexpr int32_t kFeatureSymbolMax = 255;

struct GopConfig {
  uint32_t n_anchors = 0;
  uint32_t gaussians_per_anchor = 0;  // K
  uint32_t feature_channels = 0;      // C, time-independent
  uint32_t stream_channels = 0;       // P, time-dependent
  uint32_t frame_count = 0;           // N, timestamps in the GOP
  uint32_t knn_k = 0;
  uint32_t grid_h = 0;
  uint32_t grid_w = 0;

  bool operator==(const GopConfig&) const = default;
};

// Non-feature channel layout of the time-independent plane stack:
// position(3), attr_scale(3), offset_scale(3), offsets(3K), m_de, m_knn, m_dy.
inline uint32_t attr_channel_count(const GopConfig& cfg) {
  return 12 + 3 * cfg.gaussians_per_anchor;
}
inline uint32_t attr_idx_position() { return 0; }
inline uint32_t attr_idx_attr_scale() { return 3; }
inline uint32_t attr_idx_offset_scale() { return 6; }
inline uint32_t attr_idx_offsets() { return 9; }
inline uint32_t attr_idx_mask_de(const GopConfig& cfg) { return 9 + 3 * cfg.gaussians_per_anchor; }
inline uint32_t attr_idx_mask_knn(const GopConfig& cfg) { return attr_idx_mask_de(cfg) + 1; }
inline uint32_t attr_idx_mask_dy(const GopConfig& cfg) { return attr_idx_mask_de(cfg) + 2; }

struct Anchor {
  Vec3f position{};       // x, canonical scene position
  Vec3f attr_scale{};     // S1, multiplies decoded Gaussian scaling
  Vec3f offset_scale{};   // S2, multiplies primitive offsets
  std::vector<float> offsets;  // K x 3, o^i relative to the anchor
  float mask_de = 0.f;    // stream retention mask, [0, 1]
  float mask_knn = 0.f;   // neighbour-aggregation blend, [0, 1]
  float mask_dy = 0.f;    // motion scale, [0, 1]
  std::vector<float> feature;  // C time-independent channels
};

struct FeatureStream {
  std::vector<float> frames;  // N x P, [t][channel]
  bool present = false;       // false => pruned, all frames exactly zero
};

struct GopModel {
  GopConfig config;
  std::vector<Anchor> anchors;
  std::vector<FeatureStream> streams;  // parallel to anchors
  WeightsBundle weights;
  bool quantized = false;  // when set, features and stream frames are integer-valued
};

struct GaussianPrimitive {
  Vec3f position{};
  float opacity = 0.f;
  Vec3f scale{};
  std::array<float, 4> rotation{};  // unit quaternion (w, x, y, z)
  Vec3f color{};
};

struct GaussianFrame {
  std::vector<GaussianPrimitive> primitives;  // n_anchors * K
  float time = 0.f;                           // normalized timestamp in [0, 1]
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------
struct Violation {
  int64_t anchor = -1;  // -1 for model-level violations
  std::string field;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  std::string to_string() const {
    std::string s;
    for (const auto& v : violations) {
      s += "anchor " + std::to_string(v.anchor) + " " + v.field + ": " + v.message + "\n";
    }
    return s;
  }
};

namespace detail {

inline bool all_finite(std::span<const float> v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline bool all_integer(std::span<const float> v) {
  for (float x : v)
    if (x != std::nearbyint(x) || std::fabs(x) > 2.1e9f) return false;
  return true;
}

inline void validate_weights_for_config(const WeightsBundle& w, const GopConfig& cfg,
                                        ValidationReport* report) {
  auto add = [&](const std::string& field, const std::string& msg) {
    report->violations.push_back({-1, field, msg});
  };
  const uint32_t c = cfg.feature_channels, p = cfg.stream_channels;
  auto head_dims = [&](const std::vector<DenseLayer>& net, const char* name, uint32_t in,
                       uint32_t out) {
    if (net.empty()) {
      add(name, "network is empty");
      return;
    }
    if (net.front().in_dim != in)
      add(name, "input dim " + std::to_string(net.front().in_dim) + " != expected " + std::to_string(in));
    if (net.back().out_dim != out)
      add(name, "output dim " + std::to_string(net.back().out_dim) + " != expected " + std::to_string(out));
    for (size_t i = 0; i + 1 < net.size(); ++i)
      if (net[i].out_dim != net[i + 1].in_dim) add(name, "dimension chain violation");
  };
  auto conv_dims = [&](const std::vector<ConvLayer>& net, const char* name, uint32_t in,
                       uint32_t out) {
    if (net.empty()) {
      add(name, "network is empty");
      return;
    }
    if (net.front().in_ch != in)
      add(name, "input channels " + std::to_string(net.front().in_ch) + " != expected " + std::to_string(in));
    if (net.back().out_ch != out)
      add(name, "output channels " + std::to_string(net.back().out_ch) + " != expected " + std::to_string(out));
    for (size_t i = 0; i + 1 < net.size(); ++i)
      if (net[i].out_ch != net[i + 1].in_ch) add(name, "dimension chain violation");
  };
  head_dims(w.att_head, "weights.att_head", c + p, cfg.gaussians_per_anchor * 11);
  head_dims(w.mot_head, "weights.mot_head", c + p + kTimeEncodingWidth, 7);
  head_dims(w.ent_attr, "weights.ent_attr", c, 3 * attr_channel_count(cfg));
  conv_dims(w.ent_stream, "weights.ent_stream", kContextFrames * p, 2 * p);
  conv_dims(w.ent_fragment, "weights.ent_fragment", kContextFrames * kFragmentWidth,
            2 * kFragmentWidth);
}

}  // namespace detail

inline ValidationReport validate_config(const GopConfig& cfg) {
  ValidationReport report;
  auto add = [&](const std::string& field, const std::string& msg) {
    report.violations.push_back({-1, field, msg});
  };
  if (cfg.n_anchors < 1) add("config.n_anchors", "must be >= 1");
  if (cfg.gaussians_per_anchor < 1) add("config.gaussians_per_anchor", "must be >= 1");
  if (cfg.feature_channels < 1) add("config.feature_channels", "must be >= 1");
  if (cfg.stream_channels < 1) add("config.stream_channels", "must be >= 1");
  if (cfg.frame_count < 1) add("config.frame_count", "must be >= 1");
  if (cfg.knn_k < 1) add("config.knn_k", "must be >= 1");
  if (cfg.grid_h < 1 || cfg.grid_w < 1) add("config.grid", "grid dims must be >= 1");
  if ((uint64_t)cfg.grid_h * cfg.grid_w < cfg.n_anchors)
    add("config.grid", "grid_h*grid_w must cover n_anchors");
  return report;
}

// Reports every violated invariant with the offending anchor index; an empty
// report means the model is well-formed.
inline ValidationReport validate(const GopModel& model) {
  ValidationReport report = validate_config(model.config);
  const auto& cfg = model.config;
  auto add = [&](int64_t anchor, const std::string& field, const std::string& msg) {
    report.violations.push_back({anchor, field, msg});
  };

  if (model.anchors.size() != cfg.n_anchors)
    add(-1, "anchors", "anchor count != config.n_anchors");
  if (model.streams.size() != cfg.n_anchors)
    add(-1, "streams", "stream count != config.n_anchors");

  for (size_t i = 0; i < model.anchors.size(); ++i) {
    const auto& a = model.anchors[i];
    if (!detail::all_finite(a.position)) add((int64_t)i, "position", "non-finite");
    if (!detail::all_finite(a.attr_scale)) add((int64_t)i, "attr_scale", "non-finite");
    if (!detail::all_finite(a.offset_scale)) add((int64_t)i, "offset_scale", "non-finite");
    if (a.offsets.size() != (size_t)3 * cfg.gaussians_per_anchor)
      add((int64_t)i, "offsets", "expected exactly K offsets");
    else if (!detail::all_finite(a.offsets))
      add((int64_t)i, "offsets", "non-finite");
    if (!(a.mask_de >= 0.f && a.mask_de <= 1.f)) add((int64_t)i, "m_de", "outside [0, 1]");
    if (!(a.mask_knn >= 0.f && a.mask_knn <= 1.f)) add((int64_t)i, "m_knn", "outside [0, 1]");
    if (!(a.mask_dy >= 0.f && a.mask_dy <= 1.f)) add((int64_t)i, "m_dy", "outside [0, 1]");
    if (a.feature.size() != cfg.feature_channels)
      add((int64_t)i, "feature", "expected C channels");
    else if (!detail::all_finite(a.feature))
      add((int64_t)i, "feature", "non-finite");
    else if (model.quantized && !detail::all_integer(a.feature))
      add((int64_t)i, "feature", "not integer-valued in quantized model");
  }

  for (size_t i = 0; i < model.streams.size(); ++i) {
    const auto& s = model.streams[i];
    if (s.frames.size() != (size_t)cfg.frame_count * cfg.stream_channels) {
      add((int64_t)i, "stream.frames", "expected N*P values");
      continue;
    }
    if (!detail::all_finite(s.frames)) add((int64_t)i, "stream.frames", "non-finite");
    if (!s.present) {
      for (float v : s.frames) {
        if (v != 0.f) {
          add((int64_t)i, "stream.present", "pruning contract: present=false but nonzero value");
          break;
        }
      }
    }
    if (model.quantized && !detail::all_integer(s.frames))
      add((int64_t)i, "stream.frames", "not integer-valued in quantized model");
    if (i < model.anchors.size()) {
      bool mask_on = model.anchors[i].mask_de > 0.f;
      if (mask_on != s.present)
        add((int64_t)i, "stream.present",
            "pruning contract: present flag disagrees with m_de > 0");
    }
  }

  detail::validate_weights_for_config(model.weights, cfg, &report);
  return report;
}

// ---------------------------------------------------------------------------
// Synthetic model generator (test harness). Pure function of
// (seed, config, sparsity): byte-identical output for equal inputs.
// ---------------------------------------------------------------------------
namespace detail {

inline std::vector<DenseLayer> synthetic_mlp(Rng& rng, uint32_t in, uint32_t hidden,
                                             uint32_t out) {
  std::vector<DenseLayer> net(2);
  net[0].in_dim = in;
  net[0].out_dim = hidden;
  net[0].act = Activation::relu;
  net[1].in_dim = hidden;
  net[1].out_dim = out;
  net[1].act = Activation::none;
  for (auto& l : net) {
    float scale = 0.35f / std::sqrt((float)l.in_dim);
    l.weight.resize((size_t)l.in_dim * l.out_dim);
    l.bias.resize(l.out_dim);
    for (auto& v : l.weight) v = scale * rng.normal();
    for (auto& v : l.bias) v = 0.05f * rng.normal();
  }
  return net;
}

inline std::vector<ConvLayer> synthetic_conv(Rng& rng, uint32_t in, uint32_t hidden,
                                             uint32_t out) {
  std::vector<ConvLayer> net(2);
  net[0].in_ch = in;
  net[0].out_ch = hidden;
  net[0].act = Activation::relu;
  net[1].in_ch = hidden;
  net[1].out_ch = out;
  net[1].act = Activation::none;
  for (auto& l : net) {
    float scale = 0.35f / std::sqrt((float)l.in_ch * 9.f);
    l.kernel.resize((size_t)l.in_ch * l.out_ch * 9);
    l.bias.resize(l.out_ch);
    for (auto& v : l.kernel) v = scale * rng.normal();
    for (auto& v : l.bias) v = 0.05f * rng.normal();
  }
  return net;
}

}  // namespace detail

inline WeightsBundle generate_synthetic_weights(uint64_t seed, const GopConfig& cfg) {
  Rng rng(sub_seed(seed, 0x57));
  WeightsBundle w;
  const uint32_t c = cfg.feature_channels, p = cfg.stream_channels;
  w.att_head = detail::synthetic_mlp(rng, c + p, 64, cfg.gaussians_per_anchor * 11);
  w.mot_head = detail::synthetic_mlp(rng, c + p + kTimeEncodingWidth, 64, 7);
  w.ent_stream = detail::synthetic_conv(rng, kContextFrames * p, 32, 2 * p);
  w.ent_fragment =
      detail::synthetic_conv(rng, kContextFrames * kFragmentWidth, 32, 2 * kFragmentWidth);
  w.ent_attr = detail::synthetic_mlp(rng, c, 64, 3 * attr_channel_count(cfg));
  // Entropy supervision during training widens sigma until the data sits
  // inside the predicted distributions; emulate that by biasing the sigma
  // halves of the conv heads up (softplus(1.5) ~ 1.7).
  for (uint32_t ch = p; ch < 2 * p; ++ch) w.ent_stream.back().bias[ch] += 1.5f;
  for (uint32_t ch = kFragmentWidth; ch < 2 * kFragmentWidth; ++ch)
    w.ent_fragment.back().bias[ch] += 1.5f;
  return w;
}

inline GopModel generate_synthetic(uint64_t seed, const GopConfig& cfg, double sparsity) {
  auto cfg_report = validate_config(cfg);
  if (!cfg_report.ok()) throw std::invalid_argument("generate_synthetic: " + cfg_report.to_string());
  if (!(sparsity >= 0.0 && sparsity <= 1.0))
    throw std::invalid_argument("generate_synthetic: sparsity outside [0, 1]");

  const uint32_t n = cfg.n_anchors;
  GopModel model;
  model.config = cfg;
  model.anchors.resize(n);
  model.streams.resize(n);

  // Anchor positions on a jittered lattice spanning roughly [-1, 1]^3.
  Rng pos_rng(sub_seed(seed, 1));
  uint32_t side = (uint32_t)std::ceil(std::cbrt((double)n));
  side = std::max(side, 1u);
  float spacing = 2.f / (float)side;
  for (uint32_t i = 0; i < n; ++i) {
    uint32_t cx = i % side, cy = (i / side) % side, cz = i / (side * side);
    auto& a = model.anchors[i];
    a.position = {
        -1.f + ((float)cx + 0.5f + pos_rng.uniform(-0.45f, 0.45f)) * spacing,
        -1.f + ((float)cy + 0.5f + pos_rng.uniform(-0.45f, 0.45f)) * spacing,
        -1.f + ((float)cz + 0.5f + pos_rng.uniform(-0.45f, 0.45f)) * spacing,
    };
  }

  // Spatially structured time-independent features so PCA and the grid sort
  // have real signal to work with.
  Rng feat_rng(sub_seed(seed, 2));
  std::vector<Vec3f> dirs(cfg.feature_channels);
  std::vector<float> phases(cfg.feature_channels);
  for (uint32_t c = 0; c < cfg.feature_channels; ++c) {
    dirs[c] = {feat_rng.uniform(-1.f, 1.f), feat_rng.uniform(-1.f, 1.f),
               feat_rng.uniform(-1.f, 1.f)};
    phases[c] = feat_rng.uniform(0.f, 6.28318f);
  }
  for (uint32_t i = 0; i < n; ++i) {
    auto& a = model.anchors[i];
    a.feature.resize(cfg.feature_channels);
    for (uint32_t c = 0; c < cfg.feature_channels; ++c) {
      float phase = a.position[0] * dirs[c][0] + a.position[1] * dirs[c][1] +
                    a.position[2] * dirs[c][2];
      a.feature[c] = 3.f * std::sin(2.2f * phase + phases[c]) + 0.5f * feat_rng.normal();
    }
  }

  Rng attr_rng(sub_seed(seed, 3));
  for (uint32_t i = 0; i < n; ++i) {
    auto& a = model.anchors[i];
    for (int ax = 0; ax < 3; ++ax) {
      a.attr_scale[ax] = attr_rng.uniform(0.8f, 1.8f);
      a.offset_scale[ax] = attr_rng.uniform(0.2f, 0.8f);
    }
    a.offsets.resize((size_t)3 * cfg.gaussians_per_anchor);
    for (auto& v : a.offsets) v = attr_rng.uniform(-0.5f, 0.5f);
    a.mask_knn = attr_rng.uniform(0.f, 1.f);
    float dy_draw = attr_rng.uniform(0.05f, 1.f);
    a.mask_dy = attr_rng.next_double() < 0.5 ? 0.f : dy_draw;
  }

  // Exactly round(sparsity * n) streams stay present.
  Rng select_rng(sub_seed(seed, 4));
  uint32_t present_count = (uint32_t)std::llround(sparsity * (double)n);
  std::vector<uint32_t> order(n);
  for (uint32_t i = 0; i < n; ++i) order[i] = i;
  for (uint32_t i = n; i > 1; --i) {
    uint32_t j = (uint32_t)select_rng.below(i);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<bool> present(n, false);
  for (uint32_t i = 0; i < present_count; ++i) present[order[i]] = true;

  // m_de is kept well above the 1/15 quantization grid for present streams so
  // quantization never silently prunes them.
  Rng mask_rng(sub_seed(seed, 5));
  for (uint32_t i = 0; i < n; ++i) {
    float draw = mask_rng.uniform(0.25f, 1.f);
    model.anchors[i].mask_de = present[i] ? draw : 0.f;
  }

  // Present streams carry smooth low-amplitude mean-reverting walks over t
  // (stationary std ~1.5), so values stay within a few sigma of the entropy
  // heads' predictions.
  Rng stream_rng(sub_seed(seed, 6));
  for (uint32_t i = 0; i < n; ++i) {
    auto& s = model.streams[i];
    s.frames.assign((size_t)cfg.frame_count * cfg.stream_channels, 0.f);
    s.present = present[i];
    if (!s.present) continue;
    for (uint32_t c = 0; c < cfg.stream_channels; ++c) {
      float v = 1.3f * stream_rng.normal();
      for (uint32_t t = 0; t < cfg.frame_count; ++t) {
        s.frames[(size_t)t * cfg.stream_channels + c] = v;
        v = 0.92f * v + 0.6f * stream_rng.normal();
      }
    }
  }

  model.weights = generate_synthetic_weights(seed, cfg);
  model.quantized = false;
  return model;
}

}  // namespace gifstream
