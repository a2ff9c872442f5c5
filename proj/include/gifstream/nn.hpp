#pragma once

#include "gifstream/common.hpp"

namespace gifstream {

enum class Activation : uint8_t {
  none = 0,
  relu = 1,
  sigmoid = 2,
  tanh = 3,
  softplus = 4,
};

// Numerically stable log(1 + e^x).
inline float softplus(float x) {
  if (x > 20.f) return x;
  if (x < -20.f) return std::exp(x);
  return std::log1p(std::exp(x));
}

inline float apply_activation(Activation act, float x) {
  switch (act) {
    case Activation::none:
      return x;
    case Activation::relu:
      return x > 0.f ? x : 0.f;
    case Activation::sigmoid:
      return 1.f / (1.f + std::exp(-x));
    case Activation::tanh:
      return std::tanh(x);
    case Activation::softplus:
      return softplus(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------
struct DenseLayer {
  uint32_t in_dim = 0;
  uint32_t out_dim = 0;
  std::vector<float> weight;  // out_dim x in_dim, row-major
  std::vector<float> bias;    // out_dim
  Activation act = Activation::none;
};

inline std::vector<float> dense_forward(const DenseLayer& layer,
                                        std::span<const float> input) {
  if (input.size() != layer.in_dim || layer.weight.size() != (size_t)layer.in_dim * layer.out_dim ||
      layer.bias.size() != layer.out_dim) {
    throw std::invalid_argument("dense_forward: dimension mismatch");
  }
  std::vector<float> out(layer.out_dim);
  for (uint32_t o = 0; o < layer.out_dim; ++o) {
    const float* w = layer.weight.data() + (size_t)o * layer.in_dim;
    float acc = layer.bias[o];
    for (uint32_t i = 0; i < layer.in_dim; ++i) acc += w[i] * input[i];
    out[o] = apply_activation(layer.act, acc);
  }
  return out;
}

inline std::vector<float> mlp_forward(std::span<const DenseLayer> layers,
                                      std::span<const float> input) {
  std::vector<float> cur(input.begin(), input.end());
  for (const auto& layer : layers) cur = dense_forward(layer, cur);
  return cur;
}

// ---------------------------------------------------------------------------
// 2D grids and 3x3 convolutions
// ---------------------------------------------------------------------------
struct Grid3f {
  uint32_t channels = 0;
  uint32_t h = 0;
  uint32_t w = 0;
  std::vector<float> data;  // [channel][row][col]

  Grid3f() = default;
  Grid3f(uint32_t c, uint32_t h_, uint32_t w_)
      : channels(c), h(h_), w(w_), data((size_t)c * h_ * w_, 0.f) {}

  float& at(uint32_t c, uint32_t r, uint32_t col) {
    return data[((size_t)c * h + r) * w + col];
  }
  float at(uint32_t c, uint32_t r, uint32_t col) const {
    return data[((size_t)c * h + r) * w + col];
  }
};

struct ConvLayer {
  uint32_t in_ch = 0;
  uint32_t out_ch = 0;
  std::vector<float> kernel;  // out_ch x in_ch x 3 x 3, row-major
  std::vector<float> bias;    // out_ch
  Activation act = Activation::none;
};

// Same-size zero-padded 3x3 correlation plus bias plus activation.
// Accumulates per-tap shifted rows into a double plane: vectorizable inner
// loops and better summation accuracy than per-pixel float accumulation.
inline Grid3f conv_forward(const ConvLayer& layer, const Grid3f& input) {
  if (input.channels != layer.in_ch ||
      layer.kernel.size() != (size_t)layer.out_ch * layer.in_ch * 9 ||
      layer.bias.size() != layer.out_ch || input.h < 1 || input.w < 1) {
    throw std::invalid_argument("conv_forward: dimension mismatch");
  }
  const uint32_t h = input.h, w = input.w;
  const size_t plane = (size_t)h * w;
  Grid3f out(layer.out_ch, h, w);
  std::vector<double> acc(plane);
  for (uint32_t o = 0; o < layer.out_ch; ++o) {
    std::fill(acc.begin(), acc.end(), (double)layer.bias[o]);
    for (uint32_t i = 0; i < layer.in_ch; ++i) {
      const float* k = layer.kernel.data() + ((size_t)o * layer.in_ch + i) * 9;
      const float* in_plane = input.data.data() + i * plane;
      for (int kr = -1; kr <= 1; ++kr) {
        for (int kc = -1; kc <= 1; ++kc) {
          double kv = k[(kr + 1) * 3 + (kc + 1)];
          if (kv == 0.0) continue;
          int r0 = std::max(0, -kr), r1 = (int)h - std::max(0, kr);
          int c0 = std::max(0, -kc), c1 = (int)w - std::max(0, kc);
          for (int r = r0; r < r1; ++r) {
            const float* src = in_plane + (size_t)(r + kr) * w + (c0 + kc);
            double* dst = acc.data() + (size_t)r * w + c0;
            for (int c = c0; c < c1; ++c) dst[c - c0] += kv * (double)src[c - c0];
          }
        }
      }
    }
    float* out_plane = out.data.data() + o * plane;
    for (size_t idx = 0; idx < plane; ++idx)
      out_plane[idx] = apply_activation(layer.act, (float)acc[idx]);
  }
  return out;
}

inline Grid3f conv_net_forward(std::span<const ConvLayer> layers, const Grid3f& input) {
  Grid3f cur = input;
  for (const auto& layer : layers) cur = conv_forward(layer, cur);
  return cur;
}

// ---------------------------------------------------------------------------
// Weights bundle: the five inference networks used by the pipeline.
// ---------------------------------------------------------------------------
struct WeightsBundle {
  std::vector<DenseLayer> att_head;    // anchor features -> per-primitive attributes
  std::vector<DenseLayer> mot_head;    // aggregated features + time -> quaternion/translation
  std::vector<ConvLayer> ent_stream;   // previous stream frames -> (mu, sigma)
  std::vector<ConvLayer> ent_fragment; // previous feature fragments -> (mu, sigma)
  std::vector<DenseLayer> ent_attr;    // quantized feature -> per-attribute (mu, sigma, Q)
};

namespace detail {

constexpr uint32_t kWeightsMagic = 0x57464947u;  // "GIFW"
constexpr uint16_t kWeightsVersion = 1;

inline void write_dense_chunk(ByteWriter& w, const std::vector<DenseLayer>& net) {
  w.u32((uint32_t)net.size());
  for (const auto& l : net) {
    w.u8(0);  // dense
    w.u8((uint8_t)l.act);
    w.u32(l.in_dim);
    w.u32(l.out_dim);
    for (float v : l.weight) w.f32(v);
    for (float v : l.bias) w.f32(v);
  }
}

inline void write_conv_chunk(ByteWriter& w, const std::vector<ConvLayer>& net) {
  w.u32((uint32_t)net.size());
  for (const auto& l : net) {
    w.u8(1);  // conv
    w.u8((uint8_t)l.act);
    w.u32(l.in_ch);
    w.u32(l.out_ch);
    for (float v : l.kernel) w.f32(v);
    for (float v : l.bias) w.f32(v);
  }
}

inline Activation read_activation(ByteReader& r) {
  uint8_t a = r.u8();
  if (a > 4) throw FormatError("weights: unknown activation code");
  return (Activation)a;
}

inline std::vector<DenseLayer> read_dense_chunk(ByteReader& r) {
  uint32_t count = r.u32();
  if (count > 64) throw FormatError("weights: implausible layer count");
  std::vector<DenseLayer> net(count);
  for (auto& l : net) {
    if (r.u8() != 0) throw FormatError("weights: expected dense layer");
    l.act = read_activation(r);
    l.in_dim = r.u32();
    l.out_dim = r.u32();
    if ((uint64_t)l.in_dim * l.out_dim > (1ull << 24))
      throw FormatError("weights: implausible layer size");
    l.weight.resize((size_t)l.in_dim * l.out_dim);
    for (auto& v : l.weight) v = r.f32();
    l.bias.resize(l.out_dim);
    for (auto& v : l.bias) v = r.f32();
  }
  return net;
}

inline std::vector<ConvLayer> read_conv_chunk(ByteReader& r) {
  uint32_t count = r.u32();
  if (count > 64) throw FormatError("weights: implausible layer count");
  std::vector<ConvLayer> net(count);
  for (auto& l : net) {
    if (r.u8() != 1) throw FormatError("weights: expected conv layer");
    l.act = read_activation(r);
    l.in_ch = r.u32();
    l.out_ch = r.u32();
    if ((uint64_t)l.in_ch * l.out_ch > (1ull << 22))
      throw FormatError("weights: implausible layer size");
    l.kernel.resize((size_t)l.in_ch * l.out_ch * 9);
    for (auto& v : l.kernel) v = r.f32();
    l.bias.resize(l.out_ch);
    for (auto& v : l.bias) v = r.f32();
  }
  return net;
}

inline void write_name(ByteWriter& w, const char* name) {
  size_t len = std::strlen(name);
  w.u8((uint8_t)len);
  w.bytes(std::span<const uint8_t>((const uint8_t*)name, len));
}

inline std::string read_name(ByteReader& r) {
  uint8_t len = r.u8();
  auto b = r.bytes(len);
  return std::string((const char*)b.data(), b.size());
}

template <typename Layer, typename InOf, typename OutOf>
inline void check_chain(const std::vector<Layer>& net, const char* name, InOf in_of, OutOf out_of) {
  for (size_t i = 0; i + 1 < net.size(); ++i) {
    if (out_of(net[i]) != in_of(net[i + 1]))
      throw FormatError(std::string("weights: dimension chain violation in ") + name);
  }
}

inline void check_finite_dense(const std::vector<DenseLayer>& net, const char* name) {
  for (const auto& l : net) {
    for (float v : l.weight)
      if (!std::isfinite(v)) throw FormatError(std::string("weights: non-finite value in ") + name);
    for (float v : l.bias)
      if (!std::isfinite(v)) throw FormatError(std::string("weights: non-finite value in ") + name);
  }
}

inline void check_finite_conv(const std::vector<ConvLayer>& net, const char* name) {
  for (const auto& l : net) {
    for (float v : l.kernel)
      if (!std::isfinite(v)) throw FormatError(std::string("weights: non-finite value in ") + name);
    for (float v : l.bias)
      if (!std::isfinite(v)) throw FormatError(std::string("weights: non-finite value in ") + name);
  }
}

}  // namespace detail

// Serializes a bundle to the "GIFW" chunked binary layout (see docs/FORMATS.md).
// save/load round-trips are bit-exact.
inline std::vector<uint8_t> save_weights(const WeightsBundle& bundle) {
  ByteWriter w;
  w.u32(detail::kWeightsMagic);
  w.u16(detail::kWeightsVersion);
  w.u16(5);  // network count
  detail::write_name(w, "att_head");
  detail::write_dense_chunk(w, bundle.att_head);
  detail::write_name(w, "mot_head");
  detail::write_dense_chunk(w, bundle.mot_head);
  detail::write_name(w, "ent_stream");
  detail::write_conv_chunk(w, bundle.ent_stream);
  detail::write_name(w, "ent_fragment");
  detail::write_conv_chunk(w, bundle.ent_fragment);
  detail::write_name(w, "ent_attr");
  detail::write_dense_chunk(w, bundle.ent_attr);
  return w.take();
}

inline WeightsBundle load_weights(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.u32() != detail::kWeightsMagic) throw FormatError("weights: bad magic");
  if (r.u16() != detail::kWeightsVersion) throw FormatError("weights: unsupported version");
  if (r.u16() != 5) throw FormatError("weights: unexpected network count");
  WeightsBundle bundle;
  bool seen[5] = {false, false, false, false, false};
  for (int n = 0; n < 5; ++n) {
    std::string name = detail::read_name(r);
    if (name == "att_head" && !seen[0]) {
      bundle.att_head = detail::read_dense_chunk(r);
      seen[0] = true;
    } else if (name == "mot_head" && !seen[1]) {
      bundle.mot_head = detail::read_dense_chunk(r);
      seen[1] = true;
    } else if (name == "ent_stream" && !seen[2]) {
      bundle.ent_stream = detail::read_conv_chunk(r);
      seen[2] = true;
    } else if (name == "ent_fragment" && !seen[3]) {
      bundle.ent_fragment = detail::read_conv_chunk(r);
      seen[3] = true;
    } else if (name == "ent_attr" && !seen[4]) {
      bundle.ent_attr = detail::read_dense_chunk(r);
      seen[4] = true;
    } else {
      throw FormatError("weights: unknown or duplicate network name: " + name);
    }
  }
  auto dense_in = [](const DenseLayer& l) { return l.in_dim; };
  auto dense_out = [](const DenseLayer& l) { return l.out_dim; };
  auto conv_in = [](const ConvLayer& l) { return l.in_ch; };
  auto conv_out = [](const ConvLayer& l) { return l.out_ch; };
  detail::check_chain(bundle.att_head, "att_head", dense_in, dense_out);
  detail::check_chain(bundle.mot_head, "mot_head", dense_in, dense_out);
  detail::check_chain(bundle.ent_attr, "ent_attr", dense_in, dense_out);
  detail::check_chain(bundle.ent_stream, "ent_stream", conv_in, conv_out);
  detail::check_chain(bundle.ent_fragment, "ent_fragment", conv_in, conv_out);
  detail::check_finite_dense(bundle.att_head, "att_head");
  detail::check_finite_dense(bundle.mot_head, "mot_head");
  detail::check_finite_dense(bundle.ent_attr, "ent_attr");
  detail::check_finite_conv(bundle.ent_stream, "ent_stream");
  detail::check_finite_conv(bundle.ent_fragment, "ent_fragment");
  return bundle;
}

}  // namespace gifstream
