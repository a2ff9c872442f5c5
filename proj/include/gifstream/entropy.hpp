#pragma once

#include "gifstream/model.hpp"

namespace gifstream {

constexpr float kSigmaFloor = 1e-4f;  // sigma = softplus(raw) + kSigmaFloor
constexpr float kStepFloor = 1e-3f;   // Q = softplus(raw) + kStepFloor
constexpr double kMinSymbolMass = 0x1p-32;  // mass floor before log2

// ---------------------------------------------------------------------------
// Gaussian CDF. Single shared implementation: the CDF tables on the encode
// and decode side are built from integer-rounded outputs of this exact
// function, so both sides reconstruct identical tables.
//
// Abramowitz & Stegun 26.2.17 rational approximation, |error| < 7.5e-8.
// ---------------------------------------------------------------------------
inline double standard_normal_cdf(double z) {
  if (z > 37.0) return 1.0;
  if (z < -37.0) return 0.0;
  double az = std::fabs(z);
  double t = 1.0 / (1.0 + 0.2316419 * az);
  double poly =
      t * (0.319381530 +
           t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
  double tail = std::exp(-0.5 * az * az) * 0.39894228040143267794 * poly;
  return z >= 0.0 ? 1.0 - tail : tail;
}

// Phi_{mu,sigma}(hi) - Phi_{mu,sigma}(lo).
inline double interval_mass(double mu, double sigma, double lo, double hi) {
  if (!(sigma > 0.0) || !std::isfinite(sigma) || !std::isfinite(mu))
    throw std::invalid_argument("interval_mass: parameters must be finite, sigma > 0");
  if (!(lo < hi)) throw std::invalid_argument("interval_mass: lo must be < hi");
  double mass = standard_normal_cdf((hi - mu) / sigma) - standard_normal_cdf((lo - mu) / sigma);
  return std::max(mass, 0.0);
}

// ---------------------------------------------------------------------------
// Coded symbols with per-symbol distribution parameters: the unit handed to
// the entropy estimate and the rANS coder.
// ---------------------------------------------------------------------------
struct SymbolPlane {
  std::vector<int32_t> symbols;
  std::vector<float> mu;
  std::vector<float> sigma;
  std::vector<float> step;

  size_t size() const { return symbols.size(); }
  void push(int32_t symbol, float m, float s, float q) {
    symbols.push_back(symbol);
    mu.push_back(m);
    sigma.push_back(s);
    step.push_back(q);
  }
};

// Closed-form rate estimate: -sum log2 of the probability mass of each
// symbol's quantization interval ((v - 0.5) q, (v + 0.5) q), masses floored
// at 2^-32 so no symbol counts more than 32 bits.
inline double entropy_bits(const SymbolPlane& plane) {
  double bits = 0.0;
  for (size_t i = 0; i < plane.symbols.size(); ++i) {
    double q = plane.step[i];
    double v = plane.symbols[i];
    double mass = interval_mass(plane.mu[i], plane.sigma[i], (v - 0.5) * q, (v + 0.5) * q);
    bits -= std::log2(std::max(mass, kMinSymbolMass));
  }
  return bits;
}

// ---------------------------------------------------------------------------
// Distribution prediction heads
// ---------------------------------------------------------------------------
struct MuSigmaGrid {
  Grid3f mu;
  Grid3f sigma;
};

namespace detail {

// Concatenates k context grids channel-wise, runs the convnet and splits the
// 2W output channels into mu and softplus-mapped sigma.
inline MuSigmaGrid conv_predict(std::span<const Grid3f> context, uint32_t width,
                                std::span<const ConvLayer> net) {
  if (context.size() != kContextFrames)
    throw std::invalid_argument("conv_predict: expected exactly k context grids");
  const uint32_t h = context[0].h, w = context[0].w;
  Grid3f input(0, h, w);
  for (const auto& g : context) {
    if (g.h != h || g.w != w) throw std::invalid_argument("conv_predict: grid size mismatch");
    input.channels += g.channels;
    input.data.insert(input.data.end(), g.data.begin(), g.data.end());
  }
  Grid3f raw = conv_net_forward(net, input);
  if (raw.channels != 2 * width)
    throw std::invalid_argument("conv_predict: net output channels mismatch");
  MuSigmaGrid out;
  out.mu = Grid3f(width, h, w);
  out.sigma = Grid3f(width, h, w);
  const size_t plane = (size_t)h * w;
  std::copy(raw.data.begin(), raw.data.begin() + (size_t)width * plane, out.mu.data.begin());
  for (size_t i = 0; i < (size_t)width * plane; ++i)
    out.sigma.data[i] = softplus(raw.data[(size_t)width * plane + i]) + kSigmaFloor;
  return out;
}

}  // namespace detail

// Predicts (mu, sigma) for the next stream frame from the k previous decoded
// frames. Missing history must be supplied as all-zero grids; the first
// frame's prediction therefore depends on the weights alone.
inline MuSigmaGrid predict_stream_frame(std::span<const Grid3f> prev_frames,
                                        std::span<const ConvLayer> ent_stream) {
  if (ent_stream.empty()) throw std::invalid_argument("predict_stream_frame: empty network");
  uint32_t p = ent_stream.back().out_ch / 2;
  for (const auto& g : prev_frames)
    if (g.channels != p) throw std::invalid_argument("predict_stream_frame: channel mismatch");
  return detail::conv_predict(prev_frames, p, ent_stream);
}

// Same mechanics over feature fragments of the time-independent planes.
// Fragments narrower than kFragmentWidth are zero-padded to full width.
inline MuSigmaGrid predict_fragment(std::span<const Grid3f> prev_fragments,
                                    std::span<const ConvLayer> ent_fragment) {
  if (ent_fragment.empty()) throw std::invalid_argument("predict_fragment: empty network");
  for (const auto& g : prev_fragments)
    if (g.channels != kFragmentWidth)
      throw std::invalid_argument("predict_fragment: fragments must be padded to width G");
  return detail::conv_predict(prev_fragments, kFragmentWidth, ent_fragment);
}

inline uint32_t fragment_count(uint32_t feature_channels) {
  return (feature_channels + kFragmentWidth - 1) / kFragmentWidth;
}

// Per-attribute-channel conditional distribution and adaptive quantization
// step, derived from the (already quantized) time-independent feature, which
// the decoder reconstructs losslessly before attributes are read.
struct AttrDistribution {
  std::vector<float> mu;     // attr_channel_count entries
  std::vector<float> sigma;  // softplus + 1e-4
  std::vector<float> q;      // softplus + 1e-3
};

inline AttrDistribution predict_attr_params(std::span<const float> f_quantized,
                                            std::span<const DenseLayer> ent_attr) {
  std::vector<float> raw = mlp_forward(ent_attr, f_quantized);
  if (raw.size() % 3 != 0) throw std::invalid_argument("predict_attr_params: bad output size");
  size_t channels = raw.size() / 3;
  AttrDistribution dist;
  dist.mu.resize(channels);
  dist.sigma.resize(channels);
  dist.q.resize(channels);
  // Interleaved per channel: (mu_raw, sigma_raw, q_raw).
  for (size_t c = 0; c < channels; ++c) {
    dist.mu[c] = raw[3 * c + 0];
    dist.sigma[c] = softplus(raw[3 * c + 1]) + kSigmaFloor;
    dist.q[c] = softplus(raw[3 * c + 2]) + kStepFloor;
  }
  return dist;
}

}  // namespace gifstream
