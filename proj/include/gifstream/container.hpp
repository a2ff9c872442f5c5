#pragma once

#include <chrono>
#include <optional>

#include "gifstream/deform.hpp"
#include "gifstream/rans.hpp"
#include "gifstream/reorg.hpp"

namespace gifstream {

constexpr uint32_t kSectionWeights = 1;
constexpr uint32_t kSectionPositions = 2;
constexpr uint32_t kSectionMasksMde = 3;
constexpr uint32_t kSectionVtiAttr = 4;
constexpr uint32_t kSectionVtiFeat = 5;
constexpr uint32_t kSectionVgf = 6;
constexpr uint32_t kSectionCount = 6;

constexpr uint32_t kBitstreamMagic = 0x53464947u;  // "GIFS"
constexpr uint16_t kBitstreamVersion = 1;
constexpr uint32_t kModelMagic = 0x55464947u;  // "GIFU"
constexpr uint16_t kModelVersion = 1;

struct SectionInfo {
  uint32_t id = 0;
  uint64_t offset = 0;
  uint64_t length = 0;
};

struct BitstreamHeader {
  GopConfig config;
  uint32_t gf_h = 0;
  uint32_t gf_w = 0;
  uint32_t context_frames = kContextFrames;
  uint32_t fragment_width = kFragmentWidth;
  uint64_t seed = 0;
  Vec3f pos_min{};
  Vec3f pos_max{};
  int32_t feat_lo = kFeatureSymbolMin;
  int32_t feat_hi = kFeatureSymbolMax;
  std::vector<std::pair<int32_t, int32_t>> attr_bounds;  // attr_channel_count entries
  std::array<SectionInfo, kSectionCount> sections{};
  uint64_t header_bytes = 0;
};

struct SectionRate {
  uint64_t coded_bytes = 0;    // serialized section length
  uint64_t payload_bytes = 0;  // rANS payload only (no framing)
  double estimate_bits = 0.0;  // closed-form estimate on the same symbols
};

struct RateReport {
  SectionRate masks_mde;
  SectionRate vti_attr;
  SectionRate vti_feat;
  SectionRate vgf;

  double total_estimate_bits() const {
    return masks_mde.estimate_bits + vti_attr.estimate_bits + vti_feat.estimate_bits +
           vgf.estimate_bits;
  }
  uint64_t total_payload_bytes() const {
    return masks_mde.payload_bytes + vti_attr.payload_bytes + vti_feat.payload_bytes +
           vgf.payload_bytes;
  }
};

// Grouping mirrors the usual memory-breakdown reporting: time-independent
// feature, attributes (positions, masks and per-anchor parameters),
// time-dependent feature, networks.
struct SizeBreakdown {
  uint64_t header_bytes = 0;
  uint64_t ti_feature_bytes = 0;
  uint64_t attribute_bytes = 0;
  uint64_t td_feature_bytes = 0;
  uint64_t network_bytes = 0;
  uint64_t total_bytes = 0;
};

struct DecodeTimings {
  double prediction_seconds = 0.0;
  double entropy_seconds = 0.0;
};

struct EncodedGop {
  std::vector<uint8_t> bytes;
  GopModel quantized;  // the model the decoder will reproduce, bit-exact
  RateReport rates;
};

// ---------------------------------------------------------------------------
// Section coding: every coded section is one rANS stream spanning all of its
// planes. Tables depend only on previously decoded values, so the decoder can
// rebuild them mid-stream; a single stream keeps framing overhead at one
// plane wrapper per section.
// ---------------------------------------------------------------------------
namespace detail {

struct SectionCoder {
  SymbolPlane plane;
  std::vector<int32_t> v_min;
  std::vector<int32_t> v_max;

  void add(int32_t symbol, float mu, float sigma, float step, int32_t lo, int32_t hi) {
    plane.push(symbol, mu, sigma, step);
    v_min.push_back(lo);
    v_max.push_back(hi);
  }

  double estimate_bits() const { return entropy_bits(plane); }

  std::vector<uint8_t> finish(uint64_t* payload_bytes) {
    CodedPlane coded;
    coded.count = (uint32_t)plane.size();
    uint32_t hash = fnv1a_init();
    for (size_t i = 0; i < plane.size(); ++i) {
      hash = fnv1a_step(hash, plane.symbols[i]);
      if (plane.symbols[i] < v_min[i] || plane.symbols[i] > v_max[i])
        coded.escapes.push_back(plane.symbols[i]);
    }
    coded.footer = hash;
    if (coded.count > 0) {
      CdfBuilder builder;
      RansEncoder enc;
      for (size_t i = plane.size(); i-- > 0;) {
        const CdfTable& table =
            builder.build(plane.mu[i], plane.sigma[i], plane.step[i], v_min[i], v_max[i]);
        enc.put(table, table.index_of(plane.symbols[i]));
      }
      coded.payload = enc.finish();
    }
    if (payload_bytes) *payload_bytes = coded.payload.size();
    ByteWriter w;
    serialize_plane(coded, w);
    return w.take();
  }
};

class SectionDecoder {
 public:
  explicit SectionDecoder(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    plane_ = parse_plane(r);
    if (r.remaining() != 0) throw FormatError("coded section: trailing bytes");
    if (plane_.count > 0) decoder_.emplace(plane_.payload);
  }

  uint32_t count() const { return plane_.count; }

  int32_t next(float mu, float sigma, float step, int32_t lo, int32_t hi) {
    if (consumed_ >= plane_.count) throw DecodeError("coded section: symbol count exceeded");
    const CdfTable& table = builder_.build(mu, sigma, step, lo, hi);
    uint32_t idx = decoder_->get(table);
    int32_t value;
    if (idx == table.escape_index()) {
      if (escape_pos_ >= plane_.escapes.size())
        throw DecodeError("coded section: escape payload underrun");
      value = plane_.escapes[escape_pos_++];
    } else {
      value = table.v_min + (int32_t)idx;
    }
    hash_ = fnv1a_step(hash_, value);
    ++consumed_;
    return value;
  }

  // Count, escape, state and footer checks; corruption anywhere upstream
  // lands here as a hard error instead of silently wrong output.
  void finish() const {
    if (consumed_ != plane_.count) throw DecodeError("coded section: symbol count mismatch");
    if (escape_pos_ != plane_.escapes.size())
      throw DecodeError("coded section: unconsumed escape values");
    if (plane_.count == 0) {
      if (!plane_.payload.empty() || !plane_.escapes.empty())
        throw DecodeError("coded section: malformed empty plane");
    } else if (!decoder_->clean_finish()) {
      throw DecodeError("coded section: state desynchronized");
    }
    if (hash_ != plane_.footer) throw DecodeError("coded section: footer mismatch");
  }

 private:
  CodedPlane plane_;
  std::optional<RansDecoder> decoder_;
  CdfBuilder builder_;
  uint32_t consumed_ = 0;
  size_t escape_pos_ = 0;
  uint32_t hash_ = fnv1a_init();
};

// Attribute channels carried by the VTI_ATTR section, in coded order:
// S1(3), S2(3), offsets(3K), m_knn, m_dy. Positions are stored raw and m_de
// has its own section.
inline std::vector<uint32_t> coded_attr_channels(const GopConfig& cfg) {
  std::vector<uint32_t> channels;
  for (uint32_t i = attr_idx_attr_scale(); i < attr_idx_mask_de(cfg); ++i) channels.push_back(i);
  channels.push_back(attr_idx_mask_knn(cfg));
  channels.push_back(attr_idx_mask_dy(cfg));
  return channels;
}

inline bool is_mask_channel(const GopConfig& cfg, uint32_t ch) {
  return ch == attr_idx_mask_knn(cfg) || ch == attr_idx_mask_dy(cfg);
}

// Masks keep their [0, 1] invariant through adaptive quantization; the clamp
// is idempotent under re-encoding (round(1/Q) reproduces the same symbol).
inline float dequantize_attr(const GopConfig& cfg, uint32_t ch, int32_t symbol, float q) {
  float v = (float)symbol * q;
  if (is_mask_channel(cfg, ch)) v = std::clamp(v, 0.f, 1.f);
  return v;
}

inline float mask_de_step() { return 1.f / (float)kMaskQuantLevels; }

class PhaseTimer {
 public:
  explicit PhaseTimer(double* acc) : acc_(acc) {
    if (acc_) start_ = std::chrono::steady_clock::now();
  }
  ~PhaseTimer() {
    if (acc_)
      *acc_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  PhaseTimer(const PhaseTimer&) = delete;
  PhaseTimer& operator=(const PhaseTimer&) = delete;

 private:
  double* acc_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Header serialization
// ---------------------------------------------------------------------------
namespace detail {

inline void write_config(ByteWriter& w, const GopConfig& cfg) {
  w.u32(cfg.n_anchors);
  w.u32(cfg.gaussians_per_anchor);
  w.u32(cfg.feature_channels);
  w.u32(cfg.stream_channels);
  w.u32(cfg.frame_count);
  w.u32(cfg.knn_k);
  w.u32(cfg.grid_h);
  w.u32(cfg.grid_w);
}

inline GopConfig read_config(ByteReader& r) {
  GopConfig cfg;
  cfg.n_anchors = r.u32();
  cfg.gaussians_per_anchor = r.u32();
  cfg.feature_channels = r.u32();
  cfg.stream_channels = r.u32();
  cfg.frame_count = r.u32();
  cfg.knn_k = r.u32();
  cfg.grid_h = r.u32();
  cfg.grid_w = r.u32();
  return cfg;
}

// Writes the header with zeroed section offsets/lengths; returns the byte
// position of the section table so the caller can patch it.
inline size_t write_header(ByteWriter& w, const BitstreamHeader& h) {
  w.u32(kBitstreamMagic);
  w.u16(kBitstreamVersion);
  w.u16(0);  // flags
  write_config(w, h.config);
  w.u32(h.gf_h);
  w.u32(h.gf_w);
  w.u32(h.context_frames);
  w.u32(h.fragment_width);
  w.u64(h.seed);
  for (int a = 0; a < 3; ++a) {
    w.f32(h.pos_min[a]);
    w.f32(h.pos_max[a]);
  }
  w.i32(h.feat_lo);
  w.i32(h.feat_hi);
  w.u32((uint32_t)h.attr_bounds.size());
  for (auto [lo, hi] : h.attr_bounds) {
    w.i32(lo);
    w.i32(hi);
  }
  w.u32(kSectionCount);
  size_t table_pos = w.size();
  for (uint32_t id = 1; id <= kSectionCount; ++id) {
    w.u32(id);
    w.u64(0);
    w.u64(0);
  }
  return table_pos;
}

}  // namespace detail

inline BitstreamHeader parse_header(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.u32() != kBitstreamMagic) throw FormatError("bitstream: bad magic");
  if (r.u16() != kBitstreamVersion) throw FormatError("bitstream: unsupported version");
  r.u16();  // flags
  BitstreamHeader h;
  h.config = detail::read_config(r);
  auto cfg_report = validate_config(h.config);
  if (!cfg_report.ok()) throw FormatError("bitstream: invalid config:\n" + cfg_report.to_string());
  h.gf_h = r.u32();
  h.gf_w = r.u32();
  h.context_frames = r.u32();
  h.fragment_width = r.u32();
  if (h.context_frames != kContextFrames || h.fragment_width != kFragmentWidth)
    throw FormatError("bitstream: unsupported context parameters");
  h.seed = r.u64();
  for (int a = 0; a < 3; ++a) {
    h.pos_min[a] = r.f32();
    h.pos_max[a] = r.f32();
  }
  h.feat_lo = r.i32();
  h.feat_hi = r.i32();
  if (h.feat_lo > h.feat_hi) throw FormatError("bitstream: bad feature alphabet");
  uint32_t bounds = r.u32();
  if (bounds != attr_channel_count(h.config))
    throw FormatError("bitstream: attribute bound count mismatch");
  h.attr_bounds.resize(bounds);
  for (auto& [lo, hi] : h.attr_bounds) {
    lo = r.i32();
    hi = r.i32();
  }
  if (r.u32() != kSectionCount) throw FormatError("bitstream: unexpected section count");
  for (uint32_t i = 0; i < kSectionCount; ++i) {
    SectionInfo info;
    info.id = r.u32();
    info.offset = r.u64();
    info.length = r.u64();
    if (info.id != i + 1) throw FormatError("bitstream: section table out of order");
    if (info.offset > bytes.size() || info.length > bytes.size() - info.offset)
      throw FormatError("bitstream: section outside file");
    h.sections[i] = info;
  }
  // The raw position payload is fully determined by the anchor count; this
  // pins n_anchors to the file size before any decode-side allocation.
  if (h.sections[kSectionPositions - 1].length != (uint64_t)h.config.n_anchors * 6)
    throw FormatError("bitstream: positions section size disagrees with config");
  h.header_bytes = r.pos();
  return h;
}

// ---------------------------------------------------------------------------
// encode_gop: quantize -> sort -> assemble -> predict distributions -> code.
// Deterministic: (model, seed) fully determine the output bytes.
// ---------------------------------------------------------------------------
namespace detail {

struct QuantizedAnchor {
  Anchor anchor;
  FeatureStream stream;
  std::vector<int32_t> f_sym;       // C feature symbols (step 1)
  std::vector<int32_t> attr_sym;    // attr_channel_count symbols (x slots unused)
  std::vector<int32_t> stream_sym;  // N*P symbols for present streams
  std::array<uint16_t, 3> pos_q{};
  AttrDistribution dist;
};

inline float attr_value_of(const Anchor& a, uint32_t ch, const GopConfig& cfg) {
  if (ch >= attr_idx_mask_de(cfg)) {
    uint32_t m = ch - attr_idx_mask_de(cfg);
    return m == 0 ? a.mask_de : (m == 1 ? a.mask_knn : a.mask_dy);
  }
  if (ch >= attr_idx_offsets()) return a.offsets[ch - attr_idx_offsets()];
  if (ch >= attr_idx_offset_scale()) return a.offset_scale[ch - attr_idx_offset_scale()];
  if (ch >= attr_idx_attr_scale()) return a.attr_scale[ch - attr_idx_attr_scale()];
  return a.position[ch];
}

inline void set_attr_value(Anchor& a, uint32_t ch, float v, const GopConfig& cfg) {
  if (ch >= attr_idx_mask_de(cfg)) {
    uint32_t m = ch - attr_idx_mask_de(cfg);
    (m == 0 ? a.mask_de : (m == 1 ? a.mask_knn : a.mask_dy)) = v;
  } else if (ch >= attr_idx_offsets()) {
    a.offsets[ch - attr_idx_offsets()] = v;
  } else if (ch >= attr_idx_offset_scale()) {
    a.offset_scale[ch - attr_idx_offset_scale()] = v;
  } else if (ch >= attr_idx_attr_scale()) {
    a.attr_scale[ch - attr_idx_attr_scale()] = v;
  } else {
    a.position[ch] = v;
  }
}

}  // namespace detail

inline EncodedGop encode_gop(const GopModel& input, uint64_t seed) {
  {
    ValidationReport report = validate(input);
    if (!report.ok()) throw ValidationError("encode_gop: invalid model:\n" + report.to_string());
  }
  const GopConfig& cfg = input.config;
  const uint32_t n = cfg.n_anchors;
  const uint32_t attr_count = attr_channel_count(cfg);
  const uint32_t mde_ch = attr_idx_mask_de(cfg);
  const auto coded_channels = detail::coded_attr_channels(cfg);

  // Position range over the whole GOP, one (min, max) per axis.
  Vec3f pos_min = input.anchors[0].position;
  Vec3f pos_max = input.anchors[0].position;
  for (const auto& a : input.anchors) {
    for (int ax = 0; ax < 3; ++ax) {
      pos_min[ax] = std::min(pos_min[ax], a.position[ax]);
      pos_max[ax] = std::max(pos_max[ax], a.position[ax]);
    }
  }

  // Stage 1: per-anchor quantization in input order.
  std::vector<detail::QuantizedAnchor> q(n);
  for (uint32_t i = 0; i < n; ++i) {
    auto& qa = q[i];
    const Anchor& src = input.anchors[i];
    qa.anchor = src;

    qa.f_sym.resize(cfg.feature_channels);
    for (uint32_t c = 0; c < cfg.feature_channels; ++c) {
      qa.f_sym[c] = quantize_value(src.feature[c], 1.0);
      qa.anchor.feature[c] = (float)qa.f_sym[c];
    }
    // Distribution params are predicted from the quantized feature, which the
    // decoder reconstructs before it needs them.
    qa.dist = predict_attr_params(qa.anchor.feature, input.weights.ent_attr);

    qa.attr_sym.assign(attr_count, 0);
    int32_t level = quantize_mask_de(src.mask_de);
    qa.attr_sym[mde_ch] = level;
    qa.anchor.mask_de = (float)level / (float)kMaskQuantLevels;
    for (uint32_t ch : coded_channels) {
      float v = detail::attr_value_of(src, ch, cfg);
      float step = qa.dist.q[ch];
      int32_t sym = quantize_value(v, step);
      qa.attr_sym[ch] = sym;
      detail::set_attr_value(qa.anchor, ch, detail::dequantize_attr(cfg, ch, sym, step), cfg);
    }

    for (int ax = 0; ax < 3; ++ax) {
      double range = (double)pos_max[ax] - (double)pos_min[ax];
      uint16_t qv = 0;
      if (range > 0.0) {
        double ratio = ((double)src.position[ax] - (double)pos_min[ax]) / range;
        qv = (uint16_t)std::clamp<long long>(std::llround(ratio * 65535.0), 0, 65535);
      }
      qa.pos_q[ax] = qv;
      qa.anchor.position[ax] = (float)((double)pos_min[ax] + (double)qv * range / 65535.0);
    }

    qa.stream.frames.assign((size_t)cfg.frame_count * cfg.stream_channels, 0.f);
    qa.stream.present = level > 0;
    if (qa.stream.present) {
      qa.stream_sym.resize(qa.stream.frames.size());
      for (size_t t = 0; t < qa.stream.frames.size(); ++t) {
        qa.stream_sym[t] = quantize_value(input.streams[i].frames[t], 1.0);
        qa.stream.frames[t] = (float)qa.stream_sym[t];
      }
    }
  }

  // Stage 2: sort the quantized model onto the grid.
  GopModel staged;
  staged.config = cfg;
  staged.weights = input.weights;
  staged.quantized = true;
  staged.anchors.resize(n);
  staged.streams.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    staged.anchors[i] = q[i].anchor;
    staged.streams[i] = q[i].stream;
  }
  LayoutMaps layout = build_layout(staged, seed);

  // Stage 3: reorder into row-major scan order; the decoder reproduces the
  // model in exactly this order.
  std::vector<uint32_t> perm;
  perm.reserve(n);
  for (uint32_t cell : layout.ti_grid)
    if (cell != kEmptyCell) perm.push_back(cell);

  EncodedGop result;
  GopModel& out = result.quantized;
  out.config = cfg;
  out.weights = input.weights;
  out.quantized = true;
  out.anchors.resize(n);
  out.streams.resize(n);
  for (uint32_t j = 0; j < n; ++j) {
    out.anchors[j] = std::move(q[perm[j]].anchor);
    out.streams[j] = std::move(q[perm[j]].stream);
  }

  std::vector<uint32_t> gf_order;  // scan positions with surviving streams
  for (uint32_t j = 0; j < n; ++j)
    if (q[perm[j]].attr_sym[mde_ch] > 0) gf_order.push_back(j);
  auto [gf_h, gf_w] = gf_dims_for(gf_order.size());

  // Stage 4: header (attribute symbol bounds come from the data).
  BitstreamHeader header;
  header.config = cfg;
  header.gf_h = gf_h;
  header.gf_w = gf_w;
  header.seed = seed;
  header.pos_min = pos_min;
  header.pos_max = pos_max;
  header.attr_bounds.assign(attr_count, {0, 0});
  header.attr_bounds[mde_ch] = {0, kMaskQuantLevels};
  for (uint32_t ch : coded_channels) {
    int32_t lo = q[0].attr_sym[ch], hi = lo;
    for (uint32_t i = 1; i < n; ++i) {
      lo = std::min(lo, q[i].attr_sym[ch]);
      hi = std::max(hi, q[i].attr_sym[ch]);
    }
    header.attr_bounds[ch] = {lo, hi};
  }

  // Stage 5: sections.
  std::vector<uint8_t> weights_bytes = save_weights(input.weights);

  ByteWriter positions;
  for (uint32_t j = 0; j < n; ++j)
    for (int ax = 0; ax < 3; ++ax) positions.u16(q[perm[j]].pos_q[ax]);

  detail::SectionCoder masks;
  for (uint32_t j = 0; j < n; ++j) {
    const auto& qa = q[perm[j]];
    masks.add(qa.attr_sym[mde_ch], qa.dist.mu[mde_ch], qa.dist.sigma[mde_ch],
              detail::mask_de_step(), 0, kMaskQuantLevels);
  }

  detail::SectionCoder attrs;
  for (uint32_t ch : coded_channels) {
    auto [lo, hi] = header.attr_bounds[ch];
    for (uint32_t j = 0; j < n; ++j) {
      const auto& qa = q[perm[j]];
      attrs.add(qa.attr_sym[ch], qa.dist.mu[ch], qa.dist.sigma[ch], qa.dist.q[ch], lo, hi);
    }
  }

  // Feature fragments, auto-regressive over previously decoded fragments.
  detail::SectionCoder feats;
  {
    const uint32_t frag_total = fragment_count(cfg.feature_channels);
    std::vector<Grid3f> decoded;
    decoded.reserve(frag_total);
    for (uint32_t fi = 0; fi < frag_total; ++fi) {
      std::vector<Grid3f> ctx(kContextFrames, Grid3f(kFragmentWidth, cfg.grid_h, cfg.grid_w));
      for (uint32_t k = 0; k < kContextFrames; ++k) {
        if (fi >= kContextFrames - k) ctx[k] = decoded[fi - (kContextFrames - k)];
      }
      MuSigmaGrid ms = predict_fragment(ctx, input.weights.ent_fragment);
      uint32_t width = std::min(kFragmentWidth, cfg.feature_channels - fi * kFragmentWidth);
      Grid3f dec(kFragmentWidth, cfg.grid_h, cfg.grid_w);
      for (uint32_t c = 0; c < width; ++c) {
        uint32_t gch = fi * kFragmentWidth + c;
        for (uint32_t j = 0; j < n; ++j) {
          uint32_t r = j / cfg.grid_w, col = j % cfg.grid_w;
          int32_t sym = q[perm[j]].f_sym[gch];
          feats.add(sym, ms.mu.at(c, r, col), ms.sigma.at(c, r, col), 1.f, header.feat_lo,
                    header.feat_hi);
          dec.at(c, r, col) = (float)sym;
        }
      }
      decoded.push_back(std::move(dec));
    }
  }

  // Stream frames, auto-regressive over previously decoded frames.
  detail::SectionCoder streams;
  if (!gf_order.empty()) {
    std::vector<Grid3f> history;
    for (uint32_t t = 0; t < cfg.frame_count; ++t) {
      std::vector<Grid3f> ctx(kContextFrames, Grid3f(cfg.stream_channels, gf_h, gf_w));
      for (uint32_t k = 0; k < kContextFrames; ++k) {
        size_t have = history.size();
        if (have + k >= kContextFrames) ctx[k] = history[have + k - kContextFrames];
      }
      MuSigmaGrid ms = predict_stream_frame(ctx, input.weights.ent_stream);
      Grid3f dec(cfg.stream_channels, gf_h, gf_w);
      for (uint32_t ch = 0; ch < cfg.stream_channels; ++ch) {
        for (size_t j = 0; j < gf_order.size(); ++j) {
          uint32_t r = (uint32_t)(j / gf_w), col = (uint32_t)(j % gf_w);
          const auto& qa = q[perm[gf_order[j]]];
          int32_t sym = qa.stream_sym[(size_t)t * cfg.stream_channels + ch];
          streams.add(sym, ms.mu.at(ch, r, col), ms.sigma.at(ch, r, col), 1.f, header.feat_lo,
                      header.feat_hi);
          dec.at(ch, r, col) = (float)sym;
        }
      }
      history.push_back(std::move(dec));
      if (history.size() > kContextFrames) history.erase(history.begin());
    }
  }

  std::vector<uint8_t> masks_bytes = masks.finish(&result.rates.masks_mde.payload_bytes);
  std::vector<uint8_t> attrs_bytes = attrs.finish(&result.rates.vti_attr.payload_bytes);
  std::vector<uint8_t> feats_bytes = feats.finish(&result.rates.vti_feat.payload_bytes);
  std::vector<uint8_t> streams_bytes = streams.finish(&result.rates.vgf.payload_bytes);
  result.rates.masks_mde.estimate_bits = masks.estimate_bits();
  result.rates.vti_attr.estimate_bits = attrs.estimate_bits();
  result.rates.vti_feat.estimate_bits = feats.estimate_bits();
  result.rates.vgf.estimate_bits = streams.estimate_bits();
  result.rates.masks_mde.coded_bytes = masks_bytes.size();
  result.rates.vti_attr.coded_bytes = attrs_bytes.size();
  result.rates.vti_feat.coded_bytes = feats_bytes.size();
  result.rates.vgf.coded_bytes = streams_bytes.size();

  // Stage 6: assemble the file and patch the section table.
  ByteWriter w;
  size_t table_pos = detail::write_header(w, header);
  const std::vector<uint8_t>* payloads[kSectionCount] = {
      &weights_bytes, &positions.data(), &masks_bytes, &attrs_bytes, &feats_bytes, &streams_bytes};
  for (uint32_t s = 0; s < kSectionCount; ++s) {
    uint64_t offset = w.size();
    w.bytes(*payloads[s]);
    w.patch_u64(table_pos + s * 20 + 4, offset);
    w.patch_u64(table_pos + s * 20 + 12, payloads[s]->size());
  }
  result.bytes = w.take();
  return result;
}

// ---------------------------------------------------------------------------
// decode_gop: exact inverse of encode_gop on the quantized model. Needs
// nothing outside the bitstream.
// ---------------------------------------------------------------------------
inline GopModel decode_gop(std::span<const uint8_t> bytes, DecodeTimings* timings = nullptr) {
  BitstreamHeader header = parse_header(bytes);
  const GopConfig& cfg = header.config;
  const uint32_t n = cfg.n_anchors;
  const uint32_t mde_ch = attr_idx_mask_de(cfg);
  double* pred_time = timings ? &timings->prediction_seconds : nullptr;
  double* ent_time = timings ? &timings->entropy_seconds : nullptr;

  auto section = [&](uint32_t id) {
    const SectionInfo& info = header.sections[id - 1];
    return bytes.subspan(info.offset, info.length);
  };

  GopModel model;
  model.config = cfg;
  model.quantized = true;
  model.weights = load_weights(section(kSectionWeights));
  {
    ValidationReport report;
    detail::validate_weights_for_config(model.weights, cfg, &report);
    if (!report.ok())
      throw FormatError("bitstream: weights incompatible with config:\n" + report.to_string());
  }
  model.anchors.resize(n);
  model.streams.resize(n);
  for (auto& a : model.anchors) {
    a.offsets.assign((size_t)3 * cfg.gaussians_per_anchor, 0.f);
    a.feature.assign(cfg.feature_channels, 0.f);
  }
  for (auto& s : model.streams)
    s.frames.assign((size_t)cfg.frame_count * cfg.stream_channels, 0.f);

  // Positions: raw 16-bit, dequantized against the header range.
  {
    ByteReader r(section(kSectionPositions));
    if (r.remaining() != (size_t)n * 6) throw FormatError("bitstream: positions section size");
    for (uint32_t j = 0; j < n; ++j) {
      for (int ax = 0; ax < 3; ++ax) {
        uint16_t qv = r.u16();
        double range = (double)header.pos_max[ax] - (double)header.pos_min[ax];
        model.anchors[j].position[ax] =
            (float)((double)header.pos_min[ax] + (double)qv * range / 65535.0);
      }
    }
  }

  // Feature fragments (needed first: attribute and mask distributions are
  // conditioned on the decoded features).
  {
    detail::SectionDecoder dec(section(kSectionVtiFeat));
    const uint32_t frag_total = fragment_count(cfg.feature_channels);
    std::vector<Grid3f> decoded;
    decoded.reserve(frag_total);
    for (uint32_t fi = 0; fi < frag_total; ++fi) {
      std::vector<Grid3f> ctx(kContextFrames, Grid3f(kFragmentWidth, cfg.grid_h, cfg.grid_w));
      for (uint32_t k = 0; k < kContextFrames; ++k) {
        if (fi >= kContextFrames - k) ctx[k] = decoded[fi - (kContextFrames - k)];
      }
      MuSigmaGrid ms;
      {
        detail::PhaseTimer timer(pred_time);
        ms = predict_fragment(ctx, model.weights.ent_fragment);
      }
      uint32_t width = std::min(kFragmentWidth, cfg.feature_channels - fi * kFragmentWidth);
      Grid3f grid(kFragmentWidth, cfg.grid_h, cfg.grid_w);
      {
        detail::PhaseTimer timer(ent_time);
        for (uint32_t c = 0; c < width; ++c) {
          uint32_t gch = fi * kFragmentWidth + c;
          for (uint32_t j = 0; j < n; ++j) {
            uint32_t r = j / cfg.grid_w, col = j % cfg.grid_w;
            int32_t sym = dec.next(ms.mu.at(c, r, col), ms.sigma.at(c, r, col), 1.f,
                                   header.feat_lo, header.feat_hi);
            model.anchors[j].feature[gch] = (float)sym;
            grid.at(c, r, col) = (float)sym;
          }
        }
      }
      decoded.push_back(std::move(grid));
    }
    dec.finish();
  }

  // Per-anchor conditional distributions from the decoded features.
  std::vector<AttrDistribution> dists(n);
  {
    detail::PhaseTimer timer(pred_time);
    for (uint32_t j = 0; j < n; ++j)
      dists[j] = predict_attr_params(model.anchors[j].feature, model.weights.ent_attr);
  }

  // m_de levels, then the attribute planes.
  {
    detail::SectionDecoder dec(section(kSectionMasksMde));
    detail::PhaseTimer timer(ent_time);
    for (uint32_t j = 0; j < n; ++j) {
      int32_t level = dec.next(dists[j].mu[mde_ch], dists[j].sigma[mde_ch],
                               detail::mask_de_step(), 0, kMaskQuantLevels);
      model.anchors[j].mask_de = (float)level / (float)kMaskQuantLevels;
      model.streams[j].present = level > 0;
    }
    dec.finish();
  }
  {
    detail::SectionDecoder dec(section(kSectionVtiAttr));
    detail::PhaseTimer timer(ent_time);
    for (uint32_t ch : detail::coded_attr_channels(cfg)) {
      auto [lo, hi] = header.attr_bounds[ch];
      for (uint32_t j = 0; j < n; ++j) {
        int32_t sym = dec.next(dists[j].mu[ch], dists[j].sigma[ch], dists[j].q[ch], lo, hi);
        detail::set_attr_value(model.anchors[j], ch,
                               detail::dequantize_attr(cfg, ch, sym, dists[j].q[ch]), cfg);
      }
    }
    dec.finish();
  }

  // Stream frames for surviving anchors, in scan order.
  {
    std::vector<uint32_t> gf_order;
    for (uint32_t j = 0; j < n; ++j)
      if (model.streams[j].present) gf_order.push_back(j);
    auto [gf_h, gf_w] = gf_dims_for(gf_order.size());
    if (gf_h != header.gf_h || gf_w != header.gf_w)
      throw FormatError("bitstream: packed stream dims disagree with decoded masks");

    detail::SectionDecoder dec(section(kSectionVgf));
    if (!gf_order.empty()) {
      std::vector<Grid3f> history;
      for (uint32_t t = 0; t < cfg.frame_count; ++t) {
        std::vector<Grid3f> ctx(kContextFrames, Grid3f(cfg.stream_channels, gf_h, gf_w));
        for (uint32_t k = 0; k < kContextFrames; ++k) {
          size_t have = history.size();
          if (have + k >= kContextFrames) ctx[k] = history[have + k - kContextFrames];
        }
        MuSigmaGrid ms;
        {
          detail::PhaseTimer timer(pred_time);
          ms = predict_stream_frame(ctx, model.weights.ent_stream);
        }
        Grid3f grid(cfg.stream_channels, gf_h, gf_w);
        {
          detail::PhaseTimer timer(ent_time);
          for (uint32_t ch = 0; ch < cfg.stream_channels; ++ch) {
            for (size_t j = 0; j < gf_order.size(); ++j) {
              uint32_t r = (uint32_t)(j / gf_w), col = (uint32_t)(j % gf_w);
              int32_t sym = dec.next(ms.mu.at(ch, r, col), ms.sigma.at(ch, r, col), 1.f,
                                     header.feat_lo, header.feat_hi);
              model.streams[gf_order[j]].frames[(size_t)t * cfg.stream_channels + ch] = (float)sym;
              grid.at(ch, r, col) = (float)sym;
            }
          }
        }
        history.push_back(std::move(grid));
        if (history.size() > kContextFrames) history.erase(history.begin());
      }
    }
    dec.finish();
  }

  return model;
}

// ---------------------------------------------------------------------------
// Uncompressed model interchange ("GIFU")
// ---------------------------------------------------------------------------
inline std::vector<uint8_t> write_model(const GopModel& model) {
  ByteWriter w;
  w.u32(kModelMagic);
  w.u16(kModelVersion);
  w.u8(model.quantized ? 1 : 0);
  w.u8(0);  // pad
  detail::write_config(w, model.config);
  for (const auto& a : model.anchors) {
    for (int ax = 0; ax < 3; ++ax) w.f32(a.position[ax]);
    for (int ax = 0; ax < 3; ++ax) w.f32(a.attr_scale[ax]);
    for (int ax = 0; ax < 3; ++ax) w.f32(a.offset_scale[ax]);
    for (float v : a.offsets) w.f32(v);
    w.f32(a.mask_de);
    w.f32(a.mask_knn);
    w.f32(a.mask_dy);
    for (float v : a.feature) w.f32(v);
  }
  for (const auto& s : model.streams) {
    w.u8(s.present ? 1 : 0);
    for (float v : s.frames) w.f32(v);
  }
  std::vector<uint8_t> weights = save_weights(model.weights);
  w.u64(weights.size());
  w.bytes(weights);
  return w.take();
}

inline GopModel read_model(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.u32() != kModelMagic) throw FormatError("model: bad magic");
  if (r.u16() != kModelVersion) throw FormatError("model: unsupported version");
  GopModel model;
  model.quantized = r.u8() != 0;
  r.u8();
  model.config = detail::read_config(r);
  auto cfg_report = validate_config(model.config);
  if (!cfg_report.ok()) throw FormatError("model: invalid config:\n" + cfg_report.to_string());
  model.anchors.resize(model.config.n_anchors);
  model.streams.resize(model.config.n_anchors);
  for (auto& a : model.anchors) {
    for (int ax = 0; ax < 3; ++ax) a.position[ax] = r.f32();
    for (int ax = 0; ax < 3; ++ax) a.attr_scale[ax] = r.f32();
    for (int ax = 0; ax < 3; ++ax) a.offset_scale[ax] = r.f32();
    a.offsets.resize((size_t)3 * model.config.gaussians_per_anchor);
    for (auto& v : a.offsets) v = r.f32();
    a.mask_de = r.f32();
    a.mask_knn = r.f32();
    a.mask_dy = r.f32();
    a.feature.resize(model.config.feature_channels);
    for (auto& v : a.feature) v = r.f32();
  }
  for (auto& s : model.streams) {
    s.present = r.u8() != 0;
    s.frames.resize((size_t)model.config.frame_count * model.config.stream_channels);
    for (auto& v : s.frames) v = r.f32();
  }
  uint64_t weights_len = r.u64();
  model.weights = load_weights(r.bytes(weights_len));
  if (r.remaining() != 0) throw FormatError("model: trailing bytes");
  return model;
}

// ---------------------------------------------------------------------------
// PLY export (binary little-endian, one vertex per primitive)
// ---------------------------------------------------------------------------
inline std::vector<uint8_t> export_ply(const GaussianFrame& frame) {
  ByteWriter w;
  std::string header =
      "ply\n"
      "format binary_little_endian 1.0\n"
      "element vertex " + std::to_string(frame.primitives.size()) + "\n"
      "property float x\n"
      "property float y\n"
      "property float z\n"
      "property float opacity\n"
      "property float scale_0\n"
      "property float scale_1\n"
      "property float scale_2\n"
      "property float rot_0\n"
      "property float rot_1\n"
      "property float rot_2\n"
      "property float rot_3\n"
      "property uchar red\n"
      "property uchar green\n"
      "property uchar blue\n"
      "end_header\n";
  w.ascii(header);
  auto to_u8 = [](float v) {
    return (uint8_t)std::clamp((int)std::lround(v * 255.f), 0, 255);
  };
  for (const auto& p : frame.primitives) {
    for (int a = 0; a < 3; ++a) w.f32(p.position[a]);
    w.f32(p.opacity);
    for (int a = 0; a < 3; ++a) w.f32(p.scale[a]);
    for (int a = 0; a < 4; ++a) w.f32(p.rotation[a]);
    for (int a = 0; a < 3; ++a) w.u8(to_u8(p.color[a]));
  }
  return w.take();
}

// ---------------------------------------------------------------------------
// Size accounting
// ---------------------------------------------------------------------------
inline SizeBreakdown size_breakdown(std::span<const uint8_t> bytes) {
  BitstreamHeader header = parse_header(bytes);
  SizeBreakdown b;
  b.total_bytes = bytes.size();
  b.header_bytes = header.header_bytes;
  b.network_bytes = header.sections[kSectionWeights - 1].length;
  b.attribute_bytes = header.sections[kSectionPositions - 1].length +
                      header.sections[kSectionMasksMde - 1].length +
                      header.sections[kSectionVtiAttr - 1].length;
  b.ti_feature_bytes = header.sections[kSectionVtiFeat - 1].length;
  b.td_feature_bytes = header.sections[kSectionVgf - 1].length;
  return b;
}

}  // namespace gifstream
