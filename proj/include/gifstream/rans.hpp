#pragma once

#include "gifstream/entropy.hpp"

namespace gifstream {

constexpr uint32_t kRansPrecision = 16;            // probability bits
constexpr uint32_t kProbScale = 1u << kRansPrecision;
constexpr uint32_t kRansLowerBound = 1u << 23;     // renormalization threshold

// ---------------------------------------------------------------------------
// Quantization (the inference form: deterministic rounding, no gradients).
// Round-half-away-from-zero of value / step.
// ---------------------------------------------------------------------------
inline int32_t quantize_value(double value, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("quantize: step must be > 0");
  if (!std::isfinite(value)) throw std::invalid_argument("quantize: value must be finite");
  double scaled = value / step;
  if (scaled >= (double)INT32_MAX) return INT32_MAX;
  if (scaled <= (double)INT32_MIN) return INT32_MIN;
  return (int32_t)std::llround(scaled);
}

inline std::vector<int32_t> quantize(std::span<const float> values, float step) {
  std::vector<int32_t> out(values.size());
  for (size_t i = 0; i < values.size(); ++i) out[i] = quantize_value(values[i], step);
  return out;
}

inline std::vector<float> dequantize(std::span<const int32_t> symbols, float step) {
  std::vector<float> out(symbols.size());
  for (size_t i = 0; i < symbols.size(); ++i) out[i] = (float)symbols[i] * step;
  return out;
}

// ---------------------------------------------------------------------------
// Quantized CDF table over a bounded alphabet [v_min, v_max] plus a trailing
// escape symbol. Total mass is exactly 2^16 and every entry has mass >= 1.
// ---------------------------------------------------------------------------
struct CdfTable {
  int32_t v_min = 0;
  int32_t v_max = 0;
  std::vector<uint32_t> cum;  // symbol_count + 1 entries, cum.back() == 2^16

  uint32_t symbol_count() const { return (uint32_t)(cum.size() - 1); }
  uint32_t escape_index() const { return symbol_count() - 1; }
  uint32_t freq(uint32_t i) const { return cum[i + 1] - cum[i]; }
  uint32_t start(uint32_t i) const { return cum[i]; }

  // Index of the (in-alphabet) value v, or the escape index.
  uint32_t index_of(int32_t v) const {
    if (v < v_min || v > v_max) return escape_index();
    return (uint32_t)(v - v_min);
  }
};

// Builds the table for one coded position from its predicted (mu, sigma) and
// quantization step. One unit of the 2^16 budget is reserved for every entry
// (so escape and tail symbols always have mass >= 1); the rest is apportioned
// to the interval masses by the largest-remainder rule with index tie-break.
// The construction is integer-deterministic: encoder and decoder rebuild
// bit-identical tables from the same (mu, sigma, step).
//
// The Gaussian tail beyond ~6.6 sigma carries no representable mass, so only
// the window around the mean needs CDF evaluations. The builder reuses its
// scratch buffers; the auto-regressive coders construct one table per symbol
// and this path dominates decode time.
class CdfBuilder {
 public:
  const CdfTable& build(double mu, double sigma, double step, int32_t v_min, int32_t v_max) {
    if (!(sigma > 0.0) || !(step > 0.0) || !std::isfinite(sigma) || !std::isfinite(step) ||
        !std::isfinite(mu))
      throw std::invalid_argument("build_cdf: parameters must be finite, sigma and step > 0");
    if (v_max < v_min) throw std::invalid_argument("build_cdf: empty alphabet");
    int64_t span = (int64_t)v_max - v_min + 1;
    if (span + 1 > (int64_t)kProbScale / 2)
      throw std::invalid_argument("build_cdf: alphabet too large for precision");

    const uint32_t count = (uint32_t)span + 1;  // + escape
    const uint32_t budget = kProbScale - count;
    const uint32_t escape = count - 1;

    // Window of symbols whose true mass is above rounding noise.
    double reach = 6.6 * sigma / step + 1.0;
    int64_t center = (int64_t)std::llround(mu / step);
    int64_t lo = std::max<int64_t>(v_min, center - (int64_t)std::ceil(reach));
    int64_t hi = std::min<int64_t>(v_max, center + (int64_t)std::ceil(reach));
    uint32_t wbegin = 0, wsize = 0;
    if (lo <= hi) {
      wbegin = (uint32_t)(lo - v_min);
      wsize = (uint32_t)(hi - lo + 1);
    }

    // Nonzero quotas live only in the window and the escape entry.
    touched_.clear();
    mass_.clear();
    rem_.clear();
    int64_t allocated = 0;
    if (wsize > 0) {
      double prev = standard_normal_cdf((((double)lo - 0.5) * step - mu) / sigma);
      for (uint32_t k = 0; k < wsize; ++k) {
        double next = standard_normal_cdf((((double)(lo + k) + 0.5) * step - mu) / sigma);
        double scaled = std::max(next - prev, 0.0) * (double)budget;
        prev = next;
        double base = std::floor(scaled);
        touched_.push_back(wbegin + k);
        mass_.push_back((uint32_t)base);
        rem_.push_back(scaled - base);
        allocated += (int64_t)base;
      }
    }
    {
      double below = standard_normal_cdf((((double)v_min - 0.5) * step - mu) / sigma);
      double above = 1.0 - standard_normal_cdf((((double)v_max + 0.5) * step - mu) / sigma);
      double scaled = std::max(below + above, 0.0) * (double)budget;
      double base = std::floor(scaled);
      touched_.push_back(escape);
      mass_.push_back((uint32_t)base);
      rem_.push_back(scaled - base);
      allocated += (int64_t)base;
    }

    int64_t leftover = (int64_t)budget - allocated;
    if (leftover < 0) throw std::logic_error("build_cdf: over-allocated budget");
    if (leftover > 0) {
      // Largest remainder first, index ascending on ties. Untouched entries
      // all have remainder zero; leftover practically never exceeds the
      // positive remainders (sum of fractional parts), so the common path
      // stays within the touched set.
      order_.resize(touched_.size());
      for (uint32_t i = 0; i < (uint32_t)order_.size(); ++i) order_[i] = i;
      std::sort(order_.begin(), order_.end(), [&](uint32_t a, uint32_t b) {
        if (rem_[a] != rem_[b]) return rem_[a] > rem_[b];
        return touched_[a] < touched_[b];
      });
      int64_t positives = 0;
      for (double r : rem_) positives += r > 0.0 ? 1 : 0;
      if (leftover <= positives) {
        for (uint32_t i : order_) {
          mass_[i] += 1;
          if (--leftover == 0) break;
        }
      } else {
        distribute_rare(count, leftover);
      }
    }

    table_.v_min = v_min;
    table_.v_max = v_max;
    table_.cum.resize(count + 1);
    table_.cum[0] = 0;
    for (uint32_t i = 0; i < count; ++i) table_.cum[i + 1] = table_.cum[i] + 1;
    for (size_t k = 0; k < touched_.size(); ++k) extra_mass_at(touched_[k], mass_[k]);
    finalize_cum();
    return table_;
  }

 private:
  // Slow path: cycle single units over the full (remainder desc, index asc)
  // order until the leftover is exhausted. Only reachable when quotas are
  // integer-exact, so performance is irrelevant here.
  void distribute_rare(uint32_t count, int64_t leftover) {
    std::vector<double> rem_full(count, 0.0);
    std::vector<uint32_t> mass_full(count, 0);
    for (size_t k = 0; k < touched_.size(); ++k) {
      rem_full[touched_[k]] = rem_[k];
      mass_full[touched_[k]] = mass_[k];
    }
    std::vector<uint32_t> order(count);
    for (uint32_t i = 0; i < count; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
      if (rem_full[a] != rem_full[b]) return rem_full[a] > rem_full[b];
      return a < b;
    });
    while (leftover > 0) {
      for (uint32_t i : order) {
        mass_full[i] += 1;
        if (--leftover == 0) break;
      }
    }
    touched_.clear();
    mass_.clear();
    rem_.clear();
    for (uint32_t i = 0; i < count; ++i) {
      if (mass_full[i] > 0) {
        touched_.push_back(i);
        mass_.push_back(mass_full[i]);
      }
    }
  }

  // cum_ currently holds the all-ones prefix; add the apportioned masses as
  // deferred deltas, then integrate once.
  void extra_mass_at(uint32_t index, uint32_t mass) { deltas_.push_back({index, mass}); }

  void finalize_cum() {
    std::sort(deltas_.begin(), deltas_.end());
    uint32_t shift = 0;
    size_t d = 0;
    for (uint32_t i = 0; i + 1 < table_.cum.size(); ++i) {
      while (d < deltas_.size() && deltas_[d].first == i) shift += deltas_[d++].second;
      table_.cum[i + 1] += shift;
    }
    deltas_.clear();
  }

  CdfTable table_;
  std::vector<uint32_t> touched_;
  std::vector<uint32_t> mass_;
  std::vector<double> rem_;
  std::vector<uint32_t> order_;
  std::vector<std::pair<uint32_t, uint32_t>> deltas_;
};

inline CdfTable build_cdf(double mu, double sigma, double step, int32_t v_min, int32_t v_max) {
  CdfBuilder builder;
  return builder.build(mu, sigma, step, v_min, v_max);
}

// ---------------------------------------------------------------------------
// rANS core: 32-bit state, 16-bit probabilities, byte-wise renormalization.
// Symbols are consumed in reverse by the encoder and decoded forward.
// ---------------------------------------------------------------------------
class RansEncoder {
 public:
  // Feed symbols in REVERSE of decode order.
  void put(const CdfTable& table, uint32_t sym_index) {
    uint32_t f = table.freq(sym_index);
    uint32_t s = table.start(sym_index);
    uint32_t x_max = f << (23 - kRansPrecision + 8);  // ((L >> 16) << 8) * f
    while (state_ >= x_max) {
      reversed_.push_back((uint8_t)(state_ & 0xff));
      state_ >>= 8;
    }
    state_ = ((state_ / f) << kRansPrecision) + (state_ % f) + s;
  }

  std::vector<uint8_t> finish() {
    for (int i = 0; i < 4; ++i) {
      reversed_.push_back((uint8_t)(state_ & 0xff));
      state_ >>= 8;
    }
    std::reverse(reversed_.begin(), reversed_.end());
    state_ = kRansLowerBound;
    return std::move(reversed_);
  }

 private:
  uint32_t state_ = kRansLowerBound;
  std::vector<uint8_t> reversed_;
};

class RansDecoder {
 public:
  explicit RansDecoder(std::span<const uint8_t> payload) : data_(payload) {
    if (data_.size() < 4) throw DecodeError("rans: payload shorter than initial state");
    state_ = 0;
    for (int i = 0; i < 4; ++i) state_ = (state_ << 8) | data_[pos_++];
  }

  uint32_t get(const CdfTable& table) {
    uint32_t slot = state_ & (kProbScale - 1);
    // Largest index with cum[i] <= slot.
    auto it = std::upper_bound(table.cum.begin(), table.cum.end(), slot);
    uint32_t idx = (uint32_t)(it - table.cum.begin()) - 1;
    uint32_t f = table.freq(idx);
    uint32_t s = table.start(idx);
    state_ = f * (state_ >> kRansPrecision) + slot - s;
    while (state_ < kRansLowerBound) {
      if (pos_ >= data_.size()) throw DecodeError("rans: payload exhausted");
      state_ = (state_ << 8) | data_[pos_++];
    }
    return idx;
  }

  // After the last symbol the state must return to the encoder's initial
  // value with every payload byte consumed; anything else is corruption.
  bool clean_finish() const { return state_ == kRansLowerBound && pos_ == data_.size(); }
  size_t consumed() const { return pos_; }

 private:
  std::span<const uint8_t> data_;
  size_t pos_ = 0;
  uint32_t state_ = 0;
};

// ---------------------------------------------------------------------------
// Coded plane container. Wire layout:
//   u32 symbol count, u32 payload length, payload bytes,
//   u16 escape count, escape values (i32 LE), u32 footer.
// The footer is an FNV-1a hash over the decoded symbol values; together with
// the count and final-state checks it turns any payload or context
// corruption into a hard decode error.
// ---------------------------------------------------------------------------
struct CodedPlane {
  uint32_t count = 0;
  std::vector<uint8_t> payload;
  std::vector<int32_t> escapes;  // raw values of escape-coded symbols, decode order
  uint32_t footer = 0;
};

inline uint32_t fnv1a_init() { return 2166136261u; }
inline uint32_t fnv1a_step(uint32_t hash, int32_t value) {
  uint32_t u = (uint32_t)value;
  for (int i = 0; i < 4; ++i) {
    hash ^= (u >> (8 * i)) & 0xff;
    hash *= 16777619u;
  }
  return hash;
}

inline void serialize_plane(const CodedPlane& plane, ByteWriter& w) {
  w.u32(plane.count);
  w.u32((uint32_t)plane.payload.size());
  w.bytes(plane.payload);
  if (plane.escapes.size() > 0xffff) throw std::invalid_argument("coded plane: too many escapes");
  w.u16((uint16_t)plane.escapes.size());
  for (int32_t v : plane.escapes) w.i32(v);
  w.u32(plane.footer);
}

inline CodedPlane parse_plane(ByteReader& r) {
  CodedPlane plane;
  plane.count = r.u32();
  uint32_t payload_len = r.u32();
  auto payload = r.bytes(payload_len);
  plane.payload.assign(payload.begin(), payload.end());
  uint16_t escape_count = r.u16();
  plane.escapes.resize(escape_count);
  for (auto& v : plane.escapes) v = r.i32();
  plane.footer = r.u32();
  return plane;
}

// One-shot encode of a symbol sequence with one table per symbol.
// Out-of-alphabet symbols are coded via the escape symbol plus a raw 32-bit
// value, so the coder is total over all int32 inputs.
inline CodedPlane rans_encode(std::span<const int32_t> symbols,
                              std::span<const CdfTable> tables) {
  if (symbols.size() != tables.size())
    throw std::invalid_argument("rans_encode: one table per symbol required");
  CodedPlane plane;
  plane.count = (uint32_t)symbols.size();
  uint32_t hash = fnv1a_init();
  for (size_t i = 0; i < symbols.size(); ++i) {
    hash = fnv1a_step(hash, symbols[i]);
    if (tables[i].index_of(symbols[i]) == tables[i].escape_index())
      plane.escapes.push_back(symbols[i]);
  }
  plane.footer = hash;
  if (plane.count == 0) return plane;  // empty payload by contract

  RansEncoder enc;
  for (size_t i = symbols.size(); i-- > 0;) enc.put(tables[i], tables[i].index_of(symbols[i]));
  plane.payload = enc.finish();
  return plane;
}

// Exact inverse of rans_encode given identical tables.
inline std::vector<int32_t> rans_decode(const CodedPlane& plane,
                                        std::span<const CdfTable> tables) {
  if (plane.count != tables.size())
    throw std::invalid_argument("rans_decode: one table per symbol required");
  std::vector<int32_t> out(plane.count);
  uint32_t hash = fnv1a_init();
  if (plane.count == 0) {
    if (!plane.payload.empty() || !plane.escapes.empty() || plane.footer != hash)
      throw DecodeError("rans: malformed empty plane");
    return out;
  }
  RansDecoder dec(plane.payload);
  size_t escape_pos = 0;
  for (size_t i = 0; i < plane.count; ++i) {
    uint32_t idx = dec.get(tables[i]);
    int32_t value;
    if (idx == tables[i].escape_index()) {
      if (escape_pos >= plane.escapes.size()) throw DecodeError("rans: escape payload underrun");
      value = plane.escapes[escape_pos++];
    } else {
      value = tables[i].v_min + (int32_t)idx;
    }
    out[i] = value;
    hash = fnv1a_step(hash, value);
  }
  if (escape_pos != plane.escapes.size()) throw DecodeError("rans: unconsumed escape values");
  if (!dec.clean_finish()) throw DecodeError("rans: state desynchronized");
  if (hash != plane.footer) throw DecodeError("rans: footer mismatch");
  return out;
}

}  // namespace gifstream
