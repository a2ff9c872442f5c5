#include <doctest.h>

#include "gifstream/container.hpp"

using namespace gifstream;

namespace {

GopConfig make_config(uint32_t n, uint32_t k, uint32_t c, uint32_t p, uint32_t frames) {
  GopConfig cfg;
  cfg.n_anchors = n;
  cfg.gaussians_per_anchor = k;
  cfg.feature_channels = c;
  cfg.stream_channels = p;
  cfg.frame_count = frames;
  cfg.knn_k = 4;
  cfg.grid_w = (uint32_t)std::ceil(std::sqrt((double)n));
  cfg.grid_h = (n + cfg.grid_w - 1) / cfg.grid_w;
  return cfg;
}

bool models_bit_equal(const GopModel& a, const GopModel& b) {
  return write_model(a) == write_model(b);
}

void check_rate_bound(const SectionRate& rate) {
  double est_bytes = rate.estimate_bits / 8.0;
  CHECK(std::fabs((double)rate.coded_bytes - est_bytes) <= 0.02 * est_bytes + 128.0);
}

}  // namespace

TEST_CASE("GIFU model file round-trips bit-exactly") {
  GopModel model = generate_synthetic(11, make_config(60, 3, 16, 4, 6), 0.4);
  std::vector<uint8_t> bytes = write_model(model);
  GopModel back = read_model(bytes);
  CHECK(write_model(back) == bytes);
}

TEST_CASE("GIFU loader rejects foreign and mismatched files") {
  GopModel model = generate_synthetic(3, make_config(4, 1, 8, 4, 2), 0.5);
  std::vector<uint8_t> bytes = write_model(model);

  std::vector<uint8_t> bad = bytes;
  bad[0] = 'Z';
  CHECK_THROWS_AS(read_model(bad), FormatError);

  std::vector<uint8_t> version = bytes;
  version[4] = 0x7f;  // version field
  CHECK_THROWS_AS(read_model(version), FormatError);

  std::vector<uint8_t> truncated(bytes.begin(), bytes.end() - 7);
  CHECK_THROWS_AS(read_model(truncated), FormatError);
}

TEST_CASE("encode/decode round-trip is bit-exact on the quantized model") {
  struct Case {
    uint32_t n, k, c, p, frames;
    double sparsity;
  };
  const Case cases[] = {
      {40, 5, 24, 4, 8, 0.3}, {1, 1, 24, 4, 1, 1.0},  {1, 5, 48, 8, 8, 0.0},
      {7, 1, 24, 8, 1, 0.5},  {64, 5, 48, 4, 3, 1.0}, {25, 2, 24, 4, 5, 0.0},
  };
  uint64_t seed = 100;
  for (const auto& c : cases) {
    GopModel model = generate_synthetic(seed, make_config(c.n, c.k, c.c, c.p, c.frames),
                                        c.sparsity);
    EncodedGop enc = encode_gop(model, seed);
    CHECK(validate(enc.quantized).ok());
    GopModel decoded = decode_gop(enc.bytes);
    CHECK(models_bit_equal(decoded, enc.quantized));
    ++seed;
  }
}

TEST_CASE("degenerate geometry: coincident anchors still round-trip") {
  GopConfig cfg = make_config(9, 2, 24, 4, 3);
  GopModel model = generate_synthetic(71, cfg, 0.5);
  for (auto& a : model.anchors) a.position = {0.25f, -1.f, 3.f};  // zero position range
  EncodedGop enc = encode_gop(model, 2);
  GopModel decoded = decode_gop(enc.bytes);
  CHECK(models_bit_equal(decoded, enc.quantized));
  for (const auto& a : decoded.anchors) {
    CHECK(a.position[0] == 0.25f);
    CHECK(a.position[1] == -1.f);
    CHECK(a.position[2] == 3.f);
  }
  EncodedGop again = encode_gop(decoded, 2);
  CHECK(again.bytes == enc.bytes);
}

TEST_CASE("encode_gop is deterministic for (model, seed)") {
  GopModel model = generate_synthetic(21, make_config(50, 2, 24, 4, 6), 0.4);
  EncodedGop a = encode_gop(model, 9);
  EncodedGop b = encode_gop(model, 9);
  CHECK(a.bytes == b.bytes);
  EncodedGop c = encode_gop(model, 10);
  CHECK(a.bytes != c.bytes);  // the sort seed is part of the contract
}

TEST_CASE("re-encoding the decoded model reproduces the bitstream byte for byte") {
  GopModel model = generate_synthetic(33, make_config(80, 5, 24, 4, 9), 0.35);
  EncodedGop enc = encode_gop(model, 5);
  GopModel decoded = decode_gop(enc.bytes);
  EncodedGop again = encode_gop(decoded, 5);
  CHECK(again.bytes == enc.bytes);
}

TEST_CASE("decode(encode(decode(b))) equals decode(b)") {
  GopModel model = generate_synthetic(55, make_config(30, 2, 16, 4, 4), 0.6);
  EncodedGop enc = encode_gop(model, 3);
  GopModel first = decode_gop(enc.bytes);
  EncodedGop enc2 = encode_gop(first, parse_header(enc.bytes).seed);
  GopModel second = decode_gop(enc2.bytes);
  CHECK(models_bit_equal(first, second));
}

TEST_CASE("encoder rejects invalid models") {
  GopModel model = generate_synthetic(2, make_config(10, 1, 8, 4, 2), 0.5);
  model.anchors[3].mask_dy = 2.f;
  CHECK_THROWS_AS(encode_gop(model, 1), ValidationError);
}

TEST_CASE("flipping a coded payload byte is a hard error, never silent corruption") {
  GopModel model = generate_synthetic(77, make_config(60, 2, 24, 4, 6), 0.5);
  EncodedGop enc = encode_gop(model, 7);
  BitstreamHeader header = parse_header(enc.bytes);

  Rng rng(8);
  int trials = 0;
  for (uint32_t id : {kSectionMasksMde, kSectionVtiAttr, kSectionVtiFeat, kSectionVgf}) {
    const SectionInfo& info = header.sections[id - 1];
    for (int i = 0; i < 6; ++i) {
      std::vector<uint8_t> corrupt = enc.bytes;
      size_t pos = info.offset + rng.below(info.length);
      corrupt[pos] ^= (uint8_t)(1 + rng.below(255));
      bool detected = false;
      try {
        GopModel out = decode_gop(corrupt);
        detected = !models_bit_equal(out, enc.quantized);
      } catch (const std::exception&) {
        detected = true;
      }
      CHECK(detected);
      ++trials;
    }
  }
  CHECK(trials == 24);
}

TEST_CASE("pruning shrinks the coded stream section to nearly nothing") {
  GopConfig cfg = make_config(100, 2, 24, 4, 8);
  GopModel dense = generate_synthetic(12, cfg, 1.0);
  GopModel empty = generate_synthetic(12, cfg, 0.0);
  EncodedGop enc_dense = encode_gop(dense, 2);
  EncodedGop enc_empty = encode_gop(empty, 2);
  CHECK(enc_empty.rates.vgf.coded_bytes < 32);  // framing only
  CHECK(enc_dense.rates.vgf.coded_bytes > 20 * enc_empty.rates.vgf.coded_bytes);
}

TEST_CASE("per-section coded size stays within 2% + 128 bytes of the estimate") {
  uint64_t seed = 500;
  for (double sparsity : {0.0, 0.3, 1.0}) {
    GopModel model = generate_synthetic(seed, make_config(120, 5, 24, 8, 10), sparsity);
    EncodedGop enc = encode_gop(model, seed);
    check_rate_bound(enc.rates.masks_mde);
    check_rate_bound(enc.rates.vti_attr);
    check_rate_bound(enc.rates.vti_feat);
    check_rate_bound(enc.rates.vgf);
    ++seed;
  }
}

TEST_CASE("decoded model decodes frames identically to the encoder-side model") {
  GopModel model = generate_synthetic(91, make_config(24, 2, 16, 4, 5), 0.5);
  EncodedGop enc = encode_gop(model, 4);
  GopModel decoded = decode_gop(enc.bytes);
  GaussianFrame a = decode_frame(enc.quantized, 0);
  GaussianFrame b = decode_frame(decoded, 0);
  REQUIRE(a.primitives.size() == b.primitives.size());
  for (size_t i = 0; i < a.primitives.size(); ++i) {
    CHECK(a.primitives[i].position == b.primitives[i].position);
    CHECK(a.primitives[i].rotation == b.primitives[i].rotation);
    CHECK(a.primitives[i].scale == b.primitives[i].scale);
  }
}

TEST_CASE("decode reports two-phase timings") {
  GopModel model = generate_synthetic(14, make_config(40, 2, 24, 4, 6), 0.5);
  EncodedGop enc = encode_gop(model, 1);
  DecodeTimings timings;
  decode_gop(enc.bytes, &timings);
  CHECK(timings.prediction_seconds >= 0.0);
  CHECK(timings.entropy_seconds > 0.0);
}

TEST_CASE("export_ply: header, payload and color scaling") {
  GaussianFrame frame;
  frame.time = 0.f;
  frame.primitives.resize(5);
  for (size_t i = 0; i < 5; ++i) {
    auto& p = frame.primitives[i];
    p.position = {(float)i, 2.f * (float)i, -1.5f};
    p.opacity = 0.5f;
    p.scale = {0.1f, 0.2f, 0.3f};
    p.rotation = {1, 0, 0, 0};
    p.color = {1.f, 0.f, 0.5f};
  }
  std::vector<uint8_t> ply = export_ply(frame);
  std::string text((const char*)ply.data(), std::min<size_t>(ply.size(), 512));
  CHECK(text.find("element vertex 5") != std::string::npos);
  CHECK(text.find("format binary_little_endian 1.0") != std::string::npos);

  size_t header_end = text.find("end_header\n");
  REQUIRE(header_end != std::string::npos);
  size_t payload_start = header_end + 11;
  CHECK(ply.size() == payload_start + 5 * (11 * 4 + 3));

  // re-parse vertex 3: positions at f32 precision, colors as u8
  ByteReader r(std::span<const uint8_t>(ply).subspan(payload_start + 3 * (11 * 4 + 3)));
  CHECK(r.f32() == 3.f);
  CHECK(r.f32() == 6.f);
  CHECK(r.f32() == -1.5f);
  r.f32();  // opacity
  for (int i = 0; i < 7; ++i) r.f32();
  CHECK(r.u8() == 255);
  CHECK(r.u8() == 0);
  CHECK(r.u8() == 128);
}

TEST_CASE("size_breakdown: categories sum to file size minus header") {
  GopModel model = generate_synthetic(17, make_config(64, 5, 24, 4, 8), 0.4);
  EncodedGop enc = encode_gop(model, 6);
  SizeBreakdown b = size_breakdown(enc.bytes);
  CHECK(b.total_bytes == enc.bytes.size());
  CHECK(b.ti_feature_bytes + b.attribute_bytes + b.td_feature_bytes + b.network_bytes ==
        b.total_bytes - b.header_bytes);

  GopModel pruned = generate_synthetic(17, make_config(64, 5, 24, 4, 8), 0.0);
  SizeBreakdown bp = size_breakdown(encode_gop(pruned, 6).bytes);
  CHECK(bp.td_feature_bytes < 32);
}

// A second, independent read of the header directly from the documented wire
// layout; the decoder must not depend on anything outside these fields.
TEST_CASE("bitstream header parses identically through an independent reader") {
  GopModel model = generate_synthetic(19, make_config(33, 2, 16, 4, 3), 0.5);
  EncodedGop enc = encode_gop(model, 12);
  const std::vector<uint8_t>& b = enc.bytes;

  auto rd_u16 = [&](size_t p) { return (uint32_t)b[p] | ((uint32_t)b[p + 1] << 8); };
  auto rd_u32 = [&](size_t p) {
    return (uint32_t)b[p] | ((uint32_t)b[p + 1] << 8) | ((uint32_t)b[p + 2] << 16) |
           ((uint32_t)b[p + 3] << 24);
  };
  auto rd_u64 = [&](size_t p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)b[p + i] << (8 * i);
    return v;
  };

  CHECK(b[0] == 'G');
  CHECK(b[1] == 'I');
  CHECK(b[2] == 'F');
  CHECK(b[3] == 'S');
  CHECK(rd_u16(4) == 1);  // version

  BitstreamHeader h = parse_header(b);
  size_t p = 8;  // past magic, version, flags
  CHECK(rd_u32(p) == h.config.n_anchors);
  CHECK(rd_u32(p + 4) == h.config.gaussians_per_anchor);
  CHECK(rd_u32(p + 8) == h.config.feature_channels);
  CHECK(rd_u32(p + 12) == h.config.stream_channels);
  CHECK(rd_u32(p + 16) == h.config.frame_count);
  p += 32;                      // config
  CHECK(rd_u32(p) == h.gf_h);   // gf dims
  CHECK(rd_u32(p + 4) == h.gf_w);
  CHECK(rd_u32(p + 8) == kContextFrames);
  CHECK(rd_u32(p + 12) == kFragmentWidth);
  CHECK(rd_u64(p + 16) == 12);  // seed
  p += 24;
  p += 24;  // position ranges, 3 x (f32 min, f32 max)
  p += 8;   // feature alphabet
  uint32_t bound_count = rd_u32(p);
  CHECK(bound_count == attr_channel_count(h.config));
  p += 4 + bound_count * 8;
  CHECK(rd_u32(p) == kSectionCount);
  p += 4;
  for (uint32_t s = 0; s < kSectionCount; ++s) {
    CHECK(rd_u32(p) == s + 1);
    CHECK(rd_u64(p + 4) == h.sections[s].offset);
    CHECK(rd_u64(p + 12) == h.sections[s].length);
    p += 20;
  }
  CHECK(p == h.header_bytes);

  // POSITIONS decodes independently: u16 against the header ranges.
  GopModel decoded = decode_gop(b);
  const SectionInfo& pos = h.sections[kSectionPositions - 1];
  float min_x, max_x;
  std::memcpy(&min_x, &b[64], 4);  // range block starts after the seed
  std::memcpy(&max_x, &b[68], 4);
  for (uint32_t j = 0; j < 5; ++j) {
    uint32_t q = rd_u16(pos.offset + (size_t)j * 6);
    double range = (double)max_x - (double)min_x;
    float expect = (float)((double)min_x + q * range / 65535.0);
    CHECK(decoded.anchors[j].position[0] == expect);
  }
}

TEST_CASE("decode_frame output does not depend on the thread cap") {
  GopConfig cfg = make_config(300, 1, 8, 4, 2);
  GopModel model = generate_synthetic(29, cfg, 0.5);
  set_thread_cap(1);
  GaussianFrame serial = decode_frame(model, 1);
  set_thread_cap(4);
  GaussianFrame parallel = decode_frame(model, 1);
  set_thread_cap(0);
  REQUIRE(serial.primitives.size() == parallel.primitives.size());
  for (size_t i = 0; i < serial.primitives.size(); ++i) {
    CHECK(serial.primitives[i].position == parallel.primitives[i].position);
    CHECK(serial.primitives[i].opacity == parallel.primitives[i].opacity);
    CHECK(serial.primitives[i].rotation == parallel.primitives[i].rotation);
  }
}

TEST_CASE("arbitrary corruption anywhere in the file never escapes as UB") {
  GopModel model = generate_synthetic(37, make_config(30, 2, 16, 4, 4), 0.5);
  EncodedGop enc = encode_gop(model, 8);
  Rng rng(12);
  // random truncations
  for (int i = 0; i < 100; ++i) {
    size_t len = rng.below(enc.bytes.size());
    std::vector<uint8_t> cut(enc.bytes.begin(), enc.bytes.begin() + len);
    try {
      decode_gop(cut);
    } catch (const std::exception&) {
    }
  }
  // random single-byte flips, header included
  for (int i = 0; i < 200; ++i) {
    std::vector<uint8_t> corrupt = enc.bytes;
    corrupt[rng.below(corrupt.size())] ^= (uint8_t)(1 + rng.below(255));
    try {
      decode_gop(corrupt);
    } catch (const std::exception&) {
    }
  }
  CHECK(true);  // reached without crashing
}

TEST_CASE("truncated or foreign bitstreams are rejected") {
  GopModel model = generate_synthetic(23, make_config(12, 1, 8, 4, 2), 0.5);
  EncodedGop enc = encode_gop(model, 1);

  std::vector<uint8_t> bad = enc.bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_gop(bad), FormatError);

  std::vector<uint8_t> truncated(enc.bytes.begin(), enc.bytes.begin() + enc.bytes.size() - 9);
  CHECK_THROWS_AS(decode_gop(truncated), FormatError);
}
