#include <doctest.h>

#include "gifstream/rans.hpp"

using namespace gifstream;

TEST_CASE("quantize: round-half-away-from-zero") {
  CHECK(quantize_value(2.5, 1.0) == 3);
  CHECK(quantize_value(-2.5, 1.0) == -3);
  CHECK(quantize_value(2.49, 1.0) == 2);
  CHECK(quantize_value(0.0, 0.25) == 0);
  CHECK_THROWS_AS(quantize_value(1.0, 0.0), std::invalid_argument);
}

TEST_CASE("dequantize(quantize(v)) lands within half a step") {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    float v = rng.uniform(-50.f, 50.f);
    float q = rng.uniform(0.01f, 3.f);
    auto syms = quantize(std::vector<float>{v}, q);
    auto back = dequantize(syms, q);
    CHECK(std::fabs(back[0] - v) <= q / 2 + 1e-5f);
  }
}

TEST_CASE("build_cdf: total mass is exactly 2^16 with every entry >= 1") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    double mu = rng.uniform(-20.f, 20.f);
    double sigma = std::exp(rng.uniform(-7.f, 3.f));
    double step = std::exp(rng.uniform(-2.f, 1.f));
    int32_t lo = (int32_t)rng.below(100) - 90;
    int32_t hi = lo + (int32_t)rng.below(400);
    CdfTable t = build_cdf(mu, sigma, step, lo, hi);
    CHECK(t.cum.back() == kProbScale);
    CHECK(t.cum.front() == 0);
    for (uint32_t s = 0; s < t.symbol_count(); ++s) CHECK(t.freq(s) >= 1);
  }
}

TEST_CASE("build_cdf: huge sigma approaches the uniform limit") {
  CdfTable t = build_cdf(0.0, 1e4, 1.0, -8, 8);
  uint32_t lo_mass = 0xffffffff, hi_mass = 0;
  for (int v = -8; v <= 8; ++v) {
    uint32_t f = t.freq(t.index_of(v));
    lo_mass = std::min(lo_mass, f);
    hi_mass = std::max(hi_mass, f);
  }
  CHECK((double)hi_mass / lo_mass < 2.0);
  // near-uniform: each in-alphabet mass tracks the directly computed
  // uniform-limit interval mass
  double uniform_mass = interval_mass(0.0, 1e4, -0.5, 0.5);
  for (int v = -8; v <= 8; ++v) {
    double expect = uniform_mass * (kProbScale - t.symbol_count());
    CHECK(std::fabs((double)t.freq(t.index_of(v)) - 1.0 - expect) <= expect * 0.05 + 2.0);
  }
}

TEST_CASE("build_cdf: quota of the central unit-Gaussian symbol") {
  // The raw (pre-renormalization) integer quota of the central symbol.
  double mass = interval_mass(0.0, 1.0, -0.5, 0.5);
  CHECK((long long)std::llround(mass * 65536.0) == 25095);
  // After apportionment the table mass tracks quota * (budget/2^16) + 1.
  CdfTable t = build_cdf(0.0, 1.0, 1.0, -255, 255);
  double scaled = mass * (double)(kProbScale - t.symbol_count());
  CHECK(std::fabs((double)t.freq(t.index_of(0)) - scaled) <= 2.0);
}

TEST_CASE("build_cdf stays exact across extreme parameter magnitudes") {
  const double mus[] = {-1e7, -3.0, 0.0, 0.5, 4.2, 1e7};
  const double sigmas[] = {1e-8, 1e-3, 0.7, 42.0, 1e8};
  const double steps[] = {1e-3, 1.0, 1e3};
  for (double mu : mus) {
    for (double sigma : sigmas) {
      for (double step : steps) {
        CdfTable t = build_cdf(mu, sigma, step, -16, 16);
        CHECK(t.cum.back() == kProbScale);
        for (uint32_t s = 0; s < t.symbol_count(); ++s) CHECK(t.freq(s) >= 1);
        // a couple of symbols must round-trip through the coder
        std::vector<int32_t> syms = {-16, 0, 16, 999};  // 999 escapes
        std::vector<CdfTable> tables(syms.size(), t);
        CHECK(rans_decode(rans_encode(syms, tables), tables) == syms);
      }
    }
  }
}

TEST_CASE("build_cdf rejects invalid parameters") {
  CHECK_THROWS_AS(build_cdf(0, 0.0, 1, -1, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_cdf(0, 1, 1, 1, -1), std::invalid_argument);
  CHECK_THROWS_AS(build_cdf(0, 1, 1, -40000, 40000), std::invalid_argument);
}

TEST_CASE("rans: empty symbol list gives an empty payload") {
  CodedPlane plane = rans_encode({}, {});
  CHECK(plane.count == 0);
  CHECK(plane.payload.empty());
  CHECK(rans_decode(plane, {}).empty());
}

TEST_CASE("rans round-trip is exact across randomized planes") {
  Rng rng(3);
  size_t total_symbols = 0;
  int planes = 0;
  while (total_symbols < 120000) {
    // random alphabet, sometimes degenerate single-symbol
    int32_t lo, hi;
    if (rng.below(10) == 0) {
      lo = hi = (int32_t)rng.below(20) - 10;
    } else {
      lo = (int32_t)rng.below(60) - 50;
      hi = lo + (int32_t)rng.below(120);
    }
    size_t count = 1 + rng.below(300);
    std::vector<int32_t> symbols(count);
    std::vector<CdfTable> tables;
    tables.reserve(count);
    for (size_t i = 0; i < count; ++i) {
      double mu = rng.uniform(-10.f, 10.f);
      double sigma = std::exp(rng.uniform(-4.f, 2.f));
      tables.push_back(build_cdf(mu, sigma, 1.0, lo, hi));
      // mix of in-alphabet values and escapes
      if (rng.below(20) == 0) {
        symbols[i] = (int32_t)rng.below(100000) - 50000;
      } else {
        symbols[i] = lo + (int32_t)rng.below((uint64_t)(hi - lo + 1));
      }
    }
    CodedPlane plane = rans_encode(symbols, tables);
    std::vector<int32_t> back = rans_decode(plane, tables);
    REQUIRE(back.size() == symbols.size());
    for (size_t i = 0; i < count; ++i) REQUIRE(back[i] == symbols[i]);
    total_symbols += count;
    ++planes;
  }
  CHECK(planes > 300);
}

TEST_CASE("rans: coded size tracks the entropy estimate on self-distributed data") {
  // Draw 10^4 symbols from the table's own distribution; the alphabet is
  // wide enough for realism but keeps the mandatory tail floor negligible.
  Rng rng(4);
  for (double sigma : {0.6, 1.3, 2.8}) {
    CdfTable t = build_cdf(0.25, sigma, 1.0, -31, 31);
    std::vector<int32_t> symbols;
    std::vector<CdfTable> tables;
    SymbolPlane plane;
    while (symbols.size() < 10000) {
      uint32_t slot = (uint32_t)rng.below(kProbScale);
      auto it = std::upper_bound(t.cum.begin(), t.cum.end(), slot);
      uint32_t idx = (uint32_t)(it - t.cum.begin()) - 1;
      if (idx == t.escape_index()) continue;
      int32_t v = t.v_min + (int32_t)idx;
      symbols.push_back(v);
      tables.push_back(t);
      plane.push(v, 0.25f, (float)sigma, 1.f);
    }
    CodedPlane coded = rans_encode(symbols, tables);
    double est_bytes = entropy_bits(plane) / 8.0;
    double actual = (double)coded.payload.size();
    CHECK(std::fabs(actual - est_bytes) <= 0.01 * est_bytes + 64.0);
  }
}

TEST_CASE("rans: truncated payload raises a decode error") {
  Rng rng(5);
  std::vector<int32_t> symbols(400);
  std::vector<CdfTable> tables;
  for (auto& s : symbols) {
    s = (int32_t)rng.below(17) - 8;
    tables.push_back(build_cdf(0.0, 2.0, 1.0, -8, 8));
  }
  CodedPlane plane = rans_encode(symbols, tables);
  CodedPlane truncated = plane;
  truncated.payload.resize(plane.payload.size() / 2);
  CHECK_THROWS_AS(rans_decode(truncated, tables), DecodeError);
}

TEST_CASE("rans: corrupted payload byte is detected, never silent") {
  Rng rng(6);
  std::vector<int32_t> symbols(500);
  std::vector<CdfTable> tables;
  for (auto& s : symbols) {
    s = (int32_t)rng.below(31) - 15;
    tables.push_back(build_cdf(0.0, 3.0, 1.0, -20, 20));
  }
  CodedPlane plane = rans_encode(symbols, tables);
  for (int trial = 0; trial < 16; ++trial) {
    CodedPlane corrupt = plane;
    size_t pos = rng.below(corrupt.payload.size());
    corrupt.payload[pos] ^= (uint8_t)(1 + rng.below(255));
    bool detected = false;
    try {
      auto out = rans_decode(corrupt, tables);
      detected = out != symbols;  // footer should have caught this
    } catch (const DecodeError&) {
      detected = true;
    }
    CHECK(detected);
  }
}

TEST_CASE("rans: all-escape plane recovers the raw values") {
  std::vector<int32_t> symbols = {100000, -99999, 1 << 30, -(1 << 30), 32768};
  std::vector<CdfTable> tables;
  for (size_t i = 0; i < symbols.size(); ++i)
    tables.push_back(build_cdf(0.0, 1.0, 1.0, -4, 4));
  CodedPlane plane = rans_encode(symbols, tables);
  CHECK(plane.escapes.size() == symbols.size());
  CHECK(rans_decode(plane, tables) == symbols);
}

TEST_CASE("coded plane wire format round-trips") {
  Rng rng(7);
  std::vector<int32_t> symbols(64);
  std::vector<CdfTable> tables;
  for (auto& s : symbols) {
    s = (int32_t)rng.below(9) - 4;
    tables.push_back(build_cdf(0.0, 1.5, 1.0, -4, 4));
  }
  CodedPlane plane = rans_encode(symbols, tables);
  ByteWriter w;
  serialize_plane(plane, w);
  auto bytes = w.take();
  ByteReader r(bytes);
  CodedPlane back = parse_plane(r);
  CHECK(back.count == plane.count);
  CHECK(back.payload == plane.payload);
  CHECK(back.escapes == plane.escapes);
  CHECK(back.footer == plane.footer);
  CHECK(rans_decode(back, tables) == symbols);
}
