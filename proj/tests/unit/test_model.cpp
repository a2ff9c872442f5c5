#include <doctest.h>

#include "gifstream/container.hpp"
#include "gifstream/model.hpp"

using namespace gifstream;

namespace {

GopConfig small_config(uint32_t n = 100) {
  GopConfig cfg;
  cfg.n_anchors = n;
  cfg.gaussians_per_anchor = 5;
  cfg.feature_channels = 24;
  cfg.stream_channels = 4;
  cfg.frame_count = 8;
  cfg.knn_k = 4;
  cfg.grid_w = (uint32_t)std::ceil(std::sqrt((double)n));
  cfg.grid_h = (n + cfg.grid_w - 1) / cfg.grid_w;
  return cfg;
}

}  // namespace

TEST_CASE("well-formed synthetic model validates clean") {
  GopModel model = generate_synthetic(1, small_config(), 0.3);
  ValidationReport report = validate(model);
  CHECK_MESSAGE(report.ok(), report.to_string());
}

TEST_CASE("mask out of range is reported with anchor index and field") {
  GopModel model = generate_synthetic(1, small_config(), 0.3);
  model.anchors[7].mask_de = 1.5f;
  model.streams[7].present = true;  // keep the pruning contract itself intact
  ValidationReport report = validate(model);
  REQUIRE_FALSE(report.ok());
  bool found = false;
  for (const auto& v : report.violations)
    if (v.anchor == 7 && v.field == "m_de") found = true;
  CHECK(found);
}

TEST_CASE("pruned stream with nonzero values violates the pruning contract") {
  GopModel model = generate_synthetic(2, small_config(), 0.3);
  size_t victim = 0;
  while (model.streams[victim].present) ++victim;
  model.streams[victim].frames[3] = 0.25f;
  ValidationReport report = validate(model);
  REQUIRE_FALSE(report.ok());
  bool found = false;
  for (const auto& v : report.violations) {
    if (v.anchor == (int64_t)victim && v.field == "stream.present" &&
        v.message.find("pruning") != std::string::npos)
      found = true;
  }
  CHECK(found);
}

TEST_CASE("present flag must agree with m_de") {
  GopModel model = generate_synthetic(3, small_config(), 0.5);
  size_t on = 0;
  while (!model.streams[on].present) ++on;
  model.anchors[on].mask_de = 0.f;  // mask says pruned, stream says present
  ValidationReport report = validate(model);
  CHECK_FALSE(report.ok());
}

TEST_CASE("generate_synthetic: exact present-stream count") {
  GopModel model = generate_synthetic(1, small_config(100), 0.3);
  size_t present = 0;
  for (const auto& s : model.streams) present += s.present ? 1 : 0;
  CHECK(present == 30);

  size_t mask_on = 0;
  for (const auto& a : model.anchors) mask_on += a.mask_de > 0.f ? 1 : 0;
  CHECK(mask_on == present);
}

TEST_CASE("generate_synthetic: sparsity 0 zeroes everything") {
  GopModel model = generate_synthetic(1, small_config(50), 0.0);
  for (const auto& a : model.anchors) CHECK(a.mask_de == 0.f);
  for (const auto& s : model.streams) {
    CHECK_FALSE(s.present);
    for (float v : s.frames) CHECK(v == 0.f);
  }
}

TEST_CASE("generate_synthetic is a pure function of (seed, config, sparsity)") {
  GopConfig cfg = small_config(64);
  auto a = write_model(generate_synthetic(42, cfg, 0.3));
  auto b = write_model(generate_synthetic(42, cfg, 0.3));
  CHECK(a == b);
  auto c = write_model(generate_synthetic(43, cfg, 0.3));
  CHECK(a != c);
}

TEST_CASE("generate_synthetic validates across corner configs") {
  for (uint32_t n : {1u, 2u, 7u, 33u}) {
    for (double sparsity : {0.0, 0.5, 1.0}) {
      GopConfig cfg = small_config(n);
      cfg.frame_count = 1;
      cfg.gaussians_per_anchor = 1;
      GopModel model = generate_synthetic(5, cfg, sparsity);
      ValidationReport report = validate(model);
      CHECK_MESSAGE(report.ok(), report.to_string());
    }
  }
}

TEST_CASE("invalid config is rejected") {
  GopConfig cfg = small_config(10);
  cfg.grid_h = 1;
  cfg.grid_w = 2;  // 2 cells for 10 anchors
  CHECK_THROWS_AS(generate_synthetic(1, cfg, 0.3), std::invalid_argument);
  cfg = small_config(10);
  cfg.stream_channels = 0;
  CHECK_THROWS_AS(generate_synthetic(1, cfg, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(generate_synthetic(1, small_config(), 1.5), std::invalid_argument);
}

TEST_CASE("quantized flag enforces integer features") {
  GopModel model = generate_synthetic(1, small_config(10), 0.3);
  model.quantized = true;  // raw synthetic values are not integers
  CHECK_FALSE(validate(model).ok());
}
