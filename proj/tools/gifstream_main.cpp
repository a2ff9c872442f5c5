// gifstream: command-line front end for the GOP codec.
//
// Subcommands: synth, encode, decode, expand, stats.
// Exit codes: 0 success, 1 usage error, 2 data/format error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gifstream/gifstream.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw gifstream::FormatError("cannot open input file: " + path);
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) throw gifstream::FormatError("read failed: " + path);
  return data;
}

// Write to a temp file in the target directory and rename on success, so no
// command leaves partial output behind on error.
void write_file_atomic(const std::string& path, std::span<const uint8_t> data) {
  fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw gifstream::FormatError("cannot open output file: " + tmp.string());
    out.write((const char*)data.data(), (std::streamsize)data.size());
    if (!out.good()) throw gifstream::FormatError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw gifstream::FormatError("cannot move output into place: " + target.string());
  }
}

double mb(uint64_t bytes) { return (double)bytes / (1024.0 * 1024.0); }

void print_breakdown(const gifstream::SizeBreakdown& b) {
  std::printf("%-28s %10s %12s\n", "section", "bytes", "MB");
  std::printf("%-28s %10llu %12.4f\n", "time-independent feature",
              (unsigned long long)b.ti_feature_bytes, mb(b.ti_feature_bytes));
  std::printf("%-28s %10llu %12.4f\n", "attributes", (unsigned long long)b.attribute_bytes,
              mb(b.attribute_bytes));
  std::printf("%-28s %10llu %12.4f\n", "time-dependent feature",
              (unsigned long long)b.td_feature_bytes, mb(b.td_feature_bytes));
  std::printf("%-28s %10llu %12.4f\n", "neural networks", (unsigned long long)b.network_bytes,
              mb(b.network_bytes));
  std::printf("%-28s %10llu %12.4f\n", "header", (unsigned long long)b.header_bytes,
              mb(b.header_bytes));
  std::printf("%-28s %10llu %12.4f\n", "total", (unsigned long long)b.total_bytes,
              mb(b.total_bytes));
}

json breakdown_json(const gifstream::SizeBreakdown& b) {
  return json{{"header_bytes", b.header_bytes},
              {"ti_feature_bytes", b.ti_feature_bytes},
              {"attribute_bytes", b.attribute_bytes},
              {"td_feature_bytes", b.td_feature_bytes},
              {"network_bytes", b.network_bytes},
              {"total_bytes", b.total_bytes}};
}

int run_synth(uint64_t seed, uint32_t anchors, uint32_t frames, uint32_t channels,
              uint32_t stream_channels, double sparsity, const std::string& out_path,
              bool as_json) {
  gifstream::GopConfig cfg;
  cfg.n_anchors = anchors;
  cfg.gaussians_per_anchor = 5;
  cfg.feature_channels = channels;
  cfg.stream_channels = stream_channels;
  cfg.frame_count = frames;
  cfg.knn_k = 4;
  cfg.grid_w = (uint32_t)std::ceil(std::sqrt((double)anchors));
  cfg.grid_h = cfg.grid_w == 0 ? 0 : (anchors + cfg.grid_w - 1) / cfg.grid_w;

  gifstream::GopModel model = gifstream::generate_synthetic(seed, cfg, sparsity);
  std::vector<uint8_t> bytes = gifstream::write_model(model);
  write_file_atomic(out_path, bytes);

  size_t present = 0;
  for (const auto& s : model.streams) present += s.present ? 1 : 0;
  if (as_json) {
    json j{{"anchors", cfg.n_anchors},
           {"present_streams", present},
           {"gaussians_per_anchor", cfg.gaussians_per_anchor},
           {"frames", cfg.frame_count},
           {"feature_channels", cfg.feature_channels},
           {"stream_channels", cfg.stream_channels},
           {"file_bytes", bytes.size()}};
    std::printf("%s\n", j.dump().c_str());
  } else {
    std::printf("wrote %s (%zu bytes)\n", out_path.c_str(), bytes.size());
    std::printf("anchors: %u, present streams: %zu, K: %u, frames: %u, C: %u, P: %u\n",
                cfg.n_anchors, present, cfg.gaussians_per_anchor, cfg.frame_count,
                cfg.feature_channels, cfg.stream_channels);
  }
  return 0;
}

int run_encode(const std::string& in_path, const std::string& out_path, uint64_t seed,
               bool as_json) {
  gifstream::GopModel model = gifstream::read_model(read_file(in_path));
  gifstream::EncodedGop enc = gifstream::encode_gop(model, seed);
  write_file_atomic(out_path, enc.bytes);

  gifstream::SizeBreakdown breakdown = gifstream::size_breakdown(enc.bytes);
  double est_bytes = enc.rates.total_estimate_bits() / 8.0;
  uint64_t payload = enc.rates.total_payload_bytes();
  double ratio = payload > 0 ? est_bytes / (double)payload : 1.0;

  if (as_json) {
    json j = breakdown_json(breakdown);
    j["estimate_bits"] = enc.rates.total_estimate_bits();
    j["coded_payload_bytes"] = payload;
    j["estimate_to_actual_ratio"] = ratio;
    j["vgf_estimate_bits"] = enc.rates.vgf.estimate_bits;
    j["vgf_coded_bytes"] = enc.rates.vgf.coded_bytes;
    std::printf("%s\n", j.dump().c_str());
  } else {
    std::printf("wrote %s (%zu bytes)\n", out_path.c_str(), enc.bytes.size());
    print_breakdown(breakdown);
    std::printf("rate estimate: %.1f bytes, coded payload: %llu bytes, ratio %.4f\n", est_bytes,
                (unsigned long long)payload, ratio);
  }
  return 0;
}

int run_decode(const std::string& in_path, const std::string& out_path, bool as_json) {
  std::vector<uint8_t> bytes = read_file(in_path);
  gifstream::DecodeTimings timings;
  gifstream::GopModel model = gifstream::decode_gop(bytes, &timings);
  std::vector<uint8_t> out = gifstream::write_model(model);
  write_file_atomic(out_path, out);
  if (as_json) {
    json j{{"anchors", model.config.n_anchors},
           {"frames", model.config.frame_count},
           {"prediction_seconds", timings.prediction_seconds},
           {"entropy_decode_seconds", timings.entropy_seconds},
           {"file_bytes", out.size()}};
    std::printf("%s\n", j.dump().c_str());
  } else {
    std::printf("wrote %s (%zu bytes)\n", out_path.c_str(), out.size());
    std::printf("distribution prediction: %.3f s\n", timings.prediction_seconds);
    std::printf("entropy decode: %.3f s\n", timings.entropy_seconds);
  }
  return 0;
}

int run_expand(const std::string& in_path, int64_t t_index, const std::string& out_path) {
  std::vector<uint8_t> bytes = read_file(in_path);
  if (bytes.size() < 4) throw gifstream::FormatError("input too short");
  uint32_t magic = (uint32_t)bytes[0] | ((uint32_t)bytes[1] << 8) | ((uint32_t)bytes[2] << 16) |
                   ((uint32_t)bytes[3] << 24);
  gifstream::GopModel model;
  if (magic == gifstream::kBitstreamMagic) {
    model = gifstream::decode_gop(bytes);
  } else if (magic == gifstream::kModelMagic) {
    model = gifstream::read_model(bytes);
  } else {
    throw gifstream::FormatError("input is neither a GIFS bitstream nor a GIFU model");
  }
  if (t_index < 0 || t_index >= (int64_t)model.config.frame_count) {
    std::fprintf(stderr, "error: --time-index %lld out of range [0, %u)\n",
                 (long long)t_index, model.config.frame_count);
    return 1;
  }
  gifstream::GaussianFrame frame = gifstream::decode_frame(model, (uint32_t)t_index);
  std::vector<uint8_t> ply = gifstream::export_ply(frame);
  write_file_atomic(out_path, ply);
  std::printf("wrote %s (%zu vertices)\n", out_path.c_str(), frame.primitives.size());
  return 0;
}

int run_stats(const std::string& in_path, bool as_json) {
  std::vector<uint8_t> bytes = read_file(in_path);
  gifstream::BitstreamHeader header = gifstream::parse_header(bytes);
  gifstream::SizeBreakdown b = gifstream::size_breakdown(bytes);
  double bits_per_anchor_frame =
      (double)b.total_bytes * 8.0 /
      ((double)header.config.n_anchors * (double)header.config.frame_count);
  if (as_json) {
    json j = breakdown_json(b);
    j["bits_per_anchor_per_frame"] = bits_per_anchor_frame;
    std::printf("%s\n", j.dump().c_str());
  } else {
    print_breakdown(b);
    std::printf("bits per anchor per frame: %.3f\n", bits_per_anchor_frame);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GIFStream GOP codec"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic GOP model (GIFU)");
  uint64_t synth_seed = 1;
  uint32_t anchors = 1000, frames = 65, channels = 24, stream_channels = 4;
  double sparsity = 0.3;
  std::string synth_out;
  bool synth_json = false;
  synth->add_option("--seed", synth_seed, "deterministic seed");
  synth->add_option("--anchors", anchors, "anchor count")->check(CLI::PositiveNumber);
  synth->add_option("--frames", frames, "timestamps in the GOP")->check(CLI::PositiveNumber);
  synth->add_option("--channels", channels, "time-independent feature channels (C)")
      ->check(CLI::PositiveNumber);
  synth->add_option("--stream-channels", stream_channels, "time-dependent channels (P)")
      ->check(CLI::PositiveNumber);
  synth->add_option("--sparsity", sparsity, "fraction of streams kept present")
      ->check(CLI::Range(0.0, 1.0));
  synth->add_option("--out", synth_out, "output .gifu path")->required();
  synth->add_flag("--json", synth_json, "machine-readable output");

  // encode
  auto* encode = app.add_subcommand("encode", "encode a GIFU model into a GIFS bitstream");
  std::string enc_in, enc_out;
  uint64_t enc_seed = 1;
  bool enc_json = false;
  encode->add_option("--in", enc_in, "input .gifu path")->required();
  encode->add_option("--out", enc_out, "output .gifs path")->required();
  encode->add_option("--seed", enc_seed, "sort seed");
  encode->add_flag("--json", enc_json, "machine-readable output");

  // decode
  auto* decode = app.add_subcommand("decode", "decode a GIFS bitstream back to a GIFU model");
  std::string dec_in, dec_out;
  bool dec_json = false;
  decode->add_option("--in", dec_in, "input .gifs path")->required();
  decode->add_option("--out", dec_out, "output .gifu path")->required();
  decode->add_flag("--json", dec_json, "machine-readable output");

  // expand
  auto* expand = app.add_subcommand("expand", "decode one timestamp to a PLY point cloud");
  std::string exp_in, exp_out;
  int64_t t_index = 0;
  expand->add_option("--in", exp_in, "input .gifs or .gifu path")->required();
  expand->add_option("--time-index", t_index, "frame index in [0, N)");
  expand->add_option("--out", exp_out, "output .ply path")->required();

  // stats
  auto* stats = app.add_subcommand("stats", "report the size breakdown of a bitstream");
  std::string stats_in;
  bool stats_json = false;
  stats->add_option("--in", stats_in, "input .gifs path")->required();
  stats->add_flag("--json", stats_json, "machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors map to exit 1
  }

  try {
    if (synth->parsed())
      return run_synth(synth_seed, anchors, frames, channels, stream_channels, sparsity,
                       synth_out, synth_json);
    if (encode->parsed()) return run_encode(enc_in, enc_out, enc_seed, enc_json);
    if (decode->parsed()) return run_decode(dec_in, dec_out, dec_json);
    if (expand->parsed()) return run_expand(exp_in, t_index, exp_out);
    if (stats->parsed()) return run_stats(stats_in, stats_json);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
