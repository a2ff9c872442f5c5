// Drives the gifstream binary end to end: file round-trips, exit codes,
// JSON reports, atomic output. Takes the binary path as argv[1].

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gifstream/gifstream.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_binary;
fs::path g_dir;
int g_failures = 0;

void expect(bool ok, const std::string& what) {
  if (ok) {
    std::printf("ok: %s\n", what.c_str());
  } else {
    std::printf("FAIL: %s\n", what.c_str());
    ++g_failures;
  }
}

int run(const std::string& args, std::string* output = nullptr) {
  fs::path out_file = g_dir / "cmd_output.txt";
  std::string cmd = g_binary + " " + args + " > " + out_file.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  if (output) {
    std::ifstream in(out_file);
    output->assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }
  if (status == -1) return -1;
  return WEXITSTATUS(status);
}

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::vector<uint8_t>& data) {
  std::ofstream out(p, std::ios::binary);
  out.write((const char*)data.data(), (std::streamsize)data.size());
}

json last_json(const std::string& text) {
  // reports print a single JSON object line
  size_t start = text.find('{');
  return json::parse(text.substr(start));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: cli_tests <path-to-gifstream-binary>\n");
    return 2;
  }
  g_binary = argv[1];
  g_dir = fs::temp_directory_path() / ("gifstream_cli_test_" + std::to_string(::getpid()));
  fs::create_directories(g_dir);

  const std::string model = (g_dir / "model.gifu").string();
  const std::string stream = (g_dir / "scene.gifs").string();
  const std::string decoded = (g_dir / "decoded.gifu").string();

  // synth: defaults carry K=5 and prints counts
  {
    std::string out;
    int code = run("synth --seed 7 --anchors 400 --frames 12 --sparsity 0.3 --out " + model +
                       " --json",
                   &out);
    expect(code == 0, "synth exits 0");
    json j = last_json(out);
    expect(j["gaussians_per_anchor"] == 5, "synth defaults to K=5");
    expect(j["anchors"] == 400, "synth reports anchor count");
    expect(j["present_streams"] == 120, "synth honors --sparsity 0.3");
    gifstream::GopModel m = gifstream::read_model(slurp(model));
    expect(m.config.frame_count == 12, "synth honors --frames");
  }

  // determinism: same seed twice gives byte-identical files
  {
    const std::string again = (g_dir / "model2.gifu").string();
    run("synth --seed 7 --anchors 400 --frames 12 --sparsity 0.3 --out " + again);
    expect(slurp(model) == slurp(again), "synth is deterministic for a seed");
  }

  // encode: rate report with estimate/actual ratio in [0.98, 1.02]
  {
    std::string out;
    int code = run("encode --in " + model + " --out " + stream + " --seed 3 --json", &out);
    expect(code == 0, "encode exits 0");
    json j = last_json(out);
    double ratio = j["estimate_to_actual_ratio"];
    expect(ratio > 0.98 && ratio < 1.02, "estimate/actual ratio in [0.98, 1.02], got " +
                                             std::to_string(ratio));
    const std::string again = (g_dir / "scene2.gifs").string();
    run("encode --in " + model + " --out " + again + " --seed 3");
    expect(slurp(stream) == slurp(again), "encode is deterministic for a seed");
  }

  // encode: missing input file is a data error (exit 2)
  {
    std::string out;
    int code = run("encode --in " + (g_dir / "nope.gifu").string() + " --out " +
                       (g_dir / "x.gifs").string(),
                   &out);
    expect(code == 2, "missing input exits 2");
    expect(!fs::exists(g_dir / "x.gifs"), "no partial output on error");
  }

  // decode: round-trips the quantized model, prints both timing phases
  {
    std::string out;
    int code = run("decode --in " + stream + " --out " + decoded, &out);
    expect(code == 0, "decode exits 0");
    expect(out.find("distribution prediction:") != std::string::npos &&
               out.find("entropy decode:") != std::string::npos,
           "decode prints both timing phases");
    gifstream::GopModel m = gifstream::read_model(slurp(model));
    gifstream::EncodedGop enc = gifstream::encode_gop(m, 3);
    expect(slurp(decoded) == gifstream::write_model(enc.quantized),
           "decoded GIFU equals the encoder's quantized model");
  }

  // decode: corrupted payload byte exits 2
  {
    auto bytes = slurp(stream);
    gifstream::BitstreamHeader h = gifstream::parse_header(bytes);
    const auto& vgf = h.sections[gifstream::kSectionVgf - 1];
    bytes[vgf.offset + vgf.length / 2] ^= 0x40;
    const std::string corrupt = (g_dir / "corrupt.gifs").string();
    spit(corrupt, bytes);
    std::string out;
    int code = run("decode --in " + corrupt + " --out " + (g_dir / "y.gifu").string(), &out);
    expect(code == 2, "corrupted bitstream exits 2");
    expect(!fs::exists(g_dir / "y.gifu"), "no partial output on corruption");
  }

  // expand: all-static model gives identical PLY at t=0 and t=N-1
  {
    gifstream::GopConfig cfg;
    cfg.n_anchors = 64;
    cfg.gaussians_per_anchor = 3;
    cfg.feature_channels = 16;
    cfg.stream_channels = 4;
    cfg.frame_count = 9;
    cfg.knn_k = 4;
    cfg.grid_h = 8;
    cfg.grid_w = 8;
    // all-static: no motion and no time-dependent features
    gifstream::GopModel still = gifstream::generate_synthetic(5, cfg, 0.0);
    for (auto& a : still.anchors) a.mask_dy = 0.f;
    const std::string still_path = (g_dir / "static.gifu").string();
    spit(still_path, gifstream::write_model(still));

    const std::string ply0 = (g_dir / "f0.ply").string();
    const std::string ply8 = (g_dir / "f8.ply").string();
    expect(run("expand --in " + still_path + " --time-index 0 --out " + ply0) == 0,
           "expand t=0 exits 0");
    expect(run("expand --in " + still_path + " --time-index 8 --out " + ply8) == 0,
           "expand t=N-1 exits 0");
    expect(slurp(ply0) == slurp(ply8), "static model: identical PLY at t=0 and t=N-1");

    auto ply = slurp(ply0);
    std::string head((const char*)ply.data(), std::min<size_t>(ply.size(), 256));
    expect(head.find("element vertex 192") != std::string::npos,
           "vertex count equals n_anchors * K");

    int code = run("expand --in " + still_path + " --time-index 9 --out " +
                   (g_dir / "f9.ply").string());
    expect(code == 1, "time index N exits 1 (usage error)");

    // expand accepts bitstreams too
    expect(run("expand --in " + stream + " --time-index 0 --out " +
               (g_dir / "fs.ply").string()) == 0,
           "expand works on .gifs input");
  }

  // stats: four categories sum to total minus header; --json is flat
  {
    std::string out;
    int code = run("stats --in " + stream + " --json", &out);
    expect(code == 0, "stats exits 0");
    json j = last_json(out);
    uint64_t sum = (uint64_t)j["ti_feature_bytes"] + (uint64_t)j["attribute_bytes"] +
                   (uint64_t)j["td_feature_bytes"] + (uint64_t)j["network_bytes"];
    expect(sum == (uint64_t)j["total_bytes"] - (uint64_t)j["header_bytes"],
           "stats categories sum to file size minus header");
    expect(j["bits_per_anchor_per_frame"].is_number(), "stats reports bits/anchor/frame");
    bool flat = true;
    for (auto& [key, value] : j.items()) {
      (void)key;
      if (value.is_object() || value.is_array()) flat = false;
    }
    expect(flat, "stats --json is a flat object");
  }

  // stats: all-pruned input has a near-empty stream section
  {
    const std::string sparse = (g_dir / "sparse.gifu").string();
    const std::string sparse_gifs = (g_dir / "sparse.gifs").string();
    run("synth --seed 2 --anchors 100 --frames 8 --sparsity 0 --out " + sparse);
    run("encode --in " + sparse + " --out " + sparse_gifs);
    std::string out;
    run("stats --in " + sparse_gifs + " --json", &out);
    json j = last_json(out);
    expect((uint64_t)j["td_feature_bytes"] < 32, "all-pruned VGF section is near zero");
  }

  // usage errors exit 1
  {
    expect(run("synth") == 1, "missing required flag exits 1");
    expect(run("frobnicate") == 1, "unknown subcommand exits 1");
    expect(run("synth --sparsity 1.5 --out " + (g_dir / "z.gifu").string()) == 1,
           "out-of-range flag exits 1");
  }

  std::error_code ec;
  fs::remove_all(g_dir, ec);
  if (g_failures > 0) {
    std::printf("%d CLI check(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all CLI checks passed\n");
  return 0;
}
