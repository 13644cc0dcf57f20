#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mcsagan/engine.hpp"

using namespace mcsagan;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "mcsagan_cli_test";

struct Run {
  int code;
  std::string out;
};

Run cli(const std::string& args) {
  const fs::path out = kRoot / "stdout.txt";
  const std::string cmd = std::string(MCSAGAN_CLI) + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream is(out);
  std::stringstream ss;
  ss << is.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string p(const std::string& name) { return (kRoot / name).string(); }

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

const char* kTinyConfig = R"({
  "epochs": 2, "lr_milestones": [1], "steps_per_epoch": 2, "val_every": 2,
  "generator": {"widths": [4, 8], "encoder_attention": ["mbha", "none"], "bottleneck_attention": "full",
                "decoder_attention": ["mbha"], "head_width": 4},
  "critic": {"base_width": 4, "depth": 2, "max_width": 8},
  "features": {"widths": [4, 4, 4, 4]},
  "segmenter": {"epochs": 2, "base_width": 4}
})";

}  // namespace

TEST_CASE("cli usage errors and planning") {
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);
  CHECK(cli("").code == 1);
  CHECK(cli("bogus").code == 1);
  CHECK(cli("gen-data").code == 1);
  CHECK(cli("--help").code == 0);

  const Run ok = cli("plan-attention --dims 8x8x8,64x64x64 --tq 512 --tkv 512 --tattn 1048576");
  CHECK(ok.code == 0);
  CHECK(std::count(ok.out.begin(), ok.out.end(), '\n') == 3);
  CHECK(ok.out.find("SE_ONLY") != std::string::npos);

  const Run empty = cli("plan-attention");
  CHECK(empty.code == 0);
  CHECK(std::count(empty.out.begin(), empty.out.end(), '\n') == 1);

  CHECK(cli("plan-attention --dims 8x8").code == 1);
  CHECK(cli("plan-attention --dims 8x8x8 --tq 0").code == 1);
  CHECK(cli("synth --ckpt " + p("missing.ckpt") + " --input x --contrast t1c --out y").code == 2);
  CHECK(cli("synth --ckpt a --input x --contrast t2w --out y").code == 1);
}

TEST_CASE("cli pipeline: data, segmenters, training, synthesis, evaluation") {
  fs::create_directories(kRoot);
  write_text(p("spec.json"), R"({"dims": [16, 16, 16]})");
  write_text(p("tiny.json"), kTinyConfig);
  REQUIRE(cli("gen-data --spec " + p("spec.json") + " --out " + p("data") + " --count 6 --seed 40").code == 0);
  CHECK(read_dataset(p("data")).size() == 6);
  write_text(p("bad_spec.json"), R"({"dims": [16, 16]})");
  CHECK(cli("gen-data --spec " + p("bad_spec.json") + " --out " + p("x") + " --count 1").code != 0);

  REQUIRE(cli("pretrain-seg --config " + p("tiny.json") + " --data " + p("data") + " --out " + p("seg.ckpt")).code ==
          0);
  REQUIRE(cli("pretrain-seg --downstream --config " + p("tiny.json") + " --data " + p("data") + " --out " +
              p("seg4.ckpt"))
              .code == 0);
  CHECK(load_segmenter(p("seg.ckpt"))->frozen());

  CHECK(cli("train --config " + p("tiny.json") + " --data " + p("data") + " --out " + p("run")).code == 1);
  const Run tr = cli("train --config " + p("tiny.json") + " --data " + p("data") + " --seg " + p("seg.ckpt") +
                     " --out " + p("run"));
  REQUIRE(tr.code == 0);
  CHECK(fs::exists(p("run/epoch_0002.ckpt")));
  std::ifstream log(p("run/log.jsonl"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const Json j = Json::parse(line);
    CHECK(j.at("critic_updates") == 3);
    ++lines;
  }
  CHECK(lines == 4);

  const std::string src = p("data/phantom_40_t2w.mcsv");
  REQUIRE(cli("synth --ckpt " + p("run/last.ckpt") + " --input " + src + " --contrast t1c --out " + p("a.mcsv"))
              .code == 0);
  REQUIRE(cli("synth --ckpt " + p("run/last.ckpt") + " --input " + src + " --contrast t1c --out " + p("b.mcsv"))
              .code == 0);
  CHECK(slurp(p("a.mcsv")) == slurp(p("b.mcsv")));
  CHECK(read_volume(p("a.mcsv")).shape() == Shape{16, 16, 16});

  write_volume(p("odd.mcsv"), Tensor<float>::zeros(Shape{16, 18, 16}));
  const Run odd = cli("synth --ckpt " + p("run/last.ckpt") + " --input " + p("odd.mcsv") + " --contrast t2f --out " +
                      p("c.mcsv"));
  CHECK(odd.code == 2);
  CHECK(odd.out.find("not divisible by 4") != std::string::npos);

  REQUIRE(cli("eval --ckpt " + p("run/last.ckpt") + " --data " + p("data") + " --report " + p("r.json") +
              " --downstream " + p("seg4.ckpt"))
              .code == 0);
  const Json r = Json::parse(slurp(p("r.json")));
  for (const char* c : {"t2f", "t1c", "t1n"})
    for (const char* m : {"psnr", "ssim", "msssim", "mse", "mfd"}) CHECK(r.at("contrasts").at(c).contains(m));
  CHECK(r.at("dice").at("generated").is_number());
  CHECK(r.at("dice").at("real").is_number());
}

TEST_CASE("cli numeric failure exit code") {
  fs::create_directories(kRoot);
  write_text(p("tiny.json"), kTinyConfig);
  write_text(p("spec.json"), R"({"dims": [16, 16, 16]})");
  if (!fs::exists(p("data/manifest.json")))
    REQUIRE(cli("gen-data --spec " + p("spec.json") + " --out " + p("data") + " --count 6 --seed 40").code == 0);
  // A segmenter checkpoint holding a NaN weight poisons the consistency term.
  std::mt19937_64 rng(0);
  Segmenter<float> seg(SegmenterConfig{4, 4}, rng);
  ParamRegistry<float> reg;
  seg.collect(reg);
  reg.params.back().tensor.raw()[0] = std::nanf("");
  save_segmenter(p("nan_seg.ckpt"), seg);
  const Run r = cli("train --config " + p("tiny.json") + " --data " + p("data") + " --seg " + p("nan_seg.ckpt") +
                    " --out " + p("nan_run"));
  CHECK(r.code == 3);
  CHECK(r.out.find("generator loss term 'seg'") != std::string::npos);
  fs::remove_all(kRoot);
}
