#include "lmm/applications.hpp"
#include "lmm/checkpoint.hpp"
#include "lmm/cli.hpp"
#include "lmm/data.hpp"
#include "scratch.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace lmm;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

int run_binary(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(LMM_CLI_BINARY) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small dataset plus a two-epoch model shared by the application tests.
struct Trained {
  ScratchDir dir{"cli_trained"};
  fs::path data = dir / "data";
  fs::path run = dir / "run";
  Trained() {
    REQUIRE(run_cli({"gen-data", "--clips", "6", "--frames", "30", "--joints", "5", "--out", data.string()}).code == 0);
    const auto r = run_cli({"train", "--data", data.string(), "--out", run.string(), "--epochs", "2", "--hidden", "8",
                            "--latent", "3", "--frames", "20", "--batch-size", "2", "--precision", "f64", "--set",
                            "checkpoint_every=1"});
    INFO(r.err);
    REQUIRE(r.code == 0);
  }
  fs::path ckpt() const { return run / "ckpt_000002.bin"; }
  fs::path clip(int i) const {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%03d.json", i);
    return data / name;
  }
};

}  // namespace

TEST_CASE("gen-data is deterministic and writes a manifest") {
  ScratchDir dir("cli_gen");
  const auto a = dir / "a", b = dir / "b";
  CHECK(run_cli({"--seed", "3", "gen-data", "--clips", "5", "--frames", "12", "--joints", "5", "--out", a.string()}).code == 0);
  CHECK(run_cli({"gen-data", "--clips", "5", "--frames", "12", "--joints", "5", "--out", b.string(), "--seed", "3"}).code == 0);
  for (int i = 0; i < 5; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%03d.json", i);
    CHECK(slurp(a / name) == slurp(b / name));
  }
  const auto split = read_manifest(a / "manifest.txt");
  CHECK(split.train.size() == 4);
  CHECK(split.test.size() == 1);
  CHECK(load_motion(split.test.front()).n_frames() == 12);
}

TEST_CASE("train writes checkpoints and a loss curve") {
  Trained t;
  CHECK(fs::exists(t.run / "ckpt_000000.bin"));
  CHECK(fs::exists(t.run / "ckpt_000001.bin"));
  CHECK(fs::exists(t.ckpt()));
  const std::string csv = slurp(t.run / "loss.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  const auto ckpt = load_checkpoint<double>(t.ckpt());
  CHECK(ckpt.model.hp.joints == 5);
  CHECK(ckpt.model.hp.hidden == 8);
  CHECK(ckpt.epoch == 2);

  SUBCASE("eval prints the metric table") {
    const auto r = run_cli({"eval", "--ckpt", t.ckpt().string(), "--data", t.data.string(), "--n-eval", "3"});
    INFO(r.err);
    CHECK(r.code == 0);
    CHECK(r.out.find("decoder,interval_end_s,E_r,E_p,E_z") != std::string::npos);
    CHECK(r.out.find("rot,summary") != std::string::npos);
  }
  SUBCASE("interpolation endpoints are the reconstructions") {
    const auto r = run_cli({"interpolate", "--ckpt", t.ckpt().string(), "--a", t.clip(0).string(), "--b", t.clip(1).string(),
                            "--steps", "4", "--out", (t.dir / "interp").string()});
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(run_cli({"reconstruct", "--ckpt", t.ckpt().string(), "--in", t.clip(0).string(), "--out", (t.dir / "ra.json").string()}).code == 0);
    REQUIRE(run_cli({"reconstruct", "--ckpt", t.ckpt().string(), "--in", t.clip(1).string(), "--out", (t.dir / "rb.json").string()}).code == 0);
    CHECK(load_motion(t.dir / "interp" / "interp_000.json") == load_motion(t.dir / "ra.json"));
    CHECK(load_motion(t.dir / "interp" / "interp_003.json") == load_motion(t.dir / "rb.json"));
    CHECK(load_motion(t.dir / "ra.json").n_frames() == 20);
  }
  SUBCASE("sample, denoise and analogy write motions") {
    CHECK(run_cli({"sample", "--ckpt", t.ckpt().string(), "--n", "2", "--out", (t.dir / "samples").string()}).code == 0);
    CHECK(fs::exists(t.dir / "samples" / "sample_001.json"));
    CHECK(run_cli({"--seed", "4", "denoise", "--ckpt", t.ckpt().string(), "--in", t.clip(2).string(), "--corrupt", "0.3", "--out",
                   (t.dir / "clean.json").string(), "--corrupted-out", (t.dir / "noisy.json").string()})
              .code == 0);
    const auto noisy = load_motion(t.dir / "noisy.json");
    CHECK(noisy.n_frames() == 20);
    CHECK(run_cli({"analogy", "--ckpt", t.ckpt().string(), "--a", t.clip(0).string(), "--b", t.clip(0).string(), "--c",
                   t.clip(3).string(), "--out", (t.dir / "an.json").string(), "--decoder", "vel"})
              .code == 0);
    REQUIRE(run_cli({"reconstruct", "--ckpt", t.ckpt().string(), "--in", t.clip(3).string(), "--decoder", "vel", "--out",
                     (t.dir / "rc.json").string()})
                .code == 0);
    CHECK(load_motion(t.dir / "an.json") == load_motion(t.dir / "rc.json"));
    CHECK(run_cli({"reconstruct", "--ckpt", t.ckpt().string(), "--in", t.clip(3).string(), "--decoder", "up", "--out",
                   (t.dir / "x.json").string()})
              .code == 1);
  }
  SUBCASE("resume continues the run") {
    const auto r = run_cli({"train", "--data", t.data.string(), "--out", t.run.string(), "--resume", (t.run / "ckpt_000001.bin").string(),
                            "--epochs", "3", "--hidden", "8", "--latent", "3", "--frames", "20", "--batch-size", "2", "--precision",
                            "f64", "--set", "checkpoint_every=1"});
    INFO(r.err);
    CHECK(r.code == 0);
    CHECK(fs::exists(t.run / "ckpt_000003.bin"));
  }
}

TEST_CASE("bad input exits with code 1") {
  ScratchDir dir("cli_bad");
  CHECK(run_cli({"gen-data", "--out", dir.path().string(), "--bogus"}).code == 1);
  CHECK(run_cli({}).code == 1);
  CHECK(run_cli({"frobnicate"}).code == 1);
  CHECK(run_cli({"--help"}).code == 0);

  REQUIRE(run_cli({"gen-data", "--clips", "3", "--frames", "12", "--joints", "5", "--out", (dir / "d").string()}).code == 0);
  std::string text = slurp(dir / "d" / "clip_000.json");
  std::ofstream(dir / "d" / "clip_000.json") << text.substr(0, text.size() / 2);
  const auto r = run_cli({"train", "--data", (dir / "d").string(), "--out", (dir / "run").string(), "--epochs", "1", "--frames", "10"});
  CHECK(r.code == 1);
  CHECK(r.err.find("clip_000.json") != std::string::npos);

  std::ofstream(dir / "cfg.txt") << "lr = 0.1\nnot_a_key = 3\n";
  const auto c = run_cli({"train", "--data", (dir / "d").string(), "--out", (dir / "run").string(), "--config", (dir / "cfg.txt").string()});
  CHECK(c.code == 1);
  CHECK(c.err.find("line 2") != std::string::npos);
}

TEST_CASE("the binary reports exit codes") {
  ScratchDir dir("cli_binary");
  CHECK(run_binary("gen-data --unknown-flag", dir / "log.txt") == 1);
  CHECK(run_binary("gen-data --clips 2 --frames 10 --joints 3 --out " + (dir / "d").string(), dir / "log.txt") == 0);
  std::ofstream(dir / "broken.json") << "{\"skeleton\": {\"names\": [";
  CHECK(run_binary("reconstruct --ckpt " + (dir / "broken.json").string() + " --in " + (dir / "broken.json").string() + " --out " +
                       (dir / "o.json").string(),
                   dir / "log.txt") != 0);
}

TEST_CASE("gradcheck passes and catches an injected fault") {
  ScratchDir dir("cli_gradcheck");
  const auto small = std::vector<std::string>{"gradcheck", "--precision", "f64", "--frames", "8", "--hidden", "6", "--latent", "3", "--joints", "3",
                                              "--batch", "3"};
  const auto good = run_cli(small);
  INFO(good.out);
  CHECK(good.code == 0);
  CHECK(good.out.find("PASS") != std::string::npos);

  auto faulty = small;
  faulty.insert(faulty.end(), {"--inject-fault", "tanh"});
  const auto bad = run_cli(faulty);
  CHECK(bad.code == 2);
  CHECK(bad.out.find("FAIL: worst block") != std::string::npos);

  const auto refused = run_cli({"gradcheck", "--precision", "f32"});
  CHECK(refused.code == 1);
  CHECK(refused.err.find("f64") != std::string::npos);

  CHECK(run_binary("gradcheck --precision f64 --frames 8 --hidden 6 --latent 3 --joints 3 --batch 2", dir / "log.txt") == 0);
  CHECK(slurp(dir / "log.txt").find("PASS") != std::string::npos);
}
