#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ivan/cli.hpp"
#include "ivan/dataio.hpp"

using namespace ivan;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "ivan");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    static int n = 0;
    path = fs::temp_directory_path() / ("ivan_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

// A tiny phantom task that trains in well under a second per epoch.
std::vector<std::string> tiny(std::vector<std::string> args) {
  for (const char* s : {"--set", "phantom.count=10", "--set", "phantom.train=6", "--set", "phantom.height=12", "--set",
                        "phantom.width=12", "--hidden", "4", "--blocks", "2"}) {
    args.push_back(s);
  }
  return args;
}

PhantomSpec phantom(std::uint64_t seed) {
  PhantomSpec s;
  s.seed = seed;
  s.height = s.width = 12;
  s.count = 1;
  return s;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::string echoed_config(const std::string& out) {
  const auto b = out.find("resolved config\n"), e = out.find("# end config");
  REQUIRE(b != std::string::npos);
  REQUIRE(e != std::string::npos);
  return out.substr(b + 16, e - b - 16);
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"bogus"}).code == kExitUsage);
  CHECK(run({"train", "--loss-norm", "l3"}).code == kExitUsage);
  CHECK(run({"train", "--set", "trian.epochs=3"}).code == kExitUsage);
  CHECK(run({"roundtrip-check"}).code == kExitUsage);
  CHECK(run({"--help"}).code == kExitOk);
  TempDir dir;
  std::ofstream(dir / "bad.cfg") << "model.blocks = 2\nfrobnicate = 1\n";
  const Result r = run({"train", "--config", dir / "bad.cfg", "--out", dir / "o"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("frobnicate") != std::string::npos);
}

TEST_CASE("train with zero epochs writes the initial checkpoint") {
  TempDir dir;
  const Result r = run(tiny({"train", "--epochs", "0", "--out", dir / "run"}));
  REQUIRE(r.code == kExitOk);
  CHECK(lines(read_file(dir / "run/loss.csv")).size() == 1);
  const Checkpoint c = load_checkpoint(dir / "run/checkpoint_final.ivan");
  CHECK(c.epoch == 0);
  CHECK(c.model.depth() == 2);
}

TEST_CASE("training is reproducible from the seed and from the echoed config") {
  TempDir dir;
  const Result a = run(tiny({"train", "--epochs", "3", "--seed", "4", "--set", "train.halve_every=2", "--out", dir / "a"}));
  const Result b = run(tiny({"train", "--epochs", "3", "--seed", "4", "--set", "train.halve_every=2", "--out", dir / "b"}));
  const Result c = run(tiny({"train", "--epochs", "3", "--seed", "5", "--set", "train.halve_every=2", "--out", dir / "c"}));
  REQUIRE(a.code == kExitOk);
  REQUIRE(b.code == kExitOk);
  REQUIRE(c.code == kExitOk);
  const std::string la = read_file(dir / "a/loss.csv");
  CHECK(lines(la).size() == 4);
  CHECK(la == read_file(dir / "b/loss.csv"));
  CHECK(la != read_file(dir / "c/loss.csv"));
  CHECK(read_file(dir / "a/checkpoint_final.ivan") == read_file(dir / "b/checkpoint_final.ivan"));
  CHECK(fs::exists(dir / "a/checkpoint_epoch_0002.ivan"));

  std::string echo = echoed_config(a.out);
  const auto at = echo.find("out = ");
  echo.replace(at, echo.find('\n', at) - at, "out = " + (dir / "d"));
  std::ofstream(dir / "echo.cfg") << echo;
  REQUIRE(run({"train", "--config", dir / "echo.cfg"}).code == kExitOk);
  CHECK(read_file(dir / "d/loss.csv") == la);
}

TEST_CASE("flags override the config file") {
  TempDir dir;
  std::ofstream(dir / "run.cfg") << "train.epochs = 5\ntrain.lambda = 0.25\nmodel.hidden = 3\n";
  const Result r = run(tiny({"train", "--config", dir / "run.cfg", "--epochs", "1", "--out", dir / "o"}));
  REQUIRE(r.code == kExitOk);
  const std::string echo = echoed_config(r.out);
  CHECK(echo.find("train.epochs = 1\n") != std::string::npos);
  CHECK(echo.find("train.lambda = 0.25\n") != std::string::npos);
  CHECK(echo.find("model.hidden = 4\n") != std::string::npos);
  CHECK(lines(read_file(dir / "o/loss.csv")).size() == 2);
}

TEST_CASE("checkpoint commands") {
  TempDir dir;
  REQUIRE(run(tiny({"train", "--epochs", "1", "--out", dir / "run"})).code == kExitOk);
  const std::string ckpt = dir / "run/checkpoint_final.ivan";
  CHECK(run({"roundtrip-check", "--checkpoint", ckpt}).code == kExitOk);

  std::string bytes = read_file(ckpt);
  bytes[bytes.size() - 7] ^= 0x40;
  write_file_atomic(dir / "bad.ivan", bytes);
  const Result bad = run({"roundtrip-check", "--checkpoint", dir / "bad.ivan"});
  CHECK(bad.code == kExitIo);
  CHECK(bad.err.find("checkpoint") != std::string::npos);
  CHECK(run({"roundtrip-check", "--checkpoint", dir / "missing.ivan"}).code == kExitIo);

  // Per-record outputs for the test split.
  REQUIRE(run(tiny({"infer", "--checkpoint", ckpt, "--out", dir / "fwd"})).code == kExitOk);
  CHECK(fs::exists(dir / "fwd/phantom_6_T2.pgm"));
  CHECK(fs::exists(dir / "fwd/phantom_9_T2.pgm"));
  REQUIRE(run(tiny({"infer", "--direction", "inverse", "--checkpoint", ckpt, "--out", dir / "inv"})).code == kExitOk);
  CHECK(fs::exists(dir / "inv/phantom_6_T1.pgm"));
  CHECK(fs::exists(dir / "inv/phantom_6_PD.pgm"));

  // Explicit inputs.
  save_normalized(dir / "t1.pgm", generate_phantoms(phantom(1)).front().images.at("T1"), 65535);
  CHECK(run({"infer", "--checkpoint", ckpt, "--input", "T1=" + (dir / "t1.pgm"), "--out", dir / "x"}).code == kExitUsage);
  CHECK(run({"infer", "--checkpoint", ckpt, "--input", "T1=" + (dir / "t1.pgm"), "--input", "PD=" + (dir / "t1.pgm"),
             "--out", dir / "x"})
            .code == kExitOk);
  CHECK(load_image(dir / "x/T2.pgm").pixels.shape() == Shape{1, 1, 12, 12});

  const Result ev = run(tiny({"evaluate", "--checkpoint", ckpt, "--set", "metrics.ssim_window=7", "--out", dir / "ev"}));
  REQUIRE(ev.code == kExitOk);
  const auto rows = lines(read_file(dir / "ev/metrics.csv"));
  CHECK(rows.front() == "record,modality,psnr,ssim,nmse,ag,sf,en,qmi,qp");
  CHECK(rows.size() == 6);
  CHECK(rows.back().rfind("aggregate,,", 0) == 0);
}

TEST_CASE("fuse requires a single-target plan") {
  TempDir dir;
  REQUIRE(run(tiny({"train", "--epochs", "0", "--set", "task.sources=T2,CT", "--set", "task.targets=FUSED", "--out",
                    dir / "f"}))
              .code == kExitOk);
  const Record rec = generate_phantoms(phantom(2)).front();
  save_normalized(dir / "t2.pgm", rec.images.at("T2"), 65535);
  save_normalized(dir / "ct.pgm", rec.images.at("CT"), 65535);
  CHECK(run({"fuse", "--checkpoint", dir / "f/checkpoint_final.ivan", "--input", "T2=" + (dir / "t2.pgm"), "--input",
             "CT=" + (dir / "ct.pgm"), "--out", dir / "fused"})
            .code == kExitOk);
  CHECK(fs::exists(dir / "fused/FUSED.pgm"));

  REQUIRE(run(tiny({"train", "--epochs", "0", "--set", "task.targets=T2,CT", "--out", dir / "two"})).code == kExitOk);
  CHECK(run({"fuse", "--checkpoint", dir / "two/checkpoint_final.ivan", "--out", dir / "y"}).code == kExitUsage);
}

TEST_CASE("evaluate on image files") {
  TempDir dir;
  const Record rec = generate_phantoms(phantom(3)).front();
  save_normalized(dir / "a.pgm", rec.images.at("T1"), 65535);
  save_normalized(dir / "b.pgm", rec.images.at("T2"), 65535);
  const Result r = run({"evaluate", "--pred", dir / "a.pgm", dir / "b.pgm", "--ref", dir / "a.pgm", dir / "b.pgm",
                        "--source1", dir / "a.pgm", dir / "b.pgm", "--source2", dir / "a.pgm", dir / "b.pgm", "--set",
                        "metrics.ssim_window=5", "--out", dir / "m"});
  REQUIRE(r.code == kExitOk);
  const auto rows = lines(read_file(dir / "m/metrics.csv"));
  REQUIRE(rows.size() == 4);
  auto cells = [](const std::string& row) {
    std::vector<std::string> c;
    std::istringstream is(row);
    for (std::string x; std::getline(is, x, ',');) c.push_back(x);
    return c;
  };
  double ag_sum = 0.0;
  std::vector<double> ag;
  for (int i = 1; i <= 2; ++i) {
    const auto c = cells(rows[i]);
    CHECK(c[2] == "inf");
    CHECK(c[3] == "1");
    CHECK(c[4] == "0");
    CHECK(std::stod(c[6 + 3]) == doctest::Approx(1.0).epsilon(1e-12));  // qp
    ag.push_back(std::stod(c[5]));
    ag_sum += ag.back();
  }
  const auto agg = cells(rows[3]);
  const double mean = ag_sum / 2, sd = std::abs(ag[0] - ag[1]) / 2;
  const std::string cell = agg[5];
  CHECK(std::stod(cell.substr(0, cell.find(' '))) == doctest::Approx(mean).epsilon(1e-15));
  CHECK(std::stod(cell.substr(cell.rfind(' ') + 1)) == doctest::Approx(sd).epsilon(1e-12));
  CHECK(agg[3] == "1 ± 0");

  CHECK(run({"evaluate", "--pred", dir / "a.pgm", "--ref", dir / "a.pgm", dir / "b.pgm", "--out", dir / "m"}).code ==
        kExitUsage);
  CHECK(run({"evaluate", "--pred", dir / "nope.pgm", "--out", dir / "m"}).code == kExitIo);
}

TEST_CASE("gradcheck command") {
  CHECK(run({"gradcheck", "--hidden", "3", "--size", "6"}).code == kExitOk);
  CHECK(run({"gradcheck", "--identity", "--hidden", "3", "--size", "6"}).code == kExitOk);
  const Result bad = run({"gradcheck", "--sabotage", "--hidden", "3", "--size", "6"});
  CHECK(bad.code == kExitCheckFailed);
  CHECK(bad.err.find("block0.s.conv0.weight") != std::string::npos);
}

TEST_CASE("make-phantoms then train from the manifest") {
  TempDir dir;
  REQUIRE(run(tiny({"make-phantoms", "--out", dir / "data"})).code == kExitOk);
  const DatasetManifest m = read_manifest(dir / "data/manifest.txt");
  CHECK(m.records.size() == 10);
  const Result r = run({"train", "--set", "data.manifest=" + (dir / "data/manifest.txt"), "--epochs", "1", "--hidden", "4",
                        "--blocks", "1", "--out", dir / "run"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("on 6 records") != std::string::npos);
}
