#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "doctest.h"
#include "fvit/data/data.hpp"
#include "oracles.hpp"

using namespace fvit;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result fvit_run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fvit_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Lines not starting with '#'.
std::vector<std::string> records(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty() && line[0] != '#') out.push_back(line);
  return out;
}

// Synthetic MNIST-shaped IDX files: digit d is a bright bar at row 2 + 2d.
fs::path synthetic_mnist() {
  static const fs::path root = [] {
    const fs::path dir = fresh_dir("data");
    fs::create_directories(dir / "mnist");
    Rng rng(1);
    auto make = [&](std::size_t n, const std::string& prefix) {
      data::LabeledDataset ds;
      ds.images = oracle::random<float>({n, 1, 28, 28}, rng, 0.0, 0.2);
      for (std::size_t i = 0; i < n; ++i) {
        ds.labels.push_back(std::int32_t(i % 10));
        for (std::size_t x = 4; x < 24; ++x) ds.images.at(i, 0, 2 + 2 * (i % 10), x) = 1.0f;
      }
      data::write_idx(ds, (dir / "mnist" / (prefix + "-images-idx3-ubyte")).string(),
                      (dir / "mnist" / (prefix + "-labels-idx1-ubyte")).string());
    };
    make(40, "train");
    make(20, "t10k");
    return dir;
  }();
  return root;
}

std::vector<std::string> train_args(const fs::path& out) {
  return {"train", "--dataset", "mnist", "--data-dir", synthetic_mnist().string(), "--model", "micro",
          "--batch-size", "16", "--seed", "7", "--out", out.string()};
}

}  // namespace

TEST_CASE("cli usage errors") {
  CHECK(fvit_run({}).code == cli::kUsage);
  CHECK(fvit_run({"frobnicate"}).code == cli::kUsage);
  CHECK(fvit_run({"count", "--bogus", "1"}).code == cli::kUsage);
  CHECK(fvit_run({"count", "--variant", "huge"}).code == cli::kUsage);
  CHECK(fvit_run({"count", "--resolution", "100"}).code == cli::kUsage);
  CHECK(fvit_run({"gradcheck", "--trials", "0"}).code == cli::kUsage);
  CHECK(fvit_run({"train", "--dataset", "mnist", "--data-dir", "/nonexistent/fvit"}).code == cli::kUsage);
  CHECK(fvit_run({"train", "--dataset", "imagenet", "--data-dir", synthetic_mnist().string()}).code == cli::kUsage);
  CHECK(fvit_run({"export-kernels", "--checkpoint", "/nonexistent.fvit"}).code == cli::kUsage);
}

TEST_CASE("cli help lists every flag") {
  const auto h = fvit_run({"train", "--help"});
  CHECK(h.code == cli::kOk);
  for (const char* flag : {"--dataset", "--data-dir", "--epochs", "--lr", "--warmup-epochs", "--weight-decay",
                           "--label-smoothing", "--batch-size", "--seed", "--out", "--config", "--resume"}) {
    CHECK_MESSAGE(h.out.find(flag) != std::string::npos, flag);
  }
  for (const char* cmd : {"eval", "gradcheck", "count", "ablate", "export-kernels"}) {
    CHECK(fvit_run({cmd, "--help"}).code == cli::kOk);
  }
}

TEST_CASE("cli gradcheck") {
  const auto ok = fvit_run({"gradcheck", "--trials", "40"});
  CHECK(ok.code == cli::kOk);
  CHECK(ok.out.find("kernel") != std::string::npos);
  const auto bad = fvit_run({"gradcheck", "--trials", "40", "--break-eq9"});
  CHECK(bad.code == cli::kCheckFailed);
  CHECK(bad.out.find("param=lambda") != std::string::npos);
}

TEST_CASE("cli count") {
  const auto micro = fvit_run({"count", "--variant", "micro", "--resolution", "32"});
  CHECK(micro.code == cli::kOk);
  CHECK(micro.out.find("stage4") != std::string::npos);
  const auto large = fvit_run({"count", "--variant", "large"});
  CHECK(large.out.find("deviation") != std::string::npos);
  CHECK((large.code == cli::kOk || large.code == cli::kCheckFailed));
}

TEST_CASE("cli train, determinism, resume and eval") {
  const auto a = fresh_dir("run-a"), b = fresh_dir("run-b");
  auto args = train_args(a);
  args.insert(args.end(), {"--epochs", "1"});
  REQUIRE(fvit_run(args).code == cli::kOk);
  const auto lines = records(a / "metrics.log");
  REQUIRE(lines.size() == 1);
  CHECK(lines[0].rfind("epoch=1 step=3 lr=", 0) == 0);
  CHECK(fs::exists(a / "checkpoint.fvit"));

  args = train_args(b);
  args.insert(args.end(), {"--epochs", "1"});
  REQUIRE(fvit_run(args).code == cli::kOk);
  CHECK(records(b / "metrics.log") == lines);
  CHECK(read_text(a / "checkpoint.fvit") == read_text(b / "checkpoint.fvit"));

  // Two epochs straight vs one epoch plus resume.
  const auto full = fresh_dir("full"), part = fresh_dir("part");
  args = train_args(full);
  args.insert(args.end(), {"--epochs", "2", "--warmup-epochs", "1"});
  REQUIRE(fvit_run(args).code == cli::kOk);
  args = train_args(part);
  args.insert(args.end(), {"--epochs", "2", "--warmup-epochs", "1", "--stop-after", "1"});
  REQUIRE(fvit_run(args).code == cli::kOk);
  CHECK(records(part / "metrics.log").size() == 1);
  args = train_args(part);
  args.insert(args.end(), {"--epochs", "2", "--warmup-epochs", "1", "--resume", (part / "checkpoint.fvit").string()});
  REQUIRE(fvit_run(args).code == cli::kOk);
  const auto full_lines = records(full / "metrics.log");
  REQUIRE(full_lines.size() == 2);
  CHECK(records(part / "metrics.log") == full_lines);
  CHECK(read_text(full / "checkpoint.fvit") == read_text(part / "checkpoint.fvit"));

  const auto ev = fvit_run({"eval", "--dataset", "mnist", "--data-dir", synthetic_mnist().string(), "--checkpoint",
                            (full / "checkpoint.fvit").string()});
  CHECK(ev.code == cli::kOk);
  CHECK(ev.out.find("test_acc=") != std::string::npos);
}

TEST_CASE("cli config file precedence") {
  const auto dir = fresh_dir("config");
  {
    std::ofstream f(dir / "run.cfg");
    f << "# recipe\nepochs = 2\nwarmup-epochs = 1\nbatch-size = 40\n";
  }
  CHECK(cli::config_flags((dir / "run.cfg").string(), {"--epochs", "1"}) ==
        std::vector<std::string>{"--warmup-epochs", "1", "--batch-size", "40"});

  auto args = train_args(dir / "out");
  args.insert(args.end(), {"--config", (dir / "run.cfg").string()});
  REQUIRE(fvit_run(args).code == cli::kOk);
  auto lines = records(dir / "out" / "metrics.log");
  REQUIRE(lines.size() == 2);
  // batch-size 16 from the command line beats 40 from the file: 3 steps per epoch.
  CHECK(lines[1].rfind("epoch=2 step=6 ", 0) == 0);

  {
    std::ofstream f(dir / "bad.cfg");
    f << "not-a-flag = 3\n";
  }
  args = train_args(dir / "out2");
  args.insert(args.end(), {"--config", (dir / "bad.cfg").string()});
  CHECK(fvit_run(args).code == cli::kUsage);
}

TEST_CASE("cli numeric abort") {
  auto args = train_args(fresh_dir("nan"));
  args.insert(args.end(), {"--epochs", "3", "--lr", "1e30", "--warmup-epochs", "0"});
  CHECK(fvit_run(args).code == cli::kNumeric);
}

TEST_CASE("kernel export") {
  const auto dir = fresh_dir("kernels");
  const auto r = fvit_run({"export-kernels", "--init", "--stage", "0", "--count", "4", "--out", dir.string()});
  REQUIRE(r.code == cli::kOk);
  std::size_t pgms = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".pgm") continue;
    ++pgms;
    const std::string bytes = read_text(e.path());
    const std::string header = "P5\n7 7\n255\n";
    CHECK(bytes.size() == header.size() + 49);
    CHECK(bytes.compare(0, header.size(), header) == 0);
  }
  CHECK(pgms == 4);
  const auto index = records(dir / "index.txt");
  CHECK(index.size() == 4);

  // Degenerate kernel: flat gray.
  const std::string flat = cli::kernel_pgm(Tensor<double>({3, 3}, 1e-14));
  CHECK(flat == std::string("P5\n3 3\n255\n") + std::string(9, char(128)));
  // Min-max scaling puts the extremes at 0 and 255.
  const std::string ramp = cli::kernel_pgm(Tensor<double>({1, 3}, std::vector<double>{-2.0, 0.0, 2.0}));
  CHECK(ramp.substr(ramp.size() - 3) == std::string{char(0), char(128), char(255)});
}

TEST_CASE("ablation controls") {
  for (const char* v : {"micro", "small"}) {
    const auto cfg = model::preset(v);
    const std::size_t dual = model::count_params(cfg);
    const std::size_t plain = model::count_params(cli::plain_control(cfg, false));
    CHECK(dual > plain);
    const std::size_t equal = model::count_params(cli::plain_control(cfg, true));
    CHECK(std::abs(double(equal) - double(dual)) / double(dual) < 0.01);
  }
  const auto dir = fresh_dir("ablate");
  const auto r = fvit_run({"ablate", "--dataset", "mnist", "--data-dir", synthetic_mnist().string(), "--model",
                           "micro", "--epochs", "1", "--batch-size", "20", "--seeds", "1,2", "--out", dir.string()});
  CHECK(r.code == cli::kOk);
  const auto log = read_text(dir / "ablation.log");
  CHECK(log.find("delta") != std::string::npos);
  const auto again_dir = fresh_dir("ablate2");
  fvit_run({"ablate", "--dataset", "mnist", "--data-dir", synthetic_mnist().string(), "--model", "micro", "--epochs",
            "1", "--batch-size", "20", "--seeds", "1,2", "--out", again_dir.string()});
  CHECK(records(again_dir / "ablation.log") == records(dir / "ablation.log"));
}
