#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "nxgpt/checkpoint.hpp"
#include "nxgpt/cli.hpp"
#include "nxgpt/config.hpp"
#include "nxgpt/model.hpp"

using namespace nxgpt;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string hash_line(const std::string& out) {
  const auto at = out.find("dataset hash: ");
  REQUIRE(at != std::string::npos);
  return out.substr(at, out.find('\n', at) - at);
}

// Small dataset shared by the train/sweep cases.
const fs::path& tiny_data() {
  static const fs::path dir = [] {
    auto d = testing::scratch_dir("cli_tiny_data");
    const auto r = cli({"gen-data", "--out", d.string(), "--seed", "3", "--pairs", "2", "--dialogues", "2"});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

bool only_children_of(const fs::path& root, const fs::path& allowed) {
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.path() != allowed) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"no-such-command"}).code == kExitUsage);
  CHECK(cli({"gen-data"}).code == kExitUsage);  // --out missing
  const auto dir = testing::scratch_dir("cli_usage");
  CHECK(cli({"gen-data", "--out", (dir / "d").string(), "--pairs", "0"}).code == kExitUsage);
  CHECK_FALSE(fs::exists(dir / "d"));
  CHECK(cli({"train", "--stage", "4", "--data", "x", "--out", "y"}).code == kExitUsage);
  CHECK(cli({"sweep-signals", "--counts", "1,zero", "--data", "x", "--out", (dir / "s").string()}).code == kExitUsage);
  CHECK_FALSE(fs::exists(dir / "s"));
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("gen-data is reproducible") {
  const auto a = testing::scratch_dir("cli_gen_a");
  const auto b = testing::scratch_dir("cli_gen_b");
  const auto ra = cli({"gen-data", "--out", a.string(), "--seed", "5", "--pairs", "2", "--dialogues", "3"});
  const auto rb = cli({"gen-data", "--out", b.string(), "--seed", "5", "--pairs", "2", "--dialogues", "3"});
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);
  CHECK(hash_line(ra.out) == hash_line(rb.out));
  CHECK(fs::file_size(a / "manifest.json") > 0);
  CHECK(ra.out.find("seed: 5") != std::string::npos);
}

TEST_CASE("seed falls back to the environment") {
  const auto a = testing::scratch_dir("cli_env_a");
  ::setenv("NXGPT_SEED", "77", 1);
  const auto r = cli({"gen-data", "--out", a.string(), "--pairs", "1", "--dialogues", "1"});
  CHECK(r.out.find("seed: 77") != std::string::npos);
  ::setenv("NXGPT_SEED", "not-a-number", 1);
  CHECK(cli({"gen-data", "--out", a.string(), "--pairs", "1", "--dialogues", "1"}).code == kExitUsage);
  ::unsetenv("NXGPT_SEED");
  const auto d = cli({"gen-data", "--out", a.string(), "--pairs", "1", "--dialogues", "1"});
  CHECK(d.out.find("seed: 1234") != std::string::npos);
}

TEST_CASE("unwritable output exits 2") {
  const auto dir = testing::scratch_dir("cli_unwritable");
  std::ofstream(dir / "file") << "x";
  CHECK(cli({"gen-data", "--out", (dir / "file" / "sub").string(), "--pairs", "1", "--dialogues", "1"}).code ==
        kExitRuntime);
}

TEST_CASE("param-budget") {
  SUBCASE("paper scale") {
    const auto r = cli({"param-budget", "--paper-scale"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("ratio 0.01247") != std::string::npos);
    CHECK(r.out.find("≈1%") != std::string::npos);
  }
  SUBCASE("desk config matches the instantiated model") {
    const auto dir = testing::scratch_dir("cli_budget");
    ModelConfig cfg;
    save_config(cfg, (dir / "cfg.json").string());
    const auto r = cli({"param-budget", "--config", (dir / "cfg.json").string()});
    REQUIRE(r.code == 0);
    const Model model(cfg);
    const double t = static_cast<double>(model.store().count_scalars(Role::kTrainable));
    const double f = static_cast<double>(model.store().count_scalars(Role::kFrozen));
    std::ostringstream expect;
    expect << "ratio " << std::fixed << std::setprecision(5) << t / (t + f);
    CHECK_MESSAGE(r.out.find(expect.str()) != std::string::npos, r.out);
  }
  SUBCASE("degenerate and invalid inputs") {
    const auto dir = testing::scratch_dir("cli_budget_bad");
    std::ofstream(dir / "zero.json") << R"({"entries": []})";
    CHECK(cli({"param-budget", "--config", (dir / "zero.json").string()}).code == kExitUsage);
    std::ofstream(dir / "bad.json") << R"({"llm": {"depth": 2}})";
    CHECK(cli({"param-budget", "--config", (dir / "bad.json").string()}).code == kExitUsage);
    CHECK(cli({"param-budget"}).code == kExitUsage);
  }
}

TEST_CASE("train stage 2 without a stage-1 checkpoint") {
  const auto out = testing::scratch_dir("cli_train_dep") / "ckpt";
  const auto r = cli({"train", "--stage", "2", "--data", tiny_data().string(), "--out", out.string()});
  CHECK(r.code == kExitRuntime);
  CHECK(r.err.find("dependency") != std::string::npos);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("train stage 1 on tiny data, then infer") {
  const auto root = testing::scratch_dir("cli_train");
  const auto ckpt = root / "s1";
  const auto r = cli({"train", "--stage", "1", "--data", tiny_data().string(), "--out", ckpt.string(), "--seed", "4",
                      "--steps", "2", "--pretrain-steps", "2", "--diffusion-steps", "2", "--paper-recipe"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(only_children_of(root, ckpt));
  // The published recipe, verbatim.
  for (const char* line : {"optimizer       Adam", "learning rate   0.0004", "weight decay    0.001",
                           "epochs          1", "warmup ratio    0.1", "lr scheduler    Linear",
                           "batch size      18", "max tokens      512", "unfreeze LLM    ✗"}) {
    CHECK_MESSAGE(r.out.find(line) != std::string::npos, line);
  }
  CHECK(r.out.find("seed            4") != std::string::npos);
  CHECK(r.out.find("config hash") != std::string::npos);
  CHECK(fs::exists(ckpt / "run.json"));
  CHECK(fs::exists(ckpt / "manifest.json"));
  std::ifstream metrics(ckpt / "metrics.jsonl");
  std::string line;
  int stage_lines = 0;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("lr"));
    CHECK(j.contains("total"));
    stage_lines += j["phase"] == "stage1";
  }
  CHECK(stage_lines == 2);

  SUBCASE("stage 3 refuses a stage-1 checkpoint") {
    const auto bad = cli({"train", "--stage", "3", "--data", tiny_data().string(), "--out", (root / "s3").string(),
                          "--resume", ckpt.string(), "--paper-recipe"});
    CHECK(bad.code == kExitRuntime);
    CHECK_FALSE(fs::exists(root / "s3"));
  }
  SUBCASE("text-only inference") {
    const auto r2 = cli({"infer", "--ckpt", ckpt.string(), "--prompt", "hello", "--max-new", "8", "--out",
                         (root / "inf").string()});
    REQUIRE_MESSAGE(r2.code == 0, r2.err);
    const auto rec = nlohmann::json::parse(r2.out);
    CHECK(rec.contains("text"));
    CHECK(rec.contains("activations"));
    CHECK(fs::exists(root / "inf" / "record.json"));
  }
  SUBCASE("bad attachments") {
    CHECK(cli({"infer", "--ckpt", ckpt.string(), "--prompt", "hi", "--attach", "image"}).code == kExitUsage);
    CHECK(cli({"infer", "--ckpt", ckpt.string(), "--prompt", "hi", "--attach", "smell:/tmp/x"}).code == kExitUsage);
    CHECK(cli({"infer", "--ckpt", ckpt.string(), "--prompt", "hi", "--attach",
               "image:" + (root / "missing.bin").string()})
              .code == kExitRuntime);
  }
}

TEST_CASE("sweep-signals emits one sorted row per count") {
  const auto out = testing::scratch_dir("cli_sweep") / "sweep";
  const auto r = cli({"sweep-signals", "--counts", "4,1,8", "--data", tiny_data().string(), "--out", out.string(),
                      "--steps", "2", "--pretrain-steps", "2", "--diffusion-steps", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::ifstream csv(out / "sweep.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.rfind("count,", 0) == 0);
  std::vector<int> counts;
  std::string row;
  while (std::getline(csv, row)) {
    std::stringstream ss(row);
    std::string cell;
    std::getline(ss, cell, ',');
    counts.push_back(std::stoi(cell));
    int cells = 0;
    while (std::getline(ss, cell, ',')) {
      CHECK(std::isfinite(std::stod(cell)));
      ++cells;
    }
    CHECK(cells == 9);
  }
  CHECK(counts == std::vector<int>{1, 4, 8});
  CHECK(fs::exists(out / "sweep.txt"));
  CHECK(fs::exists(out / "run.json"));
  CHECK(r.out.find("dataset hash") != std::string::npos);
}
