#include "doctest.h"

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "xlst/cli.hpp"
#include "xlst/error.hpp"
#include "xlst/io.hpp"
#include "xlst/runlog.hpp"

using namespace xlst;
namespace fs = std::filesystem;

namespace {

const fs::path root = fs::temp_directory_path() / ("xlst-cli-" + std::to_string(::getpid()));

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "xlst");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string write_config(const std::string& name, const std::string& text) {
  fs::create_directories(root);
  const auto path = root / name;
  std::ofstream(path) << text;
  return path.string();
}

const std::string corpus = (root / "data").string();

struct Cleanup {
  ~Cleanup() { fs::remove_all(root); }
} cleanup;

// Tiny corpus shared by every case, written once.
const std::string& data_config() {
  static const std::string path = [] {
    const auto p = write_config("data.ini",
                                "[data]\nsupervised_utterances = 24\nheldout_utterances = 8\n"
                                "unlabeled_per_language = 12\nfinetune_utterances = 10\ntest_utterances = 6\n"
                                "min_frames = 40\nmax_frames = 60\n");
    const auto r = cli({"synth-data", "--config", p, "--out", corpus, "--seed", "5"});
    REQUIRE(r.code == 0);
    return p;
  }();
  return path;
}

std::string train_config() {
  data_config();
  return write_config("train.ini", "[corpus]\ndir = " + corpus + "\n[schedule]\nepochs = 2\n[train]\nbatch_size = 6\n"
                                   "checkpoint_every = 2\n");
}

std::vector<std::string> lines(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const fs::path& supervised_run() {
  static const fs::path dir = [] {
    const auto d = root / "sup";
    const auto r = cli({"pretrain-sup", "--config", train_config(), "--out", d.string()});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("synth-data writes complete manifests and is reproducible") {
  data_config();
  for (const char* name : {"supervised", "heldout", "unlabeled", "finetune", "test"}) {
    const auto m = lines(fs::path(corpus) / (std::string(name) + ".tsv"));
    REQUIRE(m.size() > 1);
    for (std::size_t i = 1; i < m.size(); ++i) {
      const auto rel = m[i].substr(m[i].find('\t', m[i].find('\t') + 1) + 1);
      CHECK(fs::exists(fs::path(corpus) / rel.substr(0, rel.find('\t'))));
    }
  }
  CHECK(lines(fs::path(corpus) / "unlabeled.tsv").size() == 1 + 4 * 12);

  const auto again = (root / "nested" / "deeper" / "data").string();
  REQUIRE(cli({"synth-data", "--config", data_config(), "--out", again, "--seed", "5"}).code == 0);
  for (const char* name : {"supervised", "unlabeled", "test"}) {
    const std::string f = std::string(name) + ".tsv";
    CHECK(file_sha256(fs::path(corpus) / f) == file_sha256(fs::path(again) / f));
  }
  CHECK(fs::exists(fs::path(again) / "config.ini"));
}

TEST_CASE("bad invocations fail with a diagnostic") {
  const auto bad = write_config("bad.ini", "[schedule]\nepochz = 2\n");
  auto r = cli({"pretrain-sup", "--config", bad, "--out", (root / "bad").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("epochz") != std::string::npos);
  CHECK(cli({"pretrain-xlst", "--config", train_config(), "--out", (root / "bad").string()}).code == 1);
  CHECK(cli({"frobnicate"}).code != 0);
  CHECK(cli({"pretrain-sup", "--precision", "16"}).code != 0);
}

TEST_CASE("pretrain-sup logs every step and checkpoints periodically") {
  const auto& dir = supervised_run();
  const auto records = read_metrics(dir / "metrics.jsonl");
  // 24 utterances in batches of 6 for 2 epochs
  REQUIRE(records.size() == 8);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    CHECK(r["step"] == i + 1);
    CHECK(r["epoch"] == (i < 4 ? 1 : 2));
    CHECK(r.contains("lr"));
    CHECK(r.contains("loss"));
    CHECK(r["frame_acc"].is_number());
  }
  for (int s : {2, 4, 6, 8}) {
    char name[32];
    std::snprintf(name, sizeof(name), "step-%08d.ckpt", s);
    CHECK(fs::exists(dir / "checkpoints" / name));
  }
  const auto c = load_checkpoint<float>(dir / "final.ckpt");
  CHECK(c.kind == "supervised");
  CHECK(c.step == 8);
  CHECK(read_file(dir / "config.ini").find("[schedule]\nepochs = 2\n") != std::string::npos);
}

TEST_CASE("identical runs produce identical checkpoints") {
  const auto dir = root / "sup-again";
  REQUIRE(cli({"pretrain-sup", "--config", train_config(), "--out", dir.string()}).code == 0);
  CHECK(file_sha256(dir / "final.ckpt") == file_sha256(supervised_run() / "final.ckpt"));
  CHECK(read_file(dir / "metrics.jsonl") == read_file(supervised_run() / "metrics.jsonl"));

  const auto other = root / "sup-seed";
  REQUIRE(cli({"pretrain-sup", "--config", train_config(), "--out", other.string(), "--seed", "9"}).code == 0);
  CHECK(file_sha256(other / "final.ckpt") != file_sha256(supervised_run() / "final.ckpt"));
}

TEST_CASE("resuming a supervised run reproduces the rest of its metrics") {
  const auto dir = root / "sup-resumed";
  const auto mid = supervised_run() / "checkpoints" / "step-00000004.ckpt";
  REQUIRE(cli({"pretrain-sup", "--config", train_config(), "--out", dir.string(), "--resume", mid.string()}).code == 0);
  const auto full = lines(supervised_run() / "metrics.jsonl");
  const auto resumed = lines(dir / "metrics.jsonl");
  CHECK(resumed == std::vector<std::string>(full.begin() + 4, full.end()));
  CHECK(file_sha256(dir / "final.ckpt") == file_sha256(supervised_run() / "final.ckpt"));

  // resuming inside the original directory rewrites the log in place
  const auto copy = root / "sup-copy";
  fs::copy(supervised_run(), copy, fs::copy_options::recursive);
  REQUIRE(cli({"pretrain-sup", "--config", train_config(), "--out", copy.string(), "--resume",
               (copy / "checkpoints" / "step-00000004.ckpt").string()})
              .code == 0);
  CHECK(lines(copy / "metrics.jsonl") == full);

  // a changed config refuses the checkpoint
  const auto changed = write_config("changed.ini", "[corpus]\ndir = " + corpus +
                                                       "\n[schedule]\nepochs = 3\n[train]\nbatch_size = 6\n");
  const auto r = cli({"pretrain-sup", "--config", changed, "--out", (root / "x").string(), "--resume", mid.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("different config") != std::string::npos);
}

TEST_CASE("pretrain-xlst in mono and multi mode") {
  const auto init = (supervised_run() / "final.ckpt").string();
  const auto mono_cfg = write_config("mono.ini", "[corpus]\ndir = " + corpus +
                                                     "\nlanguages = 2\n[schedule]\nepochs = 1\n[xlst]\nmode = mono\n");
  const auto mono = root / "mono";
  REQUIRE(cli({"pretrain-xlst", "--config", mono_cfg, "--init", init, "--out", mono.string()}).code == 0);
  const auto summary = nlohmann::json::parse(read_file(mono / "summary.json"));
  CHECK(summary["languages"] == std::vector<int>{2});
  CHECK(summary["lambda"] == 0.9999);
  CHECK(read_file(mono / "config.ini").find("lambda = 0.9999\n") != std::string::npos);
  // 12 utterances of one language, batches of 8
  CHECK(read_metrics(mono / "metrics.jsonl").back()["step"] == 2);

  const auto multi_cfg = write_config("multi.ini", "[corpus]\ndir = " + corpus +
                                                       "\n[schedule]\nepochs = 2\n[xlst]\ntau = 0\nmonitor_every = 3\n");
  const auto multi = root / "multi";
  REQUIRE(cli({"pretrain-xlst", "--config", multi_cfg, "--init", init, "--out", multi.string()}).code == 0);
  std::vector<nlohmann::json> epochs;
  for (const auto& r : read_metrics(multi / "metrics.jsonl")) {
    if (r["type"] == "epoch") epochs.push_back(r);
  }
  REQUIRE(epochs.size() == 2);
  CHECK(epochs[0]["step"] == 6);
  CHECK(epochs[0]["languages"] == std::vector<int>{0, 1, 2, 3});
  for (const auto& p : epochs[0]["probabilities"]) CHECK(p.get<double>() == doctest::Approx(0.25));
  const auto draws = epochs[1]["draws"].get<std::vector<std::int64_t>>();
  CHECK(std::accumulate(draws.begin(), draws.end(), std::int64_t{0}) == 12 * 8);
  const auto s = nlohmann::json::parse(read_file(multi / "summary.json"));
  CHECK(s["collapse_detected"] == false);

  // a self-trained checkpoint can seed another round, a fine-tuned one cannot
  CHECK(cli({"pretrain-xlst", "--config", mono_cfg, "--init", (mono / "final.ckpt").string(), "--out",
             (root / "mono2").string()})
            .code == 0);
}

TEST_CASE("finetune reports each language and the average, eval leaves the model alone") {
  const auto ft_cfg = write_config("ft.ini", "[corpus]\ndir = " + corpus + "\n[schedule]\nepochs = 2\n");
  const auto dir = root / "ft";
  const auto r = cli({"finetune", "--config", ft_cfg, "--init", (supervised_run() / "final.ckpt").string(), "--out",
                      dir.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("avg: PER") != std::string::npos);
  const auto summary = nlohmann::json::parse(read_file(dir / "summary.json"));
  REQUIRE(summary["languages"].size() == 3);
  double sum = 0;
  for (const auto& l : summary["languages"]) {
    sum += l["per"].get<double>();
    const auto report = nlohmann::json::parse(read_file(dir / ("l" + std::to_string(l["language"].get<int>())) / "report.json"));
    CHECK(report["per"] == l["per"]);
    CHECK(report["utterances"].size() == 6);
  }
  CHECK(summary["average_per"].get<double>() == doctest::Approx(sum / 3).epsilon(1e-15));

  const auto model = dir / "l3" / "final.ckpt";
  const auto before = file_sha256(model);
  const auto ev_cfg = write_config("ev.ini", "[corpus]\ndir = " + corpus + "\nlanguages = 3\n");
  REQUIRE(cli({"eval", "--config", ev_cfg, "--init", model.string(), "--out", (root / "ev").string()}).code == 0);
  CHECK(file_sha256(model) == before);
  const auto ev = nlohmann::json::parse(read_file(root / "ev" / "eval-l3.json"));
  CHECK(ev["per"] == summary["languages"][2]["per"]);
  CHECK(ev["utterances"][0].contains("hypothesis"));

  CHECK(cli({"pretrain-xlst", "--config", ft_cfg, "--init", model.string(), "--out", (root / "no").string()}).code == 1);
  CHECK(cli({"eval", "--config", ev_cfg, "--init", (supervised_run() / "final.ckpt").string(), "--out",
             (root / "no").string()})
            .code == 1);
}

TEST_CASE("precision follows the flag and then the input checkpoint") {
  const auto dir = root / "sup64";
  REQUIRE(cli({"pretrain-sup", "--config", train_config(), "--out", dir.string(), "--precision", "64"}).code == 0);
  CHECK(checkpoint_precision(dir / "final.ckpt") == 64);
  const auto mono_cfg = write_config("mono64.ini", "[corpus]\ndir = " + corpus +
                                                       "\nlanguages = 1\n[schedule]\nepochs = 1\n[xlst]\nmode = mono\n");
  REQUIRE(cli({"pretrain-xlst", "--config", mono_cfg, "--init", (dir / "final.ckpt").string(), "--out",
               (root / "xl64").string()})
              .code == 0);
  CHECK(checkpoint_precision(root / "xl64" / "final.ckpt") == 64);
}

TEST_CASE("the output root comes from the environment") {
  const auto out_root = root / "envroot";
  ::setenv(out_root_env, out_root.c_str(), 1);
  const auto r = cli({"synth-data", "--config", data_config()});
  ::unsetenv(out_root_env);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out_root / "synth-data" / "test.tsv"));
}

TEST_CASE("a locked run directory is refused") {
  const auto dir = root / "locked";
  RunLock lock(dir);
  const auto r = cli({"synth-data", "--config", data_config(), "--out", dir.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("in use") != std::string::npos);
}

