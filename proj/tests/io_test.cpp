#include "doctest.h"

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "xlst/config.hpp"
#include "xlst/error.hpp"
#include "xlst/io.hpp"
#include "xlst/runlog.hpp"
#include "xlst/synth.hpp"

using namespace xlst;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("xlst-io-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Bitwise reflected CRC-32 (polynomial 0xEDB88320), independent of zlib.
std::uint32_t crc32_reference(const std::string& bytes) {
  std::uint32_t c = 0xffffffffu;
  for (unsigned char b : bytes) {
    c ^= b;
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xedb88320u & (0u - (c & 1u)));
  }
  return ~c;
}

std::uint32_t u32_at(const std::string& s, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
  return v;
}

std::vector<TensorRecord> sample_records() {
  Matrix<float> f(2, 3);
  f << 1.5f, -2.0f, 0.0f, std::nanf(""), 1e-30f, -0.0f;
  Matrix<double> d(1, 2);
  d << 3.25, -1e300;
  return {matrix_record<float>("a", f), matrix_record<double>("b.c/d", d), int_record("ints", {-1, 0, 7}),
          text_record("text", "hello\nworld"), matrix_record<double>("empty", Matrix<double>(0, 4))};
}

template <typename S>
Checkpoint<S> sample_checkpoint() {
  const auto cfg = EncoderConfig::desk_preset();
  Checkpoint<S> c;
  c.kind = "xlst";
  c.encoder_config = cfg;
  c.encoder = init_params<S>(cfg, 1);
  c.head = init_linear<S>("classifier", cfg.projector_output_dim, 5, 2);
  c.optimizer.step = 17;
  for (const auto& [k, v] : c.encoder.weights) {
    c.optimizer.m[k] = v * S(0.5);
    c.optimizer.v[k] = v.cwiseAbs();
    c.optimizer.updates[k] = 17;
  }
  c.ema = EmaState<S>{init_params<S>(cfg, 3), 0.9999};
  c.step = 5;
  c.total_steps = 40;
  c.round = 1;
  Rng rng(9);
  rng.normal();
  c.rng_state = rng.save_state();
  c.sampler_state = "sampler\nstate";
  c.config_hash = "abc123";
  return c;
}

template <typename S>
void check_same(const Checkpoint<S>& a, const Checkpoint<S>& b) {
  CHECK(a.kind == b.kind);
  CHECK(encoder_config_json(a.encoder_config) == encoder_config_json(b.encoder_config));
  CHECK(a.encoder.weights == b.encoder.weights);
  CHECK(a.encoder.buffers == b.encoder.buffers);
  CHECK(a.head == b.head);
  CHECK(a.optimizer.m == b.optimizer.m);
  CHECK(a.optimizer.v == b.optimizer.v);
  CHECK(a.optimizer.updates == b.optimizer.updates);
  CHECK(a.optimizer.step == b.optimizer.step);
  CHECK(a.ema.has_value() == b.ema.has_value());
  if (a.ema && b.ema) {
    CHECK(a.ema->lambda == b.ema->lambda);
    CHECK(a.ema->target.weights == b.ema->target.weights);
    CHECK(a.ema->target.buffers == b.ema->target.buffers);
  }
  CHECK(a.step == b.step);
  CHECK(a.total_steps == b.total_steps);
  CHECK(a.round == b.round);
  CHECK(a.rng_state == b.rng_state);
  CHECK(a.sampler_state == b.sampler_state);
  CHECK(a.config_hash == b.config_hash);
}

}  // namespace

TEST_CASE("container layout is little-endian with a CRC-32 trailer") {
  const auto bytes = encode_container({int_record("n", {258})});
  CHECK(bytes.substr(0, 8) == "XLSTTNSR");
  CHECK(u32_at(bytes, 8) == container_version);
  CHECK(u32_at(bytes, 12) == 1);  // low half of the u64 count
  CHECK(u32_at(bytes, 20) == 1);  // name length
  CHECK(bytes[24] == 'n');
  CHECK(bytes[25] == static_cast<char>(DType::i64));
  CHECK(u32_at(bytes, 26) == 1);  // rank
  CHECK(u32_at(bytes, 30) == 1);  // dim 0
  CHECK(u32_at(bytes, 38) == 8);  // payload bytes
  CHECK(static_cast<unsigned char>(bytes[46]) == 2);
  CHECK(static_cast<unsigned char>(bytes[47]) == 1);
  REQUIRE(bytes.size() == 58);
  CHECK(u32_at(bytes, 54) == crc32_reference(bytes.substr(0, 54)));
}

TEST_CASE("container round trip preserves every record bit for bit") {
  const auto records = sample_records();
  const auto bytes = encode_container(records);
  const auto back = decode_container(bytes);
  CHECK(back == records);
  CHECK(encode_container(back) == bytes);
  const auto f = record_matrix<float>(back[0]);
  CHECK(std::isnan(f(1, 0)));
  CHECK(std::signbit(f(1, 2)));
  CHECK(record_ints(back[2]) == std::vector<std::int64_t>{-1, 0, 7});
  CHECK(record_text(back[3]) == "hello\nworld");
  CHECK(record_matrix<double>(back[4]).rows() == 0);
  CHECK_THROWS_AS(record_matrix<double>(back[0]), FormatError);
}

TEST_CASE("every truncation is a checksum error") {
  const auto bytes = encode_container(sample_records());
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    CHECK_THROWS_AS(decode_container(bytes.substr(0, n)), ChecksumError);
  }
}

TEST_CASE("corruption, version and magic are diagnosed") {
  const auto bytes = encode_container(sample_records());
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_container(flipped), ChecksumError);

  auto other = bytes;
  other[8] = 7;
  try {
    decode_container(other, "x.ckpt");
    FAIL("expected a version error");
  } catch (const VersionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("version 7") != std::string::npos);
    CHECK(msg.find("version " + std::to_string(container_version)) != std::string::npos);
  }

  auto magic = bytes;
  magic[0] = 'Y';
  CHECK_THROWS_AS(decode_container(magic), FormatError);
}

TEST_CASE("checkpoint save, load and save again is byte identical") {
  TempDir dir("ckpt");
  const auto c32 = sample_checkpoint<float>();
  save_checkpoint(dir.path / "a.ckpt", c32);
  const auto l32 = load_checkpoint<float>(dir.path / "a.ckpt");
  check_same(c32, l32);
  save_checkpoint(dir.path / "b.ckpt", l32);
  CHECK(read_file(dir.path / "a.ckpt") == read_file(dir.path / "b.ckpt"));
  CHECK(checkpoint_precision(dir.path / "a.ckpt") == 32);
  CHECK_THROWS_AS(load_checkpoint<double>(dir.path / "a.ckpt"), FormatError);

  auto c64 = sample_checkpoint<double>();
  c64.ema.reset();
  c64.head.clear();
  save_checkpoint(dir.path / "c.ckpt", c64);
  const auto l64 = load_checkpoint<double>(dir.path / "c.ckpt");
  check_same(c64, l64);
  CHECK(checkpoint_precision(dir.path / "c.ckpt") == 64);
  save_checkpoint(dir.path / "d.ckpt", l64);
  CHECK(file_sha256(dir.path / "c.ckpt") == file_sha256(dir.path / "d.ckpt"));
}

TEST_CASE("a checkpoint whose tensors disagree with its config is refused") {
  auto c = sample_checkpoint<double>();
  c.encoder.weights.begin()->second.resize(1, 1);
  CHECK_THROWS_AS(checkpoint_from_records<double>(checkpoint_records(c), "c"), StateError);
  CHECK_THROWS_AS(checkpoint_from_records<double>({int_record("stray", {1})}, "c"), FormatError);
}

TEST_CASE("corpus files round trip and re-save byte identically") {
  TempDir dir("corpus");
  FamilyConfig fc;
  const auto fam = make_language_family(fc);
  auto data = make_set(fam.languages[1], "t", 6, 40, 60, 4);
  auto unlabeled = strip_labels(make_set(fam.languages[2], "u", 3, 40, 60, 5));
  data.insert(data.end(), unlabeled.begin(), unlabeled.end());

  const auto manifest = write_corpus(data, dir.path / "a", "set");
  CHECK(manifest == dir.path / "a" / "set.tsv");
  const auto back = read_corpus(manifest);
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].id == data[i].id);
    CHECK(back[i].language == data[i].language);
    CHECK(back[i].features == data[i].features);
    CHECK(back[i].frame_labels == data[i].frame_labels);
    CHECK(back[i].transcript == data[i].transcript);
  }
  write_corpus(back, dir.path / "b", "set");
  CHECK(read_file(dir.path / "a" / "set.tsv") == read_file(dir.path / "b" / "set.tsv"));
  for (const auto& u : data) {
    const std::string rel = "set/" + u.id + ".tensors";
    CHECK(read_file(dir.path / "a" / rel) == read_file(dir.path / "b" / rel));
  }

  // a manifest line that disagrees with its feature file
  auto text = read_file(manifest);
  text.replace(text.find("\t1\t"), 3, "\t3\t");
  write_file_atomic(manifest, text);
  CHECK_THROWS_AS(read_corpus(manifest), DataError);
}

TEST_CASE("sha256 matches the standard test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("config parsing is strict") {
  const auto base = default_config("pretrain-sup");
  const auto c = parse_config("[schedule]\nepochs = 3\nlr = 0.002\n[corpus]\nlanguages = 1, 2\n", base);
  CHECK(c.schedule.epochs == 3);
  CHECK(c.schedule.lr == 0.002);
  CHECK(c.languages == std::vector<int>{1, 2});
  CHECK(c.lambda == 0.9999);

  CHECK_THROWS_AS(parse_config("[schedule]\nepoch = 3\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[sched]\nepochs = 3\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[schedule]\nepochs = three\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[schedule]\nepochs = 3.5\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[schedule]\nepochs = 3\nepochs = 4\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[xlst]\nfreeze_main_batch_norm = yes\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[xlst]\nlambda = 1.5\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[run]\nprecision = 16\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[corpus]\nlanguages = 1,,2\n", base), ConfigError);
  CHECK_THROWS_AS(parse_config("epochs = 3\n", base), ConfigError);
  try {
    parse_config("[schedule]\nepoch = 3\n", base);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("rendered configs parse back to the same config") {
  for (const char* cmd : {"synth-data", "pretrain-sup", "pretrain-xlst", "finetune", "eval"}) {
    auto c = default_config(cmd);
    c.schedule.lr = 0.1 + 0.2;  // needs all 17 digits
    c.languages = {3, 1};
    c.out = "somewhere";
    const auto text = render_config(c);
    const auto back = parse_config(text, RunConfig{});
    CHECK(render_config(back) == text);
    CHECK(back.schedule.lr == c.schedule.lr);
  }
  CHECK_THROWS_AS(default_config("train"), ConfigError);
}

TEST_CASE("the config hash ignores the output directory only") {
  auto c = default_config("pretrain-xlst");
  const auto h = config_hash(c);
  CHECK(h.size() == 64);
  c.out = "elsewhere";
  CHECK(config_hash(c) == h);
  c.seed = 1;
  CHECK(config_hash(c) != h);
}

TEST_CASE("metrics logs tolerate a torn last line and truncate on resume") {
  TempDir dir("metrics");
  const auto path = dir.path / "m.jsonl";
  {
    MetricsLog log(path);
    for (int s = 1; s <= 5; ++s) {
      StepMetrics m;
      m.step = s;
      m.loss = 1.0 / s;
      log.write(step_record(m));
    }
  }
  {
    std::ofstream f(path, std::ios::app);
    f << "{\"type\":\"step\",\"st";
  }
  auto records = read_metrics(path);
  REQUIRE(records.size() == 5);
  CHECK(records[0]["frame_acc"].is_null());
  CHECK(records[2]["loss"].get<double>() == 1.0 / 3);

  {
    MetricsLog log(path, 3);
    nlohmann::ordered_json j;
    j["step"] = 4;
    j["note"] = "resumed";
    log.write(j);
  }
  records = read_metrics(path);
  REQUIRE(records.size() == 4);
  CHECK(records[2]["step"] == 3);
  CHECK(records[3]["note"] == "resumed");
}

TEST_CASE("a run directory admits one writer at a time") {
  TempDir dir("lock");
  {
    RunLock a(dir.path / "run");
    CHECK_THROWS_AS(RunLock(dir.path / "run"), StateError);
  }
  CHECK_NOTHROW(RunLock(dir.path / "run"));
}
