#include "doctest.h"

#include <algorithm>
#include <functional>
#include <map>

#include "xlst/finetune.hpp"
#include "xlst/losses.hpp"
#include "xlst/synth.hpp"

using namespace xlst;
using Mat = Matrix<double>;

namespace {

Mat random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1, 1);
  return m;
}

// Plain recursive Levenshtein distance, memoized.
std::int64_t levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::int64_t> memo;
  std::function<std::int64_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::int64_t {
    if (i == a.size()) return static_cast<std::int64_t>(b.size() - j);
    if (j == b.size()) return static_cast<std::int64_t>(a.size() - i);
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const std::int64_t r = std::min({go(i + 1, j + 1) + (a[i] != b[j]), go(i, j + 1) + 1, go(i + 1, j) + 1});
    return memo[key] = r;
  };
  return go(0, 0);
}

std::vector<int> random_seq(Rng& rng) {
  std::vector<int> s(static_cast<std::size_t>(rng.uniform_int(0, 7)));
  for (auto& x : s) x = static_cast<int>(rng.uniform_int(0, 3));
  return s;
}

std::vector<int> chars(const std::string& s) { return {s.begin(), s.end()}; }

EncoderConfig small_encoder() {
  EncoderConfig c = EncoderConfig::desk_preset();
  c.input_dim = 16;
  return c;
}

Benchmark small_benchmark(std::uint64_t seed) {
  BenchmarkConfig bc;
  bc.family.seed = seed;
  bc.supervised_utterances = 200;
  bc.heldout_utterances = 10;
  bc.unlabeled_per_language = 10;
  bc.finetune_utterances = 24;
  bc.test_utterances = 12;
  bc.min_frames = 30;
  bc.max_frames = 60;
  return make_benchmark(bc);
}

Checkpoint<float> trained_encoder(const Benchmark& b, int epochs) {
  SupervisedOptions opt;
  opt.schedule.epochs = epochs;
  opt.schedule.lr = 3e-3;
  opt.num_classes = 12;
  opt.augment.freq_max_width = 4;
  auto st = init_supervised<float>(small_encoder(), b.supervised, opt);
  supervised_train(st, b.supervised, opt);
  return st;
}

FinetuneOptions small_finetune(int epochs) {
  FinetuneOptions opt;
  opt.vocab = 12;
  opt.schedule.epochs = epochs;
  opt.augment.freq_max_width = 4;
  return opt;
}

}  // namespace

TEST_CASE("head output shapes") {
  Rng rng(1);
  const auto head = init_downstream_head<double>(16, 9, 3);
  CHECK(head.at("downstream.weight").rows() == 32);
  CHECK(head.at("downstream.weight").cols() == 10);
  Mat out = head_forward(head, random_matrix(10, 16, rng));
  CHECK(out.rows() == 5);
  CHECK(out.cols() == 10);
  CHECK(head_forward(head, random_matrix(11, 16, rng)).rows() == 5);
  for (int t = 2; t < 30; ++t) CHECK(head_forward(head, random_matrix(t, 16, rng)).rows() == t / 2);
  CHECK_THROWS_AS(head_forward(head, random_matrix(1, 16, rng)), InputTooShortError);
  CHECK_THROWS_AS(head_forward(head, random_matrix(4, 8, rng)), DimensionError);
}

TEST_CASE("head concatenates non-overlapping frame pairs") {
  Rng rng(2);
  const Mat e = random_matrix(7, 3, rng);
  ParamMap<double> head{{"downstream.weight", random_matrix(6, 4, rng)}, {"downstream.bias", random_matrix(1, 4, rng)}};
  const Mat out = head_forward(head, e);
  for (Eigen::Index k = 0; k < 3; ++k) {
    Mat pair(1, 6);
    pair << e.row(2 * k), e.row(2 * k + 1);
    const Mat expected = pair * head["downstream.weight"] + head["downstream.bias"];
    CHECK((out.row(k) - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("zero head weights give a uniform posterior") {
  ParamMap<double> head{{"downstream.weight", Mat::Zero(8, 5)}, {"downstream.bias", Mat::Zero(1, 5)}};
  Rng rng(3);
  const Mat out = head_forward(head, random_matrix(6, 4, rng));
  CHECK(out.isZero(0));
}

TEST_CASE("head plus CTC gradient matches finite differences") {
  Rng rng(4);
  const Mat e = random_matrix(9, 4, rng);
  const Mat b = random_matrix(1, 4, rng);
  auto f = [&](Tape<double>& t, const Var<double>& w) {
    return ctc_loss(head_forward(w, t.constant(b), t.constant(e)), std::vector<int>{1, 2});
  };
  CHECK(grad_check(f, random_matrix(8, 4, rng)) < 1e-5);
}

TEST_CASE("edit distance examples") {
  CHECK(edit_distance(chars("abc"), chars("abc")) == EditCounts{});
  CHECK(edit_distance(chars("abc"), chars("ac")) == EditCounts{0, 1, 0});
  CHECK(edit_distance(chars("ac"), chars("abc")) == EditCounts{0, 0, 1});
  CHECK(edit_distance(chars("kitten"), chars("sitting")).total() == 3);
  CHECK(levenshtein(chars("kitten"), chars("sitting")) == 3);
  CHECK(edit_distance({}, {}) == EditCounts{});
  CHECK(edit_distance({1, 2}, {}) == EditCounts{0, 2, 0});
}

TEST_CASE("edit distance tie-breaking prefers substitution, then insertion") {
  // a->b is one substitution, not an insertion plus a deletion
  CHECK(edit_distance({1}, {2}) == EditCounts{1, 0, 0});
  CHECK(edit_distance({1, 2}, {2, 1}) == EditCounts{2, 0, 0});
  // "ab" -> "b a b": one insertion; the alignment never trades it for sub+del
  CHECK(edit_distance({1, 2}, {2, 1, 2}) == EditCounts{0, 0, 1});
}

TEST_CASE("edit distance agrees with the recursive oracle and is a metric") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const auto a = random_seq(rng), b = random_seq(rng), c = random_seq(rng);
    const auto ab = edit_distance(a, b).total();
    CHECK(ab == levenshtein(a, b));
    CHECK(edit_distance(a, a).total() == 0);
    CHECK(ab == edit_distance(b, a).total());
    CHECK(edit_distance(a, c).total() <= ab + edit_distance(b, c).total());
    const auto counts = edit_distance(a, b);
    CHECK(static_cast<std::int64_t>(a.size()) - counts.deletions + counts.insertions ==
          static_cast<std::int64_t>(b.size()));
  }
}

TEST_CASE("PER of a recognizer that emits nothing is one") {
  const auto b = small_benchmark(1);
  const auto report = evaluate_per([](const Utterance&) { return std::vector<int>{}; }, b.test[1]);
  CHECK(report.per() == 1.0);
  CHECK(report.counts.deletions == report.reference_length);
  CHECK(report.counts.substitutions == 0);
  CHECK(report.counts.insertions == 0);
}

TEST_CASE("PER bookkeeping") {
  Dataset d(3);
  d[0].transcript = {};
  d[1].transcript = {1, 2, 3};
  d[2].transcript = {4};
  std::map<std::size_t, std::vector<int>> hyp{{0, {}}, {1, {1, 3}}, {2, {4, 4, 4}}};
  std::size_t k = 0;
  for (auto& u : d) u.id = std::to_string(k++);
  auto rec = [&](const Utterance& u) { return hyp[std::stoul(u.id)]; };
  const auto r = evaluate_per(rec, d);
  CHECK(r.utterances[0].counts == EditCounts{});
  CHECK(r.reference_length == 4);
  CHECK(r.counts.total() == 3);
  CHECK(r.per() == doctest::Approx(0.75));
  Dataset reversed(d.rbegin(), d.rend());
  CHECK(evaluate_per(rec, reversed).per() == r.per());
  CHECK_THROWS_AS(evaluate_per(rec, Dataset{}), DataError);
}

TEST_CASE("oracle recognizer on noiseless data has near-zero PER") {
  BenchmarkConfig bc;
  bc.family.noise = 0.0;
  bc.supervised_utterances = 1;
  bc.unlabeled_per_language = 1;
  bc.test_utterances = 50;
  const auto b = make_benchmark(bc);
  for (int l = 0; l < 4; ++l) {
    const auto& spec = b.family.languages[static_cast<std::size_t>(l)];
    const auto r = evaluate_per(
        [&](const Utterance& u) { return collapse_repeats(nearest_prototype(spec, u.features)); },
        b.test[static_cast<std::size_t>(l)]);
    CHECK(r.per() < 0.02);
  }
}

TEST_CASE("zero fine-tuning epochs keep the initial model") {
  const auto b = small_benchmark(2);
  auto pre = trained_encoder(b, 1);
  auto opt = small_finetune(0);
  auto st = init_finetune(pre, b.finetune[1], opt);
  const auto initial = st;
  const auto report = finetune(st, b.finetune[1], opt);
  CHECK(report.steps_run == 0);
  for (const auto& [k, v] : initial.head) CHECK(st.head.at(k) == v);
  for (const auto& [k, v] : pre.encoder.weights) CHECK(st.encoder.weights.at(k) == v);
  CHECK(st.head == init_downstream_head<float>(pre.encoder_config.projector_output_dim, 12, opt.seed));
}

TEST_CASE("frozen-encoder fine-tuning lowers the loss and is deterministic") {
  // The encoder was trained on the same language, so its frames separate.
  const auto b = small_benchmark(3);
  const auto pre = trained_encoder(b, 6);
  auto opt = small_finetune(40);
  opt.freeze_encoder = true;
  opt.augment = AugmentSpec::all_off();
  auto run = [&]() {
    auto st = init_finetune(pre, b.finetune[0], opt);
    auto report = finetune(st, b.finetune[0], opt);
    return std::make_pair(report, evaluate_per(st, b.test[0]).per());
  };
  const auto [report, per] = run();
  REQUIRE(report.epoch_losses.size() == 40);
  // three-epoch moving average over the first ten epochs
  std::vector<double> smooth;
  for (std::size_t e = 2; e < 10; ++e) {
    smooth.push_back((report.epoch_losses[e - 2] + report.epoch_losses[e - 1] + report.epoch_losses[e]) / 3);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] < smooth[i - 1]);
  CHECK(run().second == per);
}

TEST_CASE("frozen fine-tuning leaves the encoder untouched") {
  const auto b = small_benchmark(4);
  const auto pre = trained_encoder(b, 1);
  auto opt = small_finetune(2);
  opt.freeze_encoder = true;
  auto st = init_finetune(pre, b.finetune[1], opt);
  finetune(st, b.finetune[1], opt);
  for (const auto& [k, v] : pre.encoder.weights) CHECK(st.encoder.weights.at(k) == v);
  for (const auto& [k, v] : pre.encoder.buffers) CHECK(st.encoder.buffers.at(k) == v);
}

TEST_CASE("utterances too short for their transcript are skipped and counted") {
  const auto b = small_benchmark(5);
  const auto pre = trained_encoder(b, 1);
  Dataset data = b.finetune[1];
  Utterance bad = data[0];
  bad.id = "too-short";
  bad.features = bad.features.topRows(8).eval();  // 1 output frame
  bad.transcript = {0, 1, 2};
  data.push_back(bad);
  auto opt = small_finetune(1);
  auto st = init_finetune(pre, data, opt);
  const auto report = finetune(st, data, opt);
  CHECK(report.skipped_utterances == 1);
  CHECK(report.steps_run == steps_per_epoch(data.size() - 1, opt.batch_size));
}
