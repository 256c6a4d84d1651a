#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "grc/error.hpp"
#include "grc/tasks.hpp"

using namespace grc;

namespace {

// Recursive-descent evaluator over the printed form, independent of the
// library's stack interpreter.
int eval_text(std::istringstream& in) {
  std::string tok;
  in >> tok;
  if (tok[0] != '[') return std::stoi(tok);
  const std::string op = tok.substr(1);
  std::vector<int> args;
  while (true) {
    const auto pos = in.tellg();
    std::string peek;
    in >> peek;
    if (peek == "]") break;
    in.seekg(pos);
    args.push_back(eval_text(in));
  }
  std::sort(args.begin(), args.end());
  if (op == "MIN") return args.front();
  if (op == "MAX") return args.back();
  if (op == "MED") {
    const std::size_t n = args.size();
    return n % 2 ? args[n / 2] : (args[n / 2 - 1] + args[n / 2]) / 2;
  }
  int s = 0;
  for (int a : args) s += a;
  return s % 10;
}

int eval_text(const std::string& text) {
  // Separate brackets so the stream splits cleanly.
  std::string spaced;
  for (char c : text) {
    if (c == ']') spaced += " ] ";
    else spaced += c;
  }
  std::istringstream in(spaced);
  return eval_text(in);
}

std::size_t depth_of(const std::vector<int>& tokens) {
  std::size_t d = 0, best = 0;
  for (int t : tokens) {
    if (t >= listops::kMin && t <= listops::kSumMod) best = std::max(best, ++d);
    if (t == listops::kClose) --d;
  }
  return best;
}

}  // namespace

TEST_SUITE("tasks") {

TEST_CASE("copy task replays per seed") {
  CopyTask a(7, 4, 10, 6), b(7, 4, 10, 6), c(8, 4, 10, 6);
  const TaskBatch x = a.next(), y = b.next(), z = c.next();
  CHECK(x.tokens == y.tokens);
  CHECK(x.labels == y.labels);
  CHECK(x.tokens != z.tokens);
  CHECK_NOTHROW(x.validate());
  CHECK(x.per_token);
}

TEST_CASE("copy labels are the shifted inputs on the copy region") {
  CopyTask task(3, 5, 4, 3);
  const TaskBatch b = task.next();
  for (std::size_t i = 0; i < 5; ++i) {
    const int* row = &b.tokens[i * 4];
    const int* lab = &b.labels[i * 4];
    CHECK(row[2] == row[0]);
    CHECK(row[3] == row[1]);
    CHECK(lab[0] == -1);
    CHECK(lab[1] == row[2]);
    CHECK(lab[2] == row[3]);
    CHECK(lab[3] == -1);
    for (int k = 0; k < 4; ++k) CHECK(row[k] < 3);
  }
}

TEST_CASE("copy tokens are uniform by a chi-square test") {
  const std::size_t vocab = 8;
  CopyTask task(11, 100, 20, vocab);
  std::vector<double> counts(vocab, 0.0);
  std::size_t draws = 0;
  while (draws < 100000) {
    const TaskBatch b = task.next();
    for (std::size_t i = 0; i < b.batch && draws < 100000; ++i)
      for (std::size_t t = 0; t < 10 && draws < 100000; ++t, ++draws) counts[b.tokens[i * 20 + t]] += 1.0;
  }
  const double expected = static_cast<double>(draws) / vocab;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 99th percentile of chi-square with 7 degrees of freedom.
  CHECK(chi2 < 18.475);
}

TEST_CASE("listops examples") {
  CHECK(listops::evaluate(listops::tokenize("[MAX 2 9 1]")) == 9);
  CHECK(listops::evaluate(listops::tokenize("[MIN [MAX 1 2] 0]")) == 0);
  CHECK(listops::evaluate(listops::tokenize("[MED 3 1 8 6]")) == 4);
  CHECK(listops::evaluate(listops::tokenize("[SM 9 9 3]")) == 1);
  CHECK(listops::detokenize(listops::tokenize("[MIN [MAX 1 2] 0]")) == "[MIN [MAX 1 2] 0]");
  CHECK_THROWS_AS(listops::tokenize("[FOO 1]"), DataError);
  CHECK_THROWS_AS(listops::evaluate(listops::tokenize("[MAX 1")), DataError);
  std::vector<int> padded = listops::tokenize("[MAX 2 9 1]");
  padded.resize(12, listops::kPad);
  CHECK(listops::evaluate(padded) == 9);
}

TEST_CASE("generated listops labels agree with two interpreters") {
  Rng rng(21);
  std::vector<std::size_t> label_counts(10, 0);
  for (int i = 0; i < 1000; ++i) {
    const listops::Expression e = listops::generate(rng, 64, 3);
    CHECK(e.tokens.size() <= 64);
    CHECK(depth_of(e.tokens) <= 3);
    CHECK(e.tokens.front() >= listops::kMin);
    CHECK(listops::evaluate(e.tokens) == e.value);
    CHECK(eval_text(listops::detokenize(e.tokens)) == e.value);
    ++label_counts[static_cast<std::size_t>(e.value)];
  }
  // Every class shows up.
  for (std::size_t c : label_counts) CHECK(c > 0);
}

TEST_CASE("listops batches are padded and labelled") {
  ListOpsTask task(3, 8, 32, 2);
  const TaskBatch b = task.next();
  CHECK_NOTHROW(b.validate());
  CHECK(b.labels.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    const std::vector<int> row(b.tokens.begin() + i * b.length, b.tokens.begin() + (i + 1) * b.length);
    CHECK(listops::evaluate(row) == b.labels[i]);
    for (std::size_t t = b.lengths[i]; t < b.length; ++t) CHECK(row[t] == listops::kPad);
  }
  CHECK_THROWS_AS(ListOpsTask(1, 2, 4, 2), ConfigError);
}

TEST_CASE("noise-free prototypes are recovered by the nearest motif") {
  PrototypeTask task(5, 64, 12, 4, 10, 0.0, 99);
  const auto& motifs = task.motifs();
  for (int k = 0; k < 10; ++k) {
    const TaskBatch b = task.next();
    for (std::size_t i = 0; i < b.batch; ++i) {
      const std::span<const int> row(&b.tokens[i * 12], 12);
      const auto best = nearest_motifs(row, motifs);
      REQUIRE(best.size() == 1);
      CHECK(best[0] == b.labels[i]);
    }
  }
  CHECK(prototype_bayes_accuracy(motifs, 10, 0.0, 2000, 1) == 1.0);
}

TEST_CASE("swapping two motifs swaps the labels") {
  const auto motifs = make_motifs(42, 3, 8, 6);
  auto swapped = motifs;
  std::swap(swapped[0], swapped[2]);
  // Same draws: each sample keeps its class index but now carries the other motif.
  PrototypeTask a(9, 32, motifs, 6, 0.0), b(9, 32, swapped, 6, 0.0);
  const TaskBatch x = a.next(), y = b.next();
  CHECK(x.labels == y.labels);
  auto swap_label = [](int l) { return l == 0 ? 2 : (l == 2 ? 0 : l); };
  for (std::size_t i = 0; i < 32; ++i) {
    const std::vector<int> row(x.tokens.begin() + i * 8, x.tokens.begin() + (i + 1) * 8);
    const std::vector<int> moved(y.tokens.begin() + i * 8, y.tokens.begin() + (i + 1) * 8);
    CHECK(moved == motifs[static_cast<std::size_t>(swap_label(x.labels[i]))]);
    // The same sequence is labelled with the partner class under the swapped motifs.
    CHECK(nearest_motifs(row, swapped) == std::vector<int>{swap_label(x.labels[i])});
  }
}

TEST_CASE("motifs are distinct and deterministic") {
  const auto m = make_motifs(1, 6, 5, 4);
  CHECK(m == make_motifs(1, 6, 5, 4));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = i + 1; j < m.size(); ++j) CHECK(m[i] != m[j]);
}

TEST_CASE("bayes ceiling agrees with a brute-force enumeration") {
  // Two classes over a two-token alphabet of length 3: enumerate every
  // corrupted sequence and its probability exactly.
  const std::vector<std::vector<int>> motifs{{0, 0, 1}, {1, 1, 1}};
  const std::size_t vocab = 2;
  const double noise = 0.4;
  double exact = 0.0;
  for (int cls = 0; cls < 2; ++cls)
    for (int seq = 0; seq < 8; ++seq) {
      std::vector<int> s{seq & 1, (seq >> 1) & 1, (seq >> 2) & 1};
      auto likelihood = [&](int c) {
        double p = 1.0;
        for (std::size_t t = 0; t < 3; ++t) {
          const double keep = (1.0 - noise) + noise / vocab;
          p *= s[t] == motifs[c][t] ? keep : noise / vocab;
        }
        return p;
      };
      // Maximum a posteriori decision with ties split evenly.
      const double mine = likelihood(cls), other = likelihood(1 - cls);
      const double credit = mine > other ? 1.0 : (mine == other ? 0.5 : 0.0);
      exact += 0.5 * mine * credit;
    }
  const double mc = prototype_bayes_accuracy(motifs, vocab, noise, 200000, 3);
  CHECK(std::abs(mc - exact) < 0.005);
}

TEST_CASE("make_task validates its inputs") {
  TaskConfig c;
  c.kind = "sorting";
  CHECK_THROWS_AS(make_task(c, 1, 2), ConfigError);
  c.kind = "copy";
  c.vocab = 2;
  CHECK_THROWS_AS(make_task(c, 1, 2), ConfigError);
  c.kind = "prototype";
  c.vocab = 8;
  c.classes = 1;
  CHECK_THROWS_AS(make_task(c, 1, 2), ConfigError);
}

TEST_CASE("stream rng state round-trips") {
  CopyTask a(1, 2, 6, 5);
  a.next();
  const std::string s = a.rng_state();
  const TaskBatch x = a.next();
  CopyTask b(99, 2, 6, 5);
  b.set_rng_state(s);
  CHECK(b.next().tokens == x.tokens);
}

}  // TEST_SUITE
