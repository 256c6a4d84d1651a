#include "grc/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <optional>
#include <set>

#include "grc/error.hpp"

namespace grc {

CopyTask::CopyTask(std::uint64_t seed, std::size_t batch, std::size_t length, std::size_t vocab)
    : TaskStream(seed), batch_(batch), length_(length), vocab_(vocab) {
  if (vocab < 3) throw ConfigError("copy task needs vocab >= 3");
  if (length < 2 || length % 2 != 0) throw ConfigError("copy task needs an even length >= 2");
  if (batch == 0) throw ConfigError("batch size must be >= 1");
}

TaskBatch CopyTask::next() {
  TaskBatch b;
  b.batch = batch_;
  b.length = length_;
  b.per_token = true;
  b.tokens.resize(batch_ * length_);
  b.labels.assign(batch_ * length_, -1);
  b.lengths.assign(batch_, length_);
  const std::size_t half = length_ / 2;
  for (std::size_t i = 0; i < batch_; ++i) {
    int* row = b.tokens.data() + i * length_;
    for (std::size_t t = 0; t < half; ++t) row[t] = static_cast<int>(rng_.below(vocab_));
    for (std::size_t t = half; t < length_; ++t) row[t] = row[t - half];
    for (std::size_t t = half - 1; t + 1 < length_; ++t) b.labels[i * length_ + t] = row[t + 1];
  }
  return b;
}

namespace listops {

namespace {

int apply_op(int op, const std::vector<int>& args) {
  switch (op) {
    case kMin:
      return *std::min_element(args.begin(), args.end());
    case kMax:
      return *std::max_element(args.begin(), args.end());
    case kMed: {
      std::vector<int> s = args;
      std::sort(s.begin(), s.end());
      const std::size_t n = s.size();
      return n % 2 ? s[n / 2] : (s[n / 2 - 1] + s[n / 2]) / 2;
    }
    case kSumMod:
      return std::accumulate(args.begin(), args.end(), 0) % 10;
    default:
      throw DataError("unknown ListOps operator token " + std::to_string(op));
  }
}

const char* op_name(int op) {
  switch (op) {
    case kMin: return "[MIN";
    case kMax: return "[MAX";
    case kMed: return "[MED";
    case kSumMod: return "[SM";
    default: return "?";
  }
}

}  // namespace

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == ']') {
      out.push_back(kClose);
      ++i;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      out.push_back(kDigit0 + (c - '0'));
      ++i;
    } else if (c == '[') {
      std::size_t j = i + 1;
      while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
      const std::string_view name = text.substr(i + 1, j - i - 1);
      if (name == "MIN") out.push_back(kMin);
      else if (name == "MAX") out.push_back(kMax);
      else if (name == "MED") out.push_back(kMed);
      else if (name == "SM") out.push_back(kSumMod);
      else throw DataError("unknown ListOps operator '[" + std::string(name) + "'");
      i = j;
    } else {
      throw DataError(std::string("unexpected character '") + c + "' in ListOps expression");
    }
  }
  return out;
}

std::string detokenize(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) {
    if (t == kPad) break;
    if (!out.empty() && t != kClose) out += ' ';
    if (t >= kDigit0 && t < kDigit0 + 10) out += static_cast<char>('0' + (t - kDigit0));
    else if (t == kClose) out += ']';
    else out += op_name(t);
  }
  return out;
}

int evaluate(std::span<const int> tokens) {
  struct Frame {
    int op;
    std::vector<int> args;
  };
  std::vector<Frame> stack;
  std::optional<int> result;
  for (int t : tokens) {
    if (t == kPad) break;
    if (result) throw DataError("trailing tokens after a complete ListOps expression");
    if (t >= kMin && t <= kSumMod) {
      stack.push_back({t, {}});
    } else if (t >= kDigit0 && t < kDigit0 + 10) {
      if (stack.empty()) throw DataError("ListOps digit outside any operator");
      stack.back().args.push_back(t - kDigit0);
    } else if (t == kClose) {
      if (stack.empty() || stack.back().args.empty()) throw DataError("unbalanced or empty ListOps operator");
      const int v = apply_op(stack.back().op, stack.back().args);
      stack.pop_back();
      if (stack.empty()) result = v;
      else stack.back().args.push_back(v);
    } else {
      throw DataError("token " + std::to_string(t) + " is not a ListOps symbol");
    }
  }
  if (!result) throw DataError("incomplete ListOps expression");
  return *result;
}

namespace {

Expression build(Rng& rng, std::size_t depth, std::size_t budget, std::size_t max_depth, std::size_t max_args) {
  const bool leaf = depth >= max_depth || budget < 4 || (depth > 0 && rng.uniform() < 0.5);
  if (leaf) {
    const int d = static_cast<int>(rng.below(10));
    Expression e;
    e.tokens.push_back(kDigit0 + d);
    e.value = d;
    return e;
  }
  const int op = kMin + static_cast<int>(rng.below(4));
  const std::size_t most = std::min(max_args, budget - 2);
  const std::size_t count = 2 + rng.below(most - 1);
  Expression e;
  e.tokens.push_back(op);
  std::vector<int> values;
  std::size_t remaining = budget - 2;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t reserve = count - k - 1;
    Expression child = build(rng, depth + 1, remaining - reserve, max_depth, max_args);
    remaining -= child.tokens.size();
    e.tokens.insert(e.tokens.end(), child.tokens.begin(), child.tokens.end());
    values.push_back(child.value);
  }
  e.tokens.push_back(kClose);
  e.value = apply_op(op, values);
  return e;
}

}  // namespace

Expression generate(Rng& rng, std::size_t max_len, std::size_t max_depth, std::size_t max_args) {
  if (max_len < 8) throw ConfigError("ListOps needs max_len >= 8");
  if (max_depth == 0) throw ConfigError("ListOps needs max_depth >= 1");
  if (max_args < 2) throw ConfigError("ListOps needs max_args >= 2");
  return build(rng, 0, max_len, max_depth, max_args);
}

}  // namespace listops

ListOpsTask::ListOpsTask(std::uint64_t seed, std::size_t batch, std::size_t max_len, std::size_t max_depth)
    : TaskStream(seed), batch_(batch), max_len_(max_len), max_depth_(max_depth) {
  if (max_len < 8) throw ConfigError("ListOps needs max_len >= 8");
  if (max_depth == 0) throw ConfigError("ListOps needs max_depth >= 1");
  if (batch == 0) throw ConfigError("batch size must be >= 1");
}

TaskBatch ListOpsTask::next() {
  std::vector<listops::Expression> items;
  std::size_t longest = 0;
  for (std::size_t i = 0; i < batch_; ++i) {
    listops::Expression e = listops::generate(rng_, max_len_, max_depth_);
    if (listops::evaluate(e.tokens) != e.value) throw DataError("ListOps generator and interpreter disagree");
    longest = std::max(longest, e.tokens.size());
    items.push_back(std::move(e));
  }
  TaskBatch b;
  b.batch = batch_;
  b.length = longest;
  b.tokens.assign(batch_ * longest, listops::kPad);
  for (std::size_t i = 0; i < batch_; ++i) {
    std::copy(items[i].tokens.begin(), items[i].tokens.end(), b.tokens.begin() + static_cast<long>(i * longest));
    b.labels.push_back(items[i].value);
    b.lengths.push_back(items[i].tokens.size());
  }
  return b;
}

std::vector<std::vector<int>> make_motifs(std::uint64_t motif_seed, std::size_t num_classes, std::size_t length,
                                          std::size_t vocab) {
  Rng rng(motif_seed);
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> motifs;
  std::size_t attempts = 0;
  while (motifs.size() < num_classes) {
    if (++attempts > 1000 * num_classes) throw ConfigError("cannot draw distinct motifs; increase vocab or length");
    std::vector<int> m(length);
    for (int& t : m) t = static_cast<int>(rng.below(vocab));
    if (seen.insert(m).second) motifs.push_back(std::move(m));
  }
  return motifs;
}

PrototypeTask::PrototypeTask(std::uint64_t seed, std::size_t batch, std::size_t length, std::size_t num_classes,
                             std::size_t vocab, double noise, std::uint64_t motif_seed)
    : PrototypeTask(seed, batch, make_motifs(motif_seed, num_classes, length, vocab), vocab, noise) {}

PrototypeTask::PrototypeTask(std::uint64_t seed, std::size_t batch, std::vector<std::vector<int>> motifs,
                             std::size_t vocab, double noise)
    : TaskStream(seed), batch_(batch), vocab_(vocab), noise_(noise), motifs_(std::move(motifs)) {
  if (motifs_.size() < 2) throw ConfigError("prototype task needs >= 2 classes");
  if (batch == 0) throw ConfigError("batch size must be >= 1");
  if (noise < 0.0 || noise > 1.0) throw ConfigError("prototype noise must lie in [0, 1]");
  if (vocab < 2) throw ConfigError("prototype task needs vocab >= 2");
  length_ = motifs_.front().size();
  if (length_ == 0) throw ConfigError("prototype motifs must be non-empty");
  for (const auto& m : motifs_) {
    if (m.size() != length_) throw ConfigError("prototype motifs must share one length");
    for (int t : m) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw ConfigError("motif token outside vocabulary");
    }
  }
}

TaskBatch PrototypeTask::next() {
  TaskBatch b;
  b.batch = batch_;
  b.length = length_;
  b.tokens.resize(batch_ * length_);
  b.lengths.assign(batch_, length_);
  for (std::size_t i = 0; i < batch_; ++i) {
    const std::size_t cls = rng_.below(motifs_.size());
    b.labels.push_back(static_cast<int>(cls));
    for (std::size_t t = 0; t < length_; ++t) {
      const bool corrupt = rng_.uniform() < noise_;
      const int replacement = static_cast<int>(rng_.below(vocab_));
      b.tokens[i * length_ + t] = corrupt ? replacement : motifs_[cls][t];
    }
  }
  return b;
}

std::vector<int> nearest_motifs(std::span<const int> tokens, const std::vector<std::vector<int>>& motifs) {
  std::vector<int> best;
  std::size_t best_matches = 0;
  for (std::size_t c = 0; c < motifs.size(); ++c) {
    std::size_t matches = 0;
    for (std::size_t t = 0; t < tokens.size() && t < motifs[c].size(); ++t) matches += tokens[t] == motifs[c][t];
    if (best.empty() || matches > best_matches) {
      best = {static_cast<int>(c)};
      best_matches = matches;
    } else if (matches == best_matches) {
      best.push_back(static_cast<int>(c));
    }
  }
  return best;
}

double prototype_bayes_accuracy(const std::vector<std::vector<int>>& motifs, std::size_t vocab, double noise,
                                std::size_t samples, std::uint64_t seed) {
  if (samples == 0) return 0.0;
  PrototypeTask stream(seed, 1, motifs, vocab, noise);
  double credit = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const TaskBatch b = stream.next();
    const std::vector<int> best = nearest_motifs(b.tokens, motifs);
    if (std::find(best.begin(), best.end(), b.labels[0]) != best.end()) {
      credit += 1.0 / static_cast<double>(best.size());
    }
  }
  return credit / static_cast<double>(samples);
}

std::unique_ptr<TaskStream> make_task(const TaskConfig& cfg, std::uint64_t seed, std::size_t batch) {
  if (cfg.kind == "copy") return std::make_unique<CopyTask>(seed, batch, cfg.seq_len, cfg.vocab);
  if (cfg.kind == "listops") return std::make_unique<ListOpsTask>(seed, batch, cfg.seq_len, cfg.max_depth);
  if (cfg.kind == "prototype") {
    return std::make_unique<PrototypeTask>(seed, batch, cfg.seq_len, cfg.classes, cfg.vocab, cfg.noise,
                                           cfg.motif_seed);
  }
  throw ConfigError("unknown task kind '" + cfg.kind + "' (expected copy, listops or prototype)");
}

}  // namespace grc
