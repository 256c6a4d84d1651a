#include "grc/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "grc/error.hpp"

namespace grc {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (steps == 0) throw ConfigError("train.steps must be >= 1");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (warmup > steps) throw ConfigError("train.warmup must not exceed train.steps");
  if (eval_batches == 0) throw ConfigError("train.eval_batches must be >= 1");
  if (clip_norm < 0.0) throw ConfigError("train.clip_norm must be >= 0");
}

void RunConfig::resolve() {
  // Builds one stream to read the task's vocabulary and lengths.
  const auto stream = make_task(task, 0, 1);
  model.vocab = stream->vocab();
  model.max_len = stream->max_len();
  if (stream->per_token()) {
    model.head = TaskHead::LanguageModel;
  } else {
    model.head = TaskHead::Classification;
    model.num_classes = stream->num_classes();
  }
  model.validate();
  train.validate();
  if (out_dir.empty()) throw ConfigError("run.out_dir must not be empty");
}

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Parser {
  std::string where;

  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(where + ": " + msg); }

  std::size_t count(std::string_view v) const {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) fail("expected a non-negative integer, got '" + std::string(v) + "'");
    return out;
  }
  std::uint64_t u64(std::string_view v) const {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) fail("expected a non-negative integer, got '" + std::string(v) + "'");
    return out;
  }
  double real(std::string_view v) const {
    std::istringstream is{std::string(v)};
    is.imbue(std::locale::classic());
    double out = 0.0;
    if (!(is >> out) || !is.eof() || !std::isfinite(out)) fail("expected a number, got '" + std::string(v) + "'");
    return out;
  }
  bool flag(std::string_view v) const {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail("expected true or false, got '" + std::string(v) + "'");
  }
};

using Setter = std::function<void(RunConfig&, const Parser&, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"model.layers", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.layers = p.count(v); }},
      {"model.d_model", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.d_model = p.count(v); }},
      {"model.heads", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.heads = p.count(v); }},
      {"model.cache_len", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.cache_len = p.count(v); }},
      {"model.cache_ratio", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.cache_ratio = p.real(v); }},
      {"model.ffn_mult", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.ffn_mult = p.count(v); }},
      {"model.use_cache", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.use_cache = p.flag(v); }},
      {"model.dropout", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.dropout = p.real(v); }},
      {"model.bptt_steps", [](RunConfig& c, const Parser& p, std::string_view v) { c.model.bptt_steps = p.count(v); }},
      {"task.kind", [](RunConfig& c, const Parser&, std::string_view v) { c.task.kind = std::string(v); }},
      {"task.seq_len", [](RunConfig& c, const Parser& p, std::string_view v) { c.task.seq_len = p.count(v); }},
      {"task.vocab", [](RunConfig& c, const Parser& p, std::string_view v) { c.task.vocab = p.count(v); }},
      {"task.classes", [](RunConfig& c, const Parser& p, std::string_view v) { c.task.classes = p.count(v); }},
      {"task.noise", [](RunConfig& c, const Parser& p, std::string_view v) { c.task.noise = p.real(v); }},
      {"task.max_depth", [](RunConfig& c, const Parser& p, std::string_view v) { c.task.max_depth = p.count(v); }},
      {"task.motif_seed", [](RunConfig& c, const Parser& p, std::string_view v) { c.task.motif_seed = p.u64(v); }},
      {"train.lr", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.lr = p.real(v); }},
      {"train.beta1", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.beta1 = p.real(v); }},
      {"train.beta2", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.beta2 = p.real(v); }},
      {"train.eps", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.eps = p.real(v); }},
      {"train.weight_decay", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.weight_decay = p.real(v); }},
      {"train.warmup", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.warmup = p.count(v); }},
      {"train.steps", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.steps = p.count(v); }},
      {"train.batch_size", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.batch_size = p.count(v); }},
      {"train.seed", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.seed = p.u64(v); }},
      {"train.eval_interval", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.eval_interval = p.count(v); }},
      {"train.eval_batches", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.eval_batches = p.count(v); }},
      {"train.clip_norm", [](RunConfig& c, const Parser& p, std::string_view v) { c.train.clip_norm = p.real(v); }},
      {"run.out_dir", [](RunConfig& c, const Parser&, std::string_view v) { c.out_dir = std::string(v); }},
      {"run.precision",
       [](RunConfig& c, const Parser& p, std::string_view v) {
         if (v == "float32") c.precision = Precision::Float32;
         else if (v == "float64") c.precision = Precision::Float64;
         else p.fail("run.precision must be float32 or float64");
       }},
  };
  return table;
}

const char* const kRequired[] = {"model.layers", "model.d_model", "model.heads",     "model.cache_len", "model.cache_ratio",
                                 "task.kind",    "train.steps",   "train.batch_size", "train.lr"};

std::string fmt_real(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

RunConfig parse_run_config(std::string_view text, std::string_view source) {
  RunConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    Parser p{std::string(source) + ":" + std::to_string(line_no)};
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) p.fail("expected 'key = value'");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) p.fail("unknown key '" + std::string(key) + "'");
    if (!seen.insert(std::string(key)).second) p.fail("key '" + std::string(key) + "' given twice");
    if (value.empty()) p.fail("key '" + std::string(key) + "' has no value");
    it->second(cfg, p, value);
  }
  for (const char* key : kRequired) {
    if (!seen.count(std::string_view(key))) {
      throw ConfigError(std::string(source) + ": missing required key '" + key + "'");
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), path.string());
}

std::string format_run_config(const RunConfig& c) {
  std::ostringstream os;
  os << "model.layers = " << c.model.layers << '\n'
     << "model.d_model = " << c.model.d_model << '\n'
     << "model.heads = " << c.model.heads << '\n'
     << "model.cache_len = " << c.model.cache_len << '\n'
     << "model.cache_ratio = " << fmt_real(c.model.cache_ratio) << '\n'
     << "model.ffn_mult = " << c.model.ffn_mult << '\n'
     << "model.use_cache = " << (c.model.use_cache ? "true" : "false") << '\n'
     << "model.dropout = " << fmt_real(c.model.dropout) << '\n'
     << "model.bptt_steps = " << c.model.bptt_steps << '\n'
     << "task.kind = " << c.task.kind << '\n'
     << "task.seq_len = " << c.task.seq_len << '\n'
     << "task.vocab = " << c.task.vocab << '\n'
     << "task.classes = " << c.task.classes << '\n'
     << "task.noise = " << fmt_real(c.task.noise) << '\n'
     << "task.max_depth = " << c.task.max_depth << '\n'
     << "task.motif_seed = " << c.task.motif_seed << '\n'
     << "train.lr = " << fmt_real(c.train.lr) << '\n'
     << "train.beta1 = " << fmt_real(c.train.beta1) << '\n'
     << "train.beta2 = " << fmt_real(c.train.beta2) << '\n'
     << "train.eps = " << fmt_real(c.train.eps) << '\n'
     << "train.weight_decay = " << fmt_real(c.train.weight_decay) << '\n'
     << "train.warmup = " << c.train.warmup << '\n'
     << "train.steps = " << c.train.steps << '\n'
     << "train.batch_size = " << c.train.batch_size << '\n'
     << "train.seed = " << c.train.seed << '\n'
     << "train.eval_interval = " << c.train.eval_interval << '\n'
     << "train.eval_batches = " << c.train.eval_batches << '\n'
     << "train.clip_norm = " << fmt_real(c.train.clip_norm) << '\n'
     << "run.out_dir = " << c.out_dir << '\n'
     << "run.precision = " << (c.precision == Precision::Float64 ? "float64" : "float32") << '\n';
  return os.str();
}

}  // namespace grc
