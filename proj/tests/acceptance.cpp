// Acceptance run: one PASS/FAIL line per criterion, followed by the numbers
// behind it. Long training runs go through the real grc binary so the CLI,
// config files and metric files are exercised end to end.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "grc/cache.hpp"
#include "grc/error.hpp"
#include "grc/model.hpp"
#include "grc/oracle.hpp"
#include "grc/random.hpp"
#include "grc/run_config.hpp"
#include "grc/tasks.hpp"
#include "grc/trainer.hpp"

using namespace grc;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0, soft_failures = 0;

// Soft criteria are reported like the others but do not fail the run.
void report(const std::string& name, const std::function<Outcome()>& check, bool soft = false) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!o.pass) ++(soft ? soft_failures : failures);
  std::cout << (o.pass ? "PASS " : "FAIL ") << (soft ? "[soft] " : "") << name << "  (" << std::fixed
            << std::setprecision(1) << secs << " s)\n";
  std::cout.unsetf(std::ios::floatfield);
  if (!o.detail.empty()) {
    std::istringstream lines(o.detail);
    for (std::string l; std::getline(lines, l);) std::cout << "    " << l << '\n';
  }
  std::cout.flush();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

void fill(Tensor<double>& t, double v) { std::fill(t.data().begin(), t.data().end(), v); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- running the binary ------------------------------------------------------

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::current_path() / "acceptance_runs";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult grc_cli(const std::string& args) {
  const fs::path log = work_dir() / "cli_output.txt";
  const std::string cmd = std::string(GRC_CLI_PATH) + " " + args + " > " + quote(log) + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

fs::path config_path(const std::string& name) { return fs::path(GRC_SOURCE_DIR) / "configs" / name; }

fs::path write_variant(const fs::path& base, bool use_cache, const std::string& tag) {
  RunConfig c = load_run_config(base);
  c.model.use_cache = use_cache;
  const fs::path p = work_dir() / (tag + (use_cache ? "_cached" : "_baseline") + ".conf");
  std::ofstream(p) << format_run_config(c);
  return p;
}

// Last eval row of a metrics file: {loss, accuracy}.
std::pair<double, double> final_eval(const fs::path& metrics) {
  std::ifstream in(metrics);
  if (!in) throw IoError("cannot open " + metrics.string());
  std::string line, last;
  while (std::getline(in, line))
    if (line.find(",eval,") != std::string::npos) last = line;
  if (last.empty()) throw DataError("no eval row in " + metrics.string());
  std::vector<std::string> cols;
  std::istringstream ls(last);
  for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
  return {std::stod(cols.at(2)), std::stod(cols.at(3))};
}

struct Arm {
  std::vector<double> acc;
  std::vector<fs::path> dirs;
};

Arm train_arm(const fs::path& base, bool use_cache, const std::string& tag, const std::vector<int>& seeds) {
  const fs::path cfg = write_variant(base, use_cache, tag);
  Arm arm;
  for (int s : seeds) {
    const fs::path out = work_dir() / (tag + (use_cache ? "_cached_" : "_baseline_") + std::to_string(s));
    const CliResult r = grc_cli("train --config " + quote(cfg) + " --seed " + std::to_string(s) + " --out " + quote(out));
    if (r.code != 0) throw std::runtime_error("grc train exited with " + std::to_string(r.code) + ": " + r.output);
    arm.acc.push_back(final_eval(out / "metrics.csv").second);
    arm.dirs.push_back(out);
  }
  return arm;
}

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fixed(x);
  return s;
}

// ---- criteria ----------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const oracle::TinySizes s;
  const auto reports = oracle::gradcheck_tiny(s, 1);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  Model<double> probe(oracle::tiny_model_config(s), 1);
  const std::size_t expected = probe.parameters().size();
  double worst = 0.0;
  std::string worst_name;
  bool all = true;
  for (const auto& r : reports) {
    all = all && r.max_rel < 1e-5;
    if (r.max_rel >= worst) {
      worst = r.max_rel;
      worst_name = r.name;
    }
  }
  std::ostringstream d;
  d << reports.size() << " of " << expected << " parameter tensors checked, max rel err " << sci(worst) << " ("
    << worst_name << "), tolerance 1e-05\n";
  d << "runtime " << fixed(secs, 2) << " s (limit 60 s)";
  return {all && reports.size() == expected && secs < 60.0, d.str()};
}

Outcome oracle_equivalence() {
  const oracle::AgreementReport r = oracle::check_agreement(oracle::TinySizes{}, 100, 2024, 1e-10);
  std::ostringstream d;
  d << r.instances << " random tiny instances; max |diff| output " << sci(r.max_out) << ", cache " << sci(r.max_cache)
    << ", self branch " << sci(r.max_self) << ", cached branch " << sci(r.max_mem) << " (tolerance 1e-10)";
  const double worst = std::max({r.max_out, r.max_cache, r.max_self, r.max_mem});
  return {r.instances == 100 && worst <= 1e-10, d.str()};
}

Outcome convex_identities() {
  const std::size_t B = 3, Tm = 4, Dm = 4;
  std::ostringstream d;

  // Closed update gate: the cache keeps its previous value.
  GrcCache<double> closed = GrcCache<double>::init(Tm, Dm, 11);
  const Tensor<double> prev = random_tensor({Tm, Dm}, 12);
  closed.set_state(prev.data());
  fill(closed.w_update(), 0.0);
  fill(closed.b_update(), -60.0);
  closed.update(random_tensor({B, Tm, Dm}, 13));
  const double keep = max_diff(values(closed.state()), values(prev));
  d << "g_u = 0: max |C_t - C_(t-1)| = " << sci(keep) << '\n';

  // Open update gate from a zero cache: C_1 is the batch mean of [xbar, 0] W_c + b_c.
  GrcCache<double> open = GrcCache<double>::init(Tm, Dm, 21);
  fill(open.w_update(), 0.0);
  fill(open.b_update(), 60.0);
  const Tensor<double> xbar = random_tensor({B, Tm, Dm}, 22);
  open.update(xbar);
  const auto wc = values(open.w_candidate()), bc = values(open.b_candidate());
  std::vector<double> expect(Tm * Dm, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < Tm; ++t)
      for (std::size_t j = 0; j < Dm; ++j) {
        double s = bc[j];
        for (std::size_t i = 0; i < Dm; ++i) s += xbar[(b * Tm + t) * Dm + i] * wc[i * Dm + j];
        expect[t * Dm + j] += s / static_cast<double>(B);
      }
  const double cand = max_diff(values(open.state()), expect);
  d << "g_u = 1, C_0 = 0: max |C_1 - [xbar, 0] W_c| = " << sci(cand) << '\n';

  // lambda = 0: the layer output is W_O applied to the midpoint of the two
  // branches, with both branches taken from the scalar reference.
  double mid = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    oracle::RefInstance in = oracle::random_instance(500 + seed, 2, 3, 2, 4, 2, 2);
    std::fill(in.lambda.begin(), in.lambda.end(), 0.0);
    in.training = false;
    const oracle::RefResult ref = oracle::reference_grc_step(in);
    GrcAttention<double> layer(oracle::instance_dims(in), 1);
    oracle::apply_instance(in, layer);
    const Tensor<double> x({in.B, in.T, in.D}, in.x);
    const auto out = values(layer.forward(x, false));
    const std::size_t dh = in.D / in.H;
    for (std::size_t b = 0; b < in.B; ++b)
      for (std::size_t t = 0; t < in.T; ++t)
        for (std::size_t o = 0; o < in.D; ++o) {
          double s = in.b_o[o];
          for (std::size_t h = 0; h < in.H; ++h)
            for (std::size_t c = 0; c < dh; ++c) {
              const std::size_t k = ((b * in.H + h) * in.T + t) * dh + c;
              s += 0.5 * (ref.o_self[k] + ref.o_mem[k]) * in.w_o[(h * dh + c) * in.D + o];
            }
          mid = std::max(mid, std::abs(out[(b * in.T + t) * in.D + o] - s));
        }
  }
  d << "lambda = 0: max |out - W_O midpoint| = " << sci(mid) << " over 10 instances (tolerance 1e-09)";
  return {keep <= 1e-9 && cand <= 1e-9 && mid <= 1e-9, d.str()};
}

RunConfig copy_config(std::size_t d_model, std::size_t steps) {
  RunConfig c;
  c.model.layers = 2;
  c.model.d_model = d_model;
  c.model.heads = 2;
  c.model.cache_len = 8;
  c.model.cache_ratio = 0.5;
  c.task.kind = "copy";
  c.task.seq_len = 12;
  c.task.vocab = 8;
  c.train.steps = steps;
  c.train.batch_size = 8;
  c.train.lr = 3e-3;
  c.train.seed = 7;
  c.train.eval_interval = 0;
  c.train.eval_batches = 2;
  c.precision = Precision::Float64;
  c.resolve();
  return c;
}

Outcome inference_purity() {
  Trainer<double> t(copy_config(16, 30));
  for (int i = 0; i < 30; ++i) t.train_step();
  Model<double>& m = t.model();
  m.freeze_caches();
  CopyTask probe(99, 4, 12, 8);
  const TaskBatch batch = probe.next();
  const auto before = m.snapshot_caches();
  const auto a = values(m.forward(batch, false).logits);
  const auto mid = m.snapshot_caches();
  const auto b = values(m.forward(batch, false).logits);
  const auto after = m.snapshot_caches();
  // Frozen caches refuse a training-mode update outright.
  bool refused = false;
  try {
    m.forward(batch, true);
  } catch (const StateError&) {
    refused = true;
  }
  const auto trained = m.snapshot_caches();
  bool same_cache = true;
  for (std::size_t i = 0; i < before.size(); ++i)
    same_cache = same_cache && before[i].state == mid[i].state && before[i].state == after[i].state &&
                 before[i].state == trained[i].state && before[i].step == trained[i].step;
  const bool same_out = a == b;
  m.thaw_caches();
  const EvalMetrics e1 = t.evaluate(), e2 = t.evaluate();
  std::ostringstream d;
  d << "two frozen passes: logits bit-identical " << (same_out ? "yes" : "no") << ", " << before.size()
    << " caches bit-identical " << (same_cache ? "yes" : "no") << '\n';
  d << "training-mode update on frozen caches refused: " << (refused ? "yes" : "no") << '\n';
  d << "evaluate() twice: loss " << e1.loss << " / " << e2.loss;
  return {same_out && same_cache && refused && e1.loss == e2.loss && e1.accuracy == e2.accuracy, d.str()};
}

Outcome constant_cost() {
  const std::size_t steps = 2000, warm = 20;
  Trainer<float> t(copy_config(32, steps + warm));
  for (std::size_t i = 0; i < warm; ++i) t.train_step();
  std::vector<double> secs(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const auto t0 = Clock::now();
    t.train_step();
    secs[i] = std::chrono::duration<double>(Clock::now() - t0).count();
  }
  const double n = static_cast<double>(steps);
  const double xm = (n - 1.0) / 2.0;
  const double ym = std::accumulate(secs.begin(), secs.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < steps; ++i) {
    sxy += (static_cast<double>(i) - xm) * (secs[i] - ym);
    sxx += (static_cast<double>(i) - xm) * (static_cast<double>(i) - xm);
  }
  const double slope = sxy / sxx;
  double rss = 0.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double r = secs[i] - ym - slope * (static_cast<double>(i) - xm);
    rss += r * r;
  }
  const double se = std::sqrt(rss / (n - 2.0) / sxx);
  const auto cache_step = t.model().caches()[0]->step();
  std::ostringstream d;
  d << steps << " training steps (after " << warm << " warm-up), mean step " << fixed(ym * 1e3, 3) << " ms\n";
  d << "slope " << sci(slope) << " s/step = " << sci(std::abs(slope) / ym * 100.0) << " % of mean (limit 1 %), t = "
    << fixed(slope / se, 2) << '\n';
  d << "fitted drift over the whole stream " << fixed(slope * n / ym * 100.0, 2) << " % of mean; cache updates "
    << cache_step << ", cache size " << t.model().caches()[0]->state().size() << " values throughout";
  return {std::abs(slope) < 0.01 * ym && cache_step == steps + warm, d.str()};
}

Outcome baseline_degeneracy() {
  double worst = 0.0;
  std::size_t cases = 0;
  for (std::size_t layers : {1u, 2u, 3u}) {
    ModelConfig cached;
    cached.layers = layers;
    cached.d_model = 16;
    cached.heads = 4;
    cached.cache_len = 6;
    cached.cache_ratio = 0.5;
    cached.vocab = 20;
    cached.max_len = 10;
    cached.num_classes = 5;
    ModelConfig plain = cached;
    plain.use_cache = false;
    Model<double> a(cached, 40 + layers), b(plain, 40 + layers);
    for (auto& blk : a.blocks()) fill(blk.attention().lambda(), -30.0);
    std::uint64_t k = 0;
    for (auto* c : a.caches()) c->set_state(random_tensor({6, 8}, 60 + k++, -3.0, 3.0).data());
    for (std::uint64_t s = 0; s < 5; ++s) {
      Rng rng(700 + s);
      TaskBatch batch;
      batch.batch = 4;
      batch.length = 10;
      for (std::size_t i = 0; i < 40; ++i) batch.tokens.push_back(static_cast<int>(rng.below(20)));
      for (std::size_t i = 0; i < 4; ++i) batch.labels.push_back(static_cast<int>(rng.below(5)));
      batch.lengths = {10, 7, 10, 3};
      worst = std::max(worst, max_diff(values(a.forward(batch, true).logits), values(b.forward(batch, true).logits)));
      ++cases;
    }
  }
  std::ostringstream d;
  d << cases << " batches over 1-3 layers with random cache state: max |logit diff| " << sci(worst)
    << " (tolerance 1e-05)";
  return {worst < 1e-5, d.str()};
}

Arm listops_cached;

Outcome listops_trend() {
  const std::vector<int> seeds{1, 2, 3};
  const auto t0 = Clock::now();
  listops_cached = train_arm(config_path("listops.conf"), true, "listops", seeds);
  const Arm base = train_arm(config_path("listops.conf"), false, "listops", seeds);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  const RunConfig c = load_run_config(config_path("listops.conf"));
  const double mc = median(listops_cached.acc), mb = median(base.acc);
  std::ostringstream d;
  d << c.train.steps * c.train.batch_size << " training examples per run, 3 seeds, eval on "
    << c.train.eval_batches * c.train.batch_size << " held-out examples\n";
  d << "cached accuracy   " << list(listops_cached.acc) << "  median " << fixed(mc) << '\n';
  d << "baseline accuracy " << list(base.acc) << "  median " << fixed(mb) << '\n';
  d << "median gap " << fixed((mc - mb) * 100.0, 2) << " points; wall time " << fixed(secs / 60.0, 1)
    << " min (limit 30)";
  return {mc >= mb && secs < 1800.0, d.str()};
}

Outcome prototype_separation() {
  const std::vector<int> seeds{1, 2, 3};
  const RunConfig c = load_run_config(config_path("prototype.conf"));
  const auto motifs = make_motifs(c.task.motif_seed, c.task.classes, c.task.seq_len, c.task.vocab);
  const double ceiling = prototype_bayes_accuracy(motifs, c.task.vocab, c.task.noise, 400000, 17);
  const Arm cached = train_arm(config_path("prototype.conf"), true, "prototype", seeds);
  const Arm base = train_arm(config_path("prototype.conf"), false, "prototype", seeds);
  bool near = true, above = true;
  std::string margins;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    near = near && cached.acc[i] >= ceiling - 0.05;
    above = above && cached.acc[i] > base.acc[i];
    margins += (margins.empty() ? "" : " ") + fixed((cached.acc[i] - base.acc[i]) * 100.0, 2);
  }
  std::ostringstream d;
  d << c.task.classes << " classes, length " << c.task.seq_len << ", vocab " << c.task.vocab << ", noise "
    << c.task.noise << ": Bayes ceiling " << fixed(ceiling) << '\n';
  d << "cached accuracy   " << list(cached.acc) << "  (within 5 points: " << (near ? "yes" : "no") << ")\n";
  d << "baseline accuracy " << list(base.acc) << '\n';
  d << "cached - baseline per seed (points): " << margins;
  return {near && above, d.str()};
}

Outcome lambda_analysis() {
  if (listops_cached.dirs.empty()) return {false, "ListOps runs did not complete"};
  std::ostringstream d;
  bool any = false;
  for (std::size_t i = 0; i < listops_cached.dirs.size(); ++i) {
    const fs::path dir = listops_cached.dirs[i];
    const fs::path out = dir / "inspect";
    const CliResult r = grc_cli("inspect --checkpoint " + quote(dir / "checkpoint.bin") + " --out " + quote(out));
    if (r.code != 0) return {false, "grc inspect exited with " + std::to_string(r.code) + ": " + r.output};
    std::ifstream in(out / "lambda.csv");
    std::string line;
    std::getline(in, line);
    std::map<int, std::vector<double>> per_layer;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string layer, head, v;
      std::getline(ls, layer, ',');
      std::getline(ls, head, ',');
      std::getline(ls, v, ',');
      per_layer[std::stoi(layer)].push_back(std::stod(v));
    }
    d << "seed " << i + 1 << ":";
    for (const auto& [layer, v] : per_layer) {
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      any = any || mean > 0.5;
      d << "  layer " << layer << " mean " << fixed(mean) << " (heads " << list(v) << ")";
    }
    d << '\n';
  }
  d << "at least one layer with mean sigma(lambda) > 0.5: " << (any ? "yes" : "no");
  return {any, d.str()};
}

Outcome checkpoint_round_trip() {
  const fs::path dir = work_dir() / "checkpoint";
  fs::create_directories(dir);
  const RunConfig c = copy_config(16, 12);
  Trainer<double> a(c);
  for (int i = 0; i < 12; ++i) a.train_step();
  a.save(dir / "c.bin");
  CopyTask probe(5, 4, 12, 8);
  const TaskBatch batch = probe.next();
  const auto before = values(a.model().forward(batch, false).logits);
  Trainer<double> b(c);
  b.load(dir / "c.bin");
  const bool same = values(b.model().forward(batch, false).logits) == before;
  bool same_cache = true;
  const auto sa = a.model().snapshot_caches(), sb = b.model().snapshot_caches();
  for (std::size_t i = 0; i < sa.size(); ++i) same_cache = same_cache && sa[i].state == sb[i].state;

  std::string bytes;
  {
    std::ifstream in(dir / "c.bin", std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    bytes = ss.str();
  }
  bytes[0] ^= 0x5a;
  std::ofstream(dir / "bad.bin", std::ios::binary) << bytes;
  const int eval_code = grc_cli("eval --checkpoint " + quote(dir / "bad.bin")).code;
  const int inspect_code = grc_cli("inspect --checkpoint " + quote(dir / "bad.bin")).code;
  std::ostringstream d;
  d << "save -> load -> forward logits bit-identical: " << (same ? "yes" : "no") << ", caches bit-identical: "
    << (same_cache ? "yes" : "no") << '\n';
  d << "corrupted magic: grc eval exit " << eval_code << ", grc inspect exit " << inspect_code << " (expected 4)";
  return {same && same_cache && eval_code == 4 && inspect_code == 4, d.str()};
}

}  // namespace

int main() {
  std::cout << "grc acceptance run, outputs in " << work_dir().string() << "\n\n";
  report("gradient correctness: tiny model, every parameter, rel err < 1e-5, < 60 s", gradient_correctness);
  report("oracle equivalence: 100 tiny instances within 1e-10", oracle_equivalence);
  report("convex update identities within 1e-9", convex_identities);
  report("inference purity after freeze", inference_purity);
  report("constant-cost cache over a 2000-step stream", constant_cost);
  report("baseline degeneracy at lambda = -30 within 1e-5", baseline_degeneracy);
  report("ListOps trend: median cached >= median baseline over 3 seeds", listops_trend, true);
  report("prototype separation: within 5 points of ceiling and above baseline on 3 seeds", prototype_separation);
  report("sigma(lambda) after ListOps: some layer with mean > 0.5", lambda_analysis, true);
  report("checkpoint round-trip and corrupted-magic rejection", checkpoint_round_trip);
  std::cout << '\n' << failures << " hard and " << soft_failures << " soft criteria failed\n";
  return failures == 0 ? 0 : 1;
}
