#include "grc/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "grc/checkpoint.hpp"
#include "grc/error.hpp"
#include "grc/kernels.hpp"
#include "grc/oracle.hpp"
#include "grc/plot.hpp"
#include "grc/trainer.hpp"

namespace fs = std::filesystem;

namespace grc::cli {

namespace {

// GRC_NUM_THREADS, or 0 when unset.
int env_threads() {
  const char* v = std::getenv("GRC_NUM_THREADS");
  if (!v || !*v) return 0;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 4096) throw ConfigError("GRC_NUM_THREADS must be a positive integer");
  return static_cast<int>(n);
}

template <typename F>
void with_precision(Precision p, F&& f) {
  if (p == Precision::Float64) f.template operator()<double>();
  else f.template operator()<float>();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
};

template <typename T>
EvalMetrics train_into(const RunConfig& cfg, const fs::path& out, bool resume, std::ostream* log) {
  Trainer<T> trainer(cfg);
  fs::create_directories(out);
  bool resumed = false;
  if (resume && fs::exists(out / "checkpoint.bin")) {
    trainer.load(out / "checkpoint.bin");
    resumed = true;
    if (log) *log << "resumed from step " << trainer.step() << '\n';
  }
  write_text(out / "config.txt", format_run_config(trainer.config()));
  run_training(trainer, out, resumed, log);
  return trainer.evaluate();
}

RunConfig config_for_run(const std::string& path, std::optional<std::uint64_t> seed, const std::string& out) {
  RunConfig cfg = load_run_config(path);
  if (seed) cfg.train.seed = *seed;
  if (!out.empty()) cfg.out_dir = out;
  cfg.resolve();
  return cfg;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const RunConfig cfg = config_for_run(a.config, a.seed, a.out);
  with_precision(cfg.precision, [&]<typename T>() {
    const EvalMetrics m = train_into<T>(cfg, cfg.out_dir, a.resume, &out);
    out << "final eval loss " << format_metric(m.loss) << " accuracy " << format_metric(m.accuracy) << '\n';
  });
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::size_t> batches;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const CheckpointInfo info = read_checkpoint_info(a.checkpoint);
  RunConfig cfg = info.config;
  if (a.batches) cfg.train.eval_batches = *a.batches;
  if (a.seed) cfg.train.seed = *a.seed;
  with_precision(info.precision, [&]<typename T>() {
    Trainer<T> trainer(cfg);
    trainer.load(a.checkpoint);
    const EvalMetrics m = trainer.evaluate();
    std::ostringstream row;
    row << "step,loss,accuracy,counted\n"
        << trainer.step() << ',' << format_metric(m.loss) << ',' << format_metric(m.accuracy) << ',' << m.counted
        << '\n';
    out << "step " << trainer.step() << "  eval loss " << format_metric(m.loss) << "  accuracy "
        << format_metric(m.accuracy) << "  (" << m.counted << " labels)\n";
    if (!a.out.empty()) {
      fs::create_directories(a.out);
      write_text(fs::path(a.out) / "eval.csv", row.str());
    }
  });
  return kExitOk;
}

// ---- gradcheck ------------------------------------------------------------

struct GradcheckArgs {
  std::string sizes = "1,2,2,4,2";
  double ratio = 0.5;
  std::uint64_t seed = 7;
  double eps = 1e-5;
  double tol = 1e-5;
  std::size_t instances = 100;
  std::string report = "gradcheck_report.csv";
};

oracle::TinySizes parse_sizes(const std::string& text, double ratio) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--sizes expects B,T,TM,D,H as integers, got '" + text + "'");
    }
  }
  if (v.size() != 5) throw ConfigError("--sizes expects five values B,T,TM,D,H, got '" + text + "'");
  oracle::TinySizes s;
  s.B = v[0], s.T = v[1], s.Tm = v[2], s.D = v[3], s.H = v[4];
  s.ratio = ratio;
  if (s.B > 4 || s.T > 4 || s.Tm > 4 || s.D > 8) throw ConfigError("gradcheck sizes are capped at B, T, TM <= 4, D <= 8");
  return s;
}

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const oracle::TinySizes s = parse_sizes(a.sizes, a.ratio);
  tiny_model_config(s).validate();
  oracle::GradCheckOptions opts;
  opts.eps = a.eps;
  opts.tolerance = a.tol;
  const auto reports = oracle::gradcheck_tiny(s, a.seed, opts);
  oracle::print_reports(out, reports);
  const bool grads_ok = std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.pass; });

  const oracle::AgreementReport agree = oracle::check_agreement(s, a.instances, a.seed);
  out << std::scientific << std::setprecision(3) << "reference agreement over " << agree.instances
      << " instances: output " << agree.max_out << ", cache " << agree.max_cache << ", self " << agree.max_self
      << ", cached " << agree.max_mem << std::defaultfloat << "  " << (agree.pass ? "pass" : "FAIL") << '\n';

  if (!a.report.empty()) {
    std::ostringstream csv;
    oracle::write_reports_csv(csv, reports);
    csv << std::setprecision(17) << "reference_agreement," << agree.instances << ','
        << std::max({agree.max_out, agree.max_cache, agree.max_self, agree.max_mem}) << ",," << (agree.pass ? 1 : 0)
        << '\n';
    write_text(a.report, csv.str());
  }
  const bool ok = grads_ok && agree.pass;
  out << (ok ? "all checks passed" : "CHECKS FAILED") << '\n';
  return ok ? kExitOk : kExitNumeric;
}

// ---- inspect --------------------------------------------------------------

struct InspectArgs {
  std::string checkpoint;
  std::string config;
  std::string out;
};

template <typename T>
void inspect_trainer(Trainer<T>& trainer, const InspectArgs& a, std::ostream& out) {
  Model<T>& model = trainer.model();
  out << "step " << trainer.step() << '\n';
  const auto ratios = model.mixing_ratios();
  std::ostringstream stats;
  stats << "layer,cache_step,frozen,mean,std\n";
  std::size_t above = 0, with_cache = 0;
  for (std::size_t l = 0; l < ratios.size(); ++l) {
    out << "layer " << l;
    GrcCache<T>* cache = model.blocks()[l].attention().cache();
    if (ratios[l].empty() || !cache) {
      out << "  no cache\n";
      continue;
    }
    ++with_cache;
    double mean_ratio = 0.0;
    out << "  sigma(lambda):";
    for (double r : ratios[l]) {
      out << ' ' << std::fixed << std::setprecision(4) << r;
      mean_ratio += r;
    }
    mean_ratio /= static_cast<double>(ratios[l].size());
    if (mean_ratio > 0.5) ++above;
    double m = 0.0, sq = 0.0;
    const auto c = cache->state().data();
    for (T v : c) m += static_cast<double>(v);
    m /= static_cast<double>(c.size());
    for (T v : c) sq += (static_cast<double>(v) - m) * (static_cast<double>(v) - m);
    const double sd = std::sqrt(sq / static_cast<double>(c.size()));
    out << "  mean " << mean_ratio << "  cache mean " << m << " std " << sd << std::defaultfloat << "  (updates "
        << cache->step() << ")\n";
    stats << l << ',' << cache->step() << ',' << (cache->frozen() ? 1 : 0) << ',' << format_metric(m) << ','
          << format_metric(sd) << '\n';
  }
  if (with_cache > 0) out << above << " of " << with_cache << " layers have mean sigma(lambda) > 0.5\n";
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_lambda_csv(fs::path(a.out) / "lambda.csv", ratios);
    write_text(fs::path(a.out) / "cache_stats.csv", stats.str());
  }
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  if (a.checkpoint.empty() == a.config.empty()) throw ConfigError("inspect needs exactly one of --checkpoint or --config");
  if (!a.checkpoint.empty()) {
    const CheckpointInfo info = read_checkpoint_info(a.checkpoint);
    with_precision(info.precision, [&]<typename T>() {
      Trainer<T> trainer(info.config);
      trainer.load(a.checkpoint);
      inspect_trainer(trainer, a, out);
    });
  } else {
    RunConfig cfg = load_run_config(a.config);
    cfg.resolve();
    with_precision(cfg.precision, [&]<typename T>() {
      Trainer<T> trainer(cfg);
      inspect_trainer(trainer, a, out);
    });
  }
  return kExitOk;
}

// ---- sweep ----------------------------------------------------------------

struct SweepArgs {
  std::string config;
  std::vector<std::string> ratios;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

struct SweepJob {
  std::string token;
  RunConfig cfg;
  std::size_t width = 0;
  std::string status = "ok";
  std::string message;
  EvalMetrics metrics;
};

std::string csv_field(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig base = load_run_config(a.config);
  if (a.seed) base.train.seed = *a.seed;
  const fs::path root = a.out.empty() ? fs::path(base.out_dir) / "sweep" : fs::path(a.out);
  std::vector<SweepJob> jobs;
  for (const std::string& token : a.ratios) {
    SweepJob job;
    job.token = token;
    job.cfg = base;
    try {
      if (token == "baseline") {
        job.cfg.model.use_cache = false;
      } else {
        std::size_t used = 0;
        double r = 0.0;
        try {
          r = std::stod(token, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != token.size() || used == 0) throw ConfigError("'" + token + "' is not a ratio or 'baseline'");
        job.cfg.model.cache_ratio = r;
        job.cfg.model.use_cache = true;
      }
      job.cfg.out_dir = (root / (token == "baseline" ? std::string("baseline") : "ratio_" + token)).string();
      job.cfg.resolve();
      job.width = job.cfg.model.use_cache ? cache_width(job.cfg.model.d_model, job.cfg.model.cache_ratio) : 0;
    } catch (const ConfigError& e) {
      job.status = "rejected";
      job.message = e.what();
      err << "ratio " << token << " rejected: " << e.what() << '\n';
    }
    jobs.push_back(std::move(job));
  }

  std::size_t workers = std::max<std::size_t>(1, a.jobs);
  if (const int cap = env_threads(); cap > 0) workers = std::min(workers, static_cast<std::size_t>(cap));
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&]() {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      SweepJob& job = jobs[i];
      if (job.status != "ok") continue;
      try {
        std::ostringstream log;
        with_precision(job.cfg.precision, [&]<typename T>() {
          job.metrics = train_into<T>(job.cfg, job.cfg.out_dir, false, &log);
        });
        write_text(fs::path(job.cfg.out_dir) / "train.log", log.str());
      } catch (const NumericError& e) {
        job.status = "numeric_error";
        job.message = e.what();
      } catch (const std::exception& e) {
        job.status = "error";
        job.message = e.what();
      }
      std::lock_guard lock(log_mutex);
      out << "ratio " << job.token << ": " << job.status;
      if (job.status == "ok") out << "  eval accuracy " << format_metric(job.metrics.accuracy);
      out << '\n';
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  fs::create_directories(root);
  std::ostringstream csv;
  csv << "ratio,cache_width,status,eval_loss,eval_accuracy,message\n";
  std::size_t ok = 0;
  for (const SweepJob& job : jobs) {
    csv << job.token << ',' << job.width << ',' << job.status << ',';
    if (job.status == "ok") {
      ++ok;
      csv << format_metric(job.metrics.loss) << ',' << format_metric(job.metrics.accuracy);
    } else {
      csv << ',';
    }
    csv << ',' << csv_field(job.message) << '\n';
  }
  write_text(root / "ratio_sweep.csv", csv.str());
  out << "wrote " << (root / "ratio_sweep.csv").string() << '\n';
  if (ok == jobs.size()) return kExitOk;
  const bool numeric = std::any_of(jobs.begin(), jobs.end(), [](const SweepJob& j) { return j.status == "numeric_error"; });
  if (ok > 0 && !numeric) return kExitOk;
  return numeric ? kExitNumeric : kExitConfig;
}

// ---- plot -----------------------------------------------------------------

struct PlotArgs {
  std::string metrics;
  std::string lambda;
  std::string out;
};

int cmd_plot(const PlotArgs& a, std::ostream& out) {
  const fs::path dir = a.out.empty() ? fs::path(a.metrics).parent_path() : fs::path(a.out);
  plot::write_plots(a.metrics, a.lambda, dir.empty() ? fs::path(".") : dir);
  out << "wrote loss.svg, accuracy.svg, lambda.svg to " << (dir.empty() ? "." : dir.string()) << '\n';
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gated recurrent cache attention: train, evaluate and verify"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train a model from a config file");
  c_train->add_option("--config", train.config, "run config (key = value)")->required();
  c_train->add_option("--seed", train.seed, "override train.seed");
  c_train->add_option("--out", train.out, "output directory (overrides run.out_dir)");
  c_train->add_flag("--resume", train.resume, "continue from <out>/checkpoint.bin when present");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint with frozen caches");
  c_eval->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  c_eval->add_option("--batches", eval.batches, "number of evaluation batches");
  c_eval->add_option("--seed", eval.seed, "seed of the evaluation data");
  c_eval->add_option("--out", eval.out, "directory for eval.csv");

  GradcheckArgs grad;
  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference and reference checks on a tiny instance");
  c_grad->add_option("--sizes", grad.sizes, "B,T,TM,D,H")->capture_default_str();
  c_grad->add_option("--ratio", grad.ratio, "caching ratio")->capture_default_str();
  c_grad->add_option("--seed", grad.seed, "seed")->capture_default_str();
  c_grad->add_option("--eps", grad.eps, "finite-difference step")->capture_default_str();
  c_grad->add_option("--tol", grad.tol, "relative error tolerance")->capture_default_str();
  c_grad->add_option("--instances", grad.instances, "random reference instances")->capture_default_str();
  c_grad->add_option("--report", grad.report, "CSV report path")->capture_default_str();

  InspectArgs inspect;
  auto* c_inspect = app.add_subcommand("inspect", "print sigma(lambda) per head and cache statistics");
  c_inspect->add_option("--checkpoint", inspect.checkpoint, "checkpoint file");
  c_inspect->add_option("--config", inspect.config, "fresh model from a config");
  c_inspect->add_option("--out", inspect.out, "directory for lambda.csv and cache_stats.csv");

  SweepArgs sweep;
  auto* c_sweep = app.add_subcommand("sweep", "train one model per caching ratio");
  c_sweep->add_option("--config", sweep.config, "base run config")->required();
  c_sweep->add_option("--ratios", sweep.ratios, "ratios, or 'baseline' for the cache-free model")
      ->required()
      ->delimiter(',');
  c_sweep->add_option("--out", sweep.out, "sweep directory (default <run.out_dir>/sweep)");
  c_sweep->add_option("--seed", sweep.seed, "override train.seed");
  c_sweep->add_option("--jobs", sweep.jobs, "parallel runs (capped by GRC_NUM_THREADS)")->capture_default_str();

  PlotArgs plot_args;
  auto* c_plot = app.add_subcommand("plot", "SVG curves from metrics.csv");
  c_plot->add_option("--metrics", plot_args.metrics, "metrics.csv")->required();
  c_plot->add_option("--lambda", plot_args.lambda, "lambda.csv (default: last metrics row)");
  c_plot->add_option("--out", plot_args.out, "output directory (default: next to metrics)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (const int threads = env_threads(); threads > 0) kernels::set_num_threads(threads);
    if (c_train->parsed()) return cmd_train(train, out);
    if (c_eval->parsed()) return cmd_eval(eval, out);
    if (c_grad->parsed()) return cmd_gradcheck(grad, out);
    if (c_inspect->parsed()) return cmd_inspect(inspect, out);
    if (c_sweep->parsed()) return cmd_sweep(sweep, out, err);
    if (c_plot->parsed()) return cmd_plot(plot_args, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace grc::cli
