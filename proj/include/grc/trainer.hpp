#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "grc/model.hpp"
#include "grc/optim.hpp"
#include "grc/run_config.hpp"
#include "grc/tasks.hpp"

namespace grc {

struct MetricRecord {
  std::size_t step = 0;
  std::string split;  // train | eval
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> lambda_means;  // mean sigmoid(lambda) per layer; empty without caches
};

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t counted = 0;
};

/// Freezes every cache of a model for its lifetime and then restores each
/// cache's previous flag.
template <typename T>
class FrozenCaches {
 public:
  explicit FrozenCaches(Model<T>& model);
  ~FrozenCaches();
  FrozenCaches(const FrozenCaches&) = delete;
  FrozenCaches& operator=(const FrozenCaches&) = delete;

 private:
  Model<T>& model_;
  std::vector<bool> was_frozen_;
};

/// Model, optimizer and data stream of one run, advanced one step at a time.
template <typename T>
class Trainer {
 public:
  explicit Trainer(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }
  Model<T>& model() { return model_; }
  AdamW<T>& optimizer() { return opt_; }
  TaskStream& stream() { return *stream_; }
  std::size_t step() const { return step_; }
  bool done() const { return step_ >= cfg_.train.steps; }

  /// Forward (updating caches), backward, optimizer step. Throws
  /// NumericError with a diagnostic when the loss is not finite.
  MetricRecord train_step();
  /// Fixed evaluation batches with every cache frozen; no side effects.
  EvalMetrics evaluate();
  MetricRecord eval_record();

  /// Versioned binary checkpoint (see checkpoint.hpp for the layout).
  void save(const std::filesystem::path& path) const;
  /// Restores a checkpoint written by a run with the same configuration.
  void load(const std::filesystem::path& path);

 private:
  std::vector<double> lambda_means() const;
  std::string diagnostic(double loss) const;

  RunConfig cfg_;
  Model<T> model_;
  AdamW<T> opt_;
  std::unique_ptr<TaskStream> stream_;
  std::size_t step_ = 0;
};

/// metrics.csv: step,split,loss,accuracy,lambda_0..lambda_{L-1}.
class MetricsWriter {
 public:
  /// With `resume_step` set, rows after that step are dropped and new rows
  /// are appended; otherwise the file is rewritten.
  MetricsWriter(const std::filesystem::path& path, std::size_t layers, std::optional<std::size_t> resume_step = {});
  void write(const MetricRecord& rec);
  void flush();

 private:
  std::ofstream out_;
  std::size_t layers_;
};

std::string format_metric(double v);

/// Runs the remaining steps of `trainer`, writing metrics.csv, checkpoint.bin
/// (at every evaluation) and lambda.csv into `out_dir`. Progress lines go to
/// `log` when given.
template <typename T>
void run_training(Trainer<T>& trainer, const std::filesystem::path& out_dir, bool resumed, std::ostream* log);

/// layer,head,sigma_lambda rows.
void write_lambda_csv(const std::filesystem::path& path, const std::vector<std::vector<double>>& ratios);

extern template class FrozenCaches<float>;
extern template class FrozenCaches<double>;
extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace grc
