#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "grc/model.hpp"
#include "grc/tasks.hpp"

namespace grc {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; matrices only
  std::size_t warmup = 0;
  std::size_t steps = 200;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  std::size_t eval_interval = 0;  // 0: evaluate only after the last step
  std::size_t eval_batches = 4;
  double clip_norm = 0.0;  // 0: no clipping

  void validate() const;
};

enum class Precision { Float32, Float64 };

/// Everything a run needs, parsed from a flat `key = value` file.
struct RunConfig {
  ModelConfig model;  // vocab, max_len, head and classes are derived from the task
  TaskConfig task;
  TrainConfig train;
  std::string out_dir = "runs/default";
  Precision precision = Precision::Float32;

  /// Fills the task-derived model fields and validates every section.
  void resolve();
};

/// Grammar: one `key = value` per line; `#` starts a comment; blank lines
/// are ignored. Unknown or repeated keys and malformed values throw
/// ConfigError naming `source` and the line number.
RunConfig parse_run_config(std::string_view text, std::string_view source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical text form; parse_run_config(format_run_config(c)) == c.
std::string format_run_config(const RunConfig& cfg);

}  // namespace grc
