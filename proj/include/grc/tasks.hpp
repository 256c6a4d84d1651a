#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grc/batch.hpp"
#include "grc/random.hpp"

namespace grc {

/// Infinite, seeded source of batches. The RNG state can be saved and
/// restored so that a resumed run sees the same data as an unbroken one.
class TaskStream {
 public:
  virtual ~TaskStream() = default;
  virtual TaskBatch next() = 0;
  virtual std::size_t vocab() const = 0;
  virtual std::size_t max_len() const = 0;
  /// 0 for per-token (language model) tasks.
  virtual std::size_t num_classes() const = 0;
  bool per_token() const { return num_classes() == 0; }

  std::string rng_state() const { return rng_.state(); }
  void set_rng_state(const std::string& s) { rng_.set_state(s); }

 protected:
  explicit TaskStream(std::uint64_t seed) : rng_(seed) {}
  Rng rng_;
};

/// Uniform random tokens whose first half is repeated in the second half.
/// Language-model labels: position i predicts token i + 1 inside the copied
/// half; every other label is -1.
class CopyTask final : public TaskStream {
 public:
  CopyTask(std::uint64_t seed, std::size_t batch, std::size_t length, std::size_t vocab);
  TaskBatch next() override;
  std::size_t vocab() const override { return vocab_; }
  std::size_t max_len() const override { return length_; }
  std::size_t num_classes() const override { return 0; }

 private:
  std::size_t batch_, length_, vocab_;
};

// ListOps: nested MIN / MAX / MED / SM (sum mod 10) expressions over digits.
namespace listops {

inline constexpr int kPad = 0;
inline constexpr int kDigit0 = 1;  // digits d map to kDigit0 + d
inline constexpr int kMin = 11;
inline constexpr int kMax = 12;
inline constexpr int kMed = 13;
inline constexpr int kSumMod = 14;
inline constexpr int kClose = 15;
inline constexpr std::size_t kVocab = 16;
inline constexpr std::size_t kClasses = 10;

/// "[MAX 2 9 1]" -> token ids. Throws DataError on unknown symbols.
std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> tokens);
/// Stack interpreter; padding after the expression is ignored.
int evaluate(std::span<const int> tokens);

struct Expression {
  std::vector<int> tokens;
  int value = 0;
};

/// Random expression with an operator at the root, at most max_len tokens
/// and max_depth nesting levels. The value is computed while building the
/// tree, independently of evaluate().
Expression generate(Rng& rng, std::size_t max_len, std::size_t max_depth, std::size_t max_args = 5);

}  // namespace listops

class ListOpsTask final : public TaskStream {
 public:
  ListOpsTask(std::uint64_t seed, std::size_t batch, std::size_t max_len, std::size_t max_depth);
  TaskBatch next() override;
  std::size_t vocab() const override { return listops::kVocab; }
  std::size_t max_len() const override { return max_len_; }
  std::size_t num_classes() const override { return listops::kClasses; }

 private:
  std::size_t batch_, max_len_, max_depth_;
};

/// Each class owns a fixed token motif; samples are the motif with every
/// position independently replaced by a uniform random token with
/// probability `noise`. The motifs persist across the whole stream, so class
/// evidence is shared between samples.
class PrototypeTask final : public TaskStream {
 public:
  PrototypeTask(std::uint64_t seed, std::size_t batch, std::size_t length, std::size_t num_classes,
                std::size_t vocab, double noise, std::uint64_t motif_seed);
  PrototypeTask(std::uint64_t seed, std::size_t batch, std::vector<std::vector<int>> motifs, std::size_t vocab,
                double noise);

  TaskBatch next() override;
  std::size_t vocab() const override { return vocab_; }
  std::size_t max_len() const override { return length_; }
  std::size_t num_classes() const override { return motifs_.size(); }

  const std::vector<std::vector<int>>& motifs() const { return motifs_; }
  double noise() const { return noise_; }

 private:
  std::size_t batch_, length_, vocab_;
  double noise_;
  std::vector<std::vector<int>> motifs_;
};

std::vector<std::vector<int>> make_motifs(std::uint64_t motif_seed, std::size_t num_classes, std::size_t length,
                                          std::size_t vocab);
/// Classes whose motif has the most matching positions (ties included).
std::vector<int> nearest_motifs(std::span<const int> tokens, const std::vector<std::vector<int>>& motifs);
/// Monte Carlo estimate of the Bayes-optimal accuracy. Under the corruption
/// model the posterior ranks classes by match count, so the optimal rule is
/// nearest-motif with uniform tie breaking; ties earn fractional credit.
double prototype_bayes_accuracy(const std::vector<std::vector<int>>& motifs, std::size_t vocab, double noise,
                                std::size_t samples, std::uint64_t seed);

struct TaskConfig {
  std::string kind = "copy";  // copy | listops | prototype
  std::size_t seq_len = 16;
  std::size_t vocab = 8;
  std::size_t classes = 4;
  double noise = 0.0;
  std::size_t max_depth = 3;
  std::uint64_t motif_seed = 1234;
};

/// Throws ConfigError for an unknown kind or invalid sizes.
std::unique_ptr<TaskStream> make_task(const TaskConfig& cfg, std::uint64_t seed, std::size_t batch);

}  // namespace grc
