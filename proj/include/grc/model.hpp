#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "grc/attention.hpp"
#include "grc/batch.hpp"
#include "grc/random.hpp"

namespace grc {

enum class TaskHead { Classification, LanguageModel };

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t cache_len = 64;
  double cache_ratio = 0.5;
  std::size_t ffn_mult = 2;
  std::size_t vocab = 16;
  std::size_t max_len = 64;
  TaskHead head = TaskHead::Classification;
  std::size_t num_classes = 10;
  bool use_cache = true;
  double dropout = 0.0;
  std::size_t bptt_steps = 1;

  /// Throws ConfigError naming the failing constraint.
  void validate() const;
  AttentionDims attention_dims() const;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  Tensor<T> loss;
  std::size_t correct = 0;
  std::size_t counted = 0;

  double accuracy() const { return counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0; }
};

/// Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x)).
template <typename T>
class EncoderBlock {
 public:
  EncoderBlock(const ModelConfig& cfg, std::uint64_t seed, std::string name);

  Tensor<T> forward(const Tensor<T>& x, bool training, const ops::KeyMask& mask, Rng& dropout_rng, double dropout);

  GrcAttention<T>& attention() { return attention_; }
  const GrcAttention<T>& attention() const { return attention_; }
  std::vector<NamedTensor<T>> parameters();

 private:
  std::string name_;
  Tensor<T> ln1_gamma_, ln1_beta_, ln2_gamma_, ln2_beta_;
  GrcAttention<T> attention_;
  Linear<T> ffn_in_, ffn_out_;
};

/// Encoder with learned token and position embeddings, a stack of GRC
/// blocks, a final layer norm and a classification (mean-pooled) or
/// language-model head.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// training == true updates every cache once (before its attention reads
  /// it); training == false reads caches and has no side effects.
  ForwardResult<T> forward(const TaskBatch& batch, bool training);

  std::vector<NamedTensor<T>> parameters();
  /// Parameters that are not owned by a cache (those travel in cache blocks).
  std::vector<NamedTensor<T>> parameters_without_caches();
  std::vector<GrcCache<T>*> caches();
  std::vector<EncoderBlock<T>>& blocks() { return blocks_; }
  const std::vector<EncoderBlock<T>>& blocks() const { return blocks_; }

  void freeze_caches();
  void thaw_caches();
  /// sigmoid(lambda) per layer and head; empty rows for cache-less models.
  std::vector<std::vector<double>> mixing_ratios() const;

  std::vector<typename GrcCache<T>::Snapshot> snapshot_caches() const;
  void restore_caches(const std::vector<typename GrcCache<T>::Snapshot>& snaps);

  Rng& dropout_rng() { return dropout_rng_; }
  void zero_grad();

 private:
  ModelConfig cfg_;
  Tensor<T> token_table_;
  Tensor<T> position_table_;
  std::vector<EncoderBlock<T>> blocks_;
  Tensor<T> lnf_gamma_, lnf_beta_;
  Linear<T> head_;
  Rng dropout_rng_;
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  return Model<T>(cfg, seed);
}

/// Index of the largest entry in each row of logits[..., C].
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

extern template class EncoderBlock<float>;
extern template class EncoderBlock<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace grc
