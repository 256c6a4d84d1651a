#pragma once

#include <cstddef>
#include <vector>

namespace grc {

/// Tokenized inputs of one step. Labels are per sequence (classification)
/// or per token (language modelling); a label of -1 is ignored by the loss.
struct TaskBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> tokens;           // [batch * length]
  std::vector<int> labels;           // [batch] or [batch * length]
  std::vector<std::size_t> lengths;  // valid tokens per item
  bool per_token = false;

  /// Throws DataError when the fields are inconsistent.
  void validate() const;
  bool padded() const;
};

}  // namespace grc
