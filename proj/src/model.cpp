#include "grc/model.hpp"

#include <algorithm>
#include <cmath>

namespace grc {

void TaskBatch::validate() const {
  if (batch == 0 || length == 0) throw DataError("empty batch");
  if (tokens.size() != batch * length) throw DataError("token count does not match batch x length");
  if (labels.size() != (per_token ? batch * length : batch)) throw DataError("label count does not match task head");
  if (lengths.size() != batch) throw DataError("need one valid length per item");
  for (std::size_t l : lengths) {
    if (l == 0 || l > length) throw DataError("valid length " + std::to_string(l) + " outside [1, T]");
  }
}

bool TaskBatch::padded() const {
  return std::any_of(lengths.begin(), lengths.end(), [&](std::size_t l) { return l != length; });
}

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("model.layers must be >= 1");
  if (ffn_mult == 0) throw ConfigError("model.ffn_mult must be >= 1");
  if (vocab == 0) throw ConfigError("vocabulary size must be >= 1");
  if (max_len == 0) throw ConfigError("maximum sequence length must be >= 1");
  if (head == TaskHead::Classification && num_classes < 2) throw ConfigError("classification needs >= 2 classes");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
  attention_dims().validate();
}

AttentionDims ModelConfig::attention_dims() const {
  AttentionDims d;
  d.d_model = d_model;
  d.heads = heads;
  d.cache_len = cache_len;
  d.ratio = cache_ratio;
  d.use_cache = use_cache;
  d.bptt_steps = bptt_steps;
  return d;
}

namespace {

template <typename T>
Tensor<T> filled_param(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> normal_param(Shape shape, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(stddev * rng.normal());
  t.set_requires_grad(true);
  return t;
}

}  // namespace

template <typename T>
EncoderBlock<T>::EncoderBlock(const ModelConfig& cfg, std::uint64_t seed, std::string name)
    : name_(std::move(name)),
      ln1_gamma_(filled_param<T>({cfg.d_model}, T(1))),
      ln1_beta_(filled_param<T>({cfg.d_model}, T(0))),
      ln2_gamma_(filled_param<T>({cfg.d_model}, T(1))),
      ln2_beta_(filled_param<T>({cfg.d_model}, T(0))),
      attention_(cfg.attention_dims(), seed, name_ + ".attn"),
      ffn_in_(Linear<T>::make(cfg.d_model, cfg.d_model * cfg.ffn_mult, true, derive_seed(seed, name_ + ".ffn_in"))),
      ffn_out_(Linear<T>::make(cfg.d_model * cfg.ffn_mult, cfg.d_model, true, derive_seed(seed, name_ + ".ffn_out"))) {}

template <typename T>
Tensor<T> EncoderBlock<T>::forward(const Tensor<T>& x, bool training, const ops::KeyMask& mask, Rng& dropout_rng,
                                   double dropout) {
  const double p = training ? dropout : 0.0;
  Tensor<T> attn = attention_.forward(ops::layer_norm(x, ln1_gamma_, ln1_beta_), training, mask);
  const Tensor<T> h = ops::add(x, ops::dropout(attn, p, dropout_rng));
  const Tensor<T> ffn = ffn_out_(ops::gelu(ffn_in_(ops::layer_norm(h, ln2_gamma_, ln2_beta_))));
  return ops::add(h, ops::dropout(ffn, p, dropout_rng));
}

template <typename T>
std::vector<NamedTensor<T>> EncoderBlock<T>::parameters() {
  std::vector<NamedTensor<T>> out{{name_ + ".ln1.gamma", ln1_gamma_, false},
                                  {name_ + ".ln1.beta", ln1_beta_, false},
                                  {name_ + ".ln2.gamma", ln2_gamma_, false},
                                  {name_ + ".ln2.beta", ln2_beta_, false}};
  for (auto& p : attention_.parameters()) out.push_back(std::move(p));
  ffn_in_.append_parameters(out, name_ + ".ffn_in");
  ffn_out_.append_parameters(out, name_ + ".ffn_out");
  return out;
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), dropout_rng_(derive_seed(seed, "dropout")) {
  cfg_.validate();
  token_table_ = normal_param<T>({cfg_.vocab, cfg_.d_model}, 0.02 * std::sqrt(static_cast<double>(cfg_.d_model)),
                                 derive_seed(seed, "embed.tokens"));
  position_table_ = normal_param<T>({cfg_.max_len, cfg_.d_model}, 0.02 * std::sqrt(static_cast<double>(cfg_.d_model)),
                                    derive_seed(seed, "embed.positions"));
  blocks_.reserve(cfg_.layers);
  for (std::size_t i = 0; i < cfg_.layers; ++i) blocks_.emplace_back(cfg_, seed, "blocks." + std::to_string(i));
  lnf_gamma_ = filled_param<T>({cfg_.d_model}, T(1));
  lnf_beta_ = filled_param<T>({cfg_.d_model}, T(0));
  const std::size_t outputs = cfg_.head == TaskHead::Classification ? cfg_.num_classes : cfg_.vocab;
  head_ = Linear<T>::make(cfg_.d_model, outputs, true, derive_seed(seed, "head"));
}

template <typename T>
ForwardResult<T> Model<T>::forward(const TaskBatch& batch, bool training) {
  batch.validate();
  if (batch.per_token != (cfg_.head == TaskHead::LanguageModel)) {
    throw DataError("batch labels do not match the model's task head");
  }
  if (batch.length > cfg_.max_len) {
    throw DataError("sequence length " + std::to_string(batch.length) + " exceeds model maximum " +
                    std::to_string(cfg_.max_len));
  }
  const std::size_t b = batch.batch, t = batch.length;
  std::vector<int> positions(b * t);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % t);

  Tensor<T> x = ops::add(ops::embedding(token_table_, std::span<const int>(batch.tokens), {b, t}),
                         ops::embedding(position_table_, std::span<const int>(positions), {b, t}));
  ops::KeyMask mask;
  if (batch.padded()) mask.key_lengths = batch.lengths;
  mask.causal = cfg_.head == TaskHead::LanguageModel;
  for (auto& block : blocks_) x = block.forward(x, training, mask, dropout_rng_, cfg_.dropout);
  x = ops::layer_norm(x, lnf_gamma_, lnf_beta_);

  ForwardResult<T> result;
  if (cfg_.head == TaskHead::Classification) {
    result.logits = head_(ops::masked_mean_tokens(x, std::span<const std::size_t>(batch.lengths)));
  } else {
    result.logits = head_(x);
  }
  result.loss = ops::cross_entropy(result.logits, std::span<const int>(batch.labels));
  if (!std::isfinite(static_cast<double>(result.loss.item()))) return result;

  const std::vector<int> predicted = argmax_rows(result.logits);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (batch.labels[i] == -1) continue;
    ++result.counted;
    if (predicted[i] == batch.labels[i]) ++result.correct;
  }
  return result;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::parameters() {
  std::vector<NamedTensor<T>> out{{"embed.tokens", token_table_, false}, {"embed.positions", position_table_, false}};
  for (auto& block : blocks_)
    for (auto& p : block.parameters()) out.push_back(std::move(p));
  out.push_back({"final_ln.gamma", lnf_gamma_, false});
  out.push_back({"final_ln.beta", lnf_beta_, false});
  head_.append_parameters(out, "head");
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::parameters_without_caches() {
  std::vector<NamedTensor<T>> out;
  for (auto& p : parameters()) {
    if (p.name.find(".cache.") == std::string::npos) out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
std::vector<GrcCache<T>*> Model<T>::caches() {
  std::vector<GrcCache<T>*> out;
  for (auto& block : blocks_) {
    if (auto* c = block.attention().cache()) out.push_back(c);
  }
  return out;
}

template <typename T>
void Model<T>::freeze_caches() {
  for (auto* c : caches()) c->freeze();
}

template <typename T>
void Model<T>::thaw_caches() {
  for (auto* c : caches()) c->thaw();
}

template <typename T>
std::vector<std::vector<double>> Model<T>::mixing_ratios() const {
  std::vector<std::vector<double>> out;
  for (const auto& block : blocks_) out.push_back(block.attention().mixing_ratios());
  return out;
}

template <typename T>
std::vector<typename GrcCache<T>::Snapshot> Model<T>::snapshot_caches() const {
  std::vector<typename GrcCache<T>::Snapshot> out;
  for (const auto& block : blocks_) {
    if (const auto* c = block.attention().cache()) out.push_back(c->snapshot());
  }
  return out;
}

template <typename T>
void Model<T>::restore_caches(const std::vector<typename GrcCache<T>::Snapshot>& snaps) {
  auto cs = caches();
  if (cs.size() != snaps.size()) throw StateError("cache snapshot count does not match the model");
  for (std::size_t i = 0; i < cs.size(); ++i) cs[i]->restore(snaps[i]);
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t classes = logits.dim(-1);
  const std::size_t rows = logits.size() / classes;
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.data().data() + r * classes;
    out[r] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

template class EncoderBlock<float>;
template class EncoderBlock<double>;
template class Model<float>;
template class Model<double>;
template std::vector<int> argmax_rows(const Tensor<float>&);
template std::vector<int> argmax_rows(const Tensor<double>&);

}  // namespace grc
