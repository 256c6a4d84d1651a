#include "grc/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>

#include "grc/error.hpp"
#include "grc/kernels.hpp"

namespace grc {

template <typename T>
FrozenCaches<T>::FrozenCaches(Model<T>& model) : model_(model) {
  for (auto* c : model_.caches()) {
    was_frozen_.push_back(c->frozen());
    c->freeze();
  }
}

template <typename T>
FrozenCaches<T>::~FrozenCaches() {
  auto caches = model_.caches();
  for (std::size_t i = 0; i < caches.size() && i < was_frozen_.size(); ++i) {
    if (!was_frozen_[i]) caches[i]->thaw();
  }
}

namespace {

RunConfig resolved(RunConfig cfg) {
  cfg.resolve();
  return cfg;
}

AdamWConfig adam_config(const TrainConfig& t) {
  AdamWConfig a;
  a.beta1 = t.beta1;
  a.beta2 = t.beta2;
  a.eps = t.eps;
  a.weight_decay = t.weight_decay;
  return a;
}

std::uint64_t eval_seed(const RunConfig& cfg) { return derive_seed(cfg.train.seed, "eval"); }

}  // namespace

template <typename T>
Trainer<T>::Trainer(RunConfig cfg)
    : cfg_(resolved(std::move(cfg))),
      model_(cfg_.model, cfg_.train.seed),
      opt_(model_.parameters(), adam_config(cfg_.train)),
      stream_(make_task(cfg_.task, derive_seed(cfg_.train.seed, "train"), cfg_.train.batch_size)) {
  kernels::keep_heap_resident();
}

template <typename T>
std::vector<double> Trainer<T>::lambda_means() const {
  std::vector<double> out;
  for (const auto& layer : model_.mixing_ratios()) {
    if (layer.empty()) continue;
    double s = 0.0;
    for (double r : layer) s += r;
    out.push_back(s / static_cast<double>(layer.size()));
  }
  return out;
}

template <typename T>
std::string Trainer<T>::diagnostic(double loss) const {
  std::ostringstream os;
  os << "non-finite training loss " << loss << " at step " << step_ + 1 << '\n';
  std::map<std::string, double> norms;
  for (const auto& p : const_cast<Model<T>&>(model_).parameters()) {
    std::string group = p.name;
    if (group.rfind("blocks.", 0) == 0) group = group.substr(0, group.find('.', 7));
    else group = group.substr(0, group.find('.'));
    double sq = 0.0;
    for (T v : p.tensor.data()) sq += static_cast<double>(v) * static_cast<double>(v);
    norms[group] += sq;
  }
  for (const auto& [group, sq] : norms) os << "  param norm " << group << " = " << std::sqrt(sq) << '\n';
  std::size_t layer = 0;
  for (auto* c : const_cast<Model<T>&>(model_).caches()) {
    const GateStats& g = c->last_gate_stats();
    os << "  layer " << layer++ << " gates: mean update " << g.mean_update << ", mean reset " << g.mean_reset
       << ", cache step " << c->step() << '\n';
  }
  return os.str();
}

template <typename T>
MetricRecord Trainer<T>::train_step() {
  const TaskBatch batch = stream_->next();
  model_.zero_grad();
  Tape tape;
  ForwardResult<T> result;
  {
    TapeScope scope(tape);
    result = model_.forward(batch, true);
  }
  const double loss = static_cast<double>(result.loss.item());
  if (!std::isfinite(loss)) throw NumericError(diagnostic(loss));
  tape.backward(result.loss);
  clip_grad_norm(opt_.params(), cfg_.train.clip_norm);
  opt_.step(inverse_sqrt_lr(cfg_.train.lr, cfg_.train.warmup, step_));
  ++step_;
  MetricRecord rec;
  rec.step = step_;
  rec.split = "train";
  rec.loss = loss;
  rec.accuracy = result.accuracy();
  rec.lambda_means = lambda_means();
  return rec;
}

template <typename T>
EvalMetrics Trainer<T>::evaluate() {
  FrozenCaches<T> frozen(model_);
  NoGradScope no_grad;
  const auto stream = make_task(cfg_.task, eval_seed(cfg_), cfg_.train.batch_size);
  EvalMetrics m;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < cfg_.train.eval_batches; ++i) {
    const ForwardResult<T> r = model_.forward(stream->next(), false);
    loss_sum += static_cast<double>(r.loss.item()) * static_cast<double>(r.counted);
    correct += r.correct;
    m.counted += r.counted;
  }
  if (m.counted > 0) {
    m.loss = loss_sum / static_cast<double>(m.counted);
    m.accuracy = static_cast<double>(correct) / static_cast<double>(m.counted);
  }
  return m;
}

template <typename T>
MetricRecord Trainer<T>::eval_record() {
  const EvalMetrics m = evaluate();
  MetricRecord rec;
  rec.step = step_;
  rec.split = "eval";
  rec.loss = m.loss;
  rec.accuracy = m.accuracy;
  rec.lambda_means = lambda_means();
  return rec;
}

std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, std::size_t layers,
                             std::optional<std::size_t> resume_step)
    : layers_(layers) {
  std::vector<std::string> kept;
  if (resume_step) {
    std::ifstream in(path);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        header = false;
        continue;
      }
      if (line.empty()) continue;
      const std::size_t step = std::stoull(line.substr(0, line.find(',')));
      if (step <= *resume_step) kept.push_back(line);
    }
  }
  out_.open(path, std::ios::trunc);
  if (!out_) throw IoError("cannot write metrics file " + path.string());
  out_ << "step,split,loss,accuracy";
  for (std::size_t l = 0; l < layers_; ++l) out_ << ",lambda_" << l;
  out_ << '\n';
  for (const auto& line : kept) out_ << line << '\n';
  out_.flush();
}

void MetricsWriter::write(const MetricRecord& rec) {
  out_ << rec.step << ',' << rec.split << ',' << format_metric(rec.loss) << ',' << format_metric(rec.accuracy);
  for (std::size_t l = 0; l < layers_; ++l) {
    out_ << ',';
    if (l < rec.lambda_means.size()) out_ << format_metric(rec.lambda_means[l]);
  }
  out_ << '\n';
}

void MetricsWriter::flush() {
  out_.flush();
  if (!out_) throw IoError("failed writing metrics");
}

void write_lambda_csv(const std::filesystem::path& path, const std::vector<std::vector<double>>& ratios) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "layer,head,sigma_lambda\n";
  for (std::size_t l = 0; l < ratios.size(); ++l) {
    for (std::size_t h = 0; h < ratios[l].size(); ++h) out << l << ',' << h << ',' << format_metric(ratios[l][h]) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

template <typename T>
void run_training(Trainer<T>& trainer, const std::filesystem::path& out_dir, bool resumed, std::ostream* log) {
  std::filesystem::create_directories(out_dir);
  const TrainConfig& tc = trainer.config().train;
  MetricsWriter metrics(out_dir / "metrics.csv", trainer.config().model.layers,
                        resumed ? std::optional<std::size_t>(trainer.step()) : std::nullopt);
  while (!trainer.done()) {
    const MetricRecord rec = trainer.train_step();
    metrics.write(rec);
    const bool last = trainer.done();
    if (last || (tc.eval_interval > 0 && rec.step % tc.eval_interval == 0)) {
      const MetricRecord ev = trainer.eval_record();
      metrics.write(ev);
      metrics.flush();
      trainer.save(out_dir / "checkpoint.bin");
      if (log) {
        *log << "step " << rec.step << "  train loss " << rec.loss << "  eval loss " << ev.loss << "  eval acc "
             << ev.accuracy << std::endl;
      }
    }
  }
  write_lambda_csv(out_dir / "lambda.csv", trainer.model().mixing_ratios());
}

template class FrozenCaches<float>;
template class FrozenCaches<double>;
template class Trainer<float>;
template class Trainer<double>;
template void run_training(Trainer<float>&, const std::filesystem::path&, bool, std::ostream*);
template void run_training(Trainer<double>&, const std::filesystem::path&, bool, std::ostream*);

}  // namespace grc
