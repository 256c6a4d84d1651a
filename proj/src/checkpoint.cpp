#include "grc/checkpoint.hpp"

#include <fstream>
#include <string_view>

#include "grc/binary_io.hpp"
#include "grc/error.hpp"
#include "grc/trainer.hpp"

namespace grc {

namespace {

constexpr std::string_view kMagic("GRCCKPT\0", 8);

CheckpointInfo read_header(std::istream& in) {
  io::expect_magic(in, kMagic, "GRC checkpoint");
  CheckpointInfo info;
  info.version = io::read_u32(in);
  if (info.version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(info.version));
  }
  const std::uint8_t width = io::read_u8(in);
  if (width == 4) info.precision = Precision::Float32;
  else if (width == 8) info.precision = Precision::Float64;
  else throw IoError("checkpoint has an unknown value width " + std::to_string(width));
  info.config = parse_run_config(io::read_string(in), "checkpoint config");
  info.config.resolve();
  info.step = io::read_u64(in);
  return info;
}

// Model, task and precision: what must agree for a checkpoint to fit.
std::string structure_of(RunConfig cfg) {
  cfg.train = TrainConfig{};
  cfg.out_dir = "-";
  return format_run_config(cfg);
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return in;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  return read_header(in);
}

template <typename T>
void Trainer<T>::save(const std::filesystem::path& path) const {
  auto& model = const_cast<Model<T>&>(model_);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    io::write_magic(out, kMagic);
    io::write_u32(out, kCheckpointVersion);
    io::write_u8(out, static_cast<std::uint8_t>(sizeof(T)));
    io::write_string(out, format_run_config(cfg_));
    io::write_u64(out, step_);
    io::write_string(out, stream_->rng_state());
    io::write_string(out, model.dropout_rng().state());
    const auto params = model.parameters_without_caches();
    io::write_u64(out, params.size());
    for (const auto& p : params) {
      io::write_string(out, p.name);
      io::write_u64(out, p.tensor.size());
      io::write_values<T>(out, p.tensor.data());
    }
    const auto caches = model.caches();
    io::write_u64(out, caches.size());
    for (const auto* c : caches) c->save(out);
    opt_.save(out);
    out.flush();
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void Trainer<T>::load(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const CheckpointInfo info = read_header(in);
  if (info.precision != (sizeof(T) == 8 ? Precision::Float64 : Precision::Float32)) {
    throw ConfigError("checkpoint precision does not match the requested precision");
  }
  if (structure_of(info.config) != structure_of(cfg_)) {
    throw ConfigError("checkpoint was written for a different model or task configuration");
  }
  const std::string stream_state = io::read_string(in);
  const std::string dropout_state = io::read_string(in);
  auto params = model_.parameters_without_caches();
  if (io::read_u64(in) != params.size()) throw IoError("checkpoint parameter count does not match the model");
  for (auto& p : params) {
    const std::string name = io::read_string(in);
    if (name != p.name) throw IoError("checkpoint parameter '" + name + "' where '" + p.name + "' was expected");
    if (io::read_u64(in) != p.tensor.size()) throw IoError("checkpoint parameter '" + name + "' has the wrong size");
    io::read_values<T>(in, p.tensor.data());
  }
  auto caches = model_.caches();
  if (io::read_u64(in) != caches.size()) throw IoError("checkpoint cache count does not match the model");
  for (auto* c : caches) c->load(in);
  opt_.load(in);
  stream_->set_rng_state(stream_state);
  model_.dropout_rng().set_state(dropout_state);
  step_ = info.step;
}

template void Trainer<float>::save(const std::filesystem::path&) const;
template void Trainer<double>::save(const std::filesystem::path&) const;
template void Trainer<float>::load(const std::filesystem::path&);
template void Trainer<double>::load(const std::filesystem::path&);

}  // namespace grc
