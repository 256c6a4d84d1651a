#include "grc/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

#include "grc/error.hpp"

namespace grc::oracle {

double relative_error(const std::vector<double>& a, const std::vector<double>& n, double delta) {
  if (a.size() != n.size()) throw OracleError("relative_error: size mismatch");
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), delta});
}

double max_abs_error(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw OracleError("max_abs_error: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& theta, double eps) {
  if (!(eps > 0.0)) throw OracleError("finite_diff_grad: eps must be positive");
  std::vector<double> probe = theta;
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + eps;
    const double up = f(probe);
    probe[i] = theta[i] - eps;
    const double down = f(probe);
    probe[i] = theta[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

std::vector<GradCheckReport> gradcheck_model(Model<double>& model, const TaskBatch& batch,
                                             const GradCheckOptions& opts) {
  if (model.config().dropout != 0.0) throw OracleError("gradcheck needs dropout = 0");
  const auto caches = model.snapshot_caches();
  auto params = model.parameters();

  model.zero_grad();
  {
    Tape tape;
    ForwardResult<double> r;
    {
      TapeScope scope(tape);
      r = model.forward(batch, true);
    }
    tape.backward(r.loss);
  }
  model.restore_caches(caches);

  auto loss_at = [&]() {
    const double l = model.forward(batch, true).loss.item();
    model.restore_caches(caches);
    return l;
  };

  std::vector<GradCheckReport> reports;
  for (auto& p : params) {
    if (p.tensor.size() == 0) continue;
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    const std::vector<double> theta(p.tensor.data().begin(), p.tensor.data().end());
    const std::vector<double> numeric = finite_diff_grad(
        [&](const std::vector<double>& v) {
          p.tensor.assign(v);
          return loss_at();
        },
        theta, opts.eps);
    p.tensor.assign(theta);
    GradCheckReport rep;
    rep.name = p.name;
    rep.count = theta.size();
    rep.max_rel = relative_error(analytic, numeric);
    rep.max_abs = max_abs_error(analytic, numeric);
    rep.pass = rep.max_rel < opts.tolerance;
    reports.push_back(rep);
  }
  model.zero_grad();
  return reports;
}

ModelConfig tiny_model_config(const TinySizes& s) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.d_model = s.D;
  cfg.heads = s.H;
  cfg.cache_len = s.Tm;
  cfg.cache_ratio = s.ratio;
  cfg.ffn_mult = 2;
  cfg.vocab = 5;
  cfg.max_len = s.T;
  cfg.head = TaskHead::Classification;
  cfg.num_classes = 3;
  return cfg;
}

TaskBatch tiny_batch(const TinySizes& s, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  TaskBatch b;
  b.batch = s.B;
  b.length = s.T;
  for (std::size_t i = 0; i < s.B * s.T; ++i) b.tokens.push_back(static_cast<int>(gen() % 5));
  for (std::size_t i = 0; i < s.B; ++i) b.labels.push_back(static_cast<int>(gen() % 3));
  b.lengths.assign(s.B, s.T);
  return b;
}

std::vector<GradCheckReport> gradcheck_tiny(const TinySizes& s, std::uint64_t seed, const GradCheckOptions& opts) {
  Model<double> model(tiny_model_config(s), seed);
  std::mt19937_64 gen(seed ^ 0x9e3779b97f4a7c15ull);
  auto draw = [&] { return 2.0 * (static_cast<double>(gen() >> 11) * 0x1.0p-53) - 1.0; };
  for (auto& block : model.blocks()) {
    GrcCache<double>* cache = block.attention().cache();
    if (!cache) continue;
    std::vector<double> prev(cache->state().size());
    for (double& v : prev) v = draw();
    cache->set_state(prev);
    for (double& l : block.attention().lambda().data()) l = draw();
  }
  return gradcheck_model(model, tiny_batch(s, seed + 1), opts);
}

void print_reports(std::ostream& os, const std::vector<GradCheckReport>& reports) {
  std::size_t width = 9;
  for (const auto& r : reports) width = std::max(width, r.name.size());
  os << std::left << std::setw(static_cast<int>(width)) << "parameter" << "  " << std::setw(6) << "count"
     << "  " << std::setw(12) << "rel_err" << "  " << std::setw(12) << "abs_err" << "  result\n";
  for (const auto& r : reports) {
    os << std::left << std::setw(static_cast<int>(width)) << r.name << "  " << std::setw(6) << r.count << "  "
       << std::scientific << std::setprecision(3) << std::setw(12) << r.max_rel << "  " << std::setw(12) << r.max_abs
       << std::defaultfloat << "  " << (r.pass ? "pass" : "FAIL") << '\n';
  }
}

void write_reports_csv(std::ostream& os, const std::vector<GradCheckReport>& reports) {
  os << "parameter,count,rel_err,abs_err,pass\n";
  os << std::setprecision(17);
  for (const auto& r : reports) {
    os << r.name << ',' << r.count << ',' << r.max_rel << ',' << r.max_abs << ',' << (r.pass ? 1 : 0) << '\n';
  }
}

namespace {

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void need(const std::vector<double>& v, std::size_t n, const char* what) {
  if (v.size() != n) {
    throw OracleError(std::string("reference instance: ") + what + " has " + std::to_string(v.size()) +
                      " values, expected " + std::to_string(n));
  }
}

// softmax of s in place
void softmax(std::vector<double>& s) {
  double m = s[0];
  for (double v : s) m = std::max(m, v);
  double z = 0.0;
  for (double& v : s) {
    v = std::exp(v - m);
    z += v;
  }
  for (double& v : s) v /= z;
}

}  // namespace

RefResult reference_grc_step(const RefInstance& in) {
  const std::size_t B = in.B, T = in.T, Tm = in.Tm, D = in.D, Dm = in.Dm, H = in.H;
  if (B == 0 || T == 0 || Tm == 0 || D == 0 || Dm == 0 || H == 0) throw OracleError("reference: zero size");
  if (B > 4 || T > 4 || Tm > 4 || D > 8) throw OracleError("reference: sizes exceed B, T, Tm <= 4, D <= 8");
  if (Dm > D || D % H != 0 || Dm % H != 0) throw OracleError("reference: inconsistent widths");
  need(in.x, B * T * D, "x");
  need(in.cache, Tm * Dm, "cache");
  for (const auto* w : {&in.w_u, &in.w_r, &in.w_c}) need(*w, 2 * Dm * Dm, "gate weight");
  for (const auto* b : {&in.b_u, &in.b_r, &in.b_c}) need(*b, Dm, "gate bias");
  for (const auto* w : {&in.w_q, &in.w_k, &in.w_v, &in.w_o}) need(*w, D * D, "projection");
  for (const auto* b : {&in.b_q, &in.b_v, &in.b_o}) need(*b, D, "projection bias");
  need(in.w_qm, Dm * Dm, "cached query");
  need(in.b_qm, Dm, "cached query bias");
  need(in.w_km, Dm * Dm, "cached key");
  need(in.w_vm, Dm * D, "cached value");
  need(in.b_vm, D, "cached value bias");
  need(in.lambda, H, "lambda");

  RefResult res;
  const std::vector<double>& prev = in.cache;

  // Interpolated slice, [B, Tm, Dm].
  std::vector<double> xi(B * Tm * Dm);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < Tm; ++j) {
      double pos = 0.0;
      if (T > 1 && Tm > 1) pos = static_cast<double>(j) * static_cast<double>(T - 1) / static_cast<double>(Tm - 1);
      const std::size_t lo = std::min(static_cast<std::size_t>(std::floor(pos)), T - 1);
      const std::size_t hi = std::min(lo + 1, T - 1);
      const double f = pos - static_cast<double>(lo);
      for (std::size_t c = 0; c < Dm; ++c) {
        const double a = in.x[(b * T + lo) * D + c];
        const double z = in.x[(b * T + hi) * D + c];
        xi[(b * Tm + j) * Dm + c] = f == 0.0 ? a : (1.0 - f) * a + f * z;
      }
    }

  if (in.training) {
    res.update.assign(B * Tm * Dm, 0.0);
    res.reset.assign(B * Tm * Dm, 0.0);
    res.cand.assign(B * Tm * Dm, 0.0);
    res.items.assign(B * Tm * Dm, 0.0);
    res.cache.assign(Tm * Dm, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < Tm; ++j) {
        const double* xr = &xi[(b * Tm + j) * Dm];
        const double* cr = &prev[j * Dm];
        for (std::size_t c = 0; c < Dm; ++c) {
          double u = in.b_u[c], r = in.b_r[c];
          for (std::size_t i = 0; i < Dm; ++i) {
            u += xr[i] * in.w_u[i * Dm + c] + cr[i] * in.w_u[(Dm + i) * Dm + c];
            r += xr[i] * in.w_r[i * Dm + c] + cr[i] * in.w_r[(Dm + i) * Dm + c];
          }
          res.update[(b * Tm + j) * Dm + c] = logistic(u);
          res.reset[(b * Tm + j) * Dm + c] = logistic(r);
        }
        for (std::size_t c = 0; c < Dm; ++c) {
          double v = in.b_c[c];
          for (std::size_t i = 0; i < Dm; ++i) {
            v += xr[i] * in.w_c[i * Dm + c];
            v += res.reset[(b * Tm + j) * Dm + i] * cr[i] * in.w_c[(Dm + i) * Dm + c];
          }
          res.cand[(b * Tm + j) * Dm + c] = v;
          const double g = res.update[(b * Tm + j) * Dm + c];
          res.items[(b * Tm + j) * Dm + c] = (1.0 - g) * cr[c] + g * v;
        }
      }
    for (std::size_t k = 0; k < Tm * Dm; ++k) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) s += res.items[b * Tm * Dm + k];
      res.cache[k] = s / static_cast<double>(B);
    }
  } else {
    res.cache = prev;
  }
  const std::vector<double>& C = res.cache;

  const std::size_t dh = D / H, dmh = Dm / H;
  auto project = [](const std::vector<double>& src, std::size_t rows, std::size_t in_w, std::size_t stride,
                    const std::vector<double>& w, const std::vector<double>* bias, std::size_t out_w) {
    std::vector<double> y(rows * out_w);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < out_w; ++c) {
        double v = bias ? (*bias)[c] : 0.0;
        for (std::size_t i = 0; i < in_w; ++i) v += src[r * stride + i] * w[i * out_w + c];
        y[r * out_w + c] = v;
      }
    return y;
  };

  const std::vector<double> q = project(in.x, B * T, D, D, in.w_q, &in.b_q, D);
  const std::vector<double> k = project(in.x, B * T, D, D, in.w_k, nullptr, D);
  const std::vector<double> v = project(in.x, B * T, D, D, in.w_v, &in.b_v, D);
  // Cached queries read the un-interpolated slice: the first Dm channels of x.
  const std::vector<double> qm = project(in.x, B * T, Dm, D, in.w_qm, &in.b_qm, Dm);
  const std::vector<double> km = project(C, Tm, Dm, Dm, in.w_km, nullptr, Dm);
  const std::vector<double> vm = project(C, Tm, Dm, Dm, in.w_vm, &in.b_vm, D);

  res.o_self.assign(B * H * T * dh, 0.0);
  res.o_mem.assign(B * H * T * dh, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> s(T);
        for (std::size_t u = 0; u < T; ++u) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[(b * T + t) * D + h * dh + e] * k[(b * T + u) * D + h * dh + e];
          s[u] = dot / std::sqrt(static_cast<double>(dh));
        }
        softmax(s);
        for (std::size_t e = 0; e < dh; ++e) {
          double acc = 0.0;
          for (std::size_t u = 0; u < T; ++u) acc += s[u] * v[(b * T + u) * D + h * dh + e];
          res.o_self[((b * H + h) * T + t) * dh + e] = acc;
        }
        std::vector<double> sm(Tm);
        for (std::size_t j = 0; j < Tm; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dmh; ++e) dot += qm[(b * T + t) * Dm + h * dmh + e] * km[j * Dm + h * dmh + e];
          sm[j] = dot / std::sqrt(static_cast<double>(dmh));
        }
        softmax(sm);
        for (std::size_t e = 0; e < dh; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j < Tm; ++j) acc += sm[j] * vm[j * D + h * dh + e];
          res.o_mem[((b * H + h) * T + t) * dh + e] = acc;
        }
      }

  std::vector<double> mixed(B * T * D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      const double a = logistic(in.lambda[h]);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t e = 0; e < dh; ++e) {
          const std::size_t src = ((b * H + h) * T + t) * dh + e;
          mixed[(b * T + t) * D + h * dh + e] = a * res.o_mem[src] + (1.0 - a) * res.o_self[src];
        }
    }
  res.out = project(mixed, B * T, D, D, in.w_o, &in.b_o, D);
  return res;
}

RefInstance random_instance(std::uint64_t seed, std::size_t B, std::size_t T, std::size_t Tm, std::size_t D,
                            std::size_t Dm, std::size_t H, double scale) {
  std::mt19937_64 gen(seed);
  auto fill = [&](std::vector<double>& v, std::size_t n) {
    v.resize(n);
    for (double& x : v) x = scale * (2.0 * (static_cast<double>(gen() >> 11) * 0x1.0p-53) - 1.0);
  };
  RefInstance in;
  in.B = B, in.T = T, in.Tm = Tm, in.D = D, in.Dm = Dm, in.H = H;
  fill(in.x, B * T * D);
  fill(in.cache, Tm * Dm);
  fill(in.w_u, 2 * Dm * Dm);
  fill(in.w_r, 2 * Dm * Dm);
  fill(in.w_c, 2 * Dm * Dm);
  fill(in.b_u, Dm);
  fill(in.b_r, Dm);
  fill(in.b_c, Dm);
  fill(in.w_q, D * D);
  fill(in.w_k, D * D);
  fill(in.w_v, D * D);
  fill(in.w_o, D * D);
  fill(in.b_q, D);
  fill(in.b_v, D);
  fill(in.b_o, D);
  fill(in.w_qm, Dm * Dm);
  fill(in.b_qm, Dm);
  fill(in.w_km, Dm * Dm);
  fill(in.w_vm, Dm * D);
  fill(in.b_vm, D);
  fill(in.lambda, H);
  return in;
}

namespace {

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

void put(Tensor<double>& t, const std::vector<double>& v, const char* what) {
  if (t.size() != v.size()) throw OracleError(std::string("apply_instance: size mismatch for ") + what);
  t.assign(v);
}

}  // namespace

AttentionDims instance_dims(const RefInstance& in) {
  AttentionDims d;
  d.d_model = in.D;
  d.heads = in.H;
  d.cache_len = in.Tm;
  d.ratio = static_cast<double>(in.Dm) / static_cast<double>(in.D);
  d.use_cache = true;
  return d;
}

RefInstance capture_instance(GrcAttention<double>& layer, const std::vector<double>& x, std::size_t B,
                             std::size_t T) {
  GrcCache<double>* cache = layer.cache();
  if (!cache) throw OracleError("capture_instance: layer has no cache");
  RefInstance in;
  in.B = B, in.T = T, in.Tm = cache->length(), in.D = layer.dims().d_model, in.Dm = cache->width();
  in.H = layer.dims().heads;
  in.x = x;
  in.cache = values(cache->state());
  in.w_u = values(cache->w_update()), in.b_u = values(cache->b_update());
  in.w_r = values(cache->w_reset()), in.b_r = values(cache->b_reset());
  in.w_c = values(cache->w_candidate()), in.b_c = values(cache->b_candidate());
  in.w_q = values(layer.query().weight), in.b_q = values(layer.query().bias);
  in.w_k = values(layer.key().weight);
  in.w_v = values(layer.value().weight), in.b_v = values(layer.value().bias);
  in.w_o = values(layer.output().weight), in.b_o = values(layer.output().bias);
  in.w_qm = values(layer.mem_query().weight), in.b_qm = values(layer.mem_query().bias);
  in.w_km = values(layer.mem_key().weight);
  in.w_vm = values(layer.mem_value().weight), in.b_vm = values(layer.mem_value().bias);
  in.lambda = values(layer.lambda());
  return in;
}

void apply_instance(const RefInstance& in, GrcAttention<double>& layer) {
  GrcCache<double>* cache = layer.cache();
  if (!cache) throw OracleError("apply_instance: layer has no cache");
  cache->set_state(in.cache);
  put(cache->w_update(), in.w_u, "w_u");
  put(cache->b_update(), in.b_u, "b_u");
  put(cache->w_reset(), in.w_r, "w_r");
  put(cache->b_reset(), in.b_r, "b_r");
  put(cache->w_candidate(), in.w_c, "w_c");
  put(cache->b_candidate(), in.b_c, "b_c");
  put(layer.query().weight, in.w_q, "w_q");
  put(layer.query().bias, in.b_q, "b_q");
  put(layer.key().weight, in.w_k, "w_k");
  put(layer.value().weight, in.w_v, "w_v");
  put(layer.value().bias, in.b_v, "b_v");
  put(layer.output().weight, in.w_o, "w_o");
  put(layer.output().bias, in.b_o, "b_o");
  put(layer.mem_query().weight, in.w_qm, "w_qm");
  put(layer.mem_query().bias, in.b_qm, "b_qm");
  put(layer.mem_key().weight, in.w_km, "w_km");
  put(layer.mem_value().weight, in.w_vm, "w_vm");
  put(layer.mem_value().bias, in.b_vm, "b_vm");
  put(layer.lambda(), in.lambda, "lambda");
}

AgreementReport check_agreement(const TinySizes& s, std::size_t instances, std::uint64_t seed, double tol) {
  AgreementReport rep;
  const std::size_t dm = cache_width(s.D, s.ratio);
  for (std::size_t i = 0; i < instances; ++i) {
    const RefInstance in = random_instance(seed + i, s.B, s.T, s.Tm, s.D, dm, s.H);
    const RefResult ref = reference_grc_step(in);
    GrcAttention<double> layer(instance_dims(in), seed + i);
    apply_instance(in, layer);
    const Tensor<double> x({s.B, s.T, s.D}, in.x);
    const Tensor<double> out = layer.forward(x, true);
    const Tensor<double> self = layer.self_heads(x);
    const Tensor<double> mem = layer.cached_heads(slice_channels(x, s.ratio), layer.cache()->state());
    rep.max_out = std::max(rep.max_out, max_abs_error(values(out), ref.out));
    rep.max_cache = std::max(rep.max_cache, max_abs_error(values(layer.cache()->state()), ref.cache));
    rep.max_self = std::max(rep.max_self, max_abs_error(values(self), ref.o_self));
    rep.max_mem = std::max(rep.max_mem, max_abs_error(values(mem), ref.o_mem));
    ++rep.instances;
  }
  rep.pass = std::max({rep.max_out, rep.max_cache, rep.max_self, rep.max_mem}) < tol;
  return rep;
}

}  // namespace grc::oracle
