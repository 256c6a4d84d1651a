#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "grc/attention.hpp"
#include "grc/batch.hpp"
#include "grc/model.hpp"

// Independent verification: central finite differences, and a scalar-loop
// re-derivation of one GRC attention step (slice, interpolate, gates, cache
// update, batch mean, both attention branches, head mix, output projection).
// The reference step uses plain std::vector<double> and shares no code with
// the tensor library.

namespace grc::oracle {

/// Documented floor for relative errors.
inline constexpr double kRelDelta = 1e-12;

/// ||a - n|| / max(||a||, ||n||, delta) over the whole tensor.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                      double delta = kRelDelta);
double max_abs_error(const std::vector<double>& a, const std::vector<double>& b);

/// (f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps) for every coordinate.
/// Throws OracleError naming the coordinate when f is not finite.
std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& theta, double eps = 1e-5);

struct GradCheckReport {
  std::string name;
  std::size_t count = 0;
  double max_rel = 0.0;
  double max_abs = 0.0;
  bool pass = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-5;
};

/// Every parameter of a 64-bit model (gate weights included) against finite
/// differences of the training loss on `batch`. Cache state and step are
/// restored before each evaluation, so all evaluations see the same C_prev.
std::vector<GradCheckReport> gradcheck_model(Model<double>& model, const TaskBatch& batch,
                                             const GradCheckOptions& opts = {});

/// Sizes of the tiny single-block classifier used by gradcheck runs.
struct TinySizes {
  std::size_t B = 1, T = 2, Tm = 2, D = 4, H = 2;
  double ratio = 0.5;
};

ModelConfig tiny_model_config(const TinySizes& s);
/// Random tokens and labels for the tiny classifier.
TaskBatch tiny_batch(const TinySizes& s, std::uint64_t seed);
/// Builds the tiny model, gives every cache a random non-zero C_prev and
/// every lambda a random value, then runs gradcheck_model.
std::vector<GradCheckReport> gradcheck_tiny(const TinySizes& s, std::uint64_t seed, const GradCheckOptions& opts = {});

void print_reports(std::ostream& os, const std::vector<GradCheckReport>& reports);
void write_reports_csv(std::ostream& os, const std::vector<GradCheckReport>& reports);

/// One GRC attention layer and its input. Matrices are row-major [in, out]
/// and act as y = x W + b.
struct RefInstance {
  std::size_t B = 1, T = 2, Tm = 2, D = 4, Dm = 2, H = 2;
  std::vector<double> x;      // [B, T, D]
  std::vector<double> cache;  // C_{t-1}, [Tm, Dm]
  std::vector<double> w_u, b_u, w_r, b_r, w_c, b_c;  // [2Dm, Dm], [Dm]
  std::vector<double> w_q, b_q, w_k, w_v, b_v, w_o, b_o;  // [D, D], [D] (no key bias)
  std::vector<double> w_qm, b_qm, w_km, w_vm, b_vm;  // [Dm, Dm], [Dm], [Dm, Dm], [Dm, D], [D]
  std::vector<double> lambda;  // [H]
  bool training = true;
};

struct RefResult {
  std::vector<double> cache;     // C_t, [Tm, Dm] (C_{t-1} when not training)
  std::vector<double> update;    // g_u per item, [B, Tm, Dm]
  std::vector<double> reset;     // g_r per item, [B, Tm, Dm]
  std::vector<double> cand;      // C~ per item, [B, Tm, Dm]
  std::vector<double> items;     // pre-average C_t per item, [B, Tm, Dm]
  std::vector<double> o_self;    // [B, H, T, D/H]
  std::vector<double> o_mem;     // [B, H, T, D/H]
  std::vector<double> out;       // [B, T, D]
};

/// Caps: B, T, Tm <= 4 and D <= 8; larger sizes throw OracleError.
RefResult reference_grc_step(const RefInstance& in);

/// Random instance with weights and input drawn uniformly from [-scale, scale].
RefInstance random_instance(std::uint64_t seed, std::size_t B, std::size_t T, std::size_t Tm, std::size_t D,
                            std::size_t Dm, std::size_t H, double scale = 1.0);

/// Copies the layer's weights and cache state into an instance with input x.
RefInstance capture_instance(GrcAttention<double>& layer, const std::vector<double>& x, std::size_t B,
                             std::size_t T);
/// Writes the instance's weights and cache state into the layer.
void apply_instance(const RefInstance& in, GrcAttention<double>& layer);
/// AttentionDims matching an instance (ratio chosen so that round(r D) = Dm).
AttentionDims instance_dims(const RefInstance& in);

struct AgreementReport {
  std::size_t instances = 0;
  double max_out = 0.0;    // |library - reference| over outputs
  double max_cache = 0.0;  // over updated caches
  double max_self = 0.0;   // over per-head self-attention outputs
  double max_mem = 0.0;    // over per-head cached-attention outputs
  bool pass = false;
};

/// Runs the library layer and the reference step on `instances` random
/// instances of the given sizes (training mode) and records the largest
/// disagreements.
AgreementReport check_agreement(const TinySizes& s, std::size_t instances, std::uint64_t seed, double tol = 1e-10);

}  // namespace grc::oracle
