#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "grc/error.hpp"
#include "grc/oracle.hpp"

using namespace grc;

TEST_SUITE("oracle") {

TEST_CASE("finite differences of simple functions") {
  const auto sq = oracle::finite_diff_grad([](const std::vector<double>& t) { return t[0] * t[0]; }, {3.0});
  CHECK(std::abs(sq[0] - 6.0) < 1e-8);
  const auto lin = oracle::finite_diff_grad(
      [](const std::vector<double>& t) { return 2.0 * t[0] - 5.0 * t[1] + 0.5 * t[2]; }, {0.3, -1.0, 7.0});
  CHECK(std::abs(lin[0] - 2.0) < 1e-9);
  CHECK(std::abs(lin[1] + 5.0) < 1e-9);
  CHECK(std::abs(lin[2] - 0.5) < 1e-9);
}

TEST_CASE("non-finite objectives name the coordinate") {
  try {
    oracle::finite_diff_grad(
        [](const std::vector<double>& t) { return t[1] > 1.0 ? std::numeric_limits<double>::infinity() : 0.0; },
        {0.0, 1.0});
    FAIL("expected an OracleError");
  } catch (const OracleError& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
}

TEST_CASE("relative error is norm-wise with a floor") {
  CHECK(oracle::relative_error({1.0, 0.0}, {1.0, 0.0}) == 0.0);
  CHECK(oracle::relative_error({3.0, 4.0}, {3.0, 4.0 + 5e-6}) == doctest::Approx(1e-6).epsilon(1e-3));
  CHECK(oracle::relative_error({0.0}, {1e-14}) == doctest::Approx(1e-2));
  CHECK(oracle::max_abs_error({1.0, 2.0}, {1.5, 1.0}) == 1.0);
}

TEST_CASE("reference step enforces its size caps") {
  oracle::RefInstance in = oracle::random_instance(1, 1, 2, 2, 4, 2, 2);
  CHECK_NOTHROW(oracle::reference_grc_step(in));
  in.B = 5;
  CHECK_THROWS_AS(oracle::reference_grc_step(in), OracleError);
  CHECK_THROWS_AS(oracle::reference_grc_step(oracle::random_instance(1, 1, 2, 2, 16, 8, 2)), OracleError);
}

TEST_CASE("reference cache update is a convex combination averaged over the batch") {
  const oracle::RefInstance in = oracle::random_instance(4, 3, 2, 2, 4, 2, 2);
  const oracle::RefResult r = oracle::reference_grc_step(in);
  const std::size_t n = in.Tm * in.Dm;
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t b = 0; b < in.B; ++b) {
      const std::size_t k = b * n + i;
      const double expect = (1.0 - r.update[k]) * in.cache[i] + r.update[k] * r.cand[k];
      CHECK(std::abs(r.items[k] - expect) < 1e-15);
      mean += r.items[k] / static_cast<double>(in.B);
    }
    CHECK(std::abs(r.cache[i] - mean) < 1e-15);
  }
}

TEST_CASE("library and reference agree on random instances") {
  const oracle::AgreementReport r = oracle::check_agreement(oracle::TinySizes{}, 50, 3);
  CHECK(r.pass);
  CHECK(r.max_out < 1e-10);
}

TEST_CASE("capture and apply round-trip the layer") {
  oracle::RefInstance in = oracle::random_instance(8, 1, 2, 2, 4, 2, 2);
  GrcAttention<double> layer(oracle::instance_dims(in), 1);
  oracle::apply_instance(in, layer);
  const oracle::RefInstance back = oracle::capture_instance(layer, in.x, 1, 2);
  CHECK(back.w_u == in.w_u);
  CHECK(back.w_qm == in.w_qm);
  CHECK(back.w_vm == in.w_vm);
  CHECK(back.lambda == in.lambda);
  CHECK(back.cache == in.cache);
}

TEST_CASE("gradcheck reports cover every parameter") {
  const oracle::TinySizes s;
  const auto reports = oracle::gradcheck_tiny(s, 5);
  Model<double> m(oracle::tiny_model_config(s), 5);
  CHECK(reports.size() == m.parameters().size());
  for (const auto& r : reports) CHECK(r.pass);
  std::ostringstream csv;
  oracle::write_reports_csv(csv, reports);
  CHECK(csv.str().rfind("parameter,count,rel_err,abs_err,pass\n", 0) == 0);
}

}  // TEST_SUITE
