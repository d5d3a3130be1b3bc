#include <doctest.h>

#include <cmath>

#include "../support/reduce.hpp"
#include "dynq/adapter/adapter.hpp"
#include "dynq/tensorcore/errors.hpp"
#include "dynq/tensorcore/gradcheck.hpp"

using namespace dynq;
using namespace dynq::adapter;

namespace {

Tensor random_features(Rng& rng, std::size_t frames, std::size_t dim) {
  Tensor t = Tensor::matrix(frames, dim);
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

AdapterConfig tiny_config() {
  AdapterConfig c;
  c.d_audio = 3;
  c.d_model = 4;
  c.heads = 2;
  c.ffn = 6;
  c.vocab = 3;
  c.n_layers = 1;
  c.max_frames = 16;
  return c;
}

void set_identity_projection(ParameterSet& p, const std::string& name, std::size_t d) {
  p.value(name + ".w") = Tensor::identity(d);
  p.value(name + ".b") = Tensor::matrix(1, d);
}

}  // namespace

TEST_CASE("adapter config validation") {
  AdapterConfig c;
  CHECK_NOTHROW(c.validate());
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = AdapterConfig{};
  c.ffn = 0;
  CHECK_THROWS_AS(init_adapter(c, 1), ParameterError);
}

TEST_CASE("enhance") {
  Rng rng(3);
  SUBCASE("no layers is a projection") {
    AdapterConfig c;
    c.n_layers = 0;
    ParameterSet p = init_adapter(c, 5);
    const Tensor x = random_features(rng, 7, c.d_audio);
    Tape tape;
    const Tensor out = enhance(tape, p, c, x).value();
    Tensor expected = matmul(x, p.value("adapter.proj.w"));
    for (std::size_t r = 0; r < 7; ++r)
      for (std::size_t k = 0; k < c.d_model; ++k) expected(r, k) += p.value("adapter.proj.b")[k];
    CHECK(max_abs_diff(out, expected) == 0.0);
  }
  SUBCASE("output keeps every frame") {
    AdapterConfig c;
    ParameterSet p = init_adapter(c, 5);
    for (std::size_t frames : {1, 5, 50}) {
      Tape tape;
      const Var out = enhance(tape, p, c, random_features(rng, frames, c.d_audio));
      CHECK(out.rows() == frames);
      CHECK(out.cols() == c.d_model);
      CHECK(out.value().all_finite());
    }
  }
  SUBCASE("width and length errors") {
    AdapterConfig c;
    ParameterSet p = init_adapter(c, 5);
    Tape tape;
    CHECK_THROWS_AS(enhance(tape, p, c, Tensor::matrix(4, c.d_audio + 1)), DimensionError);
    CHECK_THROWS_AS(enhance(tape, p, c, Tensor::matrix(c.max_frames + 1, c.d_audio)),
                    DimensionError);
  }
  SUBCASE("gradient check through one layer") {
    const AdapterConfig c = tiny_config();
    ParameterSet p = init_adapter(c, 8);
    for (auto& [name, param] : p) {
      if (name.find("asr") != std::string::npos || name.find("xattn") != std::string::npos) {
        param.frozen = true;
      }
      if (name == "adapter.pos") {
        for (auto& v : param.value.values()) v = 0.1 * rng.normal();
      }
    }
    const Tensor x = random_features(rng, 3, c.d_audio);
    auto fn = [&](Tape& t, ParameterSet& ps) {
      return testing::random_readout(t, enhance(t, ps, c, x), 99);
    };
    const GradCheckReport report = grad_check(fn, p);
    CHECK(report.max_rel_error <= 1e-4);
  }
}

TEST_CASE("asr_head") {
  AdapterConfig c;
  CHECK(c.logit_scale_init == 2.3026);
  ParameterSet p = init_adapter(c, 2);
  CHECK(p.value("adapter.asr.scale").item() == 2.3026);
  Rng rng(1);
  const Tensor x = random_features(rng, 9, c.d_audio);

  Tape tape;
  const Tensor logp = asr_head(tape, p, c, enhance(tape, p, c, x)).value();
  REQUIRE(logp.cols() == c.vocab + 1);
  for (std::size_t t = 0; t < logp.rows(); ++t) {
    CHECK(std::abs(log_sum_exp({logp.row(t), logp.cols()})) <= 1e-9);
  }

  p.value("adapter.asr.w").fill(0.0);
  Tape tape2;
  const Tensor uniform = asr_head(tape2, p, c, enhance(tape2, p, c, x)).value();
  for (double v : uniform.values()) {
    CHECK(std::abs(v + std::log(static_cast<double>(c.vocab + 1))) < 1e-12);
  }
}

TEST_CASE("asr head tying copies embedding rows") {
  AdapterConfig c;
  Rng rng(4);
  Tensor emb = Tensor::matrix(29, c.d_model);
  for (auto& v : emb.values()) v = rng.normal();
  ParameterSet p = init_adapter(c, 3, &emb);
  const Tensor& w = p.value("adapter.asr.w");
  for (std::size_t k = 0; k < c.vocab; ++k)
    for (std::size_t d = 0; d < c.d_model; ++d) CHECK(w(d, k) == emb(k, d));
  CHECK_FALSE(p.at("adapter.asr.w").frozen);

  c.tie_asr_head = false;
  ParameterSet untied = init_adapter(c, 3, &emb);
  CHECK(untied.value("adapter.asr.w")(0, 0) != emb(0, 0));

  Tensor narrow = Tensor::matrix(29, 8);
  c.tie_asr_head = true;
  CHECK_THROWS_AS(init_adapter(c, 3, &narrow), DimensionError);
}

TEST_CASE("cross_attend") {
  SUBCASE("a single key takes all the weight") {
    AdapterConfig c;
    ParameterSet p = init_adapter(c, 6);
    Rng rng(2);
    Tape tape;
    const Tensor kv = random_features(rng, 1, c.d_model);
    const Var q = tape.constant(random_features(rng, 3, c.d_model));
    const FusionOutput out = cross_attend(tape, p, c, q, tape.constant(kv));
    for (double w : out.weights.values()) CHECK(w == 1.0);
    Tensor value = matmul(kv, p.value("adapter.xattn.v.w"));
    for (std::size_t k = 0; k < c.d_model; ++k) value[k] += p.value("adapter.xattn.v.b")[k];
    Tensor projected = matmul(value, p.value("adapter.xattn.o.w"));
    for (std::size_t k = 0; k < c.d_model; ++k) projected[k] += p.value("adapter.xattn.o.b")[k];
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t k = 0; k < c.d_model; ++k)
        CHECK(std::abs(out.pre_residual.value()(r, k) - projected[k]) < 1e-12);
  }
  SUBCASE("identical keys average their values") {
    AdapterConfig c;
    c.d_model = 4;
    c.heads = 2;
    ParameterSet p = init_adapter(c, 6);
    for (const char* n : {"q", "k", "v", "o"})
      set_identity_projection(p, std::string("adapter.xattn.") + n, 4);
    // Key projection drops the last coordinate, where the two rows differ.
    p.value("adapter.xattn.k.w")(3, 3) = 0.0;
    Tape tape;
    const Tensor kv = Tensor::from_rows({{0.3, -0.2, 0.5, 1.0}, {0.3, -0.2, 0.5, -3.0}});
    const FusionOutput out = cross_attend(tape, p, c, tape.constant(Tensor::from_rows({{1.0, 2.0, -1.0, 0.5}})),
                                          tape.constant(kv));
    CHECK(out.weights(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    const Tensor& pre = out.pre_residual.value();
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(std::abs(pre(0, k) - 0.5 * (kv(0, k) + kv(1, k))) < 1e-15);
    }
  }
  SUBCASE("hand evaluation with identity projections") {
    AdapterConfig c;
    c.d_model = 2;
    c.heads = 1;
    ParameterSet p = init_adapter(c, 6);
    for (const char* n : {"q", "k", "v", "o"})
      set_identity_projection(p, std::string("adapter.xattn.") + n, 2);
    const Tensor q = Tensor::from_rows({{1.0, 0.0}, {0.5, -1.0}});
    const Tensor kv = Tensor::from_rows({{1.0, 1.0}, {0.0, 2.0}, {-1.0, 0.5}});
    Tape tape;
    const FusionOutput out = cross_attend(tape, p, c, tape.constant(q), tape.constant(kv));
    const double s = 1.0 / std::sqrt(2.0);
    for (std::size_t i = 0; i < 2; ++i) {
      double logits[3];
      double z = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        logits[j] = s * (q(i, 0) * kv(j, 0) + q(i, 1) * kv(j, 1));
        z += std::exp(logits[j]);
      }
      for (std::size_t k = 0; k < 2; ++k) {
        double expected = 0.0;
        for (std::size_t j = 0; j < 3; ++j) expected += std::exp(logits[j]) / z * kv(j, k);
        CHECK(std::abs(out.pre_residual.value()(i, k) - expected) < 1e-14);
        CHECK(std::abs(out.z.value()(i, k) - (expected + q(i, k))) < 1e-14);
      }
    }
  }
  SUBCASE("width mismatch") {
    AdapterConfig c;
    ParameterSet p = init_adapter(c, 6);
    Tape tape;
    CHECK_THROWS_AS(cross_attend(tape, p, c, tape.constant(Tensor::matrix(2, 8)),
                                 tape.constant(Tensor::matrix(3, c.d_model))),
                    DimensionError);
  }
  SUBCASE("gradient check") {
    const AdapterConfig c = tiny_config();
    ParameterSet p = init_adapter(c, 12);
    Rng rng(12);
    p.add("q_in", random_features(rng, 2, c.d_model));
    p.add("kv_in", random_features(rng, 5, c.d_model));
    for (auto& [name, param] : p) {
      if (name.rfind("adapter.xattn", 0) != 0 && name.find("_in") == std::string::npos) {
        param.frozen = true;
      }
    }
    auto fn = [&](Tape& t, ParameterSet& ps) {
      const FusionOutput out = cross_attend(t, ps, c, t.param(ps, "q_in"), t.param(ps, "kv_in"));
      return testing::random_readout(t, out.z, 5);
    };
    CHECK(grad_check(fn, p).max_rel_error <= 1e-4);
  }
}

TEST_CASE("adapter_forward") {
  AdapterConfig c;
  ParameterSet p = init_adapter(c, 21);
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_features(rng, 1 + rng.index(30), c.d_audio);
    Tape tape;
    const AdapterOutput out = adapter_forward(tape, p, c, x);
    CHECK(out.selection.size() >= 1);
    CHECK(out.fusion.z.rows() == out.selection.size());
    CHECK(out.fusion.z.rows() <= x.rows());
    CHECK(out.fusion.z.cols() == c.d_model);
    CHECK(out.fusion.z.value().all_finite());
    for (std::size_t r = 0; r < out.fusion.weights.rows(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < out.fusion.weights.cols(); ++j) s += out.fusion.weights(r, j);
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    Tape again;
    const AdapterOutput out2 = adapter_forward(again, p, c, x);
    CHECK(bit_equal(out.fusion.z.value(), out2.fusion.z.value()));
    CHECK(out.selection.indices == out2.selection.indices);

    Tape fixed;
    const AdapterOutput out3 = adapter_forward(fixed, p, c, x, out.selection.indices);
    CHECK(bit_equal(out.fusion.z.value(), out3.fusion.z.value()));
  }
}

TEST_CASE("linear baseline") {
  ParameterSet p = init_linear_baseline(16, 64, 3);
  Rng rng(3);
  for (std::size_t frames : {1, 7, 40}) {
    Tape tape;
    CHECK(linear_baseline_forward(tape, p, random_features(rng, frames, 16)).rows() == frames);
  }
  p.value("linear.w").fill(0.0);
  Tape tape;
  for (double v : linear_baseline_forward(tape, p, random_features(rng, 4, 16)).value().values()) {
    CHECK(v == 0.0);
  }
  Tape bad;
  CHECK_THROWS_AS(linear_baseline_forward(bad, p, Tensor::matrix(3, 15)), DimensionError);

  ParameterSet q = init_linear_baseline(4, 5, 9);
  const Tensor x = random_features(rng, 6, 4);
  auto fn = [&](Tape& t, ParameterSet& ps) {
    return testing::random_readout(t, linear_baseline_forward(t, ps, x), 2);
  };
  CHECK(grad_check(fn, q).max_rel_error <= 1e-6);
}
