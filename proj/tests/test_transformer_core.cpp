#include <cmath>
#include <numbers>

#include "cpeft/grad_check.hpp"
#include "cpeft/transformer.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cpeft;
using testutil::uniform;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ffn_fused = 32;
  c.d_ffn_inner = 16;
  c.vocab_size = 11;
  c.max_seq = 8;
  return c;
}

template <typename S = float>
ModelInput<S> random_input(const ModelConfig& c, std::size_t batch, Rng& rng) {
  ModelInput<S> in;
  in.batch = batch;
  in.seq_len = c.max_seq;
  for (std::size_t i = 0; i < batch * c.max_seq; ++i) {
    in.token_ids.push_back(static_cast<TokenId>(rng.below(c.vocab_size)));
    in.context_ids.push_back(static_cast<ContextId>(rng.below(2)));
  }
  return in;
}

// Fills every adaptor tensor with values away from neutral.
template <typename S>
void perturb(AdaptorParams<S>& p, Rng& rng, double lo = -0.5, double hi = 0.5) {
  for (auto& [name, t] : p.named_tensors()) {
    BasicTensor<S> h = t;
    for (auto& v : h.mutable_data()) v = static_cast<S>(lo + (hi - lo) * rng.uniform());
  }
}

}  // namespace

TEST_SUITE("transformer_core") {

TEST_CASE("config validation") {
  CHECK_NOTHROW(tiny().validate());
  CHECK_NOTHROW(ModelConfig::paper().validate());
  ModelConfig c = tiny();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.d_ffn_fused = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.max_seq = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.d_model = 0;
  CHECK_THROWS_AS(init_model(c, 1), ConfigError);
}

TEST_CASE("init_model is deterministic and seeded") {
  const auto a = init_model(tiny(), 3), b = init_model(tiny(), 3), c = init_model(tiny(), 4);
  CHECK(weights_hash(a) == weights_hash(b));
  CHECK(weights_hash(a) != weights_hash(c));
  const auto na = a.named_tensors(), nb = b.named_tensors();
  for (std::size_t i = 0; i < na.size(); ++i) CHECK(testutil::bit_equal(na[i].second, nb[i].second));
  for (const auto& [name, t] : na) {
    CHECK_FALSE(t.requires_grad());
    for (float v : t.data()) REQUIRE(std::isfinite(v));
  }
  for (float v : a.layers[0].bq.data()) CHECK(v == 0.0f);
  for (float v : a.layers[1].ffn_norm.data()) CHECK(v == 1.0f);
}

TEST_CASE("init statistics are N(0, 0.02)") {
  ModelConfig c = tiny();
  c.d_model = 64;
  c.n_heads = 4;
  const auto w = init_model(c, 5);
  double s = 0, s2 = 0;
  for (float v : w.layers[0].wq.data()) {
    s += v;
    s2 += double(v) * v;
  }
  const double n = static_cast<double>(w.layers[0].wq.numel());
  CHECK(std::abs(s / n) < 0.002);
  CHECK(std::sqrt(s2 / n) == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("layout matches allocation and the paper preset sizes") {
  const auto w = init_model(tiny(), 1);
  const auto named = w.named_tensors();
  const auto layout = model_layout(tiny());
  REQUIRE(named.size() == layout.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    CHECK(named[i].first == layout[i].first);
    CHECK(named[i].second.shape() == layout[i].second);
  }
  for (const auto& [name, shape] : model_layout(ModelConfig::paper())) {
    if (name == "layers.0.wq") CHECK(shape_numel(shape) == 589824);
    if (name == "layers.0.w_up") CHECK(shape == Shape{768, 6144});
    if (name == "layers.0.w_down") CHECK(shape == Shape{3072, 768});
  }
}

TEST_CASE("rotary embedding examples") {
  const Tensor x = Tensor::from({1, 3, 4}, {1, 0, 1, 0, 1, 0, 1, 0, 0.3f, -0.7f, 2.0f, 0.5f});
  const std::vector<std::size_t> pos = {0, 5, 9};
  const Tensor y = apply_rope(x, pos, 10000.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == x[i]);
  // Pair (1, 0) at position 5: rotated by 5 * theta_i, theta_i = base^(-2i/d).
  for (std::size_t i = 0; i < 2; ++i) {
    const double theta = std::pow(10000.0, -2.0 * static_cast<double>(i) / 4.0);
    CHECK(y[4 + 2 * i] == doctest::Approx(std::cos(5 * theta)).epsilon(1e-6));
    CHECK(y[4 + 2 * i + 1] == doctest::Approx(std::sin(5 * theta)).epsilon(1e-6));
  }
  for (std::size_t p = 0; p < 3; ++p) {
    for (std::size_t i = 0; i < 2; ++i) {
      const std::size_t k = p * 4 + 2 * i;
      CHECK(std::hypot(y[k], y[k + 1]) == doctest::Approx(std::hypot(x[k], x[k + 1])).epsilon(1e-6));
    }
  }
  CHECK_THROWS_AS(apply_rope(Tensor::zeros({2, 3}), std::vector<std::size_t>{0, 1}, 10000.0), ConfigError);
}

TEST_CASE("rotary base knob") {
  ModelConfig c = tiny();
  CHECK(c.effective_rope_base() == 10000.0);
  c.rope_abf = true;
  CHECK(c.effective_rope_base() == c.rope_abf_base);
}

TEST_CASE("swiglu_ffn examples") {
  Rng rng(2);
  auto w = init_model(tiny(), 2);
  LayerWeights<float> l = w.layers[0];
  l.b_down = uniform<float>({16}, rng);
  const Tensor x = uniform<float>({3, 16}, rng);

  LayerWeights<float> closed = l;
  closed.w_up = Tensor::zeros({16, 32});
  const Tensor y0 = swiglu_ffn(x, closed);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 16; ++j) CHECK(y0[r * 16 + j] == l.b_down[j]);

  LayerWeights<float> gated = l;
  std::vector<float> bias(32, 1.0f);
  for (std::size_t j = 0; j < 16; ++j) bias[j] = -200.0f;
  gated.b_up = Tensor::from({32}, bias);
  const Tensor yg = swiglu_ffn(x, gated);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 16; ++j) CHECK(yg[r * 16 + j] == doctest::Approx(l.b_down[j]).epsilon(1e-6));

  // Direct formula in double.
  const Tensor y = swiglu_ffn(x, l);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> u(32, 0.0);
    for (std::size_t j = 0; j < 32; ++j) {
      u[j] = l.b_up[j];
      for (std::size_t k = 0; k < 16; ++k) u[j] += double(x[r * 16 + k]) * l.w_up[k * 32 + j];
    }
    for (std::size_t o = 0; o < 16; ++o) {
      double acc = l.b_down[o];
      for (std::size_t j = 0; j < 16; ++j) {
        const double g = u[j];
        acc += g / (1.0 + std::exp(-g)) * u[16 + j] * l.w_down[j * 16 + o];
      }
      CHECK(std::abs(y[r * 16 + o] - acc) <= 1e-6);
    }
  }
}

TEST_CASE("forward shapes and sequence length contract") {
  Rng rng(3);
  const auto w = init_model(tiny(), 3);
  auto in = random_input(tiny(), 2, rng);
  const auto out = forward(w, in);
  CHECK(out.logits.shape() == Shape{16, 11});
  CHECK(out.traces.empty());
  in.seq_len = 4;
  in.batch = 4;
  CHECK_THROWS(forward(w, in));
}

TEST_CASE("causality") {
  Rng rng(4);
  const auto w = init_model(tiny(), 4);
  auto adaptors = attach(AdaptorSpec{}, tiny(), 9);
  perturb(adaptors, rng);
  const auto in = random_input(tiny(), 1, rng);
  const auto base = forward(w, in, &adaptors).logits;
  for (std::size_t t = 0; t < 8; ++t) {
    auto mutated = in;
    mutated.token_ids[t] = (mutated.token_ids[t] + 1) % 11;
    const auto logits = forward(w, mutated, &adaptors).logits;
    for (std::size_t row = 0; row < 8; ++row) {
      bool same = true;
      for (std::size_t v = 0; v < 11; ++v) same = same && logits[row * 11 + v] == base[row * 11 + v];
      if (row < t) CHECK(same);
    }
    bool changed = false;
    for (std::size_t v = 0; v < 11; ++v) changed = changed || logits[t * 11 + v] != base[t * 11 + v];
    CHECK(changed);
  }
}

TEST_CASE("tracing is observation only and rows are normalized") {
  Rng rng(5);
  const auto w = init_model(tiny(), 5);
  const auto in = random_input(tiny(), 2, rng);
  ForwardOptions traced;
  traced.trace = true;
  const auto a = forward(w, in);
  const auto b = forward<float>(w, in, nullptr, traced);
  CHECK(testutil::bit_equal(a.logits, b.logits));
  REQUIRE(b.traces.size() == 2);
  for (const auto& trace : b.traces) {
    REQUIRE(trace.layers.size() == 2);
    for (const auto& layer : trace.layers) {
      REQUIRE(layer.shape() == Shape{2, 8, 8});
      for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t i = 0; i < 8; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < 8; ++j) {
            const float p = layer[(h * 8 + i) * 8 + j];
            if (j > i) CHECK(p == 0.0f);
            CHECK(p >= 0.0f);
            s += p;
          }
          CHECK(std::abs(s - 1.0) <= 1e-5);
        }
      }
    }
  }
}

TEST_CASE("neutral adaptors leave logits unchanged") {
  Rng rng(6);
  const auto w = init_model(tiny(), 6);
  const auto in = random_input(tiny(), 2, rng);
  const auto base = forward(w, in).logits;
  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    for (bool specific : {false, true}) {
      AdaptorSpec spec;
      spec.kind = kind;
      spec.context_specific = specific;
      const auto p = attach(spec, tiny(), 10);
      CHECK(testutil::max_abs_diff(forward(w, in, &p).logits, base) <= 1e-6);
    }
  }
}

TEST_CASE("adaptors built for another config are rejected") {
  Rng rng(7);
  const auto w = init_model(tiny(), 7);
  ModelConfig other = tiny();
  other.d_ffn_fused = 64;
  other.d_ffn_inner = 32;
  const auto p = attach(AdaptorSpec{}, other, 1);
  CHECK_THROWS_AS(forward(w, random_input(tiny(), 1, rng), &p), AdaptorError);
  auto q = attach(AdaptorSpec{}, tiny(), 1);
  q.layers[1].lora[0].a = Tensor::zeros({2, 16, 3});
  CHECK_THROWS_AS(forward(w, random_input(tiny(), 1, rng), &q), AdaptorError);
}

TEST_CASE("image rows replace token embeddings") {
  Rng rng(8);
  const auto w = init_model(tiny(), 8);
  auto in = random_input(tiny(), 1, rng);
  in.image_rows = {2, 3};
  in.image_block = uniform<float>({2, 16}, rng);
  const auto with = forward(w, in).logits;
  auto other = in;
  other.token_ids[2] = (other.token_ids[2] + 3) % 11;
  CHECK(testutil::bit_equal(forward(w, other).logits, with));
}

TEST_CASE("full model gradients for every adaptor family") {
  Rng rng(9);
  const auto w = init_model(tiny(), 9).cast<double>();
  auto in = random_input<double>(tiny(), 1, rng);
  std::vector<TokenId> targets(8);
  for (auto& t : targets) t = static_cast<TokenId>(rng.below(11));
  const std::vector<std::uint8_t> mask = {0, 1, 1, 1, 0, 1, 1, 1};
  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    AdaptorSpec spec;
    spec.kind = kind;
    spec.rank = 2;
    auto p = attach(spec, tiny(), 11).cast<double>();
    perturb(p, rng, kind == AdaptorKind::ia3 ? 0.5 : -0.5, kind == AdaptorKind::ia3 ? 1.5 : 0.5);
    auto f = [&] { return masked_cross_entropy(forward(w, in, &p).logits, targets, mask); };
    for (auto& [name, t] : p.named_tensors()) {
      TensorD leaf = t;
      CAPTURE(name);
      CHECK(grad_check<double>(f, leaf) <= 1e-3);
    }
  }
}

}  // TEST_SUITE
