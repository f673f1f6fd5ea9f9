#include <cmath>

#include "cpeft/adaptors.hpp"
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

AdaptorSpec make_spec(AdaptorKind kind, std::size_t rank, bool specific, bool att = true, bool ffn = true) {
  AdaptorSpec s;
  s.kind = kind;
  s.rank = rank;
  s.context_specific = specific;
  s.attention = att;
  s.ffn = ffn;
  return s;
}

ModelInput<float> input_with(const std::vector<ContextId>& ctx, Rng& rng) {
  ModelInput<float> in;
  in.batch = ctx.size() / 8;
  in.seq_len = 8;
  in.context_ids = ctx;
  for (std::size_t i = 0; i < ctx.size(); ++i) in.token_ids.push_back(static_cast<TokenId>(rng.below(11)));
  return in;
}

void randomize(AdaptorParams<float>& p, Rng& rng) {
  for (auto& [name, t] : p.named_tensors()) {
    Tensor h = t;
    for (auto& v : h.mutable_data()) v = static_cast<float>(rng.uniform() - 0.5);
  }
}

std::size_t allocated(const AdaptorParams<float>& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : p.named_tensors()) {
    CHECK(t.requires_grad());
    n += t.numel();
  }
  return n;
}

}  // namespace

TEST_SUITE("context_adaptors") {

TEST_CASE("attach gives neutral trainable adaptors") {
  const auto lora = attach(make_spec(AdaptorKind::lora, 3, true), tiny(), 1);
  double s2 = 0;
  std::size_t n = 0;
  for (const auto& layer : lora.layers) {
    for (std::size_t s = 0; s < kProjectionSites; ++s) {
      REQUIRE(layer.lora[s].a.defined());
      for (float v : layer.lora[s].b.data()) CHECK(v == 0.0f);
      for (float v : layer.lora[s].a.data()) {
        s2 += double(v) * v;
        ++n;
      }
    }
  }
  CHECK(std::sqrt(s2 / static_cast<double>(n)) == doctest::Approx(0.02).epsilon(0.1));
  const auto bitfit = attach(make_spec(AdaptorKind::bitfit, 1, true), tiny(), 1);
  for (const auto& [name, t] : bitfit.named_tensors())
    for (float v : t.data()) CHECK(v == 0.0f);
  const auto ia3 = attach(make_spec(AdaptorKind::ia3, 1, true), tiny(), 1);
  for (const auto& [name, t] : ia3.named_tensors())
    for (float v : t.data()) CHECK(v == 1.0f);
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(attach(make_spec(AdaptorKind::lora, 0, true), tiny(), 1), SpecError);
  CHECK_THROWS_AS(attach(make_spec(AdaptorKind::ia3, 1, true, false, false), tiny(), 1), SpecError);
  AdaptorSpec s;
  s.num_contexts = 0;
  CHECK_THROWS_AS(s.validate(tiny()), SpecError);
  CHECK(parse_adaptor_kind("bitfit") == AdaptorKind::bitfit);
  CHECK_THROWS_AS(parse_adaptor_kind("adapter"), SpecError);
  CHECK(make_spec(AdaptorKind::lora, 1, true, true, false).target_label() == "A");
  CHECK(make_spec(AdaptorKind::lora, 1, true, false, true).target_label() == "F");
  CHECK(make_spec(AdaptorKind::lora, 1, true).target_label() == "AF");
}

TEST_CASE("sites per family") {
  const auto ia3 = make_spec(AdaptorKind::ia3, 1, true, true, false);
  CHECK(ia3.targets(ScaleSite::key));
  CHECK(ia3.targets(ScaleSite::value));
  CHECK_FALSE(ia3.targets(ScaleSite::ffn_inner));
  const auto bitfit = make_spec(AdaptorKind::bitfit, 1, true, false, true);
  CHECK(bitfit.targets(ProjectionSite::ffn_up));
  CHECK(bitfit.targets(ProjectionSite::ffn_down));
  CHECK_FALSE(bitfit.targets(ProjectionSite::query));
  CHECK(projection_dims(ProjectionSite::ffn_up, tiny()) == std::pair<std::size_t, std::size_t>{16, 32});
  CHECK(projection_dims(ProjectionSite::ffn_down, tiny()) == std::pair<std::size_t, std::size_t>{16, 16});
  CHECK(scale_width(ScaleSite::ffn_inner, tiny()) == 16);
}

TEST_CASE("adaptor parameter counts at the paper preset") {
  const ModelConfig paper = ModelConfig::paper();
  struct Row {
    AdaptorKind kind;
    std::size_t rank, agnostic, specific;
  };
  const Row rows[] = {{AdaptorKind::ia3, 1, 55296, 110592},
                      {AdaptorKind::bitfit, 1, 119808, 239616},
                      {AdaptorKind::lora, 1, 202752, 405504},
                      {AdaptorKind::lora, 8, 1622016, 3244032},
                      {AdaptorKind::lora, 64, 12976128, 25952256}};
  for (const auto& r : rows) {
    CAPTURE(to_string(r.kind));
    CAPTURE(r.rank);
    CHECK(count_trainable(make_spec(r.kind, r.rank, false), paper) == r.agnostic);
    CHECK(count_trainable(make_spec(r.kind, r.rank, true), paper) == r.specific);
  }
}

TEST_CASE("closed form equals enumeration over the adaptor matrix") {
  for (const ModelConfig& cfg : {tiny(), ModelConfig::toy(), ModelConfig::paper()}) {
    for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
      for (auto [att, ffn] : {std::pair{true, false}, std::pair{false, true}, std::pair{true, true}}) {
        for (std::size_t rank : {1, 8, 64}) {
          for (bool specific : {false, true}) {
            const auto spec = make_spec(kind, rank, specific, att, ffn);
            std::size_t enumerated = 0;
            for (const auto& [name, shape] : adaptor_layout(spec, cfg)) enumerated += shape_numel(shape);
            CHECK(count_trainable(spec, cfg) == enumerated);
            if (specific) {
              CHECK(count_trainable(spec, cfg) == 2 * count_trainable(make_spec(kind, rank, false, att, ffn), cfg));
            }
          }
        }
      }
    }
  }
}

TEST_CASE("allocated scalars equal the closed form") {
  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    for (bool specific : {false, true}) {
      const auto spec = make_spec(kind, 4, specific);
      const auto p = attach(spec, ModelConfig::toy(), 3);
      CHECK(allocated(p) == count_trainable(spec, ModelConfig::toy()));
      CHECK(p.numel() == count_trainable(spec, ModelConfig::toy()));
      const auto layout = adaptor_layout(spec, ModelConfig::toy());
      const auto named = p.named_tensors();
      REQUIRE(layout.size() == named.size());
      for (std::size_t i = 0; i < named.size(); ++i) CHECK(named[i].first == layout[i].first);
    }
  }
}

TEST_CASE("context-lora projection") {
  Rng rng(4);
  const Tensor x = uniform<float>({6, 5}, rng), w = uniform<float>({5, 7}, rng), b = uniform<float>({7}, rng);
  const std::vector<ContextId> ctx = {0, 1, 1, 0, 0, 1};
  LoraFactors<float> f{uniform<float>({2, 5, 3}, rng), Tensor::zeros({2, 3, 7})};
  CHECK(testutil::bit_equal(apply_context_lora(x, w, b, f, ctx), linear(x, w, b)));

  f.b = uniform<float>({2, 3, 7}, rng);
  const Tensor h = apply_context_lora(x, w, b, f, ctx);
  const Tensor ref = add(linear(x, w, b), materialize_delta_oracle(x, f.a, f.b, ctx));
  CHECK(testutil::max_abs_diff(h, ref) <= 1e-5);

  // Tied contexts: the assignment no longer matters.
  std::vector<float> a(f.a.values()), bv(f.b.values());
  std::copy(a.begin(), a.begin() + 15, a.begin() + 15);
  std::copy(bv.begin(), bv.begin() + 21, bv.begin() + 21);
  const LoraFactors<float> tied{Tensor::from({2, 5, 3}, a), Tensor::from({2, 3, 7}, bv)};
  const std::vector<ContextId> other = {1, 1, 0, 0, 1, 0};
  CHECK(testutil::bit_equal(apply_context_lora(x, w, b, tied, ctx), apply_context_lora(x, w, b, tied, other)));

  const std::vector<ContextId> bad = {0, 1, 2, 0, 0, 1};
  CHECK_THROWS_AS(apply_context_lora(x, w, b, f, bad), RoutingError);
}

TEST_CASE("context-lora gradients reach A, B and x but not W or b") {
  Rng rng(5);
  Tensor x = uniform<float>({4, 5}, rng, true);
  const Tensor w = uniform<float>({5, 6}, rng), b = uniform<float>({6}, rng);
  LoraFactors<float> f{uniform<float>({2, 5, 2}, rng, true), uniform<float>({2, 2, 6}, rng, true)};
  const std::vector<ContextId> ctx = {0, 1, 0, 1};
  Tape<float> tape;
  Tensor loss;
  {
    TapeScope<float> scope(tape);
    loss = sum(apply_context_lora(x, w, b, f, ctx));
  }
  backward(loss, tape);
  CHECK(x.has_grad());
  CHECK(f.a.has_grad());
  CHECK(f.b.has_grad());
  CHECK_FALSE(w.has_grad());
  CHECK_FALSE(b.has_grad());
}

TEST_CASE("context-bitfit shift") {
  const Tensor h = Tensor::from({2, 2}, {0.5f, -1.0f, 2.0f, 3.0f});
  const std::vector<ContextId> ctx = {0, 1};
  const Tensor y = apply_context_bitfit(h, Tensor::from({2, 2}, {1, 1, 2, 2}), ctx);
  CHECK(y.values() == std::vector<float>{1.5f, 0.0f, 4.0f, 5.0f});
  CHECK(apply_context_bitfit(h, Tensor::zeros({2, 2}), ctx).values() == h.values());

  Rng rng(6);
  const Tensor shift = uniform<float>({1, 2}, rng);
  const std::vector<ContextId> zeros = {0, 0};
  const Tensor shared = apply_context_bitfit(h, shift, zeros);
  CHECK(testutil::bit_equal(shared, add(h, reshape(shift, {2}))));
  const std::vector<ContextId> bad = {0, 2};
  CHECK_THROWS_AS(apply_context_bitfit(h, Tensor::zeros({2, 2}), bad), RoutingError);
}

TEST_CASE("context-ia3 scale") {
  Rng rng(7);
  const Tensor act = uniform<float>({5, 4}, rng);
  const std::vector<ContextId> ctx = {0, 1, 1, 0, 1};
  CHECK(apply_context_ia3(act, Tensor::full({2, 4}, 1.0f), ctx).values() == act.values());

  std::vector<float> s(8, 1.0f);
  std::fill(s.begin() + 4, s.end(), 0.0f);
  const Tensor killed = apply_context_ia3(act, Tensor::from({2, 4}, s), ctx);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(killed[r * 4 + j] == (ctx[r] == 1 ? 0.0f : act[r * 4 + j]));

  const Tensor scale = uniform<float>({2, 4}, rng);
  const Tensor y = apply_context_ia3(act, scale, ctx);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double ref = double(act[r * 4 + j]) * scale[static_cast<std::size_t>(ctx[r]) * 4 + j];
      CHECK(std::abs(y[r * 4 + j] - ref) <= 1e-7);
    }
  }
  const std::vector<ContextId> bad = {0, 1, 1, -1, 1};
  CHECK_THROWS_AS(apply_context_ia3(act, scale, bad), RoutingError);
}

TEST_CASE("delta oracle") {
  Rng rng(8);
  const TensorD x = uniform<double>({3, 4}, rng), a = uniform<double>({1, 4, 2}, rng),
                b = uniform<double>({1, 2, 5}, rng);
  const std::vector<ContextId> ctx = {0, 0, 0};
  const TensorD none = materialize_delta_oracle(x, a, TensorD::zeros({1, 2, 5}), ctx);
  for (double v : none.values()) CHECK(v == 0.0);
  const TensorD plain = matmul(x, matmul(reshape(a, {4, 2}), reshape(b, {2, 5})));
  CHECK(testutil::max_abs_diff(materialize_delta_oracle(x, a, b, ctx), plain) <= 1e-12);

  const Tensor big_x = Tensor::zeros({1, 1025});
  const std::vector<ContextId> one = {0};
  CHECK_THROWS_AS(materialize_delta_oracle(big_x, Tensor::zeros({1, 1025, 1}), Tensor::zeros({1, 1, 1024}), one),
                  RefusalError);
  CHECK_NOTHROW(materialize_delta_oracle(Tensor::zeros({1, 1024}), Tensor::zeros({1, 1024, 1}),
                                         Tensor::zeros({1, 1, 1024}), one));
}

TEST_CASE("routing collapses to one group when context agnostic") {
  const std::vector<ContextId> ctx = {0, 1, 1, 0};
  const auto agnostic = route_contexts(make_spec(AdaptorKind::lora, 1, false), ctx);
  CHECK(agnostic == std::vector<ContextId>{0, 0, 0, 0});
  CHECK(route_contexts(make_spec(AdaptorKind::lora, 1, true), ctx) == ctx);
  const std::vector<ContextId> bad = {0, 3};
  CHECK_THROWS_AS(route_contexts(make_spec(AdaptorKind::lora, 1, true), bad), RoutingError);
}

TEST_CASE("tied context groups match the agnostic model") {
  Rng rng(9);
  const auto w = init_model(tiny(), 9);
  std::vector<ContextId> ctx(16);
  for (auto& c : ctx) c = static_cast<ContextId>(rng.below(2));
  const auto in = input_with(ctx, rng);
  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    auto agnostic = attach(make_spec(kind, 2, false), tiny(), 1);
    randomize(agnostic, rng);
    auto specific = attach(make_spec(kind, 2, true), tiny(), 1);
    const auto src = agnostic.named_tensors();
    auto dst = specific.named_tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const std::size_t n = src[i].second.numel();
      for (std::size_t c = 0; c < 2; ++c)
        std::copy(src[i].second.data().begin(), src[i].second.data().end(),
                  dst[i].second.mutable_data().begin() + static_cast<std::ptrdiff_t>(c * n));
    }
    CHECK(testutil::max_abs_diff(forward(w, in, &specific).logits, forward(w, in, &agnostic).logits) <= 1e-6);
  }
}

TEST_CASE("one specific group is bit-identical to agnostic") {
  Rng rng(10);
  const auto w = init_model(tiny(), 10);
  std::vector<ContextId> ctx(8, 0);
  const auto in = input_with(ctx, rng);
  auto one = make_spec(AdaptorKind::lora, 2, true);
  one.num_contexts = 1;
  auto a = attach(one, tiny(), 5);
  auto b = attach(make_spec(AdaptorKind::lora, 2, false), tiny(), 5);
  randomize(a, rng);
  const auto na = a.named_tensors();
  auto nb = b.named_tensors();
  for (std::size_t i = 0; i < na.size(); ++i)
    std::copy(na[i].second.data().begin(), na[i].second.data().end(), nb[i].second.mutable_data().begin());
  CHECK(testutil::bit_equal(forward(w, in, &a).logits, forward(w, in, &b).logits));
}

TEST_CASE("unused context parameters do not affect logits") {
  Rng rng(11);
  const auto w = init_model(tiny(), 11);
  std::vector<ContextId> ctx(8, 1);
  const auto in = input_with(ctx, rng);
  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    auto p = attach(make_spec(kind, 2, true), tiny(), 1);
    randomize(p, rng);
    const Tensor before = forward(w, in, &p).logits;
    for (auto& [name, t] : p.named_tensors()) {
      Tensor h = t;
      const std::size_t half = h.numel() / 2;  // group 0 comes first
      for (std::size_t i = 0; i < half; ++i) h.mutable_data()[i] += 3.0f;
    }
    CHECK(testutil::bit_equal(forward(w, in, &p).logits, before));
  }
}

TEST_CASE("peft backward leaves the base without gradient buffers") {
  Rng rng(12);
  const auto w = init_model(tiny(), 12);
  std::vector<ContextId> ctx(8);
  for (auto& c : ctx) c = static_cast<ContextId>(rng.below(2));
  const auto in = input_with(ctx, rng);
  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    auto p = attach(make_spec(kind, 2, true), tiny(), 1);
    Tape<float> tape;
    Tensor loss;
    {
      TapeScope<float> scope(tape);
      std::vector<TokenId> targets(8, 1);
      std::vector<std::uint8_t> mask(8, 1);
      loss = masked_cross_entropy(forward(w, in, &p).logits, targets, mask);
    }
    backward(loss, tape);
    for (const auto& [name, t] : w.named_tensors()) CHECK_FALSE(t.has_grad());
    for (const auto& [name, t] : p.named_tensors()) CHECK(t.has_grad());
  }
}

TEST_CASE("adaptor archives round trip and check the model config") {
  testutil::TempDir dir("adaptors");
  Rng rng(13);
  auto p = attach(make_spec(AdaptorKind::ia3, 1, true, true, false), tiny(), 1);
  randomize(p, rng);
  save_adaptors(dir / "a.cpeft", p);
  const auto q = load_adaptors(dir / "a.cpeft", tiny());
  CHECK(q.spec == p.spec);
  const auto np = p.named_tensors(), nq = q.named_tensors();
  REQUIRE(np.size() == nq.size());
  for (std::size_t i = 0; i < np.size(); ++i) {
    CHECK(np[i].first == nq[i].first);
    CHECK(testutil::bit_equal(np[i].second, nq[i].second));
    CHECK(nq[i].second.requires_grad());
  }
  ModelConfig other = tiny();
  other.n_layers = 3;
  CHECK_THROWS_AS(load_adaptors(dir / "a.cpeft", other), LoadError);
}

}  // TEST_SUITE
