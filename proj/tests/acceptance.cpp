// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cpeft/adaptors.hpp"
#include "cpeft/commands.hpp"
#include "cpeft/einsum_context.hpp"
#include "cpeft/grad_check.hpp"
#include "cpeft/heatmap.hpp"
#include "cpeft/pipeline.hpp"
#include "cpeft/run_config.hpp"
#include "cpeft/training.hpp"

using namespace cpeft;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <typename S>
BasicTensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::vector<S> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<S>(lo + (hi - lo) * rng.uniform());
  return BasicTensor<S>::from(std::move(shape), std::move(v), grad);
}

template <typename S>
double max_abs_diff(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

void randomize(AdaptorParams<float>& p, Rng& rng) {
  for (auto& [name, t] : p.named_tensors()) {
    Tensor h = t;
    for (auto& v : h.mutable_data()) v = static_cast<float>(rng.uniform() - 0.5);
  }
}

AdaptorSpec lora_spec(std::size_t rank, bool specific) {
  AdaptorSpec s;
  s.kind = AdaptorKind::lora;
  s.rank = rank;
  s.context_specific = specific;
  return s;
}

// Shared state of the toy-task runs.
struct ToySetup {
  RunConfig config;
  DatasetSplits data;
  TransformerWeights<float> base;
  double pretrain_seconds = 0.0;
};

struct ToyRun {
  TrainResult result;
  CaptionModel model;
  double seconds = 0.0;
};

ToySetup make_toy_setup() {
  ToySetup s;
  s.config.adaptor = lora_spec(4, true);
  s.config.train.max_steps = 2000;
  s.data = split_dataset(synth_dataset(s.config.data.n_scenes, s.config.data.seed, s.config.data.scene),
                         s.config.data.split_seed);
  const auto t0 = Clock::now();
  s.base = pretrain_base(s.config.model, s.config.base, s.data.train);
  s.pretrain_seconds = seconds_since(t0);
  return s;
}

ToyRun run_toy(const ToySetup& setup, bool specific, std::uint64_t seed) {
  TrainConfig cfg = setup.config.train;
  cfg.seed = seed;
  const auto t0 = Clock::now();
  ToyRun r{{}, make_peft_model(setup.base, lora_spec(4, specific), setup.config.data.scene.d_vis, seed), 0.0};
  r.result = train(r.model, setup.data.train, setup.data.val, cfg);
  r.seconds = seconds_since(t0);
  return r;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t count) {
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from),
                         v.begin() + static_cast<std::ptrdiff_t>(from + count), 0.0) /
         static_cast<double>(count);
}

// NLL of the captions when the model sees [IMG] placeholders instead of images.
double text_only_nll(const TransformerWeights<float>& base, std::span<const Example> split) {
  NllSum total;
  for (std::size_t i = 0; i < split.size(); i += 16) {
    std::vector<SequenceLayout> layouts;
    std::vector<TokenId> targets;
    std::vector<std::uint8_t> mask;
    for (std::size_t j = i; j < std::min(split.size(), i + 16); ++j) {
      layouts.push_back(make_layout(split[j].caption));
      targets.insert(targets.end(), layouts.back().targets.begin(), layouts.back().targets.end());
      mask.insert(mask.end(), layouts.back().loss_mask.begin(), layouts.back().loss_mask.end());
    }
    const auto logits = forward(base, make_input<float>(layouts, Tensor{})).logits;
    const NllSum part = masked_nll(logits, targets, mask);
    total.nll += part.nll;
    total.count += part.count;
  }
  return total.mean();
}

// ---------------------------------------------------------------------------

Outcome table_counts() {
  const auto t0 = Clock::now();
  std::ostringstream sink;
  const int code = cmd_count_params(ModelConfig::paper(), 2, sink);
  const CountReport r = count_params(ModelConfig::paper(), 2);
  const double secs = seconds_since(t0);
  const std::size_t expected[5][2] = {{55296, 110592},
                                      {119808, 239616},
                                      {202752, 405504},
                                      {1622016, 3244032},
                                      {12976128, 25952256}};
  bool exact = r.rows.size() == 5;
  for (std::size_t i = 0; exact && i < 5; ++i) {
    exact = r.rows[i].agnostic_closed == expected[i][0] && r.rows[i].specific_closed == expected[i][1] &&
            r.rows[i].consistent();
  }
  return {exact && code == 0 && r.ok() && secs < 1.0,
          fmt("ten counts %s, %zu specs cross-checked, %.3f s", exact ? "exact" : "WRONG", r.matrix_specs, secs)};
}

Outcome einsum_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  const std::size_t trials = 1000;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t L = 1 + rng.below(16), C = 1 + rng.below(16), d = 1 + rng.below(16),
                      r = 1 + rng.below(16), D = 1 + rng.below(16);
    const Tensor x = random_tensor<float>({L, d}, rng), a = random_tensor<float>({C, d, r}, rng),
                 b = random_tensor<float>({C, r, D}, rng);
    std::vector<ContextId> ctx(L);
    for (auto& c : ctx) c = static_cast<ContextId>(rng.below(C));
    worst = std::max(worst, max_abs_diff(einsum_context(x, a, b, ctx), materialize_delta_oracle(x, a, b, ctx)));
  }
  const Tensor x = random_tensor<float>({128, 768}, rng), a = random_tensor<float>({2, 768, 64}, rng, -0.035, 0.035),
               b = random_tensor<float>({2, 64, 768}, rng, -0.035, 0.035);
  std::vector<ContextId> ctx(128);
  for (std::size_t i = 0; i < 128; ++i) ctx[i] = i >= 1 && i <= 64 ? 0 : 1;
  const double big = max_abs_diff(einsum_context(x, a, b, ctx), materialize_delta_oracle(x, a, b, ctx));
  const double secs = seconds_since(t0);
  return {worst <= 1e-5 && big <= 1e-4 && secs < 60.0,
          fmt("%zu random max %.2e, paper-shaped max %.2e, %.1f s", trials, worst, big, secs)};
}

Outcome gradients() {
  const auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ffn_fused = 32;
  cfg.d_ffn_inner = 16;
  cfg.dropout_p = 0.0;
  Rng rng(77);
  const auto w = init_model(cfg, 77).cast<double>();
  const auto ex = synth_dataset(2, 5);
  std::vector<SequenceLayout> layouts;
  std::vector<TensorD> blocks;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
  for (const auto& e : ex) {
    layouts.push_back(make_layout(e.caption));
    targets.insert(targets.end(), layouts.back().targets.begin(), layouts.back().targets.end());
    mask.insert(mask.end(), layouts.back().loss_mask.begin(), layouts.back().loss_mask.end());
    blocks.push_back(matmul(e.image.embeddings.cast<double>(), random_tensor<double>({64, 16}, rng, -0.1, 0.1)));
  }
  const auto in = make_input<double>(layouts, concat_rows<double>(blocks));

  struct Family {
    const char* label;
    AdaptorKind kind;
    std::string match;
  };
  const Family families[] = {{"lora A", AdaptorKind::lora, "lora_a"},
                             {"lora B", AdaptorKind::lora, "lora_b"},
                             {"bitfit", AdaptorKind::bitfit, ""},
                             {"ia3", AdaptorKind::ia3, ""}};
  std::string detail;
  bool pass = true;
  for (const auto& fam : families) {
    AdaptorSpec spec;
    spec.kind = fam.kind;
    spec.rank = 2;
    auto p = attach(spec, cfg, 3).cast<double>();
    for (auto& [name, t] : p.named_tensors()) {
      TensorD h = t;
      for (auto& v : h.mutable_data()) {
        v = fam.kind == AdaptorKind::ia3 ? 0.5 + rng.uniform() : 0.4 * (rng.uniform() - 0.5);
      }
    }
    auto f = [&] { return masked_cross_entropy(forward(w, in, &p).logits, targets, mask); };
    std::vector<std::pair<std::string, TensorD>> pool;
    for (auto& [name, t] : p.named_tensors()) {
      if (name.find(fam.match) == std::string::npos) continue;
      pool.emplace_back(name, t);
    }
    double worst = 0.0;
    const std::size_t probes = 24;
    for (std::size_t k = 0; k < probes; ++k) {
      auto& [name, leaf] = pool[rng.below(pool.size())];
      const std::size_t coord[] = {rng.below(leaf.numel())};
      worst = std::max(worst, grad_check<double>(f, leaf, kGradCheckStep, coord));
      leaf.clear_grad();
    }
    pass &= worst <= 1e-3;
    detail += fmt("%s%s %zu scalars max rel %.1e", detail.empty() ? "" : "; ", fam.label, probes, worst);
  }
  const double secs = seconds_since(t0);
  return {pass && secs < 120.0, detail + fmt("; %.1f s", secs)};
}

Outcome neutrality(const ToySetup& setup) {
  const ModelConfig& cfg = setup.config.model;
  const auto& split = setup.data.val;
  double worst = 0.0;
  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    AdaptorSpec spec;
    spec.kind = kind;
    const CaptionModel m = make_peft_model(setup.base, spec, 64, 9);
    const Example* batch[] = {&split[0], &split[1]};
    const auto b = make_batch(m, batch, 0.0, false, nullptr);
    worst = std::max(worst, max_abs_diff(forward(m.base, b.input, m.adaptor_ptr()).logits,
                                         forward<float>(m.base, b.input, nullptr).logits));
  }

  // 500 single-example steps on a fresh base.
  CaptionModel m = make_peft_model(init_model(cfg, 31), lora_spec(4, true), 64, 31);
  std::vector<std::pair<std::string, Tensor>> base_before, train_before;
  for (const auto& [name, t] : m.base.named_tensors()) base_before.emplace_back(name, t.clone());
  for (const auto& [name, t] : m.trainable()) train_before.emplace_back(name, t.clone());
  const std::uint64_t hash_before = weights_hash(m.base);
  TrainConfig tc = setup.config.train;
  tc.batch_size = 1;
  tc.max_steps = 500;
  const auto r = train(m, std::span(setup.data.train).first(600), std::span(setup.data.val).first(8), tc);
  std::size_t base_changed = 0, trainable_unchanged = 0;
  const auto base_after = m.base.named_tensors();
  for (std::size_t i = 0; i < base_after.size(); ++i) {
    base_changed += base_after[i].second.values() != base_before[i].second.values();
  }
  const auto trained = m.trainable();
  for (std::size_t i = 0; i < trained.size(); ++i) {
    trainable_unchanged += trained[i].second.values() == train_before[i].second.values();
  }
  const bool pass = worst <= 1e-6 && r.step_losses.size() == 500 && weights_hash(m.base) == hash_before &&
                    base_changed == 0 && trainable_unchanged == 0;
  return {pass, fmt("fresh-adaptor logit diff %.1e; after %zu steps base hash %s, %zu/%zu base tensors changed, "
                    "%zu/%zu adaptor+projection tensors changed",
                    worst, r.step_losses.size(), weights_hash(m.base) == hash_before ? "unchanged" : "CHANGED",
                    base_changed, base_after.size(), trained.size() - trainable_unchanged, trained.size())};
}

Outcome degeneracy(const ToySetup& setup) {
  const auto& split = setup.data.val;
  Rng rng(55);
  double tied_worst = 0.0;
  for (AdaptorKind kind : {AdaptorKind::lora, AdaptorKind::bitfit, AdaptorKind::ia3}) {
    AdaptorSpec agn;
    agn.kind = kind;
    agn.context_specific = false;
    AdaptorSpec spec = agn;
    spec.context_specific = true;
    CaptionModel a = make_peft_model(setup.base, agn, 64, 4);
    CaptionModel s = make_peft_model(setup.base, spec, 64, 4);
    randomize(*a.adaptors, rng);
    s.projection = a.projection;
    const auto src = a.adaptors->named_tensors();
    auto dst = s.adaptors->named_tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const auto n = static_cast<std::ptrdiff_t>(src[i].second.numel());
      auto out = dst[i].second.mutable_data();
      std::copy(src[i].second.data().begin(), src[i].second.data().end(), out.begin());
      std::copy(src[i].second.data().begin(), src[i].second.data().end(), out.begin() + n);
    }
    const Example* batch[] = {&split[0], &split[1], &split[2]};
    const auto b = make_batch(a, batch, 0.0, false, nullptr);
    tied_worst = std::max(tied_worst, max_abs_diff(forward(s.base, b.input, s.adaptor_ptr()).logits,
                                                   forward(a.base, b.input, a.adaptor_ptr()).logits));
  }

  // One context group against the agnostic variant through training steps.
  AdaptorSpec one = lora_spec(4, true);
  one.num_contexts = 1;
  CaptionModel c1 = make_peft_model(setup.base, one, 64, 8);
  CaptionModel ag = make_peft_model(setup.base, lora_spec(4, false), 64, 8);
  bool equal = true;
  {
    const Example* batch[] = {&split[0], &split[1]};
    const auto b1 = make_batch(c1, batch, 0.0, false, nullptr);
    Tape<float> t1, t2;
    Tensor l1, l2, logits1, logits2;
    {
      TapeScope<float> scope(t1);
      logits1 = forward(c1.base, b1.input, c1.adaptor_ptr()).logits;
      l1 = masked_cross_entropy(logits1, b1.targets, b1.loss_mask);
    }
    {
      TapeScope<float> scope(t2);
      logits2 = forward(ag.base, b1.input, ag.adaptor_ptr()).logits;
      l2 = masked_cross_entropy(logits2, b1.targets, b1.loss_mask);
    }
    t1.backward(l1);
    t2.backward(l2);
    equal &= logits1.values() == logits2.values();
    const auto g1 = c1.adaptors->named_tensors(), g2 = ag.adaptors->named_tensors();
    for (std::size_t i = 0; i < g1.size(); ++i) equal &= g1[i].second.grad_or_zero() == g2[i].second.grad_or_zero();
    for (auto& [n, t] : g1) Tensor(t).clear_grad();
    for (auto& [n, t] : g2) Tensor(t).clear_grad();
  }
  TrainConfig tc = setup.config.train;
  tc.max_steps = 10;
  const auto r1 = train(c1, setup.data.train, std::span(split).first(8), tc);
  const auto r2 = train(ag, setup.data.train, std::span(split).first(8), tc);
  equal &= r1.step_losses == r2.step_losses;
  const auto p1 = c1.trainable(), p2 = ag.trainable();
  for (std::size_t i = 0; i < p1.size(); ++i) equal &= p1[i].second.values() == p2[i].second.values();
  return {tied_worst <= 1e-6 && equal,
          fmt("tied C=2 vs agnostic max %.1e; C=1 logits, grads, 10 updates %s", tied_worst,
              equal ? "bit-equal" : "DIFFER")};
}

struct ToyResults {
  std::vector<ToyRun> specific, agnostic;
};

Outcome trainability(const ToySetup& setup, ToyResults& runs) {
  double total = setup.pretrain_seconds;
  bool pass = true;
  std::string detail;
  const double floor = text_only_nll(setup.base, setup.data.val);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    // Initial value: the untrained model's loss over the whole training split.
    const auto t0 = Clock::now();
    const CaptionModel untrained =
        make_peft_model(setup.base, lora_spec(4, true), setup.config.data.scene.d_vis, seed);
    const double initial = evaluate(untrained, setup.data.train).mean();
    total += seconds_since(t0);

    runs.specific.push_back(run_toy(setup, true, seed));
    const auto& r = runs.specific.back();
    const auto& s = r.result.step_losses;
    total += r.seconds;
    const std::size_t w = 20;
    const bool enough = s.size() >= w && s.size() <= 2000;
    const double first = enough ? mean_of(s, 0, w) : NAN, last = enough ? mean_of(s, s.size() - w, w) : NAN;
    std::size_t hit = 0;
    for (std::size_t k = w; enough && k <= s.size(); ++k) {
      if (mean_of(s, k - w, w) <= 0.5 * initial) {
        hit = k;
        break;
      }
    }
    const bool ok = enough && last <= 0.5 * initial;
    pass &= ok;
    const std::string reached = hit ? fmt("half reached at step %zu", hit) : std::string("half never reached");
    detail += fmt("%sseed %llu: %.3f -> %.3f (%.0f%% drop, %s of %zu steps, first-20 mean %.3f)",
                  detail.empty() ? "" : "; ", static_cast<unsigned long long>(seed), initial, last,
                  100.0 * (1.0 - last / initial), reached.c_str(), s.size(), first);
  }
  detail += fmt("; text-only floor %.3f nats; %.0f s total", floor, total);
  return {pass && total <= 600.0, detail};
}

Outcome direction(const ToySetup& setup, ToyResults& runs) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) runs.agnostic.push_back(run_toy(setup, false, seed));
  double spec = 0.0, agn = 0.0;
  for (const auto& r : runs.specific) spec += std::exp(r.result.best_val_nll) / 3.0;
  for (const auto& r : runs.agnostic) agn += std::exp(r.result.best_val_nll) / 3.0;
  const double rel = (spec - agn) / agn;
  const bool tie = std::abs(rel) <= 0.01;
  const char* verdict = spec <= agn ? (tie ? "specific <= agnostic (within 1%, tie)" : "specific < agnostic")
                                    : (tie ? "tie within 1% (specific slightly higher)" : "specific > agnostic");
  return {spec <= agn || tie, fmt("mean best val PPL specific %.4f vs agnostic %.4f (%+.2f%%): %s", spec, agn,
                                  100.0 * rel, verdict)};
}

Outcome heatmaps(const ToySetup& setup, const ToyResults& runs) {
  const CaptionModel model = restore_model(runs.specific.at(0).result.best);
  const auto& split = setup.data.test;
  double row_err = 0.0, future = 0.0;
  std::size_t grids = 0, negative = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    const Example* batch[] = {&split[i]};
    const auto b = make_batch(model, batch, 0.0, false, nullptr);
    ForwardOptions opts;
    opts.trace = true;
    const auto res = forward(model.base, b.input, model.adaptor_ptr(), opts);
    for (std::size_t l = 0; l < res.traces[0].layers.size(); ++l) {
      const Tensor& w = res.traces[0].layers[l];
      const std::size_t heads = w.dim(0), L = w.dim(1);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t r = 0; r < L; ++r) {
          double sum = 0.0;
          for (std::size_t c = 0; c < L; ++c) {
            const double v = w[(h * L + r) * L + c];
            sum += v;
            if (c > r) future = std::max(future, std::abs(v));
          }
          row_err = std::max(row_err, std::abs(sum - 1.0));
        }
      }
      for (std::size_t s = 65; s < 76; s += 3) {
        const auto g = extract_heatmap(res.traces[0], l, s, s + 3);
        ++grids;
        for (double v : g.values) negative += v < 0.0;
      }
    }
  }

  // Zero queries make every score equal, so attention is uniform over the prefix.
  auto flat = setup.base;
  for (auto& layer : flat.layers) {
    layer.wq = Tensor::zeros(layer.wq.shape());
    layer.bq = Tensor::zeros(layer.bq.shape());
  }
  const CaptionModel probe = make_peft_model(flat, lora_spec(4, true), 64, 1);
  const Example* batch[] = {&split[0]};
  ForwardOptions opts;
  opts.trace = true;
  const auto res = forward(probe.base, make_batch(probe, batch, 0.0, false, nullptr).input, probe.adaptor_ptr(), opts);
  double spread = 0.0;
  for (std::size_t l = 0; l < res.traces[0].layers.size(); ++l) {
    const auto g = extract_heatmap(res.traces[0], l, 70, 71);
    const auto [lo, hi] = std::minmax_element(g.values.begin(), g.values.end());
    spread = std::max(spread, *hi - *lo);
  }
  return {row_err <= 1e-5 && future == 0.0 && negative == 0 && spread <= 1e-6,
          fmt("row sums within %.1e of 1, future mass %.1e, %zu grids with %zu negative cells, uniform-attention "
              "grid spread %.1e",
              row_err, future, grids, negative, spread)};
}

Outcome layouts() {
  Rng rng(909);
  const std::size_t cases = 10000;
  std::size_t good = 0;
  const auto words = static_cast<TokenId>(Vocabulary::toy().size());
  for (std::size_t k = 0; k < cases; ++k) {
    CaptionRecord c;
    const std::size_t n = rng.below(71);
    for (std::size_t i = 0; i < n; ++i) c.tokens.push_back(static_cast<TokenId>(4 + rng.below(words - 4)));
    const SequenceLayout l = make_layout(c);
    const std::size_t kept = std::min<std::size_t>(n, 63);
    bool ok = l.token_ids.size() == 128 && l.context_ids.size() == 128 && l.targets.size() == 128 &&
              l.loss_mask.size() == 128 && l.token_ids[0] == kBosToken && l.caption_length == kept &&
              l.truncated == (n > 63);
    std::size_t image_ctx = 0, masked = 0;
    for (std::size_t i = 0; ok && i < 128; ++i) {
      TokenId expect = kPadToken;
      if (i == 0) expect = kBosToken;
      else if (i <= 64) expect = kImageToken;
      else if (i - 65 < kept) expect = c.tokens[i - 65];
      else if (i == 65 + kept) expect = kEosToken;
      ok &= l.token_ids[i] == expect;
      ok &= l.context_ids[i] == (i >= 1 && i <= 64 ? kImageContext : kTextContext);
      image_ctx += l.context_ids[i] == kImageContext;
      if (i + 1 < 128) ok &= l.targets[i] == l.token_ids[i + 1];
      if (l.loss_mask[i]) {
        ++masked;
        ok &= i >= 64 && i + 1 < 128 && l.targets[i] != kPadToken;
      }
    }
    ok &= image_ctx == 64 && masked == std::min<std::size_t>(n + 1, 63);
    good += ok;
  }
  return {good == cases, fmt("%zu / %zu random captions (lengths 0-70) satisfy the layout", good, cases)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Outcome reproducibility() {
  const auto root = std::filesystem::temp_directory_path() / "cpeft_acceptance_repro";
  std::filesystem::remove_all(root);
  RunConfig cfg;
  cfg.data.n_scenes = 120;
  cfg.base.pretrain_steps = 20;
  cfg.train.epochs = 2;
  apply_seed(cfg, 42);
  std::ostringstream log;
  const auto a = cmd_train(cfg, root / "a", log);
  const auto b = cmd_train(cfg, root / "b", log);
  const std::string ma = slurp(a.metrics), mb = slurp(b.metrics), ca = slurp(a.checkpoint), cb = slurp(b.checkpoint);
  std::filesystem::remove_all(root);
  return {!ma.empty() && !ca.empty() && ma == mb && ca == cb,
          fmt("metrics.csv %zu bytes %s, checkpoint.cpeft %zu bytes %s", ma.size(), ma == mb ? "identical" : "DIFFER",
              ca.size(), ca == cb ? "identical" : "DIFFER")};
}

Outcome image_dependence(const ToySetup& setup, const ToyResults& runs) {
  const auto& val = setup.data.val;
  std::vector<Example> shuffled(val.begin(), val.end());
  for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].image = val[(i + 1) % val.size()].image;
  double plain = 0.0, mixed = 0.0;
  for (const auto& r : runs.specific) {
    const CaptionModel m = restore_model(r.result.best);
    plain += evaluate(m, val).mean() / 3.0;
    mixed += evaluate(m, shuffled).mean() / 3.0;
  }
  return {mixed > plain, fmt("val NLL with matched images %.3f, with shuffled images %.3f (mean of 3 seeds)", plain,
                             mixed)};
}

Outcome colour_words(const ToySetup& setup, const ToyResults& runs) {
  const CaptionModel m = restore_model(runs.specific.at(0).result.best);
  const auto& vocab = Vocabulary::toy();
  std::vector<ImageEmbeddingSet> images;
  for (std::size_t i = 0; i < 50; ++i) images.push_back(setup.data.train[i].image);
  const auto captions = generate(m, images, 63);
  std::size_t hits = 0, exact = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto& scene = *setup.data.train[i].scene;
    const TokenId colour = vocab.id(color_words()[scene.cells[0].color]);
    hits += std::find(captions[i].begin(), captions[i].end(), colour) != captions[i].end();
    exact += captions[i] == setup.data.train[i].caption.tokens;
  }
  return {hits >= 40, fmt("first-cell colour word in %zu / 50 held-in captions; %zu / 50 captions exact", hits, exact)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](const std::string& name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  };

  report("1 parameter counts", table_counts);
  report("2 einsum oracle", einsum_oracle);
  report("3 gradients", gradients);
  report("9 sequence layout", layouts);
  report("10 reproducibility", reproducibility);

  ToySetup setup;
  bool have_setup = false;
  try {
    setup = make_toy_setup();
    have_setup = true;
    std::printf("info  toy base pretrained in %.1f s\n", setup.pretrain_seconds);
  } catch (const std::exception& e) {
    std::printf("info  toy setup failed: %s\n", e.what());
  }
  auto needs_setup = [&](const std::function<Outcome()>& check) {
    return [&, check] { return have_setup ? check() : Outcome{false, "toy setup unavailable"}; };
  };
  ToyResults runs;
  report("4 neutrality and freezing", needs_setup([&] { return neutrality(setup); }));
  report("5 degeneracy", needs_setup([&] { return degeneracy(setup); }));
  report("6 trainability", needs_setup([&] { return trainability(setup, runs); }));
  const bool trained = runs.specific.size() == 3;
  auto needs_runs = [&](const std::function<Outcome()>& check) {
    return [&, check] { return trained ? check() : Outcome{false, "trained runs unavailable"}; };
  };
  report("7 specific vs agnostic", needs_runs([&] { return direction(setup, runs); }));
  report("8 heatmaps", needs_runs([&] { return heatmaps(setup, runs); }));
  report("image dependence", needs_runs([&] { return image_dependence(setup, runs); }));
  report("generated colour words", needs_runs([&] { return colour_words(setup, runs); }));

  std::printf("%s: %d failing\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
