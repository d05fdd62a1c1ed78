#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ctrlseq/digest.hpp"
#include "ctrlseq/metrics.hpp"
#include "ctrlseq/steering.hpp"

using namespace ctrlseq;

namespace {

// toy styles: A markers = ids [7,17), B markers = [17,27), neutral = [27,33)
std::vector<std::size_t> style_tokens(std::size_t style, int n, Rng& rng) {
  std::vector<std::size_t> out;
  std::size_t lo = style == 0 ? 7 : 17;
  for (int i = 0; i < n; ++i) out.push_back(lo + rng.uniform_index(10));
  return out;
}

std::vector<std::size_t> neutral_tokens(int n, Rng& rng) {
  std::vector<std::size_t> out;
  for (int i = 0; i < n; ++i) out.push_back(27 + rng.uniform_index(6));
  return out;
}

// trained two-style base model, shared by the steering scenarios
struct StyleLab {
  ModelConfig cfg;
  DecoderModel model;
  AttributeModel attr;
  std::vector<TokenSequence> prefixes;

  static StyleLab& instance() {
    static StyleLab lab = build();
    return lab;
  }

 private:
  StyleLab(ModelConfig c, DecoderModel m) : cfg(c), model(std::move(m)) {}

  static StyleLab build() {
    ModelConfig cfg;
    cfg.vocab_size = 33;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_dim = 64;
    cfg.max_len = 32;
    Rng rng(1);
    StyleLab lab(cfg, DecoderModel::init(cfg, rng));
    Rng drng(2);
    std::vector<EncodedPair> base;
    for (int i = 0; i < 200; ++i) {
      EncodedPair pr;
      pr.id = "b" + std::to_string(i);
      pr.input_ids = neutral_tokens(3, drng);
      pr.output_ids = style_tokens(i % 2, 6, drng);
      base.push_back(pr);
    }
    TrainConfig tc;
    tc.optimizer.lr = 3e-3;
    tc.batch_size = 8;
    tc.epochs = 25;
    tc.seed = 3;
    train(lab.model, base, {}, tc);

    Rng arng(5);
    std::vector<LabeledSentence> corpus;
    for (int i = 0; i < 100; ++i) {
      LabeledSentence s;
      s.label = i % 2;
      s.ids = style_tokens(s.label, 6, arng);
      corpus.push_back(s);
    }
    lab.attr = train_attribute_model(lab.model, corpus, {"styleA", "styleB"});

    Rng prng(9);
    for (int i = 0; i < 8; ++i) {
      TokenSequence t;
      t.ids.push_back(tok::kBos);
      for (auto id : neutral_tokens(3, prng)) t.ids.push_back(id);
      lab.prefixes.push_back(t);
    }
    return lab;
  }
};

}  // namespace

TEST_CASE("fuse_distributions") {
  std::vector<double> pert = {0.8, 0.2}, orig = {0.5, 0.5};
  SECTION("exponent limits are exact") {
    CHECK(fuse_distributions(pert, orig, 0.0) == orig);
    CHECK(fuse_distributions(pert, orig, 1.0) == pert);
  }
  SECTION("hand geometric mean") {
    auto fused = fuse_distributions(pert, orig, 0.5);
    CHECK(fused[0] == Catch::Approx(2.0 / 3.0).margin(1e-4));
    CHECK(fused[1] == Catch::Approx(1.0 / 3.0).margin(1e-4));
  }
  SECTION("outputs are distributions") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> a(6), b(6);
      double za = 0, zb = 0;
      for (int i = 0; i < 6; ++i) {
        a[i] = rng.uniform(0.001, 1.0);
        b[i] = rng.uniform(0.001, 1.0);
        za += a[i];
        zb += b[i];
      }
      for (int i = 0; i < 6; ++i) {
        a[i] /= za;
        b[i] /= zb;
      }
      auto fused = fuse_distributions(a, b, rng.uniform(0.01, 0.99));
      double total = 0;
      for (double v : fused) {
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(total == Catch::Approx(1.0).margin(1e-9));
    }
  }
  SECTION("zero normalizer") {
    std::vector<double> zero = {0.0, 0.0}, u = {0.5, 0.5};
    CHECK_THROWS_AS(fuse_distributions(zero, zero, 0.5), NumericError);
    CHECK_THROWS_AS(fuse_distributions(zero, u, 0.25), NumericError);
  }
}

TEST_CASE("weighted_decode") {
  Tensor logits = Tensor::from({6}, {0.3, -0.1, 0.7, 0.2, -0.5, 0.0});
  std::vector<std::size_t> bag = {1, 4, 5};

  SECTION("w=0 leaves logits untouched") {
    Tensor out = weighted_decode(logits, bag, 0.0);
    for (std::size_t i = 0; i < 6; ++i) CHECK(out.at(i) == logits.at(i));
  }
  SECTION("dominant weight forces the argmax into the bag") {
    Tensor out = weighted_decode(logits, bag, 1e6);
    CHECK(std::find(bag.begin(), bag.end(), argmax_token(out)) != bag.end());
  }
  SECTION("w=2 multiplies the bag-to-rest mass ratio by e^2") {
    auto p0 = softmax_probs(logits);
    auto p2 = softmax_probs(weighted_decode(logits, bag, 2.0));
    auto mass = [&](const std::vector<double>& p, bool in_bag) {
      double m = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        bool b = std::find(bag.begin(), bag.end(), i) != bag.end();
        if (b == in_bag) m += p[i];
      }
      return m;
    };
    double ratio0 = mass(p0, true) / mass(p0, false);
    double ratio2 = mass(p2, true) / mass(p2, false);
    CHECK(ratio2 / ratio0 == Catch::Approx(std::exp(2.0)).margin(1e-9));
  }
  SECTION("empty bag is a contract error") {
    CHECK_THROWS_AS(weighted_decode(logits, {}, 1.0), ContractError);
  }
}

TEST_CASE("attribute model on separable styles") {
  StyleLab& lab = StyleLab::instance();

  SECTION("held-out accuracy at least 95%") {
    Rng hrng(7);
    int correct = 0;
    for (int i = 0; i < 100; ++i) {
      std::size_t label = i % 2;
      auto ids = style_tokens(label, 6, hrng);
      correct += attribute_predict(lab.attr, pooled_hidden(lab.model, ids, 0)) == label;
    }
    CHECK(correct >= 95);
  }

  SECTION("shuffled labels learn nothing") {
    Rng arng(31);
    std::vector<LabeledSentence> corpus;
    for (int i = 0; i < 200; ++i) {
      LabeledSentence s;
      s.ids = style_tokens(i % 2, 6, arng);
      s.label = arng.uniform_index(2);  // label decoupled from content
      corpus.push_back(s);
    }
    AttributeTrainConfig cfg;
    cfg.seed = 8;
    AttributeModel shuffled = train_attribute_model(lab.model, corpus, {"a", "b"}, cfg);
    Rng hrng(33);
    int correct = 0;
    const int n = 400;
    for (int i = 0; i < n; ++i) {
      std::size_t label = i % 2;
      auto ids = style_tokens(label, 6, hrng);
      correct += attribute_predict(shuffled, pooled_hidden(lab.model, ids, 0)) == label;
    }
    double acc = static_cast<double>(correct) / n;
    CHECK(acc > 0.45);
    CHECK(acc < 0.55);
  }

  SECTION("degenerate single-class corpus") {
    std::vector<LabeledSentence> corpus = {{{7, 8}, 0}, {{9, 10}, 0}};
    CHECK_THROWS_AS(train_attribute_model(lab.model, corpus, {"a", "b"}), DataError);
  }
}

TEST_CASE("perturb_history no-op limits") {
  StyleLab& lab = StyleLab::instance();
  auto [last, state] = lab.model.prefill(lab.prefixes[0]);
  (void)last;
  Tensor hidden_sum({1, lab.cfg.d_model});

  SteeringConfig cfg;
  cfg.iterations = 0;
  PerturbResult r0 = perturb_history(state, lab.attr, 0, cfg, lab.model, 5, hidden_sum, 0);
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    CHECK(r0.state.layers[i].k.same_storage(state.layers[i].k));
    CHECK(r0.state.layers[i].v.same_storage(state.layers[i].v));
  }

  cfg.iterations = 3;
  cfg.step_size = 0.0;
  PerturbResult r1 = perturb_history(state, lab.attr, 0, cfg, lab.model, 5, hidden_sum, 0);
  for (std::size_t i = 0; i < state.layers.size(); ++i)
    CHECK(r1.state.layers[i].k.same_storage(state.layers[i].k));
}

TEST_CASE("perturbation climbs the attribute objective") {
  StyleLab& lab = StyleLab::instance();
  SteeringConfig cfg;
  cfg.iterations = 5;
  cfg.step_size = 0.02;
  cfg.kl_weight = 0.0;  // isolate the ascent direction
  cfg.fusion_exponent = 0.8;
  cfg.top_k = 10;
  cfg.n_hypotheses = 1;
  cfg.max_new = 6;
  cfg.log_objective = true;
  Rng g(13);
  std::size_t monotone = 0, traces = 0;
  for (const auto& prefix : lab.prefixes) {
    SteeredResult res = steered_generate(lab.model, prefix, lab.attr, 0, cfg, g);
    CHECK(res.incidents == 0);
    for (const auto& trace : res.attr_loglik_traces) {
      ++traces;
      bool mono = true;
      for (std::size_t i = 1; i < trace.size(); ++i) mono = mono && trace[i] >= trace[i - 1] - 1e-9;
      monotone += mono;
    }
  }
  REQUIRE(traces > 0);
  CHECK(static_cast<double>(monotone) / static_cast<double>(traces) >= 0.9);
}

TEST_CASE("steering is non-invasive and the delta alone moves") {
  StyleLab& lab = StyleLab::instance();
  std::uint64_t before = checksum_params(lab.model.parameters());
  SteeringConfig cfg;
  cfg.iterations = 4;
  cfg.step_size = 0.05;
  cfg.fusion_exponent = 0.8;
  cfg.n_hypotheses = 2;
  cfg.max_new = 5;
  Rng g(17);
  steered_generate(lab.model, lab.prefixes[1], lab.attr, 0, cfg, g);
  CHECK(checksum_params(lab.model.parameters()) == before);
  for (auto& p : lab.model.parameters()) CHECK(p.requires_grad());  // guard restored
}

TEST_CASE("degenerate steering config reproduces plain sampling bitwise") {
  StyleLab& lab = StyleLab::instance();
  SteeringConfig off;
  off.iterations = 0;
  off.step_size = 0.0;
  off.fusion_exponent = 0.0;
  off.wd_weight = 0.0;
  off.top_k = 10;
  off.n_hypotheses = 3;
  off.max_new = 7;
  Rng g1(21), g2(21);
  SteeredResult steered = steered_generate(lab.model, lab.prefixes[2], lab.attr, 0, off, g1);
  auto plain = generate(lab.model, lab.prefixes[2], 7, 10, 3, g2);
  REQUIRE(steered.hypotheses.size() == plain.size());
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(steered.hypotheses[i].ids == plain[i].ids);
}

TEST_CASE("re-ranking returns the argmin attribute loss") {
  StyleLab& lab = StyleLab::instance();
  SteeringConfig cfg;
  cfg.iterations = 2;
  cfg.step_size = 0.03;
  cfg.fusion_exponent = 0.8;
  cfg.n_hypotheses = 5;
  cfg.max_new = 6;
  Rng g(23);
  SteeredResult res = steered_generate(lab.model, lab.prefixes[3], lab.attr, 0, cfg, g);
  for (const auto& hyp : res.hypotheses) {
    if (hyp.ids.empty()) continue;
    double rescored = attribute_loss(lab.model, lab.attr, lab.prefixes[3].ids, hyp.ids, 0);
    CHECK(rescored == Catch::Approx(hyp.attr_loss).margin(1e-12));
    CHECK(res.hypotheses[res.chosen].attr_loss <= hyp.attr_loss);
  }
}

TEST_CASE("steering presets carry the appendix hyperparameters") {
  auto presets = steering_presets();
  REQUIRE(presets.count("negative") == 1);
  const SteeringConfig& neg = presets["negative"];
  CHECK(neg.step_size == 0.02);
  CHECK(neg.iterations == 75);
  CHECK(neg.norm_exponent == 1.0);
  CHECK(neg.kl_weight == 0.01);
  REQUIRE(presets.count("positive") == 1);
  CHECK(presets["positive"].iterations == 25);
}

TEST_CASE("word bag picks class-discriminative tokens") {
  Rng rng(27);
  std::vector<LabeledSentence> corpus;
  for (int i = 0; i < 60; ++i) {
    LabeledSentence s;
    s.label = i % 2;
    s.ids = style_tokens(s.label, 6, rng);
    corpus.push_back(s);
  }
  auto bag = build_word_bag(corpus, 0, 33, 10);
  REQUIRE(bag.size() == 10);
  for (std::size_t id : bag) {
    CHECK(id >= 7);
    CHECK(id < 17);  // style-A marker range
  }
}

TEST_CASE("steering sweep grid") {
  StyleLab& lab = StyleLab::instance();
  SteeringConfig base;
  base.kl_weight = 0.01;
  base.fusion_exponent = 0.8;
  base.top_k = 10;
  base.max_new = 6;
  std::vector<TokenSequence> prefixes(lab.prefixes.begin(), lab.prefixes.begin() + 4);
  Rng g(29);
  auto grid = sweep_steering_grid(lab.model, lab.attr, lab.attr, 0, prefixes, {0, 6},
                                  {0.0, 0.05, 0.3, 1.5}, base, g);
  REQUIRE(grid.size() == 8);

  SECTION("p=0 column constant across alpha") {
    std::vector<const SweepCell*> p0;
    for (const auto& cell : grid)
      if (cell.iterations == 0) p0.push_back(&cell);
    REQUIRE(p0.size() == 4);
    for (std::size_t i = 1; i < p0.size(); ++i) {
      CHECK(p0[i]->attr_loss == p0[0]->attr_loss);
      CHECK(p0[i]->ppl == p0[0]->ppl);
    }
  }

  SECTION("perplexity trends upward in alpha at fixed large p") {
    std::vector<double> alphas, ppls;
    for (const auto& cell : grid)
      if (cell.iterations == 6) {
        alphas.push_back(cell.step_size);
        ppls.push_back(cell.ppl);
      }
    REQUIRE(alphas.size() == 4);
    CHECK(metrics::spearman_rho(alphas, ppls) > 0.0);
  }

  SECTION("empty grid is rejected") {
    CHECK_THROWS_AS(
        sweep_steering_grid(lab.model, lab.attr, lab.attr, 0, prefixes, {}, {0.1}, base, g),
        ContractError);
  }
}

TEST_CASE("distillation produces an adapter that beats PPLM on style") {
  StyleLab& lab = StyleLab::instance();
  DecoderModel model = lab.model.clone();  // keep the shared fixture pristine

  SECTION("empty prefix list is rejected") {
    DistillConfig dc;
    Rng g(1);
    CHECK_THROWS_AS(distill_attribute(model, lab.attr, 0, {}, dc, g), ContractError);
  }

  SECTION("distilled adapter generates on-style without steering") {
    DistillConfig dc;
    dc.steering.iterations = 6;
    dc.steering.step_size = 0.03;
    dc.steering.kl_weight = 0.01;
    dc.steering.fusion_exponent = 0.8;
    dc.steering.top_k = 10;
    dc.steering.n_hypotheses = 3;
    dc.steering.max_new = 8;
    dc.adapter_training.optimizer.lr = 3e-3;
    dc.adapter_training.batch_size = 8;
    dc.adapter_training.epochs = 30;
    dc.adapter_training.seed = 17;
    dc.bottleneck = 8;
    Rng prng(41);
    std::vector<TokenSequence> prefixes;
    for (int i = 0; i < 20; ++i) {
      TokenSequence t;
      t.ids.push_back(tok::kBos);
      for (auto id : neutral_tokens(3, prng)) t.ids.push_back(id);
      prefixes.push_back(t);
    }
    Rng g(19);
    DistillResult dr = distill_attribute(model, lab.attr, 0, prefixes, dc, g);
    CHECK(dr.label == "styleA");
    CHECK(dr.dataset.size() >= 10);
    CHECK(dr.heldout_prefixes.size() == prefixes.size() - 16);

    const AdapterParams* adapter = &model.adapters.get(dr.label);
    Rng g2(23);
    int on_style = 0, total = 0;
    for (const auto& prefix : prefixes) {
      auto outs = generate(model, prefix, 8, 10, 1, g2, adapter);
      if (outs[0].ids.empty()) continue;
      on_style +=
          attribute_predict(lab.attr, pooled_hidden(model, outs[0].ids, 0)) == 0;
      ++total;
    }
    REQUIRE(total > 0);
    CHECK(static_cast<double>(on_style) / total >= 0.8);
  }
}
