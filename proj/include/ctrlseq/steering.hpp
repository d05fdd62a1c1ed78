#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ctrlseq/model.hpp"
#include "ctrlseq/train.hpp"

namespace ctrlseq {

// Linear classifier over mean-pooled final-layer hidden states of the frozen
// base model; the discriminator PPLM climbs.
struct AttributeModel {
  Tensor weight;  // d x C
  Tensor bias;    // C
  std::vector<std::string> labels;

  std::size_t n_classes() const { return bias.size(); }
};

struct SteeringConfig {
  double step_size = 0.02;      // alpha
  double norm_exponent = 1.0;   // gamma
  std::size_t iterations = 0;   // p
  double kl_weight = 0.01;      // lambda_KL
  bool kl_separate_step = false;
  double fusion_exponent = 0.0;  // gamma_gm in [0, 1]
  std::size_t top_k = 10;
  std::size_t n_hypotheses = 1;
  std::size_t max_new = 16;
  double wd_weight = 0.0;  // weighted-decoding bag boost
  std::vector<std::size_t> wd_bag;
  bool accumulate_delta = false;  // carry the delta across tokens instead of re-zeroing
  bool log_objective = false;     // record per-iteration attribute log-likelihood

  void validate() const {
    if (step_size < 0.0) throw ConfigError("steering: step_size must be >= 0");
    if (fusion_exponent < 0.0 || fusion_exponent > 1.0)
      throw ConfigError("steering: fusion exponent must lie in [0,1]");
  }
};

// Appendix-named hyperparameter rows exposed as CLI presets.
inline std::map<std::string, SteeringConfig> steering_presets() {
  auto base = []() {
    SteeringConfig c;
    c.step_size = 0.02;
    c.iterations = 75;
    c.norm_exponent = 1.0;
    c.kl_weight = 0.01;
    c.fusion_exponent = 0.8;
    c.top_k = 10;
    c.n_hypotheses = 10;
    return c;
  };
  std::map<std::string, SteeringConfig> presets;
  for (const char* name : {"negative", "question", "business", "sports", "scitech"})
    presets[name] = base();
  SteeringConfig positive = base();
  positive.iterations = 25;
  presets["positive"] = positive;
  return presets;
}

// Per-layer, per-position offsets congruent with the DecoderState they perturb.
struct SteeringDelta {
  struct LayerDelta {
    Tensor dk, dv;
  };
  std::vector<LayerDelta> layers;

  static SteeringDelta zeros_like(const DecoderState& state) {
    SteeringDelta d;
    d.layers.reserve(state.layers.size());
    for (const auto& l : state.layers)
      d.layers.push_back({Tensor(l.k.shape()), Tensor(l.v.shape())});
    return d;
  }

  // Grows every layer delta to `rows` rows, padding new positions with zero.
  SteeringDelta padded_to(std::size_t rows) const {
    SteeringDelta out;
    out.layers.reserve(layers.size());
    for (const auto& l : layers) {
      std::size_t d = l.dk.cols();
      Tensor k({rows, d}), v({rows, d});
      for (std::size_t i = 0; i < l.dk.size(); ++i) k.at(i) = l.dk.at(i);
      for (std::size_t i = 0; i < l.dv.size(); ++i) v.at(i) = l.dv.at(i);
      out.layers.push_back({k, v});
    }
    return out;
  }
};

namespace detail {

// Temporarily drops requires_grad on the base parameters so steering tapes
// only track the delta leaves.
class FreezeBaseGuard {
 public:
  explicit FreezeBaseGuard(DecoderModel& model) : model_(model) {
    for (auto& p : model_.parameters()) {
      flags_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeBaseGuard() {
    auto params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].set_requires_grad(flags_[i]);
  }

 private:
  DecoderModel& model_;
  std::vector<bool> flags_;
};

}  // namespace detail

// Mean final-layer hidden state over the token rows starting at `pool_from`
// (0 = the whole sentence); the attribute models' input representation.
inline Tensor pooled_hidden(const DecoderModel& model, const std::vector<std::size_t>& ids,
                            std::size_t pool_from) {
  TokenSequence seq;
  seq.ids.push_back(tok::kBos);
  seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  ForwardResult fwd = model.forward(seq);
  std::size_t rows = fwd.hidden.rows();
  if (1 + pool_from >= rows) throw ContractError("pooled_hidden: nothing to pool");
  std::size_t d = fwd.hidden.cols();
  Tensor pooled({d});
  std::size_t n = 0;
  for (std::size_t r = 1 + pool_from; r < rows; ++r, ++n)  // BOS row skipped
    for (std::size_t j = 0; j < d; ++j) pooled.at(j) += fwd.hidden.at(r, j);
  for (std::size_t j = 0; j < d; ++j) pooled.at(j) /= static_cast<double>(n);
  return pooled;
}

struct AttributeTrainConfig {
  double lr = 0.05;
  std::size_t epochs = 60;
  std::uint64_t seed = 0;
};

struct LabeledSentence {
  std::vector<std::size_t> ids;
  std::size_t label = 0;
};

// Cross-entropy training of the linear head on frozen-model features.
inline AttributeModel train_attribute_model(const DecoderModel& model,
                                            const std::vector<LabeledSentence>& corpus,
                                            std::vector<std::string> labels,
                                            const AttributeTrainConfig& cfg = {}) {
  if (corpus.empty()) throw DataError("attribute model: empty corpus");
  std::size_t n_classes = labels.size();
  std::vector<bool> seen(n_classes, false);
  for (const auto& s : corpus) {
    if (s.label >= n_classes) throw IndexError("attribute model: label out of range");
    seen[s.label] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2)
    throw DataError("attribute model: corpus covers fewer than two classes");

  std::size_t d = model.config.d_model;
  Tensor features({corpus.size(), d});
  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    Tensor h = pooled_hidden(model, corpus[i].ids, 0);
    for (std::size_t j = 0; j < d; ++j) features.at(i, j) = h.at(j);
    targets.push_back(corpus[i].label);
  }

  AttributeModel attr;
  Rng rng = Rng(cfg.seed).split(0xA77);
  attr.weight = Tensor::randn({d, n_classes}, rng, 0.01).set_requires_grad(true);
  attr.bias = Tensor({n_classes}, 0.0).set_requires_grad(true);
  attr.labels = std::move(labels);

  Optimizer opt({attr.weight, attr.bias}, {OptimizerKind::Adam, cfg.lr, 0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tape tape;
    Tensor logits = add(matmul(features, attr.weight), attr.bias);
    Tensor loss = cross_entropy(logits, targets);
    tape.backward(loss);
    opt.step();
  }
  attr.weight.set_requires_grad(false);
  attr.bias.set_requires_grad(false);
  return attr;
}

inline std::size_t attribute_predict(const AttributeModel& attr, const Tensor& pooled) {
  Tensor logits = add(matmul(Tensor::from({1, pooled.size()}, pooled.data()), attr.weight),
                      attr.bias);
  return argmax_token(logits);
}

// -log p(a | response) under the attribute head, pooling the response rows of
// a prefix+response forward pass. The re-ranking score.
inline double attribute_loss(const DecoderModel& model, const AttributeModel& attr,
                             const std::vector<std::size_t>& prefix,
                             const std::vector<std::size_t>& response, std::size_t target) {
  std::vector<std::size_t> all = prefix;
  all.insert(all.end(), response.begin(), response.end());
  Tensor pooled = pooled_hidden(model, all, prefix.size());
  Tensor logits = add(matmul(Tensor::from({1, pooled.size()}, pooled.data()), attr.weight),
                      attr.bias);
  Tensor ls = log_softmax(logits);
  return -ls.at(target);
}

// fused(i) proportional to p_pert(i)^g * p_orig(i)^(1-g). The exponent limits
// return their argument unchanged so degenerate configs stay bitwise faithful.
inline std::vector<double> fuse_distributions(const std::vector<double>& p_pert,
                                              const std::vector<double>& p_orig,
                                              double fusion_exponent) {
  if (p_pert.size() != p_orig.size())
    throw DimensionError("fuse_distributions: support mismatch");
  if (fusion_exponent == 0.0) return p_orig;
  if (fusion_exponent == 1.0) return p_pert;
  std::vector<double> fused(p_pert.size());
  double z = 0.0;
  for (std::size_t i = 0; i < fused.size(); ++i) {
    fused[i] = std::pow(p_pert[i], fusion_exponent) * std::pow(p_orig[i], 1.0 - fusion_exponent);
    z += fused[i];
  }
  if (!(z > 0.0)) throw NumericError("fuse_distributions: zero normalizer");
  for (double& v : fused) v /= z;
  return fused;
}

// Adds w to the logits of every bag token.
inline Tensor weighted_decode(const Tensor& logits, const std::vector<std::size_t>& bag,
                              double weight) {
  if (bag.empty()) throw ContractError("weighted_decode: empty bag");
  if (weight == 0.0) return logits;
  Tensor out = logits.clone();
  for (std::size_t id : bag) {
    if (id >= out.size()) throw IndexError("weighted_decode: bag token out of range");
    out.at(id) += weight;
  }
  return out;
}

// Top-N class-discriminative tokens by add-one-smoothed log odds; the
// weighted-decoding bag.
inline std::vector<std::size_t> build_word_bag(const std::vector<LabeledSentence>& corpus,
                                               std::size_t target, std::size_t vocab_size,
                                               std::size_t top_n = 50) {
  std::vector<double> in_class(vocab_size, 1.0), out_class(vocab_size, 1.0);
  double in_total = static_cast<double>(vocab_size), out_total = static_cast<double>(vocab_size);
  for (const auto& s : corpus)
    for (std::size_t id : s.ids) {
      if (id >= vocab_size) continue;
      if (s.label == target) {
        in_class[id] += 1.0;
        in_total += 1.0;
      } else {
        out_class[id] += 1.0;
        out_total += 1.0;
      }
    }
  std::vector<std::size_t> order(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) order[i] = i;
  std::vector<double> score(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i)
    score[i] = std::log(in_class[i] / in_total) - std::log(out_class[i] / out_total);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  order.resize(std::min(top_n, vocab_size));
  return order;
}

struct PerturbResult {
  DecoderState state;
  SteeringDelta delta;
  std::vector<double> attr_loglik;  // log p(a | F + dF) per iteration (when logged)
  bool aborted = false;
};

// The PPLM update: dF <- dF + alpha * grad log p(a | F + dF) / ||grad||^gamma,
// repeated p times, with the KL term toward the unperturbed next-token
// distribution folded into each step's gradient (or taken as its own step
// when kl_separate_step is set). Each iteration recomputes the forward pass
// from the perturbed cache. Only the delta moves; the caller's state and the
// base parameters stay untouched. A non-finite gradient aborts steering for
// this token and the unperturbed state is reported back.
inline PerturbResult perturb_history(const DecoderState& state, const AttributeModel& attr,
                                     std::size_t target, const SteeringConfig& cfg,
                                     DecoderModel& model, std::size_t current_token,
                                     const Tensor& response_hidden_sum,
                                     std::size_t response_hidden_count,
                                     const SteeringDelta* initial_delta = nullptr) {
  cfg.validate();
  PerturbResult result;
  result.state = state;
  result.delta = SteeringDelta::zeros_like(state);
  if (cfg.iterations == 0 || cfg.step_size == 0.0 || state.length == 0) return result;

  detail::FreezeBaseGuard freeze(model);

  if (initial_delta != nullptr) result.delta = initial_delta->padded_to(state.length);
  SteeringDelta& delta = result.delta;

  // unperturbed next-token log-probabilities for the KL term
  std::vector<double> log_orig;
  if (cfg.kl_weight > 0.0) {
    StepResult orig = model.step(current_token, state);
    log_orig = softmax_probs(orig.logits);
    for (double& v : log_orig) v = std::log(std::max(v, 1e-12));
  }

  double inv_count = 1.0 / static_cast<double>(response_hidden_count + 1);

  auto build_objective = [&](bool include_attr, bool include_kl, std::vector<Tensor>* leaves,
                             double* attr_ll_out) -> Tensor {
    DecoderState perturbed;
    perturbed.length = state.length;
    perturbed.layers.resize(state.layers.size());
    for (std::size_t i = 0; i < state.layers.size(); ++i) {
      if (leaves != nullptr) {
        delta.layers[i].dk.set_requires_grad(true);
        delta.layers[i].dv.set_requires_grad(true);
        leaves->push_back(delta.layers[i].dk);
        leaves->push_back(delta.layers[i].dv);
      }
      perturbed.layers[i].k = add(state.layers[i].k, delta.layers[i].dk);
      perturbed.layers[i].v = add(state.layers[i].v, delta.layers[i].dv);
    }
    StepResult st = model.step(current_token, perturbed);
    Tensor objective = Tensor::scalar(0.0);
    if (include_attr) {
      Tensor pooled = scale(add(st.hidden, response_hidden_sum), inv_count);
      Tensor attr_logits = add(matmul(pooled, attr.weight), attr.bias);
      objective = pick(log_softmax(attr_logits), target);
      if (attr_ll_out != nullptr) *attr_ll_out = objective.value();
    }
    if (include_kl && cfg.kl_weight > 0.0) {
      Tensor p_pert = softmax(st.logits);
      Tensor log_ref = Tensor::from({1, log_orig.size()}, log_orig);
      Tensor kl = sum(mul(p_pert, sub(log_op(p_pert), log_ref)));
      objective = sub(objective, scale(kl, cfg.kl_weight));
    }
    return objective;
  };

  auto ascend = [&](bool include_attr, bool include_kl) -> bool {
    Tape tape;
    std::vector<Tensor> leaves;
    Tensor objective = build_objective(include_attr, include_kl, &leaves, nullptr);
    tape.backward(objective);
    bool finite = true;
    for (auto& leaf : leaves) {
      double norm = 0.0;
      for (double g : leaf.grad()) norm += g * g;
      if (!std::isfinite(norm)) {
        finite = false;
        break;
      }
      double denom = std::pow(std::sqrt(norm), cfg.norm_exponent) + 1e-10;
      auto& d = leaf.data();
      const auto& g = leaf.grad();
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += cfg.step_size * g[j] / denom;
    }
    for (auto& leaf : leaves) leaf.set_requires_grad(false);
    return finite;
  };

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    bool ok = cfg.kl_separate_step ? (ascend(true, false) && ascend(false, true))
                                   : ascend(true, true);
    if (!ok) {
      result.aborted = true;
      result.state = state;
      result.delta = SteeringDelta::zeros_like(state);
      return result;
    }
    if (cfg.log_objective) {
      double ll = 0.0;
      build_objective(true, false, nullptr, &ll);
      result.attr_loglik.push_back(ll);
    }
  }

  DecoderState perturbed;
  perturbed.length = state.length;
  perturbed.layers.resize(state.layers.size());
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    perturbed.layers[i].k = add(state.layers[i].k, delta.layers[i].dk);
    perturbed.layers[i].v = add(state.layers[i].v, delta.layers[i].dv);
  }
  result.state = perturbed;
  return result;
}

struct SteeredHypothesis {
  std::vector<std::size_t> ids;
  double attr_loss = 0.0;
};

struct SteeredResult {
  std::vector<SteeredHypothesis> hypotheses;
  std::size_t chosen = 0;
  std::size_t incidents = 0;                             // aborted perturbations
  std::vector<std::vector<double>> attr_loglik_traces;   // one per steered token (when logged)
};

// Decodes hypotheses from the fused distribution after history perturbation
// and returns all of them with the index of the minimum-attribute-loss one.
// With steering disabled (p=0, fusion 0, wd 0) this reproduces plain
// generate() bitwise under a shared generator.
inline SteeredResult steered_generate(DecoderModel& model, const TokenSequence& prefix,
                                      const AttributeModel& attr, std::size_t target,
                                      const SteeringConfig& cfg, Rng& rng) {
  cfg.validate();
  if (prefix.size() == 0) throw ContractError("steered_generate: empty prefix");
  SteeredResult result;
  bool steer = cfg.iterations > 0 && cfg.step_size > 0.0;

  // state covering prefix[0..n-2]; the last prefix token is consumed by the
  // first loop step, mirroring o_{t+1}, F_{t+1} = LM(x_t, F_t)
  DecoderState prefix_state = model.empty_state();
  for (std::size_t i = 0; i + 1 < prefix.ids.size(); ++i)
    prefix_state = model.step(prefix.ids[i], prefix_state).state;

  for (std::size_t h = 0; h < cfg.n_hypotheses; ++h) {
    SteeredHypothesis hyp;
    if (cfg.max_new > 0) {
      DecoderState state = prefix_state;
      std::size_t token = prefix.ids.back();
      Tensor hidden_sum({1, model.config.d_model});
      std::size_t hidden_count = 0;
      SteeringDelta carry;
      bool have_carry = false;
      for (std::size_t i = 0; i < cfg.max_new && state.length < model.config.max_len; ++i) {
        StepResult orig = model.step(token, state);
        StepResult chosen_path = orig;
        if (steer && state.length > 0) {
          PerturbResult pert =
              perturb_history(state, attr, target, cfg, model, token, hidden_sum, hidden_count,
                              cfg.accumulate_delta && have_carry ? &carry : nullptr);
          if (pert.aborted) {
            ++result.incidents;
          } else {
            if (!pert.attr_loglik.empty()) result.attr_loglik_traces.push_back(pert.attr_loglik);
            chosen_path = model.step(token, pert.state);
            if (cfg.accumulate_delta) {
              carry = pert.delta;
              have_carry = true;
            }
          }
        }
        Tensor logits_orig = orig.logits;
        Tensor logits_pert = chosen_path.logits;
        if (cfg.wd_weight != 0.0 && !cfg.wd_bag.empty()) {
          logits_orig = weighted_decode(logits_orig, cfg.wd_bag, cfg.wd_weight);
          logits_pert = weighted_decode(logits_pert, cfg.wd_bag, cfg.wd_weight);
        }
        std::vector<double> p_orig = softmax_probs(logits_orig);
        std::vector<double> fused =
            (steer || cfg.fusion_exponent > 0.0)
                ? fuse_distributions(softmax_probs(logits_pert), p_orig, cfg.fusion_exponent)
                : p_orig;
        std::size_t id = sample_from_probs(fused, cfg.top_k, rng);
        if (id == tok::kEos) break;
        hyp.ids.push_back(id);
        hidden_sum = add(hidden_sum, chosen_path.hidden.detached());
        ++hidden_count;
        state = chosen_path.state;
        token = id;
      }
    }
    result.hypotheses.push_back(std::move(hyp));
  }
  // re-rank by attribute loss (exhaustively re-scored)
  for (auto& hyp : result.hypotheses)
    hyp.attr_loss = hyp.ids.empty()
                        ? std::numeric_limits<double>::infinity()
                        : attribute_loss(model, attr, prefix.ids, hyp.ids, target);
  result.chosen = 0;
  for (std::size_t i = 1; i < result.hypotheses.size(); ++i)
    if (result.hypotheses[i].attr_loss < result.hypotheses[result.chosen].attr_loss)
      result.chosen = i;
  return result;
}

struct SweepCell {
  std::size_t iterations;
  double step_size;
  double attr_loss;  // mean external-classifier loss over prefixes
  double ppl;        // mean perplexity of prefix + response under the base model
};

// Fluency/attribute grid for the contour-plot analysis. Sampling streams
// depend on (p, prefix) but not on alpha, so the p=0 column is constant
// across step sizes by construction.
inline std::vector<SweepCell> sweep_steering_grid(
    DecoderModel& model, const AttributeModel& attr, const AttributeModel& external,
    std::size_t target, const std::vector<TokenSequence>& prefixes,
    const std::vector<std::size_t>& p_values, const std::vector<double>& alpha_values,
    const SteeringConfig& base_cfg, Rng& rng) {
  if (p_values.empty() || alpha_values.empty() || prefixes.empty())
    throw ContractError("sweep: empty grid or prefix set");
  std::vector<SweepCell> grid;
  for (std::size_t p : p_values)
    for (double alpha : alpha_values) {
      SteeringConfig cfg = base_cfg;
      cfg.iterations = p;
      cfg.step_size = alpha;
      cfg.n_hypotheses = 1;
      double sum_loss = 0.0, sum_ppl = 0.0;
      for (std::size_t pi = 0; pi < prefixes.size(); ++pi) {
        Rng cell_rng = rng.split(p * 1000003 + pi);
        SteeredResult res = steered_generate(model, prefixes[pi], attr, target, cfg, cell_rng);
        const auto& ids = res.hypotheses[res.chosen].ids;
        if (ids.empty()) {
          sum_loss += std::log(static_cast<double>(external.n_classes()));
          sum_ppl += static_cast<double>(model.config.vocab_size);
          continue;
        }
        sum_loss += attribute_loss(model, external, prefixes[pi].ids, ids, target);
        std::vector<std::size_t> all = prefixes[pi].ids;
        all.insert(all.end(), ids.begin(), ids.end());
        auto [nll, count] = sequence_nll(model, all);
        sum_ppl += std::exp(nll / static_cast<double>(count));
      }
      grid.push_back({p, alpha, sum_loss / prefixes.size(), sum_ppl / prefixes.size()});
    }
  return grid;
}

struct DistillResult {
  std::string label;
  std::vector<EncodedPair> dataset;             // PPLM-generated training pairs
  std::vector<TokenSequence> heldout_prefixes;  // evaluation split
  TrainReport report;
};

struct DistillConfig {
  SteeringConfig steering;
  TrainConfig adapter_training;
  std::size_t bottleneck = 8;
  double train_fraction = 0.8;
};

// PPLM -> adapter distillation: steer responses for the training share of
// the prefixes, spawn an adapter for the attribute, and train it on the
// synthetic pairs. The remaining prefixes are returned for held-out
// evaluation.
inline DistillResult distill_attribute(DecoderModel& model, const AttributeModel& attr,
                                       std::size_t target,
                                       const std::vector<TokenSequence>& prefixes,
                                       const DistillConfig& cfg, Rng& rng) {
  if (prefixes.empty()) throw ContractError("distill: empty prefix list");
  std::vector<std::size_t> order(prefixes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng = rng.split(0xD15);
  split_rng.shuffle(order);
  std::size_t n_train = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.train_fraction * static_cast<double>(prefixes.size())));

  DistillResult result;
  result.label = attr.labels.at(target);
  Rng gen_rng = rng.split(0xD16);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i >= n_train) {
      result.heldout_prefixes.push_back(prefixes[order[i]]);
      continue;
    }
    SteeredResult res =
        steered_generate(model, prefixes[order[i]], attr, target, cfg.steering, gen_rng);
    const auto& ids = res.hypotheses[res.chosen].ids;
    if (ids.empty()) continue;
    EncodedPair pair;
    // the stored input drops the leading BOS; encode_for_lm reinserts it
    const auto& pid = prefixes[order[i]].ids;
    pair.input_ids.assign(pid.begin() + (pid.front() == tok::kBos ? 1 : 0), pid.end());
    pair.output_ids = ids;
    pair.id = result.label + "#" + std::to_string(i);
    result.dataset.push_back(std::move(pair));
  }
  if (result.dataset.empty()) throw DataError("distill: steering produced no usable pairs");

  spawn_adapter(model, result.label, cfg.bottleneck, rng);
  result.report = train_adapter(model, result.label, result.dataset, {}, cfg.adapter_training);
  return result;
}

}  // namespace ctrlseq
