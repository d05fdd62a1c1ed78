#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctrlseq/model.hpp"
#include "ctrlseq/train.hpp"

namespace ctrlseq::experts {

using ctrlseq::LayerParams;

// r independently parameterized decoder layers plus the key matrix used to
// attend over them. Each expert is one full decoder layer's parameter set.
struct ExpertBank {
  std::vector<LayerParams> experts;
  Tensor keys;  // d x r
  std::vector<std::string> skill_labels;

  std::size_t size() const { return experts.size(); }

  static ExpertBank init(std::size_t r, std::size_t d, std::size_t ffn,
                         std::vector<std::string> labels, Rng& rng) {
    if (r == 0) throw ConfigError("expert bank: need at least one expert");
    if (labels.size() != r) throw ConfigError("expert bank: one label per expert required");
    ExpertBank bank;
    for (std::size_t i = 0; i < r; ++i) bank.experts.push_back(LayerParams::init(d, ffn, rng));
    bank.keys = Tensor::randn({d, r}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    bank.skill_labels = std::move(labels);
    return bank;
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    for (auto& e : experts) e.collect(out);
    out.push_back(keys);
    return out;
  }
};

// Binary multi-hot prior over experts.
struct SkillVector {
  std::vector<int> bits;

  void validate(std::size_t r) const {
    if (bits.size() != r) throw DimensionError("skill vector: length mismatch");
    bool any = false;
    for (int b : bits) {
      if (b != 0 && b != 1) throw ContractError("skill vector: entries must be 0/1");
      any = any || b == 1;
    }
    if (!any) throw ContractError("skill vector: at least one active skill required");
  }
};

struct SkillAttention {
  Tensor query;               // 1 x d
  Tensor logits;              // 1 x r (qK)
  std::vector<double> alpha;  // simplex over experts
};

// q = GRU-over-H final state, alpha = Softmax(qK).
inline SkillAttention skill_attention(const Tensor& h_context, const ExpertBank& bank,
                                      const GruParams& query_gru) {
  if (bank.size() == 0) throw ContractError("skill_attention: empty bank");
  SkillAttention att;
  att.query = gru_encode(h_context, query_gru);
  att.logits = matmul(att.query, bank.keys);
  att.alpha = softmax_probs(att.logits);
  return att;
}

inline void validate_simplex(const std::vector<double>& alpha, std::size_t r) {
  if (alpha.size() != r) throw DimensionError("alpha: length mismatch");
  double total = 0.0;
  for (double a : alpha) {
    if (a < 0.0) throw ContractError("alpha: negative weight");
    total += a;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ContractError("alpha: weights must sum to 1");
}

// theta* = sum_i alpha_i * theta_i over every parameter container. Zero
// weights contribute nothing, so a one-hot alpha copies its expert bitwise.
inline LayerParams mix_parameters(const ExpertBank& bank, const std::vector<double>& alpha) {
  validate_simplex(alpha, bank.size());
  auto mix = [&](auto member) {
    Tensor out((bank.experts[0].*member).shape());
    for (std::size_t i = 0; i < bank.size(); ++i) {
      if (alpha[i] == 0.0) continue;
      const Tensor& src = bank.experts[i].*member;
      if (src.shape() != out.shape()) throw DimensionError("mix_parameters: incongruent experts");
      for (std::size_t j = 0; j < out.size(); ++j) out.at(j) += alpha[i] * src.at(j);
    }
    return out;
  };
  LayerParams m;
  m.ln1_scale = mix(&LayerParams::ln1_scale);
  m.ln1_shift = mix(&LayerParams::ln1_shift);
  m.wq = mix(&LayerParams::wq);
  m.bq = mix(&LayerParams::bq);
  m.wk = mix(&LayerParams::wk);
  m.bk = mix(&LayerParams::bk);
  m.wv = mix(&LayerParams::wv);
  m.bv = mix(&LayerParams::bv);
  m.wo = mix(&LayerParams::wo);
  m.bo = mix(&LayerParams::bo);
  m.ln2_scale = mix(&LayerParams::ln2_scale);
  m.ln2_shift = mix(&LayerParams::ln2_shift);
  m.ff1 = mix(&LayerParams::ff1);
  m.ff1_b = mix(&LayerParams::ff1_b);
  m.ff2 = mix(&LayerParams::ff2);
  m.ff2_b = mix(&LayerParams::ff2_b);
  return m;
}

// f_{theta*}(X): one forward through the layer parameterized by the mixed set.
inline Tensor aop_forward(const Tensor& x, const ExpertBank& bank,
                          const std::vector<double>& alpha, std::size_t n_heads) {
  LayerParams mixed = mix_parameters(bank, alpha);
  return decoder_layer_block(x, mixed, n_heads);
}

// sum_i alpha_i f_{theta_i}(X): every expert runs, outputs are blended.
// AoR mixes decoder-layer output representations; MoE is the same weighted
// representation sum in the cost-model sense.
inline Tensor representation_mix_forward(const Tensor& x, const ExpertBank& bank,
                                         const std::vector<double>& alpha, std::size_t n_heads) {
  validate_simplex(alpha, bank.size());
  Tensor out(x.shape());
  bool first = true;
  for (std::size_t i = 0; i < bank.size(); ++i) {
    if (alpha[i] == 0.0) continue;
    Tensor yi = decoder_layer_block(x, bank.experts[i], n_heads);
    if (first && alpha[i] == 1.0) {
      out = yi;  // one-hot stays bitwise identical to the expert forward
      first = false;
      continue;
    }
    first = false;
    out = add(out, scale(yi, alpha[i]));
  }
  return out;
}

inline Tensor aor_forward(const Tensor& x, const ExpertBank& bank,
                          const std::vector<double>& alpha, std::size_t n_heads) {
  return representation_mix_forward(x, bank, alpha, n_heads);
}

inline Tensor moe_forward(const Tensor& x, const ExpertBank& bank,
                          const std::vector<double>& alpha, std::size_t n_heads) {
  return representation_mix_forward(x, bank, alpha, n_heads);
}

// Binary cross-entropy between sigmoid(qK) and the multi-hot skill vector;
// probabilities clamped at 1e-12.
inline Tensor skill_loss(const Tensor& attention_logits, const SkillVector& skills) {
  std::size_t r = attention_logits.size();
  skills.validate(r);
  Tensor probs = sigmoid(attention_logits);
  Tensor hot(probs.shape());
  Tensor cold(probs.shape());
  for (std::size_t i = 0; i < r; ++i) {
    hot.at(i) = static_cast<double>(skills.bits[i]);
    cold.at(i) = 1.0 - hot.at(i);
  }
  Tensor one(probs.shape(), 1.0);
  Tensor pos = mul(hot, log_op(probs));
  Tensor negt = mul(cold, log_op(sub(one, probs)));
  return neg(sum(add(pos, negt)));
}

// ---- cost model ---------------------------------------------------------------

enum class MixMode { AoP, AoR, MoE };

inline const char* to_string(MixMode m) {
  switch (m) {
    case MixMode::AoP: return "AoP";
    case MixMode::AoR: return "AoR";
    case MixMode::MoE: return "MoE";
  }
  return "?";
}

struct OpCount {
  MixMode mode;
  std::size_t r, t, d, n;
  std::uint64_t tally;
};

// Closed forms from the cost theorem: MoE (and AoR) pay r*t*d*n + r*t*n
// multiply-accumulates, AoP pays (r + t)*d*n.
inline std::uint64_t flop_closed_form(MixMode mode, std::size_t r, std::size_t t, std::size_t d,
                                      std::size_t n) {
  if (r < 1 || t < 1 || d < 1 || n < 1) throw ConfigError("flop_count: arguments must be >= 1");
  std::uint64_t R = r, T = t, D = d, N = n;
  if (mode == MixMode::AoP) return (R + T) * D * N;
  return R * T * D * N + R * T * N;
}

inline OpCount flop_count(MixMode mode, std::size_t r, std::size_t t, std::size_t d,
                          std::size_t n) {
  return {mode, r, t, d, n, flop_closed_form(mode, r, t, d, n)};
}

// Scalar that tallies every multiply-accumulate it participates in; running
// the affine-expert forward with it reproduces the closed forms exactly.
struct CountingScalar {
  double value = 0.0;
  static inline thread_local std::uint64_t macs = 0;
};

inline void mac_into(double& acc, double a, double b) { acc += a * b; }
inline void mac_into(CountingScalar& acc, CountingScalar a, CountingScalar b) {
  acc.value += a.value * b.value;
  ++CountingScalar::macs;
}

template <typename S>
struct AffineExperts {
  std::size_t r, t, d, n;
  std::vector<S> x;                // t x d
  std::vector<std::vector<S>> w;  // r matrices, d x n
  std::vector<S> alpha;            // r

  static AffineExperts seeded(std::size_t r, std::size_t t, std::size_t d, std::size_t n,
                              Rng& rng) {
    AffineExperts e;
    e.r = r;
    e.t = t;
    e.d = d;
    e.n = n;
    e.x.resize(t * d);
    for (auto& v : e.x) v = make(rng.uniform(-1.0, 1.0));
    e.w.resize(r);
    for (auto& m : e.w) {
      m.resize(d * n);
      for (auto& v : m) v = make(rng.uniform(-1.0, 1.0));
    }
    std::vector<double> raw(r);
    double z = 0.0;
    for (auto& v : raw) {
      v = rng.uniform(0.01, 1.0);
      z += v;
    }
    for (std::size_t i = 0; i < r; ++i) e.alpha.push_back(make(raw[i] / z));
    return e;
  }

  static S make(double v) {
    if constexpr (std::is_same_v<S, double>)
      return v;
    else
      return S{v};
  }

  // MoE(X) = sum_i alpha_i * (X W_i): r full affine passes plus the weighted
  // representation sum.
  std::vector<S> moe() const {
    std::vector<S> out(t * n, make(0.0));
    for (std::size_t i = 0; i < r; ++i) {
      std::vector<S> yi(t * n, make(0.0));
      for (std::size_t a = 0; a < t; ++a)
        for (std::size_t k = 0; k < d; ++k)
          for (std::size_t b = 0; b < n; ++b) mac_into(yi[a * n + b], x[a * d + k], w[i][k * n + b]);
      for (std::size_t j = 0; j < t * n; ++j) mac_into(out[j], alpha[i], yi[j]);
    }
    return out;
  }

  // AoP(X) = X (sum_i alpha_i W_i): one parameter sum plus one affine pass.
  std::vector<S> aop() const {
    std::vector<S> mixed(d * n, make(0.0));
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < d * n; ++j) mac_into(mixed[j], alpha[i], w[i][j]);
    std::vector<S> out(t * n, make(0.0));
    for (std::size_t a = 0; a < t; ++a)
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t b = 0; b < n; ++b) mac_into(out[a * n + b], x[a * d + k], mixed[k * n + b]);
    return out;
  }
};

// Executes the affine cost model with the counting scalar and reports the
// exact multiply-accumulate tally.
inline OpCount instrumented_flop_count(MixMode mode, std::size_t r, std::size_t t, std::size_t d,
                                       std::size_t n, std::uint64_t seed = 7) {
  Rng rng(seed);
  auto experts = AffineExperts<CountingScalar>::seeded(r, t, d, n, rng);
  CountingScalar::macs = 0;
  if (mode == MixMode::AoP)
    experts.aop();
  else
    experts.moe();
  return {mode, r, t, d, n, CountingScalar::macs};
}

// ---- full mixing model ----------------------------------------------------------

struct AopSample {
  EncodedPair pair;
  SkillVector skills;
};

// Causal LM whose single decoder layer is produced by attention over the
// expert bank (AoP), or whose per-expert outputs are blended (AoR/MoE). The
// query GRU reads the embedded input segment.
class AopModel {
 public:
  ModelConfig config;
  EmbeddingTable embedding;
  ExpertBank bank;
  GruParams query_gru;
  Tensor final_ln_scale, final_ln_shift;
  Tensor lm_head;
  MixMode mode = MixMode::AoP;
  bool use_oracle_alpha = false;  // train against the gold skill vector

  static AopModel init(const ModelConfig& cfg, std::vector<std::string> skill_labels, Rng& rng) {
    cfg.validate();
    AopModel m;
    m.config = cfg;
    m.embedding = EmbeddingTable::init(cfg, rng);
    std::size_t r = skill_labels.size();
    m.bank = ExpertBank::init(r, cfg.d_model, cfg.ffn_dim, std::move(skill_labels), rng);
    m.query_gru = GruParams::init(cfg.d_model, cfg.d_model, rng);
    m.final_ln_scale = Tensor({cfg.d_model}, 1.0);
    m.final_ln_shift = Tensor({cfg.d_model}, 0.0);
    m.lm_head = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng,
                              1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    for (auto& t : m.parameters()) t.set_requires_grad(true);
    return m;
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    out.push_back(embedding.word);
    auto bank_params = bank.parameters();
    out.insert(out.end(), bank_params.begin(), bank_params.end());
    auto gru_params = query_gru.parameters();
    out.insert(out.end(), gru_params.begin(), gru_params.end());
    out.push_back(final_ln_scale);
    out.push_back(final_ln_shift);
    out.push_back(lm_head);
    return out;
  }

  // Attention over the bank computed from the input segment.
  SkillAttention attend(const std::vector<std::size_t>& input_ids) const {
    TokenSequence seq;
    seq.ids = input_ids;
    Tensor h = embed(seq, embedding, 0);
    return skill_attention(h, bank, query_gru);
  }

  static std::vector<double> alpha_from_skills(const SkillVector& v) {
    double hot = 0.0;
    for (int b : v.bits) hot += b;
    std::vector<double> alpha(v.bits.size(), 0.0);
    for (std::size_t i = 0; i < alpha.size(); ++i)
      alpha[i] = static_cast<double>(v.bits[i]) / hot;
    return alpha;
  }

  Tensor forward_with_alpha(const TokenSequence& seq, const std::vector<double>& alpha) const {
    Tensor x = embed(seq, embedding, 0);
    if (mode == MixMode::AoP) {
      LayerParams mixed = mix_parameters(bank, alpha);
      for (std::size_t hop = 0; hop < config.hops; ++hop)
        x = decoder_layer_block(x, mixed, config.n_heads);
    } else {
      for (std::size_t hop = 0; hop < config.hops; ++hop)
        x = representation_mix_forward(x, bank, alpha, config.n_heads);
    }
    Tensor hidden = layer_norm(x, final_ln_scale, final_ln_shift);
    return matmul(hidden, lm_head);
  }

  // Fixed-alpha generation; the skill attention is skipped entirely.
  std::vector<std::size_t> generate_with_alpha(const std::vector<std::size_t>& input_ids,
                                               const std::vector<double>& alpha,
                                               std::size_t max_new, std::size_t k,
                                               Rng& rng) const {
    std::vector<std::size_t> seq;
    seq.push_back(tok::kBos);
    seq.insert(seq.end(), input_ids.begin(), input_ids.end());
    std::vector<std::size_t> out;
    // AoP mixes parameters once; generation is a plain decode afterwards
    for (std::size_t i = 0; i < max_new && seq.size() < config.max_len; ++i) {
      TokenSequence t;
      t.ids = seq;
      Tensor logits = forward_with_alpha(t, alpha);
      Tensor last = row(logits, logits.rows() - 1);
      std::size_t id = k <= 1 ? argmax_token(last) : sample_top_k(last, k, rng);
      if (id == tok::kEos) break;
      out.push_back(id);
      seq.push_back(id);
    }
    return out;
  }

  // Manual skill triggering: a valid simplex passes through, a multi-hot 0/1
  // vector is renormalized, anything else is rejected.
  std::vector<std::size_t> compose_skills(const std::vector<double>& alpha_override,
                                          const std::vector<std::size_t>& input_ids,
                                          std::size_t max_new, std::size_t k, Rng& rng) const {
    std::vector<double> alpha = normalize_override(alpha_override);
    return generate_with_alpha(input_ids, alpha, max_new, k, rng);
  }

  std::vector<double> normalize_override(const std::vector<double>& raw) const {
    if (raw.size() != bank.size()) throw DimensionError("alpha override: length mismatch");
    double total = 0.0;
    bool multi_hot = true;
    for (double v : raw) {
      if (v < 0.0) throw ContractError("alpha override: negative weight");
      multi_hot = multi_hot && (v == 0.0 || v == 1.0);
      total += v;
    }
    if (std::fabs(total - 1.0) <= 1e-9) return raw;
    if (!multi_hot || total == 0.0)
      throw ContractError("alpha override: need a simplex or a nonzero multi-hot vector");
    std::vector<double> alpha(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) alpha[i] = raw[i] / total;
    return alpha;
  }
};

struct AopTrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
};

struct AopTrainReport {
  std::vector<double> nll_losses;    // per epoch
  std::vector<double> skill_losses;  // per epoch
};

// Joint training: sequence NLL plus skill BCE, unweighted sum.
inline AopTrainReport train_aop(AopModel& model, const std::vector<AopSample>& data,
                                const AopTrainConfig& cfg) {
  if (data.empty()) throw ContractError("train_aop: empty dataset");
  Optimizer opt(model.parameters(), cfg.optimizer);
  Rng order_rng = Rng(cfg.seed).split(0xA0B);
  AopTrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    double nll_sum = 0.0, skill_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      Tape tape;
      Tensor nll_total = Tensor::scalar(0.0);
      Tensor skill_total = Tensor::scalar(0.0);
      std::size_t count = 0;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        const AopSample& sample = data[order[i]];
        sample.skills.validate(model.bank.size());
        SkillAttention att = model.attend(sample.pair.input_ids);
        Tensor bce = skill_loss(att.logits, sample.skills);
        std::vector<double> alpha =
            model.use_oracle_alpha ? AopModel::alpha_from_skills(sample.skills) : att.alpha;
        EncodedBatchItem item = encode_for_lm(sample.pair, model.config, LossMask::OutputOnly);
        Tensor logits = model.forward_with_alpha(item.tokens, alpha);
        Tensor nll = nll_masked(logits, item.targets, item.mask);
        nll_total = add(nll_total, nll);
        skill_total = add(skill_total, bce);
        ++count;
      }
      Tensor loss = add(scale(nll_total, 1.0 / count), scale(skill_total, 1.0 / count));
      if (!std::isfinite(loss.value()))
        throw NumericError("train_aop: non-finite loss");
      tape.backward(loss);
      opt.step();
      nll_sum += nll_total.value() / count;
      skill_sum += skill_total.value() / count;
      ++batches;
    }
    report.nll_losses.push_back(nll_sum / batches);
    report.skill_losses.push_back(skill_sum / batches);
  }
  return report;
}

}  // namespace ctrlseq::experts
