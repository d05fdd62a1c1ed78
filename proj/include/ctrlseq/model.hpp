#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctrlseq/adapters.hpp"
#include "ctrlseq/errors.hpp"
#include "ctrlseq/rng.hpp"
#include "ctrlseq/tensor.hpp"
#include "ctrlseq/vocab.hpp"

namespace ctrlseq {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_len = 128;
  std::size_t hops = 1;  // universal recurrence: the layer stack is applied this many times
  double dropout = 0.0;
  bool use_aux_embeddings = false;
  std::size_t aux_vocab_size = 0;

  void validate() const {
    if (vocab_size == 0) throw ConfigError("model: vocab_size must be positive");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("model: d_model must be a positive multiple of n_heads");
    if (max_len < 1) throw ConfigError("model: max_len must be >= 1");
    if (hops < 1) throw ConfigError("model: hops must be >= 1");
    if (use_aux_embeddings && aux_vocab_size == 0)
      throw ConfigError("model: aux embeddings enabled but aux_vocab_size is 0");
  }
};

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> type_ids;     // empty or same length as ids
  std::vector<std::size_t> segment_ids;  // empty or same length as ids

  std::size_t size() const { return ids.size(); }
  bool has_aux() const { return !type_ids.empty() || !segment_ids.empty(); }
};

// Fixed sinusoidal positional encodings; entries lie in [-1, 1] and are a
// pure function of (max_len, d).
inline Tensor sinusoidal_positional_encoding(std::size_t max_len, std::size_t d) {
  Tensor pe({max_len, d});
  for (std::size_t pos = 0; pos < max_len; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
      double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      pe.at(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

struct EmbeddingTable {
  Tensor word;  // |V| x d, trainable
  Tensor pe;    // max_len x d, fixed
  Tensor aux;   // |S| x d, trainable, optional

  static EmbeddingTable init(const ModelConfig& cfg, Rng& rng) {
    EmbeddingTable e;
    e.word = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.1).set_requires_grad(true);
    e.pe = sinusoidal_positional_encoding(cfg.max_len, cfg.d_model);
    if (cfg.use_aux_embeddings)
      e.aux = Tensor::randn({cfg.aux_vocab_size, cfg.d_model}, rng, 0.1).set_requires_grad(true);
    return e;
  }
};

// Word + positional (+ type/segment when present) embeddings, one row per token.
inline Tensor embed(const TokenSequence& seq, const EmbeddingTable& table, std::size_t offset) {
  std::size_t t = seq.size();
  std::size_t d = table.word.cols();
  if (t == 0) return Tensor({0, d});
  if (offset + t > table.pe.rows())
    throw CapacityError("embed: positions " + std::to_string(offset + t) + " exceed max_len " +
                        std::to_string(table.pe.rows()));
  Tensor h = gather_rows(table.word, seq.ids);
  std::vector<std::size_t> positions(t);
  for (std::size_t i = 0; i < t; ++i) positions[i] = offset + i;
  h = add(h, gather_rows(table.pe, positions));
  if (!seq.type_ids.empty()) {
    if (seq.type_ids.size() != t) throw DimensionError("embed: type_ids length mismatch");
    h = add(h, gather_rows(table.aux, seq.type_ids));
  }
  if (!seq.segment_ids.empty()) {
    if (seq.segment_ids.size() != t) throw DimensionError("embed: segment_ids length mismatch");
    h = add(h, gather_rows(table.aux, seq.segment_ids));
  }
  return h;
}

enum class MaskKind { None, Causal };

// Softmax(Q K^T / sqrt(d_k), masked) V. With a causal mask, query row i may
// see keys 0..i+offset (offset = number of cached past positions).
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, MaskKind mask,
                        std::size_t offset = 0) {
  if (q.cols() != k.cols()) throw DimensionError("attention: Q/K width mismatch");
  if (k.rows() != v.rows()) throw DimensionError("attention: K/V length mismatch");
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  if (mask == MaskKind::Causal) scores = causal_masked(scores, offset);
  return matmul(softmax(scores), v);
}

inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t n_heads, MaskKind mask, std::size_t offset = 0) {
  std::size_t d = q.cols();
  std::size_t hd = d / n_heads;
  if (n_heads == 1) return attention(q, k, v, mask, offset);
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    heads.push_back(attention(qh, kh, vh, mask, offset));
  }
  return concat_cols(heads);
}

struct LayerParams {
  Tensor ln1_scale, ln1_shift;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_scale, ln2_shift;
  Tensor ff1, ff1_b, ff2, ff2_b;

  static LayerParams init(std::size_t d, std::size_t ffn, Rng& rng) {
    LayerParams p;
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    p.ln1_scale = Tensor({d}, 1.0);
    p.ln1_shift = Tensor({d}, 0.0);
    p.wq = Tensor::randn({d, d}, rng, s);
    p.bq = Tensor({d}, 0.0);
    p.wk = Tensor::randn({d, d}, rng, s);
    p.bk = Tensor({d}, 0.0);
    p.wv = Tensor::randn({d, d}, rng, s);
    p.bv = Tensor({d}, 0.0);
    p.wo = Tensor::randn({d, d}, rng, s);
    p.bo = Tensor({d}, 0.0);
    p.ln2_scale = Tensor({d}, 1.0);
    p.ln2_shift = Tensor({d}, 0.0);
    p.ff1 = Tensor::randn({d, ffn}, rng, s);
    p.ff1_b = Tensor({ffn}, 0.0);
    p.ff2 = Tensor::randn({ffn, d}, rng, 1.0 / std::sqrt(static_cast<double>(ffn)));
    p.ff2_b = Tensor({d}, 0.0);
    return p;
  }

  void collect(std::vector<Tensor>& out) {
    for (Tensor* t : {&ln1_scale, &ln1_shift, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
                      &ln2_scale, &ln2_shift, &ff1, &ff1_b, &ff2, &ff2_b})
      out.push_back(*t);
  }
};

// Cached keys/values for all past positions, one (K, V) pair per applied
// layer (n_layers * hops entries). Appending one token grows every entry by
// exactly one row; states are immutable values, extension returns new tensors.
struct DecoderState {
  struct LayerKV {
    Tensor k;  // t x d
    Tensor v;  // t x d
  };
  std::vector<LayerKV> layers;
  std::size_t length = 0;

  void check_consistent() const {
    for (const auto& l : layers)
      if (l.k.rows() != length || l.v.rows() != length)
        throw ContractError("decoder state: cache length mismatch");
  }
};

// One pre-norm decoder block: masked self-attention plus feed-forward, each
// behind a residual. When `cached` is non-null, x is a single new row
// attending over cached + fresh keys and the extended cache is written to
// `new_cache`; otherwise the whole sequence is processed under a causal mask.
inline Tensor decoder_layer_block(const Tensor& x, const LayerParams& p, std::size_t n_heads,
                                  const DecoderState::LayerKV* cached = nullptr,
                                  DecoderState::LayerKV* new_cache = nullptr) {
  Tensor a = layer_norm(x, p.ln1_scale, p.ln1_shift);
  Tensor q = add(matmul(a, p.wq), p.bq);
  Tensor k = add(matmul(a, p.wk), p.bk);
  Tensor v = add(matmul(a, p.wv), p.bv);
  Tensor attn_out;
  if (cached == nullptr) {
    attn_out = multi_head_attention(q, k, v, n_heads, MaskKind::Causal, 0);
  } else {
    Tensor k_full = concat_rows(cached->k, k);
    Tensor v_full = concat_rows(cached->v, v);
    attn_out = multi_head_attention(q, k_full, v_full, n_heads, MaskKind::None, cached->k.rows());
    if (new_cache != nullptr) {
      new_cache->k = k_full;
      new_cache->v = v_full;
    }
  }
  Tensor y = add(x, add(matmul(attn_out, p.wo), p.bo));
  Tensor b = layer_norm(y, p.ln2_scale, p.ln2_shift);
  Tensor ff = add(matmul(activation(add(matmul(b, p.ff1), p.ff1_b), Act::Relu), p.ff2), p.ff2_b);
  return add(y, ff);
}

struct StepResult {
  Tensor logits;  // 1 x |V|
  Tensor hidden;  // 1 x d, final-layer (post-LN) hidden state
  DecoderState state;
};

struct ForwardResult {
  Tensor logits;  // t x |V|
  Tensor hidden;  // t x d
};

// Causal Transformer decoder language model. Pre-norm residual blocks; with
// hops > 1 the unique layer stack is applied `hops` times with shared
// parameters (universal recurrence), which leaves the parameter count
// unchanged.
class DecoderModel {
 public:
  ModelConfig config;
  EmbeddingTable embedding;
  std::vector<LayerParams> layers;
  Tensor final_ln_scale, final_ln_shift;
  Tensor lm_head;  // d x |V|
  AdapterRegistry adapters;

  static DecoderModel init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    DecoderModel m;
    m.config = cfg;
    m.embedding = EmbeddingTable::init(cfg, rng);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      m.layers.push_back(LayerParams::init(cfg.d_model, cfg.ffn_dim, rng));
    m.final_ln_scale = Tensor({cfg.d_model}, 1.0);
    m.final_ln_shift = Tensor({cfg.d_model}, 0.0);
    m.lm_head = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng,
                              1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    for (auto& t : m.parameters()) t.set_requires_grad(true);
    return m;
  }

  // Base parameters in declaration order (checkpoint payload order).
  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    out.push_back(embedding.word);
    if (config.use_aux_embeddings) out.push_back(embedding.aux);
    for (auto& l : layers) l.collect(out);
    out.push_back(final_ln_scale);
    out.push_back(final_ln_shift);
    out.push_back(lm_head);
    return out;
  }

  void set_base_requires_grad(bool flag) {
    for (auto& t : parameters()) t.set_requires_grad(flag);
  }

  DecoderModel clone() const {
    DecoderModel m = *this;
    m.embedding.word = embedding.word.clone().set_requires_grad(true);
    if (config.use_aux_embeddings) m.embedding.aux = embedding.aux.clone().set_requires_grad(true);
    m.layers.clear();
    for (const auto& l : layers) {
      LayerParams c = l;
      c.ln1_scale = l.ln1_scale.clone().set_requires_grad(true);
      c.ln1_shift = l.ln1_shift.clone().set_requires_grad(true);
      c.wq = l.wq.clone().set_requires_grad(true);
      c.bq = l.bq.clone().set_requires_grad(true);
      c.wk = l.wk.clone().set_requires_grad(true);
      c.bk = l.bk.clone().set_requires_grad(true);
      c.wv = l.wv.clone().set_requires_grad(true);
      c.bv = l.bv.clone().set_requires_grad(true);
      c.wo = l.wo.clone().set_requires_grad(true);
      c.bo = l.bo.clone().set_requires_grad(true);
      c.ln2_scale = l.ln2_scale.clone().set_requires_grad(true);
      c.ln2_shift = l.ln2_shift.clone().set_requires_grad(true);
      c.ff1 = l.ff1.clone().set_requires_grad(true);
      c.ff1_b = l.ff1_b.clone().set_requires_grad(true);
      c.ff2 = l.ff2.clone().set_requires_grad(true);
      c.ff2_b = l.ff2_b.clone().set_requires_grad(true);
      m.layers.push_back(c);
    }
    m.final_ln_scale = final_ln_scale.clone().set_requires_grad(true);
    m.final_ln_shift = final_ln_shift.clone().set_requires_grad(true);
    m.lm_head = lm_head.clone().set_requires_grad(true);
    return m;
  }

  DecoderState empty_state() const {
    DecoderState s;
    s.layers.resize(config.n_layers * config.hops);
    std::size_t d = config.d_model;
    for (auto& l : s.layers) {
      l.k = Tensor({0, d});
      l.v = Tensor({0, d});
    }
    s.length = 0;
    return s;
  }

  // Whole-sequence forward with causal masking. Returns per-position logits
  // and final hidden states; with `adapter`, each layer output passes through
  // its adapter block.
  ForwardResult forward(const TokenSequence& seq, const AdapterParams* adapter = nullptr) const {
    std::size_t t = seq.size();
    if (t > config.max_len) throw CapacityError("forward: sequence exceeds max_len");
    Tensor x = embed(seq, embedding, 0);
    if (t == 0) return {Tensor({0, config.vocab_size}), Tensor({0, config.d_model})};
    for (std::size_t hop = 0; hop < config.hops; ++hop)
      for (std::size_t li = 0; li < config.n_layers; ++li)
        x = layer_forward(x, li, hop, nullptr, adapter);
    Tensor hidden = layer_norm(x, final_ln_scale, final_ln_shift);
    Tensor logits = matmul(hidden, lm_head);
    return {logits, hidden};
  }

  // One incremental decoding step: extends every layer cache by one position.
  // Matches whole-sequence forward logits (the KV-cache equivalence
  // invariant). `aux` optionally carries (type_id, segment_id).
  StepResult step(std::size_t token_id, const DecoderState& state,
                  const AdapterParams* adapter = nullptr,
                  std::optional<std::pair<std::size_t, std::size_t>> aux = std::nullopt) const {
    if (state.length >= config.max_len)
      throw CapacityError("step: decoder state is at max_len capacity");
    if (state.layers.size() != config.n_layers * config.hops)
      throw ContractError("step: state layer count mismatch");
    TokenSequence one;
    one.ids = {token_id};
    if (aux) {
      one.type_ids = {aux->first};
      one.segment_ids = {aux->second};
    }
    Tensor x = embed(one, embedding, state.length);
    DecoderState next;
    next.layers.resize(state.layers.size());
    next.length = state.length + 1;
    for (std::size_t hop = 0; hop < config.hops; ++hop)
      for (std::size_t li = 0; li < config.n_layers; ++li) {
        std::size_t slot = hop * config.n_layers + li;
        x = layer_forward(x, li, hop, &state.layers[slot], adapter, &next.layers[slot]);
      }
    Tensor hidden = layer_norm(x, final_ln_scale, final_ln_shift);
    Tensor logits = matmul(hidden, lm_head);
    return {logits, hidden, std::move(next)};
  }

  // Builds a decoding state for a whole prefix at once.
  std::pair<StepResult, DecoderState> prefill(const TokenSequence& prefix,
                                              const AdapterParams* adapter = nullptr) const {
    if (prefix.size() == 0) throw ContractError("prefill: prefix must be nonempty");
    DecoderState state = empty_state();
    StepResult last;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
      std::optional<std::pair<std::size_t, std::size_t>> aux;
      if (prefix.has_aux())
        aux = std::pair<std::size_t, std::size_t>{
            prefix.type_ids.empty() ? 0 : prefix.type_ids[i],
            prefix.segment_ids.empty() ? 0 : prefix.segment_ids[i]};
      last = step(prefix.ids[i], state, adapter, aux);
      state = last.state;
    }
    return {last, state};
  }

 private:
  Tensor layer_forward(const Tensor& x, std::size_t layer_index, std::size_t hop,
                       const DecoderState::LayerKV* cached, const AdapterParams* adapter,
                       DecoderState::LayerKV* new_cache = nullptr) const {
    (void)hop;
    Tensor out = decoder_layer_block(x, layers[layer_index], config.n_heads, cached, new_cache);
    if (adapter != nullptr) {
      // adapters attach per unique layer, shared across hops
      out = adapter_forward(out, adapter->layers.at(layer_index));
    }
    return out;
  }
};

// ---- GRU cell ----------------------------------------------------------------

struct GruParams {
  Tensor wz, uz, bz;  // update gate
  Tensor wr, ur, br;  // reset gate
  Tensor wh, uh, bh;  // candidate

  static GruParams init(std::size_t d_in, std::size_t d_hidden, Rng& rng) {
    GruParams p;
    double si = 1.0 / std::sqrt(static_cast<double>(d_in));
    double sh = 1.0 / std::sqrt(static_cast<double>(d_hidden));
    p.wz = Tensor::randn({d_in, d_hidden}, rng, si);
    p.uz = Tensor::randn({d_hidden, d_hidden}, rng, sh);
    p.bz = Tensor({d_hidden}, 0.0);
    p.wr = Tensor::randn({d_in, d_hidden}, rng, si);
    p.ur = Tensor::randn({d_hidden, d_hidden}, rng, sh);
    p.br = Tensor({d_hidden}, 0.0);
    p.wh = Tensor::randn({d_in, d_hidden}, rng, si);
    p.uh = Tensor::randn({d_hidden, d_hidden}, rng, sh);
    p.bh = Tensor({d_hidden}, 0.0);
    return p;
  }

  std::vector<Tensor> parameters() { return {wz, uz, bz, wr, ur, br, wh, uh, bh}; }
};

// z = sigmoid(xWz + hUz + bz), r = sigmoid(xWr + hUr + br),
// h_cand = tanh(xWh + (r*h)Uh + bh), h' = (1-z)*h + z*h_cand.
inline Tensor gru_step(const Tensor& x, const Tensor& h, const GruParams& p) {
  Tensor z = sigmoid(add(add(matmul(x, p.wz), matmul(h, p.uz)), p.bz));
  Tensor r = sigmoid(add(add(matmul(x, p.wr), matmul(h, p.ur)), p.br));
  Tensor cand = tanh_op(add(add(matmul(x, p.wh), matmul(mul(r, h), p.uh)), p.bh));
  Tensor keep = mul(sub(Tensor(h.shape(), 1.0), z), h);
  return add(keep, mul(z, cand));
}

// Final GRU state over the rows of H (zero initial state).
inline Tensor gru_encode(const Tensor& h_seq, const GruParams& p) {
  std::size_t d_hidden = p.uz.rows();
  Tensor h({1, d_hidden});
  for (std::size_t i = 0; i < h_seq.rows(); ++i) h = gru_step(row(h_seq, i), h, p);
  return h;
}

// ---- sampling ----------------------------------------------------------------

inline std::vector<double> softmax_probs(const Tensor& logits) {
  std::size_t n = logits.size();
  if (n == 0) throw DimensionError("softmax_probs: empty logits");
  double mx = logits.at(0);
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits.at(i));
  std::vector<double> p(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(logits.at(i) - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

// Multinomial draw restricted to the k most probable ids. Ties order by
// lower id so the retained set is deterministic.
inline std::size_t sample_from_probs(const std::vector<double>& probs, std::size_t k, Rng& rng) {
  std::size_t n = probs.size();
  if (k < 1 || k > n) throw ConfigError("top-k: k out of range");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (probs[a] != probs[b]) return probs[a] > probs[b];
                      return a < b;
                    });
  std::vector<double> weights(k);
  for (std::size_t i = 0; i < k; ++i) weights[i] = probs[order[i]];
  return order[rng.categorical(weights)];
}

inline std::size_t sample_top_k(const Tensor& logits, std::size_t k, Rng& rng) {
  return sample_from_probs(softmax_probs(logits), k, rng);
}

inline std::size_t argmax_token(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits.at(i) > logits.at(best)) best = i;
  return best;
}

// n independent top-k sampled continuations of the prefix, each ended by the
// EOS token or after max_new tokens. Deterministic given the generator.
inline std::vector<TokenSequence> generate(const DecoderModel& model, const TokenSequence& prefix,
                                           std::size_t max_new, std::size_t k,
                                           std::size_t n_hypotheses, Rng& rng,
                                           const AdapterParams* adapter = nullptr) {
  std::vector<TokenSequence> out;
  out.reserve(n_hypotheses);
  for (std::size_t h = 0; h < n_hypotheses; ++h) {
    TokenSequence cont;
    if (max_new > 0) {
      auto [last, state] = model.prefill(prefix, adapter);
      for (std::size_t i = 0; i < max_new; ++i) {
        std::size_t id = sample_top_k(last.logits, k, rng);
        if (id == tok::kEos) break;
        cont.ids.push_back(id);
        if (i + 1 == max_new || state.length >= model.config.max_len) break;
        last = model.step(id, state, adapter);
        state = last.state;
      }
    }
    out.push_back(std::move(cont));
  }
  return out;
}

}  // namespace ctrlseq
