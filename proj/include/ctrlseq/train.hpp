#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ctrlseq/model.hpp"

namespace ctrlseq {

// One supervised example, already tokenized. The training sequence is
// [BOS] input output [EOS]; by default the loss is masked to the output
// segment (plus EOS), with whole-sequence scoring available for strict
// concatenation fidelity.
struct EncodedPair {
  std::vector<std::size_t> input_ids;
  std::vector<std::size_t> output_ids;
  std::string id;
};

enum class LossMask { OutputOnly, WholeSequence };

struct EncodedBatchItem {
  TokenSequence tokens;
  std::vector<std::size_t> targets;  // one per position
  std::vector<bool> mask;
  std::size_t masked_count = 0;
};

inline EncodedBatchItem encode_for_lm(const EncodedPair& pair, const ModelConfig& cfg,
                                      LossMask mask_mode) {
  if (pair.output_ids.empty())
    throw ContractError("lm sample '" + pair.id + "': empty output segment");
  std::vector<std::size_t> seq;
  seq.reserve(pair.input_ids.size() + pair.output_ids.size() + 2);
  seq.push_back(tok::kBos);
  seq.insert(seq.end(), pair.input_ids.begin(), pair.input_ids.end());
  std::size_t output_start = seq.size();  // first predicted-output position
  seq.insert(seq.end(), pair.output_ids.begin(), pair.output_ids.end());
  seq.push_back(tok::kEos);
  if (seq.size() > cfg.max_len)
    throw CapacityError("lm sample '" + pair.id + "' of length " + std::to_string(seq.size()) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
  EncodedBatchItem item;
  item.tokens.ids.assign(seq.begin(), seq.end() - 1);
  item.targets.assign(seq.begin() + 1, seq.end());
  item.mask.resize(item.targets.size());
  for (std::size_t t = 0; t < item.targets.size(); ++t) {
    bool in_output = (t + 1) >= output_start;
    item.mask[t] = (mask_mode == LossMask::WholeSequence) ? true : in_output;
    if (item.mask[t]) ++item.masked_count;
  }
  return item;
}

// Token-weighted mean NLL over the batch, restricted to unmasked positions.
inline Tensor lm_loss(const DecoderModel& model, const std::vector<EncodedPair>& batch,
                      LossMask mask_mode = LossMask::OutputOnly,
                      const AdapterParams* adapter = nullptr) {
  if (batch.empty()) throw ContractError("lm_loss: empty batch");
  std::vector<EncodedBatchItem> items;
  std::size_t total = 0;
  for (const auto& pair : batch) {
    items.push_back(encode_for_lm(pair, model.config, mask_mode));
    total += items.back().masked_count;
  }
  Tensor loss = Tensor::scalar(0.0);
  for (const auto& item : items) {
    ForwardResult fwd = model.forward(item.tokens, adapter);
    Tensor nll = nll_masked(fwd.logits, item.targets, item.mask);
    loss = add(loss, scale(nll, static_cast<double>(item.masked_count) /
                                    static_cast<double>(total)));
  }
  return loss;
}

// Total NLL and token count of a sequence under the model; the shared
// primitive behind perplexity and the adapter selector.
inline std::pair<double, std::size_t> sequence_nll(const DecoderModel& model,
                                                   const std::vector<std::size_t>& ids,
                                                   const AdapterParams* adapter = nullptr,
                                                   bool prepend_bos = true) {
  if (ids.empty()) throw ContractError("sequence_nll: empty input");
  if (!prepend_bos && ids.size() < 2)
    throw ContractError("sequence_nll: need at least two tokens without BOS conditioning");
  TokenSequence seq;
  if (prepend_bos) seq.ids.push_back(tok::kBos);
  seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  if (seq.ids.size() > model.config.max_len)
    throw CapacityError("sequence_nll: sequence exceeds max_len");
  ForwardResult fwd = model.forward(seq, adapter);
  double nll = 0.0;
  const std::size_t c = model.config.vocab_size;
  for (std::size_t t = 0; t + 1 < seq.ids.size(); ++t) {
    // position t predicts seq.ids[t + 1]
    std::size_t target = seq.ids[t + 1];
    double mx = fwd.logits.at(t, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, fwd.logits.at(t, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(fwd.logits.at(t, j) - mx);
    nll -= fwd.logits.at(t, target) - mx - std::log(z);
  }
  return {nll, seq.ids.size() - 1};
}

// ---- optimizers ----------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  std::size_t warmup_steps = 100;  // linear ramp 0 -> lr
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.kind == OptimizerKind::Adam) {
      m_.resize(params_.size());
      v_.resize(params_.size());
      for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].size(), 0.0);
        v_[i].assign(params_[i].size(), 0.0);
      }
    }
  }

  double current_lr() const {
    double ramp = cfg_.warmup_steps == 0
                      ? 1.0
                      : std::min(1.0, static_cast<double>(step_ + 1) /
                                          static_cast<double>(cfg_.warmup_steps));
    return cfg_.lr * ramp;
  }

  void step() {
    double lr = current_lr();
    ++step_;
    if (lr == 0.0) return;  // parameters stay bitwise unchanged
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].data();
      if (!params_[i].has_grad()) continue;
      auto& g = params_[i].grad();
      if (cfg_.kind == OptimizerKind::Sgd) {
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
      } else {
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t j = 0; j < p.size(); ++j) {
          m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
          v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
          p[j] -= lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.eps);
        }
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<Tensor>& params() { return params_; }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig cfg_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---- training loop --------------------------------------------------------------

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // 0 = no cap
  std::size_t patience = 3;   // early-stopping patience on validation loss
  LossMask mask_mode = LossMask::OutputOnly;
  std::uint64_t seed = 0;
  // Extra loss term added to each step's LM loss (regularized CL strategies).
  std::function<Tensor()> extra_loss;
  // Gradient post-processing hook (A-GEM projection); runs after backward.
  std::function<void(std::vector<Tensor>&)> grad_hook;
};

struct TrainReport {
  std::vector<double> train_losses;  // per epoch
  std::vector<double> valid_losses;  // per epoch (empty if no validation set)
  std::size_t steps = 0;
  bool early_stopped = false;
};

inline double evaluate_lm_loss(const DecoderModel& model, const std::vector<EncodedPair>& data,
                               LossMask mask_mode, const AdapterParams* adapter = nullptr) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& pair : data) {
    EncodedBatchItem item = encode_for_lm(pair, model.config, mask_mode);
    ForwardResult fwd = model.forward(item.tokens, adapter);
    Tensor nll = nll_masked(fwd.logits, item.targets, item.mask);
    total += nll.value() * static_cast<double>(item.masked_count);
    count += item.masked_count;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

// Mini-batch gradient descent over (input, output) pairs. Deterministic for a
// fixed seed; aborts with a diagnostic if the loss stops being finite.
inline TrainReport train_lm(DecoderModel& model, const std::vector<EncodedPair>& train_data,
                            const std::vector<EncodedPair>& valid_data, const TrainConfig& cfg,
                            std::vector<Tensor> trainable, const AdapterParams* adapter = nullptr) {
  if (train_data.empty()) throw ContractError("train: dataset is empty");
  Optimizer opt(std::move(trainable), cfg.optimizer);
  Rng order_rng = Rng(cfg.seed).split(0xBA7C);
  TrainReport report;
  std::size_t rises = 0;
  double prev_valid = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_steps > 0 && report.steps >= cfg.max_steps) break;
      std::vector<EncodedPair> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(train_data[order[i]]);
      Tape tape;
      Tensor loss = lm_loss(model, batch, cfg.mask_mode, adapter);
      if (cfg.extra_loss) {
        Tensor extra = cfg.extra_loss();
        if (extra.size() == 1) loss = add(loss, extra);
      }
      double loss_value = loss.value();
      if (!std::isfinite(loss_value))
        throw NumericError("training diverged: non-finite loss at step " +
                           std::to_string(report.steps));
      tape.backward(loss);
      if (cfg.grad_hook) cfg.grad_hook(opt.params());
      opt.step();
      epoch_loss += loss_value;
      ++epoch_batches;
      ++report.steps;
    }
    report.train_losses.push_back(epoch_batches ? epoch_loss / epoch_batches : 0.0);
    if (!valid_data.empty()) {
      double vl = evaluate_lm_loss(model, valid_data, cfg.mask_mode, adapter);
      report.valid_losses.push_back(vl);
      if (vl > prev_valid) {
        if (++rises >= cfg.patience) {
          report.early_stopped = true;
          break;
        }
      } else {
        rises = 0;
      }
      prev_valid = vl;
    }
    if (cfg.max_steps > 0 && report.steps >= cfg.max_steps) break;
  }
  return report;
}

// Trains the base model on (input, output) pairs.
inline TrainReport train(DecoderModel& model, const std::vector<EncodedPair>& train_data,
                         const std::vector<EncodedPair>& valid_data, const TrainConfig& cfg) {
  return train_lm(model, train_data, valid_data, cfg, model.parameters());
}

// Spawns a fresh adapter whose up-projection is zero, so the adapted model
// initially equals the base model bitwise.
inline AdapterParams& spawn_adapter(DecoderModel& model, const std::string& label, std::size_t b,
                                    Rng& rng) {
  if (model.adapters.contains(label))
    throw ContractError("spawn_adapter: duplicate label '" + label + "'");
  return model.adapters.add(
      AdapterParams::init(label, model.config.n_layers, model.config.d_model, b, rng));
}

// Trains exactly one adapter; the base model is frozen for the duration (its
// requires_grad flags are dropped so the tape skips everything below the
// first adapter block) and restored afterwards.
inline TrainReport train_adapter(DecoderModel& model, const std::string& label,
                                 const std::vector<EncodedPair>& train_data,
                                 const std::vector<EncodedPair>& valid_data,
                                 const TrainConfig& cfg) {
  AdapterParams& adapter = model.adapters.get(label);
  model.set_base_requires_grad(false);
  TrainReport report;
  try {
    report = train_lm(model, train_data, valid_data, cfg, adapter.parameters(), &adapter);
  } catch (...) {
    model.set_base_requires_grad(true);
    throw;
  }
  model.set_base_requires_grad(true);
  return report;
}

}  // namespace ctrlseq
