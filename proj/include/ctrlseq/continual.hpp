#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ctrlseq/digest.hpp"
#include "ctrlseq/metrics.hpp"
#include "ctrlseq/model.hpp"
#include "ctrlseq/synth.hpp"
#include "ctrlseq/train.hpp"
#include "ctrlseq/vocab.hpp"

namespace ctrlseq::cl {

struct CLTask {
  std::string task_id;
  std::vector<EncodedPair> train, valid, test;
  std::vector<std::string> test_gold;  // decoded gold outputs, aligned with test
};

// Ordered task list; the model never chooses the order.
struct Curriculum {
  std::vector<CLTask> tasks;
  std::uint64_t permutation_seed = 0;
};

inline Curriculum permute(const Curriculum& base, std::uint64_t permutation_seed) {
  Curriculum out = base;
  out.permutation_seed = permutation_seed;
  Rng rng = Rng(permutation_seed).split(0xC0C0);
  rng.shuffle(out.tasks);
  return out;
}

// Per-task reservoir of training samples; sampling is seed-deterministic.
class EpisodicMemory {
 public:
  explicit EpisodicMemory(std::size_t capacity_per_task, std::uint64_t seed)
      : capacity_(capacity_per_task), seed_(seed) {}

  std::size_t capacity_per_task() const { return capacity_; }

  void store(std::size_t task_index, const std::vector<EncodedPair>& data) {
    if (capacity_ == 0) return;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = Rng(seed_).split(0xE9 + task_index);
    rng.shuffle(order);
    std::vector<EncodedPair> kept;
    for (std::size_t i = 0; i < std::min(capacity_, order.size()); ++i)
      kept.push_back(data[order[i]]);
    store_.push_back(std::move(kept));
  }

  std::vector<EncodedPair> all() const {
    std::vector<EncodedPair> out;
    for (const auto& task : store_) out.insert(out.end(), task.begin(), task.end());
    return out;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& task : store_) n += task.size();
    return n;
  }

  // One batch drawn uniformly from the whole memory.
  std::vector<EncodedPair> sample_batch(std::size_t n, Rng& rng) const {
    std::vector<EncodedPair> flat = all();
    if (flat.size() <= n) return flat;
    std::vector<std::size_t> order(flat.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<EncodedPair> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(flat[order[i]]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::uint64_t seed_;
  std::vector<std::vector<EncodedPair>> store_;
};

// training set = D_t plus everything stored so far
inline std::vector<EncodedPair> replay_merge(const std::vector<EncodedPair>& task_data,
                                             const EpisodicMemory& memory) {
  std::vector<EncodedPair> merged = task_data;
  auto stored = memory.all();
  merged.insert(merged.end(), stored.begin(), stored.end());
  return merged;
}

enum class RegKind { None, L2, Ewc, Agem };

struct RegularizerConfig {
  RegKind kind = RegKind::None;
  double lambda = 0.0;
};

using ParamSnapshot = std::vector<std::vector<double>>;
using FisherDiagonal = std::vector<std::vector<double>>;

inline ParamSnapshot snapshot_params(std::vector<Tensor> params) {
  ParamSnapshot out;
  for (auto& p : params) out.push_back(p.data());
  return out;
}

// lambda * sum_i Omega_i (theta_i - theta*_i)^2 with Omega = 1 for L2 and the
// Fisher diagonal for EWC. Built on the active tape.
inline Tensor reg_penalty(std::vector<Tensor> params, const ParamSnapshot& snapshot,
                          const RegularizerConfig& cfg, const FisherDiagonal* fisher = nullptr) {
  if (cfg.kind != RegKind::L2 && cfg.kind != RegKind::Ewc)
    throw ConfigError("reg_penalty: only L2 and EWC carry a penalty term");
  if (snapshot.size() != params.size()) throw ContractError("reg_penalty: missing snapshot");
  if (cfg.kind == RegKind::Ewc && fisher == nullptr)
    throw ContractError("reg_penalty: EWC requires a Fisher diagonal");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor ref = Tensor::from(params[i].shape(), snapshot[i]);
    Tensor diff = sub(params[i], ref);
    Tensor sq = mul(diff, diff);
    if (cfg.kind == RegKind::Ewc) {
      Tensor omega = Tensor::from(params[i].shape(), (*fisher)[i]);
      sq = mul(sq, omega);
    }
    total = add(total, sum(sq));
  }
  return scale(total, cfg.lambda);
}

// Diagonal empirical Fisher over any parameter set: mean squared
// per-parameter gradient of the per-sample NLL.
inline FisherDiagonal estimate_fisher_diag(std::vector<Tensor> params, std::size_t n_samples,
                                           const std::function<Tensor(std::size_t)>& sample_nll) {
  if (n_samples == 0) throw ContractError("estimate_fisher: empty dataset");
  FisherDiagonal fisher;
  for (auto& p : params) fisher.push_back(std::vector<double>(p.size(), 0.0));
  for (std::size_t s = 0; s < n_samples; ++s) {
    Tape tape;
    Tensor loss = sample_nll(s);
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& g = params[i].grad();
      for (std::size_t j = 0; j < g.size(); ++j) fisher[i][j] += g[j] * g[j];
    }
  }
  for (auto& f : fisher)
    for (double& v : f) v /= static_cast<double>(n_samples);
  return fisher;
}

inline FisherDiagonal estimate_fisher(DecoderModel& model, const std::vector<EncodedPair>& data,
                                      std::size_t n_samples, LossMask mask_mode) {
  if (data.empty()) throw ContractError("estimate_fisher: empty dataset");
  std::size_t used = std::min(n_samples, data.size());
  return estimate_fisher_diag(model.parameters(), used, [&](std::size_t s) {
    return lm_loss(model, {data[s]}, mask_mode);
  });
}

// Accumulates the just-estimated Fisher into the running store: elementwise
// max by default, elementwise sum behind the flag.
inline void accumulate_fisher(FisherDiagonal& store, const FisherDiagonal& fresh, bool use_sum) {
  if (store.empty()) {
    store = fresh;
    return;
  }
  for (std::size_t i = 0; i < store.size(); ++i)
    for (std::size_t j = 0; j < store[i].size(); ++j)
      store[i][j] = use_sum ? store[i][j] + fresh[i][j] : std::max(store[i][j], fresh[i][j]);
}

using GradientVector = std::vector<double>;

// A-GEM projection: g when g.g_ref >= 0, otherwise g minus its component
// along g_ref; the result never increases the reference loss direction.
inline GradientVector agem_project(const GradientVector& g, const GradientVector& g_ref) {
  if (g.size() != g_ref.size()) throw DimensionError("agem_project: length mismatch");
  double dot = 0.0, ref_dot = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    dot += g[i] * g_ref[i];
    ref_dot += g_ref[i] * g_ref[i];
  }
  if (dot >= 0.0 || ref_dot == 0.0) return g;
  GradientVector out(g.size());
  double coef = dot / ref_dot;
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i] - coef * g_ref[i];
  return out;
}

// PPL_mu(X) for every adapter; the task whose adapter is most confident wins,
// ties (exact equality) break toward the lowest task index.
struct SelectionResult {
  std::size_t index = 0;
  std::vector<double> perplexities;
  bool tie = false;
};

inline SelectionResult perplexity_select(const DecoderModel& model,
                                         const std::vector<std::string>& task_labels,
                                         const std::vector<std::size_t>& input_ids) {
  if (task_labels.empty()) throw ContractError("perplexity_select: no adapters");
  if (input_ids.empty()) throw ContractError("perplexity_select: empty input");
  SelectionResult result;
  for (std::size_t t = 0; t < task_labels.size(); ++t) {
    const AdapterParams& adapter = model.adapters.get(task_labels[t]);
    auto [nll, count] = sequence_nll(model, input_ids, &adapter);
    double ppl = std::exp(nll / static_cast<double>(count));
    result.perplexities.push_back(ppl);
    if (t > 0 && ppl == result.perplexities[result.index]) result.tie = true;
    if (ppl < result.perplexities[result.index]) result.index = t;
  }
  return result;
}

// T x T matrix of post-task test metrics; each row is written exactly once,
// immediately after its task finishes training.
class MetricMatrix {
 public:
  MetricMatrix() = default;
  MetricMatrix(std::size_t n_tasks, std::string metric_name)
      : name_(std::move(metric_name)),
        values_(n_tasks, std::vector<double>(n_tasks, std::numeric_limits<double>::quiet_NaN())),
        written_(n_tasks, false) {}

  const std::string& metric_name() const { return name_; }
  std::size_t size() const { return values_.size(); }

  void write_row(std::size_t row, std::vector<double> metrics) {
    if (row >= values_.size()) throw IndexError("metric matrix: row out of range");
    if (written_[row]) throw ContractError("metric matrix: row already written");
    if (metrics.size() != values_.size()) throw DimensionError("metric matrix: bad row length");
    values_[row] = std::move(metrics);
    written_[row] = true;
  }

  bool row_written(std::size_t row) const { return written_.at(row); }
  double at(std::size_t i, std::size_t j) const { return values_.at(i).at(j); }
  const std::vector<double>& row(std::size_t i) const { return values_.at(i); }

 private:
  std::string name_;
  std::vector<std::vector<double>> values_;
  std::vector<bool> written_;
};

// (1/t) * sum_{i<=t} R[t, i], rows and tasks 1-indexed by `upto`.
inline double avg_metric(const MetricMatrix& r, std::size_t upto) {
  if (upto == 0 || upto > r.size()) throw IndexError("avg_metric: bad task index");
  if (!r.row_written(upto - 1)) throw ContractError("avg_metric: row not populated");
  double total = 0.0;
  for (std::size_t i = 0; i < upto; ++i) total += r.at(upto - 1, i);
  return total / static_cast<double>(upto);
}

enum class Strategy { Vanilla, L2, Ewc, Agem, Replay, AdapterCl, Multi };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::Vanilla: return "VANILLA";
    case Strategy::L2: return "L2";
    case Strategy::Ewc: return "EWC";
    case Strategy::Agem: return "AGEM";
    case Strategy::Replay: return "REPLAY";
    case Strategy::AdapterCl: return "ADAPTERCL";
    case Strategy::Multi: return "MULTI";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  for (Strategy k : {Strategy::Vanilla, Strategy::L2, Strategy::Ewc, Strategy::Agem,
                     Strategy::Replay, Strategy::AdapterCl, Strategy::Multi})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown strategy '" + s + "'");
}

enum class EvalMetric { ExactMatch, Jga, Bleu };

struct CLConfig {
  ModelConfig model;
  TrainConfig task_training;
  Vocabulary vocab;
  EvalMetric metric = EvalMetric::ExactMatch;
  std::string metric_name = "intent_accuracy";
  double lambda = 0.001;
  std::size_t memory_per_task = 50;
  std::size_t fisher_samples = 256;
  bool fisher_sum = false;  // running max by default
  std::size_t adapter_bottleneck = 8;
  // adapters start from a zero up-projection and need their own budget
  TrainConfig adapter_training;
  bool adapter_training_set = false;
  std::size_t eval_max_new = 8;
  std::size_t eval_samples_per_task = 0;  // 0 = all test samples
  // Generic-domain warm-up standing in for the pre-trained backbone every
  // strategy starts from; identical across strategies for a given seed.
  std::vector<EncodedPair> pretrain_data;
  TrainConfig pretrain;
};

struct CLRunResult {
  MetricMatrix matrix;
  std::vector<std::string> task_order;
  std::vector<double> task_seconds;
  std::vector<double> avg_metric_trace;
  double selection_accuracy = -1.0;  // ADAPTERCL only
  std::size_t selection_ties = 0;
  std::size_t parameters_added = 0;
  std::size_t memory_entries = 0;
  std::uint64_t model_checksum = 0;  // base + adapter parameters after the run
  double agem_min_dot = std::numeric_limits<double>::infinity();  // min g'.g_ref over steps
  std::size_t agem_projections = 0;
  std::vector<std::string> notes;
};

// Encodes a formatted sample dataset for the harness.
inline CLTask make_cl_task(const synth::SampleDataset& ds, const Vocabulary& vocab) {
  CLTask task;
  task.task_id = ds.task_id;
  auto encode = [&](const std::vector<synth::Sample>& samples, std::vector<EncodedPair>& out,
                    bool keep_gold) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      EncodedPair p;
      p.input_ids = vocab.encode(samples[i].input);
      p.output_ids = vocab.encode(samples[i].output);
      p.id = ds.task_id + "/" + samples[i].setting + "/" + std::to_string(i);
      out.push_back(std::move(p));
      if (keep_gold) task.test_gold.push_back(samples[i].output);
    }
  };
  encode(ds.train, task.train, false);
  encode(ds.valid, task.valid, false);
  encode(ds.test, task.test, true);
  return task;
}

namespace detail {

inline std::string decode_greedy(const DecoderModel& model, const std::vector<std::size_t>& input,
                                 const Vocabulary& vocab, std::size_t max_new,
                                 const AdapterParams* adapter) {
  TokenSequence prefix;
  prefix.ids.push_back(tok::kBos);
  prefix.ids.insert(prefix.ids.end(), input.begin(), input.end());
  if (prefix.ids.size() >= model.config.max_len) return "";
  std::vector<std::size_t> out;
  auto [last, state] = model.prefill(prefix, adapter);
  for (std::size_t i = 0; i < max_new && state.length < model.config.max_len; ++i) {
    std::size_t id = argmax_token(last.logits);
    if (id == tok::kEos) break;
    out.push_back(id);
    last = model.step(id, state, adapter);
    state = last.state;
  }
  return vocab.decode(out);
}

inline double score_pair(EvalMetric metric, const std::string& pred, const std::string& gold) {
  switch (metric) {
    case EvalMetric::ExactMatch:
      return pred == gold ? 1.0 : 0.0;
    case EvalMetric::Jga: {
      try {
        auto p = synth::parse_api(pred);
        auto g = synth::parse_api(gold);
        auto ps = p.slots, gs = g.slots;
        std::sort(ps.begin(), ps.end());
        std::sort(gs.begin(), gs.end());
        return (p.head == g.head && ps == gs) ? 1.0 : 0.0;
      } catch (const ParseError&) {
        return 0.0;
      }
    }
    case EvalMetric::Bleu:
      return metrics::bleu({pred}, {gold});
  }
  return 0.0;
}

}  // namespace detail

// Trains the curriculum in order under the strategy and fills the R matrix:
// after task i every task's test set is evaluated with no task-ID given
// (ADAPTERCL routes through perplexity_select).
inline CLRunResult run_curriculum(Strategy strategy, const Curriculum& curriculum,
                                  std::uint64_t seed, const CLConfig& cfg) {
  if (curriculum.tasks.empty()) throw ContractError("run_curriculum: empty curriculum");
  std::size_t n_tasks = curriculum.tasks.size();
  CLRunResult result;
  result.matrix = MetricMatrix(n_tasks, cfg.metric_name);
  for (const auto& t : curriculum.tasks) result.task_order.push_back(t.task_id);

  Rng root(seed);
  DecoderModel model = DecoderModel::init(cfg.model, root);
  if (!cfg.pretrain_data.empty()) {
    TrainConfig ptc = cfg.pretrain;
    ptc.mask_mode = cfg.task_training.mask_mode;
    ptc.seed = Rng::splitmix64(seed ^ 0x9E7A11);
    train(model, cfg.pretrain_data, {}, ptc);
  }

  EpisodicMemory memory(cfg.memory_per_task, seed);
  ParamSnapshot snapshot;
  FisherDiagonal fisher_store;
  RegularizerConfig reg;
  reg.lambda = cfg.lambda;
  if (strategy == Strategy::L2) reg.kind = RegKind::L2;
  if (strategy == Strategy::Ewc) reg.kind = RegKind::Ewc;
  if (strategy == Strategy::Agem) reg.kind = RegKind::Agem;

  if (strategy == Strategy::Replay && cfg.memory_per_task == 0)
    result.notes.push_back("REPLAY with |M|=0 degenerates to VANILLA");

  std::vector<std::string> adapter_labels;  // curriculum order, ADAPTERCL
  std::size_t sel_hits = 0, sel_total = 0;

  auto evaluate_all = [&](std::size_t row) {
    std::vector<double> scores;
    for (std::size_t j = 0; j < n_tasks; ++j) {
      const CLTask& task = curriculum.tasks[j];
      std::size_t n_eval = cfg.eval_samples_per_task == 0
                               ? task.test.size()
                               : std::min(cfg.eval_samples_per_task, task.test.size());
      double total = 0.0;
      for (std::size_t s = 0; s < n_eval; ++s) {
        const EncodedPair& sample = task.test[s];
        const AdapterParams* adapter = nullptr;
        if (strategy == Strategy::AdapterCl) {
          if (adapter_labels.empty()) continue;
          SelectionResult sel = perplexity_select(model, adapter_labels, sample.input_ids);
          result.selection_ties += sel.tie;
          if (row + 1 == n_tasks) {  // score routing on the final pass
            sel_hits += adapter_labels[sel.index] == task.task_id;
            ++sel_total;
          }
          adapter = &model.adapters.get(adapter_labels[sel.index]);
        }
        std::string pred =
            detail::decode_greedy(model, sample.input_ids, cfg.vocab, cfg.eval_max_new, adapter);
        total += detail::score_pair(cfg.metric, pred, task.test_gold[s]);
      }
      scores.push_back(n_eval == 0 ? 0.0 : total / static_cast<double>(n_eval));
    }
    result.matrix.write_row(row, std::move(scores));
    result.avg_metric_trace.push_back(avg_metric(result.matrix, row + 1));
  };

  if (strategy == Strategy::Multi) {
    // upper bound: one training run over the whole concatenated curriculum
    std::vector<EncodedPair> all_train, all_valid;
    for (const auto& t : curriculum.tasks) {
      all_train.insert(all_train.end(), t.train.begin(), t.train.end());
      all_valid.insert(all_valid.end(), t.valid.begin(), t.valid.end());
    }
    TrainConfig tc = cfg.task_training;
    tc.seed = Rng::splitmix64(seed ^ 0x3417A);
    auto t0 = std::chrono::steady_clock::now();
    train(model, all_train, all_valid, tc);
    auto t1 = std::chrono::steady_clock::now();
    result.task_seconds.assign(n_tasks, 0.0);
    result.task_seconds.back() = std::chrono::duration<double>(t1 - t0).count();
    evaluate_all(n_tasks - 1);  // only the final row is defined
    result.model_checksum = checksum_params(model.parameters());
    return result;
  }

  for (std::size_t i = 0; i < n_tasks; ++i) {
    const CLTask& task = curriculum.tasks[i];
    TrainConfig tc = strategy == Strategy::AdapterCl && cfg.adapter_training_set
                         ? cfg.adapter_training
                         : cfg.task_training;
    // ADAPTERCL derives the seed from the task identity so each adapter's
    // training is independent of curriculum position
    tc.seed = strategy == Strategy::AdapterCl
                  ? Rng::splitmix64(seed ^ fnv1a64(task.task_id))
                  : Rng::splitmix64(seed + 0x9E37 * (i + 1));

    std::vector<EncodedPair> train_data = task.train;
    if (strategy == Strategy::Replay) train_data = replay_merge(task.train, memory);

    if ((strategy == Strategy::L2 || strategy == Strategy::Ewc) && i > 0 && cfg.lambda != 0.0) {
      ParamSnapshot snap = snapshot;
      FisherDiagonal* fisher = strategy == Strategy::Ewc ? &fisher_store : nullptr;
      RegularizerConfig reg_now = reg;
      DecoderModel* model_ptr = &model;
      tc.extra_loss = [model_ptr, snap, reg_now, fisher]() {
        return reg_penalty(model_ptr->parameters(), snap, reg_now,
                           fisher != nullptr ? fisher : nullptr);
      };
    }

    Rng agem_rng = Rng(seed).split(0xA6E0 + i);
    if (strategy == Strategy::Agem && memory.size() > 0) {
      DecoderModel* model_ptr = &model;
      EpisodicMemory* mem_ptr = &memory;
      CLConfig const* cfg_ptr = &cfg;
      Rng* rng_ptr = &agem_rng;
      tc.grad_hook = [model_ptr, mem_ptr, cfg_ptr, rng_ptr](std::vector<Tensor>& params) {
        auto batch = mem_ptr->sample_batch(cfg_ptr->task_training.batch_size, *rng_ptr);
        if (batch.empty()) return;
        // flatten the current gradient
        GradientVector g;
        for (auto& p : params) {
          const auto& pg = p.grad();
          g.insert(g.end(), pg.begin(), pg.end());
        }
        // reference gradient on the memory batch
        {
          Tape tape;
          Tensor ref_loss = lm_loss(*model_ptr, batch, cfg_ptr->task_training.mask_mode);
          tape.backward(ref_loss);
        }
        GradientVector g_ref;
        for (auto& p : params) {
          const auto& pg = p.grad();
          g_ref.insert(g_ref.end(), pg.begin(), pg.end());
        }
        GradientVector projected = agem_project(g, g_ref);
        std::size_t off = 0;
        for (auto& p : params) {
          auto& pg = p.grad();
          for (std::size_t j = 0; j < pg.size(); ++j) pg[j] = projected[off + j];
          off += pg.size();
        }
      };
    }

    auto t0 = std::chrono::steady_clock::now();
    if (strategy == Strategy::AdapterCl) {
      Rng arng = Rng(seed).split(fnv1a64(task.task_id));
      spawn_adapter(model, task.task_id, cfg.adapter_bottleneck, arng);
      adapter_labels.push_back(task.task_id);
      result.parameters_added +=
          adapter_param_count(cfg.model.d_model, cfg.adapter_bottleneck, cfg.model.n_layers);
      train_adapter(model, task.task_id, task.train, task.valid, tc);
    } else {
      train(model, train_data, task.valid, tc);
    }
    auto t1 = std::chrono::steady_clock::now();
    result.task_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());

    if (strategy == Strategy::L2 || strategy == Strategy::Ewc) {
      if (cfg.lambda != 0.0) {
        snapshot = snapshot_params(model.parameters());
        if (strategy == Strategy::Ewc)
          accumulate_fisher(fisher_store,
                            estimate_fisher(model, task.train, cfg.fisher_samples,
                                            cfg.task_training.mask_mode),
                            cfg.fisher_sum);
      }
    }
    if (strategy == Strategy::Replay || strategy == Strategy::Agem)
      memory.store(i, task.train);

    evaluate_all(i);
  }
  result.memory_entries = memory.size();
  if (strategy == Strategy::AdapterCl && sel_total > 0)
    result.selection_accuracy = static_cast<double>(sel_hits) / static_cast<double>(sel_total);
  auto all_params = model.parameters();
  for (const auto& label : adapter_labels) {
    auto ap = model.adapters.get(label).parameters();
    all_params.insert(all_params.end(), ap.begin(), ap.end());
  }
  result.model_checksum = checksum_params(all_params);
  return result;
}

struct AblationRow {
  std::size_t memory_size;  // SIZE_MAX encodes ALL
  double final_avg_metric;
};

inline constexpr std::size_t kMemoryAll = std::numeric_limits<std::size_t>::max();

// REPLAY once per memory size; the non-decreasing trend in |M| is the
// caller's soft check (violations are reported, not fatal).
inline std::vector<AblationRow> memory_ablation(const std::vector<std::size_t>& sizes,
                                                const Curriculum& curriculum, std::uint64_t seed,
                                                const CLConfig& cfg) {
  if (sizes.empty()) throw ContractError("memory_ablation: no sizes");
  std::vector<AblationRow> rows;
  for (std::size_t size : sizes) {
    CLConfig run_cfg = cfg;
    std::size_t biggest = 0;
    for (const auto& t : curriculum.tasks) biggest = std::max(biggest, t.train.size());
    run_cfg.memory_per_task = size == kMemoryAll ? biggest : size;
    CLRunResult res = run_curriculum(Strategy::Replay, curriculum, seed, run_cfg);
    rows.push_back({size, avg_metric(res.matrix, curriculum.tasks.size())});
  }
  return rows;
}

}  // namespace ctrlseq::cl
