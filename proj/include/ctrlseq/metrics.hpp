#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ctrlseq/errors.hpp"
#include "ctrlseq/train.hpp"
#include "ctrlseq/vocab.hpp"

namespace ctrlseq::metrics {

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::size_t support = 0;
  std::string config;
};

// Geometric-mean inverse token probability over the corpus, computed in log
// space. Shares sequence_nll with the adapter selector so the two agree to
// rounding.
inline double perplexity(const DecoderModel& model,
                         const std::vector<std::vector<std::size_t>>& corpus,
                         const AdapterParams* adapter = nullptr) {
  if (corpus.empty()) throw ContractError("perplexity: empty corpus");
  double total_nll = 0.0;
  std::size_t total_tokens = 0;
  for (const auto& ids : corpus) {
    auto [nll, count] = sequence_nll(model, ids, adapter);
    total_nll += nll;
    total_tokens += count;
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

// Unique n-grams across all responses divided by total n-gram count.
inline double distinct_n(const std::vector<std::string>& responses, std::size_t n) {
  if (n < 1) throw ConfigError("distinct_n: n must be >= 1");
  std::set<std::vector<std::string>> unique;
  std::size_t total = 0;
  for (const auto& r : responses) {
    auto toks = Vocabulary::split(r);
    if (toks.size() < n) continue;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
      unique.insert(std::vector<std::string>(toks.begin() + i, toks.begin() + i + n));
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

inline double intent_accuracy(const std::vector<std::string>& pred,
                              const std::vector<std::string>& gold) {
  if (pred.size() != gold.size()) throw DimensionError("intent_accuracy: unaligned lists");
  if (pred.empty()) throw ContractError("intent_accuracy: empty lists");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

using SlotValues = std::vector<std::pair<std::string, std::string>>;

// A turn counts only when its full slot-value set matches, order-insensitive.
inline double joint_goal_accuracy(const std::vector<SlotValues>& pred,
                                  const std::vector<SlotValues>& gold) {
  if (pred.size() != gold.size()) throw DimensionError("joint_goal_accuracy: unaligned lists");
  if (pred.empty()) throw ContractError("joint_goal_accuracy: empty lists");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto a = pred[i], b = gold[i];
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    hit += a == b;
  }
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline bool is_binary_slot_value(const std::string& v) { return v == "yes" || v == "no"; }

// Fraction of gold slot values absent from the paired response. Binary
// yes/no values are excluded from the count.
inline double slot_error_rate(const std::vector<std::string>& responses,
                              const std::vector<SlotValues>& gold_slots) {
  if (responses.size() != gold_slots.size())
    throw DimensionError("slot_error_rate: unaligned lists");
  std::size_t total = 0, missing = 0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    auto toks = Vocabulary::split(responses[i]);
    std::set<std::string> present(toks.begin(), toks.end());
    for (const auto& [slot, value] : gold_slots[i]) {
      if (is_binary_slot_value(value)) continue;
      ++total;
      missing += present.count(value) == 0;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(missing) / static_cast<double>(total);
}

// Corpus BLEU with brevity penalty; zero n-gram matches are smoothed by the
// additive constant (default 0.1) so short toy responses stay comparable.
inline double bleu(const std::vector<std::string>& candidates,
                   const std::vector<std::string>& references, std::size_t max_n = 4,
                   double smoothing = 0.1) {
  if (candidates.size() != references.size()) throw DimensionError("bleu: unaligned lists");
  if (candidates.empty()) throw ContractError("bleu: empty lists");
  std::vector<double> match(max_n, 0.0), total(max_n, 0.0);
  std::size_t cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto c = Vocabulary::split(candidates[i]);
    auto r = Vocabulary::split(references[i]);
    cand_len += c.size();
    ref_len += r.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      if (c.size() < n) continue;
      std::map<std::vector<std::string>, std::size_t> ref_counts;
      for (std::size_t j = 0; j + n <= r.size(); ++j)
        ++ref_counts[std::vector<std::string>(r.begin() + j, r.begin() + j + n)];
      for (std::size_t j = 0; j + n <= c.size(); ++j) {
        std::vector<std::string> gram(c.begin() + j, c.begin() + j + n);
        total[n - 1] += 1.0;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end() && it->second > 0) {
          match[n - 1] += 1.0;
          --it->second;
        }
      }
    }
  }
  double log_precision = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    double m = match[n], t = total[n];
    if (t == 0.0) {
      t = 1.0;  // no n-grams of this order at all; treat as fully smoothed
      m = 0.0;
    }
    if (m == 0.0) m = smoothing;
    log_precision += std::log(m / t) / static_cast<double>(max_n);
  }
  double bp = cand_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return bp * std::exp(log_precision);
}

// Micro-averaged F1 of entity tokens in responses against per-sample gold
// sets. The entity inventory is the union of all gold sets; a sample's
// predictions are its response tokens restricted to that inventory. With no
// gold entities anywhere and none predicted the score is defined as 1.
inline double entity_f1(const std::vector<std::string>& responses,
                        const std::vector<std::set<std::string>>& gold_sets) {
  if (responses.size() != gold_sets.size()) throw DimensionError("entity_f1: unaligned lists");
  std::set<std::string> inventory;
  for (const auto& g : gold_sets) inventory.insert(g.begin(), g.end());
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    auto toks = Vocabulary::split(responses[i]);
    std::set<std::string> pred;
    for (const auto& t : toks)
      if (inventory.count(t)) pred.insert(t);
    for (const auto& p : pred)
      if (gold_sets[i].count(p))
        tp += 1.0;
      else
        fp += 1.0;
    for (const auto& g : gold_sets[i])
      if (pred.count(g) == 0) fn += 1.0;
  }
  if (tp == 0.0 && fp == 0.0 && fn == 0.0) return 1.0;  // vacuous case
  double precision = tp + fp == 0.0 ? 0.0 : tp / (tp + fp);
  double recall = tp + fn == 0.0 ? 0.0 : tp / (tp + fn);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

// Spearman rank correlation; average ranks for ties.
inline double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("spearman_rho: bad inputs");
  auto ranks = [](const std::vector<double>& v) {
    std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(x), ry = ranks(y);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= rx.size();
  my /= ry.size();
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  if (dx == 0.0 || dy == 0.0) return 0.0;
  return num / std::sqrt(dx * dy);
}

}  // namespace ctrlseq::metrics
