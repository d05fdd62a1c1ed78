#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlseq/digest.hpp"
#include "ctrlseq/errors.hpp"
#include "ctrlseq/rng.hpp"
#include "ctrlseq/vocab.hpp"

namespace ctrlseq::synth {

using SlotValue = std::pair<std::string, std::string>;

// ---- API-call grammar -----------------------------------------------------------

enum class ApiStyle { IntentCall, Sql };

// "intent(s1=v1, s2=v2)" per the dialogue-state serialization.
inline std::string render_intent_call(const std::string& intent,
                                      const std::vector<SlotValue>& slots) {
  std::string out = intent + "(";
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (i) out += ", ";
    out += slots[i].first + "=" + slots[i].second;
  }
  out += ")";
  return out;
}

// "SELECT * FROM domain WHERE s1=v1 s2=v2" and the BOOK variant.
inline std::string render_sql(const std::string& verb, const std::string& domain,
                              const std::vector<SlotValue>& slots) {
  std::string out = verb == "BOOK" ? "BOOK FROM " + domain : "SELECT * FROM " + domain;
  out += " WHERE";
  for (const auto& [s, v] : slots) out += " " + s + "=" + v;
  return out;
}

struct ParsedApi {
  std::string head;  // intent name, or SELECT/BOOK verb
  std::string domain;
  std::vector<SlotValue> slots;
  ApiStyle style = ApiStyle::IntentCall;
};

inline SlotValue parse_slot_value(const std::string& text, const std::string& context) {
  auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 >= text.size())
    throw ParseError("api grammar: bad slot-value '" + text + "' in " + context);
  return {text.substr(0, eq), text.substr(eq + 1)};
}

inline ParsedApi parse_api(const std::string& text) {
  ParsedApi api;
  if (text.rfind("SELECT * FROM ", 0) == 0 || text.rfind("BOOK FROM ", 0) == 0) {
    api.style = ApiStyle::Sql;
    api.head = text[0] == 'S' ? "SELECT" : "BOOK";
    std::size_t dom_start = api.head == "SELECT" ? 14 : 10;
    std::size_t where_pos = text.find(" WHERE", dom_start);
    if (where_pos == std::string::npos) throw ParseError("api grammar: missing WHERE in " + text);
    api.domain = text.substr(dom_start, where_pos - dom_start);
    std::istringstream rest(text.substr(where_pos + 6));
    std::string tok;
    while (rest >> tok) api.slots.push_back(parse_slot_value(tok, text));
    return api;
  }
  auto open = text.find('(');
  if (open == std::string::npos || text.back() != ')')
    throw ParseError("api grammar: expected intent(...) in '" + text + "'");
  api.head = text.substr(0, open);
  std::string inner = text.substr(open + 1, text.size() - open - 2);
  std::string item;
  std::istringstream is(inner);
  while (std::getline(is, item, ',')) {
    while (!item.empty() && item.front() == ' ') item.erase(item.begin());
    if (item.empty()) continue;
    api.slots.push_back(parse_slot_value(item, text));
  }
  return api;
}

inline std::string render_api(const ParsedApi& api) {
  if (api.style == ApiStyle::Sql) return render_sql(api.head, api.domain, api.slots);
  return render_intent_call(api.head, api.slots);
}

// ---- dialogues ------------------------------------------------------------------

struct DialogueTurn {
  std::string user_utterance;
  std::string system_utterance;
  std::string intent;
  std::vector<SlotValue> state;  // cumulative dialogue state after the user turn
  std::string speech_act;        // INFORM / RECOMMEND / REQUEST
  std::string api_call;          // rendered S_API, empty when no call is issued
  std::string api_out;           // rendered S_OUT, empty when the call returns nothing
};

struct Dialogue {
  std::string domain;
  std::vector<DialogueTurn> turns;
};

enum class Setting { Intent, Dst, Nlg, E2eApi, E2eResponse };

inline const char* to_string(Setting s) {
  switch (s) {
    case Setting::Intent: return "INTENT";
    case Setting::Dst: return "DST";
    case Setting::Nlg: return "NLG";
    case Setting::E2eApi: return "E2E-api";
    case Setting::E2eResponse: return "E2E-response";
  }
  return "?";
}

inline Setting setting_from_string(const std::string& s) {
  if (s == "INTENT") return Setting::Intent;
  if (s == "DST") return Setting::Dst;
  if (s == "NLG") return Setting::Nlg;
  if (s == "E2E-api") return Setting::E2eApi;
  if (s == "E2E-response") return Setting::E2eResponse;
  throw ParseError("unknown setting tag '" + s + "'");
}

struct Sample {
  std::string input;
  std::string output;
  std::string setting;
  std::string task_id;
  std::vector<std::string> skills;  // optional skill annotation
  nlohmann::json extra;             // unknown JSONL fields, preserved on read
};

// Dialogue history with speaker prefixes up to and including user turn k.
inline std::string render_history(const Dialogue& d, std::size_t upto_turn) {
  std::string out;
  for (std::size_t i = 0; i <= upto_turn; ++i) {
    if (!out.empty()) out += ' ';
    out += "USER: " + d.turns[i].user_utterance;
    if (i < upto_turn) out += " SYSTEM: " + d.turns[i].system_utterance;
  }
  return out;
}

// The four-setting formatter. INTENT: U -> I. DST: U -> I(s=v,...).
// NLG: S_OUT -> S. E2E: U + "API:" -> S_API for issuing turns, and
// U [+ "API:" S_API "OUT:" S_OUT] + "SYSTEM:" -> S for the response.
// The modularized INTENT/DST inputs carry the same "API:" trigger token the
// thesis reserves for API-call generation; without it a multi-turn history
// is ambiguous between continuing the dialogue and emitting the annotation.
inline std::vector<Sample> format_samples(const Dialogue& d, Setting setting) {
  std::vector<Sample> out;
  for (std::size_t k = 0; k < d.turns.size(); ++k) {
    const DialogueTurn& turn = d.turns[k];
    if (turn.intent.empty())
      throw DataError("dialogue turn " + std::to_string(k) + ": missing intent annotation");
    if (turn.speech_act.empty())
      throw DataError("dialogue turn " + std::to_string(k) + ": missing speech-act annotation");
    Sample s;
    s.task_id = d.domain;
    s.setting = to_string(setting);
    switch (setting) {
      case Setting::Intent:
        s.input = render_history(d, k) + " API:";
        s.output = turn.intent;
        out.push_back(s);
        break;
      case Setting::Dst:
        s.input = render_history(d, k) + " API:";
        s.output = render_intent_call(turn.intent, turn.state);
        out.push_back(s);
        break;
      case Setting::Nlg:
        if (turn.api_out.empty()) break;  // NLG pairs need a speech-act input
        s.input = turn.api_out;
        s.output = turn.system_utterance;
        out.push_back(s);
        break;
      case Setting::E2eApi:
      case Setting::E2eResponse: {
        std::string history = render_history(d, k);
        if (!turn.api_call.empty() &&
            (setting == Setting::E2eApi || setting == Setting::E2eResponse)) {
          Sample api = s;
          api.setting = to_string(Setting::E2eApi);
          api.input = history + " API:";
          api.output = turn.api_call;
          if (setting == Setting::E2eApi) out.push_back(api);
        }
        if (setting == Setting::E2eResponse) {
          Sample resp = s;
          resp.input = history;
          if (!turn.api_call.empty()) {
            resp.input += " API: " + turn.api_call;
            if (!turn.api_out.empty()) resp.input += " OUT: " + turn.api_out;
          }
          resp.input += " SYSTEM:";
          resp.output = turn.system_utterance;
          out.push_back(resp);
        }
        break;
      }
    }
  }
  return out;
}

// ---- domain generator -----------------------------------------------------------

struct SlotSpec {
  std::string name;
  std::vector<std::string> values;
};

struct DomainSpec {
  std::string name;
  std::vector<std::string> intents;
  std::vector<SlotSpec> slots;
  std::vector<std::string> body_words;  // response filler vocabulary
  ApiStyle api_style = ApiStyle::IntentCall;
  bool disjoint_vocab = false;  // prefix every content token with the domain name

  // Canonical disjoint-vocabulary domain: every content token carries the
  // domain prefix, so two domains share only reserved and structural tokens.
  static DomainSpec disjoint(const std::string& name, std::size_t n_intents = 2,
                             std::size_t n_slots = 3, std::size_t n_values = 4,
                             std::size_t n_words = 6) {
    DomainSpec spec;
    spec.name = name;
    spec.disjoint_vocab = true;
    for (std::size_t i = 0; i < n_intents; ++i)
      spec.intents.push_back(name + "_intent" + std::to_string(i));
    for (std::size_t s = 0; s < n_slots; ++s) {
      SlotSpec slot;
      slot.name = name + "_slot" + std::to_string(s);
      for (std::size_t v = 0; v < n_values; ++v)
        slot.values.push_back(name + "_val" + std::to_string(s) + "_" + std::to_string(v));
      spec.slots.push_back(slot);
    }
    for (std::size_t w = 0; w < n_words; ++w)
      spec.body_words.push_back(name + "_word" + std::to_string(w));
    return spec;
  }

  void validate() const {
    if (name.empty() || intents.empty() || slots.empty() || body_words.empty())
      throw ConfigError("domain spec '" + name + "': empty name/intents/slots/words");
    for (const auto& s : slots)
      if (s.values.empty()) throw ConfigError("domain spec: slot '" + s.name + "' has no values");
  }

  std::vector<std::string> structural_tokens() const {
    if (api_style == ApiStyle::Sql) return {"SELECT", "*", "FROM", "WHERE", "BOOK"};
    return {};
  }
};

struct DialogueDataset {
  std::string domain;
  std::vector<Dialogue> train, valid, test;

  const std::vector<Dialogue>& split(const std::string& which) const {
    if (which == "train") return train;
    if (which == "valid") return valid;
    if (which == "test") return test;
    throw ConfigError("unknown split '" + which + "'");
  }
};

// Deterministic task-oriented dialogues with API annotations. The generator
// embodies the API-emission rule: a query is issued when the speech act is
// INFORM or RECOMMEND, the state changed this turn, and the same query has
// not been issued before.
inline DialogueDataset gen_domain(const DomainSpec& spec, std::size_t n_dialogues,
                                  std::uint64_t seed) {
  spec.validate();
  Rng rng = Rng(seed).split(fnv1a64(spec.name));
  std::vector<Dialogue> dialogues;
  for (std::size_t di = 0; di < n_dialogues; ++di) {
    Dialogue d;
    d.domain = spec.name;
    std::size_t n_turns = 2 + rng.uniform_index(2);
    std::vector<SlotValue> state;
    std::set<std::string> issued;
    std::string intent = spec.intents[rng.uniform_index(spec.intents.size())];
    for (std::size_t k = 0; k < n_turns; ++k) {
      DialogueTurn turn;
      turn.intent = intent;
      // the user constrains one new slot per turn
      const SlotSpec& slot = spec.slots[k % spec.slots.size()];
      std::string value = slot.values[rng.uniform_index(slot.values.size())];
      bool state_changed = true;
      for (auto& [s, v] : state)
        if (s == slot.name) {
          state_changed = v != value;
          v = value;
        }
      bool present = false;
      for (auto& [s, v] : state) present = present || s == slot.name;
      if (!present) state.push_back({slot.name, value});
      turn.state = state;

      const std::string& w1 = spec.body_words[rng.uniform_index(spec.body_words.size())];
      const std::string& w2 = spec.body_words[rng.uniform_index(spec.body_words.size())];
      // the user names what they want: one marker token per intent keeps the
      // INTENT setting learnable from the history alone
      turn.user_utterance = intent + "_ask " + w1 + " " + slot.name + "=" + value + " " + w2;

      const char* acts[] = {"INFORM", "RECOMMEND", "REQUEST"};
      turn.speech_act = acts[rng.uniform_index(3)];

      std::string query;
      if (spec.api_style == ApiStyle::Sql) {
        bool book = intent.find("book") != std::string::npos || rng.uniform() < 0.3;
        query = render_sql(book ? "BOOK" : "SELECT", spec.name, state);
      } else {
        query = render_intent_call(intent, state);
      }
      bool trigger = (turn.speech_act != std::string("REQUEST")) && state_changed &&
                     issued.count(query) == 0;
      if (trigger) {
        turn.api_call = query;
        issued.insert(query);
        // single-record return: echo the constrained values plus a result token
        std::string record;
        for (const auto& [s, v] : state) record += (record.empty() ? "" : " ") + s + "=" + v;
        turn.api_out = rng.uniform() < 0.15
                           ? spec.name + "_NOT_AVAILABLE"
                           : record + " " + spec.name + "_result" +
                                 std::to_string(rng.uniform_index(4));
      }
      const std::string& w3 = spec.body_words[rng.uniform_index(spec.body_words.size())];
      turn.system_utterance =
          w3 + " " + value + " " + spec.body_words[rng.uniform_index(spec.body_words.size())];
      d.turns.push_back(turn);
    }
    dialogues.push_back(d);
  }
  DialogueDataset out;
  out.domain = spec.name;
  std::size_t n_train = (n_dialogues * 8) / 10;
  std::size_t n_valid = n_dialogues / 10;
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    if (i < n_train)
      out.train.push_back(std::move(dialogues[i]));
    else if (i < n_train + n_valid)
      out.valid.push_back(std::move(dialogues[i]));
    else
      out.test.push_back(std::move(dialogues[i]));
  }
  return out;
}

struct SampleDataset {
  std::string task_id;
  std::vector<Sample> train, valid, test;
};

inline SampleDataset format_dataset(const DialogueDataset& data, Setting setting) {
  SampleDataset out;
  out.task_id = data.domain;
  for (const auto& d : data.train)
    for (auto& s : format_samples(d, setting)) out.train.push_back(std::move(s));
  for (const auto& d : data.valid)
    for (auto& s : format_samples(d, setting)) out.valid.push_back(std::move(s));
  for (const auto& d : data.test)
    for (auto& s : format_samples(d, setting)) out.test.push_back(std::move(s));
  return out;
}

// ---- attribute corpora ------------------------------------------------------------

struct StyleSpec {
  std::vector<std::string> style_names;
  std::size_t markers_per_style = 10;
  std::size_t common_tokens = 6;
  std::size_t sentence_len = 6;
  double separation = 1.0;  // 1 = disjoint marker pools, 0 = indistinguishable
  double marker_rate = 0.8;

  void validate() const {
    if (style_names.size() < 2) throw ConfigError("style spec: need at least two styles");
    if (separation < 0.0 || separation > 1.0)
      throw ConfigError("style spec: separation must lie in [0,1]");
  }
};

struct LabeledText {
  std::string text;
  std::size_t label = 0;
};

// Sentences whose style-marker distributions differ by the separation
// parameter: separation 1 keeps marker pools disjoint (Bayes accuracy 100%),
// separation 0 makes the styles indistinguishable.
inline std::vector<LabeledText> gen_attribute_corpus(const StyleSpec& spec, std::size_t n,
                                                     std::uint64_t seed) {
  spec.validate();
  Rng rng = Rng(seed).split(0x57E);
  std::size_t n_styles = spec.style_names.size();
  std::vector<LabeledText> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t label = i % n_styles;
    std::string text;
    for (std::size_t t = 0; t < spec.sentence_len; ++t) {
      std::string tok;
      if (rng.uniform() < spec.marker_rate) {
        // own pool with prob (1+sep)/2 over the binary-choice margin
        std::size_t pool = label;
        if (rng.uniform() >= (1.0 + spec.separation) / 2.0) {
          pool = rng.uniform_index(n_styles - 1);
          if (pool >= label) ++pool;
        }
        tok = spec.style_names[pool] + "_m" + std::to_string(rng.uniform_index(spec.markers_per_style));
      } else {
        tok = "common_w" + std::to_string(rng.uniform_index(spec.common_tokens));
      }
      if (!text.empty()) text += ' ';
      text += tok;
    }
    out.push_back({text, label});
  }
  return out;
}

// ---- JSONL --------------------------------------------------------------------

inline void write_jsonl(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_jsonl: cannot open " + path);
  for (const auto& s : samples) {
    nlohmann::json j = s.extra.is_object() ? s.extra : nlohmann::json::object();
    j["input"] = s.input;
    j["output"] = s.output;
    j["setting"] = s.setting;
    j["task_id"] = s.task_id;
    if (!s.skills.empty()) j["skills"] = s.skills;
    os << j.dump() << '\n';
  }
}

inline std::vector<Sample> read_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_jsonl: cannot open " + path);
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("jsonl parse error at line " + std::to_string(line_no) + ": " + e.what());
    }
    Sample s;
    try {
      s.input = j.at("input").get<std::string>();
      s.output = j.at("output").get<std::string>();
      s.setting = j.value("setting", std::string("E2E-response"));
      s.task_id = j.value("task_id", std::string(""));
      if (j.contains("skills")) s.skills = j.at("skills").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("jsonl schema error at line " + std::to_string(line_no) + ": " + e.what());
    }
    for (auto& [key, value] : j.items())
      if (key != "input" && key != "output" && key != "setting" && key != "task_id" &&
          key != "skills")
        s.extra[key] = value;
    out.push_back(std::move(s));
  }
  return out;
}

// Vocabulary over every token appearing in the samples (reserved ids first).
inline Vocabulary build_vocabulary(const std::vector<const SampleDataset*>& datasets) {
  Vocabulary vocab;
  for (const auto* ds : datasets)
    for (const auto* split : {&ds->train, &ds->valid, &ds->test})
      for (const auto& s : *split) {
        vocab.absorb(s.input);
        vocab.absorb(s.output);
      }
  return vocab;
}

}  // namespace ctrlseq::synth
