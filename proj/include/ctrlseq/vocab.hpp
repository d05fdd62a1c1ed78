#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctrlseq/errors.hpp"

namespace ctrlseq {

// Reserved token ids, fixed across every vocabulary in the artifact.
namespace tok {
constexpr std::size_t kPad = 0;
constexpr std::size_t kBos = 1;
constexpr std::size_t kEos = 2;
constexpr std::size_t kUser = 3;    // "USER:"
constexpr std::size_t kSystem = 4;  // "SYSTEM:"
constexpr std::size_t kApi = 5;     // "API:"
constexpr std::size_t kOut = 6;     // "OUT:"
constexpr std::size_t kReserved = 7;
}  // namespace tok

// Whitespace-token vocabulary. Line number equals token id in the on-disk
// format (UTF-8, one token per line).
class Vocabulary {
 public:
  Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "USER:", "SYSTEM:", "API:", "OUT:"})
      add(t);
  }

  std::size_t add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    tokens_.push_back(token);
    index_[token] = tokens_.size() - 1;
    return tokens_.size() - 1;
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw DataError("vocabulary: unknown token '" + token + "'");
    return it->second;
  }

  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw IndexError("vocabulary: id out of range");
    return tokens_[id];
  }

  std::size_t size() const { return tokens_.size(); }

  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
  }

  std::vector<std::size_t> encode(const std::string& text) const {
    std::vector<std::size_t> ids;
    for (const auto& w : split(text)) ids.push_back(id(w));
    return ids;
  }

  // Ingests every whitespace token of `text` into the vocabulary.
  void absorb(const std::string& text) {
    for (const auto& w : split(text)) add(w);
  }

  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("vocabulary: cannot write " + path);
    for (const auto& t : tokens_) os << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("vocabulary: cannot read " + path);
    Vocabulary v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    while (std::getline(is, line)) {
      v.tokens_.push_back(line);
      v.index_[line] = v.tokens_.size() - 1;
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace ctrlseq
