#pragma once

// Text pipeline: a lowercasing tokenizer, a frequency-built vocabulary with
// three reserved rows, and fixed-length id sequences ready for the encoder.

#include <cstdint>
#include <unordered_map>

#include "mxe/util.hpp"

namespace mxe {

struct Vocabulary {
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kCls = 1;
  static constexpr int32_t kUnk = 2;

  std::vector<std::string> tokens;                  // id -> token, reserved rows first
  std::unordered_map<std::string, int32_t> index;   // token -> id

  int32_t size() const { return int32_t(tokens.size()); }

  int32_t id_of(const std::string& token) const {
    auto it = index.find(token);
    return it == index.end() ? kUnk : it->second;
  }
};

// Maximal runs of ASCII alphanumerics (lowercased) or non-ASCII bytes; every
// ASCII punctuation or whitespace byte is a separator.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    bool keep = (c >= 0x80) || (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') ||
                (c >= 'A' && c <= 'Z');
    if (keep) {
      cur.push_back(char(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// Counts tokens over the corpus, keeps those with count >= min_freq, orders by
// descending frequency with ties broken lexicographically, truncates so the
// total size including the reserved rows never exceeds max_size.
inline Vocabulary build_vocabulary(const std::vector<std::string>& corpus, size_t min_freq,
                                   size_t max_size) {
  check_arg(min_freq >= 1, "min_freq must be at least 1");
  check_arg(max_size == 0 || max_size >= 4,
            "max_size must leave room beyond the reserved rows (0 for no cap)");
  std::unordered_map<std::string, uint64_t> counts;
  for (const auto& text : corpus)
    for (auto& tok : tokenize(text)) ++counts[tok];

  std::vector<std::pair<std::string, uint64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.tokens = {"<pad>", "<cls>", "<unk>"};
  for (const auto& [tok, cnt] : ranked) {
    if (cnt < min_freq) break;
    if (max_size != 0 && v.tokens.size() >= max_size) break;
    v.tokens.push_back(tok);
  }
  for (size_t i = 0; i < v.tokens.size(); ++i) v.index.emplace(v.tokens[i], int32_t(i));
  return v;
}

// Fixed-length id sequence: CLS first, then up to max_len - 1 token ids,
// PAD-filled to exactly max_len. attn_len counts the non-PAD prefix.
struct TokenSequence {
  std::vector<int32_t> ids;
  int32_t attn_len = 0;
};

inline TokenSequence encode_text(const Vocabulary& vocab, const std::string& text,
                                 int32_t max_len) {
  check_arg(max_len >= 2, "max_len must be at least 2 (CLS plus one token)");
  TokenSequence seq;
  seq.ids.assign(size_t(max_len), Vocabulary::kPad);
  seq.ids[0] = Vocabulary::kCls;
  int32_t pos = 1;
  for (const auto& tok : tokenize(text)) {
    if (pos >= max_len) break;
    seq.ids[size_t(pos++)] = vocab.id_of(tok);
  }
  seq.attn_len = pos;
  return seq;
}

// vocab file: "id<TAB>token" per line, ids dense from 0, reserved rows first
inline void save_vocabulary(std::ostream& out, const Vocabulary& v) {
  for (size_t i = 0; i < v.tokens.size(); ++i)
    out << i << "\t" << v.tokens[i] << "\n";
}

inline void save_vocabulary(const std::string& path, const Vocabulary& v) {
  std::ofstream out(path, std::ios::binary);
  check_io(out.good(), "cannot write vocabulary: " + path);
  save_vocabulary(out, v);
  check_io(bool(out), "failed writing vocabulary: " + path);
}

inline Vocabulary load_vocabulary(const std::string& path) {
  Vocabulary v;
  size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    check_arg(fields.size() == 2, path + ":" + std::to_string(lineno) + ": expected id<TAB>token");
    uint64_t id = parse_u64(fields[0], path + ":" + std::to_string(lineno));
    check_arg(id == v.tokens.size(), path + ":" + std::to_string(lineno) + ": ids must be dense");
    v.tokens.push_back(fields[1]);
  }
  check_arg(v.tokens.size() >= 3 && v.tokens[0] == "<pad>" && v.tokens[1] == "<cls>" &&
                v.tokens[2] == "<unk>",
            path + ": reserved rows <pad>, <cls>, <unk> must come first");
  for (size_t i = 0; i < v.tokens.size(); ++i) v.index.emplace(v.tokens[i], int32_t(i));
  return v;
}

}  // namespace mxe
