#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mthd/error.hpp"
#include "mthd/numerics.hpp"

namespace mthd {

// ---------------------------------------------------------------------------
// UTF-8

namespace utf8 {

/// Decodes UTF-8; malformed sequences become U+FFFD.
inline std::u32string decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (c < 0x80) {
      len = 1;
      cp = c;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c >> 4) == 0xE) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c >> 3) == 0x1E) {
      len = 4;
      cp = c & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) ok = false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (ok && ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
               cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)))
      ok = false;
    if (!ok) {
      out.push_back(U'\uFFFD');
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string encode(std::u32string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char32_t cp : s) append(out, cp);
  return out;
}

inline std::size_t length(std::string_view s) { return decode(s).size(); }

inline bool is_space(char32_t c) {
  return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
         c == 0x205F || c == 0x3000;
}

/// Splits on runs of Unicode whitespace; empty pieces are dropped.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::u32string current;
  for (char32_t c : decode(text)) {
    if (is_space(c)) {
      if (!current.empty()) words.push_back(encode(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) words.push_back(encode(current));
  return words;
}

}  // namespace utf8

// ---------------------------------------------------------------------------
// Vocabulary

enum class TokenMode { kChar, kWord };

inline std::string to_string(TokenMode mode) { return mode == TokenMode::kChar ? "char" : "word"; }

inline TokenMode parse_token_mode(std::string_view s) {
  if (s == "char") return TokenMode::kChar;
  if (s == "word") return TokenMode::kWord;
  throw ConfigError("unknown token mode '" + std::string(s) + "'");
}

using TokenId = std::size_t;
using TokenIds = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kReservedCount = 4;

class Vocabulary {
 public:
  static constexpr std::string_view kReserved[kReservedCount] = {"<pad>", "<s>", "</s>", "<unk>"};

  explicit Vocabulary(TokenMode mode = TokenMode::kChar) : mode_(mode) {
    for (auto r : kReserved) insert(std::string(r));
  }

  /// Rebuilds a vocabulary from its full token table (reserved entries first).
  static Vocabulary from_tokens(TokenMode mode, const std::vector<std::string>& tokens) {
    Vocabulary v(mode);
    if (tokens.size() < kReservedCount) throw FormatError("vocabulary lacks reserved tokens");
    for (std::size_t i = 0; i < kReservedCount; ++i) {
      if (tokens[i] != kReserved[i]) throw FormatError("vocabulary reserved token mismatch at " + std::to_string(i));
    }
    for (std::size_t i = kReservedCount; i < tokens.size(); ++i) {
      if (!v.insert(tokens[i])) throw FormatError("duplicate vocabulary token '" + tokens[i] + "'");
    }
    return v;
  }

  TokenMode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  static bool is_special(TokenId id) { return id < kReservedCount; }

  /// Id of a token; UNK when absent.
  TokenId encode(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  const std::string& decode(TokenId id) const {
    if (id >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(tokens_.size()));
    }
    return tokens_[id];
  }

  /// Splits text into token strings according to the mode.
  std::vector<std::string> split(std::string_view text) const {
    if (mode_ == TokenMode::kWord) return utf8::split_words(text);
    std::vector<std::string> out;
    for (char32_t c : utf8::decode(text)) {
      std::string s;
      utf8::append(s, c);
      out.push_back(std::move(s));
    }
    return out;
  }

  bool insert(const std::string& token) {
    if (ids_.count(token)) return false;
    ids_.emplace(token, tokens_.size());
    tokens_.push_back(token);
    return true;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.mode_ == b.mode_ && a.tokens_ == b.tokens_;
  }

 private:
  TokenMode mode_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

inline bool is_reserved_string(std::string_view token) {
  return std::find(std::begin(Vocabulary::kReserved), std::end(Vocabulary::kReserved), token) !=
         std::end(Vocabulary::kReserved);
}

/// Reserved tokens, then every token seen at least `min_freq` times ordered by
/// frequency (descending) and then bytewise.
inline Vocabulary build_vocab(const std::vector<std::string>& lines, TokenMode mode,
                              std::size_t min_freq) {
  if (min_freq == 0) throw ConfigError("min_freq must be positive");
  Vocabulary vocab(mode);
  std::map<std::string, std::size_t> counts;
  for (const auto& line : lines)
    for (auto& tok : vocab.split(line))
      if (tok != "\n" && tok != "\r" && !is_reserved_string(tok)) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [tok, n] : ranked)
    if (n >= min_freq) vocab.insert(tok);
  return vocab;
}

inline std::size_t default_min_freq(TokenMode mode) { return mode == TokenMode::kChar ? 1 : 2; }

/// BOS + ids + EOS.
inline TokenIds tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenIds ids{kBos};
  for (const auto& tok : vocab.split(text)) ids.push_back(vocab.encode(tok));
  ids.push_back(kEos);
  return ids;
}

/// Renders ids as text. PAD/BOS/EOS are dropped; `literals` override the
/// rendering at given positions (used for UNK tokens standing in for text the
/// vocabulary cannot express).
inline std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab,
                              const std::map<std::size_t, std::string>& literals = {}) {
  std::string out;
  bool first = true;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const TokenId id = ids[i];
    const std::string& tok = vocab.decode(id);
    if (id == kPad || id == kBos || id == kEos) continue;
    auto lit = literals.find(i);
    const std::string& piece = lit != literals.end() ? lit->second : tok;
    if (vocab.mode() == TokenMode::kWord && !first) out.push_back(' ');
    out += piece;
    first = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parallel corpus

struct ParallelCorpus {
  std::vector<std::string> sources;
  std::vector<std::string> targets;

  std::size_t size() const noexcept { return sources.size(); }
  bool empty() const noexcept { return sources.empty(); }

  void add(std::string source, std::string target) {
    sources.push_back(std::move(source));
    targets.push_back(std::move(target));
  }
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Loads aligned source/target files. Pairs where either side is empty are
/// dropped; mismatched line counts are a format error.
inline ParallelCorpus load_corpus(const std::string& source_path, const std::string& target_path) {
  auto src = read_lines(source_path);
  auto tgt = read_lines(target_path);
  if (src.size() != tgt.size()) {
    throw FormatError("corpus sides differ in length: '" + source_path + "' has " +
                      std::to_string(src.size()) + " lines, '" + target_path + "' has " +
                      std::to_string(tgt.size()));
  }
  ParallelCorpus corpus;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty() || tgt[i].empty()) continue;
    corpus.add(std::move(src[i]), std::move(tgt[i]));
  }
  return corpus;
}

inline void save_corpus(const ParallelCorpus& corpus, const std::string& source_path,
                        const std::string& target_path) {
  write_lines(source_path, corpus.sources);
  write_lines(target_path, corpus.targets);
}

// ---------------------------------------------------------------------------
// Antiquation rules

struct AntiquationRule {
  std::u32string match;  // literal, without anchors
  bool word_start = false;
  bool word_end = false;
  std::u32string replacement;
  double probability = 1.0;
};

using AntiquationRules = std::vector<AntiquationRule>;

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

/// Parses `pattern TAB replacement TAB probability` lines. `#` starts a
/// comment line; blank lines are ignored.
inline AntiquationRules parse_rules(std::string_view text) {
  AntiquationRules rules;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string stripped = detail::trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    auto fail = [&](const std::string& why) {
      throw RuleParseError("rules line " + std::to_string(line_no) + ": " + why);
    };
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find('\t', start)) != std::string::npos; start = pos + 1)
      fields.push_back(line.substr(start, pos - start));
    fields.push_back(line.substr(start));
    if (fields.size() != 3) fail("expected 3 tab-separated fields, got " + std::to_string(fields.size()));

    AntiquationRule rule;
    std::u32string pattern = utf8::decode(fields[0]);
    if (!pattern.empty() && pattern.front() == U'^') {
      rule.word_start = true;
      pattern.erase(0, 1);
    }
    if (!pattern.empty() && pattern.back() == U'$') {
      rule.word_end = true;
      pattern.pop_back();
    }
    if (pattern.empty()) fail("empty pattern");
    if (pattern.find(U'^') != std::u32string::npos || pattern.find(U'$') != std::u32string::npos)
      fail("anchors are only allowed at the pattern edges");
    for (char32_t c : pattern)
      if (utf8::is_space(c)) fail("pattern may not contain whitespace");
    rule.match = std::move(pattern);
    rule.replacement = utf8::decode(fields[1]);

    const std::string prob = detail::trim(fields[2]);
    std::size_t used = 0;
    try {
      rule.probability = std::stod(prob, &used);
    } catch (const std::exception&) {
      fail("unparseable probability '" + prob + "'");
    }
    if (used != prob.size()) fail("unparseable probability '" + prob + "'");
    if (!(rule.probability >= 0.0 && rule.probability <= 1.0))
      fail("probability outside [0,1]: " + prob);
    rules.push_back(std::move(rule));
  }
  return rules;
}

inline AntiquationRules load_rules(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open rules file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_rules(ss.str());
}

namespace detail {

// Letters and digits count as word characters; whitespace and ASCII
// punctuation delimit words for the anchors.
inline bool is_word_char(char32_t c) {
  if (utf8::is_space(c)) return false;
  if (c < 0x80) return std::isalnum(static_cast<int>(c)) != 0;
  return true;
}

}  // namespace detail

/// Applies one rule left to right over non-overlapping matches. Each match
/// draws one uniform number; the replacement happens when it is below the
/// rule's probability.
inline std::u32string apply_rule(const std::u32string& text, const AntiquationRule& rule,
                                 nn::Rng& rng) {
  std::u32string out;
  const std::size_t n = rule.match.size();
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = i + n <= text.size() && text.compare(i, n, rule.match) == 0;
    if (matched && rule.word_start && i > 0 && detail::is_word_char(text[i - 1])) matched = false;
    if (matched && rule.word_end && i + n < text.size() && detail::is_word_char(text[i + n]))
      matched = false;
    if (!matched) {
      out.push_back(text[i++]);
      continue;
    }
    if (rng.uniform() < rule.probability)
      out += rule.replacement;
    else
      out.append(text, i, n);
    i += n;
  }
  return out;
}

inline std::string antiquate(std::string_view line, const AntiquationRules& rules, nn::Rng& rng) {
  std::u32string text = utf8::decode(line);
  for (const auto& rule : rules) text = apply_rule(text, rule, rng);
  return utf8::encode(text);
}

/// Source side = rules applied to each modern line, target side = the line
/// unchanged. Deterministic for fixed (lines, rules, seed).
inline ParallelCorpus gen_synthetic_corpus(const std::vector<std::string>& modern_lines,
                                           const AntiquationRules& rules, std::uint64_t seed) {
  nn::Rng rng(seed);
  ParallelCorpus corpus;
  for (const auto& line : modern_lines) corpus.add(antiquate(line, rules, rng), line);
  return corpus;
}

}  // namespace mthd
