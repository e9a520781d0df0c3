#pragma once

#include <string>
#include <vector>

#include "mthd/mthd.hpp"

namespace fixture {

/// Small random model. `spread` widens the init range so distributions are far
/// from uniform, which makes search tests discriminating.
inline mthd::ModelParams toy_params(std::size_t src_vocab, std::size_t tgt_vocab, std::size_t embed,
                                    std::size_t hidden, std::uint64_t seed, double spread = 1.0) {
  mthd::ModelConfig c;
  c.vocab_size_src = src_vocab;
  c.vocab_size_tgt = tgt_vocab;
  c.embed_dim = embed;
  c.hidden_dim = hidden;
  c.seed = seed;
  mthd::ModelParams p = mthd::init_model(c);
  if (spread != 1.0)
    for (auto& param : p.set)
      for (auto& v : param.value.values()) v *= spread;
  return p;
}

inline mthd::Model toy_model(mthd::TokenMode mode, const std::vector<std::string>& src_tokens,
                             const std::vector<std::string>& tgt_tokens, std::size_t embed, std::size_t hidden,
                             std::uint64_t seed, double spread = 1.0) {
  mthd::Model m;
  m.source_vocab = mthd::Vocabulary(mode);
  m.target_vocab = mthd::Vocabulary(mode);
  for (const auto& t : src_tokens) m.source_vocab.insert(t);
  for (const auto& t : tgt_tokens) m.target_vocab.insert(t);
  m.config.vocab_size_src = m.source_vocab.size();
  m.config.vocab_size_tgt = m.target_vocab.size();
  m.config.embed_dim = embed;
  m.config.hidden_dim = hidden;
  m.config.mode = mode;
  m.config.seed = seed;
  m.params = toy_params(m.config.vocab_size_src, m.config.vocab_size_tgt, embed, hidden, seed, spread);
  return m;
}

inline mthd::Model char_model(std::uint64_t seed, double spread = 1.0) {
  return toy_model(mthd::TokenMode::kChar, {"a", "b", "c", " ", "ñ"}, {"a", "b", "c", " ", "é"}, 6, 6, seed,
                   spread);
}

inline mthd::Model word_model(std::uint64_t seed, double spread = 1.0) {
  return toy_model(mthd::TokenMode::kWord, {"the", "cat", "sat", "on", "mat"},
                   {"the", "cat", "car", "cats", "dog", "sat", "on", "mat"}, 6, 6, seed, spread);
}

/// Ids of the random draw `n` tokens long, wrapped in BOS/EOS.
inline mthd::TokenIds random_ids(mthd::nn::Rng& rng, std::size_t vocab, std::size_t n) {
  mthd::TokenIds ids{mthd::kBos};
  for (std::size_t i = 0; i < n; ++i) ids.push_back(mthd::kReservedCount + rng.below(vocab - mthd::kReservedCount));
  ids.push_back(mthd::kEos);
  return ids;
}

}  // namespace fixture
