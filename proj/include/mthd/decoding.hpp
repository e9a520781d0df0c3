#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mthd/error.hpp"
#include "mthd/seq2seq.hpp"
#include "mthd/textdata.hpp"

namespace mthd {

struct Hypothesis {
  TokenIds ids;  // BOS … EOS
  std::string text;
  double score = 0;  // sum of token log-probs
  double normalized_score = 0;
  std::map<std::size_t, std::string> literals;  // position → literal text for UNK stand-ins
};

/// Validated characters (the prior hypothesis prefix plus the user's
/// correction). The next hypothesis must start with them byte for byte.
struct Feedback {
  std::string prefix_chars;
};

struct SearchOptions {
  std::size_t beam_width = 6;
  std::size_t max_len = 0;
  bool length_norm = true;
};

/// 2·(source tokens without BOS/EOS) + 5.
inline std::size_t default_max_len(std::span<const TokenId> source_ids) {
  const std::size_t n = source_ids.size() >= 2 ? source_ids.size() - 2 : 0;
  return 2 * n + 5;
}

inline SearchOptions default_search_options(std::span<const TokenId> source_ids) {
  SearchOptions o;
  o.max_len = default_max_len(source_ids);
  return o;
}

namespace detail {

// Divides by the token count excluding BOS (EOS included).
inline double normalized(double score, std::size_t id_count) {
  return score / static_cast<double>(std::max<std::size_t>(1, id_count - 1));
}

struct Partial {
  TokenIds ids;
  double score = 0;
  DecoderState state;
  std::map<std::size_t, std::string> literals;
};

struct Candidate {
  std::size_t parent;
  TokenId token;
  double score;
};

// Score descending, then lower token id, then earlier parent.
inline bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.token != b.token) return a.token < b.token;
  return a.parent < b.parent;
}

inline Hypothesis finish(Partial&& p) {
  Hypothesis h;
  h.ids = std::move(p.ids);
  h.score = p.score;
  if (h.ids.back() != kEos) h.ids.push_back(kEos);
  h.normalized_score = normalized(h.score, h.ids.size());
  h.literals = std::move(p.literals);
  return h;
}

/// Advances `live` for at most `steps` steps. Finished hypotheses leave the
/// beam; whatever is still live when the budget runs out is closed with an
/// unscored EOS.
inline std::vector<Hypothesis> expand(nn::Graph& g, const ModelParams& p, const Annotations& ann,
                                      std::vector<Partial> live, std::size_t steps, std::size_t beam_width) {
  std::vector<Hypothesis> done;
  const std::size_t vocab = target_vocab_size(p);
  for (std::size_t step = 0; step < steps && !live.empty(); ++step) {
    std::vector<Candidate> candidates;
    std::vector<DecoderState> next_states(live.size());
    candidates.reserve(live.size() * vocab);
    for (std::size_t i = 0; i < live.size(); ++i) {
      DecoderOutput out = decoder_step(g, p, live[i].state, live[i].ids.back(), ann);
      next_states[i] = out.state;
      const nn::Tensor& logp = out.log_probs.value();
      for (TokenId t = 0; t < vocab; ++t) candidates.push_back({i, t, live[i].score + logp[t]});
    }
    const std::size_t keep = std::min(beam_width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      candidate_before);
    std::vector<Partial> next;
    for (std::size_t k = 0; k < keep; ++k) {
      const Candidate& c = candidates[k];
      Partial q;
      q.ids = live[c.parent].ids;
      q.ids.push_back(c.token);
      q.score = c.score;
      q.literals = live[c.parent].literals;
      q.state = next_states[c.parent];
      if (c.token == kEos)
        done.push_back(finish(std::move(q)));
      else
        next.push_back(std::move(q));
    }
    live = std::move(next);
  }
  for (auto& q : live) done.push_back(finish(std::move(q)));
  return done;
}

inline void rank(std::vector<Hypothesis>& hyps, bool length_norm) {
  std::stable_sort(hyps.begin(), hyps.end(), [length_norm](const Hypothesis& a, const Hypothesis& b) {
    const double ka = length_norm ? a.normalized_score : a.score;
    const double kb = length_norm ? b.normalized_score : b.score;
    if (ka != kb) return ka > kb;
    if (a.ids.size() != b.ids.size()) return a.ids.size() < b.ids.size();
    return a.ids < b.ids;
  });
}

}  // namespace detail

/// Argmax decoding; ties go to the lowest id. Reaching max_len closes the
/// hypothesis with an unscored EOS.
inline Hypothesis greedy_decode(const ModelParams& p, std::span<const TokenId> source_ids, std::size_t max_len,
                                const Vocabulary* vocab = nullptr) {
  nn::Graph g(false);
  Annotations ann = encode(g, p, source_ids);
  DecoderState state = decoder_start(g, p, ann);
  Hypothesis h;
  h.ids = {kBos};
  bool ended = false;
  for (std::size_t step = 0; step < max_len; ++step) {
    DecoderOutput out = decoder_step(g, p, state, h.ids.back(), ann);
    const nn::Tensor& logp = out.log_probs.value();
    TokenId best = 0;
    for (TokenId t = 1; t < logp.size(); ++t)
      if (logp[t] > logp[best]) best = t;
    h.score += logp[best];
    h.ids.push_back(best);
    state = out.state;
    if (best == kEos) {
      ended = true;
      break;
    }
  }
  if (!ended) h.ids.push_back(kEos);
  h.normalized_score = detail::normalized(h.score, h.ids.size());
  if (vocab) h.text = detokenize(h.ids, *vocab);
  return h;
}

/// Beam search over the full target vocabulary. Returns every finished
/// hypothesis, best first.
inline std::vector<Hypothesis> beam_search(const ModelParams& p, std::span<const TokenId> source_ids,
                                           const SearchOptions& options, const Vocabulary* vocab = nullptr) {
  if (options.beam_width == 0) throw ConfigError("beam width must be at least 1");
  nn::Graph g(false);
  Annotations ann = encode(g, p, source_ids);
  detail::Partial start;
  start.ids = {kBos};
  start.state = decoder_start(g, p, ann);
  auto hyps = detail::expand(g, p, ann, {std::move(start)}, options.max_len, options.beam_width);
  if (vocab)
    for (auto& h : hyps) h.text = detokenize(h.ids, *vocab, h.literals);
  detail::rank(hyps, options.length_norm);
  return hyps;
}

struct SegmentedFeedback {
  TokenIds forced_ids;
  std::string fragment;
  std::map<std::size_t, std::string> literals;  // index into forced_ids → text behind an UNK
};

/// Char mode: every prefix character is forced. Word mode: whitespace-
/// terminated words are forced and a trailing partial word is the fragment.
inline SegmentedFeedback segment_feedback(const Feedback& feedback, const Vocabulary& vocab) {
  SegmentedFeedback seg;
  auto force = [&](const std::string& tok) {
    const TokenId id = vocab.encode(tok);
    if (id == kUnk) seg.literals.emplace(seg.forced_ids.size(), tok);
    seg.forced_ids.push_back(id);
  };
  if (vocab.mode() == TokenMode::kChar) {
    for (const auto& tok : vocab.split(feedback.prefix_chars)) force(tok);
    return seg;
  }
  const std::u32string text = utf8::decode(feedback.prefix_chars);
  auto words = utf8::split_words(feedback.prefix_chars);
  if (!text.empty() && !utf8::is_space(text.back()) && !words.empty()) {
    seg.fragment = std::move(words.back());
    words.pop_back();
  }
  for (const auto& w : words) force(w);
  return seg;
}

/// Keeps the log-probs of tokens whose string starts with `fragment` and sets
/// every other entry to −∞. When nothing matches, only UNK stays live.
inline std::vector<double> constrained_next_distribution(std::span<const double> logprobs,
                                                         const std::string& fragment, const Vocabulary& vocab) {
  constexpr double kMasked = -std::numeric_limits<double>::infinity();
  std::vector<double> masked(logprobs.size(), kMasked);
  bool any = false;
  const std::size_t n = std::min(logprobs.size(), vocab.size());
  for (TokenId t = kReservedCount; t < n; ++t) {
    if (vocab.decode(t).starts_with(fragment)) {
      masked[t] = logprobs[t];
      any = true;
    }
  }
  if (!any) masked[kUnk] = logprobs[kUnk];
  return masked;
}

namespace detail {

// Feedback verbatim, then the generated continuation.
inline std::string render_constrained(const Hypothesis& h, const Feedback& feedback, const SegmentedFeedback& seg,
                                      const Vocabulary& vocab) {
  std::string text = feedback.prefix_chars;
  std::size_t pos = 1 + seg.forced_ids.size();
  const bool word = vocab.mode() == TokenMode::kWord;
  bool need_space = false;
  if (!seg.fragment.empty() && pos < h.ids.size()) {
    auto lit = h.literals.find(pos);
    const std::string& piece = lit != h.literals.end() ? lit->second : vocab.decode(h.ids[pos]);
    text += piece.substr(std::min(piece.size(), seg.fragment.size()));
    need_space = true;
    ++pos;
  }
  for (; pos < h.ids.size(); ++pos) {
    const TokenId id = h.ids[pos];
    if (id == kPad || id == kBos || id == kEos) continue;
    auto lit = h.literals.find(pos);
    if (word && need_space) text.push_back(' ');
    text += lit != h.literals.end() ? lit->second : vocab.decode(id);
    need_space = true;
  }
  return text;
}

}  // namespace detail

/// Best hypotheses compatible with the feedback: forced tokens are teacher-
/// forced (their true log-probs count toward the score), a trailing fragment
/// is completed through the masked distribution, and the rest is free beam
/// search. Empty feedback is exactly `beam_search`.
inline std::vector<Hypothesis> prefix_constrained_nbest(const ModelParams& p, const Vocabulary& vocab,
                                                        std::span<const TokenId> source_ids,
                                                        const Feedback& feedback, const SearchOptions& options) {
  if (feedback.prefix_chars.empty()) return beam_search(p, source_ids, options, &vocab);
  if (options.beam_width == 0) throw ConfigError("beam width must be at least 1");

  const SegmentedFeedback seg = segment_feedback(feedback, vocab);
  const std::size_t constrained_steps = seg.forced_ids.size() + (seg.fragment.empty() ? 0 : 1);
  if (constrained_steps > options.max_len) {
    throw ConstraintError("feedback needs " + std::to_string(constrained_steps) + " tokens but max_len is " +
                          std::to_string(options.max_len));
  }

  nn::Graph g(false);
  Annotations ann = encode(g, p, source_ids);
  detail::Partial forced;
  forced.ids = {kBos};
  forced.state = decoder_start(g, p, ann);
  for (std::size_t i = 0; i < seg.forced_ids.size(); ++i) {
    DecoderOutput out = decoder_step(g, p, forced.state, forced.ids.back(), ann);
    forced.score += out.log_probs.value()[seg.forced_ids[i]];
    if (auto lit = seg.literals.find(i); lit != seg.literals.end())
      forced.literals.emplace(forced.ids.size(), lit->second);
    forced.ids.push_back(seg.forced_ids[i]);
    forced.state = out.state;
  }

  std::vector<detail::Partial> live;
  if (seg.fragment.empty()) {
    live.push_back(std::move(forced));
  } else {
    DecoderOutput out = decoder_step(g, p, forced.state, forced.ids.back(), ann);
    const auto masked = constrained_next_distribution(out.log_probs.value().values(), seg.fragment, vocab);
    std::vector<detail::Candidate> candidates;
    for (TokenId t = 0; t < masked.size(); ++t)
      if (std::isfinite(masked[t])) candidates.push_back({0, t, forced.score + masked[t]});
    std::sort(candidates.begin(), candidates.end(), detail::candidate_before);
    candidates.resize(std::min(candidates.size(), options.beam_width));
    for (const auto& c : candidates) {
      detail::Partial q;
      q.ids = forced.ids;
      q.literals = forced.literals;
      if (c.token == kUnk) q.literals.emplace(q.ids.size(), seg.fragment);
      q.ids.push_back(c.token);
      q.score = c.score;
      q.state = out.state;
      live.push_back(std::move(q));
    }
  }

  auto hyps = detail::expand(g, p, ann, std::move(live), options.max_len - constrained_steps, options.beam_width);
  for (auto& h : hyps) h.text = detail::render_constrained(h, feedback, seg, vocab);
  detail::rank(hyps, options.length_norm);
  return hyps;
}

inline Hypothesis prefix_constrained_search(const ModelParams& p, const Vocabulary& vocab,
                                            std::span<const TokenId> source_ids, const Feedback& feedback,
                                            const SearchOptions& options) {
  return prefix_constrained_nbest(p, vocab, source_ids, feedback, options).front();
}

// ---------------------------------------------------------------------------
// Text-level helpers over a whole model.

inline Hypothesis translate(const Model& model, const std::string& source, std::size_t beam_width = 6) {
  const TokenIds ids = tokenize(source, model.source_vocab);
  SearchOptions o = default_search_options(ids);
  o.beam_width = beam_width;
  return beam_search(model.params, ids, o, &model.target_vocab).front();
}

/// Search budget for interactive correction: the free-search default, widened
/// so a long prefix still leaves room for a continuation.
inline SearchOptions correction_search_options(const Model& model, std::span<const TokenId> source_ids,
                                               const Feedback& feedback, std::size_t beam_width = 6) {
  SearchOptions o = default_search_options(source_ids);
  o.beam_width = beam_width;
  const auto seg = segment_feedback(feedback, model.target_vocab);
  const std::size_t needed = seg.forced_ids.size() + (seg.fragment.empty() ? 0 : 1);
  o.max_len = std::max(o.max_len, needed + source_ids.size());
  return o;
}

inline Hypothesis correct(const Model& model, const std::string& source, const Feedback& feedback,
                          std::size_t beam_width = 6) {
  const TokenIds ids = tokenize(source, model.source_vocab);
  return prefix_constrained_search(model.params, model.target_vocab, ids, feedback,
                                   correction_search_options(model, ids, feedback, beam_width));
}

}  // namespace mthd
