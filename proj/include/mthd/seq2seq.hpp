#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mthd/error.hpp"
#include "mthd/numerics.hpp"
#include "mthd/textdata.hpp"

namespace mthd {

struct ModelConfig {
  std::size_t vocab_size_src = 0;
  std::size_t vocab_size_tgt = 0;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  TokenMode mode = TokenMode::kChar;
  std::uint64_t seed = 1;

  static constexpr std::size_t kMaxSourceTokens = 512;
  static constexpr double kInitRange = 0.08;

  void validate() const {
    if (vocab_size_src == 0 || vocab_size_tgt == 0 || embed_dim == 0 || hidden_dim == 0) {
      throw ConfigError("model dimensions must be positive (vocab " + std::to_string(vocab_size_src) +
                        "/" + std::to_string(vocab_size_tgt) + ", embed " + std::to_string(embed_dim) +
                        ", hidden " + std::to_string(hidden_dim) + ")");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Parameter slots of one gated recurrent cell.
struct GruSlots {
  std::size_t w_update, w_reset, w_candidate;
  std::size_t u_update, u_reset, u_candidate;
  std::size_t b_update, b_reset, b_candidate;
};

/// Encoder–decoder parameters. Every tensor lives in `set`, in a fixed order
/// that is also the checkpoint order.
struct ModelParams {
  nn::ParameterSet set;
  std::size_t src_embed = 0, tgt_embed = 0;
  GruSlots enc_fwd{}, enc_bwd{}, dec{};
  std::size_t init_w = 0, init_b = 0;
  std::size_t att_query = 0, att_key = 0, att_score = 0;
  std::size_t out_w = 0, out_b = 0;

  const nn::Parameter& operator[](std::size_t slot) const { return set[slot]; }

  /// Declares every parameter with a zero value. Shared by init and load so
  /// ids and order cannot drift apart.
  static ModelParams layout(const ModelConfig& c) {
    c.validate();
    ModelParams p;
    const std::size_t e = c.embed_dim, h = c.hidden_dim, a = c.hidden_dim;
    auto add = [&](const std::string& id, nn::Shape shape) { return p.set.add(id, nn::Tensor(std::move(shape))); };
    auto gru = [&](const std::string& prefix, std::size_t in) {
      GruSlots g{};
      g.w_update = add(prefix + ".w_update", {h, in});
      g.w_reset = add(prefix + ".w_reset", {h, in});
      g.w_candidate = add(prefix + ".w_candidate", {h, in});
      g.u_update = add(prefix + ".u_update", {h, h});
      g.u_reset = add(prefix + ".u_reset", {h, h});
      g.u_candidate = add(prefix + ".u_candidate", {h, h});
      g.b_update = add(prefix + ".b_update", {h});
      g.b_reset = add(prefix + ".b_reset", {h});
      g.b_candidate = add(prefix + ".b_candidate", {h});
      return g;
    };
    p.src_embed = add("embed.source", {c.vocab_size_src, e});
    p.tgt_embed = add("embed.target", {c.vocab_size_tgt, e});
    p.enc_fwd = gru("encoder.forward", e);
    p.enc_bwd = gru("encoder.backward", e);
    p.init_w = add("decoder.init.w", {h, 2 * h});
    p.init_b = add("decoder.init.b", {h});
    p.att_query = add("attention.query", {a, h});
    p.att_key = add("attention.key", {a, 2 * h});
    p.att_score = add("attention.score", {a});
    p.dec = gru("decoder.cell", e + 2 * h);
    p.out_w = add("output.w", {h, c.vocab_size_tgt});
    p.out_b = add("output.b", {c.vocab_size_tgt});
    return p;
  }
};

/// Uniform(−0.08, 0.08) initialization from the config seed.
inline ModelParams init_model(const ModelConfig& config) {
  ModelParams p = ModelParams::layout(config);
  nn::Rng rng(config.seed);
  for (auto& param : p.set)
    for (auto& v : param.value.values()) v = rng.uniform(-ModelConfig::kInitRange, ModelConfig::kInitRange);
  return p;
}

/// A trained system: configuration, frozen vocabularies and parameters.
struct Model {
  ModelConfig config;
  Vocabulary source_vocab{TokenMode::kChar};
  Vocabulary target_vocab{TokenMode::kChar};
  ModelParams params;
};

/// Per-position bidirectional encoder states (T×2h) and their attention keys.
struct Annotations {
  nn::Var states;
  nn::Var keys;
  std::size_t length() const { return states.shape()[0]; }
};

struct DecoderState {
  nn::Var hidden;
};

struct DecoderOutput {
  DecoderState state;
  nn::Var logits;
  nn::Var log_probs;
  nn::Var attention;
};

namespace detail {

inline nn::Var gru_cell(nn::Graph& g, const ModelParams& p, const GruSlots& s, const nn::Var& x,
                        const nn::Var& h) {
  using namespace nn;
  auto P = [&](std::size_t slot) { return g.param(p[slot]); };
  Var update = sigmoid(add(matvec(P(s.w_update), x), matvec(P(s.u_update), h), P(s.b_update)));
  Var reset = sigmoid(add(matvec(P(s.w_reset), x), matvec(P(s.u_reset), h), P(s.b_reset)));
  Var candidate =
      tanh(add(matvec(P(s.w_candidate), x), matvec(P(s.u_candidate), mul(reset, h)), P(s.b_candidate)));
  return add(mul(one_minus(update), candidate), mul(update, h));
}

inline void check_ids(std::span<const TokenId> ids, std::size_t vocab_size, const char* what) {
  for (TokenId id : ids) {
    if (id >= vocab_size) {
      throw IndexError(std::string(what) + " id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(vocab_size));
    }
  }
}

}  // namespace detail

inline std::size_t hidden_dim(const ModelParams& p) { return p[p.init_b].value.size(); }
inline std::size_t target_vocab_size(const ModelParams& p) { return p[p.out_b].value.size(); }
inline std::size_t source_vocab_size(const ModelParams& p) { return p[p.src_embed].value.shape()[0]; }

inline Annotations encode(nn::Graph& g, const ModelParams& p, std::span<const TokenId> source_ids) {
  using namespace nn;
  if (source_ids.size() < 2) throw ContractError("source must contain at least BOS and EOS");
  if (source_ids.size() > ModelConfig::kMaxSourceTokens) {
    throw LengthError("source has " + std::to_string(source_ids.size()) + " tokens, limit is " +
                      std::to_string(ModelConfig::kMaxSourceTokens));
  }
  detail::check_ids(source_ids, source_vocab_size(p), "source");
  const std::size_t n = source_ids.size();
  const std::size_t h = hidden_dim(p);
  Var embed = g.param(p[p.src_embed]);
  std::vector<Var> inputs;
  inputs.reserve(n);
  for (TokenId id : source_ids) inputs.push_back(lookup(embed, id));

  std::vector<Var> forward(n), backward(n);
  Var state = g.constant(Tensor({h}));
  for (std::size_t t = 0; t < n; ++t) forward[t] = state = detail::gru_cell(g, p, p.enc_fwd, inputs[t], state);
  state = g.constant(Tensor({h}));
  for (std::size_t t = n; t-- > 0;) backward[t] = state = detail::gru_cell(g, p, p.enc_bwd, inputs[t], state);

  std::vector<Var> rows;
  rows.reserve(n);
  for (std::size_t t = 0; t < n; ++t) rows.push_back(concat({forward[t], backward[t]}));
  Annotations ann;
  ann.states = stack_rows(rows);
  ann.keys = matmul_bt(ann.states, g.param(p[p.att_key]));
  return ann;
}

/// tanh(W · mean(annotations) + b)
inline DecoderState decoder_start(nn::Graph& g, const ModelParams& p, const Annotations& ann) {
  using namespace nn;
  return {tanh(add(matvec(g.param(p[p.init_w]), mean_rows(ann.states)), g.param(p[p.init_b])))};
}

/// Additive attention over the annotations using the previous state, then one
/// recurrent step on [embedding(prev); context] and the output projection.
inline DecoderOutput decoder_step(nn::Graph& g, const ModelParams& p, const DecoderState& state,
                                  TokenId prev_id, const Annotations& ann) {
  using namespace nn;
  if (prev_id >= target_vocab_size(p)) {
    throw IndexError("target id " + std::to_string(prev_id) + " out of range for vocabulary of " +
                     std::to_string(target_vocab_size(p)));
  }
  Var query = matvec(g.param(p[p.att_query]), state.hidden);
  Var energies = matvec(tanh(add_to_rows(ann.keys, query)), g.param(p[p.att_score]));
  Var weights = softmax(energies);
  Var context = vecmat(weights, ann.states);
  Var input = concat({lookup(g.param(p[p.tgt_embed]), prev_id), context});
  Var hidden = detail::gru_cell(g, p, p.dec, input, state.hidden);
  Var logits = add(vecmat(hidden, g.param(p[p.out_w])), g.param(p[p.out_b]));
  return {DecoderState{hidden}, logits, log_softmax(logits), weights};
}

/// Teacher-forced negative log-likelihood of `target_ids` (BOS … EOS), summed
/// over every predicted position.
inline nn::Var sequence_nll(nn::Graph& g, const ModelParams& p, std::span<const TokenId> source_ids,
                            std::span<const TokenId> target_ids) {
  if (target_ids.size() < 2) throw ContractError("target must contain at least BOS and EOS");
  detail::check_ids(target_ids, target_vocab_size(p), "target");
  Annotations ann = encode(g, p, source_ids);
  DecoderState state = decoder_start(g, p, ann);
  std::vector<nn::Var> terms;
  terms.reserve(target_ids.size() - 1);
  for (std::size_t t = 1; t < target_ids.size(); ++t) {
    DecoderOutput out = decoder_step(g, p, state, target_ids[t - 1], ann);
    terms.push_back(nn::cross_entropy(out.logits, target_ids[t]));
    state = out.state;
  }
  return nn::sum(terms);
}

/// Loss value only, without recording gradients.
inline double sequence_nll_value(const ModelParams& p, std::span<const TokenId> source_ids,
                                 std::span<const TokenId> target_ids) {
  nn::Graph g(false);
  return sequence_nll(g, p, source_ids, target_ids).value().item();
}

/// One forward/backward pass; gradients are added to the parameters.
inline double accumulate_gradients(ModelParams& p, std::span<const TokenId> source_ids,
                                   std::span<const TokenId> target_ids) {
  nn::Graph g;
  nn::Var loss = sequence_nll(g, p, source_ids, target_ids);
  g.backward(loss, p.set);
  return loss.value().item();
}

// ---------------------------------------------------------------------------
// Training

struct EncodedPair {
  TokenIds source;
  TokenIds target;
};

inline std::vector<EncodedPair> encode_corpus(const ParallelCorpus& corpus, const Vocabulary& src_vocab,
                                              const Vocabulary& tgt_vocab) {
  std::vector<EncodedPair> pairs;
  pairs.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    pairs.push_back({tokenize(corpus.sources[i], src_vocab), tokenize(corpus.targets[i], tgt_vocab)});
  return pairs;
}

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0;       // per sentence
  double mean_token_loss = 0;
};

struct TrainOptions {
  std::size_t epochs = 10;
  double learning_rate = 0.1;
  std::size_t batch_size = 1;
  double clip_norm = 5.0;
  std::uint64_t shuffle_seed = 7;
  std::function<void(const EpochStats&)> on_epoch;
};

/// Mini-batch SGD on summed sentence losses with per-epoch shuffling.
inline std::vector<EpochStats> train(ModelParams& p, const std::vector<EncodedPair>& pairs,
                                     const TrainOptions& options) {
  if (options.batch_size == 0 || options.batch_size > 32) throw ConfigError("batch size must be in 1..32");
  if (pairs.empty()) throw ConfigError("training corpus is empty");
  nn::Rng rng(options.shuffle_seed);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<EpochStats> history;
  p.set.zero_gradients();
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t stop = std::min(order.size(), start + options.batch_size);
      for (std::size_t k = start; k < stop; ++k) {
        const auto& pair = pairs[order[k]];
        total += accumulate_gradients(p, pair.source, pair.target);
        tokens += pair.target.size() - 1;
      }
      nn::sgd_step(p.set, nn::SgdOptions{options.learning_rate, options.clip_norm});
    }
    EpochStats stats{epoch, total / static_cast<double>(pairs.size()),
                     total / static_cast<double>(std::max<std::size_t>(tokens, 1))};
    history.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);
  }
  return history;
}

}  // namespace mthd
