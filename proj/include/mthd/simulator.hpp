#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mthd/adaptation.hpp"
#include "mthd/decoding.hpp"
#include "mthd/error.hpp"
#include "mthd/textdata.hpp"

namespace mthd::sim {

/// What the simulated user talks to: one sentence at a time.
class Engine {
 public:
  virtual ~Engine() = default;
  /// Initial hypothesis for a new sentence.
  virtual std::string start(const std::string& source) = 0;
  /// Hypothesis compatible with the validated prefix.
  virtual std::string correct(const std::string& prefix) = 0;
  /// Accepts `target` for the current sentence, learning from it if asked.
  virtual void finish(const std::string& target, bool learn) = 0;
};

/// Drives an in-process model directly.
class LocalEngine : public Engine {
 public:
  LocalEngine(Model& model, std::size_t beam_width = 6, AdaptationConfig adaptation = {})
      : model_(model), beam_width_(beam_width), adaptation_(adaptation) {}

  std::string start(const std::string& source) override {
    source_ = source;
    return translate(model_, source, beam_width_).text;
  }

  std::string correct(const std::string& prefix) override {
    return mthd::correct(model_, source_, Feedback{prefix}, beam_width_).text;
  }

  void finish(const std::string& target, bool learn) override {
    if (!learn) return;
    ValidatedSample sample{task_of(model_), source_, target, utc_timestamp(), true};
    try {
      adapt(model_, sample, adaptation_);
    } catch (const DivergenceError&) {
      // the model is restored; the session still ends
    }
  }

  static TaskKind task_of(const Model& m) {
    return m.config.mode == TokenMode::kWord ? TaskKind::kModernize : TaskKind::kNormalize;
  }

 private:
  Model& model_;
  std::size_t beam_width_;
  AdaptationConfig adaptation_;
  std::string source_;
};

enum class Mode { kInteractive, kStatic };

struct InteractionTrace {
  std::size_t rounds = 0;
  std::size_t keystrokes = 0;
  std::size_t mouse_actions = 0;
  std::size_t reference_chars = 0;
  std::string initial_hypothesis;
  std::string final_hypothesis;
  bool failed = false;
  std::string error;
};

namespace detail {

inline std::size_t common_prefix(const std::u32string& a, const std::u32string& b) {
  std::size_t n = 0;
  while (n < a.size() && n < b.size() && a[n] == b[n]) ++n;
  return n;
}

}  // namespace detail

/// Replays one sentence as a deterministic user.
///
/// Interactive: find the first character mismatch, validate the prefix up to
/// it plus one corrected character (1 keystroke, 1 mouse action for the
/// placement) and ask for a new hypothesis; when the hypothesis matches the
/// reference, validate it (1 mouse action). A hypothesis that already holds
/// the whole reference but runs past it costs one deletion keystroke plus its
/// placement. Responses that do not keep the prefix are cut back to it.
///
/// Static: one decode, then the hypothesis is overwritten from the first
/// mismatch (one keystroke per remaining reference character, one more to
/// delete a leftover tail, one placement) and validated.
inline InteractionTrace simulate_sentence(Engine& engine, const std::string& source, const std::string& reference,
                                          Mode mode, bool learn = false) {
  if (reference.empty()) throw SampleError("reference must not be empty");
  const std::u32string ref = utf8::decode(reference);
  InteractionTrace trace;
  trace.reference_chars = ref.size();
  std::string hyp_text = engine.start(source);
  trace.initial_hypothesis = hyp_text;
  trace.rounds = 1;
  std::u32string hyp = utf8::decode(hyp_text);

  if (mode == Mode::kStatic) {
    if (hyp != ref) {
      const std::size_t p = detail::common_prefix(hyp, ref);
      trace.keystrokes = ref.size() - p + (hyp.size() > ref.size() ? 1 : 0);
      trace.mouse_actions += 1;
    }
    trace.mouse_actions += 1;
    trace.final_hypothesis = reference;
    engine.finish(reference, learn);
    return trace;
  }

  while (hyp != ref) {
    const std::size_t p = detail::common_prefix(hyp, ref);
    trace.keystrokes += 1;
    trace.mouse_actions += 1;
    if (p == ref.size()) {
      hyp = ref;  // tail deleted
      break;
    }
    const std::u32string prefix = ref.substr(0, p + 1);
    const std::string response = engine.correct(utf8::encode(prefix));
    ++trace.rounds;
    std::u32string next = utf8::decode(response);
    hyp = next.compare(0, prefix.size(), prefix) == 0 && next.size() >= prefix.size() ? std::move(next) : prefix;
  }
  trace.mouse_actions += 1;
  trace.final_hypothesis = utf8::encode(hyp);
  engine.finish(trace.final_hypothesis, learn);
  return trace;
}

struct ModeReport {
  std::string name;
  std::vector<InteractionTrace> traces;
  std::size_t keystrokes = 0;
  std::size_t mouse_actions = 0;
  std::size_t reference_chars = 0;
  std::size_t rounds = 0;
  std::size_t failures = 0;

  /// (keystrokes + mouse actions) / reference characters.
  double ksmr() const {
    return reference_chars ? static_cast<double>(keystrokes + mouse_actions) / static_cast<double>(reference_chars)
                           : 0.0;
  }
  double mean_keystrokes() const {
    return traces.empty() ? 0.0 : static_cast<double>(keystrokes) / static_cast<double>(traces.size());
  }
  double exact_initial_rate() const {
    if (traces.empty()) return 0.0;
    std::size_t n = 0;
    for (const auto& t : traces) n += !t.failed && t.initial_hypothesis == t.final_hypothesis;
    return static_cast<double>(n) / static_cast<double>(traces.size());
  }
};

struct EffortReport {
  std::vector<ModeReport> modes;

  const ModeReport* find(const std::string& name) const {
    for (const auto& m : modes)
      if (m.name == name) return &m;
    return nullptr;
  }
};

struct BenchmarkModes {
  bool static_post_edit = true;
  bool interactive = true;
};

namespace detail {

inline ModeReport run_mode(Engine& engine, const ParallelCorpus& corpus, Mode mode, bool learn, std::string name) {
  ModeReport report;
  report.name = std::move(name);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    InteractionTrace trace;
    try {
      trace = simulate_sentence(engine, corpus.sources[i], corpus.targets[i], mode, learn);
    } catch (const std::exception& e) {
      trace.failed = true;
      trace.error = "sentence " + std::to_string(i) + ": " + e.what();
      trace.reference_chars = utf8::length(corpus.targets[i]);
      ++report.failures;
    }
    report.keystrokes += trace.keystrokes;
    report.mouse_actions += trace.mouse_actions;
    report.reference_chars += trace.reference_chars;
    report.rounds += trace.rounds;
    report.traces.push_back(std::move(trace));
  }
  return report;
}

}  // namespace detail

/// Runs the requested modes in order: static post-editing, interactive, and,
/// when `adapt` is set, interactive with learning from every validated
/// sentence. Only the last one mutates the engine's model.
inline EffortReport run_benchmark(Engine& engine, const ParallelCorpus& corpus, BenchmarkModes modes, bool adapt) {
  if (corpus.empty()) throw Error("empty_corpus", "benchmark corpus is empty");
  EffortReport report;
  if (modes.static_post_edit)
    report.modes.push_back(detail::run_mode(engine, corpus, Mode::kStatic, false, "static_post_edit"));
  if (modes.interactive)
    report.modes.push_back(detail::run_mode(engine, corpus, Mode::kInteractive, false, "interactive"));
  if (adapt)
    report.modes.push_back(detail::run_mode(engine, corpus, Mode::kInteractive, true, "interactive_adaptive"));
  return report;
}

inline nlohmann::json to_json(const InteractionTrace& t) {
  nlohmann::json j{{"rounds", t.rounds},
                   {"keystrokes", t.keystrokes},
                   {"mouse_actions", t.mouse_actions},
                   {"reference_chars", t.reference_chars},
                   {"initial_hypothesis", t.initial_hypothesis},
                   {"final_hypothesis", t.final_hypothesis}};
  if (t.failed) j["error"] = t.error;
  return j;
}

inline nlohmann::json to_json(const EffortReport& report) {
  nlohmann::json modes = nlohmann::json::object();
  for (const auto& m : report.modes) {
    nlohmann::json traces = nlohmann::json::array();
    for (const auto& t : m.traces) traces.push_back(to_json(t));
    modes[m.name] = {{"ksmr", m.ksmr()},
                     {"keystrokes", m.keystrokes},
                     {"mouse_actions", m.mouse_actions},
                     {"reference_chars", m.reference_chars},
                     {"rounds", m.rounds},
                     {"sentences", m.traces.size()},
                     {"failures", m.failures},
                     {"mean_keystrokes", m.mean_keystrokes()},
                     {"traces", std::move(traces)}};
  }
  return {{"modes", std::move(modes)}};
}

}  // namespace mthd::sim
