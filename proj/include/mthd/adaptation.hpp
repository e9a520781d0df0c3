#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mthd/error.hpp"
#include "mthd/seq2seq.hpp"
#include "mthd/textdata.hpp"

namespace mthd {

enum class TaskKind { kModernize, kNormalize };

inline std::string to_string(TaskKind task) { return task == TaskKind::kModernize ? "modernize" : "normalize"; }

inline std::optional<TaskKind> parse_task(std::string_view s) {
  if (s == "modernize") return TaskKind::kModernize;
  if (s == "normalize") return TaskKind::kNormalize;
  return std::nullopt;
}

/// Modernization works on words, normalization on characters.
inline TokenMode task_mode(TaskKind task) {
  return task == TaskKind::kModernize ? TokenMode::kWord : TokenMode::kChar;
}

struct AdaptationConfig {
  std::size_t steps = 3;
  double learning_rate = 0.01;
  double clip_norm = 5.0;
};

struct ValidatedSample {
  TaskKind task = TaskKind::kNormalize;
  std::string source;
  std::string target;
  std::string timestamp;  // ISO-8601 UTC
  bool learn = true;
};

struct AdaptationReport {
  std::vector<double> losses;  // loss before each step, then the final loss
  std::size_t steps() const { return losses.empty() ? 0 : losses.size() - 1; }
  double initial_loss() const { return losses.front(); }
  double final_loss() const { return losses.back(); }
};

inline std::string utc_timestamp(std::chrono::system_clock::time_point t = std::chrono::system_clock::now()) {
  const std::time_t secs = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Online update on one validated pair: `steps` iterations of
/// loss → backward → SGD. Vocabularies stay frozen. A non-finite loss
/// restores the parameters as they were on entry and throws.
inline AdaptationReport adapt(Model& model, const ValidatedSample& sample, const AdaptationConfig& config) {
  if (sample.source.empty() || sample.target.empty()) throw SampleError("validated sample has an empty side");
  if (!(config.learning_rate > 0)) throw ConfigError("adaptation learning rate must be positive");
  const TokenIds src = tokenize(sample.source, model.source_vocab);
  const TokenIds tgt = tokenize(sample.target, model.target_vocab);
  if (src.size() > ModelConfig::kMaxSourceTokens || tgt.size() > ModelConfig::kMaxSourceTokens)
    throw SampleError("validated sample exceeds the maximum length", "source_too_long");

  AdaptationReport report;
  if (config.steps == 0) {
    report.losses.push_back(sequence_nll_value(model.params, src, tgt));
    return report;
  }
  const nn::ParameterSet backup = model.params.set;
  auto diverged = [&](double loss) {
    model.params.set = backup;
    throw DivergenceError("adaptation produced a non-finite loss (" + std::to_string(loss) +
                          "); parameters restored");
  };
  model.params.set.zero_gradients();
  for (std::size_t step = 0; step < config.steps; ++step) {
    const double loss = accumulate_gradients(model.params, src, tgt);
    if (!std::isfinite(loss)) diverged(loss);
    report.losses.push_back(loss);
    nn::sgd_step(model.params.set, nn::SgdOptions{config.learning_rate, config.clip_norm});
  }
  const double final_loss = sequence_nll_value(model.params, src, tgt);
  if (!std::isfinite(final_loss)) diverged(final_loss);
  report.losses.push_back(final_loss);
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: "MTHD", version byte, u32 LE header length, JSON header,
// then every parameter as little-endian float64 in manifest order.

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'H', 'D'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline nlohmann::json vocab_json(const Vocabulary& v) {
  return {{"mode", to_string(v.mode())}, {"tokens", v.tokens()}};
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  return Vocabulary::from_tokens(parse_token_mode(j.at("mode").get<std::string>()),
                                 j.at("tokens").get<std::vector<std::string>>());
}

}  // namespace detail

inline std::string checkpoint_bytes(const Model& model) {
  nlohmann::json header;
  const ModelConfig& c = model.config;
  header["config"] = {{"vocab_size_src", c.vocab_size_src}, {"vocab_size_tgt", c.vocab_size_tgt},
                      {"embed_dim", c.embed_dim},           {"hidden_dim", c.hidden_dim},
                      {"mode", to_string(c.mode)},          {"seed", c.seed}};
  header["source_vocab"] = detail::vocab_json(model.source_vocab);
  header["target_vocab"] = detail::vocab_json(model.target_vocab);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : model.params.set) manifest.push_back({{"id", p.id}, {"shape", p.value.shape()}});
  header["parameters"] = std::move(manifest);
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  out.push_back(static_cast<char>(kCheckpointVersion));
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& p : model.params.set)
    for (double v : p.value.values()) detail::put_f64(out, v);
  return out;
}

inline Model parse_checkpoint(const std::string& bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& why) -> Model { throw FormatError(origin + ": " + why); };
  if (bytes.size() < 9 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) return fail("not a checkpoint (bad magic)");
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kCheckpointVersion) {
    throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      "unsupported_version");
  }
  const std::size_t header_len = detail::get_le(bytes, 5, 4);
  if (9 + header_len > bytes.size()) return fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(9, header_len));
  } catch (const nlohmann::json::exception& e) {
    return fail(std::string("malformed header: ") + e.what());
  }

  Model model;
  try {
    const auto& c = header.at("config");
    model.config.vocab_size_src = c.at("vocab_size_src").get<std::size_t>();
    model.config.vocab_size_tgt = c.at("vocab_size_tgt").get<std::size_t>();
    model.config.embed_dim = c.at("embed_dim").get<std::size_t>();
    model.config.hidden_dim = c.at("hidden_dim").get<std::size_t>();
    model.config.mode = parse_token_mode(c.at("mode").get<std::string>());
    model.config.seed = c.at("seed").get<std::uint64_t>();
    model.source_vocab = detail::vocab_from_json(header.at("source_vocab"));
    model.target_vocab = detail::vocab_from_json(header.at("target_vocab"));
  } catch (const nlohmann::json::exception& e) {
    return fail(std::string("malformed header: ") + e.what());
  }
  if (model.source_vocab.size() != model.config.vocab_size_src ||
      model.target_vocab.size() != model.config.vocab_size_tgt)
    return fail("vocabulary sizes disagree with the model config");

  std::size_t pos = 9 + header_len;
  try {
    model.params = ModelParams::layout(model.config);
    const auto& manifest = header.at("parameters");
    if (manifest.size() != model.params.set.size()) return fail("parameter manifest has the wrong length");
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      nn::Parameter& p = model.params.set[i];
      if (manifest[i].at("id").get<std::string>() != p.id ||
          manifest[i].at("shape").get<nn::Shape>() != p.value.shape())
        return fail("parameter manifest entry " + std::to_string(i) + " does not match the model layout");
      if (pos + 8 * p.value.size() > bytes.size()) return fail("truncated parameter data");
      for (auto& v : p.value.values()) {
        const std::uint64_t bits = detail::get_le(bytes, pos, 8);
        std::memcpy(&v, &bits, sizeof v);
        pos += 8;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    return fail(std::string("malformed parameter manifest: ") + e.what());
  } catch (const ConfigError& e) {
    return fail(e.what());
  }
  if (pos != bytes.size()) return fail("trailing bytes after parameter data");
  return model;
}

/// Writes to a sibling temp file and renames it into place.
inline void save_checkpoint(const Model& model, const std::string& path) {
  const std::string bytes = checkpoint_bytes(model);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::remove(tmp.c_str());
      throw IoError("write failed for checkpoint '" + path + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw IoError("cannot move checkpoint into place at '" + path + "': " + ec.message());
  }
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t model_checksum(const Model& model) { return fnv1a64(checkpoint_bytes(model)); }

// ---------------------------------------------------------------------------
// Validated-sample log: one JSON object per line.

inline nlohmann::json to_json(const ValidatedSample& s) {
  return {{"task", to_string(s.task)},
          {"source", s.source},
          {"target", s.target},
          {"timestamp", s.timestamp},
          {"learn", s.learn}};
}

inline ValidatedSample sample_from_json(const nlohmann::json& j) {
  ValidatedSample s;
  auto task = parse_task(j.at("task").get<std::string>());
  if (!task) throw FormatError("unknown task in validated log: " + j.at("task").dump());
  s.task = *task;
  s.source = j.at("source").get<std::string>();
  s.target = j.at("target").get<std::string>();
  s.timestamp = j.value("timestamp", "");
  s.learn = j.value("learn", true);
  return s;
}

inline void append_validated(const ValidatedSample& sample, const std::string& log_path) {
  std::ofstream out(log_path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open validated log '" + log_path + "'");
  out << to_json(sample).dump() << '\n';
  out.flush();
  if (!out) throw IoError("append failed for validated log '" + log_path + "'");
}

inline std::vector<ValidatedSample> read_validated(const std::string& log_path) {
  std::vector<ValidatedSample> samples;
  std::ifstream in(log_path, std::ios::binary);
  if (!in) return samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      samples.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(log_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

/// Re-applies every logged `learn` sample of `task`, in log order. Diverging
/// samples are skipped exactly as the live service skipped them.
inline std::size_t replay_validated(Model& model, TaskKind task, const std::vector<ValidatedSample>& samples,
                                    const AdaptationConfig& config) {
  std::size_t applied = 0;
  for (const auto& s : samples) {
    if (s.task != task || !s.learn) continue;
    try {
      adapt(model, s, config);
      ++applied;
    } catch (const DivergenceError&) {
    }
  }
  return applied;
}

}  // namespace mthd
