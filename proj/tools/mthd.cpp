#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include "CLI11.hpp"

#include "mthd/http.hpp"
#include "mthd/mthd.hpp"

namespace {

using namespace mthd;

struct TrainArgs {
  std::string task = "normalize";
  std::string src, tgt, out;
  std::size_t epochs = 10;
  double lr = 0.1;
  std::size_t embed = 64;
  std::size_t hidden = 128;
  std::size_t batch = 1;
  std::uint64_t seed = 1;
  bool quiet = false;
};

TaskKind task_or_throw(const std::string& name) {
  auto t = parse_task(name);
  if (!t) throw ConfigError("unknown task '" + name + "' (expected modernize or normalize)");
  return *t;
}

int run_train(const TrainArgs& a) {
  const TaskKind task = task_or_throw(a.task);
  const TokenMode mode = task_mode(task);
  ParallelCorpus corpus = load_corpus(a.src, a.tgt);
  Model model;
  model.source_vocab = build_vocab(corpus.sources, mode, default_min_freq(mode));
  model.target_vocab = build_vocab(corpus.targets, mode, default_min_freq(mode));
  model.config.vocab_size_src = model.source_vocab.size();
  model.config.vocab_size_tgt = model.target_vocab.size();
  model.config.embed_dim = a.embed;
  model.config.hidden_dim = a.hidden;
  model.config.mode = mode;
  model.config.seed = a.seed;
  model.params = init_model(model.config);

  TrainOptions opts;
  opts.epochs = a.epochs;
  opts.learning_rate = a.lr;
  opts.batch_size = a.batch;
  opts.shuffle_seed = a.seed + 6;
  if (!a.quiet) {
    opts.on_epoch = [](const EpochStats& s) {
      std::fprintf(stderr, "epoch %zu  loss/sentence %.4f  loss/token %.4f\n", s.epoch, s.mean_loss,
                   s.mean_token_loss);
    };
  }
  train(model.params, encode_corpus(corpus, model.source_vocab, model.target_vocab), opts);
  save_checkpoint(model, a.out);
  std::fprintf(stderr, "wrote %s (checksum %s)\n", a.out.c_str(), hex64(model_checksum(model)).c_str());
  return 0;
}

int run_translate(const std::string& model_path, const std::string& input, std::size_t beam) {
  Model model = load_checkpoint(model_path);
  for (const auto& line : read_lines(input)) {
    if (line.empty()) {
      std::cout << '\n';
      continue;
    }
    std::cout << translate(model, line, beam).text << '\n';
  }
  return 0;
}

struct SimulateArgs {
  std::string model, src, ref, mode = "both", via_server, report;
  std::size_t beam = 6;
  bool adapt = false;
  std::size_t adapt_steps = AdaptationConfig{}.steps;
  double adapt_lr = AdaptationConfig{}.learning_rate;
};

int run_simulate(const SimulateArgs& a) {
  sim::BenchmarkModes modes;
  modes.static_post_edit = a.mode == "static" || a.mode == "both";
  modes.interactive = a.mode == "interactive" || a.mode == "both";
  ParallelCorpus corpus = load_corpus(a.src, a.ref);

  std::unique_ptr<sim::Engine> engine;
  std::optional<Model> model;
  if (a.via_server.empty()) {
    model = load_checkpoint(a.model);
    AdaptationConfig cfg;
    cfg.steps = a.adapt_steps;
    cfg.learning_rate = a.adapt_lr;
    engine = std::make_unique<sim::LocalEngine>(*model, a.beam, cfg);
  } else {
    // the server decides beam width and adaptation settings; the model file
    // only tells which task to address
    TaskKind task = TaskKind::kNormalize;
    if (!a.model.empty()) task = sim::LocalEngine::task_of(load_checkpoint(a.model));
    engine = std::make_unique<server::RemoteEngine>(a.via_server, task);
  }

  sim::EffortReport report = sim::run_benchmark(*engine, corpus, modes, a.adapt);
  for (const auto& m : report.modes) {
    std::printf("%-22s ksmr %.4f  keystrokes %zu  mouse %zu  chars %zu  failures %zu\n", m.name.c_str(), m.ksmr(),
                m.keystrokes, m.mouse_actions, m.reference_chars, m.failures);
  }
  if (!a.report.empty()) {
    std::ofstream out(a.report);
    if (!out) throw IoError("cannot write report '" + a.report + "'");
    out << sim::to_json(report).dump(2) << '\n';
  }
  return 0;
}

int run_gen_corpus(const std::string& rules_path, const std::string& input, std::uint64_t seed,
                   const std::string& out_src, const std::string& out_tgt) {
  auto rules = load_rules(rules_path);
  ParallelCorpus corpus = gen_synthetic_corpus(read_lines(input), rules, seed);
  save_corpus(corpus, out_src, out_tgt);
  std::fprintf(stderr, "wrote %zu pairs\n", corpus.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive-predictive modernization and normalization of historical text"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a parallel corpus");
  train_cmd->add_option("--task", train_args.task, "modernize (word mode) or normalize (char mode)")
      ->check(CLI::IsMember({"modernize", "normalize"}));
  train_cmd->add_option("--src", train_args.src, "Source side, one sentence per line")->required();
  train_cmd->add_option("--tgt", train_args.tgt, "Target side, one sentence per line")->required();
  train_cmd->add_option("--out", train_args.out, "Checkpoint to write")->required();
  train_cmd->add_option("--epochs", train_args.epochs);
  train_cmd->add_option("--lr", train_args.lr);
  train_cmd->add_option("--embed", train_args.embed);
  train_cmd->add_option("--hidden", train_args.hidden);
  train_cmd->add_option("--batch", train_args.batch);
  train_cmd->add_option("--seed", train_args.seed);
  train_cmd->add_flag("--quiet", train_args.quiet);

  std::string model_path, input;
  std::size_t beam = 6;
  auto* translate_cmd = app.add_subcommand("translate", "Decode every line of a file");
  translate_cmd->add_option("--model", model_path)->required();
  translate_cmd->add_option("--input", input)->required();
  translate_cmd->add_option("--beam", beam)->check(CLI::PositiveNumber);

  SimulateArgs sim_args;
  auto* simulate_cmd = app.add_subcommand("simulate", "Measure user effort with a simulated user");
  simulate_cmd->add_option("--model", sim_args.model);
  simulate_cmd->add_option("--src", sim_args.src)->required();
  simulate_cmd->add_option("--ref", sim_args.ref)->required();
  simulate_cmd->add_option("--mode", sim_args.mode)->check(CLI::IsMember({"interactive", "static", "both"}));
  simulate_cmd->add_flag("--adapt", sim_args.adapt, "Learn from every validated sentence");
  simulate_cmd->add_option("--adapt-steps", sim_args.adapt_steps);
  simulate_cmd->add_option("--adapt-lr", sim_args.adapt_lr);
  simulate_cmd->add_option("--via-server", sim_args.via_server, "Base URL of a running server");
  simulate_cmd->add_option("--report", sim_args.report, "JSON report path");
  simulate_cmd->add_option("--beam", sim_args.beam)->check(CLI::PositiveNumber);

  std::string rules_path, gen_input, out_src, out_tgt;
  std::uint64_t gen_seed = 1;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Antiquate modern text into a synthetic parallel corpus");
  gen_cmd->add_option("--rules", rules_path)->required();
  gen_cmd->add_option("--input", gen_input)->required();
  gen_cmd->add_option("--seed", gen_seed);
  gen_cmd->add_option("--out-src", out_src)->required();
  gen_cmd->add_option("--out-tgt", out_tgt)->required();

  std::string config_path = "mthd.json";
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP server");
  serve_cmd->add_option("--config", config_path, "Server config (MTHD_CONFIG overrides)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(train_args);
    if (*translate_cmd) return run_translate(model_path, input, beam);
    if (*simulate_cmd) {
      if (sim_args.model.empty() && sim_args.via_server.empty())
        throw ConfigError("--model is required unless --via-server is given");
      return run_simulate(sim_args);
    }
    if (*gen_cmd) return run_gen_corpus(rules_path, gen_input, gen_seed, out_src, out_tgt);
    if (*serve_cmd) {
      const std::string path = server::resolve_config_path(config_path);
      auto cfg = server::load_server_config(path);
      std::fprintf(stderr, "listening on %s:%d\n", cfg.host.c_str(), cfg.port);
      return server::run(cfg);
    }
  } catch (const mthd::Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", e.code().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
