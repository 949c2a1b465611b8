// Command-line front end: generate | train | eval.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "par/clozegen.hpp"
#include "par/corpus.hpp"
#include "par/errors.hpp"
#include "par/eval.hpp"
#include "par/model.hpp"
#include "par/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

std::string iso8601_now() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string file_hash_hex(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw par::IoError("cannot open '" + path.string() + "' for hashing");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return par::corpus::to_hex16(par::corpus::fnv1a64(buffer.str()));
}

void write_text_file(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw par::IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw par::IoError("write failed for '" + path.string() + "'");
}

// Run manifests record everything needed to reproduce a command. They carry
// timestamps, so golden comparisons exclude them.
struct ManifestBuilder {
  ordered_json j;

  ManifestBuilder(const std::string& command, int argc, char** argv) {
    j["command"] = command;
    std::vector<std::string> args(argv, argv + argc);
    j["argv"] = args;
    j["started_at"] = iso8601_now();
    j["inputs"] = ordered_json::object();
    j["outputs"] = ordered_json::array();
  }
  void input(const std::string& name, const fs::path& path) {
    ordered_json entry;
    entry["path"] = path.string();
    entry["fnv64"] = file_hash_hex(path);
    j["inputs"][name] = std::move(entry);
  }
  void output(const fs::path& path) { j["outputs"].push_back(path.string()); }
  void write(const fs::path& path) {
    j["finished_at"] = iso8601_now();
    write_text_file(path, j.dump(2) + "\n");
  }
};

fs::path sibling(const fs::path& path, const char* extension) {
  fs::path out = path;
  out.replace_extension(extension);
  return out;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string corpus_path;
  std::string out_path;
  bool multi_arg = false;
  std::size_t downsample_threshold = 0;  // 0 = off
  std::size_t min_count = 1;
  std::uint64_t seed = 42;
};

int cmd_generate(const GenerateArgs& args, int argc, char** argv) {
  ManifestBuilder manifest("generate", argc, argv);
  manifest.input("corpus", args.corpus_path);

  std::vector<par::corpus::DocumentRecord> docs =
      par::corpus::read_corpus(args.corpus_path);
  if (args.downsample_threshold > 0) {
    docs = par::cloze::downsample_verbs(docs, args.downsample_threshold, args.seed);
  }

  std::vector<par::cloze::ClozeInstance> instances;
  for (const auto& doc : docs) {
    auto generated = args.multi_arg ? par::cloze::generate_multi_arg_instances(doc)
                                    : par::cloze::generate_instances(doc);
    for (auto& inst : generated) instances.push_back(std::move(inst));
  }
  if (instances.empty()) {
    std::cerr << "warning: no instances generated from '" << args.corpus_path
              << "'" << (args.multi_arg ? " (multi-arg filter)" : "") << "\n";
  }

  const fs::path out_path(args.out_path);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  par::cloze::write_instances(out_path, instances);
  manifest.output(out_path);

  const par::corpus::Vocabulary vocab =
      par::corpus::Vocabulary::build(docs, args.min_count);
  const fs::path vocab_path = sibling(out_path, ".vocab.json");
  par::corpus::save_vocabulary(vocab_path, vocab);
  manifest.output(vocab_path);

  const par::cloze::DatasetStats stats = par::cloze::dataset_stats(instances);
  const fs::path stats_path = sibling(out_path, ".stats.json");
  write_text_file(stats_path, par::cloze::stats_json(stats) + "\n");
  manifest.output(stats_path);

  std::printf("instances       %zu\n", stats.count);
  if (stats.avg_candidates) {
    std::printf("avg candidates  %.2f\n", *stats.avg_candidates);
    std::printf("avg correct     %.2f\n", *stats.avg_answers);
  }
  std::printf("vocabulary      %zu surfaces (hash %s)\n", vocab.size(),
              vocab.hash_hex().c_str());

  manifest.j["seed"] = args.seed;
  manifest.j["multi_arg"] = args.multi_arg;
  manifest.j["downsample_threshold"] = args.downsample_threshold;
  manifest.j["min_count"] = args.min_count;
  manifest.j["vocab_hash"] = vocab.hash_hex();
  manifest.write(sibling(out_path, ".manifest.json"));
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string instances_path;
  std::string config_path;
  std::string out_dir;
  std::string vocab_path;  // default: instance-file sibling
  std::string dev_path;
  std::string resume_path;
  std::size_t workers = 0;  // 0 = take from config
};

std::string checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%04zu.ckpt", epoch);
  return buf;
}

int cmd_train(const TrainArgs& args, int argc, char** argv) {
  par::trainer::RunConfig run_config =
      par::trainer::load_run_config(args.config_path);
  if (args.workers > 0) run_config.train.workers = args.workers;

  ManifestBuilder manifest("train", argc, argv);
  manifest.input("instances", args.instances_path);
  manifest.input("config", args.config_path);

  const fs::path vocab_path = args.vocab_path.empty()
                                  ? sibling(args.instances_path, ".vocab.json")
                                  : fs::path(args.vocab_path);
  manifest.input("vocab", vocab_path);
  const par::corpus::Vocabulary vocab = par::corpus::load_vocabulary(vocab_path);
  const std::string vocab_hash = vocab.hash_hex();

  const std::vector<par::cloze::ClozeInstance> train_set =
      par::cloze::read_instances(args.instances_path);
  std::vector<par::cloze::ClozeInstance> dev_set;
  if (!args.dev_path.empty()) {
    dev_set = par::cloze::read_instances(args.dev_path);
    manifest.input("dev", args.dev_path);
  }

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);

  par::model::ParParams params;
  par::trainer::AdagradState state;
  std::size_t start_epoch = 0;
  if (!args.resume_path.empty()) {
    par::model::Checkpoint ckpt = par::model::load_checkpoint(args.resume_path);
    if (ckpt.vocab_hash != vocab_hash) {
      throw par::ValidationError("resume checkpoint was trained with a different "
                                 "vocabulary (hash " + ckpt.vocab_hash +
                                 " vs " + vocab_hash + ")");
    }
    params = std::move(ckpt.params);
    start_epoch = ckpt.epoch;
    state = par::trainer::AdagradState::zeros_like(params);
    const auto named = params.named();
    for (std::size_t k = 0; k < named.size(); ++k) {
      bool found = false;
      for (auto& [name, tensor] : ckpt.extra_arrays) {
        if (name == "adagrad." + named[k].name) {
          state.accum[k] = std::move(tensor);
          found = true;
          break;
        }
      }
      if (!found) {
        throw par::ValidationError(
            "resume checkpoint has no optimizer state for '" + named[k].name + "'");
      }
    }
    run_config.model = ckpt.config;
    manifest.input("resume", args.resume_path);
  } else {
    params = par::model::ParParams::init(run_config.model, vocab,
                                         run_config.train.seed);
    state = par::trainer::AdagradState::zeros_like(params);
  }

  // The config snapshot sits next to the checkpoints for later inspection.
  write_text_file(out_dir / "config.json",
                  par::trainer::run_config_json(run_config) + "\n");
  par::corpus::save_vocabulary(out_dir / "vocab.json", vocab);

  const std::ios_base::openmode log_mode =
      args.resume_path.empty() ? std::ios::trunc : std::ios::app;
  std::ofstream log_out(out_dir / "train_log.jsonl", std::ios::binary | log_mode);
  if (!log_out) {
    throw par::IoError("cannot write '" + (out_dir / "train_log.jsonl").string() + "'");
  }

  const fs::path initial_path = out_dir / checkpoint_name(start_epoch);
  par::model::save_checkpoint(initial_path, params, run_config.model, vocab_hash,
                              start_epoch, state.named(params));
  manifest.output(initial_path);

  auto on_epoch = [&](const par::trainer::EpochLog& log,
                      const par::model::ParParams& p,
                      const par::trainer::AdagradState& s) {
    const fs::path path = out_dir / checkpoint_name(log.epoch);
    par::model::save_checkpoint(path, p, run_config.model, vocab_hash, log.epoch,
                                s.named(p));
    log_out << par::trainer::epoch_log_json(log) << "\n";
    log_out.flush();
    std::printf("epoch %zu  loss %.6f", log.epoch, log.loss);
    if (log.dev_accuracy) std::printf("  dev_acc %.4f", *log.dev_accuracy);
    if (log.skipped) std::printf("  skipped %zu", log.skipped);
    std::printf("\n");
  };

  const par::trainer::TrainResult result =
      par::trainer::train(params, run_config.model, vocab, train_set, dev_set,
                          run_config.train, start_epoch, &state, on_epoch);

  const std::size_t best_epoch =
      result.log.empty() ? start_epoch : result.best_epoch;
  const fs::path best_src = out_dir / checkpoint_name(best_epoch);
  fs::copy_file(best_src, out_dir / "best.ckpt", fs::copy_options::overwrite_existing);
  fs::copy_file(fs::path(best_src.string() + ".json"), out_dir / "best.ckpt.json",
                fs::copy_options::overwrite_existing);

  manifest.output(out_dir / "best.ckpt");
  manifest.output(out_dir / "train_log.jsonl");
  manifest.j["seed"] = run_config.train.seed;
  manifest.j["config"] = ordered_json::parse(par::trainer::run_config_json(run_config));
  manifest.j["vocab_hash"] = vocab_hash;
  manifest.j["best_epoch"] = best_epoch;
  manifest.write(out_dir / "run_manifest.json");
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string instances_path;
  std::string checkpoint_path;
  std::string vocab_path;
  std::string baseline;  // "", "random", "mostfreq"
  std::string breakdown_path;
  std::string traces_path;
  std::string report_path;
  std::uint64_t seed = 42;
  std::size_t workers = 1;
  std::size_t bucket_cap = 10;
};

int cmd_eval(const EvalArgs& args, int argc, char** argv) {
  ManifestBuilder manifest("eval", argc, argv);
  manifest.input("instances", args.instances_path);

  const std::vector<par::cloze::ClozeInstance> instances =
      par::cloze::read_instances(args.instances_path);

  par::eval::EvalOptions options;
  options.workers = args.workers;
  options.bucket_cap = args.bucket_cap;

  par::eval::EvalReport report;
  if (args.baseline == "random") {
    report = par::eval::baseline_random(instances, args.seed, options);
  } else if (args.baseline == "mostfreq") {
    report = par::eval::baseline_most_freq(instances, options);
  } else if (!args.baseline.empty()) {
    throw par::ValidationError("unknown baseline '" + args.baseline +
                               "' (expected random or mostfreq)");
  } else {
    if (args.checkpoint_path.empty()) {
      throw par::ValidationError("model evaluation needs --checkpoint "
                                 "(or pass --baseline)");
    }
    const fs::path vocab_path =
        args.vocab_path.empty() ? sibling(args.instances_path, ".vocab.json")
                                : fs::path(args.vocab_path);
    manifest.input("vocab", vocab_path);
    manifest.input("checkpoint", args.checkpoint_path);
    const par::corpus::Vocabulary vocab = par::corpus::load_vocabulary(vocab_path);
    const par::model::Checkpoint ckpt =
        par::model::load_checkpoint(args.checkpoint_path);
    if (ckpt.vocab_hash != vocab.hash_hex()) {
      throw par::ValidationError(
          "vocabulary hash mismatch: checkpoint was trained with " +
          ckpt.vocab_hash + " but '" + vocab_path.string() + "' hashes to " +
          vocab.hash_hex() + "; evaluate with the vocabulary the model was "
          "trained on");
    }
    report = par::eval::evaluate(ckpt.params, ckpt.config, vocab, instances, options);
    if (!args.traces_path.empty()) {
      par::eval::export_traces(ckpt.params, ckpt.config, vocab, instances,
                               args.traces_path);
      manifest.output(args.traces_path);
    }
  }

  const std::string report_text = par::eval::report_json(report) + "\n";
  std::fputs(report_text.c_str(), stdout);
  if (!args.report_path.empty()) {
    write_text_file(args.report_path, report_text);
    manifest.output(args.report_path);
    manifest.write(fs::path(args.report_path + ".manifest.json"));
  }
  if (!args.breakdown_path.empty()) {
    write_text_file(args.breakdown_path, par::eval::breakdown_csv(report));
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pointer-attention reader for implicit argument prediction"};
  app.require_subcommand(1);

  GenerateArgs gen;
  CLI::App* generate = app.add_subcommand(
      "generate", "Generate cloze instances from a corpus file");
  generate->add_option("--corpus", gen.corpus_path, "Corpus JSON-lines file")
      ->required();
  generate->add_option("--out", gen.out_path, "Output instance file")->required();
  generate->add_flag("--multi-arg", gen.multi_arg,
                     "Only events with >= 2 removable arguments; co-missing "
                     "arguments become MISSING placeholders");
  generate->add_option("--downsample-threshold", gen.downsample_threshold,
                       "Downsample predicates with counts above this (0 = off)");
  generate->add_option("--min-count", gen.min_count,
                       "Vocabulary frequency threshold");
  generate->add_option("--seed", gen.seed, "Seed for downsampling");

  TrainArgs tr;
  CLI::App* train = app.add_subcommand("train", "Train a model on an instance file");
  train->add_option("--instances", tr.instances_path, "Training instance file")
      ->required();
  train->add_option("--config", tr.config_path, "Run config JSON")->required();
  train->add_option("--out-dir", tr.out_dir, "Output directory")->required();
  train->add_option("--vocab", tr.vocab_path,
                    "Vocabulary file (default: <instances>.vocab.json)");
  train->add_option("--dev", tr.dev_path, "Held-out instance file");
  train->add_option("--resume", tr.resume_path, "Checkpoint to resume from");
  train->add_option("--workers", tr.workers, "Override config worker count");

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint or baseline");
  eval_cmd->add_option("--instances", ev.instances_path, "Instance file")->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint_path, "Model checkpoint");
  eval_cmd->add_option("--vocab", ev.vocab_path,
                       "Vocabulary file (default: <instances>.vocab.json)");
  eval_cmd->add_option("--baseline", ev.baseline, "random | mostfreq");
  eval_cmd->add_option("--seed", ev.seed, "Seed for the random baseline");
  eval_cmd->add_option("--breakdown", ev.breakdown_path,
                       "Write per-frequency-bucket accuracy CSV here");
  eval_cmd->add_option("--traces", ev.traces_path,
                       "Write attention traces (JSON lines) here");
  eval_cmd->add_option("--report", ev.report_path, "Also write the report here");
  eval_cmd->add_option("--workers", ev.workers, "Evaluation parallelism");
  eval_cmd->add_option("--bucket-cap", ev.bucket_cap,
                       "Tail bucket for the frequency breakdown");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (generate->parsed()) return cmd_generate(gen, argc, argv);
    if (train->parsed()) return cmd_train(tr, argc, argv);
    if (eval_cmd->parsed()) return cmd_eval(ev, argc, argv);
  } catch (const par::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const par::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const par::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
