// dmha: synthetic corpus generation, training, embedding extraction, scoring
// and evaluation for attention-pooled speaker embeddings.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dmha/checkpoint.hpp"
#include "dmha/config.hpp"
#include "dmha/eval.hpp"
#include "dmha/gradcheck.hpp"
#include "dmha/pipeline.hpp"
#include "dmha/synthdata.hpp"
#include "dmha/trainer.hpp"

namespace fs = std::filesystem;
using namespace dmha;

namespace {

constexpr std::string_view kSynthPrefix = "synth.";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

// Config file assignments split into run keys and "synth." keys; the seed
// flag overrides both.
struct LoadedConfig {
  KeyValues run;
  KeyValues synth;
};

LoadedConfig load_config(const Common& c) {
  LoadedConfig out;
  if (!c.config.empty()) {
    for (auto& [k, v] : read_key_values(c.config)) {
      if (k.rfind(kSynthPrefix, 0) == 0) out.synth.emplace_back(k.substr(kSynthPrefix.size()), v);
      else out.run.emplace_back(k, v);
    }
  }
  if (c.seed) {
    out.run.emplace_back("seed", std::to_string(*c.seed));
    out.synth.emplace_back("seed", std::to_string(*c.seed));
  } else {
    // The run seed also drives the corpus unless the file sets one for it.
    for (const auto& [k, v] : out.run)
      if (k == "seed") out.synth.emplace_back("seed", v);
  }
  return out;
}

RunConfig run_config(const LoadedConfig& lc, const KeyValues& overrides = {}) {
  RunConfig rc;
  dmha::apply(rc, lc.run);
  dmha::apply(rc, overrides);
  return rc;
}

fs::path require_out_dir(const Common& c) {
  if (c.out_dir.empty()) throw std::invalid_argument("--out-dir is required");
  fs::create_directories(c.out_dir);
  return c.out_dir;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value configuration file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "root seed for every random stream");
  app->add_option("--out-dir", c.out_dir, "output directory");
}

int cmd_synth(const Common& c) {
  const auto lc = load_config(c);
  SynthConfig sc;
  dmha::apply(sc, lc.synth);
  const fs::path out = require_out_dir(c);
  const Corpus corpus = generate_corpus(sc, out);
  const auto trials = make_trials(corpus.test, sc.trials_target, sc.trials_nontarget, sc.seed);
  write_trials(out / "trials.txt", trials);
  std::printf("wrote %zu utterances of %zu speakers (%zu train, %zu test) and %zu trials to %s\n",
              corpus.manifest.size(), corpus.speakers.size(), corpus.train.size(),
              corpus.test.size(), trials.size(), out.c_str());
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::string resume;
  std::optional<std::string> pooling;
  std::optional<std::size_t> heads, epochs, batch_size;
  std::optional<double> lr;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  const auto lc = load_config(c);
  KeyValues overrides;
  if (a.pooling) overrides.emplace_back("pooling", *a.pooling);
  if (a.heads) overrides.emplace_back("heads", std::to_string(*a.heads));
  if (a.epochs) overrides.emplace_back("epochs", std::to_string(*a.epochs));
  if (a.batch_size) overrides.emplace_back("batch_size", std::to_string(*a.batch_size));
  if (a.lr) overrides.emplace_back("lr", format_double(*a.lr));
  const RunConfig rc = run_config(lc, overrides);
  const fs::path out = require_out_dir(c);

  const Dataset data = load_dataset(read_manifest(a.manifest), rc.features);
  std::optional<Trainer> trainer;
  if (a.resume.empty()) {
    trainer.emplace(rc, data);
  } else {
    trainer.emplace(Checkpoint::load(a.resume), data);
  }

  const fs::path log_path = out / "train_log.csv";
  const bool fresh = a.resume.empty() || !fs::exists(log_path);
  std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  if (fresh) log << "epoch,train_loss,val_loss,lr\n";

  std::printf("training on %zu speakers: %zu train / %zu validation utterances, %zu steps per epoch\n",
              data.speakers.size(), trainer->train_indices().size(),
              trainer->validation_indices().size(), trainer->steps_per_epoch());
  while (!trainer->finished()) {
    const EpochRecord r = trainer->run_epoch();
    log << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_loss) << ','
        << format_double(r.lr) << '\n';
    log.flush();
    std::printf("epoch %3zu  train %.5f  val %.5f  lr %.3g%s%s\n", r.epoch, r.train_loss, r.val_loss,
                r.lr, r.improved ? "  *" : "", r.annealed ? "  (lr annealed)" : "");
    std::fflush(stdout);
    const Checkpoint ck = trainer->checkpoint();
    if (r.improved) ck.save(out / "best.ckpt");
    ck.save(out / "last.ckpt");
  }
  if (!fs::exists(out / "best.ckpt")) trainer->checkpoint().save(out / "best.ckpt");
  return 0;
}

struct EmbedArgs {
  std::string checkpoint;
  std::string manifest;
  std::string dump_attention;
  bool baseline = false;
};

// Builds the embedder described by the flags. The model (when any) is kept
// alive in `model`.
Embedder make_embedder(const Common& c, const EmbedArgs& a, std::optional<SpeakerModel>& model) {
  if (a.baseline) {
    if (!a.checkpoint.empty()) throw std::invalid_argument("--baseline and --checkpoint exclude each other");
    return baseline_embedder(run_config(load_config(c)).features);
  }
  if (a.checkpoint.empty()) throw std::invalid_argument("--checkpoint or --baseline is required");
  const Checkpoint ck = Checkpoint::load(a.checkpoint);
  const RunConfig rc = run_config_from(ck);
  model.emplace(load_model(ck));
  return model_embedder(*model, rc.features, a.dump_attention);
}

int cmd_extract(const Common& c, const EmbedArgs& a, const std::string& out_file) {
  if (a.manifest.empty()) throw std::invalid_argument("--manifest is required");
  std::optional<SpeakerModel> model;
  const Embedder embed = make_embedder(c, a, model);
  const EmbeddingTable table = embed_manifest(read_manifest(a.manifest), embed);
  fs::path path = out_file;
  if (path.empty()) path = require_out_dir(c) / "embeddings.txt";
  write_embeddings(path, table);
  std::printf("wrote %zu embeddings of dimension %zu to %s\n", table.ids.size(), table.dim,
              path.c_str());
  return 0;
}

int cmd_score(const Common& c, const std::string& trials_path, const std::string& embeddings,
              const std::string& out_file) {
  const auto trials = read_trials(trials_path);
  const auto scores = score_trials(trials, read_embeddings(embeddings));
  fs::path path = out_file;
  if (path.empty()) path = require_out_dir(c) / "scores.txt";
  write_scores(path, trials, scores);
  std::printf("wrote %zu scores to %s\n", scores.size(), path.c_str());
  return 0;
}

struct EvalArgs {
  std::string trials;
  std::string embeddings;
  std::string scores;
  EmbedArgs embed;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  const auto trials = read_trials(a.trials);
  if (trials.empty()) throw std::invalid_argument("empty trial list " + a.trials);
  const int sources = !a.embeddings.empty() + !a.scores.empty() +
                      (!a.embed.checkpoint.empty() || a.embed.baseline);
  if (sources != 1) {
    throw std::invalid_argument("give exactly one of --embeddings, --scores, --checkpoint, --baseline");
  }
  std::vector<double> scores;
  EvalReport report;
  if (!a.scores.empty()) {
    scores = read_scores(a.scores, trials);
    report = evaluate_scores(trials, scores);
  } else if (!a.embeddings.empty()) {
    scores = score_trials(trials, read_embeddings(a.embeddings));
    report = evaluate_scores(trials, scores);
  } else {
    if (a.embed.manifest.empty()) throw std::invalid_argument("--manifest is required with a model");
    std::optional<SpeakerModel> model;
    const Embedder embed = make_embedder(c, a.embed, model);
    auto result = evaluate_with(trials, read_manifest(a.embed.manifest), embed);
    scores = std::move(result.scores);
    report = result.report;
    if (!c.out_dir.empty()) write_embeddings(require_out_dir(c) / "embeddings.txt", result.embeddings);
  }
  if (!c.out_dir.empty()) {
    const fs::path out = require_out_dir(c);
    if (a.scores.empty()) write_scores(out / "scores.txt", trials, scores);
    std::ofstream(out / "report.txt") << report.format();
  }
  std::fputs(report.format().c_str(), stdout);
  return 0;
}

int cmd_gradcheck(const Common& c, std::size_t seeds) {
  const std::uint64_t base = c.seed.value_or(0);
  bool ok = true;
  std::printf("%-16s %-6s %-14s %-8s %-8s %s\n", "layer", "seed", "max_rel_err", "checked",
              "kinks", "result");
  for (std::uint64_t s = base; s < base + seeds; ++s) {
    for (const auto& r : run_gradcheck_suite(s)) {
      std::printf("%-16s %-6llu %-14.3e %-8zu %-8zu %s\n", r.name.c_str(),
                  static_cast<unsigned long long>(s), r.max_rel_err, r.checked, r.skipped,
                  r.passed ? "pass" : "FAIL");
      ok = ok && r.passed;
    }
  }
  std::printf("%s (tolerance %.0e)\n", ok ? "all layers pass" : "gradient check failed",
              kGradCheckTolerance);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speaker embeddings with attention pooling"};
  app.require_subcommand(1);

  Common common;

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus, manifests and trials");
  add_common(synth, common);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a speaker classifier");
  add_common(train, common);
  train->add_option("--manifest", train_args.manifest, "training manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", train_args.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--pooling", train_args.pooling, "attention, mha or dmha")
      ->check(CLI::IsMember({"attention", "mha", "dmha"}));
  train->add_option("--heads", train_args.heads, "number of heads K");
  train->add_option("--epochs", train_args.epochs, "number of epochs");
  train->add_option("--batch-size", train_args.batch_size, "utterances per batch");
  train->add_option("--lr", train_args.lr, "initial learning rate");

  EmbedArgs extract_args;
  std::string extract_out;
  auto* extract = app.add_subcommand("extract", "write embeddings for every manifest entry");
  add_common(extract, common);
  extract->add_option("--checkpoint", extract_args.checkpoint)->check(CLI::ExistingFile);
  extract->add_option("--manifest", extract_args.manifest)->check(CLI::ExistingFile);
  extract->add_option("--dump-attention", extract_args.dump_attention,
                      "directory for per-utterance attention weights");
  extract->add_flag("--baseline", extract_args.baseline, "time-averaged log mel instead of a model");
  extract->add_option("--out", extract_out, "embedding file (default <out-dir>/embeddings.txt)");

  std::string score_trials_path, score_embeddings, score_out;
  auto* score = app.add_subcommand("score", "cosine-score a trial list");
  add_common(score, common);
  score->add_option("--trials", score_trials_path)->required()->check(CLI::ExistingFile);
  score->add_option("--embeddings", score_embeddings)->required()->check(CLI::ExistingFile);
  score->add_option("--out", score_out, "score file (default <out-dir>/scores.txt)");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "EER and minDCF of a trial list");
  add_common(eval, common);
  eval->add_option("--trials", eval_args.trials)->required()->check(CLI::ExistingFile);
  eval->add_option("--embeddings", eval_args.embeddings)->check(CLI::ExistingFile);
  eval->add_option("--scores", eval_args.scores)->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", eval_args.embed.checkpoint)->check(CLI::ExistingFile);
  eval->add_option("--manifest", eval_args.embed.manifest)->check(CLI::ExistingFile);
  eval->add_option("--dump-attention", eval_args.embed.dump_attention);
  eval->add_flag("--baseline", eval_args.embed.baseline, "time-averaged log mel instead of a model");

  std::size_t gradcheck_seeds = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every layer");
  add_common(gradcheck, common);
  gradcheck->add_option("--seeds", gradcheck_seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "dmha: error: %s\n", e.what());
    return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
  }

  try {
    if (*synth) return cmd_synth(common);
    if (*train) return cmd_train(common, train_args);
    if (*extract) return cmd_extract(common, extract_args, extract_out);
    if (*score) return cmd_score(common, score_trials_path, score_embeddings, score_out);
    if (*eval) return cmd_eval(common, eval_args);
    if (*gradcheck) return cmd_gradcheck(common, gradcheck_seeds);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dmha: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
