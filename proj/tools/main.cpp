#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bachprop/checkpoint.hpp"
#include "bachprop/manifest.hpp"
#include "bachprop/metrics.hpp"
#include "bachprop/midi.hpp"
#include "bachprop/model.hpp"
#include "bachprop/sample.hpp"
#include "bachprop/score.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bachprop;

namespace {

// a config-file value fills in for a flag the user did not pass
template <class T>
void cfg_fill(const json& section, CLI::App* cmd, const char* flag, const char* key, T& target) {
  if (!section.contains(key)) return;
  const CLI::Option* opt = cmd->get_option_no_throw(flag);
  if (opt != nullptr && opt->count() > 0) return;
  target = section.at(key).get<T>();
}

std::string comment_header(const json& config) {
  json j;
  j["version"] = io::tool_version();
  j["config"] = config;
  return "# " + j.dump() + "\n";
}

std::string sanitize(std::string name) {
  for (char& c : name) {
    if (c == '/' || c == '\\' || c == ' ' || c == ':') c = '_';
  }
  return name;
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string corpus_dir;
  std::string out_dir = "preprocessed";
  int grid_cap = 16;
};

int cmd_preprocess(const PreprocessArgs& args) {
  std::vector<fs::path> inputs;
  for (const auto& entry : fs::recursive_directory_iterator(args.corpus_dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".mid" || ext == ".midi") inputs.push_back(entry.path());
  }
  std::sort(inputs.begin(), inputs.end());
  if (inputs.empty()) throw io::NoInputFiles(args.corpus_dir);

  json config;
  config["command"] = "preprocess";
  config["corpus_dir"] = args.corpus_dir;
  config["out"] = args.out_dir;
  config["grid_cap"] = args.grid_cap;

  const fs::path out(args.out_dir);
  fs::create_directories(out / "scores");
  const DurationGrid grid = build_grid(args.grid_cap);

  io::Manifest manifest;
  manifest.config = config;
  std::vector<Score> corpus;
  int index = 0;
  for (const auto& input : inputs) {
    const std::string rel = fs::relative(input, args.corpus_dir).string();
    try {
      const auto bytes = io::read_binary_file(input);
      const midi::MidiSong song = midi::parse_midi(bytes);
      const auto notes = midi::extract_notes(song);
      Score score = score_from_notes(midi::ticks_to_quarters(notes, song.division), grid);
      char prefix[16];
      std::snprintf(prefix, sizeof prefix, "%04d_", index);
      score.name = prefix + sanitize(fs::path(rel).stem().string());
      score.source = rel;
      const std::string score_rel = "scores/" + score.name + ".json";
      io::save_score_json(out / score_rel, score);
      manifest.scores.push_back(
          {score.name, rel, score_rel, static_cast<long>(score.notes.size())});
      corpus.push_back(std::move(score));
      ++index;
    } catch (const std::exception& e) {
      manifest.rejected.push_back({rel, e.what()});
    }
  }
  if (corpus.empty()) throw io::NoInputFiles(args.corpus_dir + " (all files rejected)");

  const Dictionaries dicts = build_dictionaries_augmented(corpus);
  io::save_dictionaries(out / "dictionaries.json", dicts, config);
  io::save_manifest(out / "manifest.json", manifest);

  long total_notes = 0;
  for (const auto& entry : manifest.scores) total_notes += entry.note_count;
  std::cout << "converted " << manifest.scores.size() << " scores, " << total_notes
            << " notes, rejected " << manifest.rejected.size() << "\n";
  std::cout << "vocabulary: dT " << dicts.size_dt() << ", T " << dicts.size_t_() << ", P "
            << dicts.size_p() << " (boundary included)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string variant = "bachprop";
  std::string out_dir = "run";
  model::TrainConfig cfg;
  bool no_transpose = false;
};

int cmd_train(const TrainArgs& args) {
  const fs::path manifest_path(args.manifest);
  const std::vector<Score> corpus = io::load_corpus(manifest_path);
  const Dictionaries dicts =
      io::load_dictionaries(manifest_path.parent_path() / "dictionaries.json");

  model::TrainConfig cfg = args.cfg;
  cfg.transpose = !args.no_transpose;

  json config;
  config["command"] = "train";
  config["manifest"] = args.manifest;
  config["variant"] = args.variant;
  config["seed"] = cfg.seed;
  config["batch-size"] = cfg.batch_size;
  config["trunc-len"] = cfg.trunc_len;
  config["val-fraction"] = cfg.val_fraction;
  config["epochs"] = cfg.max_epochs;
  config["patience"] = cfg.patience;
  config["lr"] = cfg.learning_rate;
  config["clip-norm"] = cfg.clip_norm;
  config["transpose"] = cfg.transpose;
  config["target-train-acc"] = cfg.target_train_accuracy;

  std::vector<EncodedScore> encoded;
  encoded.reserve(corpus.size());
  for (const auto& score : corpus) encoded.push_back(encode(score, dicts));

  model::ModelParams params = model::build_variant(args.variant, dicts);
  Rng init_rng(cfg.seed);
  model::init_params(params, init_rng);
  Rng train_rng(cfg.seed);
  const model::TrainResult result = model::train(params, encoded, cfg, train_rng);

  fs::create_directories(args.out_dir);
  const fs::path out(args.out_dir);
  io::CheckpointMeta meta;
  meta.config_echo = config.dump();
  meta.seed = cfg.seed;
  io::save_checkpoint(out / "checkpoint.bin", result.params, meta);
  io::write_text_file(out / "trainlog.csv", comment_header(config) + result.log.to_csv());

  if (!result.log.epochs.empty()) {
    const auto& last = result.log.epochs.back();
    std::cout << "trained " << args.variant << " for " << result.log.epochs.size()
              << " epochs; final train nll " << last.train_nll;
    if (result.log.best_epoch > 0) {
      const auto& best = result.log.epochs[static_cast<std::size_t>(result.log.best_epoch - 1)];
      std::cout << "; best epoch " << result.log.best_epoch << " (val nll " << best.val_nll
                << ", acc " << best.val_acc_dt << "/" << best.val_acc_t << "/" << best.val_acc_p
                << ")";
    }
    std::cout << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string checkpoint;
  std::string out_dir = "samples";
  int count = 1;
  sample::SamplerConfig cfg;
};

int cmd_sample(const SampleArgs& args) {
  const io::LoadedCheckpoint loaded = io::load_checkpoint(args.checkpoint);
  fs::create_directories(args.out_dir);
  const fs::path out(args.out_dir);
  const DurationGrid grid = build_grid(16);

  json config;
  config["command"] = "sample";
  config["checkpoint"] = args.checkpoint;
  config["count"] = args.count;
  config["seed"] = args.cfg.seed;
  config["temperature"] = args.cfg.temperature;
  config["max-notes"] = args.cfg.max_notes;

  Rng rng(args.cfg.seed);
  for (int i = 0; i < args.count; ++i) {
    Score score = sample::generate_score(loaded.params, args.cfg, rng);
    char name[64];
    std::snprintf(name, sizeof name, "gen_s%llu_%04d",
                  static_cast<unsigned long long>(args.cfg.seed), i);
    score.name = name;
    const auto bytes = midi::write_midi(score, 48);
    io::write_binary_file(out / (std::string(name) + ".mid"), bytes);
    // the text dump is the written file re-read through the conversion
    // pipeline, so dump and MIDI agree even for same-pitch overlaps
    const Score round = score_from_notes(
        midi::ticks_to_quarters(midi::extract_notes(midi::parse_midi(bytes)), 48), grid);
    io::write_text_file(out / (std::string(name) + ".txt"), score_to_text(round));
  }
  io::write_text_file(out / "sample_config.json",
                      json({{"version", io::tool_version()}, {"config", config}}).dump(2) + "\n");
  std::cout << "wrote " << args.count << " scores to " << args.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string corpus_manifest;
  std::string reference_manifest;
  std::string out_dir = "reports";
  std::string pattern_sizes = "2,3,4,5,6,7,8,9,10";
  double bootstrap_fraction = 0.5;
  int bootstrap_reps = 10;
  std::uint64_t seed = 0;
};

std::vector<int> parse_sizes(const std::string& text) {
  std::vector<int> sizes;
  std::string token;
  for (const char c : text + ",") {
    if (c == ',') {
      if (!token.empty()) sizes.push_back(std::stoi(token));
      token.clear();
    } else {
      token += c;
    }
  }
  return sizes;
}

int cmd_evaluate(const EvaluateArgs& args) {
  const std::vector<Score> corpus = io::load_corpus(args.corpus_manifest);
  const std::vector<Score> reference = io::load_corpus(args.reference_manifest);
  const std::vector<int> sizes = parse_sizes(args.pattern_sizes);

  json config;
  config["command"] = "evaluate";
  config["corpus"] = args.corpus_manifest;
  config["reference"] = args.reference_manifest;
  config["pattern-sizes"] = args.pattern_sizes;
  config["bootstrap-fraction"] = args.bootstrap_fraction;
  config["bootstrap-reps"] = args.bootstrap_reps;
  config["seed"] = args.seed;
  const std::string header = comment_header(config);

  fs::create_directories(args.out_dir);
  const fs::path out(args.out_dir);

  const metrics::LocalHistograms corpus_hists = metrics::local_histograms(corpus);
  const metrics::LocalHistograms reference_hists = metrics::local_histograms(reference);
  const metrics::HistogramReport corpus_lengths = metrics::song_lengths(corpus);
  const metrics::HistogramReport reference_lengths = metrics::song_lengths(reference);

  struct Entry {
    const char* file;
    const char* label;
    const metrics::HistogramReport* report;
    const metrics::HistogramReport* reference;
    metrics::HistogramMetric metric;
  };
  const Entry entries[] = {
      {"dt_hist.csv", "dt", &corpus_hists.dt, &reference_hists.dt,
       [](std::span<const Score> c) { return metrics::local_histograms(c).dt; }},
      {"t_hist.csv", "t", &corpus_hists.t, &reference_hists.t,
       [](std::span<const Score> c) { return metrics::local_histograms(c).t; }},
      {"intervals_chord.csv", "intervals_chord", &corpus_hists.chord_intervals,
       &reference_hists.chord_intervals,
       [](std::span<const Score> c) { return metrics::local_histograms(c).chord_intervals; }},
      {"intervals_all.csv", "intervals_all", &corpus_hists.all_intervals,
       &reference_hists.all_intervals,
       [](std::span<const Score> c) { return metrics::local_histograms(c).all_intervals; }},
      {"lengths.csv", "lengths", &corpus_lengths, &reference_lengths,
       [](std::span<const Score> c) { return metrics::song_lengths(c); }},
  };

  std::string distances = header + "metric,tv_distance\n";
  char buf[64];
  for (const auto& entry : entries) {
    metrics::HistogramReport report = *entry.report;
    if (corpus.size() >= 2) {
      Rng rng(args.seed);
      const metrics::BootstrapResult boot = metrics::bootstrap(
          corpus, entry.metric, args.bootstrap_fraction, args.bootstrap_reps, rng);
      report.boot_mean = boot.mean;
      report.boot_std = boot.stddev;
    }
    io::write_text_file(out / entry.file, header + metrics::histogram_csv(report));
    std::snprintf(buf, sizeof buf, "%.17g",
                  metrics::histogram_distance(*entry.report, *entry.reference));
    distances += std::string(entry.label) + "," + buf + "\n";
  }
  io::write_text_file(out / "distances.csv", distances);

  const metrics::NoveltyProfile novelty = metrics::novelty_profile(corpus, reference, sizes);
  io::write_text_file(out / "novelty.json", metrics::novelty_json(novelty));
  const metrics::NoveltyProfile auto_nov = metrics::auto_novelty(corpus, sizes);
  io::write_text_file(out / "auto_novelty.json", metrics::novelty_json(auto_nov));

  std::cout << "wrote reports to " << args.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIDI corpus modeling toolkit: note-triplet preprocessing, factorized "
               "autoregressive training, temperature sampling, novelty metrics"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file with per-command sections");

  PreprocessArgs pre;
  CLI::App* preprocess = app.add_subcommand("preprocess", "convert a MIDI directory");
  preprocess->add_option("corpus-dir", pre.corpus_dir, "directory with .mid/.midi files")
      ->required();
  preprocess->add_option("--out", pre.out_dir, "output directory");
  preprocess->add_option("--grid-cap", pre.grid_cap, "duration cap in quarter notes");

  TrainArgs tr;
  CLI::App* train = app.add_subcommand("train", "train a model on a preprocessed corpus");
  train->add_option("--manifest", tr.manifest, "manifest.json from preprocess")->required();
  train->add_option("--variant", tr.variant, "bachprop|indepbp|mlp|polydac");
  train->add_option("--out", tr.out_dir, "output directory");
  train->add_option("--seed", tr.cfg.seed, "run seed");
  train->add_option("--epochs", tr.cfg.max_epochs, "maximum epochs");
  train->add_option("--batch-size", tr.cfg.batch_size, "songs per batch");
  train->add_option("--trunc-len", tr.cfg.trunc_len, "truncation window in notes");
  train->add_option("--val-fraction", tr.cfg.val_fraction, "validation fraction (0 disables)");
  train->add_option("--patience", tr.cfg.patience, "early-stop patience in epochs");
  train->add_option("--lr", tr.cfg.learning_rate, "Adam step size");
  train->add_option("--clip-norm", tr.cfg.clip_norm, "global gradient norm clip");
  train->add_flag("--no-transpose", tr.no_transpose, "disable transposition augmentation");
  train->add_option("--target-train-acc", tr.cfg.target_train_accuracy,
                    "stop when training accuracy reaches this on all features");

  SampleArgs sa;
  CLI::App* sample_cmd = app.add_subcommand("sample", "generate scores from a checkpoint");
  sample_cmd->add_option("--checkpoint", sa.checkpoint, "checkpoint.bin")->required();
  sample_cmd->add_option("--count", sa.count, "number of scores");
  sample_cmd->add_option("--out", sa.out_dir, "output directory");
  sample_cmd->add_option("--seed", sa.cfg.seed, "sampler seed");
  sample_cmd->add_option("--temperature", sa.cfg.temperature, "softmax temperature");
  sample_cmd->add_option("--max-notes", sa.cfg.max_notes, "per-score note cap");

  EvaluateArgs ev;
  CLI::App* evaluate = app.add_subcommand("evaluate", "metric reports for a corpus");
  evaluate->add_option("--corpus", ev.corpus_manifest, "manifest of the corpus to evaluate")
      ->required();
  evaluate->add_option("--reference", ev.reference_manifest, "manifest of the reference corpus")
      ->required();
  evaluate->add_option("--out", ev.out_dir, "output directory");
  evaluate->add_option("--pattern-sizes", ev.pattern_sizes, "comma-separated novelty sizes");
  evaluate->add_option("--bootstrap-fraction", ev.bootstrap_fraction, "resample fraction");
  evaluate->add_option("--bootstrap-reps", ev.bootstrap_reps, "resample repetitions");
  evaluate->add_option("--seed", ev.seed, "bootstrap seed");

  try {
    app.parse(argc, argv);
    if (!config_path.empty()) {
      const json config = json::parse(io::read_text_file(config_path));
      const json pc = config.value("preprocess", json::object());
      cfg_fill(pc, preprocess, "--out", "out", pre.out_dir);
      cfg_fill(pc, preprocess, "--grid-cap", "grid-cap", pre.grid_cap);
      const json tc = config.value("train", json::object());
      cfg_fill(tc, train, "--variant", "variant", tr.variant);
      cfg_fill(tc, train, "--out", "out", tr.out_dir);
      cfg_fill(tc, train, "--seed", "seed", tr.cfg.seed);
      cfg_fill(tc, train, "--epochs", "epochs", tr.cfg.max_epochs);
      cfg_fill(tc, train, "--batch-size", "batch-size", tr.cfg.batch_size);
      cfg_fill(tc, train, "--trunc-len", "trunc-len", tr.cfg.trunc_len);
      cfg_fill(tc, train, "--val-fraction", "val-fraction", tr.cfg.val_fraction);
      cfg_fill(tc, train, "--patience", "patience", tr.cfg.patience);
      cfg_fill(tc, train, "--lr", "lr", tr.cfg.learning_rate);
      cfg_fill(tc, train, "--clip-norm", "clip-norm", tr.cfg.clip_norm);
      cfg_fill(tc, train, "--target-train-acc", "target-train-acc",
               tr.cfg.target_train_accuracy);
      const json sc = config.value("sample", json::object());
      cfg_fill(sc, sample_cmd, "--count", "count", sa.count);
      cfg_fill(sc, sample_cmd, "--out", "out", sa.out_dir);
      cfg_fill(sc, sample_cmd, "--seed", "seed", sa.cfg.seed);
      cfg_fill(sc, sample_cmd, "--temperature", "temperature", sa.cfg.temperature);
      cfg_fill(sc, sample_cmd, "--max-notes", "max-notes", sa.cfg.max_notes);
      const json ec = config.value("evaluate", json::object());
      cfg_fill(ec, evaluate, "--out", "out", ev.out_dir);
      cfg_fill(ec, evaluate, "--pattern-sizes", "pattern-sizes", ev.pattern_sizes);
      cfg_fill(ec, evaluate, "--bootstrap-fraction", "bootstrap-fraction",
               ev.bootstrap_fraction);
      cfg_fill(ec, evaluate, "--bootstrap-reps", "bootstrap-reps", ev.bootstrap_reps);
      cfg_fill(ec, evaluate, "--seed", "seed", ev.seed);
    }
    if (preprocess->parsed()) return cmd_preprocess(pre);
    if (train->parsed()) return cmd_train(tr);
    if (sample_cmd->parsed()) return cmd_sample(sa);
    if (evaluate->parsed()) return cmd_evaluate(ev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
