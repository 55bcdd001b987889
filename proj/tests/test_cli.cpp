#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "bachprop/manifest.hpp"
#include "bachprop/midi.hpp"
#include "bachprop/score.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace bachprop;
using nlohmann::json;

namespace {

const fs::path kScratch = fs::temp_directory_path() / "bachprop_cli_test";

int run(const std::string& args) {
  const std::string cmd =
      std::string(CLI_BIN) + " " + args + " >> " + (kScratch / "cli.log").string() + " 2>&1";
  return std::system(cmd.c_str());
}

Score melody(int seed_pitch, int notes) {
  Score s;
  for (int i = 0; i < notes; ++i) {
    s.notes.push_back({i == 0 ? 0 : (i % 3 == 0 ? 24 : 48), i % 2 == 0 ? 48 : 24,
                       seed_pitch + (i * 2) % 12});
  }
  return s;
}

void write_corpus(const fs::path& dir) {
  fs::create_directories(dir);
  for (int k = 0; k < 6; ++k) {
    const Score s = melody(55 + k, 8 + k);
    io::write_binary_file(dir / ("song" + std::to_string(k) + ".mid"), midi::write_midi(s, 48));
  }
  io::write_text_file(dir / "broken.mid", "not a midi file at all");
}

}  // namespace

TEST_CASE("end-to-end pipeline through the command-line tool") {
  fs::remove_all(kScratch);
  fs::create_directories(kScratch);
  const fs::path corpus = kScratch / "corpus";
  write_corpus(corpus);
  const std::string pre = (kScratch / "pre").string();

  SUBCASE("preprocess converts good files and records rejections") {
    REQUIRE(run("preprocess " + corpus.string() + " --out " + pre) == 0);
    const io::Manifest manifest = io::load_manifest(kScratch / "pre" / "manifest.json");
    CHECK(manifest.scores.size() == 6);
    REQUIRE(manifest.rejected.size() == 1);
    CHECK(manifest.rejected[0].source == "broken.mid");
    CHECK(fs::exists(kScratch / "pre" / "dictionaries.json"));
    const auto scores = io::load_corpus(kScratch / "pre" / "manifest.json");
    CHECK(scores.size() == 6);
    CHECK(scores[0].notes.size() == 8);

    // rerun on unchanged inputs is byte-identical
    const std::string manifest_bytes = io::read_text_file(kScratch / "pre" / "manifest.json");
    const std::string dict_bytes = io::read_text_file(kScratch / "pre" / "dictionaries.json");
    fs::remove_all(kScratch / "pre");
    REQUIRE(run("preprocess " + corpus.string() + " --out " + pre) == 0);
    CHECK(io::read_text_file(kScratch / "pre" / "manifest.json") == manifest_bytes);
    CHECK(io::read_text_file(kScratch / "pre" / "dictionaries.json") == dict_bytes);
  }

  SUBCASE("preprocess fails on a directory without MIDI files") {
    fs::create_directories(kScratch / "empty");
    CHECK(run("preprocess " + (kScratch / "empty").string() + " --out " +
              (kScratch / "pre_none").string()) != 0);
  }

  SUBCASE("train, sample and evaluate chain") {
    REQUIRE(run("preprocess " + corpus.string() + " --out " + pre) == 0);
    const std::string manifest = pre + "/manifest.json";
    const std::string run_dir = (kScratch / "run").string();
    const std::string train_args = "train --manifest " + manifest +
                                   " --variant bachprop --out " + run_dir +
                                   " --epochs 2 --seed 3 --batch-size 2 --trunc-len 16";
    REQUIRE(run(train_args) == 0);
    REQUIRE(fs::exists(kScratch / "run" / "checkpoint.bin"));
    REQUIRE(fs::exists(kScratch / "run" / "trainlog.csv"));

    // same seed, same inputs: bit-identical log and checkpoint
    const std::string log_bytes = io::read_text_file(kScratch / "run" / "trainlog.csv");
    const auto ckpt_bytes = io::read_binary_file(kScratch / "run" / "checkpoint.bin");
    fs::remove_all(kScratch / "run");
    REQUIRE(run(train_args) == 0);
    CHECK(io::read_text_file(kScratch / "run" / "trainlog.csv") == log_bytes);
    CHECK(io::read_binary_file(kScratch / "run" / "checkpoint.bin") == ckpt_bytes);

    CHECK(run("train --manifest " + manifest + " --variant deepbach --out " +
              (kScratch / "bad").string()) != 0);

    const std::string samples = (kScratch / "samples").string();
    REQUIRE(run("sample --checkpoint " + run_dir + "/checkpoint.bin --count 3 --seed 9 --out " +
                samples + " --max-notes 50") == 0);
    const DurationGrid grid = build_grid(16);
    int found = 0;
    for (int i = 0; i < 3; ++i) {
      char base[32];
      std::snprintf(base, sizeof base, "gen_s9_%04d", i);
      const fs::path mid = kScratch / "samples" / (std::string(base) + ".mid");
      const fs::path txt = kScratch / "samples" / (std::string(base) + ".txt");
      REQUIRE(fs::exists(mid));
      REQUIRE(fs::exists(txt));
      // every emitted file re-parses to its dumped note list exactly
      const auto bytes = io::read_binary_file(mid);
      const Score reparsed = score_from_notes(
          midi::ticks_to_quarters(midi::extract_notes(midi::parse_midi(bytes)), 48), grid);
      CHECK(score_to_text(reparsed) == io::read_text_file(txt));
      ++found;
    }
    CHECK(found == 3);

    // count 0 is a successful no-op
    REQUIRE(run("sample --checkpoint " + run_dir + "/checkpoint.bin --count 0 --out " +
                (kScratch / "samples0").string()) == 0);
    CHECK_FALSE(fs::exists(kScratch / "samples0" / "gen_s0_0000.mid"));

    // corpus evaluated against itself: zero distances, zero novelty
    const std::string reports = (kScratch / "reports").string();
    REQUIRE(run("evaluate --corpus " + manifest + " --reference " + manifest + " --out " +
                reports + " --pattern-sizes 2,3,4") == 0);
    for (const char* file :
         {"dt_hist.csv", "t_hist.csv", "intervals_chord.csv", "intervals_all.csv", "lengths.csv",
          "novelty.json", "auto_novelty.json", "distances.csv"}) {
      CHECK(fs::exists(kScratch / "reports" / file));
    }
    const std::string distances = io::read_text_file(kScratch / "reports" / "distances.csv");
    CHECK(distances.find("dt,0\n") != std::string::npos);
    CHECK(distances.find("lengths,0\n") != std::string::npos);
    const json novelty = json::parse(io::read_text_file(kScratch / "reports" / "novelty.json"));
    for (const auto& [size, stats] : novelty.at("per_size").items()) {
      CHECK(stats.at("median").get<double>() == 0.0);
      CHECK(stats.at("q3").get<double>() == 0.0);
    }
  }
}
