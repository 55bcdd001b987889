#ifndef BACHPROP_MANIFEST_HPP
#define BACHPROP_MANIFEST_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "bachprop/score.hpp"

#include "json.hpp"

namespace bachprop::io {

inline const char* tool_version() { return "bachprop 0.1.0"; }

struct NoInputFiles : std::runtime_error {
  explicit NoInputFiles(const std::string& dir)
      : std::runtime_error("no MIDI files found under " + dir) {}
};

nlohmann::json dictionaries_to_json(const Dictionaries& dicts);
Dictionaries dictionaries_from_json(const nlohmann::json& j);
void save_dictionaries(const std::filesystem::path& path, const Dictionaries& dicts,
                       const nlohmann::json& config_echo);
Dictionaries load_dictionaries(const std::filesystem::path& path);

void save_score_json(const std::filesystem::path& path, const Score& score);
Score load_score_json(const std::filesystem::path& path);

struct ManifestEntry {
  std::string name;
  std::string source;  // original input file
  std::string path;    // converted score file, relative to the manifest
  long note_count = 0;
};

struct Rejection {
  std::string source;
  std::string reason;
};

struct Manifest {
  std::vector<ManifestEntry> scores;
  std::vector<Rejection> rejected;
  nlohmann::json config;
};

void save_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest load_manifest(const std::filesystem::path& path);

// Loads every score listed by a manifest, resolving paths relative to it.
std::vector<Score> load_corpus(const std::filesystem::path& manifest_path);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace bachprop::io

#endif
