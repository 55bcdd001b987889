#include "bachprop/manifest.hpp"

#include <fstream>

namespace bachprop::io {

using nlohmann::json;

nlohmann::json dictionaries_to_json(const Dictionaries& dicts) {
  json j;
  j["dt"] = dicts.dt_table;
  j["t"] = dicts.t_table;
  j["p"] = dicts.p_table;
  j["atoms_per_quarter"] = DurationGrid::atoms_per_quarter;
  return j;
}

Dictionaries dictionaries_from_json(const nlohmann::json& j) {
  Dictionaries dicts;
  dicts.dt_table = j.at("dt").get<std::vector<int>>();
  dicts.t_table = j.at("t").get<std::vector<int>>();
  dicts.p_table = j.at("p").get<std::vector<int>>();
  return dicts;
}

void save_dictionaries(const std::filesystem::path& path, const Dictionaries& dicts,
                       const nlohmann::json& config_echo) {
  json j = dictionaries_to_json(dicts);
  j["version"] = tool_version();
  j["config"] = config_echo;
  write_text_file(path, j.dump(2) + "\n");
}

Dictionaries load_dictionaries(const std::filesystem::path& path) {
  return dictionaries_from_json(json::parse(read_text_file(path)));
}

void save_score_json(const std::filesystem::path& path, const Score& score) {
  json j;
  j["name"] = score.name;
  j["source"] = score.source;
  json notes = json::array();
  for (const auto& note : score.notes) {
    notes.push_back(json::array({note.dt, note.t, note.pitch}));
  }
  j["notes"] = std::move(notes);
  write_text_file(path, j.dump() + "\n");
}

Score load_score_json(const std::filesystem::path& path) {
  const json j = json::parse(read_text_file(path));
  Score score;
  score.name = j.at("name").get<std::string>();
  score.source = j.at("source").get<std::string>();
  for (const auto& triple : j.at("notes")) {
    NoteEvent ev;
    ev.dt = triple.at(0).get<int>();
    ev.t = triple.at(1).get<int>();
    ev.pitch = triple.at(2).get<int>();
    score.notes.push_back(ev);
  }
  return score;
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  json j;
  j["version"] = tool_version();
  j["config"] = manifest.config;
  json scores = json::array();
  for (const auto& entry : manifest.scores) {
    scores.push_back({{"name", entry.name},
                      {"source", entry.source},
                      {"path", entry.path},
                      {"notes", entry.note_count}});
  }
  j["scores"] = std::move(scores);
  json rejected = json::array();
  for (const auto& r : manifest.rejected) {
    rejected.push_back({{"source", r.source}, {"reason", r.reason}});
  }
  j["rejected"] = std::move(rejected);
  write_text_file(path, j.dump(2) + "\n");
}

Manifest load_manifest(const std::filesystem::path& path) {
  const json j = json::parse(read_text_file(path));
  Manifest manifest;
  manifest.config = j.value("config", json::object());
  for (const auto& entry : j.at("scores")) {
    ManifestEntry e;
    e.name = entry.at("name").get<std::string>();
    e.source = entry.at("source").get<std::string>();
    e.path = entry.at("path").get<std::string>();
    e.note_count = entry.at("notes").get<long>();
    manifest.scores.push_back(std::move(e));
  }
  for (const auto& entry : j.value("rejected", json::array())) {
    manifest.rejected.push_back(
        {entry.at("source").get<std::string>(), entry.at("reason").get<std::string>()});
  }
  return manifest;
}

std::vector<Score> load_corpus(const std::filesystem::path& manifest_path) {
  const Manifest manifest = load_manifest(manifest_path);
  const std::filesystem::path base = manifest_path.parent_path();
  std::vector<Score> corpus;
  corpus.reserve(manifest.scores.size());
  for (const auto& entry : manifest.scores) {
    corpus.push_back(load_score_json(base / entry.path));
  }
  return corpus;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw std::runtime_error("write failure on " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return text;
}

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  return {text.begin(), text.end()};
}

void write_binary_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failure on " + path.string());
}

}  // namespace bachprop::io
