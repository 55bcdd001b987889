#include "bachprop/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace bachprop::metrics {

namespace {

std::uint64_t window_hash(std::span<const NoteEvent> window) {
  // FNV-1a over the three features of each note
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t x) {
    h ^= x;
    h *= 1099511628211ULL;
  };
  for (const auto& note : window) {
    mix(static_cast<std::uint64_t>(note.dt));
    mix(static_cast<std::uint64_t>(note.t) + 0x9e37);
    mix(static_cast<std::uint64_t>(note.pitch) + 0x85eb);
  }
  return h;
}

bool window_equal(std::span<const NoteEvent> a, std::span<const NoteEvent> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] == b[i])) return false;
  }
  return true;
}

}  // namespace

PatternIndex::PatternIndex(std::span<const Score> reference, std::span<const int> sizes)
    : songs_(reference.begin(), reference.end()) {
  for (const int m : sizes) {
    Table table;
    table.m = m;
    std::size_t windows = 0;
    for (const auto& song : songs_) {
      if (static_cast<int>(song.notes.size()) >= m) {
        windows += song.notes.size() - static_cast<std::size_t>(m) + 1;
      }
    }
    table.buckets = std::max<std::size_t>(16, windows * 2);
    table.slots.assign(table.buckets, {});
    for (int s = 0; s < static_cast<int>(songs_.size()); ++s) {
      const auto& notes = songs_[static_cast<std::size_t>(s)].notes;
      for (int pos = 0; pos + m <= static_cast<int>(notes.size()); ++pos) {
        const std::span<const NoteEvent> window(notes.data() + pos, static_cast<std::size_t>(m));
        const std::size_t slot = window_hash(window) % table.buckets;
        table.slots[slot].emplace_back(s, pos);
      }
    }
    tables_.push_back(std::move(table));
  }
}

const PatternIndex::Table& PatternIndex::table_for(int m) const {
  for (const auto& table : tables_) {
    if (table.m == m) return table;
  }
  throw std::invalid_argument("pattern size " + std::to_string(m) + " not indexed");
}

bool PatternIndex::contains(std::span<const NoteEvent> window, int exclude_song) const {
  const Table& table = table_for(static_cast<int>(window.size()));
  const std::size_t slot = window_hash(window) % table.buckets;
  for (const auto& [song, pos] : table.slots[slot]) {
    if (song == exclude_song) continue;
    const auto& notes = songs_[static_cast<std::size_t>(song)].notes;
    const std::span<const NoteEvent> candidate(notes.data() + pos, window.size());
    if (window_equal(window, candidate)) return true;
  }
  return false;
}

std::vector<char> pattern_novelty(const Score& song, int m, const PatternIndex& index,
                                  int exclude_song) {
  if (m < 1) throw std::invalid_argument("pattern size must be positive");
  if (static_cast<int>(song.notes.size()) < m) throw SongTooShort(song.notes.size(), m);
  std::vector<char> novel;
  novel.reserve(song.notes.size() - static_cast<std::size_t>(m) + 1);
  for (int pos = 0; pos + m <= static_cast<int>(song.notes.size()); ++pos) {
    const std::span<const NoteEvent> window(song.notes.data() + pos, static_cast<std::size_t>(m));
    novel.push_back(index.contains(window, exclude_song) ? 0 : 1);
  }
  return novel;
}

namespace {

double mean_novelty(const Score& song, int m, const PatternIndex& index, int exclude_song) {
  const std::vector<char> novel = pattern_novelty(song, m, index, exclude_song);
  long sum = 0;
  for (const char v : novel) sum += v;
  return static_cast<double>(sum) / static_cast<double>(novel.size());
}

}  // namespace

double song_novelty(const Score& song, int m, std::span<const Score> reference) {
  const int sizes[] = {m};
  const PatternIndex index(reference, sizes);
  return mean_novelty(song, m, index, -1);
}

NoveltyProfile novelty_profile(std::span<const Score> corpus, std::span<const Score> reference,
                               std::span<const int> sizes) {
  if (sizes.empty()) throw std::invalid_argument("no pattern sizes given");
  const PatternIndex index(reference, sizes);
  NoveltyProfile profile;
  profile.sizes.assign(sizes.begin(), sizes.end());
  for (const int m : sizes) {
    std::vector<double> scores;
    for (const auto& song : corpus) {
      if (static_cast<int>(song.notes.size()) < m) continue;
      scores.push_back(mean_novelty(song, m, index, -1));
    }
    profile.scores.push_back(std::move(scores));
  }
  return profile;
}

NoveltyProfile auto_novelty(std::span<const Score> corpus, std::span<const int> sizes) {
  if (corpus.size() < 2) throw CorpusTooSmall("auto-novelty needs at least two songs");
  const PatternIndex index(corpus, sizes);
  NoveltyProfile profile;
  profile.sizes.assign(sizes.begin(), sizes.end());
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    const int m = sizes[k];
    std::vector<double> scores;
    for (int s = 0; s < static_cast<int>(corpus.size()); ++s) {
      const Score& song = corpus[static_cast<std::size_t>(s)];
      if (static_cast<int>(song.notes.size()) < m) continue;
      scores.push_back(mean_novelty(song, m, index, s));
    }
    profile.scores.push_back(std::move(scores));
  }
  return profile;
}

namespace {

HistogramReport normalize(std::map<long, long>&& counts) {
  HistogramReport report;
  long total = 0;
  for (const auto& [value, count] : counts) total += count;
  if (total > 0) {
    for (const auto& [value, count] : counts) {
      report.freq[value] = static_cast<double>(count) / static_cast<double>(total);
    }
  }
  return report;
}

}  // namespace

LocalHistograms local_histograms(std::span<const Score> corpus) {
  if (corpus.empty()) throw EmptyCorpus();
  std::map<long, long> dt_counts, t_counts, chord_counts, all_counts;
  for (const auto& song : corpus) {
    const auto& notes = song.notes;
    for (std::size_t i = 0; i < notes.size(); ++i) {
      dt_counts[notes[i].dt] += 1;
      t_counts[notes[i].t] += 1;
      if (i + 1 < notes.size()) {
        const long interval = notes[i + 1].pitch - notes[i].pitch;
        all_counts[interval] += 1;
        if (notes[i + 1].dt == 0) chord_counts[interval] += 1;
      }
    }
  }
  LocalHistograms out;
  out.dt = normalize(std::move(dt_counts));
  out.t = normalize(std::move(t_counts));
  out.chord_intervals = normalize(std::move(chord_counts));
  out.all_intervals = normalize(std::move(all_counts));
  return out;
}

HistogramReport song_lengths(std::span<const Score> corpus) {
  if (corpus.empty()) throw EmptyCorpus();
  std::map<long, long> counts;
  for (const auto& song : corpus) {
    long shift_sum = 0;
    long onset = 0;
    long best_offset = -1;
    long last_sounding_t = 0;
    for (const auto& note : song.notes) {
      onset += note.dt;
      shift_sum += note.dt;
      if (onset + note.t > best_offset) {
        best_offset = onset + note.t;
        last_sounding_t = note.t;
      }
    }
    const long atoms = song.notes.empty() ? 0 : shift_sum + last_sounding_t;
    counts[atoms / DurationGrid::atoms_per_quarter] += 1;
  }
  return normalize(std::move(counts));
}

BootstrapResult bootstrap(std::span<const Score> corpus, const HistogramMetric& metric,
                          double fraction, int repetitions, Rng& rng) {
  if (corpus.size() < 2) throw CorpusTooSmall("bootstrap needs at least two songs");
  if (repetitions < 1) throw std::invalid_argument("repetitions must be positive");
  const auto draw = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(corpus.size())));
  std::vector<int> ids(corpus.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);

  std::map<long, double> sum, sumsq;
  for (int rep = 0; rep < repetitions; ++rep) {
    rng.shuffle(ids);
    std::vector<Score> subset;
    subset.reserve(draw);
    for (std::size_t i = 0; i < draw; ++i) {
      subset.push_back(corpus[static_cast<std::size_t>(ids[i])]);
    }
    const HistogramReport rep_report = metric(subset);
    for (const auto& [value, freq] : rep_report.freq) {
      sum[value] += freq;
      sumsq[value] += freq * freq;
    }
  }
  BootstrapResult result;
  for (const auto& [value, total] : sum) {
    const double mean = total / repetitions;
    const double var = std::max(0.0, sumsq[value] / repetitions - mean * mean);
    result.mean[value] = mean;
    result.stddev[value] = std::sqrt(var);
  }
  return result;
}

double histogram_distance(const HistogramReport& a, const HistogramReport& b) {
  double l1 = 0.0;
  auto ia = a.freq.begin();
  auto ib = b.freq.begin();
  while (ia != a.freq.end() || ib != b.freq.end()) {
    if (ib == b.freq.end() || (ia != a.freq.end() && ia->first < ib->first)) {
      l1 += std::abs(ia->second);
      ++ia;
    } else if (ia == a.freq.end() || ib->first < ia->first) {
      l1 += std::abs(ib->second);
      ++ib;
    } else {
      l1 += std::abs(ia->second - ib->second);
      ++ia;
      ++ib;
    }
  }
  return 0.5 * l1;
}

namespace {

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - w) + sorted[hi] * w;
}

}  // namespace

std::string histogram_csv(const HistogramReport& report) {
  std::string out = "value,frequency,boot_mean,boot_std\n";
  for (const auto& [value, freq] : report.freq) {
    out += std::to_string(value) + "," + fmt_double(freq) + ",";
    const auto mean_it = report.boot_mean.find(value);
    if (mean_it != report.boot_mean.end()) out += fmt_double(mean_it->second);
    out += ",";
    const auto std_it = report.boot_std.find(value);
    if (std_it != report.boot_std.end()) out += fmt_double(std_it->second);
    out += "\n";
  }
  // bins seen only in bootstrap subsets
  for (const auto& [value, mean] : report.boot_mean) {
    if (report.freq.count(value)) continue;
    out += std::to_string(value) + ",0," + fmt_double(mean) + "," +
           fmt_double(report.boot_std.at(value)) + "\n";
  }
  return out;
}

std::string novelty_json(const NoveltyProfile& profile) {
  std::ostringstream os;
  os << "{\n  \"pattern_sizes\": [";
  for (std::size_t i = 0; i < profile.sizes.size(); ++i) {
    os << (i ? ", " : "") << profile.sizes[i];
  }
  os << "],\n  \"per_size\": {\n";
  for (std::size_t i = 0; i < profile.sizes.size(); ++i) {
    std::vector<double> sorted = profile.scores[i];
    std::sort(sorted.begin(), sorted.end());
    os << "    \"" << profile.sizes[i] << "\": {\"count\": " << sorted.size();
    os << ", \"median\": " << fmt_double(quantile(sorted, 0.5));
    os << ", \"q1\": " << fmt_double(quantile(sorted, 0.25));
    os << ", \"q3\": " << fmt_double(quantile(sorted, 0.75));
    os << ", \"scores\": [";
    for (std::size_t k = 0; k < profile.scores[i].size(); ++k) {
      os << (k ? ", " : "") << fmt_double(profile.scores[i][k]);
    }
    os << "]}" << (i + 1 < profile.sizes.size() ? "," : "") << "\n";
  }
  os << "  }\n}\n";
  return os.str();
}

}  // namespace bachprop::metrics
