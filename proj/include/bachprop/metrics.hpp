#ifndef BACHPROP_METRICS_HPP
#define BACHPROP_METRICS_HPP

#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bachprop/rng.hpp"
#include "bachprop/score.hpp"

namespace bachprop::metrics {

struct SongTooShort : std::runtime_error {
  SongTooShort(std::size_t len, int m)
      : std::runtime_error("song of " + std::to_string(len) +
                           " notes is shorter than pattern size " + std::to_string(m)) {}
};
struct CorpusTooSmall : std::runtime_error {
  explicit CorpusTooSmall(const std::string& msg) : std::runtime_error("corpus too small: " + msg) {}
};

// Exact index of all m-note triple windows of a reference corpus, one hash
// table per pattern size. Buckets keep (song, position) so lookups verify the
// window exactly and can exclude one song for leave-one-out scoring.
class PatternIndex {
public:
  PatternIndex(std::span<const Score> reference, std::span<const int> sizes);

  // true when the window occurs in some reference song other than exclude_song
  bool contains(std::span<const NoteEvent> window, int exclude_song = -1) const;

private:
  struct Table {
    int m = 0;
    std::size_t buckets = 0;
    std::vector<std::vector<std::pair<int, int>>> slots;  // (song, pos)
  };

  const Table& table_for(int m) const;
  std::vector<Score> songs_;
  std::vector<Table> tables_;
};

// Per-position binary novelty of every m-note pattern: 1 when the pattern is
// absent from the index.
std::vector<char> pattern_novelty(const Score& song, int m, const PatternIndex& index,
                                  int exclude_song = -1);

// Mean binary novelty over the song's (len - m + 1) patterns.
double song_novelty(const Score& song, int m, std::span<const Score> reference);

struct NoveltyProfile {
  std::vector<int> sizes;
  std::vector<std::vector<double>> scores;  // per size, per contributing song
};

NoveltyProfile novelty_profile(std::span<const Score> corpus, std::span<const Score> reference,
                               std::span<const int> sizes);

// Leave-one-out novelty of each corpus song against the rest of the corpus.
NoveltyProfile auto_novelty(std::span<const Score> corpus, std::span<const int> sizes);

struct HistogramReport {
  std::map<long, double> freq;
  std::map<long, double> boot_mean;
  std::map<long, double> boot_std;
};

struct LocalHistograms {
  HistogramReport dt;
  HistogramReport t;
  HistogramReport chord_intervals;  // P[n+1]-P[n] over pairs with dT[n+1] = 0
  HistogramReport all_intervals;    // P[n+1]-P[n] over all consecutive pairs
};

LocalHistograms local_histograms(std::span<const Score> corpus);

// Length of each song in whole quarter-note bins. The length is the sum of
// all time-shifts plus the duration of the note with the latest offset.
HistogramReport song_lengths(std::span<const Score> corpus);

using HistogramMetric = std::function<HistogramReport(std::span<const Score>)>;

struct BootstrapResult {
  std::map<long, double> mean;
  std::map<long, double> stddev;  // population standard deviation
};

// ceil(fraction * S) songs drawn without replacement per repetition.
BootstrapResult bootstrap(std::span<const Score> corpus, const HistogramMetric& metric,
                          double fraction, int repetitions, Rng& rng);

// Total variation: half the L1 distance over the union of bins.
double histogram_distance(const HistogramReport& a, const HistogramReport& b);

// report serialization: "value,frequency,boot_mean,boot_std" rows
std::string histogram_csv(const HistogramReport& report);
std::string novelty_json(const NoveltyProfile& profile);

}  // namespace bachprop::metrics

#endif
