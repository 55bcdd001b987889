#ifndef BACHPROP_TESTS_NAIVE_NOVELTY_HPP
#define BACHPROP_TESTS_NAIVE_NOVELTY_HPP

#include <span>

#include "bachprop/score.hpp"

// Brute-force novelty oracle: scan every window of every reference song and
// compare all m triples. Deliberately independent of the indexed
// implementation under test.
namespace bachprop::testing {

inline bool naive_window_found(std::span<const NoteEvent> window,
                               std::span<const Score> reference, int exclude_song) {
  for (int s = 0; s < static_cast<int>(reference.size()); ++s) {
    if (s == exclude_song) continue;
    const auto& notes = reference[static_cast<std::size_t>(s)].notes;
    if (notes.size() < window.size()) continue;
    for (std::size_t start = 0; start + window.size() <= notes.size(); ++start) {
      bool same = true;
      for (std::size_t k = 0; k < window.size(); ++k) {
        if (!(notes[start + k] == window[k])) {
          same = false;
          break;
        }
      }
      if (same) return true;
    }
  }
  return false;
}

inline double naive_song_novelty(const Score& song, int m, std::span<const Score> reference,
                                 int exclude_song = -1) {
  const std::size_t windows = song.notes.size() - static_cast<std::size_t>(m) + 1;
  long novel = 0;
  for (std::size_t pos = 0; pos < windows; ++pos) {
    const std::span<const NoteEvent> window(song.notes.data() + pos, static_cast<std::size_t>(m));
    if (!naive_window_found(window, reference, exclude_song)) ++novel;
  }
  return static_cast<double>(novel) / static_cast<double>(windows);
}

}  // namespace bachprop::testing

#endif
