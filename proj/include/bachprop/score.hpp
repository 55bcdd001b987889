#ifndef BACHPROP_SCORE_HPP
#define BACHPROP_SCORE_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bachprop/rational.hpp"
#include "bachprop/rng.hpp"

namespace bachprop {

struct ScoreError : std::runtime_error {
  explicit ScoreError(const std::string& msg) : std::runtime_error(msg) {}
};
struct EmptyCorpus : ScoreError {
  EmptyCorpus() : ScoreError("empty corpus") {}
};
struct UnknownSymbol : ScoreError {
  UnknownSymbol(const std::string& feature, long value)
      : ScoreError("unknown symbol: " + feature + "=" + std::to_string(value)),
        feature_name(feature),
        symbol(value) {}
  std::string feature_name;
  long symbol;
};
struct MalformedEncoding : ScoreError {
  explicit MalformedEncoding(const std::string& msg) : ScoreError("malformed encoding: " + msg) {}
};
struct NoFeasibleOffset : ScoreError {
  NoFeasibleOffset() : ScoreError("no feasible transposition offset") {}
};

// One note as the model sees it: time-shift since the previous note's onset,
// duration, and MIDI pitch. dt and t are counted in atoms of 1/48 quarter.
struct NoteEvent {
  int dt = 0;
  int t = 0;
  int pitch = 0;

  friend bool operator==(const NoteEvent& a, const NoteEvent& b) {
    return a.dt == b.dt && a.t == b.t && a.pitch == b.pitch;
  }
};

struct Score {
  std::vector<NoteEvent> notes;
  std::string name;
  std::string source;

  friend bool operator==(const Score& a, const Score& b) { return a.notes == b.notes; }
};

// A note with exact rational timing in quarter notes, before quantization.
struct RationalNote {
  Rat onset;
  Rat duration;
  int pitch = 0;
};

// Allowed quantized durations: every atom count up to the cap that lies on the
// 64th-note grid (multiples of 3 atoms) or the 32nd-triplet grid (multiples
// of 4 atoms).
class DurationGrid {
public:
  static constexpr int atoms_per_quarter = 48;

  static DurationGrid build(int cap_quarters);

  const std::vector<int>& members() const { return members_; }
  int cap() const { return cap_; }
  bool is_member(int atoms) const;

private:
  std::vector<int> members_;
  int cap_ = 0;
};

inline DurationGrid build_grid(int cap_quarters) { return DurationGrid::build(cap_quarters); }

// Nearest grid member to `value` quarters; ties break toward the smaller
// member, values above the cap clamp to the cap.
int quantize_duration(const Rat& value, const DurationGrid& grid);

// Same, but over grid ∪ {0}.
int quantize_shift(const Rat& value, const DurationGrid& grid);

// Quantize a (onset, duration, pitch) list, sorted by (onset, pitch), into a
// Score. Simultaneous groups (quantized dt = 0) are re-sorted by ascending
// pitch so chord note order is canonical.
Score score_from_notes(std::span<const RationalNote> notes, const DurationGrid& grid);

// Orders dt = 0 runs by ascending (pitch, duration) in place.
void canonicalize_simultaneous(Score& score);

// The three ordered symbol tables. Values are stored ascending; the boundary
// token implicitly occupies the last index of each table.
struct Dictionaries {
  std::vector<int> dt_table;
  std::vector<int> t_table;
  std::vector<int> p_table;

  int size_dt() const { return static_cast<int>(dt_table.size()) + 1; }
  int size_t_() const { return static_cast<int>(t_table.size()) + 1; }
  int size_p() const { return static_cast<int>(p_table.size()) + 1; }
  int boundary_dt() const { return static_cast<int>(dt_table.size()); }
  int boundary_t() const { return static_cast<int>(t_table.size()); }
  int boundary_p() const { return static_cast<int>(p_table.size()); }

  int index_of_dt(int value) const;
  int index_of_t(int value) const;
  int index_of_p(int value) const;

  int min_pitch() const;
  int max_pitch() const;
  bool has_pitch(int value) const;

  friend bool operator==(const Dictionaries& a, const Dictionaries& b) {
    return a.dt_table == b.dt_table && a.t_table == b.t_table && a.p_table == b.p_table;
  }
};

// Tables of the distinct values observed in the corpus (dt additionally always
// contains 0), sorted ascending. Throws EmptyCorpus.
Dictionaries build_dictionaries(std::span<const Score> corpus);

// Like build_dictionaries, but the pitch table additionally covers every pitch
// reachable by a feasible transposition of any corpus song, so per-epoch
// augmentation can never produce an unknown symbol.
Dictionaries build_dictionaries_augmented(std::span<const Score> corpus);

// Three aligned index sequences of length N+2, boundary at both ends.
struct EncodedScore {
  std::vector<int> dt;
  std::vector<int> t;
  std::vector<int> p;

  std::size_t length() const { return dt.size(); }
};

EncodedScore encode(const Score& score, const Dictionaries& dicts);
Score decode(const EncodedScore& enc, const Dictionaries& dicts);

// All transposition offsets k such that every shifted pitch stays inside the
// pitch table. k = 0 is always feasible for an encodable score.
std::vector<int> feasible_offsets(const Score& score, const Dictionaries& dicts);

// Shifts every pitch by an offset drawn uniformly from the feasible set.
Score transpose_random(const Score& score, const Dictionaries& dicts, Rng& rng);

// Plain-text note list: one "dT T P" triple per line, times as reduced
// rationals in quarter notes.
std::string score_to_text(const Score& score);
Score score_from_text(const std::string& text, const std::string& name);

}  // namespace bachprop

#endif
