#include "bachprop/score.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace bachprop {

DurationGrid DurationGrid::build(int cap_quarters) {
  if (cap_quarters < 1) throw ScoreError("grid cap must be at least one quarter");
  DurationGrid grid;
  grid.cap_ = cap_quarters * atoms_per_quarter;
  for (int k = 1; k <= grid.cap_; ++k) {
    if (k % 3 == 0 || k % 4 == 0) grid.members_.push_back(k);
  }
  return grid;
}

bool DurationGrid::is_member(int atoms) const {
  return atoms >= 3 && atoms <= cap_ && (atoms % 3 == 0 || atoms % 4 == 0);
}

namespace {

// |value*48 - k| compared exactly: value = num/den with den > 0, so the
// distance ordering of candidates k is the ordering of |48*num - k*den|.
std::int64_t scaled_distance(const Rat& value, int k) {
  const std::int64_t d = 48 * value.num - static_cast<std::int64_t>(k) * value.den;
  return d < 0 ? -d : d;
}

// Nearest candidate from a sorted list, ties toward the smaller value.
int nearest_candidate(const Rat& value, const std::vector<int>& candidates) {
  const Rat atoms(48 * value.num, value.den);
  auto it = std::lower_bound(candidates.begin(), candidates.end(), atoms,
                             [](int member, const Rat& v) { return Rat(member) < v; });
  int best = -1;
  std::int64_t best_dist = -1;
  auto consider = [&](int k) {
    const std::int64_t d = scaled_distance(value, k);
    if (best < 0 || d < best_dist || (d == best_dist && k < best)) {
      best = k;
      best_dist = d;
    }
  };
  if (it != candidates.end()) consider(*it);
  if (it != candidates.begin()) consider(*(it - 1));
  return best;
}

}  // namespace

int quantize_duration(const Rat& value, const DurationGrid& grid) {
  if (value <= Rat(0)) throw ScoreError("duration must be positive");
  return nearest_candidate(value, grid.members());
}

int quantize_shift(const Rat& value, const DurationGrid& grid) {
  if (value < Rat(0)) throw ScoreError("time-shift must be non-negative");
  if (value == Rat(0)) return 0;
  const int member = nearest_candidate(value, grid.members());
  // 0 is also a candidate for shifts; same tie rule (0 is the smaller value).
  const std::int64_t to_zero = scaled_distance(value, 0);
  const std::int64_t to_member = scaled_distance(value, member);
  return to_zero <= to_member ? 0 : member;
}

Score score_from_notes(std::span<const RationalNote> notes, const DurationGrid& grid) {
  Score score;
  score.notes.reserve(notes.size());
  for (std::size_t i = 0; i < notes.size(); ++i) {
    NoteEvent ev;
    ev.dt = i == 0 ? 0 : quantize_shift(notes[i].onset - notes[i - 1].onset, grid);
    ev.t = quantize_duration(notes[i].duration, grid);
    ev.pitch = notes[i].pitch;
    score.notes.push_back(ev);
  }
  canonicalize_simultaneous(score);
  return score;
}

void canonicalize_simultaneous(Score& score) {
  auto& notes = score.notes;
  std::size_t start = 0;
  while (start < notes.size()) {
    std::size_t end = start + 1;
    while (end < notes.size() && notes[end].dt == 0) ++end;
    const int head_dt = notes[start].dt;
    std::sort(notes.begin() + static_cast<std::ptrdiff_t>(start),
              notes.begin() + static_cast<std::ptrdiff_t>(end),
              [](const NoteEvent& a, const NoteEvent& b) {
                if (a.pitch != b.pitch) return a.pitch < b.pitch;
                return a.t < b.t;
              });
    // the group's shift belongs to whichever note ended up first
    notes[start].dt = head_dt;
    for (std::size_t i = start + 1; i < end; ++i) notes[i].dt = 0;
    start = end;
  }
}

namespace {

int table_index(const std::vector<int>& table, int value) {
  auto it = std::lower_bound(table.begin(), table.end(), value);
  if (it == table.end() || *it != value) return -1;
  return static_cast<int>(it - table.begin());
}

}  // namespace

int Dictionaries::index_of_dt(int value) const { return table_index(dt_table, value); }
int Dictionaries::index_of_t(int value) const { return table_index(t_table, value); }
int Dictionaries::index_of_p(int value) const { return table_index(p_table, value); }

int Dictionaries::min_pitch() const {
  if (p_table.empty()) throw ScoreError("empty pitch table");
  return p_table.front();
}

int Dictionaries::max_pitch() const {
  if (p_table.empty()) throw ScoreError("empty pitch table");
  return p_table.back();
}

bool Dictionaries::has_pitch(int value) const { return index_of_p(value) >= 0; }

Dictionaries build_dictionaries(std::span<const Score> corpus) {
  if (corpus.empty()) throw EmptyCorpus();
  std::set<int> dts{0};
  std::set<int> ts;
  std::set<int> ps;
  for (const auto& score : corpus) {
    for (const auto& note : score.notes) {
      dts.insert(note.dt);
      ts.insert(note.t);
      ps.insert(note.pitch);
    }
  }
  Dictionaries dicts;
  dicts.dt_table.assign(dts.begin(), dts.end());
  dicts.t_table.assign(ts.begin(), ts.end());
  dicts.p_table.assign(ps.begin(), ps.end());
  return dicts;
}

Dictionaries build_dictionaries_augmented(std::span<const Score> corpus) {
  Dictionaries dicts = build_dictionaries(corpus);
  if (dicts.p_table.empty()) return dicts;
  const int lo = dicts.p_table.front();
  const int hi = dicts.p_table.back();
  std::set<int> ps(dicts.p_table.begin(), dicts.p_table.end());
  for (const auto& score : corpus) {
    if (score.notes.empty()) continue;
    int mn = 128, mx = -1;
    for (const auto& note : score.notes) {
      mn = std::min(mn, note.pitch);
      mx = std::max(mx, note.pitch);
    }
    for (int k = lo - mn; k <= hi - mx; ++k) {
      for (const auto& note : score.notes) ps.insert(note.pitch + k);
    }
  }
  dicts.p_table.assign(ps.begin(), ps.end());
  return dicts;
}

EncodedScore encode(const Score& score, const Dictionaries& dicts) {
  EncodedScore enc;
  const std::size_t n = score.notes.size() + 2;
  enc.dt.reserve(n);
  enc.t.reserve(n);
  enc.p.reserve(n);
  enc.dt.push_back(dicts.boundary_dt());
  enc.t.push_back(dicts.boundary_t());
  enc.p.push_back(dicts.boundary_p());
  for (const auto& note : score.notes) {
    const int i_dt = dicts.index_of_dt(note.dt);
    if (i_dt < 0) throw UnknownSymbol("dT", note.dt);
    const int i_t = dicts.index_of_t(note.t);
    if (i_t < 0) throw UnknownSymbol("T", note.t);
    const int i_p = dicts.index_of_p(note.pitch);
    if (i_p < 0) throw UnknownSymbol("P", note.pitch);
    enc.dt.push_back(i_dt);
    enc.t.push_back(i_t);
    enc.p.push_back(i_p);
  }
  enc.dt.push_back(dicts.boundary_dt());
  enc.t.push_back(dicts.boundary_t());
  enc.p.push_back(dicts.boundary_p());
  return enc;
}

Score decode(const EncodedScore& enc, const Dictionaries& dicts) {
  const std::size_t n = enc.length();
  if (enc.t.size() != n || enc.p.size() != n)
    throw MalformedEncoding("feature sequences have different lengths");
  if (n < 2) throw MalformedEncoding("sequence shorter than two positions");
  auto expect_boundary = [&](std::size_t pos) {
    return enc.dt[pos] == dicts.boundary_dt() && enc.t[pos] == dicts.boundary_t() &&
           enc.p[pos] == dicts.boundary_p();
  };
  if (!expect_boundary(0) || !expect_boundary(n - 1))
    throw MalformedEncoding("missing boundary at sequence ends");
  Score score;
  score.source = "decoded";
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (enc.dt[i] < 0 || enc.dt[i] >= dicts.size_dt() || enc.t[i] < 0 ||
        enc.t[i] >= dicts.size_t_() || enc.p[i] < 0 || enc.p[i] >= dicts.size_p())
      throw MalformedEncoding("index out of range at position " + std::to_string(i));
    if (enc.dt[i] == dicts.boundary_dt() || enc.t[i] == dicts.boundary_t() ||
        enc.p[i] == dicts.boundary_p())
      throw MalformedEncoding("interior boundary at position " + std::to_string(i));
    NoteEvent ev;
    ev.dt = dicts.dt_table[static_cast<std::size_t>(enc.dt[i])];
    ev.t = dicts.t_table[static_cast<std::size_t>(enc.t[i])];
    ev.pitch = dicts.p_table[static_cast<std::size_t>(enc.p[i])];
    score.notes.push_back(ev);
  }
  return score;
}

std::vector<int> feasible_offsets(const Score& score, const Dictionaries& dicts) {
  if (dicts.p_table.empty()) throw ScoreError("empty pitch table");
  if (score.notes.empty()) return {0};
  int mn = 128, mx = -1;
  for (const auto& note : score.notes) {
    mn = std::min(mn, note.pitch);
    mx = std::max(mx, note.pitch);
  }
  std::vector<int> feasible;
  for (int k = dicts.min_pitch() - mn; k <= dicts.max_pitch() - mx; ++k) {
    bool ok = true;
    for (const auto& note : score.notes) {
      if (!dicts.has_pitch(note.pitch + k)) {
        ok = false;
        break;
      }
    }
    if (ok) feasible.push_back(k);
  }
  if (feasible.empty()) throw NoFeasibleOffset();
  return feasible;
}

Score transpose_random(const Score& score, const Dictionaries& dicts, Rng& rng) {
  const std::vector<int> offsets = feasible_offsets(score, dicts);
  const auto pick = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(offsets.size()) - 1));
  const int k = offsets[pick];
  Score out = score;
  for (auto& note : out.notes) note.pitch += k;
  return out;
}

std::string score_to_text(const Score& score) {
  std::ostringstream os;
  for (const auto& note : score.notes) {
    os << Rat(note.dt, 48).to_string() << ' ' << Rat(note.t, 48).to_string() << ' ' << note.pitch
       << '\n';
  }
  return os.str();
}

namespace {

Rat parse_rat(const std::string& token) {
  const auto slash = token.find('/');
  if (slash == std::string::npos) return Rat(std::stoll(token));
  return Rat(std::stoll(token.substr(0, slash)), std::stoll(token.substr(slash + 1)));
}

}  // namespace

Score score_from_text(const std::string& text, const std::string& name) {
  Score score;
  score.name = name;
  score.source = "text";
  std::istringstream is(text);
  std::string dt_tok, t_tok, p_tok;
  while (is >> dt_tok >> t_tok >> p_tok) {
    const Rat dt = parse_rat(dt_tok);
    const Rat t = parse_rat(t_tok);
    NoteEvent ev;
    ev.dt = static_cast<int>(48 * dt.num / dt.den);
    ev.t = static_cast<int>(48 * t.num / t.den);
    ev.pitch = std::stoi(p_tok);
    score.notes.push_back(ev);
  }
  return score;
}

}  // namespace bachprop
