#ifndef BACHPROP_MIDI_HPP
#define BACHPROP_MIDI_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bachprop/score.hpp"

namespace bachprop::midi {

struct MidiError : std::runtime_error {
  explicit MidiError(const std::string& msg) : std::runtime_error(msg) {}
};
struct MalformedHeader : MidiError {
  explicit MalformedHeader(const std::string& msg) : MidiError("malformed header: " + msg) {}
};
struct UnsupportedFormat : MidiError {
  explicit UnsupportedFormat(const std::string& msg) : MidiError("unsupported format: " + msg) {}
};
struct TruncatedChunk : MidiError {
  explicit TruncatedChunk(const std::string& msg) : MidiError("truncated chunk: " + msg) {}
};
struct NonRepresentableDuration : MidiError {
  explicit NonRepresentableDuration(const std::string& msg)
      : MidiError("non-representable duration: " + msg) {}
};

enum class MessageKind : std::uint8_t { NoteOn, NoteOff, Other };

struct MidiMessage {
  std::uint32_t delta_ticks = 0;
  MessageKind kind = MessageKind::Other;
  std::uint8_t channel = 0;
  std::uint8_t pitch = 0;
  std::uint8_t velocity = 0;
};

struct MidiSong {
  int division = 0;  // ticks per quarter note
  std::vector<std::vector<MidiMessage>> tracks;
};

struct TimedNote {
  std::int64_t onset = 0;     // ticks
  std::int64_t duration = 0;  // ticks, >= 1
  int pitch = 0;
};

// Decodes an SMF byte stream: format 0 and 1, running status, variable-length
// deltas. Format 2 and SMPTE divisions are rejected.
MidiSong parse_midi(std::span<const std::uint8_t> bytes);

// Merges all tracks onto one absolute timeline and pairs each ON event
// (note-on, velocity > 0) with the first subsequent OFF event of the same
// pitch on any channel; note-on velocity 0 counts as OFF. Unmatched ONs close
// at the last event time. Output sorted by (onset, pitch, duration).
std::vector<TimedNote> extract_notes(const MidiSong& song);

// Tick times to exact quarter-note rationals.
std::vector<RationalNote> ticks_to_quarters(std::span<const TimedNote> notes, int division);

// Serializes a quantized score as a single-track format-0 file at the given
// division. All shifts and durations must be exact multiples of 1/division
// quarter (always true when 48 divides division).
std::vector<std::uint8_t> write_midi(const Score& score, int division);

}  // namespace bachprop::midi

#endif
