#include "bachprop/midi.hpp"

#include <algorithm>
#include <deque>
#include <map>

namespace bachprop::midi {

namespace {

class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint8_t u8(const char* what) {
    if (pos_ >= bytes_.size()) throw TruncatedChunk(what);
    return bytes_[pos_++];
  }

  std::uint8_t peek(const char* what) const {
    if (pos_ >= bytes_.size()) throw TruncatedChunk(what);
    return bytes_[pos_];
  }

  std::uint16_t u16(const char* what) {
    const std::uint16_t hi = u8(what);
    return static_cast<std::uint16_t>(hi << 8 | u8(what));
  }

  std::uint32_t u32(const char* what) {
    const std::uint32_t hi = u16(what);
    return hi << 16 | u16(what);
  }

  std::uint32_t vlq(const char* what) {
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t b = u8(what);
      value = value << 7 | (b & 0x7f);
      if ((b & 0x80) == 0) return value;
    }
    throw MalformedHeader("variable-length quantity longer than four bytes");
  }

  void skip(std::size_t n, const char* what) {
    if (remaining() < n) throw TruncatedChunk(what);
    pos_ += n;
  }

  bool expect_tag(const char* tag) {
    if (remaining() < 4) return false;
    for (int i = 0; i < 4; ++i) {
      if (bytes_[pos_ + static_cast<std::size_t>(i)] != static_cast<std::uint8_t>(tag[i]))
        return false;
    }
    pos_ += 4;
    return true;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (remaining() < n) throw TruncatedChunk(what);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// data byte count for channel messages, by high status nibble
int channel_data_bytes(std::uint8_t status) {
  switch (status & 0xf0) {
    case 0xc0:  // program change
    case 0xd0:  // channel pressure
      return 1;
    default:
      return 2;
  }
}

std::vector<MidiMessage> parse_track(std::span<const std::uint8_t> data) {
  ByteReader in(data);
  std::vector<MidiMessage> track;
  std::uint8_t running_status = 0;
  while (in.remaining() > 0) {
    MidiMessage msg;
    msg.delta_ticks = in.vlq("track event delta");
    std::uint8_t status = in.peek("track event status");
    if (status < 0x80) {
      if (running_status == 0) throw MalformedHeader("data byte without running status");
      status = running_status;
    } else {
      in.u8("status");
    }
    if (status == 0xff) {
      running_status = 0;  // meta events cancel running status
      in.u8("meta type");
      const std::uint32_t len = in.vlq("meta length");
      in.skip(len, "meta data");
      track.push_back(msg);  // kind Other, keeps the delta on the timeline
      continue;
    }
    if (status == 0xf0 || status == 0xf7) {
      running_status = 0;
      const std::uint32_t len = in.vlq("sysex length");
      in.skip(len, "sysex data");
      track.push_back(msg);
      continue;
    }
    running_status = status;
    const std::uint8_t kind_nibble = status & 0xf0;
    msg.channel = status & 0x0f;
    if (kind_nibble == 0x90 || kind_nibble == 0x80) {
      msg.pitch = in.u8("note pitch") & 0x7f;
      msg.velocity = in.u8("note velocity") & 0x7f;
      if (kind_nibble == 0x80 || msg.velocity == 0) {
        msg.kind = MessageKind::NoteOff;
      } else {
        msg.kind = MessageKind::NoteOn;
      }
    } else {
      for (int i = 0; i < channel_data_bytes(status); ++i) in.u8("channel data");
      msg.kind = MessageKind::Other;
    }
    track.push_back(msg);
  }
  return track;
}

}  // namespace

MidiSong parse_midi(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (!in.expect_tag("MThd")) throw MalformedHeader("missing MThd magic");
  const std::uint32_t header_len = in.u32("header length");
  if (header_len < 6) throw MalformedHeader("header chunk shorter than six bytes");
  const std::uint16_t format = in.u16("format");
  const std::uint16_t ntrks = in.u16("track count");
  const std::uint16_t division = in.u16("division");
  in.skip(header_len - 6, "header padding");

  if (format > 1) throw UnsupportedFormat("SMF format " + std::to_string(format));
  if (division & 0x8000) throw UnsupportedFormat("SMPTE division");
  if (division == 0) throw MalformedHeader("zero division");

  MidiSong song;
  song.division = division;
  while (song.tracks.size() < ntrks && in.remaining() > 0) {
    if (in.expect_tag("MTrk")) {
      const std::uint32_t len = in.u32("track length");
      song.tracks.push_back(parse_track(in.take(len, "track data")));
    } else {
      // alien chunk: skip tag + declared length
      in.skip(4, "chunk tag");
      const std::uint32_t len = in.u32("chunk length");
      in.skip(len, "chunk data");
    }
  }
  if (song.tracks.size() < ntrks) throw TruncatedChunk("fewer tracks than header declares");
  return song;
}

namespace {

struct AbsEvent {
  std::int64_t tick;
  MessageKind kind;
  int pitch;
  int channel;
  int velocity;
};

}  // namespace

std::vector<TimedNote> extract_notes(const MidiSong& song) {
  std::vector<AbsEvent> events;
  std::int64_t last_tick = 0;
  for (const auto& track : song.tracks) {
    std::int64_t tick = 0;
    for (const auto& msg : track) {
      tick += msg.delta_ticks;
      last_tick = std::max(last_tick, tick);
      if (msg.kind == MessageKind::Other) continue;
      events.push_back({tick, msg.kind, msg.pitch, msg.channel, msg.velocity});
    }
  }
  // Canonical merge order: OFF before ON at equal ticks, so a re-struck pitch
  // closes the old note first. This makes the result independent of track
  // order.
  std::sort(events.begin(), events.end(), [](const AbsEvent& a, const AbsEvent& b) {
    if (a.tick != b.tick) return a.tick < b.tick;
    const int ra = a.kind == MessageKind::NoteOff ? 0 : 1;
    const int rb = b.kind == MessageKind::NoteOff ? 0 : 1;
    if (ra != rb) return ra < rb;
    if (a.pitch != b.pitch) return a.pitch < b.pitch;
    if (a.channel != b.channel) return a.channel < b.channel;
    return a.velocity < b.velocity;
  });

  std::vector<TimedNote> notes;
  std::map<int, std::deque<std::size_t>> open;  // pitch -> indexes of open notes, FIFO
  for (const auto& ev : events) {
    if (ev.kind == MessageKind::NoteOn) {
      open[ev.pitch].push_back(notes.size());
      notes.push_back({ev.tick, 0, ev.pitch});
    } else {
      auto it = open.find(ev.pitch);
      if (it == open.end() || it->second.empty()) continue;  // stray OFF
      TimedNote& note = notes[it->second.front()];
      it->second.pop_front();
      note.duration = std::max<std::int64_t>(1, ev.tick - note.onset);
    }
  }
  for (auto& [pitch, queue] : open) {
    for (const std::size_t idx : queue) {
      notes[idx].duration = std::max<std::int64_t>(1, last_tick - notes[idx].onset);
    }
  }
  std::sort(notes.begin(), notes.end(), [](const TimedNote& a, const TimedNote& b) {
    if (a.onset != b.onset) return a.onset < b.onset;
    if (a.pitch != b.pitch) return a.pitch < b.pitch;
    return a.duration < b.duration;
  });
  return notes;
}

std::vector<RationalNote> ticks_to_quarters(std::span<const TimedNote> notes, int division) {
  if (division <= 0) throw MidiError("division must be positive");
  std::vector<RationalNote> out;
  out.reserve(notes.size());
  for (const auto& note : notes) {
    out.push_back({Rat(note.onset, division), Rat(note.duration, division), note.pitch});
  }
  return out;
}

namespace {

void append_vlq(std::vector<std::uint8_t>& out, std::int64_t value) {
  std::uint8_t buf[5];
  int n = 0;
  auto v = static_cast<std::uint64_t>(value);
  do {
    buf[n++] = static_cast<std::uint8_t>(v & 0x7f);
    v >>= 7;
  } while (v != 0);
  for (int i = n - 1; i >= 0; --i) {
    out.push_back(static_cast<std::uint8_t>(buf[i] | (i > 0 ? 0x80 : 0x00)));
  }
}

void append_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  append_u16(out, static_cast<std::uint16_t>(v >> 16));
  append_u16(out, static_cast<std::uint16_t>(v & 0xffff));
}

std::int64_t atoms_to_ticks(int atoms, int division, const char* what) {
  const std::int64_t scaled = static_cast<std::int64_t>(atoms) * division;
  if (scaled % DurationGrid::atoms_per_quarter != 0)
    throw NonRepresentableDuration(std::string(what) + " of " + std::to_string(atoms) +
                                   " atoms at division " + std::to_string(division));
  return scaled / DurationGrid::atoms_per_quarter;
}

}  // namespace

std::vector<std::uint8_t> write_midi(const Score& score, int division) {
  if (division <= 0 || division > 0x7fff) throw MidiError("division out of range");

  struct OutEvent {
    std::int64_t tick;
    bool is_on;
    int pitch;
  };
  std::vector<OutEvent> events;
  std::int64_t onset = 0;
  for (const auto& note : score.notes) {
    onset += atoms_to_ticks(note.dt, division, "time-shift");
    const std::int64_t dur = atoms_to_ticks(note.t, division, "duration");
    events.push_back({onset, true, note.pitch});
    events.push_back({onset + dur, false, note.pitch});
  }
  std::sort(events.begin(), events.end(), [](const OutEvent& a, const OutEvent& b) {
    if (a.tick != b.tick) return a.tick < b.tick;
    if (a.is_on != b.is_on) return !a.is_on;  // offs first
    return a.pitch < b.pitch;
  });

  std::vector<std::uint8_t> track;
  std::int64_t cursor = 0;
  for (const auto& ev : events) {
    append_vlq(track, ev.tick - cursor);
    cursor = ev.tick;
    track.push_back(ev.is_on ? 0x90 : 0x80);
    track.push_back(static_cast<std::uint8_t>(ev.pitch & 0x7f));
    track.push_back(ev.is_on ? 0x40 : 0x00);
  }
  // end of track
  append_vlq(track, 0);
  track.push_back(0xff);
  track.push_back(0x2f);
  track.push_back(0x00);

  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'M', 'T', 'h', 'd'});
  append_u32(out, 6);
  append_u16(out, 0);  // format 0
  append_u16(out, 1);  // one track
  append_u16(out, static_cast<std::uint16_t>(division));
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  append_u32(out, static_cast<std::uint32_t>(track.size()));
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

}  // namespace bachprop::midi
