#include "bachprop/metrics.hpp"

#include <cmath>

#include "doctest.h"
#include "support/naive_novelty.hpp"

using namespace bachprop;
using namespace bachprop::metrics;

namespace {

Score make_score(std::vector<NoteEvent> notes) {
  Score s;
  s.notes = std::move(notes);
  return s;
}

Score random_score(Rng& rng, int max_notes, int alphabet) {
  Score s;
  const auto n = rng.uniform_int(1, max_notes);
  for (int i = 0; i < n; ++i) {
    s.notes.push_back({static_cast<int>(rng.uniform_int(0, 1)) * 24,
                       24 * (1 + static_cast<int>(rng.uniform_int(0, alphabet - 1))),
                       60 + static_cast<int>(rng.uniform_int(0, alphabet - 1))});
  }
  return s;
}

}  // namespace

TEST_CASE("song_novelty is zero against a reference containing the song") {
  const Score song = make_score({{0, 24, 60}, {24, 24, 64}, {0, 24, 67}, {24, 48, 60}});
  const std::vector<Score> reference{song, make_score({{0, 48, 50}})};
  for (const int m : {2, 3, 4}) {
    CHECK(song_novelty(song, m, reference) == 0.0);
  }
}

TEST_CASE("song_novelty is one against a disjoint-alphabet reference") {
  const Score song = make_score({{0, 24, 60}, {24, 24, 64}, {0, 24, 67}});
  const std::vector<Score> reference{make_score({{0, 24, 80}, {24, 24, 81}, {0, 24, 82}})};
  CHECK(song_novelty(song, 2, reference) == 1.0);
  CHECK(song_novelty(song, 3, reference) == 1.0);
  CHECK_THROWS_AS(song_novelty(song, 4, reference), SongTooShort);
}

TEST_CASE("indexed novelty equals the naive scan on random corpora") {
  Rng rng(101);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<Score> reference;
    const auto nref = rng.uniform_int(1, 4);
    for (int i = 0; i < nref; ++i) reference.push_back(random_score(rng, 20, 3));
    const Score song = random_score(rng, 12, 3);
    for (const int m : {2, 3, 4}) {
      if (static_cast<int>(song.notes.size()) < m) continue;
      CHECK(song_novelty(song, m, reference) ==
            bachprop::testing::naive_song_novelty(song, m, reference));
    }
  }
}

TEST_CASE("per-position novelty is monotone in the pattern size") {
  Rng rng(113);
  const std::vector<int> sizes{2, 3, 4, 5};
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Score> reference;
    for (int i = 0; i < 3; ++i) reference.push_back(random_score(rng, 25, 2));
    const Score song = random_score(rng, 20, 2);
    const PatternIndex index(reference, sizes);
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
      const int m = sizes[k];
      if (static_cast<int>(song.notes.size()) < m + 1) continue;
      const auto small = pattern_novelty(song, m, index);
      const auto big = pattern_novelty(song, m + 1, index);
      for (std::size_t pos = 0; pos < big.size(); ++pos) {
        if (small[pos]) CHECK(big[pos]);
      }
    }
  }
}

TEST_CASE("novelty is invariant under a consistent relabeling") {
  Rng rng(127);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Score> reference;
    for (int i = 0; i < 3; ++i) reference.push_back(random_score(rng, 15, 3));
    const Score song = random_score(rng, 10, 3);
    if (song.notes.size() < 2) continue;
    auto shift = [](Score s) {
      for (auto& note : s.notes) note.pitch += 3;
      return s;
    };
    std::vector<Score> shifted_ref;
    for (const auto& r : reference) shifted_ref.push_back(shift(r));
    CHECK(song_novelty(song, 2, reference) == song_novelty(shift(song), 2, shifted_ref));
  }
}

TEST_CASE("novelty_profile of a corpus against itself is all zeros") {
  Rng rng(131);
  std::vector<Score> corpus;
  for (int i = 0; i < 4; ++i) corpus.push_back(random_score(rng, 15, 3));
  const std::vector<int> sizes{2, 3, 4};
  const NoveltyProfile profile = novelty_profile(corpus, corpus, sizes);
  for (const auto& scores : profile.scores) {
    for (const double v : scores) CHECK(v == 0.0);
  }

  const std::vector<Score> single{corpus[0]};
  const int full = static_cast<int>(corpus[0].notes.size());
  const std::vector<int> one_size{full};
  const NoveltyProfile p1 = novelty_profile(single, single, one_size);
  REQUIRE(p1.scores.size() == 1);
  REQUIRE(p1.scores[0].size() == 1);
  CHECK(p1.scores[0][0] == 0.0);
}

TEST_CASE("auto_novelty handles identical, disjoint and random corpora") {
  const Score a = make_score({{0, 24, 60}, {24, 24, 64}, {0, 24, 67}});
  const std::vector<int> sizes{2, 3};

  const std::vector<Score> twins{a, a};
  const NoveltyProfile same = auto_novelty(twins, sizes);
  for (const auto& scores : same.scores) {
    for (const double v : scores) CHECK(v == 0.0);
  }

  const Score b = make_score({{0, 24, 80}, {24, 24, 81}, {0, 24, 82}});
  const std::vector<Score> disjoint{a, b};
  const NoveltyProfile diff = auto_novelty(disjoint, sizes);
  for (const auto& scores : diff.scores) {
    for (const double v : scores) CHECK(v == 1.0);
  }

  CHECK_THROWS_AS(auto_novelty(std::vector<Score>{a}, sizes), CorpusTooSmall);

  Rng rng(137);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Score> corpus;
    for (int i = 0; i < 5; ++i) corpus.push_back(random_score(rng, 12, 2));
    const NoveltyProfile profile = auto_novelty(corpus, sizes);
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      const int m = sizes[k];
      std::size_t idx = 0;
      for (int s = 0; s < 5; ++s) {
        if (static_cast<int>(corpus[static_cast<std::size_t>(s)].notes.size()) < m) continue;
        CHECK(profile.scores[k][idx] ==
              bachprop::testing::naive_song_novelty(corpus[static_cast<std::size_t>(s)], m,
                                                    corpus, s));
        ++idx;
      }
    }
  }
}

TEST_CASE("local_histograms matches hand counts") {
  SUBCASE("single note") {
    const std::vector<Score> corpus{make_score({{0, 48, 60}})};
    const LocalHistograms h = local_histograms(corpus);
    CHECK(h.dt.freq.at(0) == 1.0);
    CHECK(h.t.freq.at(48) == 1.0);
    CHECK(h.chord_intervals.freq.empty());
    CHECK(h.all_intervals.freq.empty());
  }
  SUBCASE("chord then melody note") {
    // C4 and E4 together, then G4
    const std::vector<Score> corpus{make_score({{0, 48, 60}, {0, 48, 64}, {48, 48, 67}})};
    const LocalHistograms h = local_histograms(corpus);
    CHECK(h.chord_intervals.freq.at(4) == 1.0);
    CHECK(h.all_intervals.freq.at(4) == 0.5);
    CHECK(h.all_intervals.freq.at(3) == 0.5);
  }
  SUBCASE("frequencies sum to one") {
    Rng rng(139);
    std::vector<Score> corpus;
    for (int i = 0; i < 5; ++i) corpus.push_back(random_score(rng, 20, 4));
    const LocalHistograms h = local_histograms(corpus);
    for (const auto* report : {&h.dt, &h.t, &h.all_intervals}) {
      double sum = 0.0;
      for (const auto& [value, freq] : report->freq) sum += freq;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(local_histograms(std::vector<Score>{}), EmptyCorpus);
}

TEST_CASE("song_lengths sums shifts plus the last-sounding duration") {
  const std::vector<Score> corpus{
      make_score({{0, 48, 60}}),                 // one quarter -> bin 1
      make_score({{0, 48, 60}, {48, 48, 64}}),   // two quarters -> bin 2
  };
  const HistogramReport h = song_lengths(corpus);
  CHECK(h.freq.at(1) == 0.5);
  CHECK(h.freq.at(2) == 0.5);
  CHECK_THROWS_AS(song_lengths(std::vector<Score>{}), EmptyCorpus);
}

TEST_CASE("bootstrap basics") {
  const Score s = make_score({{0, 24, 60}, {24, 24, 64}});
  const HistogramMetric dt_metric = [](std::span<const Score> corpus) {
    return local_histograms(corpus).dt;
  };

  SUBCASE("identical songs have zero deviation") {
    const std::vector<Score> corpus{s, s, s, s};
    Rng rng(5);
    const BootstrapResult r = bootstrap(corpus, dt_metric, 0.5, 10, rng);
    for (const auto& [value, dev] : r.stddev) CHECK(dev == 0.0);
  }

  SUBCASE("fixed seed reproduces the report") {
    Rng rng(149);
    std::vector<Score> corpus;
    for (int i = 0; i < 6; ++i) corpus.push_back(random_score(rng, 10, 3));
    Rng a(7), b(7);
    const BootstrapResult ra = bootstrap(corpus, dt_metric, 0.5, 10, a);
    const BootstrapResult rb = bootstrap(corpus, dt_metric, 0.5, 10, b);
    CHECK(ra.mean == rb.mean);
    CHECK(ra.stddev == rb.stddev);
  }

  SUBCASE("each repetition draws ceil(fraction * S) distinct songs") {
    std::vector<Score> corpus;
    for (int i = 0; i < 4; ++i) {
      corpus.push_back(make_score({{0, 24, 60 + i}}));  // four distinguishable songs
    }
    int calls = 0;
    const HistogramMetric probe = [&](std::span<const Score> subset) {
      ++calls;
      CHECK(subset.size() == 2);
      CHECK_FALSE(subset[0] == subset[1]);
      return local_histograms(subset).dt;
    };
    Rng rng(11);
    bootstrap(corpus, probe, 0.5, 10, rng);
    CHECK(calls == 10);
  }

  Rng spare(1);
  CHECK_THROWS_AS(bootstrap(std::vector<Score>{s}, dt_metric, 0.5, 10, spare), CorpusTooSmall);
}

TEST_CASE("histogram_distance is a total-variation metric") {
  HistogramReport a, b;
  a.freq = {{0, 0.6}, {1, 0.4}};
  b.freq = {{0, 0.4}, {1, 0.6}};
  CHECK(histogram_distance(a, a) == 0.0);
  CHECK(histogram_distance(a, b) == doctest::Approx(0.2).epsilon(1e-12));

  HistogramReport c, d;
  c.freq = {{0, 0.5}, {1, 0.5}};
  d.freq = {{5, 1.0}};
  CHECK(histogram_distance(c, d) == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(151);
  for (int trial = 0; trial < 50; ++trial) {
    auto random_hist = [&]() {
      HistogramReport h;
      double total = 0.0;
      std::vector<double> w(4);
      for (auto& x : w) {
        x = rng.uniform(0.01, 1.0);
        total += x;
      }
      for (int i = 0; i < 4; ++i) {
        h.freq[rng.uniform_int(0, 6)] += w[static_cast<std::size_t>(i)] / total;
      }
      return h;
    };
    const HistogramReport x = random_hist(), y = random_hist(), z = random_hist();
    CHECK(histogram_distance(x, y) == doctest::Approx(histogram_distance(y, x)));
    CHECK(histogram_distance(x, z) <=
          histogram_distance(x, y) + histogram_distance(y, z) + 1e-12);
    CHECK(histogram_distance(x, y) >= 0.0);
    CHECK(histogram_distance(x, y) <= 1.0 + 1e-12);
  }
}

TEST_CASE("reports serialize to csv and json") {
  HistogramReport h;
  h.freq = {{0, 0.25}, {24, 0.75}};
  h.boot_mean = {{0, 0.3}, {24, 0.7}};
  h.boot_std = {{0, 0.01}, {24, 0.02}};
  const std::string csv = histogram_csv(h);
  CHECK(csv.find("value,frequency,boot_mean,boot_std\n") == 0);
  CHECK(csv.find("0,0.25,") != std::string::npos);
  CHECK(csv.find("24,0.75,") != std::string::npos);

  NoveltyProfile profile;
  profile.sizes = {2, 3};
  profile.scores = {{0.0, 0.5, 1.0}, {1.0}};
  const std::string json = novelty_json(profile);
  CHECK(json.find("\"pattern_sizes\": [2, 3]") != std::string::npos);
  CHECK(json.find("\"median\": 0.5") != std::string::npos);
}
