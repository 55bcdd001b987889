#include "bachprop/sample.hpp"

#include <cmath>

#include "bachprop/nn.hpp"
#include "doctest.h"

using namespace bachprop;
using namespace bachprop::model;
using namespace bachprop::sample;

namespace {

Dictionaries tiny_dicts() {
  Dictionaries dicts;
  dicts.dt_table = {0, 24};
  dicts.t_table = {24, 48};
  dicts.p_table = {60, 64};
  return dicts;
}

ModelDims toy_dims() {
  ModelDims dims;
  dims.gru_width = 8;
  dims.mlp_width = 8;
  dims.polydac_widths = {4, 5, 6};
  return dims;
}

void set_boundary_bias(ModelParams& mp, double value) {
  auto poke = [&](const HeadRefs& head, int index) {
    mp.theta[head.out.b.off + static_cast<std::size_t>(index)] = value;
  };
  poke(mp.arch.head_dt, mp.dicts.boundary_dt());
  poke(mp.arch.head_t, mp.dicts.boundary_t());
  poke(mp.arch.head_p, mp.dicts.boundary_p());
}

}  // namespace

TEST_CASE("sample_categorical is greedy below the temperature floor") {
  Rng rng(3);
  const std::vector<double> logits{0.2, 1.7, -0.4};
  for (int i = 0; i < 50; ++i) {
    CHECK(sample_categorical(logits, 1e-7, rng) == 1);
  }
}

TEST_CASE("sample_categorical matches known frequencies under chi-square") {
  // heads fixed at probabilities (0.1, 0.2, 0.7)
  const std::vector<double> logits{std::log(0.1), std::log(0.2), std::log(0.7)};
  Rng rng(42);
  long counts[3] = {0, 0, 0};
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    counts[sample_categorical(logits, 1.0, rng)] += 1;
  }
  const double expected[3] = {1000.0, 2000.0, 7000.0};
  double chi2 = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double diff = static_cast<double>(counts[k]) - expected[k];
    chi2 += diff * diff / expected[k];
  }
  CHECK(chi2 < 13.8155);  // chi-square df=2 at significance 0.001
}

TEST_CASE("entropy is non-decreasing in temperature on fixed logits") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(6);
    for (auto& x : v) x = rng.uniform(-4.0, 4.0);
    const double t1 = std::exp(rng.uniform(std::log(0.05), std::log(5.0)));
    const double t2 = t1 * rng.uniform(1.0, 4.0);
    const double h1 = nn::entropy(nn::softmax(v, t1));
    const double h2 = nn::entropy(nn::softmax(v, t2));
    CHECK(h1 <= h2 + 1e-12);
  }
}

TEST_CASE("generate_score returns empty when the boundary is drawn immediately") {
  auto mp = build_variant(Variant::bachprop, tiny_dicts(), toy_dims());
  set_boundary_bias(mp, 50.0);  // boundary carries ~all probability mass
  SamplerConfig cfg;
  Rng rng(1);
  const Score score = generate_score(mp, cfg, rng);
  CHECK(score.notes.empty());
}

TEST_CASE("generate_score honors the note cap when the boundary is suppressed") {
  auto mp = build_variant(Variant::bachprop, tiny_dicts(), toy_dims());
  Rng rng(5);
  init_params(mp, rng);
  set_boundary_bias(mp, -1e9);
  SamplerConfig cfg;
  cfg.max_notes = 5;
  Rng gen_rng(11);
  const Score score = generate_score(mp, cfg, gen_rng);
  CHECK(score.notes.size() == 5);
}

TEST_CASE("generated values always come from the dictionaries") {
  for (const auto kind : {Variant::bachprop, Variant::indepbp, Variant::mlp, Variant::polydac}) {
    auto mp = build_variant(kind, tiny_dicts(), toy_dims());
    Rng rng(7);
    init_params(mp, rng);
    SamplerConfig cfg;
    cfg.max_notes = 40;
    Rng gen_rng(13);
    for (int i = 0; i < 5; ++i) {
      const Score score = generate_score(mp, cfg, gen_rng);
      CHECK_NOTHROW(encode(score, mp.dicts));
      for (const auto& note : score.notes) {
        CHECK(mp.dicts.index_of_dt(note.dt) >= 0);
        CHECK(mp.dicts.index_of_t(note.t) >= 0);
        CHECK(mp.dicts.has_pitch(note.pitch));
      }
    }
  }
}

TEST_CASE("generation is reproducible bit-exactly under a fixed seed") {
  auto mp = build_variant(Variant::polydac, tiny_dicts(), toy_dims());
  Rng rng(19);
  init_params(mp, rng);
  SamplerConfig cfg;
  cfg.temperature = 0.9;
  cfg.max_notes = 30;
  Rng a(77), b(77);
  for (int i = 0; i < 4; ++i) {
    const Score sa = generate_score(mp, cfg, a);
    const Score sb = generate_score(mp, cfg, b);
    CHECK(sa == sb);
  }
}

TEST_CASE("generated simultaneous groups are in canonical pitch order") {
  auto mp = build_variant(Variant::bachprop, tiny_dicts(), toy_dims());
  Rng rng(23);
  init_params(mp, rng);
  SamplerConfig cfg;
  cfg.max_notes = 60;
  cfg.temperature = 1.5;
  Rng gen_rng(3);
  for (int i = 0; i < 10; ++i) {
    const Score score = generate_score(mp, cfg, gen_rng);
    for (std::size_t n = 1; n < score.notes.size(); ++n) {
      if (score.notes[n].dt == 0) {
        CHECK(score.notes[n - 1].pitch <= score.notes[n].pitch);
      }
    }
  }
}
