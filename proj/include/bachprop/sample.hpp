#ifndef BACHPROP_SAMPLE_HPP
#define BACHPROP_SAMPLE_HPP

#include <cstdint>

#include "bachprop/model.hpp"
#include "bachprop/rng.hpp"
#include "bachprop/score.hpp"

namespace bachprop::sample {

struct SamplerConfig {
  double temperature = 1.0;
  int max_notes = 1000;
  std::uint64_t seed = 0;
};

// Draws an index from softmax(logits / temperature); temperatures below 1e-6
// collapse to argmax.
int sample_categorical(std::span<const double> logits, double temperature, Rng& rng);

struct SampledNote {
  int dt_idx = 0;
  int t_idx = 0;
  int p_idx = 0;
};

// One big sampling step: dT, then T given dT, then P given both; the state is
// advanced by the sampled triple.
SampledNote sample_note(const model::ModelParams& params, model::HiddenState& state,
                        const SamplerConfig& cfg, Rng& rng);

// Seeds the state with the boundary note and samples until a triple contains
// the boundary in any feature (dropped) or max_notes is reached. Simultaneous
// groups of the result are put in canonical pitch order.
Score generate_score(const model::ModelParams& params, const SamplerConfig& cfg, Rng& rng);

}  // namespace bachprop::sample

#endif
