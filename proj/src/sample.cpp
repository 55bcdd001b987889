#include "bachprop/sample.hpp"

#include "bachprop/nn.hpp"

namespace bachprop::sample {

int sample_categorical(std::span<const double> logits, double temperature, Rng& rng) {
  if (temperature < 1e-6) return nn::argmax(logits);
  const std::vector<double> p = nn::softmax(logits, temperature);
  const double u = rng.next_double();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(p.size()) - 1;  // u landed in rounding slack
}

SampledNote sample_note(const model::ModelParams& params, model::HiddenState& state,
                        const SamplerConfig& cfg, Rng& rng) {
  SampledNote note;
  note.dt_idx = sample_categorical(model::dt_logits(params, state), cfg.temperature, rng);
  note.t_idx =
      sample_categorical(model::t_logits(params, state, note.dt_idx), cfg.temperature, rng);
  note.p_idx = sample_categorical(model::p_logits(params, state, note.dt_idx, note.t_idx),
                                  cfg.temperature, rng);
  model::forward_note(params, state, note.dt_idx, note.t_idx, note.p_idx);
  return note;
}

Score generate_score(const model::ModelParams& params, const SamplerConfig& cfg, Rng& rng) {
  const Dictionaries& dicts = params.dicts;
  model::HiddenState state;
  model::reset_state(params, state);
  model::forward_note(params, state, dicts.boundary_dt(), dicts.boundary_t(),
                      dicts.boundary_p());
  Score score;
  score.source = "generated";
  for (int n = 0; n < cfg.max_notes; ++n) {
    const SampledNote s = sample_note(params, state, cfg, rng);
    if (s.dt_idx == dicts.boundary_dt() || s.t_idx == dicts.boundary_t() ||
        s.p_idx == dicts.boundary_p()) {
      break;  // terminator triple is dropped in full
    }
    NoteEvent ev;
    ev.dt = dicts.dt_table[static_cast<std::size_t>(s.dt_idx)];
    ev.t = dicts.t_table[static_cast<std::size_t>(s.t_idx)];
    ev.pitch = dicts.p_table[static_cast<std::size_t>(s.p_idx)];
    score.notes.push_back(ev);
  }
  canonicalize_simultaneous(score);
  return score;
}

}  // namespace bachprop::sample
