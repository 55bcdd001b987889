#ifndef BACHPROP_MODEL_HPP
#define BACHPROP_MODEL_HPP

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bachprop/nn.hpp"
#include "bachprop/rng.hpp"
#include "bachprop/score.hpp"

namespace bachprop::model {

struct UnknownVariant : std::runtime_error {
  explicit UnknownVariant(const std::string& name)
      : std::runtime_error("unknown variant: " + name) {}
};

// The full factorized architecture and its three ablations.
enum class Variant { bachprop, indepbp, mlp, polydac };

Variant variant_from_string(const std::string& name);
std::string to_string(Variant v);

struct ModelDims {
  int gru_width = 128;                          // bachprop / indepbp stacks
  int mlp_width = 124;                          // mlp trunk layers
  int mlp_context = 5;                          // notes visible to the mlp
  std::array<int, 3> polydac_widths{16, 128, 256};  // dT / T / P networks
};

// Each readout head is an affine+ReLU layer of the dictionary width followed
// by an affine+softmax layer of the same width.
struct HeadRefs {
  nn::AffineRefs relu;
  nn::AffineRefs out;
};

struct ModelArch {
  Variant variant = Variant::bachprop;
  ModelDims dims;
  int l_dt = 0, l_t = 0, l_p = 0;  // table sizes including the boundary token
  int l_total = 0;
  std::vector<nn::GruRefs> gru;        // stack order: layer 1..3; polydac: dT net, T net, P net
  std::vector<nn::AffineRefs> trunk;   // mlp only
  HeadRefs head_dt, head_t, head_p;
  std::size_t total_params = 0;
};

struct ModelParams {
  ModelArch arch;
  Dictionaries dicts;
  std::vector<double> theta;
};

ModelParams build_variant(Variant kind, const Dictionaries& dicts, const ModelDims& dims = {});
ModelParams build_variant(const std::string& kind, const Dictionaries& dicts,
                          const ModelDims& dims = {});

// Scaled uniform init for all weight matrices, zero biases.
void init_params(ModelParams& params, Rng& rng);

// Per-song recurrent state (and, for the mlp, the recent-note window). The
// sequential interface below runs one song at a time.
struct HiddenState {
  std::vector<nn::Matrix> h;
  std::vector<std::array<int, 3>> recent;
  std::array<int, 3> pending{-1, -1, -1};
  bool primed = false;
};

void reset_state(const ModelParams& params, HiddenState& state);

// Advances the state by one note given as (dT, T, P) dictionary indices.
void forward_note(const ModelParams& params, HiddenState& state, int dt_idx, int t_idx,
                  int p_idx);

// Readout logits for the next note's features, staged: dT first, then T given
// the chosen dT, then P given both. The state is not modified.
std::vector<double> dt_logits(const ModelParams& params, const HiddenState& state);
std::vector<double> t_logits(const ModelParams& params, const HiddenState& state, int dt_idx);
std::vector<double> p_logits(const ModelParams& params, const HiddenState& state, int dt_idx,
                             int t_idx);

// Probability vector for the next unknown feature: no known features -> dT,
// known dT -> T, known dT and T -> P.
std::vector<double> head_probs(const ModelParams& params, const HiddenState& state,
                               std::optional<int> known_dt = std::nullopt,
                               std::optional<int> known_t = std::nullopt);

struct SequenceEval {
  double nll = 0.0;       // mean over positions of (CE_dT + CE_T + CE_P) / 3
  double acc_dt = 0.0;
  double acc_t = 0.0;
  double acc_p = 0.0;
  double ce_total = 0.0;  // summed three-feature cross-entropy
  long positions = 0;
  long correct_dt = 0, correct_t = 0, correct_p = 0;
};

// Teacher-forced pass over an encoded score, predicting each position from
// its history.
SequenceEval sequence_nll(const ModelParams& params, const EncodedScore& enc);

// Batched teacher-forced evaluation over windows of a song group, with the
// recurrent state carried between consecutive windows and gradients truncated
// at window edges. Songs shorter than the window are zero-padded; padded
// positions are masked out of the loss and all gradients.
class BatchRunner {
public:
  explicit BatchRunner(const ModelParams& params);
  ~BatchRunner();
  BatchRunner(const BatchRunner&) = delete;
  BatchRunner& operator=(const BatchRunner&) = delete;

  // zeroes the state for a new group of songs
  void reset(int batch);

  // forward over prediction positions [t0, t1); the songs must stay alive
  // until the matching backward call
  SequenceEval forward(std::span<const EncodedScore* const> songs, int t0, int t1);

  // accumulates d(scale * summed window CE)/dtheta into grad_out
  void backward(double scale, std::span<double> grad_out);

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Same pass split into carried-state windows of trunc_len positions; the sum
// of window losses equals the single-pass total exactly.
SequenceEval windowed_eval(const ModelParams& params, const EncodedScore& enc, int trunc_len);

struct TrainConfig {
  int batch_size = 32;
  int trunc_len = 128;
  double val_fraction = 0.1;  // 0 disables validation (smoke runs)
  int max_epochs = 200;
  int patience = 10;
  double learning_rate = 1e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  bool transpose = true;
  // when > 0, stop once a clean pass over the training set reaches this
  // accuracy on all three features
  double target_train_accuracy = 0.0;
};

struct EpochStats {
  int epoch = 0;
  double train_nll = 0.0;
  bool has_train_acc = false;
  double train_acc_dt = 0.0, train_acc_t = 0.0, train_acc_p = 0.0;
  bool has_val = false;
  double val_nll = 0.0;
  double val_acc_dt = 0.0, val_acc_t = 0.0, val_acc_p = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;  // 1-based epoch of the kept checkpoint, -1 when no validation ran
  std::string to_csv() const;
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

// Stateful truncated-BPTT training with per-epoch transposition augmentation
// and best-validation-accuracy checkpointing.
TrainResult train(const ModelParams& initial, const std::vector<EncodedScore>& corpus,
                  const TrainConfig& cfg, Rng& rng);

}  // namespace bachprop::model

#endif
