#pragma once

// LSTM-attention pointer decoding over the pending set, mobility-weighted
// next-package probabilities, and the per-step time head.

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "transpdt/autodiff.hpp"
#include "transpdt/mobility.hpp"

namespace transpdt {

struct DecoderVars {
  Var lstm_wx, lstm_wh, lstm_b;  // gates stacked [input | forget | candidate | output]
  Var h0, c0;
  Var ptr_w1, ptr_w2, ptr_v;
  Var mob_counts_w, mob_counts_b, mob_dist_w, mob_dist_b;
  Var time_w, time_b;
};

template <typename Rng>
void register_decoder(ParameterStore& store, std::size_t d_model, std::size_t max_pending, Rng& rng) {
  const std::size_t d = d_model, in = 4 * d_model;
  store.add("decoder.lstm.wx", glorot_uniform(in, 4 * d, rng));
  store.add("decoder.lstm.wh", glorot_uniform(d, 4 * d, rng));
  store.add("decoder.lstm.b", Tensor({1, 4 * d}));
  store.add("decoder.h0", normal_init({1, d}, 0.1, rng));
  store.add("decoder.c0", normal_init({1, d}, 0.1, rng));
  store.add("decoder.pointer.w1", glorot_uniform(d, d, rng));
  store.add("decoder.pointer.w2", glorot_uniform(in, d, rng));
  store.add("decoder.pointer.v", glorot_uniform(d, 1, rng));
  store.add("decoder.mobility.counts.w", glorot_uniform(max_pending, max_pending, rng));
  store.add("decoder.mobility.counts.b", Tensor({1, max_pending}));
  store.add("decoder.mobility.distance.w", glorot_uniform(max_pending, max_pending, rng));
  store.add("decoder.mobility.distance.b", Tensor({1, max_pending}));
  store.add("decoder.time.w", glorot_uniform(5 * d, 1, rng));
  store.add("decoder.time.b", Tensor({1, 1}));
}

inline DecoderVars bind_decoder(Tape& tape, const ParameterStore& store) {
  auto P = [&](const char* n) { return tape.param(store, n); };
  return {P("decoder.lstm.wx"),        P("decoder.lstm.wh"),           P("decoder.lstm.b"),
          P("decoder.h0"),             P("decoder.c0"),                P("decoder.pointer.w1"),
          P("decoder.pointer.w2"),     P("decoder.pointer.v"),         P("decoder.mobility.counts.w"),
          P("decoder.mobility.counts.b"), P("decoder.mobility.distance.w"), P("decoder.mobility.distance.b"),
          P("decoder.time.w"),         P("decoder.time.b")};
}

struct LstmState {
  Var h, c;
};

struct DecoderStart {
  Var input;  // mean of the valid A_t rows
  LstmState state;
};

inline DecoderStart init_state(Var at, const Mask& pending_mask, const DecoderVars& p) {
  if (count_valid(pending_mask) == 0) throw ContractError("init_state: no valid pending package");
  return {ops::masked_mean_rows(at, pending_mask), {p.h0, p.c0}};
}

struct LstmOutput {
  Var e;  // output (h after dropout)
  LstmState state;
};

// Standard LSTM cell. Dropout applies to the emitted output only.
template <typename Rng>
LstmOutput lstm_step(Var x, LstmState prev, const DecoderVars& p, double dropout_rate, bool train, Rng& rng) {
  using namespace ops;
  const std::size_t d = prev.h.cols();
  Var gates = add(add(matmul(x, p.lstm_wx), matmul(prev.h, p.lstm_wh)), p.lstm_b);
  Var i = sigmoid(slice_cols(gates, 0, d));
  Var f = sigmoid(slice_cols(gates, d, d));
  Var g = tanh(slice_cols(gates, 2 * d, d));
  Var o = sigmoid(slice_cols(gates, 3 * d, d));
  Var c = add(mul(f, prev.c), mul(i, g));
  Var h = mul(o, tanh(c));
  return {dropout(h, dropout_rate, train, rng), {h, c}};
}

// Packages still selectable: valid and not yet emitted.
inline Mask available_mask(const Mask& pending_mask, const std::vector<bool>& emitted) {
  Mask m(pending_mask.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = pending_mask[i] && !emitted[i];
  return m;
}

// s^i = vᵀ(W1·e + W2·A^i) as a 1×L_f row. `at_w2` is A_t·W2, shared by every
// step. Unavailable entries are left finite here and excluded by the masked
// softmax downstream. `tanh_inside` switches to the classic pointer form.
inline Var pointer_scores(Var e, Var at_w2, const DecoderVars& p, bool tanh_inside = false) {
  using namespace ops;
  Var pre = add(at_w2, matmul(e, p.ptr_w1));
  if (tanh_inside) pre = tanh(pre);
  return transpose(matmul(pre, p.ptr_v));
}

inline Var intermediate_probs(Var scores, const Mask& available) { return ops::masked_softmax(scores, available); }

// σ(affine(M′)) for both mobility matrices; depends only on the sample.
struct MobilityGates {
  Var counts, distance;
};

inline MobilityGates mobility_gates(Tape& tape, const MobilitySlice& slice, const DecoderVars& p) {
  using namespace ops;
  return {sigmoid(affine(tape.constant(slice.counts), p.mob_counts_w, p.mob_counts_b)),
          sigmoid(affine(tape.constant(slice.distance), p.mob_dist_w, p.mob_dist_b))};
}

// P = masked-softmax(u + u·G_C + u·G_D). Without gates this is masked-softmax(u).
inline Var mobility_fuse(Var u, const MobilityGates* gates, const Mask& available) {
  using namespace ops;
  if (!gates) return masked_softmax(u, available);
  Var rc = matmul(u, gates->counts);
  Var rd = matmul(u, gates->distance);
  return masked_softmax(add(add(u, rc), rd), available);
}

// Argmax over available entries; ties go to the lowest index.
inline std::size_t select_next(const Tensor& probs, const Mask& available) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < available.size(); ++i)
    if (available[i] && (!best || probs[i] > probs[*best])) best = i;
  if (!best) throw DegenerateInputError("select_next: no available package");
  return *best;
}

// ỹ = relu([e ‖ A^π]·w + b) · scale, minutes from t. `scale` reparameterizes
// the head so its raw output lives in units of `scale` minutes.
inline Var time_head(Var e, Var at_row, const DecoderVars& p, double scale = 1.0) {
  using namespace ops;
  return ops::scale(relu(affine(concat(e, at_row), p.time_w, p.time_b)), scale);
}

enum class DecodeMode { TeacherForced, Greedy };

struct DecodeStep {
  Mask available;  // before this step's selection
  std::vector<double> intermediate;  // u_j
  std::vector<double> probs;  // P(π_j)
  std::size_t chosen = 0;  // π_j (truth when teacher-forced)
  std::optional<std::size_t> input_row;  // A_t row fed to the LSTM; empty = set mean
  double minutes = 0.0;  // ỹ_j
  Var prob_var;
  Var minutes_var;
};

struct DecodeTrace {
  std::vector<DecodeStep> steps;

  std::vector<std::size_t> route() const {
    std::vector<std::size_t> r;
    r.reserve(steps.size());
    for (const auto& s : steps) r.push_back(s.chosen);
    return r;
  }
};

struct DecodeOptions {
  double dropout = 0.0;
  bool train = false;
  bool pointer_tanh = false;
  double time_scale = 1.0;
};

template <typename Rng>
DecodeTrace decode_route(Var at, const Mask& pending_mask, const MobilityGates* gates, const DecoderVars& p,
                         DecodeMode mode, const std::vector<std::size_t>* truth_route, const DecodeOptions& opt,
                         Rng& rng) {
  using namespace ops;
  const std::size_t n = count_valid(pending_mask);
  if (n == 0) throw ContractError("decode_route: no valid pending package");
  if (mode == DecodeMode::TeacherForced) {
    if (!truth_route) throw ContractError("teacher-forced decoding needs a ground-truth route");
    if (truth_route->size() != n) throw ContractError("ground-truth route length differs from the pending count");
    for (auto r : *truth_route)
      if (r >= pending_mask.size() || !pending_mask[r]) throw ContractError("ground-truth route names a padded row");
  }
  const DecoderStart start = init_state(at, pending_mask, p);
  Var at_w2 = matmul(at, p.ptr_w2);
  std::vector<bool> emitted(pending_mask.size(), false);
  Var input = start.input;
  std::optional<std::size_t> input_row;
  LstmState state = start.state;
  DecodeTrace trace;
  trace.steps.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    const LstmOutput out = lstm_step(input, state, p, opt.dropout, opt.train, rng);
    state = out.state;
    DecodeStep step;
    step.available = available_mask(pending_mask, emitted);
    step.input_row = input_row;
    Var u = intermediate_probs(pointer_scores(out.e, at_w2, p, opt.pointer_tanh), step.available);
    step.prob_var = mobility_fuse(u, gates, step.available);
    step.intermediate = u.value().data();
    step.probs = step.prob_var.value().data();
    step.chosen = mode == DecodeMode::TeacherForced ? (*truth_route)[j] : select_next(step.prob_var.value(), step.available);
    if (!step.available[step.chosen]) throw ContractError("ground-truth route repeats a package");
    Var chosen_row = row(at, step.chosen);
    step.minutes_var = time_head(out.e, chosen_row, p, opt.time_scale);
    step.minutes = step.minutes_var.value()[0];
    emitted[step.chosen] = true;
    input = chosen_row;
    input_row = step.chosen;
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

}  // namespace transpdt
