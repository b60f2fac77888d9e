#pragma once

// Losses, mini-batch Adam training with teacher forcing, and greedy evaluation.

#include <chrono>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include "transpdt/metrics.hpp"
#include "transpdt/mobility.hpp"
#include "transpdt/model.hpp"
#include "transpdt/optim.hpp"

namespace transpdt {

inline constexpr double kProbabilityFloor = 1e-12;

// A sample with everything the model consumes precomputed.
struct PreparedSample {
  Sample sample;
  EncodedSample enc;
  std::optional<EncodedTruth> truth;
  MobilitySlice slice;
};

inline PreparedSample prepare_sample(const Sample& s, const FeatureStats& stats, const MobilityTensors& mobility,
                                     const ModelConfig& cfg) {
  PreparedSample p{s, encode_features(s, stats, cfg.max_history, cfg.max_pending), std::nullopt, {}};
  if (s.has_truth()) p.truth = encoded_truth(s, p.enc);
  p.slice = slice_mobility(mobility, p.enc.pending_aoi, p.enc.pending_mask, p.enc.slot);
  return p;
}

inline std::vector<PreparedSample> prepare_all(const std::vector<Sample>& samples, const FeatureStats& stats,
                                               const MobilityTensors& mobility, const ModelConfig& cfg) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(prepare_sample(s, stats, mobility, cfg));
  return out;
}

struct SampleLoss {
  Var main;  // mean squared minutes over delivery steps (0 if none)
  Var aux;  // mean -log P(true next) over all steps
  std::size_t delivery_steps = 0;
};

// Main loss: squared error of ỹ at each teacher-forced step whose package is a
// delivery. Pickup and padded rows never contribute.
inline Var loss_main(Tape& tape, const DecodeTrace& trace, const std::vector<std::optional<double>>& offsets,
                     std::size_t* delivery_steps = nullptr) {
  using namespace ops;
  std::vector<Var> terms;
  for (const auto& st : trace.steps) {
    if (st.chosen >= offsets.size() || !offsets[st.chosen]) continue;
    terms.push_back(square(add_scalar(st.minutes_var, -*offsets[st.chosen])));
  }
  if (delivery_steps) *delivery_steps = terms.size();
  if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
  return scale(sum(concat_rows(terms)), 1.0 / static_cast<double>(terms.size()));
}

// Auxiliary loss: mean negative log-probability of the true package per step,
// with the probability floored before the log.
inline Var loss_aux(Tape& tape, const DecodeTrace& trace) {
  using namespace ops;
  if (trace.steps.empty()) return tape.constant(Tensor::scalar(0.0));
  std::vector<Var> terms;
  for (const auto& st : trace.steps) terms.push_back(log_floor(pick(st.prob_var, st.chosen), kProbabilityFloor));
  return scale(sum(concat_rows(terms)), -1.0 / static_cast<double>(terms.size()));
}

inline SampleLoss sample_losses(Tape& tape, const DecodeTrace& trace, const EncodedTruth& truth) {
  SampleLoss l;
  l.main = loss_main(tape, trace, truth.offsets, &l.delivery_steps);
  l.aux = loss_aux(tape, trace);
  return l;
}

// L = L_main + α·L_aux.
inline Var combined_loss(Var main, Var aux, Var alpha) { return ops::add(main, ops::mul(alpha, aux)); }

struct LossReport {
  double main = 0.0;
  double aux = 0.0;
  double alpha = 0.0;
  double total = 0.0;
  std::size_t no_delivery_samples = 0;
};

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t epochs = 30;
  std::size_t patience = 5;  // epochs without validation-RMSE improvement
  double lr = 1e-4;
  double clip_norm = 5.0;
  std::uint64_t seed = 7;
};

struct EpochRecord {
  std::size_t epoch = 0;
  LossReport train;
  EvalResult val;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 = initial parameters
  double best_val_rmse = 0.0;
};

// Deterministic per-sample stream for dropout.
inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t epoch, std::size_t index) {
  std::uint64_t z = seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)) ^ (0xBF58476D1CE4E5B9ULL * (index + 1));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Forward + backward for one batch; gradients of the batch-mean loss are
// added into `grads`.
inline LossReport batch_gradients(const Model& model, const std::vector<PreparedSample>& data,
                                  const std::vector<std::size_t>& batch, std::uint64_t seed, std::size_t epoch,
                                  GradientSet& grads) {
  LossReport rep;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (auto idx : batch) {
    const auto& ps = data[idx];
    if (!ps.truth) throw ContractError("training sample without ground truth");
    Tape tape(true);
    std::mt19937_64 rng(sample_seed(seed, epoch, idx));
    auto fr = model.forward(tape, ps.enc, &ps.slice, DecodeMode::TeacherForced, &ps.truth->route, true, rng);
    auto l = sample_losses(tape, fr.trace, *ps.truth);
    Var alpha = model.alpha(tape);
    Var total = ops::scale(combined_loss(l.main, l.aux, alpha), inv_b);
    if (l.delivery_steps == 0) ++rep.no_delivery_samples;
    rep.main += l.main.value()[0] * inv_b;
    rep.aux += l.aux.value()[0] * inv_b;
    rep.alpha = alpha.value()[0];
    rep.total += total.value()[0];
    tape.backward(total, grads);
  }
  return rep;
}

struct Prediction {
  std::vector<std::size_t> route;  // indices into Sample::pending, predicted order
  std::vector<double> minutes;  // ỹ per route step
};

inline Prediction predict_prepared(const Model& model, const PreparedSample& ps) {
  Tape tape(false);
  std::mt19937_64 rng(0);
  auto fr = model.forward(tape, ps.enc, &ps.slice, DecodeMode::Greedy, nullptr, false, rng);
  Prediction p;
  for (const auto& st : fr.trace.steps) {
    p.route.push_back(ps.enc.pending_index[st.chosen]);
    p.minutes.push_back(st.minutes);
  }
  return p;
}

// Compares a predicted route/time against the sample's truth over the kept
// pending packages.
inline SamplePrediction score_prediction(const PreparedSample& ps, const Prediction& p) {
  SamplePrediction sp;
  sp.route = p.route;
  for (auto r : ps.truth->route) sp.truth_route.push_back(ps.enc.pending_index[r]);
  for (std::size_t k = 0; k < p.route.size(); ++k) {
    const auto& off = ps.sample.truth_offsets[p.route[k]];
    if (off) sp.times.emplace_back(*off, p.minutes[k]);
  }
  return sp;
}

inline EvalResult evaluate_model(const Model& model, const std::vector<PreparedSample>& data,
                                 std::vector<SamplePrediction>* per_sample = nullptr) {
  std::vector<SamplePrediction> preds;
  preds.reserve(data.size());
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& ps : data) {
    if (!ps.truth) throw ContractError("evaluation sample without ground truth");
    preds.push_back(score_prediction(ps, predict_prepared(model, ps)));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EvalResult r = aggregate_eval(preds);
  r.inference_seconds = secs;
  if (per_sample) *per_sample = std::move(preds);
  return r;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(Model& model, const std::vector<PreparedSample>& train_set,
                         const std::vector<PreparedSample>& val_set, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (train_set.empty() && cfg.epochs > 0) throw ContractError("empty training split");
  auto& store = model.params();
  AdamState adam(store);
  TrainResult result;
  std::vector<Tensor> best;
  for (const auto& p : store) best.push_back(p.value);
  std::optional<double> best_rmse;
  if (!val_set.empty()) {
    best_rmse = evaluate_model(model, val_set).rmse;
    result.best_val_rmse = *best_rmse;
  }
  std::size_t stale = 0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(sample_seed(cfg.seed, epoch, static_cast<std::size_t>(-1)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b0 + cfg.batch_size)));
      GradientSet grads(store);
      LossReport rep;
      try {
        rep = batch_gradients(model, train_set, batch, cfg.seed, epoch, grads);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch starting at " + std::to_string(b0) +
                           " (sample " + std::to_string(batch.front()) + "...): " + e.what());
      }
      if (!std::isfinite(rep.total))
        throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + " batch " + std::to_string(b0));
      clip_global_norm(grads, cfg.clip_norm);
      adam_step(store, grads, adam, cfg.lr);
      rec.train.main += rep.main;
      rec.train.aux += rep.aux;
      rec.train.total += rep.total;
      rec.train.alpha = rep.alpha;
      rec.train.no_delivery_samples += rep.no_delivery_samples;
      ++batches;
    }
    if (batches) {
      rec.train.main /= static_cast<double>(batches);
      rec.train.aux /= static_cast<double>(batches);
      rec.train.total /= static_cast<double>(batches);
    }
    if (!val_set.empty()) rec.val = evaluate_model(model, val_set);
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (val_set.empty()) continue;
    if (!best_rmse || rec.val.rmse < *best_rmse) {
      best_rmse = rec.val.rmse;
      result.best_epoch = epoch;
      result.best_val_rmse = rec.val.rmse;
      for (std::size_t k = 0; k < store.size(); ++k) best[k] = store[k].value;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  if (!val_set.empty())
    for (std::size_t k = 0; k < store.size(); ++k) store[k].value = best[k];
  return result;
}

// Epoch metrics as CSV; wall-clock time is left out so identical seeds give
// identical files.
inline void write_history_csv(std::ostream& os, const TrainResult& r) {
  os << "epoch,train_total,train_main,train_aux,alpha,no_delivery_samples,val_rmse,val_mape,val_lmd,val_hr3\n";
  os.precision(17);
  for (const auto& e : r.history)
    os << e.epoch << ',' << e.train.total << ',' << e.train.main << ',' << e.train.aux << ',' << e.train.alpha << ','
       << e.train.no_delivery_samples << ',' << e.val.rmse << ',' << e.val.mape << ',' << e.val.lmd << ',' << e.val.hr3
       << '\n';
}

}  // namespace transpdt
