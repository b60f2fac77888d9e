#pragma once

// Full route-and-time model: two encoder branches, pattern memory, pointer
// decoder with mobility fusion and time head.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "transpdt/decoder.hpp"
#include "transpdt/encoder.hpp"
#include "transpdt/features.hpp"
#include "transpdt/memory.hpp"

namespace transpdt {

struct ModelConfig {
  std::size_t feature_dim = 0;  // D_m, set from the fitted feature stats
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_mult = 4;
  std::size_t max_history = 15;  // L_h
  std::size_t max_pending = 15;  // L_f
  std::size_t memory_slots = 20;  // L_m
  double dropout = 0.1;
  double time_scale = 60.0;  // minutes per unit of raw time-head output
  bool use_memory = true;
  bool use_mobility = true;
  bool pointer_tanh = false;
  std::uint64_t seed = 7;

  EncoderShape encoder_shape() const { return {feature_dim, d_model, heads, blocks, ffn_mult * d_model}; }

  void validate() const {
    encoder_shape().validate();
    if (max_history == 0 || max_pending == 0) throw ConfigError("L_h and L_f must be positive");
    if (memory_slots == 0) throw ConfigError("memory_slots must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (!(time_scale > 0.0)) throw ConfigError("time_scale must be positive");
  }
};

inline Json config_to_json(const ModelConfig& c) {
  return Json{{"feature_dim", c.feature_dim}, {"d_model", c.d_model},       {"heads", c.heads},
              {"blocks", c.blocks},           {"ffn_mult", c.ffn_mult},     {"max_history", c.max_history},
              {"max_pending", c.max_pending}, {"memory_slots", c.memory_slots}, {"dropout", c.dropout},
              {"time_scale", c.time_scale},   {"use_memory", c.use_memory}, {"use_mobility", c.use_mobility},
              {"pointer_tanh", c.pointer_tanh}, {"seed", c.seed}};
}

inline ModelConfig config_from_json(const Json& j) {
  ModelConfig c;
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.max_history = j.at("max_history").get<std::size_t>();
  c.max_pending = j.at("max_pending").get<std::size_t>();
  c.memory_slots = j.at("memory_slots").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.time_scale = j.at("time_scale").get<double>();
  c.use_memory = j.at("use_memory").get<bool>();
  c.use_mobility = j.at("use_mobility").get<bool>();
  c.pointer_tanh = j.at("pointer_tanh").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// α = softplus(raw); raw starts where α = 1.
inline const double kAlphaRawInit = std::log(std::exp(1.0) - 1.0);

// Intermediate values of one forward pass, kept for tests and diagnostics.
struct ForwardResult {
  HistoryEncoding history;
  Var pending;  // T_f
  Var fused;  // T_c
  Var memory;  // Mem
  Var combined;  // A_t
  std::optional<MobilityGates> gates;
  DecodeTrace trace;
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const auto es = cfg_.encoder_shape();
    register_encoder(params_, "history", es, rng);
    register_encoder(params_, "pending", es, rng);
    params_.add("history.start", normal_init({1, cfg_.d_model}, 0.02, rng));
    params_.add("memory.patterns", normal_init({cfg_.memory_slots, 2 * cfg_.d_model}, 0.02, rng));
    register_decoder(params_, cfg_.d_model, cfg_.max_pending, rng);
    params_.add("loss.alpha_raw", Tensor({1}, kAlphaRawInit));
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Starts the time head near a typical offset so training begins in range.
  void set_time_bias_minutes(double minutes) { params_.get("decoder.time.b").value[0] = minutes / cfg_.time_scale; }

  Var alpha(Tape& tape) const { return ops::softplus(tape.param(params_, "loss.alpha_raw")); }

  template <typename Rng>
  ForwardResult forward(Tape& tape, const EncodedSample& enc, const MobilitySlice* slice, DecodeMode mode,
                        const std::vector<std::size_t>* truth_route, bool train, Rng& rng) const {
    if (enc.pending.cols() != cfg_.feature_dim || enc.history.cols() != cfg_.feature_dim)
      throw DimensionError("encoded feature width " + std::to_string(enc.pending.cols()) + " differs from model D_m " +
                           std::to_string(cfg_.feature_dim));
    if (enc.pending.rows() != cfg_.max_pending || enc.history.rows() != cfg_.max_history)
      throw DimensionError("encoded sample lengths differ from the model's L_h/L_f");
    const auto hist_vars = bind_encoder(tape, params_, "history", cfg_.encoder_shape());
    const auto pend_vars = bind_encoder(tape, params_, "pending", cfg_.encoder_shape());
    const auto dec = bind_decoder(tape, params_);

    ForwardResult r;
    r.history = encode_history(enc.history, enc.history_mask, hist_vars, tape.param(params_, "history.start"), cfg_.heads);
    r.pending = encode_pending(enc.pending, enc.pending_mask, pend_vars, cfg_.heads);
    r.fused = fuse(r.history.last, r.pending, enc.pending_mask);
    if (cfg_.use_memory)
      r.memory = memory_lookup(r.fused, enc.pending_mask, tape.param(params_, "memory.patterns"));
    else
      r.memory = tape.constant(Tensor(r.fused.shape()));
    r.combined = concat_output(r.fused, r.memory);
    if (cfg_.use_mobility) {
      if (!slice) throw ContractError("mobility-enabled model needs a mobility slice");
      r.gates = mobility_gates(tape, *slice, dec);
    }
    DecodeOptions opt{cfg_.dropout, train, cfg_.pointer_tanh, cfg_.time_scale};
    r.trace = decode_route(r.combined, enc.pending_mask, r.gates ? &*r.gates : nullptr, dec, mode, truth_route, opt, rng);
    return r;
  }

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

}  // namespace transpdt
