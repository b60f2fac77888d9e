#pragma once

// Two Transformer-encoder branches (completed history, pending set) and their
// broadcast fusion into one row per pending package.

#include <cmath>
#include <string>
#include <vector>

#include "transpdt/autodiff.hpp"

namespace transpdt {

struct EncoderShape {
  std::size_t input_dim = 0;  // D_m
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn_dim = 256;

  std::size_t head_dim() const { return d_model / heads; }
  void validate() const {
    if (d_model == 0 || heads == 0 || d_model % heads != 0)
      throw ConfigError("d_model must be a positive multiple of the head count");
    if (d_model % 2 != 0) throw ConfigError("d_model must be even for the positional encoding");
    if (input_dim == 0) throw ConfigError("feature width must be positive");
  }
};

// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same angle).
inline Tensor positional_encoding(std::size_t length, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0) throw ConfigError("positional encoding needs an even d_model");
  Tensor pe({length, d_model});
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe.at(pos, 2 * i) = std::sin(angle);
      pe.at(pos, 2 * i + 1) = std::cos(angle);
    }
  return pe;
}

struct EncoderBlockVars {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln1_gain, ln1_bias;
  Var ff1_w, ff1_b, ff2_w, ff2_b;
  Var ln2_gain, ln2_bias;
};

struct EncoderVars {
  Var embed_w, embed_b;
  std::vector<EncoderBlockVars> blocks;
};

// Registers one branch's parameters under `prefix`.
template <typename Rng>
void register_encoder(ParameterStore& store, const std::string& prefix, const EncoderShape& s, Rng& rng) {
  s.validate();
  const std::size_t d = s.d_model;
  store.add(prefix + ".embed.w", glorot_uniform(s.input_dim, d, rng));
  store.add(prefix + ".embed.b", Tensor({1, d}));
  for (std::size_t b = 0; b < s.blocks; ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    // Per-head Q/K/V projections stored side by side: head h owns columns [h*dk, (h+1)*dk).
    for (const char* which : {"q", "k", "v"}) {
      store.add(p + ".attn.w" + which, glorot_uniform(d, d, rng));
      store.add(p + ".attn.b" + which, Tensor({1, d}));
    }
    store.add(p + ".attn.wo", glorot_uniform(d, d, rng));
    store.add(p + ".attn.bo", Tensor({1, d}));
    store.add(p + ".ln1.gain", Tensor({1, d}, 1.0));
    store.add(p + ".ln1.bias", Tensor({1, d}));
    store.add(p + ".ff1.w", glorot_uniform(d, s.ffn_dim, rng));
    store.add(p + ".ff1.b", Tensor({1, s.ffn_dim}));
    store.add(p + ".ff2.w", glorot_uniform(s.ffn_dim, d, rng));
    store.add(p + ".ff2.b", Tensor({1, d}));
    store.add(p + ".ln2.gain", Tensor({1, d}, 1.0));
    store.add(p + ".ln2.bias", Tensor({1, d}));
  }
}

inline EncoderVars bind_encoder(Tape& tape, const ParameterStore& store, const std::string& prefix, const EncoderShape& s) {
  auto P = [&](const std::string& n) { return tape.param(store, prefix + n); };
  EncoderVars v{P(".embed.w"), P(".embed.b"), {}};
  for (std::size_t b = 0; b < s.blocks; ++b) {
    const std::string p = ".block" + std::to_string(b);
    v.blocks.push_back({P(p + ".attn.wq"), P(p + ".attn.bq"), P(p + ".attn.wk"), P(p + ".attn.bk"), P(p + ".attn.wv"),
                        P(p + ".attn.bv"), P(p + ".attn.wo"), P(p + ".attn.bo"), P(p + ".ln1.gain"), P(p + ".ln1.bias"),
                        P(p + ".ff1.w"), P(p + ".ff1.b"), P(p + ".ff2.w"), P(p + ".ff2.b"), P(p + ".ln2.gain"),
                        P(p + ".ln2.bias")});
  }
  return v;
}

// Post-norm block: multi-head self-attention with key masking, residual +
// layer norm, then relu feed-forward, residual + layer norm. Padded rows are
// zeroed on the way out.
inline Var encoder_block(Var x, const Mask& mask, const EncoderBlockVars& p, std::size_t heads) {
  using namespace ops;
  if (mask.size() != x.rows()) throw DimensionError("encoder_block: mask length differs from row count");
  if (count_valid(mask) == 0) throw DegenerateInputError("encoder_block: every row is masked");
  const std::size_t d = x.cols();
  const std::size_t dk = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  Var q = affine(x, p.wq, p.bq);
  Var k = affine(x, p.wk, p.bk);
  Var v = affine(x, p.wv, p.bv);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dk, dk);
    Var kh = slice_cols(k, h * dk, dk);
    Var vh = slice_cols(v, h * dk, dk);
    Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    outs.push_back(matmul(masked_softmax(scores, mask), vh));
  }
  Var attn = affine(heads == 1 ? outs.front() : concat_cols(outs), p.wo, p.bo);
  Var x1 = layer_norm(add(x, attn), p.ln1_gain, p.ln1_bias);
  Var ff = affine(relu(affine(x1, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b);
  Var x2 = layer_norm(add(x1, ff), p.ln2_gain, p.ln2_bias);
  return mask_rows(x2, mask);
}

struct HistoryEncoding {
  Var rows;  // T_h, L_h × d_model
  Var last;  // 1 × d_model: last valid row, or the learned start-of-history vector
};

// Historical branch: embedding + positional encoding, then the block stack.
inline HistoryEncoding encode_history(const Tensor& features, const Mask& mask, const EncoderVars& p, Var start_of_history,
                                      std::size_t heads) {
  using namespace ops;
  Tape& tape = *p.embed_w.tape;
  const std::size_t lh = features.rows();
  const std::size_t d = p.embed_w.cols();
  const std::size_t valid = count_valid(mask);
  if (valid == 0) return {tape.constant(Tensor({lh, d})), start_of_history};
  Var x = affine(tape.constant(features), p.embed_w, p.embed_b);
  x = add(x, tape.constant(positional_encoding(lh, d)));
  x = mask_rows(x, mask);
  for (const auto& b : p.blocks) x = encoder_block(x, mask, b, heads);
  std::size_t last = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) last = i;
  return {x, row(x, last)};
}

// Pending branch: no positional encoding, since pending order is unknown.
inline Var encode_pending(const Tensor& features, const Mask& mask, const EncoderVars& p, std::size_t heads) {
  using namespace ops;
  Tape& tape = *p.embed_w.tape;
  if (count_valid(mask) == 0) throw ContractError("encode_pending: a sample needs at least one pending package");
  Var x = mask_rows(affine(tape.constant(features), p.embed_w, p.embed_b), mask);
  for (const auto& b : p.blocks) x = encoder_block(x, mask, b, heads);
  return x;
}

// T_c: the history summary broadcast-concatenated onto every valid pending row.
inline Var fuse(Var history_last, Var pending_rows, const Mask& pending_mask) {
  using namespace ops;
  Var h = broadcast_rows(history_last, pending_rows.rows());
  return mask_rows(concat(h, pending_rows), pending_mask);
}

}  // namespace transpdt
