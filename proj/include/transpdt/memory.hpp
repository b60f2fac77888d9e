#pragma once

// Learnable pattern memory queried by the fused pending representation.

#include "transpdt/autodiff.hpp"

namespace transpdt {

// Score = row-softmax(T_c · Mᵀ) over the L_m patterns (unscaled inner
// product); Mem = Score · M with padded rows zeroed.
inline Var memory_lookup(Var fused, const Mask& pending_mask, Var memory) {
  using namespace ops;
  if (fused.cols() != memory.cols())
    throw DimensionError("memory width " + std::to_string(memory.cols()) + " differs from fused width " +
                         std::to_string(fused.cols()));
  Var score = softmax_rows(matmul(fused, transpose(memory)));
  return mask_rows(matmul(score, memory), pending_mask);
}

// Attention weights alone, for inspection and tests.
inline Tensor memory_scores(const Tensor& fused, const Tensor& memory) {
  Tape tape(false);
  using namespace ops;
  return softmax_rows(matmul(tape.constant(fused), transpose(tape.constant(memory)))).value();
}

// A_t = [T_c ‖ Mem], one 4·d_model row per pending package.
inline Var concat_output(Var fused, Var mem) {
  if (fused.shape() != mem.shape()) throw DimensionError("concat_output: T_c and Mem shapes differ");
  return ops::concat(fused, mem);
}

}  // namespace transpdt
