#pragma once

#include <vector>

#include "moss/tape.h"
#include "moss/tensor.h"

namespace moss::ops {

// Every op follows the same contract: compute the forward result, and if a
// tape is supplied and any differentiable input requires grad, record a
// closure that pushes the output gradient back into the inputs. With a null
// tape the op is pure inference.

// [R x K] * [K x N] -> [R x N]. A rank-1 left operand is treated as one row.
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

Tensor transpose(const Tensor& a, Tape* tape = nullptr);

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

Tensor scale(const Tensor& a, double c, Tape* tape = nullptr);

Tensor silu(const Tensor& x, Tape* tape = nullptr);

// Row-wise softmax over the last axis.
Tensor softmax_lastdim(const Tensor& a, Tape* tape = nullptr);

// Row-wise normalization followed by a learned affine:
//   y = (x - mean) / sqrt(max(var, eps)) * gain + shift
// with eps = 1e-5 acting as a floor on the variance, so rows with
// var >= eps come out with exactly unit variance.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                  Tape* tape = nullptr);

// x [R x K] * w [K x N] + b [N] broadcast over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b,
              Tape* tape = nullptr);

// Stacks along the last axis; all inputs share the leading dimension.
Tensor concat_lastaxis(const std::vector<Tensor>& xs, Tape* tape = nullptr);

// Splits the last axis into equal pieces.
std::vector<Tensor> split_lastaxis(const Tensor& x, int pieces,
                                   Tape* tape = nullptr);

// Row stacking / slicing for token sequences stored rows-as-tokens.
Tensor concat_rows(const std::vector<Tensor>& xs, Tape* tape = nullptr);
Tensor slice_rows(const Tensor& x, int start, int len, Tape* tape = nullptr);

// Gathers rows of a table: out[i] = table[idx[i]]. Used for embeddings.
Tensor rows_select(const Tensor& table, const std::vector<int>& idx,
                   Tape* tape = nullptr);

// mean((pred - target)^2) over all elements; scalar output.
Tensor mse(const Tensor& pred, const Tensor& target, Tape* tape = nullptr);

// ---- Batched helpers -------------------------------------------------------
//
// Token sequences for a whole batch are stored as a single [B*T x width]
// matrix, sample-major (rows b*T .. b*T+T-1 belong to sample b). These ops
// let the per-block math run as large GEMMs while respecting the per-sample
// row grouping.

// xs[i] is [B*counts[i] x width]; interleaves the per-sample row groups so
// the result is [B*sum(counts) x width] with each sample's rows contiguous
// in input order.
Tensor concat_rows_per_sample(const std::vector<Tensor>& xs, int batch,
                              const std::vector<int>& counts,
                              Tape* tape = nullptr);

// Inverse view: takes rows [offset, offset+len) out of each sample's block
// of `tokens` rows. x is [B*tokens x width] -> [B*len x width].
Tensor slice_rows_per_sample(const Tensor& x, int batch, int tokens,
                             int offset, int len, Tape* tape = nullptr);

// Adds a shared [T x width] row pattern to every sample's block of x
// ([B*T x width]). Used for positional terms.
Tensor add_broadcast_rows(const Tensor& x, const Tensor& pattern, int batch,
                          Tape* tape = nullptr);

// Per-sample affine conditioning: out = x * (1 + s_b) + t_b row-wise, where
// x is [B*tokens x width] and s, t are [B x width].
Tensor modulate_per_sample(const Tensor& x, const Tensor& s, const Tensor& t,
                           int tokens, Tape* tape = nullptr);

// Optional attention introspection. When attached to a joint_attention call
// it accumulates, for queries of `query_stream` restricted to per-sample
// rows [query_offset, query_offset+query_len), the softmax mass landing on
// each stream's key block, averaged over samples, heads and those rows.
struct AttentionProbe {
    int query_stream = 0;
    int query_offset = 0;
    int query_len = 0;
    std::vector<double> stream_mass; // filled by the op, one entry per stream
};

// Joint attention across decoupled streams. q/k/v hold one entry per stream,
// each [B*T_i x width]; keys and values of all streams are concatenated per
// sample and every stream's queries attend over the joint set (no mask).
// Returns one output per stream with its input shape.
std::vector<Tensor> joint_attention(const std::vector<Tensor>& q,
                                    const std::vector<Tensor>& k,
                                    const std::vector<Tensor>& v, int batch,
                                    int heads, Tape* tape = nullptr,
                                    AttentionProbe* probe = nullptr);

} // namespace moss::ops
