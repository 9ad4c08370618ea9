#pragma once

// Hot loops of the artifact: dense matmul in three transpose layouts and
// multi-head causal attention over a (possibly gated) past plus new rows.
//
// Every kernel exists twice. `serial::` is the reference implementation used
// by tests; `omp::` distributes independent output rows across OpenMP
// threads. Both share one loop body per output element, so results are
// bitwise identical for any thread count.

#include <cstddef>
#include <span>

namespace kvd::kernels {

struct MatDims {
    std::size_t m, k, n;
};

// Layout of one attention call. Query row t may attend keys [0, past + t];
// the first `past` keys are prior cache rows, the rest are the new rows.
struct AttnDims {
    std::size_t n_query;
    std::size_t n_key;  // past + n_query
    std::size_t past;
    std::size_t n_heads;
    std::size_t head_dim;

    std::size_t model_dim() const { return n_heads * head_dim; }
};

namespace serial {

// C[m×n] (+)= A[m×k]·B[k×n]
void matmul_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate = false);
// C[m×n] (+)= A[m×k]·B[n×k]ᵀ
void matmul_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate = false);
// C[k×n] (+)= A[m×k]ᵀ·B[m×n]
void matmul_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate = false);

// probs receives H×T×S softmax weights, zero beyond each row's causal
// frontier. gate is empty or has `past` entries that multiply the
// pre-softmax logits of the past keys.
void attention_forward(std::span<const float> q, std::span<const float> k,
                       std::span<const float> v, std::span<const float> gate, float scale,
                       AttnDims d, std::span<float> probs, std::span<float> out);

// Accumulates into dq, dk, dv and dgate (dgate may be empty).
void attention_backward(std::span<const float> dout, std::span<const float> q,
                        std::span<const float> k, std::span<const float> v,
                        std::span<const float> gate, std::span<const float> probs, float scale,
                        AttnDims d, std::span<float> dq, std::span<float> dk,
                        std::span<float> dv, std::span<float> dgate);

}  // namespace serial

namespace omp {

void matmul_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate = false);
void matmul_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate = false);
void matmul_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate = false);
void attention_forward(std::span<const float> q, std::span<const float> k,
                       std::span<const float> v, std::span<const float> gate, float scale,
                       AttnDims d, std::span<float> probs, std::span<float> out);
void attention_backward(std::span<const float> dout, std::span<const float> q,
                        std::span<const float> k, std::span<const float> v,
                        std::span<const float> gate, std::span<const float> probs, float scale,
                        AttnDims d, std::span<float> dq, std::span<float> dk,
                        std::span<float> dv, std::span<float> dgate);

}  // namespace omp

// Threads the omp kernels use (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace kvd::kernels
