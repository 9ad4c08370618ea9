#include "kvd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace kvd::kernels {

namespace {

// One template per kernel; `Par` only toggles the OpenMP pragma, so the
// serial and parallel instantiations execute the same arithmetic per element.

// Register tile: kRows output rows × kCols output columns held in doubles
// while streaming the shared dimension in order. The per-element summation
// order (initial value, then p = 0..k-1) does not depend on tiling, so any
// partition of tiles across threads gives bitwise-identical output.
constexpr std::size_t kRows = 4;
constexpr std::size_t kCols = 32;

// Full tile. a is row-major (lda), b is k × ldb, both already widened.
__attribute__((noinline)) void tile_full(const double* __restrict a, std::size_t lda,
                                         const double* __restrict b, std::size_t ldb,
                                         float* __restrict c, std::size_t ldc, std::size_t k,
                                         bool accumulate) {
    double acc[kRows][kCols];
    for (std::size_t r = 0; r < kRows; ++r)
        for (std::size_t j = 0; j < kCols; ++j) acc[r][j] = accumulate ? c[r * ldc + j] : 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double* brow = b + p * ldb;
        for (std::size_t r = 0; r < kRows; ++r) {
            const double av = a[r * lda + p];
            for (std::size_t j = 0; j < kCols; ++j) acc[r][j] += av * brow[j];
        }
    }
    for (std::size_t r = 0; r < kRows; ++r)
        for (std::size_t j = 0; j < kCols; ++j) c[r * ldc + j] = static_cast<float>(acc[r][j]);
}

// Ragged edge tile with the same per-element arithmetic.
void tile_edge(const double* a, std::size_t lda, const double* b, std::size_t ldb, float* c,
               std::size_t ldc, std::size_t rows, std::size_t cols, std::size_t k, bool accumulate) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = accumulate ? c[r * ldc + j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a[r * lda + p] * b[p * ldb + j];
            c[r * ldc + j] = static_cast<float>(acc);
        }
    }
}

// C[m×n] (+)= A[m×k]·B[k×n] on widened operands.
template <bool Par>
void tiled_product(const double* a, const double* b, float* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate) {
    const std::size_t row_tiles = (m + kRows - 1) / kRows;
    const std::size_t col_tiles = (n + kCols - 1) / kCols;
#pragma omp parallel for schedule(static) if (Par)
    for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(row_tiles * col_tiles); ++tt) {
        const std::size_t i0 = static_cast<std::size_t>(tt) / col_tiles * kRows;
        const std::size_t j0 = static_cast<std::size_t>(tt) % col_tiles * kCols;
        const std::size_t rows = std::min(kRows, m - i0), cols = std::min(kCols, n - j0);
        if (rows == kRows && cols == kCols)
            tile_full(a + i0 * k, k, b + j0, n, c + i0 * n + j0, n, k, accumulate);
        else
            tile_edge(a + i0 * k, k, b + j0, n, c + i0 * n + j0, n, rows, cols, k, accumulate);
    }
}

std::vector<double> widen(std::span<const float> x) { return {x.begin(), x.end()}; }

// rows × cols float matrix → cols × rows doubles.
std::vector<double> widen_transposed(std::span<const float> x, std::size_t rows, std::size_t cols) {
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
    return out;
}

template <bool Par>
void matmul_nn_impl(std::span<const float> a, std::span<const float> b, std::span<float> c,
                    MatDims d, bool accumulate) {
    const auto aw = widen(a.first(d.m * d.k));
    const auto bw = widen(b.first(d.k * d.n));
    tiled_product<Par>(aw.data(), bw.data(), c.data(), d.m, d.k, d.n, accumulate);
}

template <bool Par>
void matmul_nt_impl(std::span<const float> a, std::span<const float> b, std::span<float> c,
                    MatDims d, bool accumulate) {
    const auto aw = widen(a.first(d.m * d.k));
    const auto bt = widen_transposed(b.first(d.n * d.k), d.n, d.k);
    tiled_product<Par>(aw.data(), bt.data(), c.data(), d.m, d.k, d.n, accumulate);
}

template <bool Par>
void matmul_tn_impl(std::span<const float> a, std::span<const float> b, std::span<float> c,
                    MatDims d, bool accumulate) {
    const auto at = widen_transposed(a.first(d.m * d.k), d.m, d.k);
    const auto bw = widen(b.first(d.m * d.n));
    tiled_product<Par>(at.data(), bw.data(), c.data(), d.k, d.m, d.n, accumulate);
}

// exp(x) for x ≤ 0, written so loops over it vectorise. Range reduction by
// ln 2 with a split constant, then a degree-12 Taylor polynomial on |r| ≤ ln2/2;
// relative error is a few ulp.
inline double exp_nonpositive(double x) {
    x = x < -700.0 ? -700.0 : x;
    const double n = static_cast<double>(static_cast<std::int64_t>(x * 1.4426950408889634 - 0.5));
    const double r = (x - n * 0.693145751953125) - n * 1.42860682030941723212e-6;
    double p = 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const std::int64_t bits = (static_cast<std::int64_t>(n) + 1023) << 52;
    double scale;
    std::memcpy(&scale, &bits, sizeof scale);
    return p * scale;
}

constexpr std::size_t kLanes = 8;

// Max and sum with a fixed lane split so the loops vectorise while the
// result stays a deterministic function of the input.
inline double lane_max(const double* x, std::size_t n) {
    double m[kLanes];
    for (std::size_t l = 0; l < kLanes; ++l) m[l] = -INFINITY;
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) m[l] = x[j + l] > m[l] ? x[j + l] : m[l];
    double out = -INFINITY;
    for (std::size_t l = 0; l < kLanes; ++l) out = std::max(out, m[l]);
    for (; j < n; ++j) out = std::max(out, x[j]);
    return out;
}

inline double lane_sum(const double* x, std::size_t n) {
    double s[kLanes] = {};
    std::size_t j = 0;
    for (; j + kLanes <= n; j += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l) s[l] += x[j + l];
    double out = 0.0;
    for (std::size_t l = 0; l < kLanes; ++l) out += s[l];
    for (; j < n; ++j) out += x[j];
    return out;
}

// Per-head transpose: x[S×D] → out[h][e][j] so that loops over keys are
// contiguous.
std::vector<float> head_major(std::span<const float> x, std::size_t S, std::size_t H,
                              std::size_t hd) {
    const std::size_t D = H * hd;
    std::vector<float> out(S * D);
    for (std::size_t j = 0; j < S; ++j)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t e = 0; e < hd; ++e) out[(h * hd + e) * S + j] = x[j * D + h * hd + e];
    return out;
}

// dst[j] = Σ_e x[e]·cols[e][j] for j < n, summed in e order. Vectorises over j.
inline void row_dots(const float* x, const float* cols, std::size_t stride, std::size_t hd,
                     std::size_t n, double* __restrict dst) {
    for (std::size_t j = 0; j < n; ++j) dst[j] = 0.0;
    for (std::size_t e = 0; e < hd; ++e) {
        const double xe = x[e];
        const float* __restrict c = cols + e * stride;
        for (std::size_t j = 0; j < n; ++j) dst[j] += xe * c[j];
    }
}

template <bool Par>
void attention_forward_impl(std::span<const float> q, std::span<const float> k,
                            std::span<const float> v, std::span<const float> gate, float scale,
                            AttnDims d, std::span<float> probs, std::span<float> out) {
    const std::size_t T = d.n_query, S = d.n_key, H = d.n_heads, hd = d.head_dim;
    const std::size_t D = d.model_dim();
    const bool gated = !gate.empty();
    const auto kt = head_major(k, S, H, hd);
#pragma omp parallel if (Par)
    {
        std::vector<double> logits(S);
        std::vector<double> acc(hd);
#pragma omp for schedule(static)
        for (std::ptrdiff_t idx = 0; idx < static_cast<std::ptrdiff_t>(H * T); ++idx) {
            const std::size_t h = static_cast<std::size_t>(idx) / T;
            const std::size_t t = static_cast<std::size_t>(idx) % T;
            const std::size_t visible = d.past + t + 1;
            row_dots(q.data() + t * D + h * hd, kt.data() + h * hd * S, S, hd, visible, logits.data());
            for (std::size_t j = 0; j < visible; ++j) logits[j] *= scale;
            if (gated)
                for (std::size_t j = 0; j < d.past; ++j) logits[j] *= gate[j];
            const double mx = lane_max(logits.data(), visible);
            for (std::size_t j = 0; j < visible; ++j) logits[j] = exp_nonpositive(logits[j] - mx);
            const double denom = lane_sum(logits.data(), visible);
            float* prow = probs.data() + (h * T + t) * S;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t j = 0; j < visible; ++j) {
                const float pj = static_cast<float>(logits[j] / denom);
                prow[j] = pj;
                const float* vrow = v.data() + j * D + h * hd;
                for (std::size_t e = 0; e < hd; ++e) acc[e] += static_cast<double>(pj) * vrow[e];
            }
            for (std::size_t j = visible; j < S; ++j) prow[j] = 0.0f;
            float* orow = out.data() + t * D + h * hd;
            for (std::size_t e = 0; e < hd; ++e) orow[e] = static_cast<float>(acc[e]);
        }
    }
}

template <bool Par>
void attention_backward_impl(std::span<const float> dout, std::span<const float> q,
                             std::span<const float> k, std::span<const float> v,
                             std::span<const float> gate, std::span<const float> probs,
                             float scale, AttnDims d, std::span<float> dq, std::span<float> dk,
                             std::span<float> dv, std::span<float> dgate) {
    const std::size_t T = d.n_query, S = d.n_key, H = d.n_heads, hd = d.head_dim;
    const std::size_t D = d.model_dim();
    const bool gated = !gate.empty();
    const std::size_t P = gated ? d.past : 0;
    const auto kt = head_major(k, S, H, hd);
    const auto vt = head_major(v, S, H, hd);
    // Stored [h][j][t] so the per-key pass below reads contiguously.
    // dlogit: gradient wrt the (gated) pre-softmax logit.
    std::vector<float> dlogit(H * S * T, 0.0f);
    // dgl: dlogit times the ungated logit, for gated keys only.
    std::vector<double> dgl(H * P * T, 0.0);

#pragma omp parallel if (Par)
    {
        std::vector<double> dp(S), pd(S), raw(gated ? S : 0);
        std::vector<double> acc(hd);
#pragma omp for schedule(static)
        for (std::ptrdiff_t idx = 0; idx < static_cast<std::ptrdiff_t>(H * T); ++idx) {
            const std::size_t h = static_cast<std::size_t>(idx) / T;
            const std::size_t t = static_cast<std::size_t>(idx) % T;
            const std::size_t visible = d.past + t + 1;
            const float* prow = probs.data() + (h * T + t) * S;
            const float* grow = dout.data() + t * D + h * hd;
            const float* qrow = q.data() + t * D + h * hd;
            row_dots(grow, vt.data() + h * hd * S, S, hd, visible, dp.data());
            if (P > 0) row_dots(qrow, kt.data() + h * hd * S, S, hd, P, raw.data());
            for (std::size_t j = 0; j < visible; ++j) pd[j] = prow[j] * dp[j];
            const double weighted = lane_sum(pd.data(), visible);
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t j = 0; j < visible; ++j) {
                const double dl = prow[j] * (dp[j] - weighted);
                dlogit[(h * S + j) * T + t] = static_cast<float>(dl);
                const bool gj = j < P;
                if (gj) dgl[(h * P + j) * T + t] = dl * scale * raw[j];
                const double draw = gj ? dl * gate[j] : dl;
                const float* krow = k.data() + j * D + h * hd;
                for (std::size_t e = 0; e < hd; ++e) acc[e] += draw * krow[e];
            }
            float* qg = dq.data() + t * D + h * hd;
            for (std::size_t e = 0; e < hd; ++e) qg[e] += static_cast<float>(scale * acc[e]);
        }
    }

    std::vector<double> gate_part(H * P, 0.0);
#pragma omp parallel if (Par)
    {
        std::vector<double> kacc(hd), vacc(hd);
#pragma omp for schedule(static)
        for (std::ptrdiff_t idx = 0; idx < static_cast<std::ptrdiff_t>(H * S); ++idx) {
            const std::size_t h = static_cast<std::size_t>(idx) / S;
            const std::size_t j = static_cast<std::size_t>(idx) % S;
            const std::size_t t0 = j > d.past ? j - d.past : 0;
            const bool gj = j < P;
            const double g = gj ? gate[j] : 1.0;
            std::fill(kacc.begin(), kacc.end(), 0.0);
            std::fill(vacc.begin(), vacc.end(), 0.0);
            const float* dl_col = dlogit.data() + (h * S + j) * T;
            for (std::size_t t = t0; t < T; ++t) {
                const double draw = dl_col[t] * g;
                const double p = probs[(h * T + t) * S + j];
                const float* qrow = q.data() + t * D + h * hd;
                const float* grow = dout.data() + t * D + h * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                    kacc[e] += draw * qrow[e];
                    vacc[e] += p * grow[e];
                }
            }
            float* kg = dk.data() + j * D + h * hd;
            float* vg = dv.data() + j * D + h * hd;
            for (std::size_t e = 0; e < hd; ++e) {
                kg[e] += static_cast<float>(scale * kacc[e]);
                vg[e] += static_cast<float>(vacc[e]);
            }
            if (gj) {
                double gsum = 0.0;
                const double* col = dgl.data() + (h * P + j) * T;
                for (std::size_t t = t0; t < T; ++t) gsum += col[t];
                gate_part[h * P + j] = gsum;
            }
        }
    }
    if (P > 0 && !dgate.empty()) {
        for (std::size_t j = 0; j < P; ++j) {
            double s = 0.0;
            for (std::size_t h = 0; h < H; ++h) s += gate_part[h * P + j];
            dgate[j] += static_cast<float>(s);
        }
    }
}

}  // namespace

namespace serial {

void matmul_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate) {
    matmul_nn_impl<false>(a, b, c, d, accumulate);
}
void matmul_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate) {
    matmul_nt_impl<false>(a, b, c, d, accumulate);
}
void matmul_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate) {
    matmul_tn_impl<false>(a, b, c, d, accumulate);
}
void attention_forward(std::span<const float> q, std::span<const float> k,
                       std::span<const float> v, std::span<const float> gate, float scale,
                       AttnDims d, std::span<float> probs, std::span<float> out) {
    attention_forward_impl<false>(q, k, v, gate, scale, d, probs, out);
}
void attention_backward(std::span<const float> dout, std::span<const float> q,
                        std::span<const float> k, std::span<const float> v,
                        std::span<const float> gate, std::span<const float> probs, float scale,
                        AttnDims d, std::span<float> dq, std::span<float> dk,
                        std::span<float> dv, std::span<float> dgate) {
    attention_backward_impl<false>(dout, q, k, v, gate, probs, scale, d, dq, dk, dv, dgate);
}

}  // namespace serial

namespace omp {

void matmul_nn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate) {
    matmul_nn_impl<true>(a, b, c, d, accumulate);
}
void matmul_nt(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate) {
    matmul_nt_impl<true>(a, b, c, d, accumulate);
}
void matmul_tn(std::span<const float> a, std::span<const float> b, std::span<float> c,
               MatDims d, bool accumulate) {
    matmul_tn_impl<true>(a, b, c, d, accumulate);
}
void attention_forward(std::span<const float> q, std::span<const float> k,
                       std::span<const float> v, std::span<const float> gate, float scale,
                       AttnDims d, std::span<float> probs, std::span<float> out) {
    attention_forward_impl<true>(q, k, v, gate, scale, d, probs, out);
}
void attention_backward(std::span<const float> dout, std::span<const float> q,
                        std::span<const float> k, std::span<const float> v,
                        std::span<const float> gate, std::span<const float> probs, float scale,
                        AttnDims d, std::span<float> dq, std::span<float> dk,
                        std::span<float> dv, std::span<float> dgate) {
    attention_backward_impl<true>(dout, q, k, v, gate, probs, scale, d, dq, dk, dv, dgate);
}

}  // namespace omp

int max_threads() {
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) {
#if defined(_OPENMP)
    omp_set_num_threads(std::max(1, n));
#else
    (void)n;
#endif
}

}  // namespace kvd::kernels
