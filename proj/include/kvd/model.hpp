#pragma once

// Tiny pre-norm decoder-only transformer with rotary positions and an
// explicit per-layer KV cache.
//
// The same graph-level `forward` serves training, prefill and decode. Two
// hooks let the compressor change its behaviour without the model knowing
// about compression: EncoderHooks add low-rank deltas to the projections
// (optionally masked per row), and a gate vector multiplies the pre-softmax
// logits of past cache rows.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvd/autodiff.hpp"
#include "kvd/config.hpp"
#include "kvd/tensor.hpp"

namespace kvd {

using Token = std::int32_t;
using TokenSequence = std::vector<Token>;
using ParamMap = std::map<std::string, Tensor>;

inline constexpr Token kEosToken = 0;
// Fills folded segments past the end of a context.
inline constexpr Token kPadToken = 2;
// Starts the reconstruction continuation of the autoencoding objective.
inline constexpr Token kReconToken = 6;

// FNV-1a over names, shapes and raw bytes, in name order.
std::uint64_t checksum(const ParamMap& params);

struct BaseParams {
    ModelConfig config;
    ParamMap tensors;

    static BaseParams init(const ModelConfig& config, std::uint64_t seed);
    const Tensor& at(const std::string& name) const;
    std::uint64_t checksum() const { return kvd::checksum(tensors); }
};

std::string layer_param(int layer, const char* name);

// Per-layer keys (post-rotary) and values, one row per cached token.
struct KvCache {
    std::vector<Tensor> keys;    // [layer] rows × d_model
    std::vector<Tensor> values;  // [layer] rows × d_model
    std::vector<std::int32_t> positions;
    // Multiplier on each row's pre-softmax logit; empty means ungated.
    std::vector<float> gate;
    // Position the next appended token receives.
    std::int32_t next_position = 0;

    static KvCache empty(const ModelConfig& config);
    std::size_t length() const { return positions.size(); }
    std::size_t n_layers() const { return keys.size(); }
    std::size_t byte_size() const;
    // Throws if layers disagree in row count or positions are not increasing.
    void check() const;
};

// ---- graph-level forward -------------------------------------------------

struct BaseVars {
    struct Layer {
        ad::Var attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2;
    };
    ad::Var tok_emb, final_norm, lm_head;
    std::vector<Layer> layers;
};

BaseVars bind_base(ad::Graph& g, const BaseParams& params, bool trainable);

struct LoraPair {
    ad::Var a;  // d × r
    ad::Var b;  // r × d
};

enum Proj { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3 };

struct EncoderHooks {
    // layers[l][proj]; missing entries leave that projection frozen.
    std::vector<std::array<std::optional<LoraPair>, 4>> layers;
    float scale = 1.0f;
    // T×1 0/1 column. When set, query/output deltas apply only to rows with 1.
    std::optional<ad::Var> qo_mask;
    // Learned 1×d vector added to the embeddings of rows where embed_mask is 1.
    std::optional<ad::Var> select_embedding;
    std::optional<ad::Var> embed_mask;
};

struct PastKV {
    ad::Var keys;
    ad::Var values;
};

struct ForwardRequest {
    std::span<const Token> tokens;
    std::span<const std::int32_t> positions;
    const std::vector<PastKV>* past = nullptr;  // per layer, may be null for no past
    std::optional<ad::Var> gate;                // length = past rows
    const EncoderHooks* hooks = nullptr;
    int last_layer = -1;                        // -1 runs every layer
    bool logits = true;
    std::vector<std::size_t> logit_rows;        // empty = all rows
    // Receives per-layer head-averaged attention weights, T × (past + T).
    std::vector<Tensor>* attention = nullptr;
};

struct ForwardResult {
    std::vector<ad::Var> keys;    // new rows per layer (post-rotary)
    std::vector<ad::Var> values;  // new rows per layer
    ad::Var hidden;               // residual stream after `last_layer`
    std::optional<ad::Var> logits;
};

// out = base(x) + scale·(x·A)·B
ad::Var adapter_apply(ad::Var base_out, ad::Var x, const LoraPair& pair, float scale);

ForwardResult forward(ad::Graph& g, const BaseVars& base, const ModelConfig& config,
                      const ForwardRequest& req);

// ---- inference entry points ------------------------------------------------

// Prefix cache of `tokens` under the frozen base parameters.
KvCache encode_context(const BaseParams& params, std::span<const Token> tokens);

// Runs `tokens` against `cache`, appends their rows and returns T×V logits.
Tensor prefill(const BaseParams& params, std::span<const Token> tokens, KvCache& cache);

// One autoregressive step. Returns vocab-sized logits.
std::vector<float> decode_step(const BaseParams& params, Token token, KvCache& cache);

// Greedy continuation of `prompt`; the end-of-sequence token is not returned.
TokenSequence generate_greedy(const BaseParams& params, KvCache cache,
                              std::span<const Token> prompt, int max_new);

Token argmax(std::span<const float> logits);

}  // namespace kvd
