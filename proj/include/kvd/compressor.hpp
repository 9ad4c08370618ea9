#pragma once

// Trained cache compression: a scorer reads the adapted encoder's hidden
// states at the scorer layer, the top-k rows of every layer's cache are kept
// (plus leading sink rows), and later queries see the kept rows' logits
// multiplied by sigmoid(score).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvd/autodiff.hpp"
#include "kvd/config.hpp"
#include "kvd/model.hpp"

namespace kvd {

struct ImportanceScores {
    std::vector<float> s;  // one per context token
};

struct SelectionPlan {
    std::size_t sink_count = 0;        // rows [0, sink_count) always kept
    std::vector<std::size_t> indices;  // ascending, all ≥ sink_count

    std::size_t k() const { return indices.size(); }
    // Sinks followed by indices.
    std::vector<std::size_t> rows() const;
};

// Budget for `n` tokens: round(retention · (n − sinks)), sinks = min(sink_count, n).
std::size_t retained_count(std::size_t n, std::size_t sink_count, double retention);

// The k highest scores among positions ≥ sink_count, ties to the lower index,
// returned ascending. Throws if k > n − sinks.
SelectionPlan select_topk(std::span<const float> scores, std::size_t k, std::size_t sink_count);

struct CompressedCache {
    std::vector<Tensor> keys;    // [layer] (sinks + k) × d_model
    std::vector<Tensor> values;  // [layer] (sinks + k) × d_model
    // [layer] original positions of the kept rows. Shared across layers for
    // the trained compressor; per-layer for attention-ledger eviction.
    std::vector<std::vector<std::int32_t>> positions;
    // One score per non-sink row; empty means the rows are never decayed.
    std::vector<float> scores;
    std::size_t sink_count = 0;
    std::size_t origin_length = 0;

    std::size_t rows() const { return keys.empty() ? 0 : keys[0].rows(); }
    std::size_t k() const { return rows() - sink_count; }
    std::size_t n_layers() const { return keys.size(); }
    std::size_t byte_size() const;
    bool shared_positions() const;
    // Cache to decode against; next position continues after the original
    // context. With `decay` and scores present, kept rows are gated.
    KvCache to_kv_cache(bool decay) const;
};

// Copies plan rows of every layer verbatim; `scores` (if given, one per
// context token) supplies the retained scores.
CompressedCache apply_selection(const KvCache& cache, const SelectionPlan& plan,
                                const ImportanceScores* scores = nullptr);
// Per-layer plans; all plans must keep the same number of rows.
CompressedCache apply_selection(const KvCache& cache, std::span<const SelectionPlan> plans);

// α'_i = sigmoid(s_i)·α_i for the retained rows; the first `sink_count`
// entries of alpha are sinks and pass through unchanged.
std::vector<float> decay_attention(std::span<const float> alpha, std::span<const float> scores,
                                   std::size_t sink_count);
// Gate vector [1 × sinks, sigmoid(scores)].
std::vector<float> decay_gate(std::span<const float> scores, std::size_t sink_count);

// ---- trainable state ---------------------------------------------------------

struct AdapterSet {
    ModelConfig config;
    ParamMap tensors;

    // Random A, zero B, random scorer with its output bias at `score_bias`.
    static AdapterSet init(const ModelConfig& config, std::uint64_t seed, float score_bias = 2.0f);
    // Every tensor zero: adapters are the identity and all scores are 0.
    static AdapterSet zeros(const ModelConfig& config);
    const Tensor& at(const std::string& name) const;
    std::uint64_t checksum() const { return kvd::checksum(tensors); }
};

std::string adapter_param(int layer, Proj proj, char which);  // which ∈ {'a','b'}

struct ScorerVars {
    ad::Var norm, w1, b1, w2, b2;
};

struct AdapterVars {
    EncoderHooks hooks;  // LoRA pairs and scale; masks are set per pass
    ScorerVars scorer;
    std::optional<ad::Var> select_embedding;
};

AdapterVars bind_adapters(ad::Graph& g, const AdapterSet& adapters, bool trainable);

// N×1 scores from N×d hidden states.
ad::Var score_tokens(ad::Var hidden, const ScorerVars& scorer);
ImportanceScores score_tokens(const Tensor& hidden, const AdapterSet& adapters);

// Kept rows of one encoded segment, still inside the graph.
struct EncodedSegment {
    SelectionPlan plan;                 // indices relative to the segment
    std::vector<std::int32_t> positions;
    std::vector<ad::Var> keys, values;  // [layer] kept rows
    ad::Var scores;                     // k×1 retained scores (0 rows when k = 0)
    ad::Var gate;                       // (sinks + k)×1
};

// Two-pass compressed encoding of tokens[0, valid) (rows past `valid` are
// padding and never selected). Pass 1 runs the adapted encoder to the scorer
// layer with key/value adapters only, scores and selects; pass 2 runs the
// full encoder with query/output adapters on the selected rows.
EncodedSegment encode_segment(ad::Graph& g, const BaseVars& base, const AdapterVars& adapters,
                              const ModelConfig& config, std::span<const Token> tokens,
                              std::span<const std::int32_t> positions, std::size_t valid,
                              std::size_t sink_count, double retention);

// Inference entry point. Throws when the result would hold no rows.
CompressedCache encode_compressed(const BaseParams& base, const AdapterSet& adapters,
                                  std::span<const Token> context, double retention);

}  // namespace kvd
