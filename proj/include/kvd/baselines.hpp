#pragma once

// Training-free heavy-hitter eviction: keep the context keys that received the
// most attention, per layer, plus the leading sink rows.

#include <span>
#include <vector>

#include "kvd/compressor.hpp"
#include "kvd/model.hpp"

namespace kvd {

enum class H2Scope {
    Context,             // question-independent: only context queries vote
    ContextAndQuestion,  // question-aware: question queries vote too
};

struct AttentionLedger {
    std::vector<std::vector<double>> mass;  // [layer][context key]
};

// attention[l] is the head-averaged T × S weight matrix of layer l, with the
// first `context_len` rows and columns belonging to the context. Sums the
// in-scope query rows into each context key's column; the context scope
// takes at most `context_len` rows.
AttentionLedger h2_accumulate(std::span<const Tensor> attention, std::size_t context_len, H2Scope scope);

// Top-k non-sink keys by accumulated mass for one layer; ties to the lower index.
SelectionPlan h2_select(std::span<const double> mass, std::size_t k, std::size_t sink_count);
std::vector<SelectionPlan> h2_select(const AttentionLedger& ledger, std::size_t k, std::size_t sink_count);

// Full pipeline: encode (context, or context + question for the aware scope),
// accumulate, select per layer and keep the context rows. The question is not
// part of the returned cache.
CompressedCache h2_compress(const BaseParams& base, std::span<const Token> context,
                            std::span<const Token> question, double retention, H2Scope scope);

}  // namespace kvd
