#include "kvd/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kvd {

AttentionLedger h2_accumulate(std::span<const Tensor> attention, std::size_t context_len, H2Scope scope) {
    AttentionLedger ledger;
    for (const Tensor& a : attention) {
        if (a.cols() < context_len)
            throw ShapeError("h2_accumulate", "attention " + a.shape_str() + " narrower than the context");
        const std::size_t rows = scope == H2Scope::Context ? std::min(context_len, a.rows()) : a.rows();
        std::vector<double> mass(context_len, 0.0);
        for (std::size_t t = 0; t < rows; ++t)
            for (std::size_t j = 0; j < context_len; ++j) mass[j] += a.at(t, j);
        ledger.mass.push_back(std::move(mass));
    }
    return ledger;
}

SelectionPlan h2_select(std::span<const double> mass, std::size_t k, std::size_t sink_count) {
    const std::size_t n = mass.size();
    const std::size_t sinks = std::min(sink_count, n);
    if (k > n - sinks)
        throw Error("h2_select: k=" + std::to_string(k) + " exceeds " + std::to_string(n - sinks) + " non-sink keys");
    std::vector<std::size_t> order(n - sinks);
    std::iota(order.begin(), order.end(), sinks);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return mass[a] != mass[b] ? mass[a] > mass[b] : a < b; });
    SelectionPlan plan;
    plan.sink_count = sinks;
    plan.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(plan.indices.begin(), plan.indices.end());
    return plan;
}

std::vector<SelectionPlan> h2_select(const AttentionLedger& ledger, std::size_t k, std::size_t sink_count) {
    std::vector<SelectionPlan> plans;
    for (const auto& m : ledger.mass) plans.push_back(h2_select(m, k, sink_count));
    return plans;
}

CompressedCache h2_compress(const BaseParams& base, std::span<const Token> context, std::span<const Token> question,
                            double retention, H2Scope scope) {
    const auto& cfg = base.config;
    if (!(retention > 0.0 && retention <= 1.0))
        throw Error("retention must lie in (0, 1], got " + std::to_string(retention));
    const std::size_t n = context.size();
    TokenSequence tokens(context.begin(), context.end());
    if (scope == H2Scope::ContextAndQuestion) tokens.insert(tokens.end(), question.begin(), question.end());
    if (tokens.size() > static_cast<std::size_t>(cfg.max_pos)) throw Error("h2_compress: input exceeds max_pos");

    ad::Graph g(false);
    const BaseVars bv = bind_base(g, base, false);
    std::vector<std::int32_t> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<Tensor> attention;
    ForwardRequest req;
    req.tokens = tokens;
    req.positions = positions;
    req.logits = false;
    req.attention = &attention;
    const ForwardResult res = forward(g, bv, cfg, req);

    KvCache full = KvCache::empty(cfg);
    for (std::size_t l = 0; l < full.n_layers(); ++l) {
        const Tensor& k = res.keys[l].value();
        const Tensor& v = res.values[l].value();
        const std::size_t d = k.cols();
        full.keys[l] = Tensor({n, d}, std::vector<float>(k.values().begin(), k.values().begin() + static_cast<std::ptrdiff_t>(n * d)));
        full.values[l] = Tensor({n, d}, std::vector<float>(v.values().begin(), v.values().begin() + static_cast<std::ptrdiff_t>(n * d)));
    }
    full.positions.assign(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(n));
    full.next_position = static_cast<std::int32_t>(n);

    const auto sinks = static_cast<std::size_t>(cfg.sink_count);
    const std::size_t k = retained_count(n, sinks, retention);
    const AttentionLedger ledger = h2_accumulate(attention, n, scope);
    const auto plans = h2_select(ledger, k, sinks);
    return apply_selection(full, plans);
}

}  // namespace kvd
