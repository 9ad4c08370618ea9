#include "kvd/compressor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace kvd {

std::vector<std::size_t> SelectionPlan::rows() const {
    std::vector<std::size_t> out(sink_count);
    std::iota(out.begin(), out.end(), std::size_t{0});
    out.insert(out.end(), indices.begin(), indices.end());
    return out;
}

std::size_t retained_count(std::size_t n, std::size_t sink_count, double retention) {
    const std::size_t sinks = std::min(sink_count, n);
    return static_cast<std::size_t>(std::llround(retention * static_cast<double>(n - sinks)));
}

SelectionPlan select_topk(std::span<const float> scores, std::size_t k, std::size_t sink_count) {
    const std::size_t n = scores.size();
    const std::size_t sinks = std::min(sink_count, n);
    if (k > n - sinks)
        throw Error("select_topk: k=" + std::to_string(k) + " exceeds " + std::to_string(n - sinks) +
                    " non-sink tokens");
    std::vector<std::size_t> order(n - sinks);
    std::iota(order.begin(), order.end(), sinks);
    for (auto i : order)
        if (std::isnan(scores[i])) throw Error("select_topk: NaN score at " + std::to_string(i));
    auto better = [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
    SelectionPlan plan;
    plan.sink_count = sinks;
    plan.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(plan.indices.begin(), plan.indices.end());
    return plan;
}

std::size_t CompressedCache::byte_size() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < keys.size(); ++l) n += (keys[l].size() + values[l].size()) * sizeof(float);
    return n;
}

bool CompressedCache::shared_positions() const {
    for (const auto& p : positions)
        if (p != positions.front()) return false;
    return true;
}

KvCache CompressedCache::to_kv_cache(bool decay) const {
    KvCache c;
    c.keys = keys;
    c.values = values;
    if (!positions.empty()) c.positions = positions.front();
    c.next_position = static_cast<std::int32_t>(origin_length);
    if (decay && !scores.empty()) c.gate = decay_gate(scores, sink_count);
    c.check();
    return c;
}

namespace {

Tensor take_rows(const Tensor& src, std::span<const std::size_t> rows) {
    const std::size_t d = src.cols();
    Tensor out({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(src.row(rows[i]).begin(), d, out.row(i).begin());
    return out;
}

void check_plan(const KvCache& cache, const SelectionPlan& plan) {
    if (plan.sink_count > cache.length())
        throw Error("apply_selection: more sinks than cached rows");
    for (auto i : plan.indices)
        if (i >= cache.length() || i < plan.sink_count)
            throw Error("apply_selection: index " + std::to_string(i) + " outside the cache");
}

}  // namespace

CompressedCache apply_selection(const KvCache& cache, const SelectionPlan& plan,
                                const ImportanceScores* scores) {
    check_plan(cache, plan);
    const auto rows = plan.rows();
    CompressedCache out;
    out.sink_count = plan.sink_count;
    out.origin_length = cache.length();
    std::vector<std::int32_t> pos;
    for (auto r : rows) pos.push_back(cache.positions[r]);
    for (std::size_t l = 0; l < cache.n_layers(); ++l) {
        out.keys.push_back(take_rows(cache.keys[l], rows));
        out.values.push_back(take_rows(cache.values[l], rows));
        out.positions.push_back(pos);
    }
    if (scores) {
        if (scores->s.size() != cache.length()) throw Error("apply_selection: score count differs from cache");
        for (auto i : plan.indices) out.scores.push_back(scores->s[i]);
    }
    return out;
}

CompressedCache apply_selection(const KvCache& cache, std::span<const SelectionPlan> plans) {
    if (plans.size() != cache.n_layers()) throw Error("apply_selection: need one plan per layer");
    CompressedCache out;
    out.origin_length = cache.length();
    out.sink_count = plans.empty() ? 0 : plans[0].sink_count;
    for (std::size_t l = 0; l < plans.size(); ++l) {
        const auto& plan = plans[l];
        check_plan(cache, plan);
        if (plan.sink_count != out.sink_count || plan.k() != plans[0].k())
            throw Error("apply_selection: per-layer plans differ in size");
        const auto rows = plan.rows();
        std::vector<std::int32_t> pos;
        for (auto r : rows) pos.push_back(cache.positions[r]);
        out.keys.push_back(take_rows(cache.keys[l], rows));
        out.values.push_back(take_rows(cache.values[l], rows));
        out.positions.push_back(std::move(pos));
    }
    return out;
}

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

std::vector<float> decay_attention(std::span<const float> alpha, std::span<const float> scores,
                                   std::size_t sink_count) {
    if (alpha.size() != sink_count + scores.size())
        throw Error("decay_attention: weights do not match sinks + scores");
    std::vector<float> out(alpha.begin(), alpha.end());
    for (std::size_t i = 0; i < scores.size(); ++i)
        out[sink_count + i] = static_cast<float>(sigmoid(scores[i]) * alpha[sink_count + i]);
    return out;
}

std::vector<float> decay_gate(std::span<const float> scores, std::size_t sink_count) {
    std::vector<float> g(sink_count, 1.0f);
    for (float s : scores) g.push_back(static_cast<float>(sigmoid(s)));
    return g;
}

// ---- adapters ------------------------------------------------------------------

std::string adapter_param(int layer, Proj proj, char which) {
    static const char* names[] = {"q", "k", "v", "o"};
    return "adapter." + std::to_string(layer) + "." + names[proj] + "." + which;
}

AdapterSet AdapterSet::init(const ModelConfig& cfg, std::uint64_t seed, float score_bias) {
    cfg.validate();
    AdapterSet a = zeros(cfg);
    std::mt19937_64 rng(seed);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    auto fill = [&rng](Tensor& t, double stddev) {
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : t.values()) v = static_cast<float>(dist(rng));
    };
    for (int l = 0; l < cfg.n_layers; ++l)
        for (Proj p : {kQuery, kKey, kValue, kOutput}) fill(a.tensors[adapter_param(l, p, 'a')], 1.0 / std::sqrt(double(d)));
    std::fill(a.tensors["scorer.norm"].values().begin(), a.tensors["scorer.norm"].values().end(), 1.0f);
    fill(a.tensors["scorer.w1"], 1.0 / std::sqrt(double(d)));
    fill(a.tensors["scorer.w2"], 0.01);
    a.tensors["scorer.b2"][0] = score_bias;
    return a;
}

AdapterSet AdapterSet::zeros(const ModelConfig& cfg) {
    AdapterSet a;
    a.config = cfg;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto r = static_cast<std::size_t>(cfg.adapter_rank);
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (Proj p : {kQuery, kKey, kValue, kOutput}) {
            a.tensors[adapter_param(l, p, 'a')] = Tensor({d, r});
            a.tensors[adapter_param(l, p, 'b')] = Tensor({r, d});
        }
    }
    a.tensors["scorer.norm"] = Tensor({d});
    a.tensors["scorer.w1"] = Tensor({d, 4 * d});
    a.tensors["scorer.b1"] = Tensor({4 * d});
    a.tensors["scorer.w2"] = Tensor({4 * d, 1});
    a.tensors["scorer.b2"] = Tensor({1});
    if (cfg.routing == Routing::Embedding) a.tensors["select_embedding"] = Tensor({1, d});
    return a;
}

const Tensor& AdapterSet::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("adapter parameter '" + name + "' missing");
    return it->second;
}

AdapterVars bind_adapters(ad::Graph& g, const AdapterSet& a, bool trainable) {
    AdapterVars v;
    const auto& cfg = a.config;
    v.hooks.scale = cfg.lora_scale();
    v.hooks.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (Proj p : {kQuery, kKey, kValue, kOutput}) {
            const auto an = adapter_param(l, p, 'a'), bn = adapter_param(l, p, 'b');
            v.hooks.layers[static_cast<std::size_t>(l)][p] =
                LoraPair{g.parameter(an, a.at(an), trainable), g.parameter(bn, a.at(bn), trainable)};
        }
    }
    v.scorer.norm = g.parameter("scorer.norm", a.at("scorer.norm"), trainable);
    v.scorer.w1 = g.parameter("scorer.w1", a.at("scorer.w1"), trainable);
    v.scorer.b1 = g.parameter("scorer.b1", a.at("scorer.b1"), trainable);
    v.scorer.w2 = g.parameter("scorer.w2", a.at("scorer.w2"), trainable);
    v.scorer.b2 = g.parameter("scorer.b2", a.at("scorer.b2"), trainable);
    if (cfg.routing == Routing::Embedding)
        v.select_embedding = g.parameter("select_embedding", a.at("select_embedding"), trainable);
    return v;
}

ad::Var score_tokens(ad::Var hidden, const ScorerVars& s) {
    ad::Var h = ad::rms_norm(hidden, s.norm);
    h = ad::gelu(ad::add_row(ad::matmul(h, s.w1), s.b1));
    return ad::add_row(ad::matmul(h, s.w2), s.b2);
}

ImportanceScores score_tokens(const Tensor& hidden, const AdapterSet& adapters) {
    ad::Graph g(false);
    const AdapterVars v = bind_adapters(g, adapters, false);
    const ad::Var s = score_tokens(g.constant(hidden), v.scorer);
    return {s.value().values()};
}

EncodedSegment encode_segment(ad::Graph& g, const BaseVars& base, const AdapterVars& adapters,
                              const ModelConfig& cfg, std::span<const Token> tokens,
                              std::span<const std::int32_t> positions, std::size_t valid,
                              std::size_t sink_count, double retention) {
    if (!(retention > 0.0 && retention <= 1.0))
        throw Error("retention must lie in (0, 1], got " + std::to_string(retention));
    if (valid > tokens.size()) throw Error("encode_segment: valid rows exceed segment");
    const std::size_t T = tokens.size();
    const bool qo_routing = cfg.routing == Routing::QueryOutput;

    // Pass 1: key/value adapters only (query/output too for the embedding
    // ablation, which applies them to every row).
    EncoderHooks first = adapters.hooks;
    if (qo_routing)
        for (auto& layer : first.layers) layer[kQuery].reset(), layer[kOutput].reset();
    ForwardRequest r1;
    r1.tokens = tokens;
    r1.positions = positions;
    r1.hooks = &first;
    r1.last_layer = cfg.scorer_layer;
    r1.logits = false;
    const ForwardResult f1 = forward(g, base, cfg, r1);
    const ad::Var scores = score_tokens(f1.hidden, adapters.scorer);

    const std::size_t sinks = std::min(sink_count, valid);
    const std::size_t k = retained_count(valid, sink_count, retention);
    std::span<const float> sv = scores.value().span().first(valid);
    EncodedSegment seg;
    seg.plan = select_topk(sv, k, sinks);

    // Pass 2: full encoder with the kept rows routed.
    const auto rows = seg.plan.rows();
    Tensor mask({T, 1});
    for (auto r : rows) mask[r] = 1.0f;
    EncoderHooks second = adapters.hooks;
    const ad::Var mask_var = g.constant(std::move(mask));
    if (qo_routing) {
        second.qo_mask = mask_var;
    } else {
        second.select_embedding = adapters.select_embedding;
        second.embed_mask = mask_var;
    }
    ForwardRequest r2;
    r2.tokens = tokens;
    r2.positions = positions;
    r2.hooks = &second;
    r2.logits = false;
    const ForwardResult f2 = forward(g, base, cfg, r2);

    for (auto r : rows) seg.positions.push_back(positions[r]);
    for (std::size_t l = 0; l < f2.keys.size(); ++l) {
        seg.keys.push_back(ad::gather_rows(f2.keys[l], rows));
        seg.values.push_back(ad::gather_rows(f2.values[l], rows));
    }
    seg.scores = ad::gather_rows(scores, seg.plan.indices);
    const ad::Var ones = g.constant(Tensor({sinks, 1}, 1.0f));
    seg.gate = ad::concat_rows(ones, ad::sigmoid(seg.scores));
    return seg;
}

CompressedCache encode_compressed(const BaseParams& base, const AdapterSet& adapters,
                                  std::span<const Token> context, double retention) {
    const auto& cfg = base.config;
    if (adapters.config.hash() != cfg.hash()) throw Error("encode_compressed: adapters belong to another model");
    if (context.size() > static_cast<std::size_t>(cfg.max_pos))
        throw Error("context of " + std::to_string(context.size()) + " tokens exceeds max_pos");
    const std::size_t n = context.size();
    const auto sinks = static_cast<std::size_t>(cfg.sink_count);
    if (std::min(sinks, n) + retained_count(n, sinks, retention) == 0)
        throw Error("retention " + std::to_string(retention) + " keeps no rows of a " + std::to_string(n) +
                    "-token context");

    ad::Graph g(false);
    const BaseVars bv = bind_base(g, base, false);
    const AdapterVars av = bind_adapters(g, adapters, false);
    std::vector<std::int32_t> positions(n);
    std::iota(positions.begin(), positions.end(), 0);
    ModelConfig run_cfg = cfg;
    run_cfg.routing = adapters.config.routing;
    const EncodedSegment seg = encode_segment(g, bv, av, run_cfg, context, positions, n, sinks, retention);

    CompressedCache out;
    out.sink_count = seg.plan.sink_count;
    out.origin_length = n;
    for (std::size_t l = 0; l < seg.keys.size(); ++l) {
        out.keys.push_back(seg.keys[l].value());
        out.values.push_back(seg.values[l].value());
        out.positions.push_back(seg.positions);
    }
    out.scores = seg.scores.value().values();
    return out;
}

}  // namespace kvd
