#include "kvd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

namespace kvd {

std::uint64_t checksum(const ParamMap& params) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : params) {
        mix(name.data(), name.size());
        for (auto d : t.shape()) mix(&d, sizeof d);
        mix(t.data(), t.size() * sizeof(float));
    }
    return h;
}

std::string layer_param(int layer, const char* name) {
    return "layers." + std::to_string(layer) + "." + name;
}

BaseParams BaseParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BaseParams p;
    p.config = cfg;
    std::mt19937_64 rng(seed);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto f = static_cast<std::size_t>(cfg.ffn_hidden);
    const auto V = static_cast<std::size_t>(cfg.vocab_size);
    auto normal = [&rng](std::vector<std::size_t> shape, double stddev) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : t.values()) v = static_cast<float>(dist(rng));
        return t;
    };
    const double resid = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    p.tensors["tok_emb"] = normal({V, d}, 1.0);
    for (int l = 0; l < cfg.n_layers; ++l) {
        p.tensors[layer_param(l, "attn_norm")] = Tensor({d}, 1.0f);
        p.tensors[layer_param(l, "wq")] = normal({d, d}, 1.0 / std::sqrt(double(d)));
        p.tensors[layer_param(l, "wk")] = normal({d, d}, 1.0 / std::sqrt(double(d)));
        p.tensors[layer_param(l, "wv")] = normal({d, d}, 1.0 / std::sqrt(double(d)));
        p.tensors[layer_param(l, "wo")] = normal({d, d}, resid / std::sqrt(double(d)));
        p.tensors[layer_param(l, "mlp_norm")] = Tensor({d}, 1.0f);
        p.tensors[layer_param(l, "w1")] = normal({d, f}, 1.0 / std::sqrt(double(d)));
        p.tensors[layer_param(l, "w2")] = normal({f, d}, resid / std::sqrt(double(f)));
    }
    p.tensors["final_norm"] = Tensor({d}, 1.0f);
    return p;
}

const Tensor& BaseParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("base parameter '" + name + "' missing");
    return it->second;
}

KvCache KvCache::empty(const ModelConfig& cfg) {
    KvCache c;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    c.keys.assign(static_cast<std::size_t>(cfg.n_layers), Tensor({0, d}));
    c.values.assign(static_cast<std::size_t>(cfg.n_layers), Tensor({0, d}));
    return c;
}

std::size_t KvCache::byte_size() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < keys.size(); ++l) n += (keys[l].size() + values[l].size()) * sizeof(float);
    return n;
}

void KvCache::check() const {
    if (keys.size() != values.size()) throw Error("kv cache: key/value layer counts differ");
    for (std::size_t l = 0; l < keys.size(); ++l) {
        if (keys[l].rows() != length() || values[l].rows() != length())
            throw Error("kv cache: layer " + std::to_string(l) + " row count differs from positions");
    }
    for (std::size_t i = 1; i < positions.size(); ++i)
        if (positions[i] <= positions[i - 1]) throw Error("kv cache: positions not strictly increasing");
    if (!gate.empty() && gate.size() != length()) throw Error("kv cache: gate length mismatch");
}

BaseVars bind_base(ad::Graph& g, const BaseParams& p, bool trainable) {
    BaseVars b;
    b.tok_emb = g.parameter("tok_emb", p.at("tok_emb"), trainable);
    for (int l = 0; l < p.config.n_layers; ++l) {
        auto bind = [&](const char* n) {
            const auto name = layer_param(l, n);
            return g.parameter(name, p.at(name), trainable);
        };
        BaseVars::Layer L;
        L.attn_norm = bind("attn_norm");
        L.wq = bind("wq");
        L.wk = bind("wk");
        L.wv = bind("wv");
        L.wo = bind("wo");
        L.mlp_norm = bind("mlp_norm");
        L.w1 = bind("w1");
        L.w2 = bind("w2");
        b.layers.push_back(L);
    }
    b.final_norm = g.parameter("final_norm", p.at("final_norm"), trainable);
    // Output projection tied to the embedding table.
    b.lm_head = ad::scale(ad::transpose(b.tok_emb), 1.0f / std::sqrt(static_cast<float>(p.config.d_model)));
    return b;
}

namespace {

ad::Var lora_delta(ad::Var x, const LoraPair& pair, float scale) {
    return ad::scale(ad::matmul(ad::matmul(x, pair.a), pair.b), scale);
}

// Projection with an optional (optionally row-masked) low-rank delta.
ad::Var project(ad::Var x, ad::Var w, const EncoderHooks* hooks, int layer, Proj which) {
    ad::Var y = ad::matmul(x, w);
    if (!hooks || hooks->layers.empty()) return y;
    const auto& slot = hooks->layers[static_cast<std::size_t>(layer)][which];
    if (!slot) return y;
    ad::Var delta = lora_delta(x, *slot, hooks->scale);
    if ((which == kQuery || which == kOutput) && hooks->qo_mask) delta = ad::mul_col(delta, *hooks->qo_mask);
    return ad::add(y, delta);
}

}  // namespace

ad::Var adapter_apply(ad::Var base_out, ad::Var x, const LoraPair& pair, float scale) {
    return ad::add(base_out, lora_delta(x, pair, scale));
}

ForwardResult forward(ad::Graph& /*g*/, const BaseVars& base, const ModelConfig& cfg,
                      const ForwardRequest& req) {
    const std::size_t T = req.tokens.size();
    if (req.positions.size() != T) throw ShapeError("forward", "positions do not match tokens");
    const int last = req.last_layer < 0 ? cfg.n_layers - 1 : req.last_layer;
    if (last >= cfg.n_layers) throw ShapeError("forward", "last_layer beyond model depth");
    const std::size_t past_rows = req.past ? (*req.past)[0].keys.rows() : 0;
    const auto H = static_cast<std::size_t>(cfg.n_heads);

    ad::Var x = ad::embedding(base.tok_emb, req.tokens);
    if (req.hooks && req.hooks->select_embedding && req.hooks->embed_mask)
        x = ad::add(x, ad::matmul(*req.hooks->embed_mask, *req.hooks->select_embedding));

    ForwardResult out;
    for (int l = 0; l <= last; ++l) {
        const auto& L = base.layers[static_cast<std::size_t>(l)];
        ad::Var h = ad::rms_norm(x, L.attn_norm);
        ad::Var q = project(h, L.wq, req.hooks, l, kQuery);
        ad::Var k = project(h, L.wk, req.hooks, l, kKey);
        ad::Var v = project(h, L.wv, req.hooks, l, kValue);
        q = ad::rope(q, req.positions, H, cfg.rope_base);
        k = ad::rope(k, req.positions, H, cfg.rope_base);
        out.keys.push_back(k);
        out.values.push_back(v);
        ad::Var kall = k, vall = v;
        if (req.past) {
            const auto& pkv = (*req.past)[static_cast<std::size_t>(l)];
            kall = ad::concat_rows(pkv.keys, k);
            vall = ad::concat_rows(pkv.values, v);
        }
        Tensor probs;
        ad::AttentionArgs args{H, past_rows, req.gate, req.attention ? &probs : nullptr};
        ad::Var a = ad::attention(q, kall, vall, args);
        if (req.attention) {
            const std::size_t S = past_rows + T;
            Tensor avg({T, S});
            for (std::size_t hh = 0; hh < H; ++hh)
                for (std::size_t i = 0; i < T * S; ++i) avg[i] += probs[hh * T * S + i];
            for (auto& v2 : avg.values()) v2 /= static_cast<float>(H);
            req.attention->push_back(std::move(avg));
        }
        x = ad::add(x, project(a, L.wo, req.hooks, l, kOutput));
        ad::Var h2 = ad::rms_norm(x, L.mlp_norm);
        x = ad::add(x, ad::matmul(ad::gelu(ad::matmul(h2, L.w1)), L.w2));
    }
    out.hidden = x;
    if (req.logits && last == cfg.n_layers - 1 && T > 0) {
        ad::Var xf = req.logit_rows.empty() ? x : ad::gather_rows(x, req.logit_rows);
        out.logits = ad::matmul(ad::rms_norm(xf, base.final_norm), base.lm_head);
    }
    return out;
}

namespace {

std::vector<PastKV> bind_cache(ad::Graph& g, const KvCache& cache) {
    std::vector<PastKV> past;
    for (std::size_t l = 0; l < cache.n_layers(); ++l)
        past.push_back({g.constant(cache.keys[l]), g.constant(cache.values[l])});
    return past;
}

void append_rows(Tensor& dst, const Tensor& rows) {
    const std::size_t d = rows.cols();
    std::vector<float> data = dst.values();
    data.insert(data.end(), rows.values().begin(), rows.values().end());
    const std::size_t n = dst.rows() + rows.rows();
    dst = Tensor({n, d}, std::move(data));
}

}  // namespace

Tensor prefill(const BaseParams& params, std::span<const Token> tokens, KvCache& cache) {
    const auto& cfg = params.config;
    const std::size_t T = tokens.size();
    if (T == 0) return Tensor({0, static_cast<std::size_t>(cfg.vocab_size)});
    if (cache.next_position + static_cast<std::int64_t>(T) > cfg.max_pos)
        throw Error("sequence would exceed max_pos " + std::to_string(cfg.max_pos));
    if (cache.keys.empty()) cache = KvCache::empty(cfg);

    ad::Graph g(false);
    const BaseVars base = bind_base(g, params, false);
    std::vector<PastKV> past;
    if (cache.length() > 0) past = bind_cache(g, cache);
    std::vector<std::int32_t> positions(T);
    for (std::size_t t = 0; t < T; ++t) positions[t] = cache.next_position + static_cast<std::int32_t>(t);

    ForwardRequest req;
    req.tokens = tokens;
    req.positions = positions;
    req.past = past.empty() ? nullptr : &past;
    if (!cache.gate.empty() && cache.length() > 0) req.gate = g.constant(Tensor::vector(cache.gate));
    const ForwardResult res = forward(g, base, cfg, req);

    for (std::size_t l = 0; l < cache.n_layers(); ++l) {
        append_rows(cache.keys[l], res.keys[l].value());
        append_rows(cache.values[l], res.values[l].value());
    }
    cache.positions.insert(cache.positions.end(), positions.begin(), positions.end());
    if (!cache.gate.empty()) cache.gate.insert(cache.gate.end(), T, 1.0f);
    cache.next_position += static_cast<std::int32_t>(T);
    return res.logits->value();
}

KvCache encode_context(const BaseParams& params, std::span<const Token> tokens) {
    if (tokens.size() > static_cast<std::size_t>(params.config.max_pos))
        throw Error("context of " + std::to_string(tokens.size()) + " tokens exceeds max_pos " +
                    std::to_string(params.config.max_pos));
    KvCache cache = KvCache::empty(params.config);
    prefill(params, tokens, cache);
    return cache;
}

std::vector<float> decode_step(const BaseParams& params, Token token, KvCache& cache) {
    if (cache.next_position >= params.config.max_pos)
        throw Error("decode_step: cache already at max_pos " + std::to_string(params.config.max_pos));
    const Token one[1] = {token};
    Tensor logits = prefill(params, one, cache);
    return std::move(logits.values());
}

Token argmax(std::span<const float> logits) {
    return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

TokenSequence generate_greedy(const BaseParams& params, KvCache cache, std::span<const Token> prompt,
                              int max_new) {
    if (prompt.empty()) throw Error("generate_greedy: prompt must be non-empty");
    TokenSequence out;
    if (max_new <= 0) return out;
    Tensor logits = prefill(params, prompt, cache);
    std::vector<float> last(logits.row(logits.rows() - 1).begin(), logits.row(logits.rows() - 1).end());
    while (true) {
        const Token tok = argmax(last);
        if (tok == kEosToken) break;
        out.push_back(tok);
        if (static_cast<int>(out.size()) >= max_new || cache.next_position >= params.config.max_pos) break;
        last = decode_step(params, tok, cache);
    }
    return out;
}

}  // namespace kvd
