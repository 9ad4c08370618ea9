#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "kvd/autodiff.hpp"
#include "kvd/config.hpp"
#include "kvd/model.hpp"
#include "kvd/tensor.hpp"

namespace kvd::test {

inline Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, float lo = -1.0f,
                            float hi = 1.0f) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<float> u(lo, hi);
    for (auto& v : t.values()) v = u(rng);
    return t;
}

// Small model used wherever a trained one is not needed.
inline ModelConfig micro_config() {
    ModelConfig c;
    c.vocab_size = 300;
    c.d_model = 32;
    c.n_heads = 2;
    c.head_dim = 16;
    c.ffn_hidden = 64;
    c.n_layers = 2;
    c.scorer_layer = 0;
    c.max_pos = 512;
    c.adapter_rank = 4;
    c.fold_len = 16;
    return c;
}

inline TokenSequence random_tokens(std::size_t n, int vocab, std::mt19937_64& rng, int lo = 0) {
    TokenSequence t(n);
    std::uniform_int_distribution<int> u(lo, vocab - 1);
    for (auto& x : t) x = static_cast<Token>(u(rng));
    return t;
}

// Random cache with increasing positions.
inline KvCache random_cache(const ModelConfig& cfg, std::size_t n, std::mt19937_64& rng) {
    KvCache c = KvCache::empty(cfg);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    for (std::size_t l = 0; l < c.n_layers(); ++l) {
        c.keys[l] = random_tensor({n, d}, rng);
        c.values[l] = random_tensor({n, d}, rng);
    }
    for (std::size_t i = 0; i < n; ++i) c.positions.push_back(static_cast<std::int32_t>(i));
    c.next_position = static_cast<std::int32_t>(n);
    return c;
}

// Builds an expression of the given leaves.
using Builder = std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)>;

struct GradCheck {
    double rel_error = 0.0;   // ‖analytic − numeric‖ / max(‖analytic‖, floor)
    double analytic_norm = 0.0;
};

// Central differences of Σ w·f(inputs) against the recorded gradient. The
// output is contracted with fixed random weights in double precision.
inline GradCheck check_gradient(const Builder& build, std::vector<Tensor> inputs, double eps = 1e-4,
                                std::uint64_t seed = 7, double floor = 1e-6) {
    std::vector<float> w;
    auto contract = [&](const Tensor& y) {
        if (w.empty()) {
            std::mt19937_64 rng(seed);
            std::uniform_real_distribution<float> u(-1.0f, 1.0f);
            w.resize(y.size());
            for (auto& x : w) x = u(rng);
        }
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(w[i]) * y[i];
        return s;
    };
    auto eval = [&](const std::vector<Tensor>& xs) {
        ad::Graph g(false);
        std::vector<ad::Var> leaves;
        for (std::size_t i = 0; i < xs.size(); ++i) leaves.push_back(g.constant(xs[i]));
        return contract(build(g, leaves).value());
    };
    eval(inputs);

    ad::Graph g;
    std::vector<ad::Var> leaves;
    for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(g.parameter("x" + std::to_string(i), inputs[i]));
    const ad::Var y = build(g, leaves);
    const ad::Var loss = ad::sum(ad::mul(y, g.constant(Tensor(y.shape(), w))));
    g.backward(loss);

    double diff2 = 0.0, norm2 = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor analytic = g.grad(leaves[i]);
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const float orig = inputs[i][j];
            inputs[i][j] = static_cast<float>(orig + eps);
            const double up = eval(inputs);
            inputs[i][j] = static_cast<float>(orig - eps);
            const double down = eval(inputs);
            inputs[i][j] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            diff2 += (analytic[j] - numeric) * (analytic[j] - numeric);
            norm2 += static_cast<double>(analytic[j]) * analytic[j];
        }
    }
    return {std::sqrt(diff2) / std::max(std::sqrt(norm2), floor), std::sqrt(norm2)};
}

}  // namespace kvd::test
