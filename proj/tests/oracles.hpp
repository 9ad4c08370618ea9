#pragma once

// Heavier oracles shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "kvd/baselines.hpp"
#include "kvd/compressor.hpp"
#include "kvd/objective.hpp"
#include "kvd/trainer.hpp"
#include "support.hpp"

namespace kvd::test {

// Full stable sort by (score desc, index asc), first k, re-sorted ascending.
inline std::vector<std::size_t> topk_oracle(std::span<const float> scores, std::size_t k, std::size_t sinks) {
    std::vector<std::size_t> idx;
    for (std::size_t i = std::min(sinks, scores.size()); i < scores.size(); ++i) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<std::size_t> topk_oracle(std::span<const double> mass, std::size_t k, std::size_t sinks) {
    std::vector<std::size_t> idx;
    for (std::size_t i = std::min(sinks, mass.size()); i < mass.size(); ++i) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Scores with many ties: values drawn from a small set.
inline std::vector<float> tied_scores(std::size_t n, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> level(0, static_cast<int>(n / 3 + 1));
    std::vector<float> s(n);
    for (auto& x : s) x = 0.25f * static_cast<float>(level(rng));
    return s;
}

// Closed-form KL over probabilities with the 1e-9 floor, in double.
inline double kl_oracle(std::span<const double> p, std::span<const double> q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * (std::log(p[i] + 1e-9) - std::log(q[i] + 1e-9));
    return s;
}

inline std::vector<double> softmax_d(std::span<const float> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
    for (auto& x : p) x /= z;
    return p;
}

struct ScorerGradCheck {
    double rel_error = 0.0;
    double analytic_norm = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // coordinates whose perturbation changed the selection
};

// Finite-difference check of the distillation loss gradient with respect to
// the scorer parameters. Scores reach the loss only through the decay gate.
inline ScorerGradCheck scorer_gradient_check(const BaseParams& base, const AdapterSet& adapters,
                                             const DistillExample& ex, double retention, double eps,
                                             std::size_t max_coords, std::uint64_t seed) {
    auto loss_of = [&](const AdapterSet& a) {
        ad::Graph g(false);
        const BaseVars bv = bind_base(g, base, false);
        const AdapterVars av = bind_adapters(g, a, false);
        return static_cast<double>(
            distill_loss(g, base, bv, av, ex, retention, Objective::Mixture, a.config.lambda).value()[0]);
    };
    auto plan_of = [&](const AdapterSet& a) {
        return encode_compressed(base, a, ex.context, retention).positions.front();
    };

    ad::Graph g;
    const BaseVars bv = bind_base(g, base, false);
    const AdapterVars av = bind_adapters(g, adapters, true);
    g.backward(distill_loss(g, base, bv, av, ex, retention, Objective::Mixture, adapters.config.lambda));
    const auto grads = g.parameter_grads();
    const auto plan = plan_of(adapters);

    std::mt19937_64 rng(seed);
    ScorerGradCheck out;
    double diff2 = 0.0, norm2 = 0.0;
    for (const char* name : {"scorer.norm", "scorer.w1", "scorer.b1", "scorer.w2", "scorer.b2"}) {
        const Tensor& analytic = grads.at(name);
        std::vector<std::size_t> coords(analytic.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        std::shuffle(coords.begin(), coords.end(), rng);
        if (coords.size() > max_coords) coords.resize(max_coords);
        for (auto j : coords) {
            AdapterSet up = adapters, down = adapters;
            up.tensors.at(name)[j] += static_cast<float>(eps);
            down.tensors.at(name)[j] -= static_cast<float>(eps);
            if (plan_of(up) != plan || plan_of(down) != plan) {
                ++out.skipped;
                continue;
            }
            const double h = static_cast<double>(up.tensors.at(name)[j]) - down.tensors.at(name)[j];
            const double numeric = (loss_of(up) - loss_of(down)) / h;
            diff2 += (numeric - analytic[j]) * (numeric - analytic[j]);
            norm2 += static_cast<double>(analytic[j]) * analytic[j];
            ++out.checked;
        }
    }
    out.analytic_norm = std::sqrt(norm2);
    out.rel_error = std::sqrt(diff2) / std::max(out.analytic_norm, 1e-12);
    return out;
}

// Micro-instance for the scorer check: N-token random context, a 2-token
// instruction and a 2-token answer.
inline DistillExample micro_example(const ModelConfig& cfg, std::size_t n, std::mt19937_64& rng) {
    DistillExample ex;
    ex.context = random_tokens(n, cfg.vocab_size, rng, 7);
    ex.context[0] = 1;
    ex.instruction = random_tokens(2, cfg.vocab_size, rng, 7);
    ex.answer = random_tokens(2, cfg.vocab_size, rng, 7);
    return ex;
}

}  // namespace kvd::test
