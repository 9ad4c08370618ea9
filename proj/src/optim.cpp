#include "kvd/optim.hpp"

#include <cmath>
#include <numbers>

namespace kvd {

double clip_grad_norm(ParamMap& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (float v : g.values()) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const auto f = static_cast<float>(max_norm / norm);
        for (auto& [name, g] : grads)
            for (float& v : g.values()) v *= f;
    }
    return norm;
}

float AdamW::learning_rate(std::int64_t step) const {
    const double base = config_.lr;
    if (config_.warmup > 0 && step < config_.warmup)
        return static_cast<float>(base * static_cast<double>(step + 1) / config_.warmup);
    const double span = std::max<std::int64_t>(1, config_.steps - config_.warmup);
    const double progress = std::min(1.0, static_cast<double>(step - config_.warmup) / span);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return static_cast<float>(base * (0.1 + 0.9 * cosine));
}

void AdamW::step(ParamMap& params, const ParamMap& grads) {
    const double lr = learning_rate(t_);
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (g.shape() != p.shape()) throw ShapeError("adamw", "gradient shape differs for " + name);
        auto [mit, m_new] = m_.try_emplace(name, Tensor(p.shape()));
        auto [vit, v_new] = v_.try_emplace(name, Tensor(p.shape()));
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        const bool decay = p.rank() == 2 && config_.weight_decay > 0.0f;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
            v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
            const double mhat = m[i] / c1, vhat = v[i] / c2;
            double w = p[i];
            if (decay) w -= lr * config_.weight_decay * w;
            w -= lr * mhat / (std::sqrt(vhat) + config_.adam_eps);
            p[i] = static_cast<float>(w);
        }
    }
}

ParamMap AdamW::state() const {
    ParamMap out;
    for (const auto& [name, t] : m_) out["m." + name] = t;
    for (const auto& [name, t] : v_) out["v." + name] = t;
    return out;
}

void AdamW::load_state(const ParamMap& state, std::int64_t steps_taken) {
    m_.clear();
    v_.clear();
    for (const auto& [key, t] : state) {
        if (key.rfind("m.", 0) == 0) m_[key.substr(2)] = t;
        else if (key.rfind("v.", 0) == 0) v_[key.substr(2)] = t;
        else throw FormatError("optimizer state: unexpected entry '" + key + "'");
    }
    t_ = steps_taken;
}

}  // namespace kvd
