#pragma once

#include <cstdint>

#include "kvd/config.hpp"
#include "kvd/model.hpp"

namespace kvd {

// Scales `grads` in place so their global L2 norm is at most `max_norm`
// (0 disables). Returns the norm before clipping.
double clip_grad_norm(ParamMap& grads, double max_norm);

// AdamW with decoupled weight decay on matrices (rank-2 tensors) only.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(const TrainConfig& config) : config_(config) {}

    // Linear warmup, then cosine decay to 10% of the base rate at config.steps.
    float learning_rate(std::int64_t step) const;

    // Applies one update to every entry of `params` that has a gradient.
    void step(ParamMap& params, const ParamMap& grads);

    std::int64_t steps_taken() const { return t_; }

    // Moment estimates keyed "m.<name>" and "v.<name>", for checkpoints.
    ParamMap state() const;
    void load_state(const ParamMap& state, std::int64_t steps_taken);

private:
    TrainConfig config_;
    std::int64_t t_ = 0;
    ParamMap m_, v_;
};

}  // namespace kvd
