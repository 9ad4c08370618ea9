#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kvd/compressor.hpp"
#include "kvd/config.hpp"
#include "kvd/model.hpp"
#include "kvd/optim.hpp"

namespace kvd {

// (context, instruction, answer). The context is compressed; the instruction
// and answer are decoded against it.
struct DistillExample {
    TokenSequence context;
    TokenSequence instruction;
    TokenSequence answer;

    TokenSequence continuation() const;  // instruction followed by answer
};

// One pretraining sequence; targets[t] is the token predicted at t, or -1.
struct LmSequence {
    TokenSequence tokens;
    std::vector<std::int32_t> targets;
};

// Loss went non-finite; the message carries step and batch diagnostics.
class DivergenceError : public Error {
public:
    using Error::Error;
};

struct Folding {
    std::size_t fold_len = 0;
    std::size_t length = 0;                // original context length
    std::vector<TokenSequence> segments;   // each fold_len long
    std::vector<std::size_t> valid;        // non-pad rows per segment

    std::size_t offset(std::size_t segment) const { return segment * fold_len; }
    // Original positions of the given segment rows, dropping pad rows.
    std::vector<std::int32_t> unfold(std::size_t segment, std::span<const std::size_t> rows) const;
};

// Pads to a multiple of fold_len with `pad` and cuts into segments.
Folding fold_context(std::span<const Token> context, std::size_t fold_len, Token pad);

// Log-uniform draw in [lo, hi].
float sample_retention(std::mt19937_64& rng, float lo, float hi);

// Independent stream for (seed, step, purpose); resumed runs replay it exactly.
std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t purpose = 0);

struct StepLog {
    std::int64_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    float lr = 0.0f;
};
using StepLogger = std::function<void(const StepLog&)>;

// ---- base language model ----------------------------------------------------------

using SequenceSource = std::function<LmSequence(std::mt19937_64&)>;

// Mean next-token cross-entropy over the sequence's targets.
ad::Var lm_loss(ad::Graph& g, const BaseVars& base, const ModelConfig& config, const LmSequence& seq);

BaseParams train_base_lm(const ModelConfig& config, const TrainConfig& train, const SequenceSource& source,
                         const StepLogger& log = {});

// ---- distillation ------------------------------------------------------------------

// Student encoding of a context: folded, compressed per fold at one retention,
// re-joined. Rows are graph variables so gradients reach the adapters.
struct StudentCache {
    std::vector<PastKV> layers;
    ad::Var gate;  // rows × 1
    std::vector<std::int32_t> positions;
    std::size_t origin_length = 0;
};

StudentCache encode_student(ad::Graph& g, const BaseVars& base, const AdapterVars& adapters,
                            const ModelConfig& config, std::span<const Token> context, double retention);

// Teacher logits over the continuation rows that are scored: row i predicts
// continuation token i + 1.
Tensor teacher_logits(const BaseParams& base, const DistillExample& ex);

// Loss of one example at one retention, built in `g`. `decay` gates the kept
// rows by their scores; training always uses it.
ad::Var distill_loss(ad::Graph& g, const BaseParams& base, const BaseVars& base_vars,
                     const AdapterVars& adapters, const DistillExample& ex, double retention,
                     Objective objective, float lambda, bool decay = true);

// Owns the adapters and optimizer state of one distillation run. The base
// parameters are never modified.
class Distiller {
public:
    Distiller(const BaseParams& base, AdapterSet adapters, TrainConfig train);

    // One optimizer step; retentions are drawn per example from the step's
    // stream. Returns the mean loss before the update.
    double step(std::span<const DistillExample> batch);
    // Same with explicit retentions (one per example).
    double step(std::span<const DistillExample> batch, std::span<const double> retentions);

    const AdapterSet& adapters() const { return adapters_; }
    std::int64_t steps_taken() const { return optimizer_.steps_taken(); }
    const StepLog& last() const { return last_; }
    const TrainConfig& train_config() const { return train_; }
    const BaseParams& base() const { return base_; }

    void save(const std::string& path) const;
    // Restores adapters, optimizer state and step count from `path`.
    void resume(const std::string& path);

private:
    const BaseParams& base_;
    AdapterSet adapters_;
    TrainConfig train_;
    AdamW optimizer_;
    StepLog last_;
};

using ExampleSource = std::function<DistillExample(std::mt19937_64&)>;

struct DistillSchedule {
    ExampleSource source;
    // Held-out divergence is measured every train.eval_every steps on these
    // examples at `eval_retention`; the best adapters are kept.
    std::vector<DistillExample> held_out;
    double eval_retention = 0.25;
    std::string checkpoint_path;  // saved after every evaluation when set
    std::string best_path;        // best adapters by held-out divergence when set
    StepLogger log;
    std::function<void(std::int64_t step, double divergence)> on_eval;
};

// Held-out divergence of `adapters` at one retention (decay as configured).
double held_out_divergence(const BaseParams& base, const AdapterSet& adapters,
                           std::span<const DistillExample> examples, double retention);

// Runs `distiller` until it has taken train.steps steps. The batch of step t
// is drawn from step_rng(seed, t), so a resumed run continues identically.
// Returns the best adapters by held-out divergence (the final ones when no
// evaluation ran).
AdapterSet run_distillation(Distiller& distiller, const DistillSchedule& schedule);

}  // namespace kvd
