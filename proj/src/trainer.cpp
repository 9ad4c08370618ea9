#include "kvd/trainer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "kvd/cachestore.hpp"
#include "kvd/objective.hpp"

namespace kvd {

TokenSequence DistillExample::continuation() const {
    TokenSequence c = instruction;
    c.insert(c.end(), answer.begin(), answer.end());
    return c;
}

std::vector<std::int32_t> Folding::unfold(std::size_t segment, std::span<const std::size_t> rows) const {
    std::vector<std::int32_t> out;
    for (auto r : rows)
        if (r < valid[segment]) out.push_back(static_cast<std::int32_t>(offset(segment) + r));
    return out;
}

Folding fold_context(std::span<const Token> context, std::size_t fold_len, Token pad) {
    if (fold_len == 0) throw Error("fold_context: fold length must be positive");
    Folding f;
    f.fold_len = fold_len;
    f.length = context.size();
    for (std::size_t start = 0; start < context.size(); start += fold_len) {
        const std::size_t n = std::min(fold_len, context.size() - start);
        TokenSequence seg(context.begin() + static_cast<std::ptrdiff_t>(start),
                          context.begin() + static_cast<std::ptrdiff_t>(start + n));
        seg.resize(fold_len, pad);
        f.segments.push_back(std::move(seg));
        f.valid.push_back(n);
    }
    return f;
}

float sample_retention(std::mt19937_64& rng, float lo, float hi) {
    if (!(lo > 0.0f && lo <= hi && hi <= 1.0f)) throw Error("sample_retention: need 0 < lo <= hi <= 1");
    std::uniform_real_distribution<double> u(std::log(static_cast<double>(lo)), std::log(static_cast<double>(hi)));
    const double r = std::exp(u(rng));
    return static_cast<float>(std::clamp(r, static_cast<double>(lo), static_cast<double>(hi)));
}

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t purpose) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                      static_cast<std::uint32_t>(purpose)};
    return std::mt19937_64(seq);
}

// ---- base language model ----------------------------------------------------------

ad::Var lm_loss(ad::Graph& g, const BaseVars& base, const ModelConfig& cfg, const LmSequence& seq) {
    if (seq.targets.size() != seq.tokens.size()) throw ShapeError("lm_loss", "targets do not match tokens");
    std::vector<std::int32_t> positions(seq.tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    std::vector<std::size_t> rows;
    std::vector<std::int32_t> targets;
    for (std::size_t t = 0; t < seq.targets.size(); ++t)
        if (seq.targets[t] >= 0) {
            rows.push_back(t);
            targets.push_back(seq.targets[t]);
        }
    if (rows.empty()) throw Error("lm_loss: sequence has no targets");
    ForwardRequest req;
    req.tokens = seq.tokens;
    req.positions = positions;
    req.logit_rows = rows;
    const ForwardResult res = forward(g, base, cfg, req);
    return ad::cross_entropy(*res.logits, targets);
}

namespace {

void accumulate(ParamMap& into, const std::map<std::string, Tensor>& grads, float weight) {
    for (const auto& [name, gt] : grads) {
        auto [it, fresh] = into.try_emplace(name, Tensor(gt.shape()));
        Tensor& acc = it->second;
        for (std::size_t i = 0; i < gt.size(); ++i) acc[i] += weight * gt[i];
    }
}

}  // namespace

BaseParams train_base_lm(const ModelConfig& cfg, const TrainConfig& train, const SequenceSource& source,
                         const StepLogger& log) {
    train.validate();
    BaseParams params = BaseParams::init(cfg, train.seed);
    AdamW opt(train);
    for (std::int64_t step = 0; step < train.steps; ++step) {
        auto rng = step_rng(train.seed, step);
        ParamMap grads;
        double loss_sum = 0.0;
        const float w = 1.0f / static_cast<float>(train.batch);
        for (int b = 0; b < train.batch; ++b) {
            const LmSequence seq = source(rng);
            ad::Graph g(true);
            const BaseVars bv = bind_base(g, params, true);
            const ad::Var loss = lm_loss(g, bv, cfg, seq);
            const double lv = loss.value()[0];
            if (!std::isfinite(lv))
                throw DivergenceError("pretraining diverged at step " + std::to_string(step) + " (sequence " +
                                      std::to_string(b) + ", loss " + std::to_string(lv) + ")");
            loss_sum += lv;
            g.backward(loss);
            accumulate(grads, g.parameter_grads(), w);
        }
        const double norm = clip_grad_norm(grads, train.grad_clip);
        const float lr = opt.learning_rate(step);
        opt.step(params.tensors, grads);
        if (log) log({step, loss_sum / train.batch, norm, lr});
    }
    return params;
}

// ---- distillation ------------------------------------------------------------------

StudentCache encode_student(ad::Graph& g, const BaseVars& base, const AdapterVars& adapters,
                            const ModelConfig& cfg, std::span<const Token> context, double retention) {
    if (context.empty()) throw Error("encode_student: empty context");
    const Folding folds = fold_context(context, static_cast<std::size_t>(cfg.fold_len), kPadToken);
    StudentCache sc;
    sc.origin_length = context.size();
    sc.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (std::size_t s = 0; s < folds.segments.size(); ++s) {
        std::vector<std::int32_t> positions(folds.fold_len);
        std::iota(positions.begin(), positions.end(), static_cast<std::int32_t>(folds.offset(s)));
        const std::size_t sinks = s == 0 ? static_cast<std::size_t>(cfg.sink_count) : 0;
        const EncodedSegment seg = encode_segment(g, base, adapters, cfg, folds.segments[s], positions,
                                                  folds.valid[s], sinks, retention);
        sc.positions.insert(sc.positions.end(), seg.positions.begin(), seg.positions.end());
        for (std::size_t l = 0; l < sc.layers.size(); ++l) {
            auto& dst = sc.layers[l];
            dst.keys = s == 0 ? seg.keys[l] : ad::concat_rows(dst.keys, seg.keys[l]);
            dst.values = s == 0 ? seg.values[l] : ad::concat_rows(dst.values, seg.values[l]);
        }
        sc.gate = s == 0 ? seg.gate : ad::concat_rows(sc.gate, seg.gate);
    }
    if (sc.positions.empty()) throw Error("encode_student: retention keeps no rows");
    return sc;
}

Tensor teacher_logits(const BaseParams& base, const DistillExample& ex) {
    const TokenSequence cont = ex.continuation();
    if (cont.size() < 2) throw Error("distillation example needs at least two continuation tokens");
    KvCache cache = encode_context(base, ex.context);
    const std::span<const Token> input(cont.data(), cont.size() - 1);
    return prefill(base, input, cache);
}

ad::Var distill_loss(ad::Graph& g, const BaseParams& base, const BaseVars& bv, const AdapterVars& av,
                     const DistillExample& ex, double retention, Objective objective, float lambda,
                     bool decay) {
    const auto& cfg = base.config;
    const TokenSequence cont = ex.continuation();
    if (cont.size() < 2) throw Error("distillation example needs at least two continuation tokens");
    ModelConfig run_cfg = cfg;
    run_cfg.routing = av.select_embedding ? Routing::Embedding : Routing::QueryOutput;
    const StudentCache sc = encode_student(g, bv, av, run_cfg, ex.context, retention);

    // Continuation under the frozen base parameters, attending to the kept rows.
    auto decode = [&](std::span<const Token> tokens) {
        std::vector<std::int32_t> positions(tokens.size());
        std::iota(positions.begin(), positions.end(), static_cast<std::int32_t>(sc.origin_length));
        ForwardRequest req;
        req.tokens = tokens;
        req.positions = positions;
        req.past = &sc.layers;
        if (decay) req.gate = sc.gate;
        return *forward(g, bv, cfg, req).logits;
    };
    const std::span<const Token> input(cont.data(), cont.size() - 1);
    const ad::Var student = decode(input);

    if (objective == Objective::Mixture) return mixture_loss(teacher_logits(base, ex), student, lambda);

    // Reconstruction: a marker followed by the context, predicting the context.
    TokenSequence recon_in{kReconToken};
    recon_in.insert(recon_in.end(), ex.context.begin(), ex.context.end() - 1);
    const ad::Var recon = decode(recon_in);
    std::vector<std::int32_t> lm_targets(cont.begin() + 1, cont.end());
    return ae_lm_loss(recon, ex.context, student, lm_targets);
}

Distiller::Distiller(const BaseParams& base, AdapterSet adapters, TrainConfig train)
    : base_(base), adapters_(std::move(adapters)), train_(train), optimizer_(train) {
    train_.validate();
    if (adapters_.config.hash() != base_.config.hash())
        throw Error("distiller: adapters and base model configurations differ");
}

double Distiller::step(std::span<const DistillExample> batch) {
    auto rng = step_rng(train_.seed, steps_taken(), 1);
    std::vector<double> ret;
    for (std::size_t i = 0; i < batch.size(); ++i)
        ret.push_back(sample_retention(rng, adapters_.config.retention_min, adapters_.config.retention_max));
    return step(batch, ret);
}

double Distiller::step(std::span<const DistillExample> batch, std::span<const double> retentions) {
    if (batch.empty() || retentions.size() != batch.size()) throw Error("distiller: need one retention per example");
    const auto before = base_.checksum();
    ParamMap grads;
    double loss_sum = 0.0;
    const float w = 1.0f / static_cast<float>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        ad::Graph g(true);
        const BaseVars bv = bind_base(g, base_, false);
        const AdapterVars av = bind_adapters(g, adapters_, true);
        const ad::Var loss = distill_loss(g, base_, bv, av, batch[i], retentions[i], train_.objective,
                                          adapters_.config.lambda);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) {
            std::ostringstream os;
            os << "distillation diverged at step " << steps_taken() << ": example " << i << " (context "
               << batch[i].context.size() << " tokens, retention " << retentions[i] << ") gave loss " << lv;
            throw DivergenceError(os.str());
        }
        loss_sum += lv;
        g.backward(loss);
        accumulate(grads, g.parameter_grads(), w);
    }
    last_.step = steps_taken();
    last_.loss = loss_sum / static_cast<double>(batch.size());
    last_.grad_norm = clip_grad_norm(grads, train_.grad_clip);
    last_.lr = optimizer_.learning_rate(steps_taken());
    optimizer_.step(adapters_.tensors, grads);
    if (base_.checksum() != before) throw Error("distiller: base parameters changed during a step");
    return last_.loss;
}

void Distiller::save(const std::string& path) const {
    save_checkpoint({CheckpointKind::Adapter, adapters_.config.hash(), steps_taken(), adapters_.tensors,
                     optimizer_.state()},
                    path);
}

void Distiller::resume(const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    if (c.kind != CheckpointKind::Adapter) throw FormatError(path + ": not an adapter checkpoint");
    if (c.config_hash != adapters_.config.hash())
        throw FormatError(path + ": checkpoint was written for a different model configuration");
    for (const auto& [name, t] : adapters_.tensors) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end() || it->second.shape() != t.shape())
            throw FormatError(path + ": adapter tensor '" + name + "' missing or reshaped");
    }
    adapters_.tensors = std::move(c.tensors);
    optimizer_.load_state(c.optimizer, c.step);
}

double held_out_divergence(const BaseParams& base, const AdapterSet& adapters,
                           std::span<const DistillExample> examples, double retention) {
    if (examples.empty()) throw Error("held_out_divergence: no examples");
    double total = 0.0;
    for (const auto& ex : examples) {
        const Tensor teacher = teacher_logits(base, ex);
        KvCache cache =
            encode_compressed(base, adapters, ex.context, retention).to_kv_cache(base.config.decay_at_inference);
        const TokenSequence cont = ex.continuation();
        const Tensor student = prefill(base, std::span<const Token>(cont.data(), cont.size() - 1), cache);
        total += mixture_loss_value(teacher, student, adapters.config.lambda);
    }
    return total / static_cast<double>(examples.size());
}

AdapterSet run_distillation(Distiller& d, const DistillSchedule& sched) {
    const TrainConfig& train = d.train_config();
    AdapterSet best = d.adapters();
    double best_div = INFINITY;
    while (d.steps_taken() < train.steps) {
        const std::int64_t step = d.steps_taken();
        auto rng = step_rng(train.seed, step, 0);
        std::vector<DistillExample> batch;
        for (int b = 0; b < train.batch; ++b) batch.push_back(sched.source(rng));
        d.step(batch);
        if (sched.log) sched.log(d.last());
        const bool last = d.steps_taken() == train.steps;
        if (train.eval_every > 0 && !sched.held_out.empty() && (d.steps_taken() % train.eval_every == 0 || last)) {
            const double div = held_out_divergence(d.base(), d.adapters(), sched.held_out, sched.eval_retention);
            if (sched.on_eval) sched.on_eval(d.steps_taken(), div);
            if (div < best_div) {
                best_div = div;
                best = d.adapters();
                if (!sched.best_path.empty()) save_adapters(best, sched.best_path);
            }
            if (!sched.checkpoint_path.empty()) d.save(sched.checkpoint_path);
        }
    }
    if (!std::isfinite(best_div)) best = d.adapters();
    return best;
}

}  // namespace kvd
