// Acceptance suite. Prints one line per criterion:
//   criterion <n> PASS|FAIL <details>
// Trained artifacts are cached under --cache-dir, keyed by the configuration
// that produced them, so later runs only evaluate.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "kvd/baselines.hpp"
#include "kvd/cachestore.hpp"
#include "kvd/harness.hpp"
#include "oracles.hpp"

using namespace kvd;
using namespace kvd::test;
namespace fs = std::filesystem;

#ifndef KVD_ACCEPTANCE_CACHE
#define KVD_ACCEPTANCE_CACHE "acceptance_cache"
#endif

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 3) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

std::uint64_t fnv(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

// ---- training recipes ------------------------------------------------------------

RunConfig base_recipe() { return RunConfig::defaults(); }

TrainConfig needle_distill_recipe() {
    TrainConfig t;
    t.lr = 1e-3f;
    t.batch = 8;
    t.steps = 600;
    t.seed = 1;
    t.warmup = 20;
    t.eval_every = 100;
    t.max_len = 512;
    return t;
}

struct Variant {
    std::string name;
    float lambda = 0.6f;
    Objective objective = Objective::Mixture;
    Routing routing = Routing::QueryOutput;
};

const std::vector<Variant>& ablation_variants() {
    static const std::vector<Variant> v{
        {"mixture", 0.6f, Objective::Mixture, Routing::QueryOutput},
        {"forward", 1.0f, Objective::Mixture, Routing::QueryOutput},
        {"reverse", 0.0f, Objective::Mixture, Routing::QueryOutput},
        {"ae_lm", 0.6f, Objective::AeLm, Routing::QueryOutput},
        {"embedding", 0.6f, Objective::Mixture, Routing::Embedding},
    };
    return v;
}

TrainConfig ablation_recipe(std::uint64_t seed) {
    TrainConfig t;
    t.lr = 1e-3f;
    t.batch = 4;
    t.steps = 150;
    t.seed = seed;
    t.warmup = 10;
    return t;
}

QaSpec ablation_qa() {
    QaSpec s;
    s.min_len = 64;
    s.max_len = 128;
    return s;
}

constexpr float kAblationRetention = 0.10f;
constexpr int kAblationExamples = 100;
constexpr float kScoreBias = 0.0f;

// ---- cached artifacts -------------------------------------------------------------

class Artifacts {
public:
    explicit Artifacts(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

    const BaseParams& base() {
        if (!base_) {
            const RunConfig rc = base_recipe();
            const fs::path path = dir_ / ("base-" + hex(fnv(rc.to_text())) + ".ckpt");
            if (fs::exists(path)) {
                base_ = load_base(path.string(), rc.model);
            } else {
                std::clog << "training base model (" << rc.pretrain.steps << " steps) -> " << path << "\n";
                const auto t0 = Clock::now();
                const ModelConfig mc = rc.model;
                const int max_len = std::min(rc.pretrain.max_len, mc.max_pos);
                base_ = train_base_lm(
                    mc, rc.pretrain,
                    [&](std::mt19937_64& r) { return sample_pretrain_sequence(max_len, mc.vocab_size, r); },
                    [&](const StepLog& s) {
                        if ((s.step + 1) % 100 == 0)
                            std::clog << "  pretrain step " << s.step + 1 << " loss " << s.loss << "\n";
                    });
                save_base(*base_, path.string());
                std::clog << "  base trained in " << seconds_since(t0) << " s\n";
            }
        }
        return *base_;
    }

    // Adapters distilled on the mixed needle/QA stream; also reports the
    // wall-clock seconds the distillation took.
    const AdapterSet& needle_adapters(double* seconds = nullptr) {
        if (!needle_) {
            const TrainConfig tc = needle_distill_recipe();
            const ModelConfig mc = base().config;
            const std::string key = hex(fnv(base_recipe().to_text() + "|needle|" + train_key(tc)));
            const fs::path path = dir_ / ("kvd-" + key + ".ckpt");
            const fs::path time_path = dir_ / ("kvd-" + key + ".seconds");
            if (fs::exists(path) && fs::exists(time_path)) {
                needle_ = load_adapters(path.string(), mc);
                std::ifstream(time_path) >> needle_seconds_;
            } else {
                std::clog << "distilling needle adapters (" << tc.steps << " steps) -> " << path << "\n";
                const int max_len = std::min(tc.max_len, mc.max_pos - 16);
                const auto t0 = Clock::now();
                needle_ = distill(mc, tc, [&](std::mt19937_64& r) {
                    return sample_distill_example(max_len, mc.vocab_size, r);
                });
                needle_seconds_ = seconds_since(t0);
                save_adapters(*needle_, path.string());
                std::ofstream(time_path) << needle_seconds_ << "\n";
            }
        }
        if (seconds) *seconds = needle_seconds_;
        return *needle_;
    }

    AdapterSet ablation_adapters(const Variant& v, std::uint64_t seed) {
        ModelConfig mc = base().config;
        mc.lambda = v.lambda;
        mc.routing = v.routing;
        TrainConfig tc = ablation_recipe(seed);
        tc.objective = v.objective;
        const std::string key = hex(fnv(base_recipe().to_text() + "|ablation|" + v.name + "|" + train_key(tc)));
        const fs::path path = dir_ / ("ablation-" + v.name + "-" + std::to_string(seed) + "-" + key + ".ckpt");
        if (fs::exists(path)) return load_adapters(path.string(), mc);
        std::clog << "distilling ablation " << v.name << " seed " << seed << " -> " << path << "\n";
        const QaSpec qa = ablation_qa();
        AdapterSet a = distill(mc, tc, [&](std::mt19937_64& r) { return make_qa(qa, mc.vocab_size, r); });
        save_adapters(a, path.string());
        return a;
    }

private:
    static std::string train_key(const TrainConfig& t) {
        std::ostringstream os;
        os << t.lr << "," << t.batch << "," << t.steps << "," << t.seed << "," << t.warmup << ","
           << t.eval_every << "," << t.max_len << "," << static_cast<int>(t.objective) << "," << kScoreBias;
        return os.str();
    }

    AdapterSet distill(const ModelConfig& mc, const TrainConfig& tc, const ExampleSource& source) {
        BaseParams run_base = base();
        run_base.config = mc;
        Distiller d(run_base, AdapterSet::init(mc, tc.seed, kScoreBias), tc);
        DistillSchedule sched;
        sched.source = source;
        std::mt19937_64 held(tc.seed ^ 0x5eedf00dull);
        if (tc.eval_every > 0)
            for (int i = 0; i < 16; ++i) sched.held_out.push_back(source(held));
        sched.log = [](const StepLog& s) {
            if ((s.step + 1) % 50 == 0) std::clog << "  step " << s.step + 1 << " loss " << s.loss << "\n";
        };
        sched.on_eval = [](std::int64_t s, double div) {
            std::clog << "  step " << s << " held-out divergence " << div << "\n";
        };
        return run_distillation(d, sched);
    }

    fs::path dir_;
    std::optional<BaseParams> base_;
    std::optional<AdapterSet> needle_;
    double needle_seconds_ = 0.0;
};

// ---- criteria ---------------------------------------------------------------------

Outcome identity_recovery(Artifacts& art) {
    const BaseParams& base = art.base();
    const AdapterSet zero = AdapterSet::zeros(base.config);
    const auto t0 = Clock::now();
    std::mt19937_64 rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 256;
        const TokenSequence ctx = random_tokens(n, base.config.vocab_size, rng);
        const TokenSequence q = random_tokens(4, base.config.vocab_size, rng);
        KvCache full = encode_context(base, ctx);
        KvCache comp = encode_compressed(base, zero, ctx, 1.0).to_kv_cache(false);
        const Tensor a = prefill(base, q, full), b = prefill(base, q, comp);
        for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(double(a[i]) - b[i]));
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 60.0, "max |dlogit| " + fmt(worst) + " over 100 contexts in " + fmt(secs) + " s"};
}

Outcome scorer_gradient() {
    const ModelConfig cfg = micro_config();
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (int i = 0; i < 20; ++i) {
        std::mt19937_64 rng(200 + i);
        const BaseParams base = BaseParams::init(cfg, 300 + i);
        const AdapterSet adapters = AdapterSet::init(cfg, 400 + i, kScoreBias);
        const DistillExample ex = micro_example(cfg, 16, rng);
        const ScorerGradCheck c = scorer_gradient_check(base, adapters, ex, 0.5, 3e-3, 24, 500 + i);
        worst = std::max(worst, c.rel_error);
        checked += c.checked;
        skipped += c.skipped;
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-2 && checked > 0 && secs < 120.0,
            "worst rel err " + fmt(worst) + " (" + std::to_string(checked) + " coords, " + std::to_string(skipped) +
                " skipped at selection boundaries) in " + fmt(secs) + " s"};
}

Tensor student_grad(const Tensor& teacher, const Tensor& student, float lambda) {
    ad::Graph g;
    auto s = g.parameter("s", student);
    g.backward(mixture_loss(teacher, s, lambda));
    return g.grad(s);
}

Outcome objective_correctness() {
    std::mt19937_64 rng(600);
    std::normal_distribution<float> n(0.0f, 2.0f);
    double worst = 0.0, worst_end = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t V = 2 + rng() % 62, T = 1 + rng() % 4;
        Tensor t({T, V}), s({T, V});
        for (auto& x : t.values()) x = n(rng);
        for (auto& x : s.values()) x = n(rng);
        const float lambda = std::uniform_real_distribution<float>(0.0f, 1.0f)(rng);
        double fwd = 0.0, rev = 0.0;
        for (std::size_t r = 0; r < T; ++r) {
            const auto p = softmax_d(t.row(r)), q = softmax_d(s.row(r));
            fwd += kl_oracle(p, q) / static_cast<double>(T);
            rev += kl_oracle(q, p) / static_cast<double>(T);
        }
        worst = std::max(worst, std::fabs(mixture_loss_value(t, s, lambda) - (lambda * fwd + (1 - lambda) * rev)));
        worst_end = std::max({worst_end, std::fabs(mixture_loss_value(t, s, 1.0f) - fwd),
                              std::fabs(mixture_loss_value(t, s, 0.0f) - rev)});
    }
    // Student and teacher logits drawn at the model's vocabulary size.
    int dominated = 0;
    const int trials = 200;
    double sum_rev = 0.0, sum_fwd = 0.0;
    std::normal_distribution<float> logit(0.0f, 2.0f);
    auto l1 = [](const Tensor& g) {
        double a = 0.0;
        for (float x : g.values()) a += std::fabs(x);
        return a;
    };
    for (int i = 0; i < trials; ++i) {
        Tensor t({1, 512}), s({1, 512});
        for (auto& x : t.values()) x = logit(rng);
        for (auto& x : s.values()) x = logit(rng);
        const double rev = l1(student_grad(t, s, 0.0f)), fwd = l1(student_grad(t, s, 1.0f));
        sum_rev += rev;
        sum_fwd += fwd;
        dominated += rev >= fwd;
    }
    return {worst < 1e-6 && worst_end < 1e-6 && dominated * 2 > trials && sum_rev >= sum_fwd,
            "oracle err " + fmt(worst) + ", endpoint err " + fmt(worst_end) + ", reverse dominates " +
                std::to_string(dominated) + "/" + std::to_string(trials) + " (mean L1 ratio " + fmt(sum_rev / sum_fwd) + ")"};
}

Outcome selection_oracles() {
    std::mt19937_64 rng(700);
    int topk_bad = 0, h2_bad = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t n = 1 + rng() % 128, sinks = rng() % 8;
        const std::size_t avail = n - std::min(sinks, n);
        const std::size_t k = avail == 0 ? 0 : rng() % (avail + 1);
        std::vector<float> s = trial % 2 ? tied_scores(n, rng) : std::vector<float>(n);
        if (trial % 2 == 0)
            for (auto& x : s) x = std::normal_distribution<float>(0.0f, 1.0f)(rng);
        topk_bad += select_topk(s, k, sinks).indices != topk_oracle(std::span<const float>(s), k, sinks);
        std::vector<double> m(n);
        for (std::size_t i = 0; i < n; ++i) m[i] = trial % 2 ? double(s[i]) : std::uniform_real_distribution<double>(0, 3)(rng);
        h2_bad += h2_select(m, k, sinks).indices != topk_oracle(std::span<const double>(m), k, sinks);
    }
    return {topk_bad == 0 && h2_bad == 0, "mismatches over 10^4 vectors: select_topk " + std::to_string(topk_bad) +
                                              ", h2_select " + std::to_string(h2_bad)};
}

Outcome folding_equivalence(Artifacts& art) {
    const BaseParams& base = art.base();
    const AdapterSet& adapters = art.needle_adapters();
    const ModelConfig& cfg = base.config;
    const auto F = static_cast<std::size_t>(cfg.fold_len);
    std::mt19937_64 rng(800);
    std::string detail;
    bool ok = F == 128;
    for (std::size_t m : {1, 2, 4}) {
        const TokenSequence ctx = random_tokens(m * F, cfg.vocab_size, rng);
        ad::Graph g(false);
        const BaseVars bv = bind_base(g, base, false);
        const AdapterVars av = bind_adapters(g, adapters, false);
        const StudentCache folded = encode_student(g, bv, av, cfg, ctx, 0.25);
        std::vector<std::int32_t> positions;
        std::vector<std::vector<float>> keys(cfg.n_layers), values(cfg.n_layers);
        for (std::size_t s = 0; s < m; ++s) {
            ad::Graph gs(false);
            const BaseVars bvs = bind_base(gs, base, false);
            const AdapterVars avs = bind_adapters(gs, adapters, false);
            const TokenSequence seg(ctx.begin() + static_cast<std::ptrdiff_t>(s * F),
                                    ctx.begin() + static_cast<std::ptrdiff_t>((s + 1) * F));
            std::vector<std::int32_t> pos(F);
            std::iota(pos.begin(), pos.end(), static_cast<std::int32_t>(s * F));
            const std::size_t sinks = s == 0 ? static_cast<std::size_t>(cfg.sink_count) : 0;
            const EncodedSegment e = encode_segment(gs, bvs, avs, cfg, seg, pos, F, sinks, 0.25);
            positions.insert(positions.end(), e.positions.begin(), e.positions.end());
            for (int l = 0; l < cfg.n_layers; ++l) {
                const auto& kv = e.keys[l].value().values();
                const auto& vv = e.values[l].value().values();
                keys[l].insert(keys[l].end(), kv.begin(), kv.end());
                values[l].insert(values[l].end(), vv.begin(), vv.end());
            }
        }
        bool same = folded.positions == positions;
        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto& fk = folded.layers[l].keys.value().values();
            const auto& fv = folded.layers[l].values.value().values();
            same = same && fk.size() == keys[l].size() && fv.size() == values[l].size() &&
                   std::memcmp(fk.data(), keys[l].data(), fk.size() * sizeof(float)) == 0 &&
                   std::memcmp(fv.data(), values[l].data(), fv.size() * sizeof(float)) == 0;
        }
        ok = ok && same;
        detail += "m=" + std::to_string(m) + (same ? " identical" : " DIFFERENT") + (m < 4 ? ", " : "");
    }
    return {ok, detail + " (F=" + std::to_string(F) + ")"};
}

Outcome serialization(Artifacts& art, const fs::path& dir) {
    const BaseParams& base = art.base();
    const AdapterSet& adapters = art.needle_adapters();
    const ModelConfig& cfg = base.config;
    const std::string p1 = (dir / "roundtrip1.kvd").string(), p2 = (dir / "roundtrip2.kvd").string();
    auto bytes = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    };
    int identical = 0, same_tokens = 0;
    const int trials = 20;
    const auto corpus = gen_needle_corpus(trials, 64, 512, cfg.vocab_size, 900);
    for (int i = 0; i < trials; ++i) {
        const auto& ex = corpus[static_cast<std::size_t>(i)];
        const float rho = std::array<float, 4>{1.0f, 0.25f, 0.1f, 0.05f}[static_cast<std::size_t>(i % 4)];
        const CompressedCache cache = encode_compressed(base, adapters, ex.context, rho);
        save_cache(cache, cfg, p1);
        const CompressedCache loaded = load_cache(p1, cfg);
        save_cache(loaded, cfg, p2);
        bool same = bytes(p1) == bytes(p2) && loaded.positions == cache.positions && loaded.scores == cache.scores;
        for (std::size_t l = 0; l < cache.n_layers(); ++l)
            same = same && loaded.keys[l].values() == cache.keys[l].values() &&
                   loaded.values[l].values() == cache.values[l].values();
        identical += same;
        const bool decay = cfg.decay_at_inference;
        same_tokens += generate_greedy(base, cache.to_kv_cache(decay), ex.instruction, 16) ==
                       generate_greedy(base, loaded.to_kv_cache(decay), ex.instruction, 16);
    }
    fs::remove(p1);
    fs::remove(p2);
    return {identical == trials && same_tokens == trials,
            "bit-identical " + std::to_string(identical) + "/" + std::to_string(trials) + ", same generation " +
                std::to_string(same_tokens) + "/" + std::to_string(trials)};
}

Outcome memory_accounting(Artifacts& art, const fs::path& dir) {
    const BaseParams& base = art.base();
    const AdapterSet& adapters = art.needle_adapters();
    const ModelConfig& cfg = base.config;
    const std::size_t n = 1024;
    std::mt19937_64 rng(1000);
    const TokenSequence ctx = random_tokens(n, cfg.vocab_size, rng);
    const double full = 4.0 * 2.0 * cfg.n_layers * static_cast<double>(n) * cfg.d_model;
    const std::string path = (dir / "memory.kvd").string();
    bool ok = true;
    std::string detail;
    for (double rho : {1.0, 0.25, 0.10, 0.05, 0.01}) {
        const CompressedCache c = encode_compressed(base, adapters, ctx, rho);
        const std::size_t written = save_cache(c, cfg, path);
        const double size = static_cast<double>(fs::file_size(path));
        const double eff = static_cast<double>(c.rows()) / static_cast<double>(n);
        const double ratio = size / full;
        ok = ok && written == fs::file_size(path) && ratio >= eff && ratio <= eff + 0.02;
        detail += "rho " + fmt(rho) + ": " + fmt(ratio, 4) + " in [" + fmt(eff, 4) + ", " + fmt(eff + 0.02, 4) + "]; ";
    }
    fs::remove(path);
    detail.resize(detail.size() - 2);
    return {ok, detail};
}

Outcome end_to_end(Artifacts& art, int trials, std::ostream* table) {
    const BaseParams& base = art.base();
    double distill_seconds = 0.0;
    const AdapterSet& adapters = art.needle_adapters(&distill_seconds);
    const RunConfig rc = base_recipe();

    GridSpec full;
    full.lengths = rc.eval_lengths;
    full.retentions = {1.0f};
    full.trials = trials;
    full.seed = 1100;
    const EvalGrid none = eval_needle(base, make_compressor(Method::None, base, nullptr), full);
    double base_acc = 0.0;
    for (const auto& c : none.cells) base_acc += c.accuracy / static_cast<double>(none.cells.size());

    GridSpec spec = full;
    spec.retentions.clear();
    for (float r : rc.eval_retentions)
        if (r <= 0.25f) spec.retentions.push_back(r);
    const EvalGrid kvd = eval_needle(base, make_compressor(Method::Kvd, base, &adapters), spec);
    const EvalGrid h2i = eval_needle(base, make_compressor(Method::H2I, base, nullptr), spec);
    const EvalGrid h2a = eval_needle(base, make_compressor(Method::H2A, base, nullptr), spec);
    if (table) {
        write_grid_table(*table, "none", none);
        write_grid_table(*table, "kvd", kvd, false);
        write_grid_table(*table, "h2a", h2a, false);
        write_grid_table(*table, "h2i", h2i, false);
    }

    int beats = 0, between = 0;
    std::string misses;
    for (const auto& c : kvd.cells) {
        const double i = h2i.at(c.length, c.retention).accuracy, a = h2a.at(c.length, c.retention).accuracy;
        const bool beat = c.accuracy > i;
        const bool mid = (a >= std::min(i, c.accuracy) && a <= std::max(i, c.accuracy)) || std::fabs(a - c.accuracy) <= 0.05;
        beats += beat;
        between += mid;
        if (!beat) misses += " (" + std::to_string(c.length) + "," + fmt(c.retention) + ": kvd " + fmt(c.accuracy) + " vs h2i " + fmt(i) + ")";
    }
    const double at256 = kvd.at(256, 0.25f).accuracy;
    const std::size_t cells = kvd.cells.size();
    const bool ok = base_acc >= 0.99 && distill_seconds <= 7200.0 && at256 >= 0.90 && beats == static_cast<int>(cells) &&
                    between == static_cast<int>(cells);
    std::string detail = "base full-cache " + fmt(base_acc) + ", distill " + fmt(distill_seconds / 60.0) +
                         " min, kvd@25%/256 " + fmt(at256) + ", kvd>h2i in " + std::to_string(beats) + "/" +
                         std::to_string(cells) + " cells, h2a placed in " + std::to_string(between) + "/" +
                         std::to_string(cells);
    if (!misses.empty()) detail += "; misses:" + misses;
    return {ok, detail};
}

Outcome ablations(Artifacts& art, std::ostream* table) {
    const BaseParams& base = art.base();
    const auto examples = gen_qa_corpus(kAblationExamples, ablation_qa(), base.config.vocab_size, 1200);
    const int max_new = RunConfig::defaults().qa_max_new;
    std::map<std::string, double> mean;
    for (const auto& v : ablation_variants()) {
        double sum = 0.0;
        for (std::uint64_t seed : {1, 2, 3}) {
            const AdapterSet a = art.ablation_adapters(v, seed);
            BaseParams run_base = base;
            run_base.config = a.config;
            const QaResult r =
                eval_containment_qa(run_base, make_compressor(Method::Kvd, run_base, &a), examples, kAblationRetention, max_new);
            if (table) *table << v.name << "\t" << seed << "\t" << kAblationRetention << "\t" << r.accuracy << "\t" << r.stderr_ << "\t" << r.n << "\n";
            sum += r.accuracy / 3.0;
        }
        mean[v.name] = sum;
    }
    const bool ok = mean["mixture"] >= mean["forward"] && mean["mixture"] >= mean["reverse"] &&
                    mean["mixture"] >= mean["ae_lm"] && mean["mixture"] >= mean["embedding"];
    std::string detail = "mean QA accuracy at " + fmt(kAblationRetention) + ":";
    for (const auto& v : ablation_variants()) detail += " " + v.name + " " + fmt(mean[v.name]);
    return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-Distill acceptance suite"};
    std::string cache_dir = KVD_ACCEPTANCE_CACHE;
    std::vector<int> only, allowed;
    int trials = 50;
    std::string table_path;
    app.add_option("--cache-dir", cache_dir, "Directory for trained artifacts");
    app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9));
    app.add_option("--allow-fail", allowed, "Criteria whose failure does not affect the exit status")
        ->check(CLI::Range(1, 9));
    app.add_option("--trials", trials, "Needle trials per grid cell")->check(CLI::PositiveNumber);
    app.add_option("--table", table_path, "Also write the evaluation tables here");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    std::clog << "# build " << KVD_BUILD_ID << "\n";
    std::unique_ptr<std::ofstream> table;
    if (!table_path.empty()) {
        table = std::make_unique<std::ofstream>(table_path);
        if (!*table) {
            std::cerr << "cannot open " << table_path << "\n";
            return 2;
        }
    }
    const std::set<int> selected(only.begin(), only.end());
    auto wanted = [&](int c) { return selected.empty() || selected.count(c) > 0; };

    try {
        Artifacts art{fs::path(cache_dir)};
        const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
            {1, [&] { return identity_recovery(art); }},
            {2, [&] { return scorer_gradient(); }},
            {3, [&] { return objective_correctness(); }},
            {4, [&] { return selection_oracles(); }},
            {5, [&] { return folding_equivalence(art); }},
            {6, [&] { return serialization(art, cache_dir); }},
            {7, [&] { return memory_accounting(art, cache_dir); }},
            {8, [&] { return end_to_end(art, trials, table.get()); }},
            {9, [&] { return ablations(art, table.get()); }},
        };
        int failed = 0;
        for (const auto& [id, run] : criteria) {
            if (!wanted(id)) continue;
            const auto t0 = Clock::now();
            const Outcome o = run();
            failed += !o.pass && std::find(allowed.begin(), allowed.end(), id) == allowed.end();
            std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " " << o.detail << " ["
                      << fmt(seconds_since(t0), 3) << " s]" << std::endl;
        }
        return failed == 0 ? 0 : 1;
    } catch (const std::exception& e) {
        std::cerr << "acceptance: " << e.what() << "\n";
        return 1;
    }
}
