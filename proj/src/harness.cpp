#include "kvd/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "kvd/baselines.hpp"
#include "kvd/objective.hpp"

namespace kvd {

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

void check_vocab(int vocab_size) {
    if (vocab_size < vocab::kMinVocab)
        throw ConfigError("synthetic corpora need vocab_size >= " + std::to_string(vocab::kMinVocab));
}

Token filler(std::mt19937_64& rng, int vocab_size) {
    return static_cast<Token>(uniform_int(rng, vocab::kFillerBegin, vocab_size - 1));
}

// `count` distinct tokens from [lo, hi).
TokenSequence distinct(std::mt19937_64& rng, Token lo, Token hi, std::size_t count) {
    TokenSequence pool(static_cast<std::size_t>(hi - lo));
    std::iota(pool.begin(), pool.end(), lo);
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<int>(i), static_cast<int>(pool.size()) - 1));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    return pool;
}

struct Fact {
    Token key;
    TokenSequence span;
};

// Begin token, then facts "key span ." at random non-overlapping places in filler.
TokenSequence facts_context(int length, const std::vector<Fact>& facts, int vocab_size, std::mt19937_64& rng) {
    std::size_t fact_tokens = 0;
    for (const auto& f : facts) fact_tokens += f.span.size() + 2;
    const auto fill = static_cast<std::size_t>(length) - 1 - fact_tokens;
    // Choose which of the fill + facts slots hold facts.
    std::vector<std::size_t> slots(fill + facts.size());
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    std::shuffle(slots.begin(), slots.end(), rng);
    std::vector<std::uint8_t> is_fact(slots.size(), 0);
    for (std::size_t i = 0; i < facts.size(); ++i) is_fact[slots[i]] = 1;
    TokenSequence out{vocab::kBos};
    std::size_t next = 0;
    for (std::size_t s = 0; s < is_fact.size(); ++s) {
        if (!is_fact[s]) {
            out.push_back(filler(rng, vocab_size));
            continue;
        }
        const Fact& f = facts[next++];
        out.push_back(f.key);
        out.insert(out.end(), f.span.begin(), f.span.end());
        out.push_back(vocab::kPeriod);
    }
    return out;
}

std::vector<Fact> random_facts(std::mt19937_64& rng, int n, int min_span, int max_span) {
    const TokenSequence keys = distinct(rng, vocab::kKeyBegin, vocab::kKeyEnd, static_cast<std::size_t>(n));
    std::vector<int> spans(static_cast<std::size_t>(n));
    int total = 0;
    for (auto& s : spans) total += (s = uniform_int(rng, min_span, max_span));
    const TokenSequence values = distinct(rng, vocab::kValueBegin, vocab::kValueEnd, static_cast<std::size_t>(total));
    std::vector<Fact> facts;
    std::size_t v = 0;
    for (int i = 0; i < n; ++i) {
        Fact f{keys[static_cast<std::size_t>(i)], {}};
        for (int j = 0; j < spans[static_cast<std::size_t>(i)]; ++j) f.span.push_back(values[v++]);
        facts.push_back(std::move(f));
    }
    return facts;
}

int max_facts_for(int length, int want, int max_span) {
    // Leave at least half the context as filler.
    while (want > 1 && want * (max_span + 2) > (length - 1) / 2) --want;
    return want;
}

}  // namespace

std::size_t needle_index(const NeedleSpec& spec) {
    const long idx = std::lround(spec.position * spec.haystack_len);
    return static_cast<std::size_t>(std::clamp<long>(idx, 1, spec.haystack_len - 3));
}

DistillExample make_needle(const NeedleSpec& spec, int vocab_size, std::mt19937_64& rng) {
    check_vocab(vocab_size);
    if (spec.haystack_len < 4) throw Error("needle haystack must hold at least 4 tokens");
    if (!vocab::is_key(spec.key) || !vocab::is_value(spec.value)) throw Error("needle key/value outside their ranges");
    DistillExample ex;
    ex.context.push_back(vocab::kBos);
    for (int i = 1; i < spec.haystack_len; ++i) ex.context.push_back(filler(rng, vocab_size));
    const std::size_t at = needle_index(spec);
    ex.context[at] = spec.key;
    ex.context[at + 1] = spec.value;
    ex.context[at + 2] = vocab::kPeriod;
    ex.instruction = {vocab::kQuery, spec.key};
    ex.answer = {spec.value, kEosToken};
    return ex;
}

std::vector<DistillExample> gen_needle_corpus(std::size_t count, int min_len, int max_len, int vocab_size,
                                              std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<DistillExample> out;
    for (std::size_t i = 0; i < count; ++i) {
        NeedleSpec spec;
        spec.haystack_len = uniform_int(rng, min_len, max_len);
        spec.key = static_cast<Token>(uniform_int(rng, vocab::kKeyBegin, vocab::kKeyEnd - 1));
        spec.value = static_cast<Token>(uniform_int(rng, vocab::kValueBegin, vocab::kValueEnd - 1));
        spec.position = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        out.push_back(make_needle(spec, vocab_size, rng));
    }
    return out;
}

DistillExample make_qa(const QaSpec& spec, int vocab_size, std::mt19937_64& rng) {
    check_vocab(vocab_size);
    const int length = uniform_int(rng, spec.min_len, spec.max_len);
    const int n = max_facts_for(length, uniform_int(rng, spec.min_facts, spec.max_facts), spec.max_span);
    const auto facts = random_facts(rng, n, spec.min_span, spec.max_span);
    DistillExample ex;
    ex.context = facts_context(length, facts, vocab_size, rng);
    const Fact& asked = facts[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))];
    ex.instruction = {vocab::kQuery, asked.key};
    ex.answer = asked.span;
    ex.answer.push_back(kEosToken);
    return ex;
}

std::vector<DistillExample> gen_qa_corpus(std::size_t count, const QaSpec& spec, int vocab_size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<DistillExample> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(make_qa(spec, vocab_size, rng));
    return out;
}

DistillExample make_copy(int payload_len, int vocab_size, std::mt19937_64& rng) {
    check_vocab(vocab_size);
    const TokenSequence payload =
        distinct(rng, vocab::kFillerBegin, static_cast<Token>(vocab_size), static_cast<std::size_t>(payload_len));
    DistillExample ex;
    ex.context = {vocab::kBos, vocab::kCopy};
    ex.context.insert(ex.context.end(), payload.begin(), payload.end());
    ex.instruction = {vocab::kSep};
    ex.answer = payload;
    ex.answer.push_back(kEosToken);
    return ex;
}

DistillExample sample_distill_example(int max_len, int vocab_size, std::mt19937_64& rng) {
    const int length = uniform_int(rng, 32, max_len);
    if (uniform_int(rng, 0, 1) == 0) {
        NeedleSpec spec;
        spec.haystack_len = length;
        spec.key = static_cast<Token>(uniform_int(rng, vocab::kKeyBegin, vocab::kKeyEnd - 1));
        spec.value = static_cast<Token>(uniform_int(rng, vocab::kValueBegin, vocab::kValueEnd - 1));
        spec.position = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        return make_needle(spec, vocab_size, rng);
    }
    QaSpec spec{length, length, 1, 8, 1, 4};
    return make_qa(spec, vocab_size, rng);
}

LmSequence sample_pretrain_sequence(int max_len, int vocab_size, std::mt19937_64& rng) {
    check_vocab(vocab_size);
    LmSequence seq;
    auto answer = [&seq](std::span<const Token> tokens) {
        // Each answer token is predicted from the position before it.
        for (Token t : tokens) {
            seq.targets.back() = t;
            seq.tokens.push_back(t);
            seq.targets.push_back(-1);
        }
    };
    auto prompt = [&seq](std::span<const Token> tokens) {
        for (Token t : tokens) {
            seq.tokens.push_back(t);
            seq.targets.push_back(-1);
        }
    };

    const int kind = uniform_int(rng, 0, 99);
    if (kind < 10) {
        const DistillExample ex = make_copy(uniform_int(rng, 4, 24), vocab_size, rng);
        prompt(ex.context);
        prompt(ex.instruction);
        answer(ex.answer);
        return seq;
    }
    if (kind < 35) {
        // Random run, separator, the same run again: every token of the
        // repeat is predictable by looking up what followed its predecessor.
        const int n = uniform_int(rng, 8, std::max(8, max_len / 2 - 2));
        TokenSequence run(static_cast<std::size_t>(n));
        for (auto& t : run) t = static_cast<Token>(uniform_int(rng, vocab::kKeyBegin, vocab_size - 1));
        const Token head[1] = {vocab::kBos};
        prompt(head);
        prompt(run);
        const Token sep[1] = {vocab::kSep};
        prompt(sep);
        answer(run);
        return seq;
    }
    constexpr int kReserve = 40;
    const int length = uniform_int(rng, 16, std::max(16, max_len - kReserve));
    const bool needle = uniform_int(rng, 0, 99) < 30;
    const int max_span = needle ? 1 : 4;
    const int n = needle ? 1 : max_facts_for(length, uniform_int(rng, 1, 8), max_span);
    auto facts = random_facts(rng, n, 1, max_span);
    prompt(facts_context(length, facts, vocab_size, rng));
    std::shuffle(facts.begin(), facts.end(), rng);
    int used = length;
    for (const auto& f : facts) {
        used += static_cast<int>(f.span.size()) + 3;
        if (used > max_len) break;
        const Token q[2] = {vocab::kQuery, f.key};
        prompt(q);
        TokenSequence ans = f.span;
        ans.push_back(kEosToken);
        answer(ans);
    }
    return seq;
}

// ---- evaluation --------------------------------------------------------------

const GridCell& EvalGrid::at(int length, float retention) const {
    for (const auto& c : cells)
        if (c.length == length && std::fabs(c.retention - retention) < 1e-6f) return c;
    throw Error("eval grid has no cell for length " + std::to_string(length) + ", retention " + std::to_string(retention));
}

namespace {

double binomial_stderr(double p, int n) { return n > 0 ? std::sqrt(p * (1.0 - p) / n) : 0.0; }

}  // namespace

EvalGrid eval_needle(const BaseParams& base, const Compressor& compress, const GridSpec& spec) {
    EvalGrid grid;
    for (int length : spec.lengths) {
        for (float retention : spec.retentions) {
            int correct = 0;
            for (int t = 0; t < spec.trials; ++t) {
                // Same haystack for every retention and method.
                auto rng = step_rng(spec.seed, length, static_cast<std::uint64_t>(t));
                NeedleSpec ns;
                ns.haystack_len = length;
                ns.key = static_cast<Token>(uniform_int(rng, vocab::kKeyBegin, vocab::kKeyEnd - 1));
                ns.value = static_cast<Token>(uniform_int(rng, vocab::kValueBegin, vocab::kValueEnd - 1));
                ns.position = (t + 0.5) / spec.trials;
                const DistillExample ex = make_needle(ns, base.config.vocab_size, rng);
                KvCache cache = compress(ex.context, ex.instruction, retention);
                const TokenSequence out = generate_greedy(base, std::move(cache), ex.instruction, spec.max_new);
                if (std::find(out.begin(), out.end(), ns.value) != out.end()) ++correct;
            }
            GridCell cell;
            cell.length = length;
            cell.retention = retention;
            cell.n = spec.trials;
            cell.accuracy = spec.trials ? static_cast<double>(correct) / spec.trials : 0.0;
            cell.stderr_ = binomial_stderr(cell.accuracy, cell.n);
            grid.cells.push_back(cell);
        }
    }
    return grid;
}

TokenSequence normalize_answer(std::span<const Token> tokens) {
    TokenSequence out;
    for (Token t : tokens)
        if (!vocab::is_punct(t) && t != kEosToken) out.push_back(t);
    return out;
}

namespace {
bool contains(std::span<const Token> hay, std::span<const Token> needle) {
    return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}
}  // namespace

bool contains_answer(std::span<const Token> generated, std::span<const Token> truth) {
    const TokenSequence g = normalize_answer(generated), t = normalize_answer(truth);
    if (g.empty() || t.empty()) return false;
    return contains(g, t) || contains(t, g);
}

QaResult eval_containment_qa(const BaseParams& base, const Compressor& compress,
                             std::span<const DistillExample> examples, float retention, int max_new) {
    QaResult r;
    int correct = 0;
    for (const auto& ex : examples) {
        KvCache cache = compress(ex.context, ex.instruction, retention);
        const TokenSequence out = generate_greedy(base, std::move(cache), ex.instruction, max_new);
        if (contains_answer(out, ex.answer)) ++correct;
    }
    r.n = static_cast<int>(examples.size());
    r.accuracy = r.n ? static_cast<double>(correct) / r.n : 0.0;
    r.stderr_ = binomial_stderr(r.accuracy, r.n);
    return r;
}

double eval_teacher_divergence(const BaseParams& base, const Compressor& compress,
                               std::span<const DistillExample> examples, float retention, float lambda) {
    if (examples.empty()) throw Error("eval_teacher_divergence: no examples");
    double total = 0.0;
    for (const auto& ex : examples) {
        const Tensor teacher = teacher_logits(base, ex);
        KvCache cache = compress(ex.context, ex.instruction, retention);
        const TokenSequence cont = ex.continuation();
        const Tensor student = prefill(base, std::span<const Token>(cont.data(), cont.size() - 1), cache);
        total += mixture_loss_value(teacher, student, lambda);
    }
    return total / static_cast<double>(examples.size());
}

void write_grid_table(std::ostream& out, const std::string& method, const EvalGrid& grid, bool header) {
    if (header) out << "method\tlength\tretention\taccuracy\tstderr\tn\n";
    for (const auto& c : grid.cells)
        out << method << '\t' << c.length << '\t' << c.retention << '\t' << c.accuracy << '\t' << c.stderr_ << '\t'
            << c.n << '\n';
}

Method parse_method(const std::string& name) {
    if (name == "kvd") return Method::Kvd;
    if (name == "h2a") return Method::H2A;
    if (name == "h2i") return Method::H2I;
    if (name == "none") return Method::None;
    throw ConfigError("method must be one of kvd, h2a, h2i, none; got '" + name + "'");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Kvd: return "kvd";
        case Method::H2A: return "h2a";
        case Method::H2I: return "h2i";
        case Method::None: return "none";
    }
    return "?";
}

Compressor make_compressor(Method method, const BaseParams& base, const AdapterSet* adapters) {
    switch (method) {
        case Method::None:
            return [&base](std::span<const Token> ctx, std::span<const Token>, float) {
                return encode_context(base, ctx);
            };
        case Method::H2I:
            return [&base](std::span<const Token> ctx, std::span<const Token>, float rho) {
                return h2_compress(base, ctx, {}, rho, H2Scope::Context).to_kv_cache(false);
            };
        case Method::H2A:
            return [&base](std::span<const Token> ctx, std::span<const Token> q, float rho) {
                return h2_compress(base, ctx, q, rho, H2Scope::ContextAndQuestion).to_kv_cache(false);
            };
        case Method::Kvd:
            if (adapters == nullptr) throw ConfigError("method kvd needs adapters");
            return [&base, adapters](std::span<const Token> ctx, std::span<const Token>, float rho) {
                return encode_compressed(base, *adapters, ctx, rho).to_kv_cache(adapters->config.decay_at_inference);
            };
    }
    throw ConfigError("unknown method");
}

}  // namespace kvd
