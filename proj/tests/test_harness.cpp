#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "kvd/cachestore.hpp"
#include "kvd/harness.hpp"
#include "oracles.hpp"

using namespace kvd;
using namespace kvd::test;

TEST_CASE("needle placement and vocabulary disjointness") {
    NeedleSpec spec;
    spec.haystack_len = 256;
    spec.position = 0.5;
    spec.key = 40;
    spec.value = 200;
    const std::size_t at = needle_index(spec);
    CHECK(at >= 127);
    CHECK(at <= 129);

    std::mt19937_64 rng(1);
    const DistillExample ex = make_needle(spec, 512, rng);
    CHECK(ex.context.size() == 256);
    CHECK(ex.context[0] == vocab::kBos);
    CHECK(ex.context[at] == 40);
    CHECK(ex.context[at + 1] == 200);
    CHECK(ex.instruction == TokenSequence{vocab::kQuery, 40});
    CHECK(ex.answer == TokenSequence{200, kEosToken});
    for (std::size_t i = 1; i < ex.context.size(); ++i)
        if (i < at || i > at + 2) CHECK(ex.context[i] >= vocab::kFillerBegin);

    spec.position = 0.0;
    CHECK(needle_index(spec) == 1);
    spec.position = 1.0;
    CHECK(needle_index(spec) == 253);
    spec.key = 200;
    CHECK_THROWS_AS(make_needle(spec, 512, rng), Error);
}

TEST_CASE("needle corpora differ in filler across seeds, not in structure") {
    const auto a = gen_needle_corpus(20, 64, 128, 512, 1);
    const auto b = gen_needle_corpus(20, 64, 128, 512, 2);
    const auto a2 = gen_needle_corpus(20, 64, 128, 512, 1);
    CHECK(a.size() == 20);
    int different = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].context == a2[i].context);
        different += a[i].context != b[i].context;
        CHECK(a[i].context.size() >= 64);
        CHECK(a[i].context.size() <= 128);
        CHECK(a[i].instruction.size() == 2);
        CHECK(vocab::is_value(a[i].answer[0]));
        std::size_t keys = 0, values = 0;
        for (Token t : a[i].context) {
            keys += vocab::is_key(t);
            values += vocab::is_value(t);
        }
        CHECK(keys == 1);
        CHECK(values == 1);
    }
    CHECK(different == 20);
}

TEST_CASE("QA contexts contain every asked fact") {
    QaSpec spec;
    const auto corpus = gen_qa_corpus(100, spec, 512, 3);
    for (const auto& ex : corpus) {
        CHECK(static_cast<int>(ex.context.size()) >= spec.min_len);
        CHECK(static_cast<int>(ex.context.size()) <= spec.max_len);
        REQUIRE(ex.instruction.size() == 2);
        CHECK(ex.instruction[0] == vocab::kQuery);
        CHECK(ex.answer.back() == kEosToken);
        const int span = static_cast<int>(ex.answer.size()) - 1;
        CHECK(span >= spec.min_span);
        CHECK(span <= spec.max_span);
        // The key occurs once, followed by the answer span.
        std::size_t hits = 0;
        for (std::size_t i = 0; i < ex.context.size(); ++i)
            if (ex.context[i] == ex.instruction[1]) {
                ++hits;
                for (int j = 0; j < span; ++j) CHECK(ex.context[i + 1 + j] == ex.answer[j]);
            }
        CHECK(hits == 1);
    }
}

TEST_CASE("copy examples and pretraining sequences") {
    std::mt19937_64 rng(4);
    const DistillExample c = make_copy(10, 512, rng);
    CHECK(c.context.size() == 12);
    CHECK(c.context[1] == vocab::kCopy);
    CHECK(TokenSequence(c.context.begin() + 2, c.context.end()) ==
          TokenSequence(c.answer.begin(), c.answer.end() - 1));
    for (int i = 0; i < 200; ++i) {
        const LmSequence s = sample_pretrain_sequence(128, 512, rng);
        REQUIRE(s.tokens.size() == s.targets.size());
        CHECK(s.tokens.size() <= 128);
        std::size_t targets = 0;
        for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t)
            if (s.targets[t] >= 0) {
                ++targets;
                CHECK(s.targets[t] == s.tokens[t + 1]);
            }
        CHECK(s.targets.back() < 0);
        CHECK(targets > 0);
    }
    for (int i = 0; i < 50; ++i) {
        const DistillExample ex = sample_distill_example(160, 512, rng);
        CHECK(ex.context.size() <= 160);
        CHECK(ex.continuation().size() >= 2);
    }
}

TEST_CASE("containment scoring") {
    const TokenSequence truth{150, 151, kEosToken};
    CHECK(contains_answer(TokenSequence{20, 21, 150, 151, 7}, truth));
    CHECK(contains_answer(TokenSequence{150}, truth));
    CHECK(contains_answer(TokenSequence{150, 8, 151}, truth));
    CHECK_FALSE(contains_answer(TokenSequence{}, truth));
    CHECK_FALSE(contains_answer(TokenSequence{7, 8}, truth));
    CHECK_FALSE(contains_answer(TokenSequence{151, 150}, truth));
    CHECK(normalize_answer(TokenSequence{7, 150, 15, 151}) == TokenSequence{150, 151});
}

TEST_CASE("method names") {
    for (auto m : {Method::Kvd, Method::H2A, Method::H2I, Method::None}) CHECK(parse_method(method_name(m)) == m);
    CHECK_THROWS_AS(parse_method("snapkv"), ConfigError);
}

TEST_CASE("evaluation grids are reproducible and report binomial errors") {
    const ModelConfig cfg = micro_config();
    const BaseParams base = BaseParams::init(cfg, 9);
    GridSpec spec;
    spec.lengths = {32, 48};
    spec.retentions = {1.0f, 0.25f};
    spec.trials = 20;
    spec.max_new = 2;
    spec.seed = 5;
    const Compressor none = make_compressor(Method::None, base, nullptr);
    const EvalGrid a = eval_needle(base, none, spec), b = eval_needle(base, none, spec);
    REQUIRE(a.cells.size() == 4);
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        CHECK(a.cells[i].accuracy == b.cells[i].accuracy);
        CHECK(a.cells[i].n == 20);
        const double p = a.cells[i].accuracy;
        CHECK(a.cells[i].stderr_ == doctest::Approx(std::sqrt(p * (1 - p) / 20)));
    }
    CHECK(a.at(48, 0.25f).length == 48);
    CHECK_THROWS_AS(a.at(64, 0.25f), Error);

    std::ostringstream os;
    write_grid_table(os, "none", a);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "method\tlength\tretention\taccuracy\tstderr\tn");
    int rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        CHECK(std::count(line.begin(), line.end(), '\t') == 5);
    }
    CHECK(rows == 4);
}

TEST_CASE("compressed caches do not depend on the question") {
    const ModelConfig cfg = micro_config();
    const BaseParams base = BaseParams::init(cfg, 9);
    const AdapterSet adapters = AdapterSet::init(cfg, 10);
    std::mt19937_64 rng(11);
    const TokenSequence ctx = random_tokens(50, cfg.vocab_size, rng, 7);
    const TokenSequence q1{vocab::kQuery, 20}, q2{vocab::kQuery, 99};
    for (auto m : {Method::Kvd, Method::H2I}) {
        const Compressor c = make_compressor(m, base, &adapters);
        const KvCache a = c(ctx, q1, 0.2f), b = c(ctx, q2, 0.2f);
        CHECK(a.positions == b.positions);
        for (std::size_t l = 0; l < a.n_layers(); ++l) {
            CHECK(a.keys[l].values() == b.keys[l].values());
            CHECK(a.values[l].values() == b.values[l].values());
        }
    }
    const CompressedCache x = encode_compressed(base, adapters, ctx, 0.2);
    const std::string p1 = "/tmp/kvd_test_harness_q.kvd";
    CHECK(save_cache(x, cfg, p1) == cache_file_size(cfg, x.sink_count, x.k()));
    std::remove(p1.c_str());
    CHECK_THROWS_AS(make_compressor(Method::Kvd, base, nullptr), Error);
}

TEST_CASE("teacher divergence: zero for the identity, positive under compression") {
    ModelConfig cfg = micro_config();
    cfg.decay_at_inference = false;
    const BaseParams base = BaseParams::init(cfg, 12);
    std::mt19937_64 rng(13);
    std::vector<DistillExample> held;
    for (int i = 0; i < 4; ++i) held.push_back(micro_example(cfg, 40, rng));
    const AdapterSet zero = AdapterSet::zeros(cfg);
    const Compressor identity = make_compressor(Method::Kvd, base, &zero);
    CHECK(eval_teacher_divergence(base, identity, held, 1.0f, 0.6f) < 1e-9);

    ModelConfig decayed = micro_config();
    const BaseParams base2 = BaseParams::init(decayed, 12);
    const AdapterSet random = AdapterSet::init(decayed, 14);
    const Compressor kvd = make_compressor(Method::Kvd, base2, &random);
    CHECK(eval_teacher_divergence(base2, kvd, held, 0.25f, 0.6f) > 0.0);
    CHECK(eval_teacher_divergence(base2, make_compressor(Method::H2I, base2, nullptr), held, 0.25f, 0.6f) > 0.0);
}
