#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "kvd/config.hpp"
#include "kvd/tensor.hpp"

using namespace kvd;

TEST_CASE("defaults") {
    const RunConfig c = RunConfig::defaults();
    CHECK(c.model.d_model == 64);
    CHECK(c.model.n_layers == 4);
    CHECK(c.model.lambda == 0.6f);
    CHECK(c.model.retention_min == 0.001f);
    CHECK(c.model.retention_max == 0.8f);
    CHECK(c.distill.lr == 5e-5f);
    CHECK(c.distill.batch == 32);
    CHECK(c.distill.grad_clip == 1.0f);
    CHECK(c.eval_lengths == std::vector<int>{64, 128, 256, 512});
    CHECK(c.eval_retentions == std::vector<float>{1.0f, 0.25f, 0.10f, 0.05f, 0.01f});
    CHECK(c.eval_trials == 50);
    CHECK(c.qa_max_new == 128);
    CHECK_NOTHROW(c.model.validate());
}

TEST_CASE("parse sections, comments and overrides") {
    const RunConfig c = RunConfig::parse(R"(
# comment
[model]
d_model = 32
head_dim = 8   # trailing comment
routing = embedding
decay_at_inference = false

[pretrain]
steps = 12
[train]
lr = 0.001
objective = ae_lm
[eval]
lengths = 64, 128
retentions = 1,0.5
)");
    CHECK(c.model.d_model == 32);
    CHECK(c.model.head_dim == 8);
    CHECK(c.model.routing == Routing::Embedding);
    CHECK_FALSE(c.model.decay_at_inference);
    CHECK(c.pretrain.steps == 12);
    CHECK(c.distill.lr == 0.001f);
    CHECK(c.distill.objective == Objective::AeLm);
    CHECK(c.eval_lengths == std::vector<int>{64, 128});
    CHECK(c.eval_retentions == std::vector<float>{1.0f, 0.5f});

    RunConfig d = c;
    d.set("train", "batch", "4");
    CHECK(d.distill.batch == 4);
}

TEST_CASE("round trip through the canonical text") {
    RunConfig c = RunConfig::defaults();
    c.set("model", "lambda", "0.25");
    c.set("train", "seed", "18446744073709551615");
    c.set("eval", "trials", "7");
    const RunConfig back = RunConfig::parse(c.to_text());
    CHECK(back.to_text() == c.to_text());
    CHECK(back.model.lambda == 0.25f);
    CHECK(back.distill.seed == 18446744073709551615ull);
    CHECK(back.eval_trials == 7);
}

TEST_CASE("invalid configs are rejected") {
    CHECK_THROWS_AS(RunConfig::parse("[model]\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[nowhere]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("d_model = 3\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nd_model = abc\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nd_model = 12x\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nd_model = 65\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nlambda = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nrouting = sideways\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nscorer_layer = 4\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\nretention_min = 0\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[train]\nlr = -1\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[train]\nbatch = 0\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[train]\nobjective = mse\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("[model]\ndecay_at_inference = maybe\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/kvd.conf"), IoError);
}

TEST_CASE("hash tracks layout fields only") {
    ModelConfig a;
    ModelConfig b = a;
    b.lambda = 0.1f;
    b.sink_count = 2;
    CHECK(a.hash() == b.hash());
    b.d_model = 128;
    b.head_dim = 32;
    CHECK(a.hash() != b.hash());
    CHECK(a.lora_scale() == doctest::Approx(1.0));
}

TEST_CASE("load from file") {
    const auto path = std::filesystem::temp_directory_path() / "kvd_test_config.conf";
    {
        std::ofstream f(path);
        f << "[pretrain]\nseed = 9\n";
    }
    CHECK(RunConfig::load(path.string()).pretrain.seed == 9);
    std::filesystem::remove(path);
}
