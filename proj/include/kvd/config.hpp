#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace kvd {

// How the encoder is told which tokens were selected.
enum class Routing {
    QueryOutput,  // selected rows use adapted Q/O, others the frozen ones
    Embedding,    // ablation: Q/O adapters on all rows + learned embedding on selected rows
};

struct ModelConfig {
    // architecture
    int vocab_size = 512;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int head_dim = 16;
    int ffn_hidden = 256;
    int max_pos = 1024;
    float rope_base = 10000.0f;

    // compression
    int fold_len = 128;
    int scorer_layer = 1;  // η
    int sink_count = 4;
    float lambda = 0.6f;
    int adapter_rank = 16;
    float lora_alpha = 4.0f;
    float retention_min = 0.001f;
    float retention_max = 0.8f;
    bool decay_at_inference = true;
    Routing routing = Routing::QueryOutput;

    // Throws ConfigError on the first violated invariant.
    void validate() const;

    // FNV-1a over the fields that determine cache/weight layout.
    std::uint64_t hash() const;

    float lora_scale() const;
};

enum class Objective {
    Mixture,  // λ·KL(p‖q) + (1−λ)·KL(q‖p)
    AeLm,     // ablation: reconstruction + next-token cross-entropy
};

struct TrainConfig {
    float lr = 5e-5f;
    int batch = 32;
    int steps = 1000;
    std::uint64_t seed = 0;
    float weight_decay = 0.0f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float adam_eps = 1e-8f;
    float grad_clip = 1.0f;
    int warmup = 0;
    Objective objective = Objective::Mixture;
    int eval_every = 0;  // 0 disables periodic held-out evaluation
    int log_every = 10;
    int max_len = 512;   // longest sampled sequence (pretrain) or context (distill)

    void validate() const;
};

// Sectioned key=value text ("[model]", "[train]", "[pretrain]", "[eval]").
// Unknown sections or keys are rejected.
struct RunConfig {
    ModelConfig model;
    TrainConfig pretrain;
    TrainConfig distill;
    // [eval]
    std::vector<int> eval_lengths{64, 128, 256, 512};
    std::vector<float> eval_retentions{1.0f, 0.25f, 0.10f, 0.05f, 0.01f};
    int eval_trials = 50;
    int qa_examples = 200;
    int qa_max_new = 128;

    static RunConfig defaults();
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);

    // Applies one "section.key=value" override.
    void set(const std::string& section, const std::string& key, const std::string& value);
    // Canonical text form; parse(to_text()) reproduces the config.
    std::string to_text() const;
};

}  // namespace kvd
