#include "kvd/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "kvd/tensor.hpp"

namespace kvd {

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || head_dim <= 0)
        fail("dimensions must be positive");
    if (d_model != n_heads * head_dim) fail("d_model must equal n_heads * head_dim");
    if (head_dim % 2 != 0) fail("head_dim must be even for rotary embeddings");
    if (ffn_hidden <= 0) fail("ffn_hidden must be positive");
    if (max_pos <= 0) fail("max_pos must be positive");
    if (scorer_layer < 0 || scorer_layer >= n_layers) fail("scorer_layer must lie in [0, n_layers)");
    if (sink_count < 0 || sink_count >= 10) fail("sink_count must lie in [0, 10)");
    if (fold_len <= sink_count) fail("fold_len must exceed sink_count");
    if (!(lambda >= 0.0f && lambda <= 1.0f)) fail("lambda must lie in [0, 1]");
    if (adapter_rank <= 0) fail("adapter_rank must be positive");
    if (!(retention_min > 0.0f && retention_min <= retention_max && retention_max <= 1.0f))
        fail("need 0 < retention_min <= retention_max <= 1");
}

std::uint64_t ModelConfig::hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::int64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= static_cast<std::uint64_t>((v >> (8 * i)) & 0xff);
            h *= 1099511628211ull;
        }
    };
    mix(vocab_size);
    mix(d_model);
    mix(n_layers);
    mix(n_heads);
    mix(head_dim);
    mix(ffn_hidden);
    mix(max_pos);
    mix(static_cast<std::int64_t>(std::lround(rope_base)));
    return h;
}

float ModelConfig::lora_scale() const {
    return lora_alpha / std::sqrt(static_cast<float>(adapter_rank));
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (!(lr > 0.0f)) fail("lr must be positive");
    if (batch <= 0) fail("batch must be positive");
    if (steps < 0) fail("steps must be non-negative");
    if (max_len <= 0) fail("max_len must be positive");
    if (grad_clip < 0.0f) fail("grad_clip must be non-negative");
    if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) fail("betas must lie in [0, 1)");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* first = v.data();
    const char* last = v.data() + v.size();
    if constexpr (std::is_floating_point_v<T>) {
        // from_chars for floats is incomplete in some libstdc++ versions.
        try {
            std::size_t used = 0;
            out = static_cast<T>(std::stod(v, &used));
            if (used != v.size()) throw ConfigError("");
        } catch (...) {
            throw ConfigError("bad number for '" + key + "': " + v);
        }
    } else {
        auto [p, ec] = std::from_chars(first, last, out);
        if (ec != std::errc() || p != last) throw ConfigError("bad integer for '" + key + "': " + v);
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("bad boolean for '" + key + "': " + v);
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
    if (out.empty()) throw ConfigError("empty list for '" + key + "'");
    return out;
}

std::string fmt(float v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

template <typename T>
std::string join(const std::vector<T>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        if constexpr (std::is_floating_point_v<T>) s += fmt(v[i]);
        else s += std::to_string(v[i]);
    }
    return s;
}

void set_train(TrainConfig& t, const std::string& key, const std::string& v) {
    if (key == "lr") t.lr = parse_number<float>(key, v);
    else if (key == "batch") t.batch = parse_number<int>(key, v);
    else if (key == "steps") t.steps = parse_number<int>(key, v);
    else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "weight_decay") t.weight_decay = parse_number<float>(key, v);
    else if (key == "beta1") t.beta1 = parse_number<float>(key, v);
    else if (key == "beta2") t.beta2 = parse_number<float>(key, v);
    else if (key == "adam_eps") t.adam_eps = parse_number<float>(key, v);
    else if (key == "grad_clip") t.grad_clip = parse_number<float>(key, v);
    else if (key == "warmup") t.warmup = parse_number<int>(key, v);
    else if (key == "eval_every") t.eval_every = parse_number<int>(key, v);
    else if (key == "log_every") t.log_every = parse_number<int>(key, v);
    else if (key == "max_len") t.max_len = parse_number<int>(key, v);
    else if (key == "objective") {
        if (v == "mixture") t.objective = Objective::Mixture;
        else if (v == "ae_lm") t.objective = Objective::AeLm;
        else throw ConfigError("objective must be mixture or ae_lm, got " + v);
    } else {
        throw ConfigError("unknown key '" + key + "'");
    }
}

std::string train_text(const TrainConfig& t) {
    std::ostringstream os;
    os << "lr=" << fmt(t.lr) << "\nbatch=" << t.batch << "\nsteps=" << t.steps << "\nseed=" << t.seed
       << "\nweight_decay=" << fmt(t.weight_decay) << "\nbeta1=" << fmt(t.beta1)
       << "\nbeta2=" << fmt(t.beta2) << "\nadam_eps=" << fmt(t.adam_eps)
       << "\ngrad_clip=" << fmt(t.grad_clip) << "\nwarmup=" << t.warmup
       << "\nobjective=" << (t.objective == Objective::Mixture ? "mixture" : "ae_lm")
       << "\neval_every=" << t.eval_every << "\nlog_every=" << t.log_every
       << "\nmax_len=" << t.max_len << "\n";
    return os.str();
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.pretrain.lr = 3e-3f;
    c.pretrain.batch = 16;
    c.pretrain.steps = 2000;
    c.pretrain.max_len = 560;
    c.pretrain.seed = 1;
    c.pretrain.weight_decay = 0.01f;
    c.pretrain.warmup = 100;
    return c;
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& v) {
    try {
        if (section == "model") {
            auto& m = model;
            if (key == "vocab_size") m.vocab_size = parse_number<int>(key, v);
            else if (key == "d_model") m.d_model = parse_number<int>(key, v);
            else if (key == "n_layers") m.n_layers = parse_number<int>(key, v);
            else if (key == "n_heads") m.n_heads = parse_number<int>(key, v);
            else if (key == "head_dim") m.head_dim = parse_number<int>(key, v);
            else if (key == "ffn_hidden") m.ffn_hidden = parse_number<int>(key, v);
            else if (key == "max_pos") m.max_pos = parse_number<int>(key, v);
            else if (key == "rope_base") m.rope_base = parse_number<float>(key, v);
            else if (key == "fold_len") m.fold_len = parse_number<int>(key, v);
            else if (key == "scorer_layer") m.scorer_layer = parse_number<int>(key, v);
            else if (key == "sink_count") m.sink_count = parse_number<int>(key, v);
            else if (key == "lambda") m.lambda = parse_number<float>(key, v);
            else if (key == "adapter_rank") m.adapter_rank = parse_number<int>(key, v);
            else if (key == "lora_alpha") m.lora_alpha = parse_number<float>(key, v);
            else if (key == "retention_min") m.retention_min = parse_number<float>(key, v);
            else if (key == "retention_max") m.retention_max = parse_number<float>(key, v);
            else if (key == "decay_at_inference") m.decay_at_inference = parse_bool(key, v);
            else if (key == "routing") {
                if (v == "qo") m.routing = Routing::QueryOutput;
                else if (v == "embedding") m.routing = Routing::Embedding;
                else throw ConfigError("routing must be qo or embedding, got " + v);
            } else {
                throw ConfigError("unknown key '" + key + "'");
            }
        } else if (section == "pretrain") {
            set_train(pretrain, key, v);
        } else if (section == "train") {
            set_train(distill, key, v);
        } else if (section == "eval") {
            if (key == "lengths") eval_lengths = parse_list<int>(key, v);
            else if (key == "retentions") eval_retentions = parse_list<float>(key, v);
            else if (key == "trials") eval_trials = parse_number<int>(key, v);
            else if (key == "qa_examples") qa_examples = parse_number<int>(key, v);
            else if (key == "qa_max_new") qa_max_new = parse_number<int>(key, v);
            else throw ConfigError("unknown key '" + key + "'");
        } else {
            throw ConfigError("unknown section [" + section + "]");
        }
    } catch (const ConfigError& e) {
        throw ConfigError("[" + section + "] " + e.what());
    }
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig c = defaults();
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos || section.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": expected key=value inside a section");
        c.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    c.model.validate();
    c.pretrain.validate();
    c.distill.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError(path, "cannot open config file");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

std::string RunConfig::to_text() const {
    const auto& m = model;
    std::ostringstream os;
    os << "[model]\nvocab_size=" << m.vocab_size << "\nd_model=" << m.d_model << "\nn_layers=" << m.n_layers
       << "\nn_heads=" << m.n_heads << "\nhead_dim=" << m.head_dim << "\nffn_hidden=" << m.ffn_hidden
       << "\nmax_pos=" << m.max_pos << "\nrope_base=" << fmt(m.rope_base) << "\nfold_len=" << m.fold_len
       << "\nscorer_layer=" << m.scorer_layer << "\nsink_count=" << m.sink_count
       << "\nlambda=" << fmt(m.lambda) << "\nadapter_rank=" << m.adapter_rank
       << "\nlora_alpha=" << fmt(m.lora_alpha) << "\nretention_min=" << fmt(m.retention_min)
       << "\nretention_max=" << fmt(m.retention_max)
       << "\ndecay_at_inference=" << (m.decay_at_inference ? "true" : "false")
       << "\nrouting=" << (m.routing == Routing::QueryOutput ? "qo" : "embedding") << "\n";
    os << "\n[pretrain]\n" << train_text(pretrain);
    os << "\n[train]\n" << train_text(distill);
    os << "\n[eval]\nlengths=" << join(eval_lengths) << "\nretentions=" << join(eval_retentions)
       << "\ntrials=" << eval_trials << "\nqa_examples=" << qa_examples << "\nqa_max_new=" << qa_max_new
       << "\n";
    return os.str();
}

}  // namespace kvd
