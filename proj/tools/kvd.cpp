// kvd: pretrain, distill, compress, generate and eval from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>

#include "kvd/baselines.hpp"
#include "kvd/cachestore.hpp"
#include "kvd/harness.hpp"
#include "kvd/trainer.hpp"

namespace {

using namespace kvd;

struct UsageError : ConfigError {
    using ConfigError::ConfigError;
};

TokenSequence read_tokens(const std::string& path, int vocab_size) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot open token file " + path);
    TokenSequence out;
    std::string word;
    while (f >> word) {
        Token t = 0;
        try {
            std::size_t used = 0;
            t = std::stoi(word, &used);
            if (used != word.size()) throw std::invalid_argument(word);
        } catch (const std::exception&) {
            throw UsageError(path + ": not a token id: " + word);
        }
        if (t < 0 || t >= vocab_size) throw UsageError(path + ": token " + word + " outside the vocabulary");
        out.push_back(t);
    }
    return out;
}

void write_tokens(std::ostream& out, std::span<const Token> tokens) {
    for (std::size_t i = 0; i < tokens.size(); ++i) out << (i ? " " : "") << tokens[i];
    out << "\n";
}

class MetricsLog {
public:
    explicit MetricsLog(const std::string& path) : out_(path) {
        if (!out_) throw IoError(path, "cannot open metrics log");
        out_ << "step\tkind\tvalue\tgrad_norm\tlr\n";
    }
    void step(const StepLog& s) {
        out_ << s.step << "\tloss\t" << s.loss << "\t" << s.grad_norm << "\t" << s.lr << "\n";
        out_.flush();
    }
    void eval(std::int64_t step, double divergence) {
        out_ << step << "\theld_out_divergence\t" << divergence << "\t\t\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

void check_retention(double r) {
    if (!(r > 0.0 && r <= 1.0)) throw UsageError("--retention must lie in (0, 1]");
}

std::unique_ptr<std::ostream> open_out(const std::string& path) {
    if (path.empty() || path == "-") return nullptr;
    auto f = std::make_unique<std::ofstream>(path);
    if (!*f) throw IoError(path, "cannot open for writing");
    return f;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache compression by distillation: training, compression and evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "Sectioned key=value config file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Seed for every random stream of the command");
    app.add_option("--set", overrides, "Override one value: section.key=value (repeatable)");

    std::string out, base_path, adapters_path, metrics_path, resume_path, context_path, cache_path,
        question_path, task = "needle", method_str = "kvd";
    std::optional<double> retention;
    int max_new = 16;

    auto* pretrain = app.add_subcommand("pretrain", "Train the base language model")->fallthrough();
    pretrain->add_option("--out", out, "Base checkpoint to write")->required();
    pretrain->add_option("--metrics", metrics_path, "Tab-delimited step log (default <out>.metrics.tsv)");

    auto* distill = app.add_subcommand("distill", "Train adapters and scorer against the base model")->fallthrough();
    distill->add_option("--base", base_path, "Base checkpoint")->required();
    distill->add_option("--out", out, "Best adapter checkpoint to write")->required();
    distill->add_option("--resume", resume_path, "Resume from a training-state checkpoint");
    distill->add_option("--metrics", metrics_path, "Tab-delimited step log (default <out>.metrics.tsv)");

    auto* compress = app.add_subcommand("compress", "Compress a context into a cache file")->fallthrough();
    compress->add_option("--base", base_path, "Base checkpoint")->required();
    compress->add_option("--adapters", adapters_path, "Adapter checkpoint (method kvd)");
    compress->add_option("--context", context_path, "Context token file")->required();
    compress->add_option("--retention", retention, "Fraction of non-sink rows kept")->required();
    compress->add_option("--method", method_str, "kvd or none")->check(CLI::IsMember({"kvd", "none"}));
    compress->add_option("--out", out, "Cache file to write")->required();

    auto* generate = app.add_subcommand("generate", "Answer a question from a cache file")->fallthrough();
    generate->add_option("--base", base_path, "Base checkpoint")->required();
    generate->add_option("--cache", cache_path, "Cache file")->required();
    generate->add_option("--question", question_path, "Question token file")->required();
    generate->add_option("--max-new", max_new, "Generation budget")->check(CLI::NonNegativeNumber);
    generate->add_option("--out", out, "Token output file (default stdout)");

    auto* eval = app.add_subcommand("eval", "Accuracy tables for one method")->fallthrough();
    eval->add_option("--base", base_path, "Base checkpoint")->required();
    eval->add_option("--adapters", adapters_path, "Adapter checkpoint (method kvd)");
    eval->add_option("--task", task, "needle or qa")->check(CLI::IsMember({"needle", "qa"}));
    eval->add_option("--method", method_str, "kvd, h2a, h2i or none")
        ->check(CLI::IsMember({"kvd", "h2a", "h2i", "none"}));
    eval->add_option("--retention", retention, "Single retention instead of the configured list");
    eval->add_option("--out", out, "Results table (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    RunConfig cfg;
    try {
        cfg = config_path.empty() ? RunConfig::defaults() : RunConfig::load(config_path);
        for (const auto& o : overrides) {
            const auto dot = o.find('.');
            const auto eq = o.find('=');
            if (dot == std::string::npos || eq == std::string::npos || eq < dot)
                throw UsageError("--set expects section.key=value, got '" + o + "'");
            cfg.set(o.substr(0, dot), o.substr(dot + 1, eq - dot - 1), o.substr(eq + 1));
        }
        if (seed) {
            cfg.pretrain.seed = *seed;
            cfg.distill.seed = *seed;
        }
        cfg.model.validate();
        cfg.pretrain.validate();
        cfg.distill.validate();
        if (retention) check_retention(*retention);
    } catch (const Error& e) {
        std::cerr << "kvd: " << e.what() << "\n";
        return 2;
    }

    std::clog << "# build " << KVD_BUILD_ID << "\n# command " << app.get_subcommands().front()->get_name() << "\n";
    {
        std::istringstream text(cfg.to_text());
        for (std::string line; std::getline(text, line);) std::clog << "# " << line << "\n";
    }

    const ModelConfig& mc = cfg.model;
    try {
        if (*pretrain) {
            MetricsLog metrics(metrics_path.empty() ? out + ".metrics.tsv" : metrics_path);
            const int max_len = std::min(cfg.pretrain.max_len, mc.max_pos);
            const int log_every = std::max(1, cfg.pretrain.log_every);
            const BaseParams base = train_base_lm(
                mc, cfg.pretrain,
                [&](std::mt19937_64& rng) { return sample_pretrain_sequence(max_len, mc.vocab_size, rng); },
                [&](const StepLog& s) {
                    metrics.step(s);
                    if ((s.step + 1) % log_every == 0)
                        std::clog << "step " << s.step + 1 << " loss " << s.loss << " lr " << s.lr << "\n";
                });
            save_base(base, out);
            std::clog << "wrote " << out << "\n";
        } else if (*distill) {
            const BaseParams base = load_base(base_path, mc);
            const TrainConfig& tc = cfg.distill;
            Distiller d(base, AdapterSet::init(mc, tc.seed), tc);
            if (!resume_path.empty()) d.resume(resume_path);
            MetricsLog metrics(metrics_path.empty() ? out + ".metrics.tsv" : metrics_path);
            const int max_len = std::min(tc.max_len, mc.max_pos - 16);
            const int log_every = std::max(1, tc.log_every);

            DistillSchedule sched;
            sched.source = [&](std::mt19937_64& rng) { return sample_distill_example(max_len, mc.vocab_size, rng); };
            std::mt19937_64 held_rng(tc.seed ^ 0x5eedf00dull);
            for (int i = 0; i < 16; ++i) sched.held_out.push_back(sample_distill_example(max_len, mc.vocab_size, held_rng));
            sched.checkpoint_path = out + ".state";
            sched.best_path = out;
            sched.log = [&](const StepLog& s) {
                metrics.step(s);
                if ((s.step + 1) % log_every == 0)
                    std::clog << "step " << s.step + 1 << " loss " << s.loss << " lr " << s.lr << "\n";
            };
            sched.on_eval = [&](std::int64_t step, double div) {
                metrics.eval(step, div);
                std::clog << "step " << step << " held-out divergence " << div << "\n";
            };
            const AdapterSet best = run_distillation(d, sched);
            save_adapters(best, out);
            std::clog << "wrote " << out << "\n";
        } else if (*compress) {
            const BaseParams base = load_base(base_path, mc);
            const TokenSequence context = read_tokens(context_path, mc.vocab_size);
            if (context.size() > static_cast<std::size_t>(mc.max_pos)) throw UsageError("context exceeds max_pos");
            CompressedCache cache;
            if (method_str == "kvd") {
                if (adapters_path.empty()) throw UsageError("method kvd needs --adapters");
                const AdapterSet adapters = load_adapters(adapters_path, mc);
                cache = encode_compressed(base, adapters, context, *retention);
            } else {
                // Full cache. The file format needs one score per kept row;
                // sigmoid(20) rounds to exactly 1 in float, so the gate is a no-op.
                const KvCache full = encode_context(base, context);
                SelectionPlan plan;
                plan.sink_count = std::min<std::size_t>(mc.sink_count, context.size());
                for (std::size_t i = plan.sink_count; i < context.size(); ++i) plan.indices.push_back(i);
                ImportanceScores flat{std::vector<float>(context.size(), 20.0f)};
                cache = apply_selection(full, plan, &flat);
            }
            const std::size_t bytes = save_cache(cache, mc, out);
            std::clog << "wrote " << out << " (" << bytes << " bytes, " << cache.rows() << " of "
                      << context.size() << " rows)\n";
        } else if (*generate) {
            const BaseParams base = load_base(base_path, mc);
            const CompressedCache cache = load_cache(cache_path, mc);
            const TokenSequence question = read_tokens(question_path, mc.vocab_size);
            if (question.empty()) throw UsageError("question is empty");
            const TokenSequence answer =
                generate_greedy(base, cache.to_kv_cache(mc.decay_at_inference), question, max_new);
            auto file = open_out(out);
            write_tokens(file ? *file : std::cout, answer);
        } else if (*eval) {
            const Method method = parse_method(method_str);
            const BaseParams base = load_base(base_path, mc);
            std::optional<AdapterSet> adapters;
            if (method == Method::Kvd) {
                if (adapters_path.empty()) throw UsageError("method kvd needs --adapters");
                adapters = load_adapters(adapters_path, mc);
            }
            const Compressor comp = make_compressor(method, base, adapters ? &*adapters : nullptr);
            std::vector<float> retentions = cfg.eval_retentions;
            if (retention) retentions = {static_cast<float>(*retention)};
            const std::uint64_t eval_seed = seed.value_or(cfg.distill.seed);
            auto file = open_out(out);
            std::ostream& os = file ? *file : std::cout;
            if (task == "needle") {
                GridSpec spec;
                spec.lengths = cfg.eval_lengths;
                spec.retentions = retentions;
                spec.trials = cfg.eval_trials;
                spec.seed = eval_seed;
                write_grid_table(os, method_name(method), eval_needle(base, comp, spec));
            } else {
                const auto examples = gen_qa_corpus(cfg.qa_examples, QaSpec{}, mc.vocab_size, eval_seed);
                os << "method\tretention\taccuracy\tstderr\tn\n";
                for (float r : retentions) {
                    const QaResult res = eval_containment_qa(base, comp, examples, r, cfg.qa_max_new);
                    os << method_name(method) << "\t" << r << "\t" << res.accuracy << "\t" << res.stderr_ << "\t"
                       << res.n << "\n";
                }
            }
        }
    } catch (const UsageError& e) {
        std::cerr << "kvd: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "kvd: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "kvd: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
