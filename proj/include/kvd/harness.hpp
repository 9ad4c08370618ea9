#pragma once

// Synthetic corpora and the evaluation protocols run on them.
//
// Token layout (vocab ≥ 300):
//   0 end-of-sequence, 1 begin, 2 pad, 3 query, 4 copy, 5 separator,
//   6 reconstruct marker, 7..15 punctuation, 16..143 keys, 144..271 values,
//   272.. filler. Filler never overlaps keys or values.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kvd/model.hpp"
#include "kvd/trainer.hpp"

namespace kvd {

namespace vocab {
inline constexpr Token kBos = 1;
inline constexpr Token kPad = kPadToken;
inline constexpr Token kQuery = 3;
inline constexpr Token kCopy = 4;
inline constexpr Token kSep = 5;
inline constexpr Token kRecon = kReconToken;
inline constexpr Token kPeriod = 7;
inline constexpr Token kPunctBegin = 7, kPunctEnd = 16;
inline constexpr Token kKeyBegin = 16, kKeyEnd = 144;
inline constexpr Token kValueBegin = 144, kValueEnd = 272;
inline constexpr Token kFillerBegin = 272;
inline constexpr int kMinVocab = 300;

inline bool is_punct(Token t) { return t >= kPunctBegin && t < kPunctEnd; }
inline bool is_key(Token t) { return t >= kKeyBegin && t < kKeyEnd; }
inline bool is_value(Token t) { return t >= kValueBegin && t < kValueEnd; }
}  // namespace vocab

// ---- corpora ---------------------------------------------------------------

struct NeedleSpec {
    int haystack_len = 256;  // context length including the begin token
    Token key = vocab::kKeyBegin;
    Token value = vocab::kValueBegin;
    double position = 0.5;   // fraction of the haystack
};

// Index at which the needle's key lands for a given spec.
std::size_t needle_index(const NeedleSpec& spec);

// Context: begin, filler, "key value ." at `position`. Instruction: query key.
// Answer: value, end-of-sequence.
DistillExample make_needle(const NeedleSpec& spec, int vocab_size, std::mt19937_64& rng);

// Needle examples with random key/value, length in [min_len, max_len] and
// uniform position.
std::vector<DistillExample> gen_needle_corpus(std::size_t count, int min_len, int max_len,
                                              int vocab_size, std::uint64_t seed);

struct QaSpec {
    int min_len = 96;
    int max_len = 192;
    int min_facts = 3;
    int max_facts = 6;
    int min_span = 2;
    int max_span = 4;
};

// Context of facts "key v1 .. vm ." scattered in filler; the question asks
// for one fact's span.
DistillExample make_qa(const QaSpec& spec, int vocab_size, std::mt19937_64& rng);
std::vector<DistillExample> gen_qa_corpus(std::size_t count, const QaSpec& spec, int vocab_size,
                                          std::uint64_t seed);

// Context: begin, copy, payload. Instruction: separator. Answer: payload, end.
DistillExample make_copy(int payload_len, int vocab_size, std::mt19937_64& rng);

// Mixed distillation stream: needles and QA contexts of varied length.
DistillExample sample_distill_example(int max_len, int vocab_size, std::mt19937_64& rng);

// Base-LM pretraining stream: retrieval contexts followed by several queries,
// copy sequences and repeated random runs. Loss targets are only the answer
// tokens (the second run of a repeat counts as an answer).
LmSequence sample_pretrain_sequence(int max_len, int vocab_size, std::mt19937_64& rng);

// ---- evaluation --------------------------------------------------------------

// Builds the cache a question is answered from. Question-independent
// methods must ignore `question`.
using Compressor = std::function<KvCache(std::span<const Token> context,
                                         std::span<const Token> question, float retention)>;

enum class Method { Kvd, H2A, H2I, None };

// "kvd", "h2a", "h2i" or "none"; throws ConfigError otherwise.
Method parse_method(const std::string& name);
std::string method_name(Method m);

// Compressor for one method. `adapters` is required for Kvd and ignored
// otherwise; None returns the full cache whatever the retention.
Compressor make_compressor(Method method, const BaseParams& base, const AdapterSet* adapters);

struct GridCell {
    int length = 0;
    float retention = 0.0f;
    double accuracy = 0.0;
    double stderr_ = 0.0;
    int n = 0;
};

struct EvalGrid {
    std::vector<GridCell> cells;
    const GridCell& at(int length, float retention) const;
};

struct GridSpec {
    std::vector<int> lengths{64, 128, 256, 512};
    std::vector<float> retentions{1.0f, 0.25f, 0.10f, 0.05f, 0.01f};
    int trials = 50;
    int max_new = 4;
    std::uint64_t seed = 0;
};

// Needle positions are spread evenly over each cell's trials; a trial counts
// as correct when greedy generation emits the value token.
EvalGrid eval_needle(const BaseParams& base, const Compressor& compress, const GridSpec& spec);

struct QaResult {
    double accuracy = 0.0;
    double stderr_ = 0.0;
    int n = 0;
};

// Drops punctuation tokens.
TokenSequence normalize_answer(std::span<const Token> tokens);
// True when either normalized sequence contains the other as a contiguous run
// and the generation is non-empty.
bool contains_answer(std::span<const Token> generated, std::span<const Token> truth);

QaResult eval_containment_qa(const BaseParams& base, const Compressor& compress,
                             std::span<const DistillExample> examples, float retention, int max_new);

// Mean mixture loss between full-cache and compressed-cache next-token
// distributions over instruction + answer positions.
double eval_teacher_divergence(const BaseParams& base, const Compressor& compress,
                               std::span<const DistillExample> examples, float retention, float lambda);

// Tab-delimited: method, length, retention, accuracy, stderr, n (with header).
void write_grid_table(std::ostream& out, const std::string& method, const EvalGrid& grid,
                      bool header = true);

}  // namespace kvd
