#pragma once

// Define-by-run reverse-mode differentiation over kvd::Tensor.
//
// Ops execute eagerly as they are added, so building a graph *is* evaluating
// it; node ids are a topological order. A Graph constructed with
// `record = false` keeps values only and skips all gradient bookkeeping,
// which is what inference paths use.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvd/tensor.hpp"

namespace kvd::ad {

class Graph;

// Lightweight handle to a node of a Graph.
struct Var {
    Graph* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    const Tensor& value() const;
    const std::vector<std::size_t>& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

class Graph {
public:
    // Called with the graph and the id of the node being differentiated.
    using BackwardFn = std::function<void(Graph&, int)>;

    explicit Graph(bool record = true) : record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }

    Var constant(Tensor value, std::string op = "constant");
    // A named leaf. When `trainable` and the graph records, it gets a gradient.
    Var parameter(const std::string& name, const Tensor& value, bool trainable = true);

    const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    bool requires_grad(Var v) const {
        return nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }
    const std::string& op(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].op; }

    // Gradient of the last backward() wrt v; zeros if v did not influence it.
    Tensor grad(Var v) const;
    // Mutable gradient slot, lazily zero-filled. Used by op backward closures.
    Tensor& grad_slot(int id);

    // Reverse sweep from a scalar loss. Throws ShapeError for non-scalars.
    void backward(Var loss);

    // Gradients of every trainable named parameter after backward().
    std::map<std::string, Tensor> parameter_grads() const;
    std::optional<Var> find_parameter(const std::string& name) const;

    std::size_t size() const { return nodes_.size(); }

    // Appends an op node. `fn` is dropped when no parent requires grad.
    Var emit(std::string op, Tensor value, std::vector<Var> parents, BackwardFn fn);

private:
    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    bool record_;
    // A deque keeps references to existing nodes valid while ops append.
    std::deque<Node> nodes_;
    std::map<std::string, int> params_;
};

// gradient(graph, loss, names): backward from `loss`, return grads by name.
std::map<std::string, Tensor> gradient(Graph& g, Var loss, const std::vector<std::string>& names);

// ---- ops -----------------------------------------------------------------

Var matmul(Var a, Var b);                 // [m×k]·[k×n]
Var add(Var a, Var b);                    // same shape
Var add_row(Var a, Var row);              // [m×n] + broadcast [n]
Var mul(Var a, Var b);                    // elementwise, same shape
Var mul_col(Var a, Var col);              // [m×n] ⊙ broadcast [m] over columns
Var scale(Var a, float s);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var gelu(Var a);                          // tanh approximation
Var softmax(Var a);                       // row-wise
Var rms_norm(Var x, Var gain, float eps = 1e-6f);
Var embedding(Var table, std::span<const std::int32_t> ids);
Var concat_rows(Var a, Var b);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var transpose(Var a);
Var sum(Var a);
Var mean(Var a);

// Rotary position embedding applied per head to the rows of x [T×H·hd].
Var rope(Var x, std::span<const std::int32_t> positions, std::size_t n_heads, float base = 10000.0f);

// Multi-head causal attention. k and v hold `past` prior rows followed by the
// q rows. gate (optional, length past) multiplies the pre-softmax logits of
// the past keys. If `probs_out` is set it receives the H×T×S weights.
struct AttentionArgs {
    std::size_t n_heads;
    std::size_t past;
    std::optional<Var> gate;
    Tensor* probs_out = nullptr;
};
Var attention(Var q, Var k, Var v, const AttentionArgs& args);

// Mean over rows of -log softmax(logits)[target]. Rows with target < 0 are skipped.
Var cross_entropy(Var logits, std::span<const std::int32_t> targets);

}  // namespace kvd::ad
