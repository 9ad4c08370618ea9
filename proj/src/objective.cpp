#include "kvd/objective.hpp"

#include <cmath>
#include <vector>

namespace kvd {

double kl_categorical(std::span<const float> p, std::span<const float> q) {
    if (p.size() != q.size()) throw ShapeError("kl_categorical", "distributions differ in length");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (std::isnan(p[i]) || std::isnan(q[i])) throw Error("kl_categorical: NaN input");
        if (p[i] > 0.0f) kl += p[i] * (std::log(p[i] + kLogFloor) - std::log(q[i] + kLogFloor));
    }
    return kl;
}

namespace {

void softmax_row(std::span<const float> z, std::vector<double>& out) {
    out.resize(z.size());
    double mx = -INFINITY;
    for (float v : z) mx = std::max(mx, static_cast<double>(v));
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (out[i] = std::exp(z[i] - mx));
    for (auto& v : out) v /= s;
}

struct MixtureRows {
    std::vector<std::size_t> rows;
    std::size_t vocab = 0;
};

MixtureRows check_pair(const Tensor& teacher, const Tensor& student, std::span<const std::uint8_t> mask) {
    if (teacher.shape() != student.shape())
        throw ShapeError("mixture_loss", "teacher " + teacher.shape_str() + " vs student " + student.shape_str());
    if (!mask.empty() && mask.size() != student.rows())
        throw ShapeError("mixture_loss", "mask length differs from row count");
    MixtureRows m;
    m.vocab = student.cols();
    for (std::size_t r = 0; r < student.rows(); ++r)
        if (mask.empty() || mask[r]) m.rows.push_back(r);
    if (m.rows.empty()) throw Error("mixture_loss: mask selects no positions");
    if (!teacher.all_finite() || !student.all_finite()) throw Error("mixture_loss: non-finite logits");
    return m;
}

// Loss of one row and, if `grad` is set, its gradient wrt the student logits.
double mixture_row(std::span<const float> t, std::span<const float> s, double lambda,
                   std::vector<double>& p, std::vector<double>& q, std::vector<double>* grad) {
    softmax_row(t, p);
    softmax_row(s, q);
    const std::size_t V = p.size();
    double fwd = 0.0, rev = 0.0;
    for (std::size_t i = 0; i < V; ++i) {
        const double lp = std::log(p[i] + kLogFloor), lq = std::log(q[i] + kLogFloor);
        fwd += p[i] * (lp - lq);
        rev += q[i] * (lq - lp);
    }
    if (grad) {
        // Forward term: d/dz_j −Σ p_i log(q_i+ε).
        // Reverse term: with g_i = log(q_i+ε) − log(p_i+ε) + q_i/(q_i+ε),
        // d/dz_j = q_j (g_j − Σ q_i g_i).
        double pq = 0.0, qg = 0.0;
        std::vector<double>& gr = *grad;
        gr.resize(V);
        for (std::size_t i = 0; i < V; ++i) {
            pq += p[i] * q[i] / (q[i] + kLogFloor);
            gr[i] = std::log(q[i] + kLogFloor) - std::log(p[i] + kLogFloor) + q[i] / (q[i] + kLogFloor);
            qg += q[i] * gr[i];
        }
        for (std::size_t j = 0; j < V; ++j) {
            const double d_fwd = -p[j] * q[j] / (q[j] + kLogFloor) + q[j] * pq;
            const double d_rev = q[j] * (gr[j] - qg);
            gr[j] = lambda * d_fwd + (1.0 - lambda) * d_rev;
        }
    }
    return lambda * fwd + (1.0 - lambda) * rev;
}

}  // namespace

double mixture_loss_value(const Tensor& teacher, const Tensor& student, float lambda,
                          std::span<const std::uint8_t> mask) {
    const MixtureRows m = check_pair(teacher, student, mask);
    std::vector<double> p, q;
    double total = 0.0;
    for (auto r : m.rows) total += mixture_row(teacher.row(r), student.row(r), lambda, p, q, nullptr);
    return total / static_cast<double>(m.rows.size());
}

ad::Var mixture_loss(const Tensor& teacher, ad::Var student, float lambda, std::span<const std::uint8_t> mask) {
    if (!(lambda >= 0.0f && lambda <= 1.0f)) throw Error("mixture_loss: lambda must lie in [0, 1]");
    const Tensor& s = student.value();
    const MixtureRows m = check_pair(teacher, s, mask);
    const std::size_t V = m.vocab;
    const bool need_grad = student.graph->recording() && student.graph->requires_grad(student);
    Tensor grad_cache(need_grad ? std::vector<std::size_t>{s.rows(), V} : std::vector<std::size_t>{0});
    std::vector<double> p, q, g;
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(m.rows.size());
    for (auto r : m.rows) {
        total += mixture_row(teacher.row(r), s.row(r), lambda, p, q, need_grad ? &g : nullptr);
        if (need_grad)
            for (std::size_t j = 0; j < V; ++j) grad_cache.at(r, j) = static_cast<float>(g[j] * inv);
    }
    return student.graph->emit("mixture_loss", Tensor::scalar(static_cast<float>(total * inv)), {student},
                               [student, gc = std::move(grad_cache)](ad::Graph& gr, int self) {
        const float up = gr.grad_slot(self)[0];
        Tensor& gs = gr.grad_slot(student.id);
        for (std::size_t i = 0; i < gc.size(); ++i) gs[i] += up * gc[i];
    });
}

ad::Var ae_lm_loss(ad::Var recon_logits, std::span<const std::int32_t> recon_targets, ad::Var lm_logits,
                   std::span<const std::int32_t> lm_targets) {
    return ad::add(ad::cross_entropy(recon_logits, recon_targets), ad::cross_entropy(lm_logits, lm_targets));
}

}  // namespace kvd
