#include "kvd/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "kvd/kernels.hpp"

namespace kvd::ad {

namespace k = kvd::kernels;

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::constant(Tensor value, std::string op) {
    return emit(std::move(op), std::move(value), {}, nullptr);
}

Var Graph::parameter(const std::string& name, const Tensor& value, bool trainable) {
    if (params_.count(name)) throw Error("parameter '" + name + "' bound twice");
    Node n;
    n.op = "param:" + name;
    n.value = value;
    n.requires_grad = record_ && trainable;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size() - 1);
    params_[name] = id;
    return {this, id};
}

Var Graph::emit(std::string op, Tensor value, std::vector<Var> parents, BackwardFn fn) {
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    if (record_ && fn) {
        n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                      [this](Var p) { return requires_grad(p); });
        if (n.requires_grad) n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Tensor Graph::grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape(), 0.0f);
    return n.grad;
}

Tensor& Graph::grad_slot(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0f);
    return n.grad;
}

void Graph::backward(Var loss) {
    if (!record_) throw Error("backward: graph was built without gradient recording");
    if (value(loss).size() != 1) {
        throw ShapeError(op(loss), "backward needs a scalar loss, got " + value(loss).shape_str());
    }
    for (auto& n : nodes_) n.grad = Tensor();
    grad_slot(loss.id)[0] = 1.0f;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
        n.backward(*this, i);
    }
}

std::map<std::string, Tensor> Graph::parameter_grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : params_) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.requires_grad) out.emplace(name, grad({const_cast<Graph*>(this), id}));
    }
    return out;
}

std::optional<Var> Graph::find_parameter(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) return std::nullopt;
    return Var{const_cast<Graph*>(this), it->second};
}

std::map<std::string, Tensor> gradient(Graph& g, Var loss, const std::vector<std::string>& names) {
    g.backward(loss);
    std::map<std::string, Tensor> out;
    for (const auto& name : names) {
        auto v = g.find_parameter(name);
        if (!v) throw Error("gradient: unknown parameter '" + name + "'");
        out.emplace(name, g.grad(*v));
    }
    return out;
}

namespace {

void require(bool ok, const char* op, const std::string& what) {
    if (!ok) throw ShapeError(op, what);
}

void add_into(Tensor& dst, std::span<const float> src) {
    float* d = dst.data();
    for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

}  // namespace

Var matmul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require(A.cols() == B.rows() && B.rank() == 2, "matmul",
            "cannot multiply " + A.shape_str() + " by " + B.shape_str());
    const std::size_t m = A.rows(), kk = A.cols(), n = B.cols();
    Tensor C({m, n});
    k::omp::matmul_nn(A.span(), B.span(), C.span(), {m, kk, n});
    return a.graph->emit("matmul", std::move(C), {a, b}, [a, b, m, kk, n](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        if (g.requires_grad(a))
            k::omp::matmul_nt(go.span(), g.value(b).span(), g.grad_slot(a.id).span(), {m, n, kk}, true);
        if (g.requires_grad(b))
            k::omp::matmul_tn(g.value(a).span(), go.span(), g.grad_slot(b.id).span(), {m, kk, n}, true);
    });
}

Var add(Var a, Var b) {
    require(a.shape() == b.shape(), "add",
            "shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    Tensor out = a.value();
    add_into(out, b.value().span());
    return a.graph->emit("add", std::move(out), {a, b}, [a, b](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        if (g.requires_grad(a)) add_into(g.grad_slot(a.id), go.span());
        if (g.requires_grad(b)) add_into(g.grad_slot(b.id), go.span());
    });
}

Var add_row(Var a, Var row) {
    const std::size_t m = a.rows(), n = a.cols();
    require(row.value().size() == n, "add_row",
            "row " + row.value().shape_str() + " does not broadcast over " + a.value().shape_str());
    Tensor out = a.value();
    const float* r = row.value().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] += r[j];
    return a.graph->emit("add_row", std::move(out), {a, row}, [a, row, m, n](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        if (g.requires_grad(a)) add_into(g.grad_slot(a.id), go.span());
        if (g.requires_grad(row)) {
            Tensor& gr = g.grad_slot(row.id);
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i) s += go.data()[i * n + j];
                gr[j] += static_cast<float>(s);
            }
        }
    });
}

Var mul(Var a, Var b) {
    require(a.shape() == b.shape(), "mul",
            "shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.graph->emit("mul", std::move(out), {a, b}, [a, b](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        if (g.requires_grad(a)) {
            Tensor& ga = g.grad_slot(a.id);
            const Tensor& bv = g.value(b);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (g.requires_grad(b)) {
            Tensor& gb = g.grad_slot(b.id);
            const Tensor& av = g.value(a);
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

Var mul_col(Var a, Var col) {
    const std::size_t m = a.rows(), n = a.cols();
    require(col.value().size() == m, "mul_col",
            "column " + col.value().shape_str() + " does not broadcast over " + a.value().shape_str());
    Tensor out = a.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] *= col.value()[i];
    return a.graph->emit("mul_col", std::move(out), {a, col}, [a, col, m, n](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        if (g.requires_grad(a)) {
            Tensor& ga = g.grad_slot(a.id);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    ga.data()[i * n + j] += go.data()[i * n + j] * g.value(col)[i];
        }
        if (g.requires_grad(col)) {
            Tensor& gc = g.grad_slot(col.id);
            const Tensor& av = g.value(a);
            for (std::size_t i = 0; i < m; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    s += static_cast<double>(go.data()[i * n + j]) * av.data()[i * n + j];
                gc[i] += static_cast<float>(s);
            }
        }
    });
}

Var scale(Var a, float s) {
    Tensor out = a.value();
    for (auto& v : out.values()) v *= s;
    return a.graph->emit("scale", std::move(out), {a}, [a, s](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
    });
}

Var sigmoid(Var a) {
    Tensor out = a.value();
    for (auto& v : out.values()) v = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
    return a.graph->emit("sigmoid", std::move(out), {a}, [a](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        const Tensor& y = g.value({&g, self});
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (1.0f - y[i]);
    });
}

Var exp(Var a) {
    Tensor out = a.value();
    for (auto& v : out.values()) v = std::exp(v);
    return a.graph->emit("exp", std::move(out), {a}, [a](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        const Tensor& y = g.value({&g, self});
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
    });
}

Var log(Var a) {
    Tensor out = a.value();
    for (auto& v : out.values()) v = std::log(v);
    return a.graph->emit("log", std::move(out), {a}, [a](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        const Tensor& x = g.value(a);
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / x[i];
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
    Tensor out = a.value();
    for (auto& v : out.values()) {
        const double x = v;
        v = static_cast<float>(0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))));
    }
    return a.graph->emit("gelu", std::move(out), {a}, [a](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        const Tensor& xv = g.value(a);
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) {
            const double x = xv[i];
            const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            ga[i] += static_cast<float>(go[i] * d);
        }
    });
}

Var softmax(Var a) {
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = a.value();
    for (std::size_t i = 0; i < m; ++i) {
        auto r = out.row(i);
        const float mx = *std::max_element(r.begin(), r.end());
        double s = 0.0;
        for (auto& v : r) s += (v = std::exp(v - mx));
        for (auto& v : r) v = static_cast<float>(v / s);
    }
    return a.graph->emit("softmax", std::move(out), {a}, [a, m, n](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        const Tensor& y = g.value({&g, self});
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < m; ++i) {
            double dotp = 0.0;
            for (std::size_t j = 0; j < n; ++j) dotp += static_cast<double>(go.at(i, j)) * y.at(i, j);
            for (std::size_t j = 0; j < n; ++j)
                ga.at(i, j) += static_cast<float>(y.at(i, j) * (go.at(i, j) - dotp));
        }
    });
}

Var rms_norm(Var x, Var gain, float eps) {
    const std::size_t m = x.rows(), n = x.cols();
    require(gain.value().size() == n, "rms_norm",
            "gain " + gain.value().shape_str() + " vs input " + x.value().shape_str());
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    std::vector<float> inv(m);
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += static_cast<double>(xv.at(i, j)) * xv.at(i, j);
        const double r = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
        inv[i] = static_cast<float>(r);
        for (std::size_t j = 0; j < n; ++j)
            out.at(i, j) = static_cast<float>(xv.at(i, j) * r * gain.value()[j]);
    }
    return x.graph->emit("rms_norm", std::move(out), {x, gain},
                         [x, gain, m, n, inv = std::move(inv)](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        const Tensor& xv = g.value(x);
        const Tensor& gv = g.value(gain);
        const bool need_x = g.requires_grad(x);
        const bool need_g = g.requires_grad(gain);
        std::vector<double> dgain(need_g ? n : 0, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            const double r = inv[i];
            double proj = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double xhat = xv.at(i, j) * r;
                proj += static_cast<double>(go.at(i, j)) * gv[j] * xhat;
                if (need_g) dgain[j] += static_cast<double>(go.at(i, j)) * xhat;
            }
            proj /= static_cast<double>(n);
            if (need_x) {
                Tensor& gx = g.grad_slot(x.id);
                for (std::size_t j = 0; j < n; ++j) {
                    const double xhat = xv.at(i, j) * r;
                    gx.at(i, j) += static_cast<float>(r * (go.at(i, j) * gv[j] - xhat * proj));
                }
            }
        }
        if (need_g) {
            Tensor& gg = g.grad_slot(gain.id);
            for (std::size_t j = 0; j < n; ++j) gg[j] += static_cast<float>(dgain[j]);
        }
    });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
    const std::size_t V = table.rows(), d = table.cols();
    Tensor out({ids.size(), d});
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    for (std::size_t i = 0; i < idv.size(); ++i) {
        require(idv[i] >= 0 && static_cast<std::size_t>(idv[i]) < V, "embedding",
                "token id " + std::to_string(idv[i]) + " outside vocabulary of " + std::to_string(V));
        auto src = table.value().row(static_cast<std::size_t>(idv[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return table.graph->emit("embedding", std::move(out), {table},
                             [table, d, idv = std::move(idv)](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        Tensor& gt = g.grad_slot(table.id);
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t j = 0; j < d; ++j)
                gt.at(static_cast<std::size_t>(idv[i]), j) += go.at(i, j);
    });
}

Var concat_rows(Var a, Var b) {
    const std::size_t n = a.rows() ? a.cols() : b.cols();
    require(a.rows() == 0 || b.rows() == 0 || a.cols() == b.cols(), "concat_rows",
            "column mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    const std::size_t ma = a.rows(), mb = b.rows();
    std::vector<float> data;
    data.reserve((ma + mb) * n);
    data.insert(data.end(), a.value().values().begin(), a.value().values().end());
    data.insert(data.end(), b.value().values().begin(), b.value().values().end());
    return a.graph->emit("concat_rows", Tensor({ma + mb, n}, std::move(data)), {a, b},
                         [a, b, ma, mb, n](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        if (g.requires_grad(a) && ma)
            add_into(g.grad_slot(a.id), go.span().subspan(0, ma * n));
        if (g.requires_grad(b) && mb)
            add_into(g.grad_slot(b.id), go.span().subspan(ma * n, mb * n));
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    const std::size_t n = a.cols();
    require(begin <= end && end <= a.rows(), "slice_rows",
            "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                a.value().shape_str());
    auto src = a.value().span().subspan(begin * n, (end - begin) * n);
    Tensor out({end - begin, n}, std::vector<float>(src.begin(), src.end()));
    return a.graph->emit("slice_rows", std::move(out), {a}, [a, begin, n](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[begin * n + i] += go[i];
    });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
    const std::size_t n = a.rows() ? a.cols() : 0;
    const bool vec = a.value().rank() == 1;
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    // A rank-1 tensor gathers single elements.
    const std::size_t width = vec ? 1 : n;
    const std::size_t limit = vec ? a.value().size() : a.rows();
    std::vector<float> data;
    data.reserve(idx.size() * width);
    for (auto r : idx) {
        require(r < limit, "gather_rows", "row " + std::to_string(r) + " outside " + a.value().shape_str());
        auto src = a.value().span().subspan(r * width, width);
        data.insert(data.end(), src.begin(), src.end());
    }
    Tensor out = vec ? Tensor({idx.size()}, std::move(data)) : Tensor({idx.size(), n}, std::move(data));
    return a.graph->emit("gather_rows", std::move(out), {a}, [a, width, idx = std::move(idx)](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < width; ++j) ga[idx[i] * width + j] += go[i * width + j];
    });
}

Var transpose(Var a) {
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
    return a.graph->emit("transpose", std::move(out), {a}, [a, m, n](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        Tensor& ga = g.grad_slot(a.id);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += go.at(j, i);
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (float v : a.value().values()) s += v;
    return a.graph->emit("sum", Tensor::scalar(static_cast<float>(s)), {a}, [a](Graph& g, int self) {
        const float go = g.grad_slot(self)[0];
        for (auto& v : g.grad_slot(a.id).values()) v += go;
    });
}

Var mean(Var a) {
    const auto n = a.value().size();
    require(n > 0, "mean", "mean of an empty tensor");
    double s = 0.0;
    for (float v : a.value().values()) s += v;
    return a.graph->emit("mean", Tensor::scalar(static_cast<float>(s / static_cast<double>(n))), {a},
                         [a, n](Graph& g, int self) {
        const float go = g.grad_slot(self)[0] / static_cast<float>(n);
        for (auto& v : g.grad_slot(a.id).values()) v += go;
    });
}

namespace {

// cos/sin tables for rows × (hd/2) frequencies.
void rope_tables(std::span<const std::int32_t> positions, std::size_t hd, float base,
                 std::vector<float>& cs, std::vector<float>& sn) {
    const std::size_t half = hd / 2;
    cs.resize(positions.size() * half);
    sn.resize(positions.size() * half);
    for (std::size_t t = 0; t < positions.size(); ++t) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double ang = positions[t] * freq;
            cs[t * half + i] = static_cast<float>(std::cos(ang));
            sn[t * half + i] = static_cast<float>(std::sin(ang));
        }
    }
}

void rope_apply(const float* in, float* out, std::size_t T, std::size_t H, std::size_t hd,
                const std::vector<float>& cs, const std::vector<float>& sn, bool inverse) {
    const std::size_t half = hd / 2, D = H * hd;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < half; ++i) {
                const float c = cs[t * half + i];
                const float s = inverse ? -sn[t * half + i] : sn[t * half + i];
                const float x1 = in[t * D + h * hd + i];
                const float x2 = in[t * D + h * hd + half + i];
                out[t * D + h * hd + i] = x1 * c - x2 * s;
                out[t * D + h * hd + half + i] = x1 * s + x2 * c;
            }
}

}  // namespace

Var rope(Var x, std::span<const std::int32_t> positions, std::size_t n_heads, float base) {
    const std::size_t T = x.rows(), D = x.cols();
    require(positions.size() == T, "rope", "positions do not match rows of " + x.value().shape_str());
    require(n_heads > 0 && D % n_heads == 0 && (D / n_heads) % 2 == 0, "rope",
            "width " + std::to_string(D) + " does not split into even heads");
    const std::size_t hd = D / n_heads;
    std::vector<float> cs, sn;
    rope_tables(positions, hd, base, cs, sn);
    Tensor out(x.value().shape());
    rope_apply(x.value().data(), out.data(), T, n_heads, hd, cs, sn, false);
    return x.graph->emit("rope", std::move(out), {x},
                         [x, T, n_heads, hd, cs = std::move(cs), sn = std::move(sn)](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        Tensor back(go.shape());
        rope_apply(go.data(), back.data(), T, n_heads, hd, cs, sn, true);
        add_into(g.grad_slot(x.id), back.span());
    });
}

Var attention(Var q, Var kv, Var v, const AttentionArgs& args) {
    const std::size_t T = q.rows(), D = q.cols(), S = kv.rows();
    require(args.n_heads > 0 && D % args.n_heads == 0, "attention",
            "width " + std::to_string(D) + " not divisible by heads");
    require(kv.cols() == D && v.cols() == D && v.rows() == S, "attention",
            "q " + q.value().shape_str() + " k " + kv.value().shape_str() + " v " + v.value().shape_str());
    require(S == args.past + T, "attention",
            "key rows " + std::to_string(S) + " != past " + std::to_string(args.past) + " + queries " +
                std::to_string(T));
    if (args.gate)
        require(args.gate->value().size() == args.past, "attention",
                "gate " + args.gate->value().shape_str() + " does not cover past " + std::to_string(args.past));
    const k::AttnDims dims{T, S, args.past, args.n_heads, D / args.n_heads};
    const float sc = 1.0f / std::sqrt(static_cast<float>(dims.head_dim));
    Tensor probs({args.n_heads, T, S});
    Tensor out({T, D});
    std::span<const float> gate = args.gate ? args.gate->value().span() : std::span<const float>{};
    k::omp::attention_forward(q.value().span(), kv.value().span(), v.value().span(), gate, sc, dims,
                              probs.span(), out.span());
    if (args.probs_out) *args.probs_out = probs;
    std::vector<Var> parents{q, kv, v};
    std::optional<Var> gvar = args.gate;
    if (gvar) parents.push_back(*gvar);
    return q.graph->emit("attention", std::move(out), std::move(parents),
                         [q, kv, v, gvar, dims, sc, probs = std::move(probs)](Graph& g, int self) {
        const Tensor& go = g.grad_slot(self);
        Tensor dq(g.value(q).shape()), dk(g.value(kv).shape()), dv(g.value(v).shape());
        Tensor dg;
        std::span<const float> gate;
        if (gvar) {
            gate = g.value(*gvar).span();
            dg = Tensor(g.value(*gvar).shape());
        }
        k::omp::attention_backward(go.span(), g.value(q).span(), g.value(kv).span(), g.value(v).span(),
                                   gate, probs.span(), sc, dims, dq.span(), dk.span(), dv.span(),
                                   dg.span());
        if (g.requires_grad(q)) add_into(g.grad_slot(q.id), dq.span());
        if (g.requires_grad(kv)) add_into(g.grad_slot(kv.id), dk.span());
        if (g.requires_grad(v)) add_into(g.grad_slot(v.id), dv.span());
        if (gvar && g.requires_grad(*gvar)) add_into(g.grad_slot(gvar->id), dg.span());
    });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets) {
    const std::size_t m = logits.rows(), V = logits.cols();
    require(targets.size() == m, "cross_entropy", "targets do not match rows of " + logits.value().shape_str());
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    std::vector<float> probs(m * V);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < m; ++i) {
        auto r = logits.value().row(i);
        const float mx = *std::max_element(r.begin(), r.end());
        double s = 0.0;
        for (std::size_t j = 0; j < V; ++j) s += std::exp(static_cast<double>(r[j]) - mx);
        for (std::size_t j = 0; j < V; ++j)
            probs[i * V + j] = static_cast<float>(std::exp(static_cast<double>(r[j]) - mx) / s);
        if (tv[i] < 0) continue;
        require(static_cast<std::size_t>(tv[i]) < V, "cross_entropy", "target outside vocabulary");
        total += std::log(s) + mx - r[static_cast<std::size_t>(tv[i])];
        ++count;
    }
    require(count > 0, "cross_entropy", "no target rows");
    const float loss = static_cast<float>(total / static_cast<double>(count));
    return logits.graph->emit("cross_entropy", Tensor::scalar(loss), {logits},
                              [logits, m, V, count, tv = std::move(tv), probs = std::move(probs)](Graph& g, int self) {
        const float go = g.grad_slot(self)[0] / static_cast<float>(count);
        Tensor& gl = g.grad_slot(logits.id);
        for (std::size_t i = 0; i < m; ++i) {
            if (tv[i] < 0) continue;
            for (std::size_t j = 0; j < V; ++j) gl.at(i, j) += go * probs[i * V + j];
            gl.at(i, static_cast<std::size_t>(tv[i])) -= go;
        }
    });
}

}  // namespace kvd::ad
