#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "relikin/error.hpp"
#include "relikin/tensor.hpp"

namespace relikin::ad {

enum class Op : std::uint8_t {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Acos,
    Neg,
    Clamp,
    Slice,
    Concat,
    ReduceSum,
    ReduceMean,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Matmul: return "matmul";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Sigmoid: return "sigmoid";
        case Op::Tanh: return "tanh";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Square: return "square";
        case Op::Abs: return "abs";
        case Op::Acos: return "acos";
        case Op::Neg: return "neg";
        case Op::Clamp: return "clamp";
        case Op::Slice: return "slice";
        case Op::Concat: return "concat";
        case Op::ReduceSum: return "reduce_sum";
        case Op::ReduceMean: return "reduce_mean";
    }
    return "?";
}

// Handle into a Tape; cheap to copy. Valid only for the tape that created it.
struct Value {
    std::uint32_t id = 0;
};

// Reverse-mode tape over whole tensors. Nodes are recorded in evaluation
// order, which is a topological order by construction, so the backward sweep
// visits nodes in reverse index order: each node exactly once, fixed
// accumulation order, bit-reproducible results.
//
// One tape = one forward pass. backward() may be called once; a second call
// throws (build a fresh tape per gradient evaluation). Tapes are
// single-threaded; independent tapes may run concurrently.
class Tape {
public:
    // grad_enabled=false keeps the identical forward compute path but refuses
    // backward(); useful for inference.
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t node_count() const { return nodes_.size(); }
    std::size_t backward_applications() const { return backward_applications_; }

    const Tensor& value(Value v) const { return nodes_[v.id].val; }

    // Leaf values must be finite on entry.
    Value leaf(Tensor t) {
        if (!t.all_finite()) throw NumericError("leaf: non-finite input tensor");
        return push(Op::Leaf, {}, std::move(t));
    }

    Value matmul(Value a, Value b) {
        return push(Op::Matmul, {a, b}, kern::matmul(val(a), val(b)));
    }
    // add/sub/mul broadcast: same shape, scalar rhs, or (1,cols) row rhs.
    Value add(Value a, Value b) { return push(Op::Add, {a, b}, kern::add(val(a), val(b))); }
    Value sub(Value a, Value b) { return push(Op::Sub, {a, b}, kern::sub(val(a), val(b))); }
    Value mul(Value a, Value b) { return push(Op::Mul, {a, b}, kern::mul(val(a), val(b))); }
    // div broadcast: same shape or scalar rhs.
    Value div(Value a, Value b) { return push(Op::Div, {a, b}, kern::div(val(a), val(b))); }

    Value sigmoid(Value a) { return push(Op::Sigmoid, {a}, kern::sigmoid(val(a))); }
    Value tanh(Value a) { return push(Op::Tanh, {a}, kern::tanh(val(a))); }
    Value exp(Value a) { return push(Op::Exp, {a}, kern::exp(val(a))); }
    Value log(Value a) { return push(Op::Log, {a}, kern::log(val(a))); }
    Value sqrt(Value a) { return push(Op::Sqrt, {a}, kern::sqrt(val(a))); }
    Value square(Value a) { return push(Op::Square, {a}, kern::square(val(a))); }
    Value abs(Value a) { return push(Op::Abs, {a}, kern::abs(val(a))); }
    Value acos(Value a) { return push(Op::Acos, {a}, kern::acos(val(a))); }
    Value neg(Value a) { return push(Op::Neg, {a}, kern::neg(val(a))); }

    // Gradient 1 inside [lo, hi] (boundary counts as inside), 0 outside.
    Value clamp(Value a, double lo, double hi) {
        const std::uint32_t id = push(Op::Clamp, {a}, kern::clamp(val(a), lo, hi)).id;
        nodes_[id].lo = lo;
        nodes_[id].hi = hi;
        return {id};
    }

    Value slice(Value a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
        const std::uint32_t id = push(Op::Slice, {a}, kern::slice(val(a), r0, r1, c0, c1)).id;
        nodes_[id].rect = {r0, r1, c0, c1};
        return {id};
    }

    Value concat_rows(const std::vector<Value>& parts) {
        std::vector<const Tensor*> ptrs;
        ptrs.reserve(parts.size());
        for (Value p : parts) ptrs.push_back(&val(p));
        Tensor out = kern::concat_rows(ptrs);
        Value v = push(Op::Concat, {}, std::move(out));
        for (Value p : parts) nodes_[v.id].multi.push_back(p.id);
        return v;
    }

    Value reduce_sum(Value a) { return push(Op::ReduceSum, {a}, kern::reduce_sum(val(a))); }
    Value reduce_mean(Value a) { return push(Op::ReduceMean, {a}, kern::reduce_mean(val(a))); }

    // Convenience: multiply by a compile-time constant (recorded as mul with
    // a scalar leaf).
    Value scale(Value a, double s) { return mul(a, leaf(Tensor::scalar(s))); }

    // Reverse sweep from a scalar root over the whole tape. Exactly one
    // backward-rule application per recorded node, in reverse creation order.
    void backward(Value root) {
        if (!grad_enabled_) throw ValidationError("backward: tape recorded with grad disabled");
        if (backward_done_) throw ValidationError("backward: tape already differentiated");
        if (!nodes_[root.id].val.is_scalar())
            throw ValidationError("backward: root must be scalar, got shape " +
                                  nodes_[root.id].val.shape_str());
        backward_done_ = true;
        ensure_grad(root.id);
        nodes_[root.id].grad[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            apply_backward(static_cast<std::uint32_t>(i));
            ++backward_applications_;
        }
    }

    // Gradient of the last backward() root w.r.t. v. A leaf detached from the
    // root yields zeros, not an error.
    const Tensor& grad(Value v) {
        ensure_grad(v.id);
        return nodes_[v.id].grad;
    }

private:
    struct Node {
        Op op = Op::Leaf;
        std::array<std::uint32_t, 2> in{};
        std::uint8_t fanin = 0;
        Tensor val;
        Tensor grad; // empty until needed
        double lo = 0.0, hi = 0.0;
        std::array<std::size_t, 4> rect{};
        std::vector<std::uint32_t> multi; // concat inputs
    };

    const Tensor& val(Value v) const { return nodes_[v.id].val; }

    Value push(Op op, std::initializer_list<Value> ins, Tensor out) {
        if (op != Op::Leaf && !out.all_finite())
            throw NumericError(std::string(op_name(op)) + ": non-finite value in forward result");
        Node n;
        n.op = op;
        n.fanin = static_cast<std::uint8_t>(ins.size());
        std::size_t k = 0;
        for (Value v : ins) n.in[k++] = v.id;
        n.val = std::move(out);
        nodes_.push_back(std::move(n));
        return {static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    void ensure_grad(std::uint32_t id) {
        if (nodes_[id].grad.numel() == 0) nodes_[id].grad = Tensor::zeros(nodes_[id].val.shape());
    }

    // Accumulate g (shaped like the broadcast output) into the gradient of
    // input b that was broadcast against a.
    void accumulate_broadcast(std::uint32_t b_id, const Tensor& a_val, const Tensor& g,
                              const std::function<double(std::size_t)>& term) {
        ensure_grad(b_id);
        Tensor& gb = nodes_[b_id].grad;
        const Tensor& b_val = nodes_[b_id].val;
        if (a_val.same_shape(b_val)) {
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += term(i);
        } else if (b_val.is_scalar()) {
            double s = 0.0;
            for (std::size_t i = 0; i < g.numel(); ++i) s += term(i);
            gb[0] += s;
        } else { // row broadcast
            const std::size_t c = a_val.cols();
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i % c] += term(i);
        }
    }

    void apply_backward(std::uint32_t id) {
        Node& n = nodes_[id];
        if (n.op == Op::Leaf) return;
        if (n.grad.numel() == 0) return; // not on any path to the root
        const Tensor& g = n.grad;

        auto in_val = [&](int k) -> const Tensor& { return nodes_[n.in[k]].val; };
        auto in_grad = [&](int k) -> Tensor& {
            ensure_grad(n.in[k]);
            return nodes_[n.in[k]].grad;
        };

        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Matmul: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                const std::size_t m = a.dim(0), k = a.dim(1), c = b.dim(1);
                Tensor& ga = in_grad(0);
                Tensor& gb = in_grad(1);
                // ga += g . b^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        double s = 0.0;
                        for (std::size_t p = 0; p < c; ++p)
                            s += g.data()[i * c + p] * b.data()[j * c + p];
                        ga.data()[i * k + j] += s;
                    }
                // gb += a^T . g
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const double av = a.data()[i * k + j];
                        for (std::size_t p = 0; p < c; ++p)
                            gb.data()[j * c + p] += av * g.data()[i * c + p];
                    }
                break;
            }
            case Op::Add: {
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
                accumulate_broadcast(n.in[1], in_val(0), g,
                                     [&](std::size_t i) { return g[i]; });
                break;
            }
            case Op::Sub: {
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
                accumulate_broadcast(n.in[1], in_val(0), g,
                                     [&](std::size_t i) { return -g[i]; });
                break;
            }
            case Op::Mul: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                Tensor& ga = in_grad(0);
                if (a.same_shape(b)) {
                    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * b[i];
                } else if (b.is_scalar()) {
                    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * b[0];
                } else {
                    const std::size_t c = a.cols();
                    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * b[i % c];
                }
                accumulate_broadcast(n.in[1], a, g,
                                     [&](std::size_t i) { return g[i] * a[i]; });
                break;
            }
            case Op::Div: {
                const Tensor& a = in_val(0);
                const Tensor& b = in_val(1);
                Tensor& ga = in_grad(0);
                if (b.is_scalar()) {
                    const double inv = 1.0 / b[0];
                    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * inv;
                    Tensor& gb = in_grad(1);
                    double s = 0.0;
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        s += -g[i] * a[i] * inv * inv;
                    gb[0] += s;
                } else {
                    Tensor& gb = in_grad(1);
                    for (std::size_t i = 0; i < g.numel(); ++i) {
                        const double inv = 1.0 / b[i];
                        ga[i] += g[i] * inv;
                        gb[i] += -g[i] * a[i] * inv * inv;
                    }
                }
                break;
            }
            case Op::Sigmoid: {
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    ga[i] += g[i] * n.val[i] * (1.0 - n.val[i]);
                break;
            }
            case Op::Tanh: {
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    ga[i] += g[i] * (1.0 - n.val[i] * n.val[i]);
                break;
            }
            case Op::Exp: {
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * n.val[i];
                break;
            }
            case Op::Log: {
                const Tensor& a = in_val(0);
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / a[i];
                break;
            }
            case Op::Sqrt: {
                // Subgradient 0 at exactly 0: the huge-but-finite factor is
                // annihilated downstream by the zero chain term.
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    const double denom = n.val[i] > 1e-150 ? n.val[i] : 1e-150;
                    ga[i] += g[i] / (2.0 * denom);
                }
                break;
            }
            case Op::Square: {
                const Tensor& a = in_val(0);
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * 2.0 * a[i];
                break;
            }
            case Op::Abs: {
                // sign(0) = 0 subgradient convention.
                const Tensor& a = in_val(0);
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    ga[i] += g[i] * (a[i] > 0.0 ? 1.0 : (a[i] < 0.0 ? -1.0 : 0.0));
                break;
            }
            case Op::Acos: {
                const Tensor& a = in_val(0);
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    double root = std::sqrt(1.0 - a[i] * a[i]);
                    if (root < 1e-150) root = 1e-150;
                    ga[i] += -g[i] / root;
                }
                break;
            }
            case Op::Neg: {
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] -= g[i];
                break;
            }
            case Op::Clamp: {
                const Tensor& a = in_val(0);
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    if (a[i] >= n.lo && a[i] <= n.hi) ga[i] += g[i];
                break;
            }
            case Op::Slice: {
                const Tensor& a = in_val(0);
                Tensor& ga = in_grad(0);
                const auto [r0, r1, c0, c1] = n.rect;
                const std::size_t w = c1 - c0, ac = a.dim(1);
                for (std::size_t r = r0; r < r1; ++r)
                    for (std::size_t c = 0; c < w; ++c)
                        ga.data()[r * ac + c0 + c] += g.data()[(r - r0) * w + c];
                break;
            }
            case Op::Concat: {
                std::size_t r = 0;
                const std::size_t c = n.val.dim(1);
                for (std::uint32_t part : n.multi) {
                    ensure_grad(part);
                    Tensor& gp = nodes_[part].grad;
                    const std::size_t pr = nodes_[part].val.dim(0);
                    for (std::size_t i = 0; i < pr * c; ++i) gp[i] += g.data()[r * c + i];
                    r += pr;
                }
                break;
            }
            case Op::ReduceSum: {
                Tensor& ga = in_grad(0);
                for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[0];
                break;
            }
            case Op::ReduceMean: {
                Tensor& ga = in_grad(0);
                const double s = g[0] / static_cast<double>(ga.numel());
                for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += s;
                break;
            }
        }
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
    bool backward_done_ = false;
    std::size_t backward_applications_ = 0;
};

// ---------------------------------------------------------------------------
// Gradient verification against central finite differences.

struct GradCheckEntry {
    std::size_t param_index = 0;
    std::size_t element_index = 0;
    double taped = 0.0;
    double finite_diff = 0.0;
    double rel_error = 0.0;
    bool excluded = false; // non-differentiable point (one-sided slopes differ)
};

struct GradCheckReport {
    double max_rel_error = 0.0; // over non-excluded elements
    std::vector<GradCheckEntry> worst; // one entry per parameter tensor
    std::vector<GradCheckEntry> excluded;
    bool passed = false;
};

// f builds a scalar Value on the given tape from leaves created from params.
// f must be deterministic and, away from excluded points, twice
// differentiable. Elements where forward and backward one-sided slopes
// disagree by more than 3% are reported as excluded instead of failing.
inline GradCheckReport grad_check(
    const std::function<Value(Tape&, const std::vector<Value>&)>& f,
    std::vector<Tensor> params, double step, double tolerance) {
    auto eval = [&](const std::vector<Tensor>& p) {
        Tape tape(false);
        std::vector<Value> leaves;
        leaves.reserve(p.size());
        for (const Tensor& t : p) leaves.push_back(tape.leaf(t));
        Value root = f(tape, leaves);
        if (!tape.value(root).is_scalar())
            throw ValidationError("grad_check: function did not produce a scalar");
        return tape.value(root)[0];
    };

    // Taped gradients at the base point.
    Tape tape(true);
    std::vector<Value> leaves;
    leaves.reserve(params.size());
    for (const Tensor& t : params) leaves.push_back(tape.leaf(t));
    tape.backward(f(tape, leaves));

    const double f0 = eval(params);

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor& gt = tape.grad(leaves[pi]);
        GradCheckEntry worst;
        worst.param_index = pi;
        for (std::size_t ei = 0; ei < params[pi].numel(); ++ei) {
            const double x0 = params[pi][ei];
            params[pi][ei] = x0 + step;
            const double fp = eval(params);
            params[pi][ei] = x0 - step;
            const double fm = eval(params);
            params[pi][ei] = x0;

            GradCheckEntry e;
            e.param_index = pi;
            e.element_index = ei;
            e.taped = gt[ei];
            e.finite_diff = (fp - fm) / (2.0 * step);

            const double dplus = (fp - f0) / step;
            const double dminus = (f0 - fm) / step;
            const double slope_scale = std::max({std::fabs(dplus), std::fabs(dminus), 1e-6});
            if (std::fabs(dplus - dminus) > 0.03 * slope_scale) {
                e.excluded = true;
                report.excluded.push_back(e);
                continue;
            }

            const double denom = std::max({std::fabs(e.taped), std::fabs(e.finite_diff), 1e-8});
            e.rel_error = std::fabs(e.taped - e.finite_diff) / denom;
            if (e.rel_error > worst.rel_error) worst = e;
            if (e.rel_error > report.max_rel_error) report.max_rel_error = e.rel_error;
        }
        report.worst.push_back(worst);
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

} // namespace relikin::ad
