#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mstgat/tensor.hpp"

namespace mstgat {

// Reverse-mode autodiff over a flat operation record. Nodes are appended in
// evaluation order, so walking the record backwards is already a topological
// order. A Tape is single-threaded by contract; independent Tapes may run in
// parallel. Every reduction below sums left-to-right so results are
// bit-identical across runs and batch compositions.

enum class Op : std::uint8_t {
    Constant,
    Parameter,
    Matmul,
    Bmm,
    Add,
    Sub,
    Mul,
    BiasAdd,
    Concat,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Abs,
    MaskedSoftmax,
    Conv1d,
    Slice,
    Reshape,
    Permute,
    ReduceSum,
    ReduceMean,
};

struct NodeId {
    std::uint32_t index = 0;
};

// Gradients of a scalar loss with respect to every named parameter on the
// tape. Parameters the loss never touched map to all-zero tensors.
struct Gradients {
    std::map<std::string, Tensor> by_name;

    const Tensor& at(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::out_of_range("gradients: unknown parameter " + name);
        return it->second;
    }
};

namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n]; k is the middle loop so each output element
// accumulates in ascending-k order and rows are independent of one another.
inline void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace detail

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    const Tensor& value(NodeId id) const { return node(id).value; }
    const Shape& shape(NodeId id) const { return node(id).value.shape(); }

    // ---- leaves ----

    NodeId constant(Tensor t) { return push(Op::Constant, {}, std::move(t), false); }

    NodeId parameter(std::string name, Tensor t) {
        if (name.empty()) throw std::invalid_argument("parameter: empty name");
        for (const auto& [pname, pid] : params_) {
            if (pname == name) throw std::invalid_argument("parameter: duplicate name " + name);
        }
        NodeId id = push(Op::Parameter, {}, std::move(t), true);
        nodes_[id.index].name = name;
        params_.emplace_back(std::move(name), id);
        return id;
    }

    const std::vector<std::pair<std::string, NodeId>>& parameters() const { return params_; }

    // ---- primitives ----

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
            throw std::invalid_argument("matmul: incompatible shapes " + shape_str(ta.shape()) +
                                        " x " + shape_str(tb.shape()));
        }
        Tensor out({ta.dim(0), tb.dim(1)});
        detail::matmul_nn(ta.data(), tb.data(), out.data(), ta.dim(0), ta.dim(1), tb.dim(1));
        return push(Op::Matmul, {a, b}, std::move(out));
    }

    // Batched matmul: [R,m,k] x [R,k,n] -> [R,m,n].
    NodeId bmm(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1)) {
            throw std::invalid_argument("bmm: incompatible shapes " + shape_str(ta.shape()) +
                                        " x " + shape_str(tb.shape()));
        }
        const std::size_t r = ta.dim(0), m = ta.dim(1), k = ta.dim(2), n = tb.dim(2);
        Tensor out({r, m, n});
        for (std::size_t i = 0; i < r; ++i) {
            detail::matmul_nn(ta.data() + i * m * k, tb.data() + i * k * n, out.data() + i * m * n,
                              m, k, n);
        }
        return push(Op::Bmm, {a, b}, std::move(out));
    }

    NodeId add(NodeId a, NodeId b) { return binary_same_shape(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary_same_shape(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary_same_shape(Op::Mul, a, b); }

    // x [..., d] + b [d]; the bias broadcasts over all leading dimensions.
    NodeId bias_add(NodeId x, NodeId b) {
        const Tensor& tx = value(x);
        const Tensor& tb = value(b);
        if (tb.rank() != 1 || tx.shape().back() != tb.dim(0)) {
            throw std::invalid_argument("bias_add: trailing dim of " + shape_str(tx.shape()) +
                                        " must match bias " + shape_str(tb.shape()));
        }
        const std::size_t d = tb.dim(0);
        Tensor out = tx;
        double* o = out.data();
        for (std::size_t i = 0; i < out.numel(); i += d)
            for (std::size_t j = 0; j < d; ++j) o[i + j] += tb[j];
        return push(Op::BiasAdd, {x, b}, std::move(out));
    }

    NodeId concat(const std::vector<NodeId>& parts, std::size_t axis) {
        if (parts.empty()) throw std::invalid_argument("concat: no inputs");
        const Shape& first = shape(parts[0]);
        if (axis >= first.size()) throw std::invalid_argument("concat: axis out of range");
        Shape out_shape = first;
        std::size_t axis_total = 0;
        for (NodeId p : parts) {
            const Shape& s = shape(p);
            if (s.size() != first.size())
                throw std::invalid_argument("concat: rank mismatch " + shape_str(first) + " vs " +
                                            shape_str(s));
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (i != axis && s[i] != first[i])
                    throw std::invalid_argument("concat: shape mismatch " + shape_str(first) +
                                                " vs " + shape_str(s));
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;

        // outer = product of dims before axis, inner = product after.
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
        for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

        Tensor out(out_shape);
        std::size_t offset = 0;
        for (NodeId p : parts) {
            const Tensor& tp = value(p);
            const std::size_t block = tp.shape()[axis] * inner;
            for (std::size_t g = 0; g < outer; ++g) {
                std::copy_n(tp.data() + g * block, block,
                            out.data() + g * axis_total * inner + offset);
            }
            offset += block;
        }
        NodeId id = push(Op::Concat, parts, std::move(out));
        nodes_[id.index].meta = {axis};
        return id;
    }

    NodeId relu(NodeId x) {
        Tensor out = value(x);
        for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
        return push(Op::Relu, {x}, std::move(out));
    }

    NodeId leaky_relu(NodeId x, double slope) {
        Tensor out = value(x);
        for (double& v : out.values()) v = v > 0.0 ? v : slope * v;
        NodeId id = push(Op::LeakyRelu, {x}, std::move(out));
        nodes_[id.index].slope = slope;
        return id;
    }

    NodeId sigmoid(NodeId x) {
        Tensor out = value(x);
        for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
        return push(Op::Sigmoid, {x}, std::move(out));
    }

    NodeId tanh(NodeId x) {
        Tensor out = value(x);
        for (double& v : out.values()) v = std::tanh(v);
        return push(Op::Tanh, {x}, std::move(out));
    }

    NodeId abs(NodeId x) {
        Tensor out = value(x);
        for (double& v : out.values()) v = std::fabs(v);
        return push(Op::Abs, {x}, std::move(out));
    }

    // Row-wise softmax over the last axis, restricted to positions where the
    // mask is nonzero. Masked positions come out exactly 0; each row is
    // stabilized by subtracting its unmasked maximum. The mask is saved
    // context, not a differentiable input.
    NodeId masked_softmax(NodeId scores, Tensor mask) {
        const Tensor& ts = value(scores);
        if (ts.shape() != mask.shape()) {
            throw std::invalid_argument("masked_softmax: scores " + shape_str(ts.shape()) +
                                        " vs mask " + shape_str(mask.shape()));
        }
        const std::size_t row = ts.shape().back();
        const std::size_t rows = ts.numel() / row;
        Tensor out(ts.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* s = ts.data() + r * row;
            const double* m = mask.data() + r * row;
            double* o = out.data() + r * row;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < row; ++j)
                if (m[j] != 0.0 && s[j] > mx) mx = s[j];
            if (mx == -std::numeric_limits<double>::infinity()) {
                throw std::invalid_argument("masked_softmax: row " + std::to_string(r) +
                                            " has no unmasked entries");
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < row; ++j) {
                o[j] = m[j] != 0.0 ? std::exp(s[j] - mx) : 0.0;
                denom += o[j];
            }
            for (std::size_t j = 0; j < row; ++j)
                if (m[j] != 0.0) o[j] /= denom;
        }
        NodeId id = push(Op::MaskedSoftmax, {scores}, std::move(out));
        nodes_[id.index].saved = std::move(mask);
        return id;
    }

    // Valid 1-D convolution along the middle (temporal) axis.
    // input [R, L, Cin], kernel [W, Cin, Cout] -> [R, L-W+1, Cout].
    NodeId conv1d(NodeId input, NodeId kernel) {
        const Tensor& ti = value(input);
        const Tensor& tk = value(kernel);
        if (ti.rank() != 3 || tk.rank() != 3 || ti.dim(2) != tk.dim(1)) {
            throw std::invalid_argument("conv1d: incompatible shapes " + shape_str(ti.shape()) +
                                        " and kernel " + shape_str(tk.shape()));
        }
        const std::size_t rows = ti.dim(0), len = ti.dim(1), cin = ti.dim(2);
        const std::size_t w = tk.dim(0), cout = tk.dim(2);
        if (w > len) {
            throw std::invalid_argument("conv1d: kernel width " + std::to_string(w) +
                                        " exceeds input length " + std::to_string(len));
        }
        const std::size_t lout = len - w + 1;
        Tensor out({rows, lout, cout});
        for (std::size_t r = 0; r < rows; ++r) {
            const double* in_r = ti.data() + r * len * cin;
            double* out_r = out.data() + r * lout * cout;
            for (std::size_t t = 0; t < lout; ++t) {
                double* o = out_r + t * cout;
                for (std::size_t p = 0; p < w; ++p) {
                    const double* x = in_r + (t + p) * cin;
                    const double* k = tk.data() + p * cin * cout;
                    for (std::size_t c = 0; c < cin; ++c) {
                        const double xv = x[c];
                        const double* kc = k + c * cout;
                        for (std::size_t oc = 0; oc < cout; ++oc) o[oc] += xv * kc[oc];
                    }
                }
            }
        }
        return push(Op::Conv1d, {input, kernel}, std::move(out));
    }

    NodeId slice(NodeId x, std::size_t axis, std::size_t start, std::size_t len) {
        const Tensor& tx = value(x);
        if (axis >= tx.rank() || len == 0 || start + len > tx.dim(axis)) {
            throw std::invalid_argument("slice: [" + std::to_string(start) + "," +
                                        std::to_string(start + len) + ") on axis " +
                                        std::to_string(axis) + " of " + shape_str(tx.shape()));
        }
        Shape out_shape = tx.shape();
        out_shape[axis] = len;
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= tx.dim(i);
        for (std::size_t i = axis + 1; i < tx.rank(); ++i) inner *= tx.dim(i);
        Tensor out(out_shape);
        for (std::size_t g = 0; g < outer; ++g) {
            std::copy_n(tx.data() + (g * tx.dim(axis) + start) * inner, len * inner,
                        out.data() + g * len * inner);
        }
        NodeId id = push(Op::Slice, {x}, std::move(out));
        nodes_[id.index].meta = {axis, start, len};
        return id;
    }

    NodeId reshape(NodeId x, Shape s) {
        Tensor out = value(x).reshaped(std::move(s));
        return push(Op::Reshape, {x}, std::move(out));
    }

    NodeId permute(NodeId x, const std::vector<std::size_t>& perm) {
        const Tensor& tx = value(x);
        if (perm.size() != tx.rank()) throw std::invalid_argument("permute: rank mismatch");
        std::vector<bool> seen(perm.size(), false);
        Shape out_shape(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            if (perm[i] >= perm.size() || seen[perm[i]])
                throw std::invalid_argument("permute: invalid permutation");
            seen[perm[i]] = true;
            out_shape[i] = tx.dim(perm[i]);
        }
        Tensor out(out_shape);
        permute_copy(tx, out, perm);
        NodeId id = push(Op::Permute, {x}, std::move(out));
        nodes_[id.index].meta = perm;
        return id;
    }

    NodeId reduce_sum(NodeId x) {
        double acc = 0.0;
        for (double v : value(x).values()) acc += v;
        return push(Op::ReduceSum, {x}, Tensor::scalar(acc));
    }

    NodeId reduce_mean(NodeId x) {
        double acc = 0.0;
        for (double v : value(x).values()) acc += v;
        return push(Op::ReduceMean, {x}, Tensor::scalar(acc / static_cast<double>(value(x).numel())));
    }

    // ---- backward ----

    Gradients backward(NodeId loss) const {
        const Tensor& lv = value(loss);
        if (lv.numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(lv.shape()));
        }
        std::vector<Tensor> grads(nodes_.size());
        grads[loss.index] = Tensor(lv.shape(), 1.0);

        for (std::size_t i = loss.index + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (!n.needs_grad || grads[i].numel() == 0) continue;
            propagate(n, grads[i], grads);
        }

        Gradients out;
        for (const auto& [name, id] : params_) {
            if (grads[id.index].numel() != 0) {
                out.by_name.emplace(name, std::move(grads[id.index]));
            } else {
                out.by_name.emplace(name, Tensor(value(id).shape(), 0.0));
            }
        }
        return out;
    }

private:
    struct Node {
        Op op;
        std::vector<NodeId> inputs;
        Tensor value;
        bool needs_grad = false;
        Tensor saved;                   // masked_softmax mask
        std::vector<std::size_t> meta;  // axis/start/len or permutation
        double slope = 0.0;             // leaky_relu
        std::string name;               // parameter
    };

    const Node& node(NodeId id) const {
        if (id.index >= nodes_.size()) throw std::out_of_range("tape: bad node id");
        return nodes_[id.index];
    }

    NodeId push(Op op, std::vector<NodeId> inputs, Tensor value) {
        bool needs = false;
        for (NodeId in : inputs) needs = needs || node(in).needs_grad;
        return push(op, std::move(inputs), std::move(value), needs);
    }

    NodeId push(Op op, std::vector<NodeId> inputs, Tensor value, bool needs_grad) {
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    NodeId binary_same_shape(Op op, NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (!ta.same_shape(tb)) {
            throw std::invalid_argument(op_name(op) + ": shape mismatch " +
                                        shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
        }
        Tensor out(ta.shape());
        const double* pa = ta.data();
        const double* pb = tb.data();
        double* po = out.data();
        switch (op) {
            case Op::Add:
                for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
                break;
            case Op::Sub:
                for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
                break;
            case Op::Mul:
                for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
                break;
            default:
                throw std::logic_error("binary_same_shape: bad op");
        }
        return push(op, {a, b}, std::move(out));
    }

    static std::string op_name(Op op) {
        switch (op) {
            case Op::Add: return "add";
            case Op::Sub: return "sub";
            case Op::Mul: return "mul";
            default: return "op";
        }
    }

    static void permute_copy(const Tensor& in, Tensor& out, const std::vector<std::size_t>& perm) {
        const auto in_strides = row_major_strides(in.shape());
        const std::size_t rank = perm.size();
        std::vector<std::size_t> idx(rank, 0);
        const double* src = in.data();
        double* dst = out.data();
        for (std::size_t flat = 0; flat < out.numel(); ++flat) {
            std::size_t off = 0;
            for (std::size_t d = 0; d < rank; ++d) off += idx[d] * in_strides[perm[d]];
            dst[flat] = src[off];
            for (std::size_t d = rank; d-- > 0;) {
                if (++idx[d] < out.dim(d)) break;
                idx[d] = 0;
            }
        }
    }

    Tensor& grad_of(NodeId id, std::vector<Tensor>& grads) const {
        Tensor& g = grads[id.index];
        if (g.numel() == 0) g = Tensor(value(id).shape(), 0.0);
        return g;
    }

    void propagate(const Node& n, const Tensor& g, std::vector<Tensor>& grads) const {
        switch (n.op) {
            case Op::Constant:
            case Op::Parameter:
                return;
            case Op::Matmul: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
                if (node(n.inputs[0]).needs_grad) {
                    detail::matmul_nt(g.data(), b.data(), grad_of(n.inputs[0], grads).data(), m,
                                      nn, k);
                }
                if (node(n.inputs[1]).needs_grad) {
                    detail::matmul_tn(a.data(), g.data(), grad_of(n.inputs[1], grads).data(), k,
                                      m, nn);
                }
                return;
            }
            case Op::Bmm: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                const std::size_t r = a.dim(0), m = a.dim(1), k = a.dim(2), nn = b.dim(2);
                if (node(n.inputs[0]).needs_grad) {
                    Tensor& da = grad_of(n.inputs[0], grads);
                    for (std::size_t i = 0; i < r; ++i)
                        detail::matmul_nt(g.data() + i * m * nn, b.data() + i * k * nn,
                                          da.data() + i * m * k, m, nn, k);
                }
                if (node(n.inputs[1]).needs_grad) {
                    Tensor& db = grad_of(n.inputs[1], grads);
                    for (std::size_t i = 0; i < r; ++i)
                        detail::matmul_tn(a.data() + i * m * k, g.data() + i * m * nn,
                                          db.data() + i * k * nn, k, m, nn);
                }
                return;
            }
            case Op::Add:
            case Op::Sub: {
                if (node(n.inputs[0]).needs_grad) {
                    Tensor& da = grad_of(n.inputs[0], grads);
                    for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i];
                }
                if (node(n.inputs[1]).needs_grad) {
                    Tensor& db = grad_of(n.inputs[1], grads);
                    const double sign = n.op == Op::Add ? 1.0 : -1.0;
                    for (std::size_t i = 0; i < g.numel(); ++i) db[i] += sign * g[i];
                }
                return;
            }
            case Op::Mul: {
                const Tensor& a = value(n.inputs[0]);
                const Tensor& b = value(n.inputs[1]);
                if (node(n.inputs[0]).needs_grad) {
                    Tensor& da = grad_of(n.inputs[0], grads);
                    for (std::size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * b[i];
                }
                if (node(n.inputs[1]).needs_grad) {
                    Tensor& db = grad_of(n.inputs[1], grads);
                    for (std::size_t i = 0; i < g.numel(); ++i) db[i] += g[i] * a[i];
                }
                return;
            }
            case Op::BiasAdd: {
                const std::size_t d = value(n.inputs[1]).dim(0);
                if (node(n.inputs[0]).needs_grad) {
                    Tensor& dx = grad_of(n.inputs[0], grads);
                    for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
                }
                if (node(n.inputs[1]).needs_grad) {
                    Tensor& db = grad_of(n.inputs[1], grads);
                    for (std::size_t i = 0; i < g.numel(); i += d)
                        for (std::size_t j = 0; j < d; ++j) db[j] += g[i + j];
                }
                return;
            }
            case Op::Concat: {
                const std::size_t axis = n.meta[0];
                const Shape& out_shape = n.value.shape();
                std::size_t outer = 1, inner = 1;
                for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
                for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
                const std::size_t total = out_shape[axis] * inner;
                std::size_t offset = 0;
                for (NodeId p : n.inputs) {
                    const std::size_t block = value(p).shape()[axis] * inner;
                    if (node(p).needs_grad) {
                        Tensor& dp = grad_of(p, grads);
                        for (std::size_t gi = 0; gi < outer; ++gi) {
                            const double* src = g.data() + gi * total + offset;
                            double* dst = dp.data() + gi * block;
                            for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
                        }
                    }
                    offset += block;
                }
                return;
            }
            case Op::Relu: {
                if (!node(n.inputs[0]).needs_grad) return;
                const Tensor& x = value(n.inputs[0]);
                Tensor& dx = grad_of(n.inputs[0], grads);
                // subgradient at 0 is defined as 0
                for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += x[i] > 0.0 ? g[i] : 0.0;
                return;
            }
            case Op::LeakyRelu: {
                if (!node(n.inputs[0]).needs_grad) return;
                const Tensor& x = value(n.inputs[0]);
                Tensor& dx = grad_of(n.inputs[0], grads);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    dx[i] += x[i] > 0.0 ? g[i] : n.slope * g[i];
                return;
            }
            case Op::Sigmoid: {
                if (!node(n.inputs[0]).needs_grad) return;
                Tensor& dx = grad_of(n.inputs[0], grads);
                const Tensor& y = n.value;
                for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
                return;
            }
            case Op::Tanh: {
                if (!node(n.inputs[0]).needs_grad) return;
                Tensor& dx = grad_of(n.inputs[0], grads);
                const Tensor& y = n.value;
                for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
                return;
            }
            case Op::Abs: {
                if (!node(n.inputs[0]).needs_grad) return;
                const Tensor& x = value(n.inputs[0]);
                Tensor& dx = grad_of(n.inputs[0], grads);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    dx[i] += x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0);
                return;
            }
            case Op::MaskedSoftmax: {
                if (!node(n.inputs[0]).needs_grad) return;
                Tensor& dx = grad_of(n.inputs[0], grads);
                const Tensor& y = n.value;
                const Tensor& mask = n.saved;
                const std::size_t row = y.shape().back();
                const std::size_t rows = y.numel() / row;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* yr = y.data() + r * row;
                    const double* gr = g.data() + r * row;
                    const double* mr = mask.data() + r * row;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < row; ++j)
                        if (mr[j] != 0.0) dot += gr[j] * yr[j];
                    double* dr = dx.data() + r * row;
                    for (std::size_t j = 0; j < row; ++j)
                        if (mr[j] != 0.0) dr[j] += yr[j] * (gr[j] - dot);
                }
                return;
            }
            case Op::Conv1d: {
                const Tensor& in = value(n.inputs[0]);
                const Tensor& k = value(n.inputs[1]);
                const std::size_t rows = in.dim(0), len = in.dim(1), cin = in.dim(2);
                const std::size_t w = k.dim(0), cout = k.dim(2);
                const std::size_t lout = len - w + 1;
                const bool want_in = node(n.inputs[0]).needs_grad;
                const bool want_k = node(n.inputs[1]).needs_grad;
                Tensor* din = want_in ? &grad_of(n.inputs[0], grads) : nullptr;
                Tensor* dk = want_k ? &grad_of(n.inputs[1], grads) : nullptr;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* in_r = in.data() + r * len * cin;
                    const double* g_r = g.data() + r * lout * cout;
                    for (std::size_t t = 0; t < lout; ++t) {
                        const double* go = g_r + t * cout;
                        for (std::size_t p = 0; p < w; ++p) {
                            for (std::size_t c = 0; c < cin; ++c) {
                                const double* kc = k.data() + (p * cin + c) * cout;
                                if (want_in) {
                                    double acc = 0.0;
                                    for (std::size_t oc = 0; oc < cout; ++oc)
                                        acc += go[oc] * kc[oc];
                                    (*din)[r * len * cin + (t + p) * cin + c] += acc;
                                }
                                if (want_k) {
                                    const double xv = in_r[(t + p) * cin + c];
                                    double* dkc = dk->data() + (p * cin + c) * cout;
                                    for (std::size_t oc = 0; oc < cout; ++oc)
                                        dkc[oc] += xv * go[oc];
                                }
                            }
                        }
                    }
                }
                return;
            }
            case Op::Slice: {
                if (!node(n.inputs[0]).needs_grad) return;
                const Tensor& x = value(n.inputs[0]);
                const std::size_t axis = n.meta[0], start = n.meta[1], len = n.meta[2];
                std::size_t outer = 1, inner = 1;
                for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
                for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
                Tensor& dx = grad_of(n.inputs[0], grads);
                for (std::size_t gi = 0; gi < outer; ++gi) {
                    const double* src = g.data() + gi * len * inner;
                    double* dst = dx.data() + (gi * x.dim(axis) + start) * inner;
                    for (std::size_t j = 0; j < len * inner; ++j) dst[j] += src[j];
                }
                return;
            }
            case Op::Reshape: {
                if (!node(n.inputs[0]).needs_grad) return;
                Tensor& dx = grad_of(n.inputs[0], grads);
                for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
                return;
            }
            case Op::Permute: {
                if (!node(n.inputs[0]).needs_grad) return;
                const std::vector<std::size_t>& perm = n.meta;
                Tensor& dx = grad_of(n.inputs[0], grads);
                const auto in_strides = row_major_strides(dx.shape());
                std::vector<std::size_t> idx(perm.size(), 0);
                for (std::size_t flat = 0; flat < g.numel(); ++flat) {
                    std::size_t off = 0;
                    for (std::size_t d = 0; d < perm.size(); ++d)
                        off += idx[d] * in_strides[perm[d]];
                    dx[off] += g[flat];
                    for (std::size_t d = perm.size(); d-- > 0;) {
                        if (++idx[d] < n.value.dim(d)) break;
                        idx[d] = 0;
                    }
                }
                return;
            }
            case Op::ReduceSum: {
                if (!node(n.inputs[0]).needs_grad) return;
                Tensor& dx = grad_of(n.inputs[0], grads);
                for (double& v : dx.values()) v += g[0];
                return;
            }
            case Op::ReduceMean: {
                if (!node(n.inputs[0]).needs_grad) return;
                Tensor& dx = grad_of(n.inputs[0], grads);
                const double scale = g[0] / static_cast<double>(dx.numel());
                for (double& v : dx.values()) v += scale;
                return;
            }
        }
    }

    // deque keeps value() references stable while new nodes are appended
    std::deque<Node> nodes_;
    std::vector<std::pair<std::string, NodeId>> params_;
};

// Compares the analytic gradient of a scalar-valued tape program against
// central differences at `point`. `build` must be pure: called repeatedly with
// fresh tapes and perturbed copies of the point. Returns
// max_i |analytic_i - fd_i| / max(1, |analytic_i|).
template <typename BuildFn>
double grad_check(BuildFn&& build, const Tensor& point, double eps = 1e-5) {
    const auto eval = [&](const Tensor& x) {
        Tape tape;
        NodeId id = tape.parameter("x", x);
        NodeId loss = build(tape, id);
        const Tensor& v = tape.value(loss);
        if (v.numel() != 1) throw std::invalid_argument("grad_check: function is not scalar");
        if (!std::isfinite(v[0])) throw std::domain_error("grad_check: non-finite evaluation");
        return v[0];
    };

    Tape tape;
    NodeId id = tape.parameter("x", point);
    NodeId loss = build(tape, id);
    if (tape.value(loss).numel() != 1)
        throw std::invalid_argument("grad_check: function is not scalar");
    if (!std::isfinite(tape.value(loss)[0]))
        throw std::domain_error("grad_check: non-finite evaluation");
    Tensor analytic = tape.backward(loss).at("x");
    if (!analytic.all_finite()) throw std::domain_error("grad_check: non-finite gradient");

    double worst = 0.0;
    for (std::size_t i = 0; i < point.numel(); ++i) {
        Tensor lo = point, hi = point;
        lo[i] -= eps;
        hi[i] += eps;
        const double fd = (eval(hi) - eval(lo)) / (2.0 * eps);
        const double err = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace mstgat
