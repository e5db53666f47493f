#include "ilql/graph.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace ilql {

const char* op_name(Op op) {
    switch (op) {
        case Op::input: return "input";
        case Op::constant: return "constant";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::mul: return "mul";
        case Op::softmax: return "softmax";
        case Op::layernorm: return "layernorm";
        case Op::gelu: return "gelu";
        case Op::relu: return "relu";
        case Op::embed: return "embed";
        case Op::logsumexp: return "logsumexp";
        case Op::cross_entropy: return "cross_entropy";
        case Op::expectile: return "expectile";
        case Op::huber: return "huber";
        case Op::gather_rows: return "gather_rows";
        case Op::gather_pairs: return "gather_pairs";
        case Op::slice_cols: return "slice_cols";
        case Op::concat_rows: return "concat_rows";
        case Op::concat_cols: return "concat_cols";
        case Op::reshape: return "reshape";
        case Op::reduce_sum: return "reduce_sum";
        case Op::reduce_mean: return "reduce_mean";
        case Op::stop_grad: return "stop_grad";
    }
    return "?";
}

namespace {

// Row-wise view: rank-1 tensors are a single row.
inline void row_view(const Shape& s, int64_t& rows, int64_t& cols) {
    if (s.size() == 1) {
        rows = 1;
        cols = s[0];
    } else {
        rows = s[0];
        cols = s[1];
    }
}

enum class Bcast { same, row, scalar };

}  // namespace

template <typename T>
std::string Graph<T>::describe(const Node& n) const {
    std::ostringstream os;
    os << op_name(n.op);
    if (!n.label.empty()) os << " '" << n.label << "'";
    return os.str();
}

template <typename T>
void Graph<T>::shape_fail(const Node& n, const std::string& msg) const {
    fail(ErrorKind::shape, "node#" + std::to_string(nodes_.size()) + " (" + describe(n) +
                               "): " + msg);
}

template <typename T>
NodeId Graph<T>::push(Node n) {
    require(n.shape.size() >= 1 && n.shape.size() <= 2, ErrorKind::shape,
            std::string(op_name(n.op)) + ": rank must be 1 or 2, got shape " +
                shape_str(n.shape));
    if (n.op != Op::input && n.op != Op::constant && n.op != Op::stop_grad) {
        for (NodeId a : n.args)
            if (nodes_[static_cast<size_t>(a)].requires_grad) n.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

template <typename T>
NodeId Graph<T>::check_arg(NodeId id, const char* ctx) const {
    require(id >= 0 && static_cast<size_t>(id) < nodes_.size(), ErrorKind::shape,
            std::string(ctx) + ": argument node id out of range");
    return id;
}

template <typename T>
NodeId Graph<T>::input(const std::string& name, Shape shape, bool requires_grad) {
    require(!name.empty(), ErrorKind::domain, "input needs a binding name");
    for (const Node& other : nodes_)
        require(other.op != Op::input || other.label != name, ErrorKind::state,
                "duplicate input name '" + name + "'");
    Node n;
    n.op = Op::input;
    n.shape = std::move(shape);
    n.label = name;
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::constant(Tensor<T> value, const std::string& label) {
    Node n;
    n.op = Op::constant;
    n.shape = value.shape;
    n.label = label;
    n.value = std::move(value);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b,
                        const std::string& label) {
    check_arg(a, "matmul");
    check_arg(b, "matmul");
    const Shape& sa = shape_of(a);
    const Shape& sb = shape_of(b);
    Node n;
    n.op = Op::matmul;
    n.args = {a, b};
    n.label = label;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    if (sa.size() != 2 || sb.size() != 2)
        shape_fail(n, "needs rank-2 operands, got " + shape_str(sa) + " x " + shape_str(sb));
    int64_t m = trans_a ? sa[1] : sa[0];
    int64_t ka = trans_a ? sa[0] : sa[1];
    int64_t kb = trans_b ? sb[1] : sb[0];
    int64_t cols = trans_b ? sb[0] : sb[1];
    if (ka != kb)
        shape_fail(n, "inner dimensions disagree: " + shape_str(sa) +
                          (trans_a ? "^T" : "") + " x " + shape_str(sb) +
                          (trans_b ? "^T" : ""));
    n.shape = {m, cols};
    return push(std::move(n));
}

namespace {

template <typename T>
Bcast bcast_kind(const Shape& a, const Shape& b, const char* ctx) {
    if (shape_eq(a, b)) return Bcast::same;
    if (b.size() == 1 && b[0] == 1) return Bcast::scalar;
    if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return Bcast::row;
    fail(ErrorKind::shape, std::string(ctx) + ": cannot broadcast " + shape_str(b) +
                               " onto " + shape_str(a));
}

}  // namespace

template <typename T>
NodeId Graph<T>::add(NodeId a, NodeId b) {
    check_arg(a, "add");
    check_arg(b, "add");
    bcast_kind<T>(shape_of(a), shape_of(b), "add");
    Node n;
    n.op = Op::add;
    n.args = {a, b};
    n.shape = shape_of(a);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::mul(NodeId a, NodeId b) {
    check_arg(a, "mul");
    check_arg(b, "mul");
    bcast_kind<T>(shape_of(a), shape_of(b), "mul");
    Node n;
    n.op = Op::mul;
    n.args = {a, b};
    n.shape = shape_of(a);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::softmax(NodeId a) {
    check_arg(a, "softmax");
    Node n;
    n.op = Op::softmax;
    n.args = {a};
    n.shape = shape_of(a);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::layernorm(NodeId a, double eps) {
    check_arg(a, "layernorm");
    require(eps > 0, ErrorKind::domain, "layernorm: eps must be positive");
    Node n;
    n.op = Op::layernorm;
    n.args = {a};
    n.shape = shape_of(a);
    n.scalar = eps;
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::gelu(NodeId a) {
    check_arg(a, "gelu");
    Node n;
    n.op = Op::gelu;
    n.args = {a};
    n.shape = shape_of(a);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::relu(NodeId a) {
    check_arg(a, "relu");
    Node n;
    n.op = Op::relu;
    n.args = {a};
    n.shape = shape_of(a);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::embed(NodeId table, std::vector<int64_t> ids, const std::string& label) {
    check_arg(table, "embed");
    const Shape& st = shape_of(table);
    Node n;
    n.op = Op::embed;
    n.args = {table};
    n.label = label;
    if (st.size() != 2) shape_fail(n, "table must be rank 2, got " + shape_str(st));
    for (int64_t id : ids)
        if (id < 0 || id >= st[0])
            shape_fail(n, "id " + std::to_string(id) + " outside table rows [0," +
                              std::to_string(st[0]) + ")");
    n.shape = {static_cast<int64_t>(ids.size()), st[1]};
    n.idx_a = std::move(ids);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::logsumexp(NodeId a) {
    check_arg(a, "logsumexp");
    int64_t rows, cols;
    row_view(shape_of(a), rows, cols);
    (void)cols;
    Node n;
    n.op = Op::logsumexp;
    n.args = {a};
    n.shape = {rows};
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::cross_entropy(NodeId logits, std::vector<int64_t> targets) {
    check_arg(logits, "cross_entropy");
    int64_t rows, cols;
    row_view(shape_of(logits), rows, cols);
    Node n;
    n.op = Op::cross_entropy;
    n.args = {logits};
    if (static_cast<int64_t>(targets.size()) != rows)
        shape_fail(n, std::to_string(targets.size()) + " targets for " +
                          std::to_string(rows) + " logit rows");
    for (int64_t t : targets)
        if (t < 0 || t >= cols)
            shape_fail(n, "target " + std::to_string(t) + " outside [0," +
                              std::to_string(cols) + ")");
    n.shape = {rows};
    n.idx_a = std::move(targets);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::expectile(NodeId u, double tau) {
    check_arg(u, "expectile");
    require(tau > 0.0 && tau < 1.0, ErrorKind::domain,
            "expectile: tau must lie in (0,1), got " + std::to_string(tau));
    Node n;
    n.op = Op::expectile;
    n.args = {u};
    n.shape = shape_of(u);
    n.scalar = tau;
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::huber(NodeId u, double delta) {
    check_arg(u, "huber");
    require(delta > 0.0, ErrorKind::domain, "huber: delta must be positive");
    Node n;
    n.op = Op::huber;
    n.args = {u};
    n.shape = shape_of(u);
    n.scalar = delta;
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::gather_rows(NodeId a, std::vector<int64_t> rows) {
    check_arg(a, "gather_rows");
    const Shape& sa = shape_of(a);
    Node n;
    n.op = Op::gather_rows;
    n.args = {a};
    int64_t limit = sa[0];
    for (int64_t r : rows)
        if (r < 0 || r >= limit)
            shape_fail(n, "row " + std::to_string(r) + " outside [0," +
                              std::to_string(limit) + ")");
    if (sa.size() == 1)
        n.shape = {static_cast<int64_t>(rows.size())};
    else
        n.shape = {static_cast<int64_t>(rows.size()), sa[1]};
    n.idx_a = std::move(rows);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::gather_pairs(NodeId a, std::vector<int64_t> rows,
                              std::vector<int64_t> cols) {
    check_arg(a, "gather_pairs");
    const Shape& sa = shape_of(a);
    Node n;
    n.op = Op::gather_pairs;
    n.args = {a};
    if (sa.size() != 2) shape_fail(n, "needs a rank-2 input, got " + shape_str(sa));
    if (rows.size() != cols.size())
        shape_fail(n, "row/col index lists differ in length");
    for (size_t i = 0; i < rows.size(); ++i)
        if (rows[i] < 0 || rows[i] >= sa[0] || cols[i] < 0 || cols[i] >= sa[1])
            shape_fail(n, "index (" + std::to_string(rows[i]) + "," +
                              std::to_string(cols[i]) + ") outside " + shape_str(sa));
    n.shape = {static_cast<int64_t>(rows.size())};
    n.idx_a = std::move(rows);
    n.idx_b = std::move(cols);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::slice_cols(NodeId a, int64_t start, int64_t len) {
    check_arg(a, "slice_cols");
    const Shape& sa = shape_of(a);
    Node n;
    n.op = Op::slice_cols;
    n.args = {a};
    if (sa.size() != 2) shape_fail(n, "needs a rank-2 input, got " + shape_str(sa));
    if (start < 0 || len <= 0 || start + len > sa[1])
        shape_fail(n, "column window [" + std::to_string(start) + "," +
                          std::to_string(start + len) + ") outside " + shape_str(sa));
    n.shape = {sa[0], len};
    n.idx_a = {start, len};
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::concat_rows(const std::vector<NodeId>& parts) {
    require(!parts.empty(), ErrorKind::shape, "concat_rows: no parts");
    Node n;
    n.op = Op::concat_rows;
    n.args = parts;
    const Shape& first = shape_of(check_arg(parts[0], "concat_rows"));
    int64_t rows = 0;
    for (NodeId p : parts) {
        const Shape& sp = shape_of(check_arg(p, "concat_rows"));
        if (sp.size() != first.size() || (sp.size() == 2 && sp[1] != first[1]))
            shape_fail(n, "part shape " + shape_str(sp) + " incompatible with " +
                              shape_str(first));
        rows += sp[0];
    }
    if (first.size() == 1)
        n.shape = {rows};
    else
        n.shape = {rows, first[1]};
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::concat_cols(const std::vector<NodeId>& parts) {
    require(!parts.empty(), ErrorKind::shape, "concat_cols: no parts");
    Node n;
    n.op = Op::concat_cols;
    n.args = parts;
    const Shape& first = shape_of(check_arg(parts[0], "concat_cols"));
    int64_t cols = 0;
    for (NodeId p : parts) {
        const Shape& sp = shape_of(check_arg(p, "concat_cols"));
        if (sp.size() != 2 || first.size() != 2 || sp[0] != first[0])
            shape_fail(n, "part shape " + shape_str(sp) + " incompatible with " +
                              shape_str(first));
        cols += sp[1];
    }
    n.shape = {first[0], cols};
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::reshape(NodeId a, Shape shape) {
    check_arg(a, "reshape");
    Node n;
    n.op = Op::reshape;
    n.args = {a};
    if (shape_numel(shape) != shape_numel(shape_of(a)))
        shape_fail(n, "cannot reshape " + shape_str(shape_of(a)) + " to " +
                          shape_str(shape));
    n.shape = std::move(shape);
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::reduce_sum(NodeId a) {
    check_arg(a, "reduce_sum");
    Node n;
    n.op = Op::reduce_sum;
    n.args = {a};
    n.shape = {1};
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::reduce_mean(NodeId a) {
    check_arg(a, "reduce_mean");
    require(shape_numel(shape_of(a)) > 0, ErrorKind::shape, "reduce_mean: empty input");
    Node n;
    n.op = Op::reduce_mean;
    n.args = {a};
    n.shape = {1};
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::stop_grad(NodeId a) {
    check_arg(a, "stop_grad");
    Node n;
    n.op = Op::stop_grad;
    n.args = {a};
    n.shape = shape_of(a);
    n.requires_grad = false;
    return push(std::move(n));
}

template <typename T>
NodeId Graph<T>::scaled(NodeId a, double s) {
    return mul(a, constant(Tensor<T>::scalar(static_cast<T>(s))));
}

template <typename T>
NodeId Graph<T>::sub(NodeId a, NodeId b) {
    return add(a, scaled(b, -1.0));
}

template <typename T>
NodeId Graph<T>::square(NodeId a) {
    return mul(a, a);
}

template <typename T>
std::vector<char> Graph<T>::needed_for(NodeId root) const {
    std::vector<char> needed(nodes_.size(), 0);
    std::vector<NodeId> stack{root};
    while (!stack.empty()) {
        NodeId id = stack.back();
        stack.pop_back();
        if (needed[static_cast<size_t>(id)]) continue;
        needed[static_cast<size_t>(id)] = 1;
        for (NodeId a : nodes_[static_cast<size_t>(id)].args) stack.push_back(a);
    }
    return needed;
}

namespace {

template <typename T>
void softmax_row(const T* x, T* y, int64_t n) {
    T m = x[0];
    for (int64_t j = 1; j < n; ++j)
        if (x[j] > m) m = x[j];
    T s = 0;
    for (int64_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - m);
        s += y[j];
    }
    T inv = T(1) / s;
    for (int64_t j = 0; j < n; ++j) y[j] *= inv;
}

template <typename T>
T logsumexp_row(const T* x, int64_t n) {
    T m = x[0];
    for (int64_t j = 1; j < n; ++j)
        if (x[j] > m) m = x[j];
    T s = 0;
    for (int64_t j = 0; j < n; ++j) s += std::exp(x[j] - m);
    return m + std::log(s);
}

template <typename T>
inline T gelu_fwd(T x) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    T u = c * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
inline T gelu_bwd(T x) {
    const T c = T(0.7978845608028654);
    T u = c * (x + T(0.044715) * x * x * x);
    T t = std::tanh(u);
    T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace

template <typename T>
void Graph<T>::run_forward(NodeId root, const Bindings& bindings,
                           const std::vector<char>& needed,
                           std::vector<Tensor<T>>& values) const {
    values.assign(nodes_.size(), Tensor<T>());
    for (size_t id = 0; id <= static_cast<size_t>(root); ++id) {
        if (!needed[id]) continue;
        const Node& n = nodes_[id];
        Tensor<T>& out = values[id];
        switch (n.op) {
            case Op::input: {
                auto it = bindings.find(n.label);
                require(it != bindings.end() && it->second != nullptr, ErrorKind::state,
                        "input '" + n.label + "' is not bound");
                require(shape_eq(it->second->shape, n.shape), ErrorKind::shape,
                        "input '" + n.label + "' bound with shape " +
                            shape_str(it->second->shape) + ", declared " +
                            shape_str(n.shape));
                out = *it->second;
                break;
            }
            case Op::constant:
                out = n.value;
                break;
            case Op::matmul: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                const Tensor<T>& b = values[static_cast<size_t>(n.args[1])];
                out = Tensor<T>(n.shape);
                int64_t m = n.shape[0], cols = n.shape[1];
                int64_t k = n.trans_a ? a.shape[0] : a.shape[1];
                gemm<T>(n.trans_a, n.trans_b, m, cols, k, a.data.data(), b.data.data(),
                        out.data.data());
                break;
            }
            case Op::add:
            case Op::mul: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                const Tensor<T>& b = values[static_cast<size_t>(n.args[1])];
                out = Tensor<T>(n.shape);
                int64_t total = a.numel();
                Bcast kind = bcast_kind<T>(a.shape, b.shape, "op");
                bool is_add = n.op == Op::add;
                if (kind == Bcast::same) {
                    for (int64_t i = 0; i < total; ++i)
                        out.data[i] = is_add ? a.data[i] + b.data[i] : a.data[i] * b.data[i];
                } else if (kind == Bcast::scalar) {
                    T s = b.data[0];
                    for (int64_t i = 0; i < total; ++i)
                        out.data[i] = is_add ? a.data[i] + s : a.data[i] * s;
                } else {
                    int64_t cols = a.shape[1];
                    for (int64_t i = 0; i < total; ++i) {
                        T s = b.data[static_cast<size_t>(i % cols)];
                        out.data[i] = is_add ? a.data[i] + s : a.data[i] * s;
                    }
                }
                break;
            }
            case Op::softmax: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                int64_t rows, cols;
                row_view(a.shape, rows, cols);
                for (int64_t i = 0; i < rows; ++i)
                    softmax_row(a.data.data() + i * cols, out.data.data() + i * cols, cols);
                break;
            }
            case Op::layernorm: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                int64_t rows, cols;
                row_view(a.shape, rows, cols);
                T eps = static_cast<T>(n.scalar);
                for (int64_t i = 0; i < rows; ++i) {
                    const T* x = a.data.data() + i * cols;
                    T* y = out.data.data() + i * cols;
                    T mean = 0;
                    for (int64_t j = 0; j < cols; ++j) mean += x[j];
                    mean /= static_cast<T>(cols);
                    T var = 0;
                    for (int64_t j = 0; j < cols; ++j) {
                        T d = x[j] - mean;
                        var += d * d;
                    }
                    var /= static_cast<T>(cols);
                    T rstd = T(1) / std::sqrt(var + eps);
                    for (int64_t j = 0; j < cols; ++j) y[j] = (x[j] - mean) * rstd;
                }
                break;
            }
            case Op::gelu: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                for (int64_t i = 0; i < a.numel(); ++i) out.data[i] = gelu_fwd(a.data[i]);
                break;
            }
            case Op::relu: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                for (int64_t i = 0; i < a.numel(); ++i)
                    out.data[i] = a.data[i] > T(0) ? a.data[i] : T(0);
                break;
            }
            case Op::embed: {
                const Tensor<T>& t = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                int64_t d = t.shape[1];
                for (size_t i = 0; i < n.idx_a.size(); ++i)
                    std::memcpy(out.data.data() + static_cast<int64_t>(i) * d,
                                t.data.data() + n.idx_a[i] * d,
                                static_cast<size_t>(d) * sizeof(T));
                break;
            }
            case Op::logsumexp: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                int64_t rows, cols;
                row_view(a.shape, rows, cols);
                for (int64_t i = 0; i < rows; ++i)
                    out.data[i] = logsumexp_row(a.data.data() + i * cols, cols);
                break;
            }
            case Op::cross_entropy: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                int64_t rows, cols;
                row_view(a.shape, rows, cols);
                for (int64_t i = 0; i < rows; ++i) {
                    const T* x = a.data.data() + i * cols;
                    out.data[i] = logsumexp_row(x, cols) - x[n.idx_a[static_cast<size_t>(i)]];
                }
                break;
            }
            case Op::expectile: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                T tau = static_cast<T>(n.scalar);
                for (int64_t i = 0; i < a.numel(); ++i) {
                    T u = a.data[i];
                    T w = u < T(0) ? T(1) - tau : tau;
                    out.data[i] = w * u * u;
                }
                break;
            }
            case Op::huber: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                T delta = static_cast<T>(n.scalar);
                for (int64_t i = 0; i < a.numel(); ++i) {
                    T u = a.data[i];
                    T au = std::abs(u);
                    out.data[i] = au <= delta ? T(0.5) * u * u
                                              : delta * (au - T(0.5) * delta);
                }
                break;
            }
            case Op::gather_rows: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                int64_t cols = a.rank() == 2 ? a.shape[1] : 1;
                for (size_t i = 0; i < n.idx_a.size(); ++i)
                    std::memcpy(out.data.data() + static_cast<int64_t>(i) * cols,
                                a.data.data() + n.idx_a[i] * cols,
                                static_cast<size_t>(cols) * sizeof(T));
                break;
            }
            case Op::gather_pairs: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                int64_t cols = a.shape[1];
                for (size_t i = 0; i < n.idx_a.size(); ++i)
                    out.data[i] = a.data[static_cast<size_t>(n.idx_a[i] * cols + n.idx_b[i])];
                break;
            }
            case Op::slice_cols: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                out = Tensor<T>(n.shape);
                int64_t start = n.idx_a[0], len = n.idx_a[1], cols = a.shape[1];
                for (int64_t i = 0; i < a.shape[0]; ++i)
                    std::memcpy(out.data.data() + i * len, a.data.data() + i * cols + start,
                                static_cast<size_t>(len) * sizeof(T));
                break;
            }
            case Op::concat_rows: {
                out = Tensor<T>(n.shape);
                int64_t off = 0;
                for (NodeId p : n.args) {
                    const Tensor<T>& a = values[static_cast<size_t>(p)];
                    std::memcpy(out.data.data() + off, a.data.data(),
                                static_cast<size_t>(a.numel()) * sizeof(T));
                    off += a.numel();
                }
                break;
            }
            case Op::concat_cols: {
                out = Tensor<T>(n.shape);
                int64_t rows = n.shape[0], cols = n.shape[1];
                int64_t coff = 0;
                for (NodeId p : n.args) {
                    const Tensor<T>& a = values[static_cast<size_t>(p)];
                    int64_t pc = a.shape[1];
                    for (int64_t i = 0; i < rows; ++i)
                        std::memcpy(out.data.data() + i * cols + coff,
                                    a.data.data() + i * pc,
                                    static_cast<size_t>(pc) * sizeof(T));
                    coff += pc;
                }
                break;
            }
            case Op::reshape:
            case Op::stop_grad: {
                out = values[static_cast<size_t>(n.args[0])];
                out.shape = n.shape;
                break;
            }
            case Op::reduce_sum: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                T s = 0;
                for (int64_t i = 0; i < a.numel(); ++i) s += a.data[i];
                out = Tensor<T>::scalar(s);
                break;
            }
            case Op::reduce_mean: {
                const Tensor<T>& a = values[static_cast<size_t>(n.args[0])];
                T s = 0;
                for (int64_t i = 0; i < a.numel(); ++i) s += a.data[i];
                out = Tensor<T>::scalar(s / static_cast<T>(a.numel()));
                break;
            }
        }
    }
}

template <typename T>
Tensor<T> Graph<T>::evaluate(NodeId root, const Bindings& bindings) const {
    check_arg(root, "evaluate");
    std::vector<char> needed = needed_for(root);
    std::vector<Tensor<T>> values;
    run_forward(root, bindings, needed, values);
    return values[static_cast<size_t>(root)];
}

template <typename T>
typename Graph<T>::Run Graph<T>::gradient(NodeId root, const Bindings& bindings,
                                          const std::vector<std::string>& wrt) const {
    check_arg(root, "gradient");
    require(shape_numel(shape_of(root)) == 1, ErrorKind::shape,
            "gradient root must be scalar, got " + shape_str(shape_of(root)));
    std::vector<char> needed = needed_for(root);
    Run run;
    run_forward(root, bindings, needed, run.values);

    std::vector<Tensor<T>> grads(nodes_.size());
    auto grad_of = [&](NodeId id) -> Tensor<T>& {
        Tensor<T>& g = grads[static_cast<size_t>(id)];
        if (g.numel() == 0 && shape_numel(nodes_[static_cast<size_t>(id)].shape) >= 0)
            g = Tensor<T>(nodes_[static_cast<size_t>(id)].shape);
        return g;
    };
    grad_of(root).data[0] = T(1);

    for (int64_t id = root; id >= 0; --id) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (!needed[static_cast<size_t>(id)] || !n.requires_grad) continue;
        const Tensor<T>& g = grads[static_cast<size_t>(id)];
        if (g.numel() == 0) continue;  // no consumer contributed
        auto arg_val = [&](int i) -> const Tensor<T>& {
            return run.values[static_cast<size_t>(n.args[static_cast<size_t>(i)])];
        };
        auto wants = [&](int i) {
            return nodes_[static_cast<size_t>(n.args[static_cast<size_t>(i)])].requires_grad;
        };
        switch (n.op) {
            case Op::input:
            case Op::constant:
            case Op::stop_grad:
                break;
            case Op::matmul: {
                const Tensor<T>& a = arg_val(0);
                const Tensor<T>& b = arg_val(1);
                int64_t m = n.shape[0], cols = n.shape[1];
                int64_t k = n.trans_a ? a.shape[0] : a.shape[1];
                if (wants(0)) {
                    Tensor<T> tmp(a.shape);
                    if (!n.trans_a) {
                        // dA = dC * opB(B)^T
                        if (!n.trans_b)
                            gemm<T>(false, true, m, k, cols, g.data.data(), b.data.data(),
                                    tmp.data.data());
                        else
                            gemm<T>(false, false, m, k, cols, g.data.data(), b.data.data(),
                                    tmp.data.data());
                    } else {
                        // dA = opB(B) * dC^T
                        if (!n.trans_b)
                            gemm<T>(false, true, k, m, cols, b.data.data(), g.data.data(),
                                    tmp.data.data());
                        else
                            gemm<T>(true, true, k, m, cols, b.data.data(), g.data.data(),
                                    tmp.data.data());
                    }
                    Tensor<T>& ga = grad_of(n.args[0]);
                    for (int64_t i = 0; i < ga.numel(); ++i) ga.data[i] += tmp.data[i];
                }
                if (wants(1)) {
                    Tensor<T> tmp(b.shape);
                    if (!n.trans_b) {
                        // dB = opA(A)^T * dC
                        if (!n.trans_a)
                            gemm<T>(true, false, k, cols, m, a.data.data(), g.data.data(),
                                    tmp.data.data());
                        else
                            gemm<T>(false, false, k, cols, m, a.data.data(), g.data.data(),
                                    tmp.data.data());
                    } else {
                        // dB = dC^T * opA(A)
                        if (!n.trans_a)
                            gemm<T>(true, false, cols, k, m, g.data.data(), a.data.data(),
                                    tmp.data.data());
                        else
                            gemm<T>(true, true, cols, k, m, g.data.data(), a.data.data(),
                                    tmp.data.data());
                    }
                    Tensor<T>& gb = grad_of(n.args[1]);
                    for (int64_t i = 0; i < gb.numel(); ++i) gb.data[i] += tmp.data[i];
                }
                break;
            }
            case Op::add: {
                const Tensor<T>& a = arg_val(0);
                const Tensor<T>& b = arg_val(1);
                Bcast kind = bcast_kind<T>(a.shape, b.shape, "add");
                if (wants(0)) {
                    Tensor<T>& ga = grad_of(n.args[0]);
                    for (int64_t i = 0; i < ga.numel(); ++i) ga.data[i] += g.data[i];
                }
                if (wants(1)) {
                    Tensor<T>& gb = grad_of(n.args[1]);
                    if (kind == Bcast::same) {
                        for (int64_t i = 0; i < gb.numel(); ++i) gb.data[i] += g.data[i];
                    } else if (kind == Bcast::scalar) {
                        T s = 0;
                        for (int64_t i = 0; i < g.numel(); ++i) s += g.data[i];
                        gb.data[0] += s;
                    } else {
                        int64_t cols = a.shape[1];
                        for (int64_t i = 0; i < g.numel(); ++i)
                            gb.data[static_cast<size_t>(i % cols)] += g.data[i];
                    }
                }
                break;
            }
            case Op::mul: {
                const Tensor<T>& a = arg_val(0);
                const Tensor<T>& b = arg_val(1);
                Bcast kind = bcast_kind<T>(a.shape, b.shape, "mul");
                if (wants(0)) {
                    Tensor<T>& ga = grad_of(n.args[0]);
                    if (kind == Bcast::same) {
                        for (int64_t i = 0; i < ga.numel(); ++i)
                            ga.data[i] += g.data[i] * b.data[i];
                    } else if (kind == Bcast::scalar) {
                        T s = b.data[0];
                        for (int64_t i = 0; i < ga.numel(); ++i) ga.data[i] += g.data[i] * s;
                    } else {
                        int64_t cols = a.shape[1];
                        for (int64_t i = 0; i < ga.numel(); ++i)
                            ga.data[i] += g.data[i] * b.data[static_cast<size_t>(i % cols)];
                    }
                }
                if (wants(1)) {
                    Tensor<T>& gb = grad_of(n.args[1]);
                    if (kind == Bcast::same) {
                        for (int64_t i = 0; i < gb.numel(); ++i)
                            gb.data[i] += g.data[i] * a.data[i];
                    } else if (kind == Bcast::scalar) {
                        T s = 0;
                        for (int64_t i = 0; i < g.numel(); ++i) s += g.data[i] * a.data[i];
                        gb.data[0] += s;
                    } else {
                        int64_t cols = a.shape[1];
                        for (int64_t i = 0; i < g.numel(); ++i)
                            gb.data[static_cast<size_t>(i % cols)] += g.data[i] * a.data[i];
                    }
                }
                break;
            }
            case Op::softmax: {
                if (!wants(0)) break;
                const Tensor<T>& y = run.values[static_cast<size_t>(id)];
                Tensor<T>& ga = grad_of(n.args[0]);
                int64_t rows, cols;
                row_view(y.shape, rows, cols);
                for (int64_t i = 0; i < rows; ++i) {
                    const T* yr = y.data.data() + i * cols;
                    const T* gr = g.data.data() + i * cols;
                    T dot = 0;
                    for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                    T* gar = ga.data.data() + i * cols;
                    for (int64_t j = 0; j < cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
                }
                break;
            }
            case Op::layernorm: {
                if (!wants(0)) break;
                const Tensor<T>& x = arg_val(0);
                const Tensor<T>& y = run.values[static_cast<size_t>(id)];
                Tensor<T>& ga = grad_of(n.args[0]);
                int64_t rows, cols;
                row_view(x.shape, rows, cols);
                T eps = static_cast<T>(n.scalar);
                for (int64_t i = 0; i < rows; ++i) {
                    const T* xr = x.data.data() + i * cols;
                    const T* yr = y.data.data() + i * cols;
                    const T* gr = g.data.data() + i * cols;
                    T mean = 0;
                    for (int64_t j = 0; j < cols; ++j) mean += xr[j];
                    mean /= static_cast<T>(cols);
                    T var = 0;
                    for (int64_t j = 0; j < cols; ++j) {
                        T d = xr[j] - mean;
                        var += d * d;
                    }
                    var /= static_cast<T>(cols);
                    T rstd = T(1) / std::sqrt(var + eps);
                    T gmean = 0, gy = 0;
                    for (int64_t j = 0; j < cols; ++j) {
                        gmean += gr[j];
                        gy += gr[j] * yr[j];
                    }
                    gmean /= static_cast<T>(cols);
                    gy /= static_cast<T>(cols);
                    T* gar = ga.data.data() + i * cols;
                    for (int64_t j = 0; j < cols; ++j)
                        gar[j] += rstd * (gr[j] - gmean - yr[j] * gy);
                }
                break;
            }
            case Op::gelu: {
                if (!wants(0)) break;
                const Tensor<T>& x = arg_val(0);
                Tensor<T>& ga = grad_of(n.args[0]);
                for (int64_t i = 0; i < x.numel(); ++i)
                    ga.data[i] += g.data[i] * gelu_bwd(x.data[i]);
                break;
            }
            case Op::relu: {
                if (!wants(0)) break;
                const Tensor<T>& x = arg_val(0);
                Tensor<T>& ga = grad_of(n.args[0]);
                for (int64_t i = 0; i < x.numel(); ++i)
                    if (x.data[i] > T(0)) ga.data[i] += g.data[i];
                break;
            }
            case Op::embed: {
                if (!wants(0)) break;
                Tensor<T>& gt = grad_of(n.args[0]);
                int64_t d = gt.shape[1];
                for (size_t i = 0; i < n.idx_a.size(); ++i) {
                    T* dst = gt.data.data() + n.idx_a[i] * d;
                    const T* src = g.data.data() + static_cast<int64_t>(i) * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::logsumexp: {
                if (!wants(0)) break;
                const Tensor<T>& x = arg_val(0);
                const Tensor<T>& y = run.values[static_cast<size_t>(id)];
                Tensor<T>& ga = grad_of(n.args[0]);
                int64_t rows, cols;
                row_view(x.shape, rows, cols);
                for (int64_t i = 0; i < rows; ++i) {
                    const T* xr = x.data.data() + i * cols;
                    T* gar = ga.data.data() + i * cols;
                    T gi = g.data[i], lse = y.data[i];
                    for (int64_t j = 0; j < cols; ++j)
                        gar[j] += gi * std::exp(xr[j] - lse);
                }
                break;
            }
            case Op::cross_entropy: {
                if (!wants(0)) break;
                const Tensor<T>& x = arg_val(0);
                Tensor<T>& ga = grad_of(n.args[0]);
                int64_t rows, cols;
                row_view(x.shape, rows, cols);
                std::vector<T> sm(static_cast<size_t>(cols));
                for (int64_t i = 0; i < rows; ++i) {
                    softmax_row(x.data.data() + i * cols, sm.data(), cols);
                    T gi = g.data[i];
                    T* gar = ga.data.data() + i * cols;
                    for (int64_t j = 0; j < cols; ++j) gar[j] += gi * sm[static_cast<size_t>(j)];
                    gar[n.idx_a[static_cast<size_t>(i)]] -= gi;
                }
                break;
            }
            case Op::expectile: {
                if (!wants(0)) break;
                const Tensor<T>& u = arg_val(0);
                Tensor<T>& ga = grad_of(n.args[0]);
                T tau = static_cast<T>(n.scalar);
                for (int64_t i = 0; i < u.numel(); ++i) {
                    T ui = u.data[i];
                    T w = ui < T(0) ? T(1) - tau : tau;
                    ga.data[i] += g.data[i] * T(2) * w * ui;
                }
                break;
            }
            case Op::huber: {
                if (!wants(0)) break;
                const Tensor<T>& u = arg_val(0);
                Tensor<T>& ga = grad_of(n.args[0]);
                T delta = static_cast<T>(n.scalar);
                for (int64_t i = 0; i < u.numel(); ++i) {
                    T ui = u.data[i];
                    T d = ui > delta ? delta : (ui < -delta ? -delta : ui);
                    ga.data[i] += g.data[i] * d;
                }
                break;
            }
            case Op::gather_rows: {
                if (!wants(0)) break;
                Tensor<T>& ga = grad_of(n.args[0]);
                int64_t cols = ga.rank() == 2 ? ga.shape[1] : 1;
                for (size_t i = 0; i < n.idx_a.size(); ++i) {
                    T* dst = ga.data.data() + n.idx_a[i] * cols;
                    const T* src = g.data.data() + static_cast<int64_t>(i) * cols;
                    for (int64_t j = 0; j < cols; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::gather_pairs: {
                if (!wants(0)) break;
                Tensor<T>& ga = grad_of(n.args[0]);
                int64_t cols = ga.shape[1];
                for (size_t i = 0; i < n.idx_a.size(); ++i)
                    ga.data[static_cast<size_t>(n.idx_a[i] * cols + n.idx_b[i])] += g.data[i];
                break;
            }
            case Op::slice_cols: {
                if (!wants(0)) break;
                Tensor<T>& ga = grad_of(n.args[0]);
                int64_t start = n.idx_a[0], len = n.idx_a[1], cols = ga.shape[1];
                for (int64_t i = 0; i < ga.shape[0]; ++i) {
                    T* dst = ga.data.data() + i * cols + start;
                    const T* src = g.data.data() + i * len;
                    for (int64_t j = 0; j < len; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::concat_rows: {
                int64_t off = 0;
                for (size_t p = 0; p < n.args.size(); ++p) {
                    const Tensor<T>& a = run.values[static_cast<size_t>(n.args[p])];
                    if (nodes_[static_cast<size_t>(n.args[p])].requires_grad) {
                        Tensor<T>& ga = grad_of(n.args[p]);
                        for (int64_t i = 0; i < a.numel(); ++i) ga.data[i] += g.data[off + i];
                    }
                    off += a.numel();
                }
                break;
            }
            case Op::concat_cols: {
                int64_t rows = n.shape[0], cols = n.shape[1];
                int64_t coff = 0;
                for (size_t p = 0; p < n.args.size(); ++p) {
                    const Tensor<T>& a = run.values[static_cast<size_t>(n.args[p])];
                    int64_t pc = a.shape[1];
                    if (nodes_[static_cast<size_t>(n.args[p])].requires_grad) {
                        Tensor<T>& ga = grad_of(n.args[p]);
                        for (int64_t i = 0; i < rows; ++i)
                            for (int64_t j = 0; j < pc; ++j)
                                ga.data[i * pc + j] += g.data[i * cols + coff + j];
                    }
                    coff += pc;
                }
                break;
            }
            case Op::reshape: {
                if (!wants(0)) break;
                Tensor<T>& ga = grad_of(n.args[0]);
                for (int64_t i = 0; i < ga.numel(); ++i) ga.data[i] += g.data[i];
                break;
            }
            case Op::reduce_sum: {
                if (!wants(0)) break;
                Tensor<T>& ga = grad_of(n.args[0]);
                T gi = g.data[0];
                for (int64_t i = 0; i < ga.numel(); ++i) ga.data[i] += gi;
                break;
            }
            case Op::reduce_mean: {
                if (!wants(0)) break;
                Tensor<T>& ga = grad_of(n.args[0]);
                T gi = g.data[0] / static_cast<T>(ga.numel());
                for (int64_t i = 0; i < ga.numel(); ++i) ga.data[i] += gi;
                break;
            }
        }
    }

    auto want_name = [&](const std::string& name) {
        if (wrt.empty()) return true;
        for (const std::string& w : wrt)
            if (w == name) return true;
        return false;
    };
    for (size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (n.op != Op::input || !n.requires_grad || !needed[id]) continue;
        if (!want_name(n.label)) continue;
        Tensor<T> gt = grads[id].numel() ? grads[id] : Tensor<T>(n.shape);
        run.grads.emplace(n.label, std::move(gt));
    }
    return run;
}

template <typename T>
FdReport finite_difference_check(const Graph<T>& g, NodeId root,
                                 const typename Graph<T>::Bindings& bindings,
                                 const std::vector<std::string>& wrt, double eps) {
    auto run = g.gradient(root, bindings, wrt);
    FdReport report;
    for (auto& [name, grad] : run.grads) {
        auto it = bindings.find(name);
        require(it != bindings.end(), ErrorKind::state, "fd check: unbound input " + name);
        Tensor<T> perturbed = *it->second;
        typename Graph<T>::Bindings b2 = bindings;
        b2[name] = &perturbed;
        for (int64_t i = 0; i < perturbed.numel(); ++i) {
            T keep = perturbed.data[i];
            perturbed.data[i] = keep + static_cast<T>(eps);
            double up = static_cast<double>(g.evaluate(root, b2).data[0]);
            perturbed.data[i] = keep - static_cast<T>(eps);
            double dn = static_cast<double>(g.evaluate(root, b2).data[0]);
            perturbed.data[i] = keep;
            double numeric = (up - dn) / (2.0 * eps);
            double analytic = static_cast<double>(grad.data[i]);
            double denom = std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
            double rel = std::abs(analytic - numeric) / denom;
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = {name, i, analytic, numeric, rel};
            }
        }
    }
    return report;
}

template class Graph<float>;
template class Graph<double>;
template FdReport finite_difference_check<float>(const Graph<float>&, NodeId,
                                                 const Graph<float>::Bindings&,
                                                 const std::vector<std::string>&, double);
template FdReport finite_difference_check<double>(const Graph<double>&, NodeId,
                                                  const Graph<double>::Bindings&,
                                                  const std::vector<std::string>&, double);

}  // namespace ilql
