#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ilql/tensor.hpp"

namespace ilql {

// Deferred-evaluation expression DAG over rank-1/rank-2 tensors. Shapes are checked at
// build time; evaluate/gradient run the whole graph with a fixed schedule so repeated
// runs on identical inputs are bitwise identical.
enum class Op {
    input,
    constant,
    matmul,
    add,       // elementwise; rhs may be a broadcast row [n] or scalar [1]
    mul,       // same broadcast rules as add
    softmax,   // rows
    layernorm,  // rows, zero mean / unit variance, eps in attr
    gelu,       // tanh approximation
    relu,
    embed,         // arg: table [V,D]; ids in attr -> [n,D]
    logsumexp,     // rows -> [n]
    cross_entropy,  // arg: logits [n,V]; targets in attr -> [n] of -log softmax[target]
    expectile,      // elementwise |tau - 1(u<0)| * u^2
    huber,          // elementwise, quadratic inside delta, linear outside
    gather_rows,    // row indices in attr; rank-1 input gathers elements
    gather_pairs,   // (row, col) index pairs in attrs -> [n]
    slice_cols,     // contiguous column range
    concat_rows,
    concat_cols,
    reshape,
    reduce_sum,   // -> [1]
    reduce_mean,  // -> [1]
    stop_grad,
};

const char* op_name(Op op);

using NodeId = int32_t;

template <typename T>
class Graph {
  public:
    struct Node {
        Op op;
        Shape shape;
        std::vector<NodeId> args;
        std::string label;               // input binding name, or debug label
        bool trans_a = false, trans_b = false;
        double scalar = 0.0;             // tau / delta / eps
        std::vector<int64_t> idx_a, idx_b;  // ids, row/col indices, slice [start, len]
        bool requires_grad = false;
        Tensor<T> value;                 // constants only
    };

    using Bindings = std::unordered_map<std::string, const Tensor<T>*>;

    // All differentiable leaves are named inputs; weights bind by name at run time.
    NodeId input(const std::string& name, Shape shape, bool requires_grad = true);
    NodeId constant(Tensor<T> value, const std::string& label = "");

    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false,
                  const std::string& label = "");
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId softmax(NodeId a);
    NodeId layernorm(NodeId a, double eps = 1e-5);
    NodeId gelu(NodeId a);
    NodeId relu(NodeId a);
    NodeId embed(NodeId table, std::vector<int64_t> ids, const std::string& label = "");
    NodeId logsumexp(NodeId a);
    NodeId cross_entropy(NodeId logits, std::vector<int64_t> targets);
    NodeId expectile(NodeId u, double tau);
    NodeId huber(NodeId u, double delta);
    NodeId gather_rows(NodeId a, std::vector<int64_t> rows);
    NodeId gather_pairs(NodeId a, std::vector<int64_t> rows, std::vector<int64_t> cols);
    NodeId slice_cols(NodeId a, int64_t start, int64_t len);
    NodeId concat_rows(const std::vector<NodeId>& parts);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId reshape(NodeId a, Shape shape);
    NodeId reduce_sum(NodeId a);
    NodeId reduce_mean(NodeId a);
    NodeId stop_grad(NodeId a);

    // Conveniences built from the primitive ops.
    NodeId scaled(NodeId a, double s);
    NodeId sub(NodeId a, NodeId b);
    NodeId square(NodeId a);

    const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    const Shape& shape_of(NodeId id) const { return node(id).shape; }
    size_t size() const { return nodes_.size(); }

    struct Run {
        std::vector<Tensor<T>> values;  // by node id; unused nodes stay empty
        std::unordered_map<std::string, Tensor<T>> grads;  // by input name
        const Tensor<T>& value(NodeId id) const { return values[static_cast<size_t>(id)]; }
    };

    Tensor<T> evaluate(NodeId root, const Bindings& bindings) const;
    // Root must be scalar. Gradients are returned for every differentiable input unless
    // wrt narrows the set.
    Run gradient(NodeId root, const Bindings& bindings,
                 const std::vector<std::string>& wrt = {}) const;

  private:
    NodeId push(Node n);
    NodeId check_arg(NodeId id, const char* ctx) const;
    [[noreturn]] void shape_fail(const Node& n, const std::string& msg) const;
    std::string describe(const Node& n) const;
    std::vector<char> needed_for(NodeId root) const;
    void run_forward(NodeId root, const Bindings& bindings, const std::vector<char>& needed,
                     std::vector<Tensor<T>>& values) const;

    std::vector<Node> nodes_;
};

struct FdIssue {
    std::string input;
    int64_t index = 0;
    double analytic = 0.0, numeric = 0.0, rel_err = 0.0;
};

struct FdReport {
    double max_rel_err = 0.0;
    FdIssue worst;
    int64_t checked = 0;
};

// Central finite differences on every element of the named inputs (all differentiable
// inputs when wrt is empty). Meant for 64-bit graphs in tests.
template <typename T>
FdReport finite_difference_check(const Graph<T>& g, NodeId root,
                                 const typename Graph<T>::Bindings& bindings,
                                 const std::vector<std::string>& wrt = {},
                                 double eps = 1e-5);

}  // namespace ilql
