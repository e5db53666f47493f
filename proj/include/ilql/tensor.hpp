#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ilql/error.hpp"

namespace ilql {

// Shapes are rank 1 or 2 throughout; batches are expressed by stacking rows.
using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

// Dense row-major tensor. Plain storage; all math lives in graph ops and kernels.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0))
        : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

    static Tensor scalar(T v) {
        Tensor t(Shape{1});
        t.data[0] = v;
        return t;
    }
    static Tensor from(Shape s, std::vector<T> values) {
        require(shape_numel(s) == static_cast<int64_t>(values.size()), ErrorKind::shape,
                "tensor init: " + std::to_string(values.size()) + " values for shape " +
                    shape_str(s));
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(values);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return rank() == 2 ? shape[1] : 1; }

    T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    T at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    T at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
};

// C = opA(A) * opB(B), overwriting C. opA(A) is m x k, opB(B) is k x n.
// Reduction order is fixed (ascending k) for run-to-run determinism.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
          const T* b, T* c);

}  // namespace ilql
