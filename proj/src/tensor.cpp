#include "ilql/tensor.hpp"

#include <cstring>
#include <sstream>

namespace ilql {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        require(d >= 0, ErrorKind::shape, "negative dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

namespace {

// c_row += s * b_row, contiguous; the compiler vectorizes this form well.
template <typename T>
inline void axpy(int64_t n, T s, const T* b, T* c) {
    for (int64_t j = 0; j < n; ++j) c[j] += s * b[j];
}

template <typename T>
void gemm_nn(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c) {
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) axpy(n, arow[p], b + p * n, crow);
    }
}

// a is k x m (transposed operand); same axpy inner loop, k outermost.
template <typename T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c) {
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) axpy(n, arow[i], brow, c + i * n);
    }
}

// Materialize the transpose of an r x c matrix into scratch. Transposed operands on
// the right are folded into the NN kernel so every output keeps the same ascending-k
// summation order while the inner loop stays contiguous (and vectorizable).
template <typename T>
const T* transposed(const T* x, int64_t r, int64_t c, std::vector<T>& scratch) {
    scratch.resize(static_cast<size_t>(r * c));
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) scratch[static_cast<size_t>(j * r + i)] = x[i * c + j];
    return scratch.data();
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
          const T* b, T* c) {
    thread_local std::vector<T> scratch;
    if (trans_b) b = transposed(b, n, k, scratch);  // b given as n x k
    std::memset(c, 0, static_cast<size_t>(m * n) * sizeof(T));
    if (!trans_a)
        gemm_nn(m, n, k, a, b, c);
    else
        gemm_tn(m, n, k, a, b, c);
}

template void gemm<float>(bool, bool, int64_t, int64_t, int64_t, const float*,
                          const float*, float*);
template void gemm<double>(bool, bool, int64_t, int64_t, int64_t, const double*,
                           const double*, double*);

}  // namespace ilql
