// Dense row-major matrix of Real plus the handful of GEMM kernels the
// model needs. Loop orders are chosen so the hot inner loops vectorize
// without -ffast-math (accumulation order stays fixed -> bit-reproducible).
#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace sycoca {

template <class Real>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<Real> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, Real(0)) {}

    static Mat zeros(int r, int c) { return Mat(r, c); }

    Real& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    Real at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }

    Real* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
    const Real* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }

    std::size_t size() const { return a.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    void fill(Real v) {
        for (auto& x : a) x = v;
    }

    void add_inplace(const Mat& o) {
        assert(same_shape(o));
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += o.a[i];
    }
};

// C += A(m x k) * B(k x n)
template <class Real>
void gemm_nn_acc(const Mat<Real>& A, const Mat<Real>& B, Mat<Real>& C) {
    assert(A.cols == B.rows && C.rows == A.rows && C.cols == B.cols);
    const int m = A.rows, k = A.cols, n = B.cols;
    for (int i = 0; i < m; ++i) {
        Real* ci = C.row(i);
        const Real* ai = A.row(i);
        for (int p = 0; p < k; ++p) {
            const Real av = ai[p];
            const Real* bp = B.row(p);
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C += A(m x k) * B(n x k)^T
template <class Real>
void gemm_nt_acc(const Mat<Real>& A, const Mat<Real>& B, Mat<Real>& C) {
    assert(A.cols == B.cols && C.rows == A.rows && C.cols == B.rows);
    const int m = A.rows, k = A.cols, n = B.rows;
    for (int i = 0; i < m; ++i) {
        const Real* ai = A.row(i);
        Real* ci = C.row(i);
        for (int j = 0; j < n; ++j) {
            const Real* bj = B.row(j);
            Real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            int p = 0;
            for (; p + 4 <= k; p += 4) {
                s0 += ai[p] * bj[p];
                s1 += ai[p + 1] * bj[p + 1];
                s2 += ai[p + 2] * bj[p + 2];
                s3 += ai[p + 3] * bj[p + 3];
            }
            Real s = (s0 + s1) + (s2 + s3);
            for (; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// C += A(k x m)^T * B(k x n)
template <class Real>
void gemm_tn_acc(const Mat<Real>& A, const Mat<Real>& B, Mat<Real>& C) {
    assert(A.rows == B.rows && C.rows == A.cols && C.cols == B.cols);
    const int k = A.rows, m = A.cols, n = B.cols;
    for (int p = 0; p < k; ++p) {
        const Real* ap = A.row(p);
        const Real* bp = B.row(p);
        for (int i = 0; i < m; ++i) {
            const Real av = ap[i];
            Real* ci = C.row(i);
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <class Real>
Mat<Real> matmul_nn(const Mat<Real>& A, const Mat<Real>& B) {
    Mat<Real> C(A.rows, B.cols);
    gemm_nn_acc(A, B, C);
    return C;
}

template <class Real>
Mat<Real> matmul_nt(const Mat<Real>& A, const Mat<Real>& B) {
    Mat<Real> C(A.rows, B.rows);
    gemm_nt_acc(A, B, C);
    return C;
}

template <class Real>
Mat<Real> transposed(const Mat<Real>& A) {
    Mat<Real> T(A.cols, A.rows);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < A.cols; ++j) T.at(j, i) = A.at(i, j);
    return T;
}

}  // namespace sycoca
