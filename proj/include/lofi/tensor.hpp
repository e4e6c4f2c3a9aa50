#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace lofi {

// Dense row-major matrix of doubles. Vectors are 1×n or n×1 as convenient.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

    double* data() { return a.data(); }
    const double* data() const { return a.data(); }
    double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }
    double& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

    size_t size() const { return a.size(); }
    void zero() { std::fill(a.begin(), a.end(), 0.0); }
    void resize(int r, int c) {
        rows = r;
        cols = c;
        a.assign(static_cast<size_t>(r) * c, 0.0);
    }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// c += a · b            (m×k)(k×n)
void matmul_acc(const Mat& a, const Mat& b, Mat& c);
// c += aᵀ · b           (k×m)ᵀ(k×n) -> m×n
void matmul_tn_acc(const Mat& a, const Mat& b, Mat& c);
// c += a · bᵀ           (m×k)(n×k)ᵀ -> m×n
void matmul_nt_acc(const Mat& a, const Mat& b, Mat& c);

void axpy(double alpha, const Mat& x, Mat& y);  // y += alpha * x

double dot(const double* a, const double* b, int n);

double l2_norm(const double* a, int n);

// numerically safe softmax over row[lo, hi); entries outside set to 0
void softmax_range(double* row, int n, int lo, int hi);

double gelu(double x);
double gelu_grad(double x);

}  // namespace lofi
