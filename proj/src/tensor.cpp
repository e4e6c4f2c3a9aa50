#include "lofi/tensor.hpp"

#include <cassert>
#include <cmath>
#include <stdexcept>

namespace lofi {

namespace {

void check(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("matmul shape mismatch: ") + what);
}

}  // namespace

void matmul_acc(const Mat& a, const Mat& b, Mat& c) {
    check(a.cols == b.rows && c.rows == a.rows && c.cols == b.cols, "a·b");
    const int m = a.rows, k = a.cols, n = b.cols;
    for (int i = 0; i < m; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b.row(p);
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void matmul_tn_acc(const Mat& a, const Mat& b, Mat& c) {
    check(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols, "aᵀ·b");
    const int k = a.rows, m = a.cols, n = b.cols;
    for (int p = 0; p < k; ++p) {
        const double* ap = a.row(p);
        const double* bp = b.row(p);
        for (int i = 0; i < m; ++i) {
            double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c.row(i);
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void matmul_nt_acc(const Mat& a, const Mat& b, Mat& c) {
    check(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows, "a·bᵀ");
    const int m = a.rows, k = a.cols, n = b.rows;
    for (int i = 0; i < m; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (int j = 0; j < n; ++j) ci[j] += dot(ai, b.row(j), k);
    }
}

void axpy(double alpha, const Mat& x, Mat& y) {
    assert(x.size() == y.size());
    const double* xp = x.data();
    double* yp = y.data();
    for (size_t i = 0; i < x.size(); ++i) yp[i] += alpha * xp[i];
}

double dot(const double* a, const double* b, int n) {
    double s = 0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(const double* a, int n) { return std::sqrt(dot(a, a, n)); }

void softmax_range(double* row, int n, int lo, int hi) {
    if (lo < 0) lo = 0;
    if (hi > n) hi = n;
    for (int j = 0; j < lo; ++j) row[j] = 0;
    for (int j = hi; j < n; ++j) row[j] = 0;
    if (lo >= hi) return;
    double mx = row[lo];
    for (int j = lo + 1; j < hi; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (int j = lo; j < hi; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    double inv = 1.0 / sum;
    for (int j = lo; j < hi; ++j) row[j] *= inv;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace lofi
