#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>

#include "lofi/common.hpp"
#include "lofi/tensor.hpp"

using namespace lofi;

static Mat random_mat(int r, int c, Rng& rng) {
    Mat m(r, c);
    for (double& v : m.a) v = rng.normal();
    return m;
}

static Mat naive_matmul(const Mat& a, const Mat& b) {
    Mat c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.cols; ++j) {
            double s = 0;
            for (int k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

static Mat transpose(const Mat& a) {
    Mat t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

TEST_CASE("matmul variants match naive reference") {
    Rng rng(3);
    for (int iter = 0; iter < 20; ++iter) {
        int m = static_cast<int>(rng.uniform_int(1, 17));
        int k = static_cast<int>(rng.uniform_int(1, 17));
        int n = static_cast<int>(rng.uniform_int(1, 17));
        Mat a = random_mat(m, k, rng), b = random_mat(k, n, rng);

        Mat c(m, n);
        matmul_acc(a, b, c);
        Mat ref = naive_matmul(a, b);
        for (size_t i = 0; i < c.size(); ++i) CHECK(c.a[i] == doctest::Approx(ref.a[i]).epsilon(1e-12));

        Mat at = transpose(a);
        Mat c2(m, n);
        matmul_tn_acc(at, b, c2);
        for (size_t i = 0; i < c2.size(); ++i) CHECK(c2.a[i] == doctest::Approx(ref.a[i]).epsilon(1e-12));

        Mat bt = transpose(b);
        Mat c3(m, n);
        matmul_nt_acc(a, bt, c3);
        for (size_t i = 0; i < c3.size(); ++i) CHECK(c3.a[i] == doctest::Approx(ref.a[i]).epsilon(1e-12));
    }
    Mat a(2, 3), b(2, 3), c(2, 2);
    CHECK_THROWS_AS(matmul_acc(a, b, c), std::invalid_argument);
}

TEST_CASE("softmax_range normalizes and masks") {
    double row[6] = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
    softmax_range(row, 6, 1, 4);
    CHECK(row[0] == 0.0);
    CHECK(row[4] == 0.0);
    CHECK(row[5] == 0.0);
    CHECK(row[1] + row[2] + row[3] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row[3] > row[2]);

    // large values stay finite
    double big[3] = {1000.0, 999.0, -1000.0};
    softmax_range(big, 3, 0, 3);
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] > big[1]);
}

TEST_CASE("gelu gradient matches finite differences") {
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        double x = rng.uniform(-4, 4);
        double h = 1e-6;
        double num = (gelu(x + h) - gelu(x - h)) / (2 * h);
        CHECK(gelu_grad(x) == doctest::Approx(num).epsilon(1e-6));
    }
}

TEST_CASE("matmul throughput sanity") {
    // not a perf assertion, just prints the rough rate the trainer relies on
    Rng rng(1);
    int n = 256;
    Mat a = random_mat(n, n, rng), b = random_mat(n, n, rng), c(n, n);
    auto t0 = std::chrono::steady_clock::now();
    int reps = 10;
    for (int r = 0; r < reps; ++r) {
        c.zero();
        matmul_acc(a, b, c);
    }
    auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double gflops = 2.0 * n * n * n * reps / dt / 1e9;
    MESSAGE("matmul ", n, "x", n, ": ", gflops, " GFLOP/s");
    CHECK(c.at(0, 0) != 0.0);
}
