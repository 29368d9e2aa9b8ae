#pragma once

// Minimal row-major float matrix plus the handful of BLAS-1/2 kernels the
// forward pass needs. Weights and traces are float32; reductions that feed
// invariant checks accumulate in double.

#include <cstddef>
#include <cmath>
#include <span>
#include <vector>

#include "moescope/common.hpp"

namespace moescope {

class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    float& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::size_t size() const { return data_.size(); }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

using Vec = std::vector<float>;

inline double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

// y = M x, M is (rows x cols), x has cols entries.
inline Vec matvec(const Mat& m, std::span<const float> x) {
    Vec y(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        y[r] = static_cast<float>(dot(m.row(r), x));
    }
    return y;
}

// y = M^T x, M is (rows x cols), x has rows entries. Used for d x |V| style
// projections stored transposed.
inline Vec matvec_transposed(const Mat& m, std::span<const float> x) {
    std::vector<double> acc(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        const double xr = x[r];
        for (std::size_t c = 0; c < m.cols(); ++c) acc[c] += xr * row[c];
    }
    Vec y(m.cols());
    for (std::size_t c = 0; c < m.cols(); ++c) y[c] = static_cast<float>(acc[c]);
    return y;
}

inline double l2_norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

inline void add_inplace(Vec& a, std::span<const float> b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline void axpy_inplace(Vec& a, float alpha, std::span<const float> b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += alpha * b[i];
}

// Numerically stable softmax over arbitrary score subsets.
inline std::vector<double> softmax(std::span<const double> scores) {
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    std::vector<double> out(scores.size());
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(scores[i] - mx);
        z += out[i];
    }
    for (double& o : out) o /= z;
    return out;
}

inline double swish(double z) { return z / (1.0 + std::exp(-z)); }

}  // namespace moescope
