// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cmath>
#include <vector>

#include "flowcd/common.hpp"

namespace flowcd {

// Dense row-major tensor of doubles, rank 1..4. Double keeps the
// finite-difference gradient checks well away from float roundoff.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, double fill = 0.0) : shape_(std::move(shape)) {
        long n = 1;
        for (int d : shape_) {
            if (d <= 0) throw ValidationError("tensor dimension must be positive");
            n *= d;
        }
        data_.assign(static_cast<std::size_t>(n), fill);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v) { return Tensor(std::move(shape), v); }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data_[0] = v;
        return t;
    }

    int dim() const { return static_cast<int>(shape_.size()); }
    int size(int d) const { return shape_[static_cast<std::size_t>(d)]; }
    long numel() const { return static_cast<long>(data_.size()); }
    const std::vector<int>& shape() const { return shape_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

    // 3D (C,H,W) accessors; the layout used by every image-like tensor here.
    double& at(int c, int y, int x) {
        assert(dim() == 3);
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    double at(int c, int y, int x) const {
        assert(dim() == 3);
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }

    void fill(double v) { data_.assign(data_.size(), v); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double sum() const {
        double s = 0.0;
        for (double v : data_) s += v;
        return s;
    }

    double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::fabs(v));
        return m;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw ValidationError(std::string(what) + ": shape mismatch");
}

} // namespace flowcd
