#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace codebrain {

using Real = double;

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense row-major tensor. Layout conventions used throughout:
// images (H,W) or (C,H,W), batched activations (B,C,H,W), scalars {1}.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), Real(0));
    }

    Tensor(std::vector<int> shape, std::vector<Real> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != count(shape_))
            throw std::invalid_argument("tensor data does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, Real v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(Real v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }

    int dim(int i) const {
        if (i < 0 || i >= ndim()) throw std::out_of_range("tensor dim index");
        return shape_[static_cast<size_t>(i)];
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }

    Real& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    Real operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (Real v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Real min() const {
        Real m = data_.empty() ? Real(0) : data_[0];
        for (Real v : data_) m = std::min(m, v);
        return m;
    }

    Real max() const {
        Real m = data_.empty() ? Real(0) : data_[0];
        for (Real v : data_) m = std::max(m, v);
        return m;
    }

    Real sum() const {
        Real s = 0;
        for (Real v : data_) s += v;
        return s;
    }

    Real mean() const { return data_.empty() ? Real(0) : sum() / static_cast<Real>(data_.size()); }

    void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("negative tensor dimension");
            n *= d;
        }
        return shape.empty() ? 0 : n;
    }

private:
    std::vector<int> shape_;
    std::vector<Real> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace codebrain
