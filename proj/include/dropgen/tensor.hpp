#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dropgen {

// Contract violations (shape mismatches, out-of-range labels, bad arguments)
// surface as invalid_argument; file/parse problems as runtime_error.
[[noreturn]] inline void contract_fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) contract_fail(msg);
}

// Dense row-major double tensor. Small and value-semantic; every model
// activation, parameter, and dataset block in the project is one of these.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), 0.0);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    // Input-tensor constructor: validates extents and rejects non-finite data.
    static Tensor from(std::vector<int> shape, std::vector<double> data) {
        check(count(shape) == static_cast<long>(data.size()),
              "tensor data length does not match shape");
        for (double v : data)
            check(std::isfinite(v), "tensor rejects non-finite values");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    long size() const { return static_cast<long>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

    double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
    double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }

    double& operator()(int i, int j, int k) {
        return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    double operator()(int i, int j, int k) const {
        return data_[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) {
        for (auto& x : data_) x = v;
    }

    Tensor& operator+=(const Tensor& other) {
        check(same_shape(other), "tensor += shape mismatch");
        for (long i = 0; i < size(); ++i) data_[static_cast<size_t>(i)] += other[i];
        return *this;
    }

    Tensor& operator*=(double s) {
        for (auto& x : data_) x *= s;
        return *this;
    }

    static long count(const std::vector<int>& shape) {
        long n = 1;
        for (int d : shape) {
            check(d > 0, "tensor extents must be positive");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

// Integer label tensor (class indices), kept separate from Tensor so label
// semantics (exact equality, range checks) never ride on doubles.
class IntTensor {
public:
    IntTensor() = default;

    explicit IntTensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(Tensor::count(shape_)), 0);
    }

    static IntTensor from(std::vector<int> shape, std::vector<int> data) {
        check(Tensor::count(shape) == static_cast<long>(data.size()),
              "label data length does not match shape");
        IntTensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    long size() const { return static_cast<long>(data_.size()); }

    int& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    int operator[](long i) const { return data_[static_cast<size_t>(i)]; }

    int& operator()(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
    int operator()(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }

    std::vector<int>& vec() { return data_; }
    const std::vector<int>& vec() const { return data_; }

private:
    std::vector<int> shape_;
    std::vector<int> data_;
};

inline void check_labels_in_range(const IntTensor& labels, int num_classes) {
    for (long i = 0; i < labels.size(); ++i)
        check(labels[i] >= 0 && labels[i] < num_classes, "label out of range [0, K)");
}

inline double dot(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "dot shape mismatch");
    double s = 0.0;
    for (long i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double mean_of(const Tensor& a) {
    double s = 0.0;
    for (long i = 0; i < a.size(); ++i) s += a[i];
    return s / static_cast<double>(a.size());
}

// Population standard deviation.
inline double std_of(const Tensor& a) {
    double m = mean_of(a);
    double s = 0.0;
    for (long i = 0; i < a.size(); ++i) s += (a[i] - m) * (a[i] - m);
    return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace dropgen
