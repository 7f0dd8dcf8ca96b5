#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lbd/errors.hpp"

namespace lbd {

/// Dense n-dimensional array of doubles, row-major. Data is shared
/// copy-on-write: copying a Tensor is O(1), mutation detaches. Published
/// tensors are treated as immutable values; only owners of freshly created
/// tensors write through mutable_data().
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(checked_size(shape_), 0.0)) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static Tensor from_data(std::vector<int> shape, std::vector<double> data) {
        if (checked_size(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("shape-mismatch: data length does not match shape product");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<double>>(std::move(data));
        return t;
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }

    int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

    const double* data() const { return data_->data(); }

    // Detaches from shared storage if needed before exposing writable memory.
    double* mutable_data() {
        if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
        return data_->data();
    }

    double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    /// Same data, new shape (element count must match).
    Tensor reshaped(std::vector<int> shape) const {
        if (checked_size(shape) != size())
            throw ShapeError("shape-mismatch: reshape changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool bit_equal(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        if (data_ == o.data_) return true;
        return std::memcmp(data_->data(), o.data_->data(),
                           data_->size() * sizeof(double)) == 0;
    }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double min() const {
        double m = (*data_)[0];
        for (double v : *data_) m = std::min(m, v);
        return m;
    }

    double max() const {
        double m = (*data_)[0];
        for (double v : *data_) m = std::max(m, v);
        return m;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ']';
        return os.str();
    }

private:
    static int64_t checked_size(const std::vector<int>& shape) {
        if (shape.empty()) throw ShapeError("shape-mismatch: empty shape");
        int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("shape-mismatch: nonpositive dimension");
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw ShapeError(std::string("shape-mismatch: ") + where + " " + a.shape_str() +
                         " vs " + b.shape_str());
}

/// Mean squared difference over all elements. Zero iff a == b.
inline double mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    const double* pa = a.data();
    const double* pb = b.data();
    double acc = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = pa[i] - pb[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

/// Row-wise softmax over a [n, k] tensor, max-subtracted for stability.
inline Tensor softmax_rows(const Tensor& logits) {
    if (logits.ndim() != 2) throw ShapeError("shape-mismatch: softmax expects [n,k]");
    int n = logits.dim(0), k = logits.dim(1);
    Tensor out(std::vector<int>{n, k});
    const double* in = logits.data();
    double* o = out.mutable_data();
    for (int r = 0; r < n; ++r) {
        const double* row = in + static_cast<int64_t>(r) * k;
        double* orow = o + static_cast<int64_t>(r) * k;
        double m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) {
            orow[j] = std::exp(row[j] - m);
            z += orow[j];
        }
        for (int j = 0; j < k; ++j) orow[j] /= z;
    }
    return out;
}

/// Replicates a tensor n times along a new leading axis.
inline Tensor tile_batch(const Tensor& t, int n) {
    std::vector<int> shape;
    shape.push_back(n);
    for (int d : t.shape()) shape.push_back(d);
    Tensor out(shape);
    double* o = out.mutable_data();
    for (int i = 0; i < n; ++i)
        std::copy_n(t.data(), t.size(), o + static_cast<int64_t>(i) * t.size());
    return out;
}

inline int argmax_row(const Tensor& t, int row) {
    int k = t.dim(t.ndim() - 1);
    const double* p = t.data() + static_cast<int64_t>(row) * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

}  // namespace lbd
