#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deepthink/error.hpp"

namespace dt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major float32 array. Extents are positive; numel == data.size().
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(shape_numel(shape_), 0.0f);
    }

    Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("tensor " + shape_str(shape_) + " given " +
                                 std::to_string(data_.size()) + " values");
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows) {
        std::vector<float> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    const float& operator[](std::size_t i) const { return data_[i]; }

    float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const float& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    float& at(std::size_t a, std::size_t r, std::size_t c) {
        return data_[(a * shape_[1] + r) * shape_[2] + c];
    }
    const float& at(std::size_t a, std::size_t r, std::size_t c) const {
        return data_[(a * shape_[1] + r) * shape_[2] + c];
    }

    // Contiguous slice along the last axis of a rank-2 tensor.
    std::span<float> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
    std::span<const float> row(std::size_t r) const {
        return {data_.data() + r * shape_[1], shape_[1]};
    }

    bool all_finite() const {
        for (float v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_extents() const {
        for (std::size_t e : shape_) {
            if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<float> data_;
};

inline double frobenius_norm(const Tensor& t) {
    double acc = 0.0;
    for (float v : t.data()) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("compare " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
    }
    float worst = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
    return worst;
}

}  // namespace dt
