#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ctok {

/// Dense row-major tensor of doubles. Every operation in the library works on rank-2
/// tensors (scalars are 1x1, vectors are 1xn or nx1); higher ranks can be stored but
/// are not consumed by any op.
class Tensor {
 public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
    /// Throws ValidationError if the extents are not positive or do not multiply to data.size().
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double value) { return Tensor(1, 1, value); }
    static Tensor row(std::vector<double> values);
    static Tensor column(std::vector<double> values);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    /// Leading extent (1 for rank-1 tensors).
    std::size_t rows() const noexcept;
    /// Trailing extent.
    std::size_t cols() const noexcept;

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row_span(std::size_t r) const {
        return {data_.data() + r * cols(), cols()};
    }

    double item() const;  // value of a 1-element tensor
    bool all_finite() const noexcept;
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    void fill(double value);

    std::string shape_string() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Gathers rows `indices` of `source` into a new tensor.
Tensor gather_rows(const Tensor& source, std::span<const std::size_t> indices);

}  // namespace ctok
