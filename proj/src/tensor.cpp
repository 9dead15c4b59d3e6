#include "ctok/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ctok/error.hpp"

namespace ctok {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : shape_{rows, cols}, data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
        throw ValidationError("tensor extents must be positive");
    }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty()) {
        throw ValidationError("tensor needs at least one extent");
    }
    std::size_t n = 1;
    for (std::size_t e : shape_) {
        if (e == 0) {
            throw ValidationError("tensor extents must be positive");
        }
        n *= e;
    }
    if (n != data_.size()) {
        throw ValidationError("tensor shape " + shape_string() + " does not match " +
                              std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
}

Tensor Tensor::column(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n, 1}, std::move(values));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ValidationError("ragged rows");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        t(i, i) = 1.0;
    }
    return t;
}

std::size_t Tensor::rows() const noexcept {
    if (shape_.size() < 2) {
        return shape_.empty() ? 0 : 1;
    }
    return shape_.front();
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ValidationError("item() on tensor of shape " + shape_string());
    }
    return data_[0];
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::string Tensor::shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i != 0) {
            s += "x";
        }
        s += std::to_string(shape_[i]);
    }
    return s + "]";
}

Tensor gather_rows(const Tensor& source, std::span<const std::size_t> indices) {
    const std::size_t c = source.cols();
    Tensor out(indices.size(), c);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::memcpy(out.row_span(i).data(), source.row_span(indices[i]).data(),
                    c * sizeof(double));
    }
    return out;
}

}  // namespace ctok
