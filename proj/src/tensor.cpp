#include "cag/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cag {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Index shape_size(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_size(shape_) != static_cast<Index>(data_.size()))
        throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
}

Index Tensor::dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank())
        throw std::out_of_range("axis out of range for shape " + shape_to_string(shape_));
    return shape_[static_cast<std::size_t>(axis)];
}

Tensor Tensor::reshaped(Shape shape) const& {
    Tensor t = *this;
    return std::move(t).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
    if (shape_size(shape) != size())
        throw std::invalid_argument("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    shape_ = std::move(shape);
    return std::move(*this);
}

MatrixMap Tensor::matrix(Index rows, Index cols) {
    if (rows * cols != size()) throw std::invalid_argument("matrix view size mismatch");
    return MatrixMap(data_.data(), rows, cols);
}

ConstMatrixMap Tensor::matrix(Index rows, Index cols) const {
    if (rows * cols != size()) throw std::invalid_argument("matrix view size mismatch");
    return ConstMatrixMap(data_.data(), rows, cols);
}

MatrixMap Tensor::matrix() {
    const Index rows = rank() == 0 ? 1 : shape_[0];
    return matrix(rows, rows == 0 ? 0 : size() / rows);
}

ConstMatrixMap Tensor::matrix() const {
    const Index rows = rank() == 0 ? 1 : shape_[0];
    return matrix(rows, rows == 0 ? 0 : size() / rows);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace cag
