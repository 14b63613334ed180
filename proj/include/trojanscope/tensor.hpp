#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trojanscope {

inline std::size_t shape_size(const std::vector<int>& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_string(const std::vector<int>& shape);

// Dense row-major tensor. The batch dimension, when present, is the first one;
// images are laid out as N x H x W x C.
template <typename T>
class BasicTensor {
public:
    BasicTensor() = default;

    explicit BasicTensor(std::vector<int> shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_size(shape_), fill)
    {
        check_dims();
    }

    BasicTensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data))
    {
        check_dims();
        if (data_.size() != shape_size(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(shape_));
        }
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    void reshape(std::vector<int> shape)
    {
        if (shape_size(shape) != data_.size()) {
            throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        shape_ = std::move(shape);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    BasicTensor<U> cast() const
    {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    // Elements [index * stride, (index + 1) * stride) along the leading dimension.
    std::span<const T> row(int index) const
    {
        const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_.at(0));
        return std::span<const T>(data_).subspan(static_cast<std::size_t>(index) * stride, stride);
    }
    std::span<T> row(int index)
    {
        const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_.at(0));
        return std::span<T>(data_).subspan(static_cast<std::size_t>(index) * stride, stride);
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_dims() const
    {
        for (int d : shape_) {
            if (d <= 0) {
                throw std::invalid_argument("tensor dimensions must be positive, got " + shape_string(shape_));
            }
        }
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

// Stacks the given rows (each of shape `item_shape`) into a batch tensor.
template <typename T>
BasicTensor<T> stack_rows(const std::vector<int>& item_shape, const std::vector<std::span<const T>>& rows)
{
    std::vector<int> shape{static_cast<int>(rows.size())};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    BasicTensor<T> out(shape);
    const std::size_t stride = shape_size(item_shape);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != stride) {
            throw std::invalid_argument("stack_rows: row size mismatch");
        }
        std::copy(rows[i].begin(), rows[i].end(), out.data() + i * stride);
    }
    return out;
}

}  // namespace trojanscope
