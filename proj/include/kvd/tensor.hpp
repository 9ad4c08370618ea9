#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvd {

// Base of every error this library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape contract violated; `op` names the offending graph node.
class ShapeError : public Error {
public:
    ShapeError(std::string op, const std::string& what)
        : Error(op + ": " + what), op_(std::move(op)) {}
    const std::string& op() const { return op_; }

private:
    std::string op_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    IoError(std::string path, const std::string& what)
        : Error(path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

// Bad magic, version, config hash or truncated payload.
class FormatError : public Error {
public:
    using Error::Error;
};

// Dense row-major float32 tensor. At most rank 2 is used in practice; a
// vector is {n}, a matrix is {rows, cols}, a scalar is {1}.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, float fill = 0.0f);
    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor scalar(float v) { return Tensor({1}, {v}); }
    static Tensor vector(std::vector<float> v) {
        const auto n = v.size();
        return Tensor({n}, std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Matrix view helpers; a rank-1 tensor is treated as one row.
    std::size_t rows() const;
    std::size_t cols() const;

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> span() { return data_; }
    std::span<const float> span() const { return data_; }
    std::vector<float>& values() { return data_; }
    const std::vector<float>& values() const { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }
    float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    bool all_finite() const;
    std::string shape_str() const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

std::string shape_str(const std::vector<std::size_t>& shape);

// Bitwise comparison (distinguishes -0.0f from 0.0f, NaN payloads).
bool bitwise_equal(const Tensor& a, const Tensor& b);

float max_abs_diff(std::span<const float> a, std::span<const float> b);

}  // namespace kvd
