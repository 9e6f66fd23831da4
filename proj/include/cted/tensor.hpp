#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cted/common.hpp"

namespace cted {

// Dense row-major float32 tensor, rank 1..3. All kernels use a fixed
// reduction order so results are bit-identical across runs and platforms.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<size_t> dims);
    Tensor(size_t rows, size_t cols) : Tensor(std::vector<size_t>{rows, cols}) {}

    static Tensor filled(std::vector<size_t> dims, float value);

    size_t rank() const { return dims_.size(); }
    size_t dim(size_t i) const { return dims_.at(i); }
    const std::vector<size_t>& dims() const { return dims_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& operator[](size_t i) { return data_[i]; }
    float operator[](size_t i) const { return data_[i]; }

    float& at(size_t i, size_t j) { return data_[i * dims_[1] + j]; }
    float at(size_t i, size_t j) const { return data_[i * dims_[1] + j]; }
    float& at(size_t i, size_t j, size_t k) { return data_[(i * dims_[1] + j) * dims_[2] + k]; }
    float at(size_t i, size_t j, size_t k) const { return data_[(i * dims_[1] + j) * dims_[2] + k]; }

    float* row(size_t i) { return data_.data() + i * dims_[1]; }
    const float* row(size_t i) const { return data_.data() + i * dims_[1]; }

    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }
    bool all_finite() const;
    bool bitwise_equal(const Tensor& other) const;

private:
    std::vector<size_t> dims_;
    std::vector<float> data_;
};

// SplitMix64. Identical seed yields an identical stream everywhere.
struct Prng {
    uint64_t state = 0;
    explicit Prng(uint64_t seed) : state(seed) {}
    uint64_t next();
    // in (0,1): ((next() >> 11) + 0.5) * 2^-53
    double next_uniform();
};

// c[i][j] = sum_p a[i][p] * b[p][j], float accumulation in ascending p order.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax with max subtraction; rows sum to 1 within 1e-6.
Tensor softmax_rows(const Tensor& a);

// Per-row standardization (eps = 1e-5) followed by elementwise gain/bias.
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias);

// Standard normals via Box-Muller on consecutive uniform pairs; a spare
// draw from an odd-sized request is discarded, never carried over.
Tensor randn(Prng& prng, std::vector<size_t> dims);

// File format, little-endian: magic "CTED", u32 version=1, u32 rank,
// rank x u64 dims, then product(dims) IEEE-754 binary32 values row-major.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64(const std::string& s);

uint64_t tensor_hash(const Tensor& t);

}  // namespace cted
