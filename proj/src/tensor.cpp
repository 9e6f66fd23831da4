#include "cted/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

static_assert(std::endian::native == std::endian::little, "CTED tensor I/O assumes a little-endian host");
static_assert(sizeof(float) == 4);

namespace cted {

namespace {

constexpr size_t kMaxRank = 3;
constexpr uint64_t kMaxElements = uint64_t(1) << 28;

size_t checked_total(const std::vector<size_t>& dims) {
    if (dims.empty() || dims.size() > kMaxRank) {
        throw ShapeError("tensor rank must be 1..3, got " + std::to_string(dims.size()));
    }
    uint64_t total = 1;
    for (size_t d : dims) {
        if (d == 0) throw ShapeError("tensor dims must be positive");
        total *= uint64_t(d);
        if (total > kMaxElements) throw ShapeError("tensor too large");
    }
    return size_t(total);
}

}  // namespace

Tensor::Tensor(std::vector<size_t> dims) {
    size_t total = checked_total(dims);
    dims_ = std::move(dims);
    data_.assign(total, 0.0f);
}

Tensor Tensor::filled(std::vector<size_t> dims, float value) {
    Tensor t(std::move(dims));
    for (float& x : t.data_) x = value;
    return t;
}

bool Tensor::all_finite() const {
    for (float x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
    if (dims_ != other.dims_) return false;
    return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

uint64_t Prng::next() {
    state += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Prng::next_uniform() {
    return (double((next() >> 11)) + 0.5) * 0x1p-53;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul inner dims disagree: " + std::to_string(a.dim(1)) + " vs " +
                         std::to_string(b.dim(0)));
    }
    const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c(m, n);
    for (size_t i = 0; i < m; ++i) {
        float* ci = c.row(i);
        const float* ai = a.row(i);
        for (size_t p = 0; p < k; ++p) {
            const float aip = ai[p];
            const float* bp = b.row(p);
            for (size_t j = 0; j < n; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
    return c;
}

Tensor softmax_rows(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("softmax_rows expects a rank-2 tensor");
    const size_t m = a.dim(0), n = a.dim(1);
    Tensor out(m, n);
    for (size_t i = 0; i < m; ++i) {
        const float* x = a.row(i);
        float* y = out.row(i);
        float mx = x[0];
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        float sum = 0.0f;
        for (size_t j = 0; j < n; ++j) {
            y[j] = float(std::exp(double(x[j]) - double(mx)));
            sum += y[j];
        }
        for (size_t j = 0; j < n; ++j) y[j] /= sum;
    }
    return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
    if (a.rank() != 2) throw ShapeError("layer_norm expects a rank-2 tensor");
    const size_t m = a.dim(0), n = a.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n) {
        throw ShapeError("layer_norm gain/bias must be rank-1 of width " + std::to_string(n));
    }
    constexpr float kEps = 1e-5f;
    Tensor out(m, n);
    for (size_t i = 0; i < m; ++i) {
        const float* x = a.row(i);
        float* y = out.row(i);
        float mean = 0.0f;
        for (size_t j = 0; j < n; ++j) mean += x[j];
        mean /= float(n);
        float var = 0.0f;
        for (size_t j = 0; j < n; ++j) {
            const float d = x[j] - mean;
            var += d * d;
        }
        var /= float(n);
        const float inv = 1.0f / std::sqrt(var + kEps);
        for (size_t j = 0; j < n; ++j) {
            y[j] = (x[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    return out;
}

Tensor randn(Prng& prng, std::vector<size_t> dims) {
    Tensor out(std::move(dims));
    const size_t n = out.size();
    float* y = out.data();
    for (size_t i = 0; i < n; i += 2) {
        const double u1 = prng.next_uniform();
        const double u2 = prng.next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        y[i] = float(r * std::cos(a));
        if (i + 1 < n) y[i + 1] = float(r * std::sin(a));
    }
    return out;
}

namespace {

constexpr char kMagic[4] = {'C', 'T', 'E', 'D'};
constexpr uint32_t kVersion = 1;

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    if (t.empty()) throw IoError("cannot save an empty tensor");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path.string());
    f.write(kMagic, 4);
    uint32_t version = kVersion;
    uint32_t rank = uint32_t(t.rank());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (size_t i = 0; i < t.rank(); ++i) {
        uint64_t d = t.dim(i);
        f.write(reinterpret_cast<const char*>(&d), 8);
    }
    f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(float)));
    if (!f) throw IoError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    char magic[4];
    if (!f.read(magic, 4)) throw IoError("truncated file (no magic): " + path.string());
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad magic: " + path.string());
    uint32_t version = 0, rank = 0;
    if (!f.read(reinterpret_cast<char*>(&version), 4)) throw IoError("truncated file (no version): " + path.string());
    if (version != kVersion) throw IoError("unsupported version " + std::to_string(version));
    if (!f.read(reinterpret_cast<char*>(&rank), 4)) throw IoError("truncated file (no rank): " + path.string());
    if (rank < 1 || rank > kMaxRank) throw IoError("bad rank " + std::to_string(rank));
    std::vector<size_t> dims(rank);
    uint64_t total = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        uint64_t d = 0;
        if (!f.read(reinterpret_cast<char*>(&d), 8)) throw IoError("truncated file (dims): " + path.string());
        if (d == 0) throw IoError("zero dim in file: " + path.string());
        total *= d;
        if (d > kMaxElements || total > kMaxElements) throw IoError("dim overflow in file: " + path.string());
        dims[i] = size_t(d);
    }
    Tensor t(dims);
    if (!f.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(float)))) {
        throw IoError("truncated file (data): " + path.string());
    }
    char extra;
    if (f.read(&extra, 1)) throw IoError("trailing bytes: " + path.string());
    return t;
}

uint64_t fnv1a64(const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

uint64_t tensor_hash(const Tensor& t) {
    uint64_t h = fnv1a64(t.data(), t.size() * sizeof(float));
    for (size_t i = 0; i < t.rank(); ++i) {
        uint64_t d = t.dim(i);
        h ^= fnv1a64(&d, sizeof(d));
    }
    return h;
}

}  // namespace cted
