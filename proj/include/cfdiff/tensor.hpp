#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cfdiff/error.hpp"

namespace cfdiff {

// Dense row-major tensor with value semantics. Images use shape {C, H, W};
// matrices use {rows, cols}.
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
    TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != count(shape))
            throw ContractError("tensor data size does not match shape");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ContractError("negative tensor dimension");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }
    static TensorT full(std::vector<int> s, T v) {
        TensorT t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    T at(int64_t i) const { return data[static_cast<size_t>(i)]; }
};

using Tensor = TensorT<float>;

// Multi-modality image, C x H x W.
using ImageGrid = Tensor;

inline int image_channels(const Tensor& t) { return t.shape.size() == 3 ? t.shape[0] : 0; }
inline int image_height(const Tensor& t) { return t.shape.size() == 3 ? t.shape[1] : 0; }
inline int image_width(const Tensor& t) { return t.shape.size() == 3 ? t.shape[2] : 0; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw ContractError(std::string("shape mismatch in ") + what);
}

// Binary H x W map with 0/1 values.
struct BinaryMask {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> v;

    BinaryMask() = default;
    BinaryMask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    int64_t area() const {
        int64_t n = 0;
        for (uint8_t b : v) n += (b != 0);
        return n;
    }
    bool empty_mask() const { return area() == 0; }
    bool same_shape(const BinaryMask& o) const { return h == o.h && w == o.w; }
};

}  // namespace cfdiff
