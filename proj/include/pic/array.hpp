#pragma once

#include <cstring>
#include <vector>

#include "pic/common.hpp"

namespace pic {

// Plain dense value container; the tape stores node payloads in this form
// and ParameterStore keeps parameters/moments/shadows as arrays.
template <class T>
struct ArrayND {
    Shape shape;
    std::vector<T> data;

    ArrayND() = default;
    explicit ArrayND(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}
    ArrayND(Shape s, T fill) : shape(std::move(s)), data(numel(shape), fill) {}
    ArrayND(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        check(data.size() == numel(shape), "ArrayND: value count does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    // NCHW accessor for rank-4 arrays
    T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
};

}  // namespace pic
