#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2m {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1},
                           [](std::int64_t a, int b) { return a * b; });
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Dense row-major N-d array. Scalar is float in the working pipeline and
// double when gradient checking.
template <typename S>
struct Tensor {
    Shape shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(Shape sh, S fill = S(0))
        : shape(std::move(sh)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {
        for (int e : shape) require(e > 0, "Tensor: nonpositive extent in " + shape_str(shape));
    }
    Tensor(Shape sh, std::vector<S> values) : shape(std::move(sh)), data(std::move(values)) {
        require(static_cast<std::int64_t>(data.size()) == shape_numel(shape),
                "Tensor: data size " + std::to_string(data.size()) + " != numel of " + shape_str(shape));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int extent(int axis) const { return shape[static_cast<std::size_t>(axis)]; }

    S& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const S& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // 3-d [C,H,W] accessors; the pipeline lives almost entirely in CHW.
    S& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    const S& at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Debug dump: u32 LE rank, u32 LE extents, then f32 LE row-major payload.
template <typename S>
inline void dump_tensor(const Tensor<S>& t, std::ostream& os) {
    auto put_u32 = [&os](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
    };
    put_u32(static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape) put_u32(static_cast<std::uint32_t>(e));
    for (S v : t.data) {
        float f = static_cast<float>(v);
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put_u32(u);
    }
}

template <typename S>
inline void dump_tensor(const Tensor<S>& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "dump_tensor: cannot open " + path);
    dump_tensor(t, os);
}

}  // namespace m2m
