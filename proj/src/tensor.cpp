#include "nexvitad/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace nexvitad {

std::size_t dims_product(const std::vector<int>& dims) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
}

Tensor::Tensor(std::vector<int> d, real fill_value) : dims(std::move(d)) {
    if (dims.empty() || dims.size() > 4) throw_shape("tensor rank must be 1..4, got " + dims_to_string(dims));
    for (int e : dims) {
        if (e <= 0) throw_shape("tensor extents must be positive, got " + dims_to_string(dims));
    }
    data.assign(dims_product(dims), fill_value);
}

Tensor Tensor::from(std::vector<int> d, std::vector<real> values) {
    Tensor t;
    t.dims = std::move(d);
    if (t.dims.empty() || t.dims.size() > 4) throw_shape("tensor rank must be 1..4, got " + dims_to_string(t.dims));
    if (values.size() != dims_product(t.dims)) {
        throw_shape("value count " + std::to_string(values.size()) + " does not match dims " + dims_to_string(t.dims));
    }
    t.data = std::move(values);
    return t;
}

void Tensor::fill(real v) {
    for (auto& x : data) x = v;
}

bool Tensor::all_finite() const {
    for (real x : data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void Tensor::add_(const Tensor& o) {
    require_same_dims(*this, o, "accumulator", "addend");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
}

void Tensor::scale_(real s) {
    for (auto& x : data) x *= s;
}

std::string dims_to_string(const std::vector<int>& dims) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ",";
        os << dims[i];
    }
    os << ")";
    return os.str();
}

void require_same_dims(const Tensor& a, const Tensor& b, const char* a_name, const char* b_name) {
    if (a.dims != b.dims) {
        throw_shape(std::string(a_name) + " dims " + dims_to_string(a.dims) + " != " + b_name + " dims " +
                    dims_to_string(b.dims));
    }
}

std::uint64_t tensor_checksum(const Tensor& t) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (real v : t.data) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, sizeof(bits));
        for (int k = 0; k < 8; ++k) {
            h ^= (bits >> (8 * k)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

} // namespace nexvitad
