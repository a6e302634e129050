#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "nexvitad/errors.hpp"

namespace nexvitad {

// Global precision: 64-bit everywhere (gradient checks need it; the NXT1
// file format stores 32-bit floats and converts on the way in/out).
using real = double;

// Dense row-major tensor of rank 1..4.
struct Tensor {
    std::vector<int> dims;
    std::vector<real> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> d, real fill = 0.0);
    static Tensor from(std::vector<int> d, std::vector<real> values);

    int rank() const { return static_cast<int>(dims.size()); }
    std::size_t size() const { return data.size(); }
    int dim(int i) const { return dims[static_cast<std::size_t>(i)]; }

    real& at(int i) { return data[static_cast<std::size_t>(i)]; }
    real at(int i) const { return data[static_cast<std::size_t>(i)]; }
    real& at(int i, int j) { return data[static_cast<std::size_t>(i) * dims[1] + j]; }
    real at(int i, int j) const { return data[static_cast<std::size_t>(i) * dims[1] + j]; }
    real& at(int i, int j, int k) {
        return data[(static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k];
    }
    real at(int i, int j, int k) const {
        return data[(static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k];
    }
    real& at(int i, int j, int k, int l) {
        return data[((static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k) * dims[3] + l];
    }
    real at(int i, int j, int k, int l) const {
        return data[((static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k) * dims[3] + l];
    }

    void fill(real v);
    void zero() { fill(0.0); }
    bool same_dims(const Tensor& o) const { return dims == o.dims; }
    bool all_finite() const;

    // elementwise accumulate: this += other (dims must match)
    void add_(const Tensor& o);
    void scale_(real s);
};

std::string dims_to_string(const std::vector<int>& dims);
std::size_t dims_product(const std::vector<int>& dims);

// throws ErrorKind::Shape naming both operands
void require_same_dims(const Tensor& a, const Tensor& b, const char* a_name, const char* b_name);

// Trainable parameter: value + gradient accumulator + freeze flag.
struct ParamTensor {
    Tensor value;
    Tensor grad;
    bool frozen = false;
    std::string name;

    ParamTensor() = default;
    explicit ParamTensor(Tensor v, std::string n = {}, bool froz = false)
        : value(std::move(v)), frozen(froz), name(std::move(n)) {
        grad = Tensor(value.dims);
    }

    void zero_grad() { grad.zero(); }
};

// FNV-1a over the raw value bytes; used for frozen-parameter checksums.
std::uint64_t tensor_checksum(const Tensor& t);

} // namespace nexvitad
