#pragma once

#include <string>

#include "nexvitad/tensor.hpp"

namespace nexvitad {

// NXT1 tensor file: magic "NXT1", u8 rank, rank x u32 little-endian dims,
// row-major 32-bit little-endian floats.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

} // namespace nexvitad
