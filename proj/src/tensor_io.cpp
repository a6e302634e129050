#include "nexvitad/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace nexvitad {

namespace {

void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

} // namespace

void save_tensor(const Tensor& t, const std::string& path) {
    std::vector<unsigned char> buf;
    buf.reserve(5 + 4 * t.dims.size() + 4 * t.data.size());
    buf.push_back('N');
    buf.push_back('X');
    buf.push_back('T');
    buf.push_back('1');
    buf.push_back(static_cast<unsigned char>(t.rank()));
    for (int d : t.dims) put_u32le(buf, static_cast<std::uint32_t>(d));
    for (real v : t.data) {
        float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32le(buf, bits);
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw_data("cannot open for writing: " + path);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw_data("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw_data("cannot open: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 5 || std::memcmp(buf.data(), "NXT1", 4) != 0) throw_data("not an NXT1 file: " + path);
    const int rank = buf[4];
    if (rank < 1 || rank > 4) throw_data("bad NXT1 rank in " + path);
    std::size_t off = 5;
    if (buf.size() < off + 4 * static_cast<std::size_t>(rank)) throw_data("truncated NXT1 header: " + path);
    std::vector<int> dims(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) {
        dims[static_cast<std::size_t>(i)] = static_cast<int>(get_u32le(buf.data() + off));
        off += 4;
    }
    const std::size_t count = dims_product(dims);
    if (buf.size() != off + 4 * count) throw_data("NXT1 payload size mismatch: " + path);
    std::vector<real> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = get_u32le(buf.data() + off + 4 * i);
        float f;
        std::memcpy(&f, &bits, 4);
        values[i] = static_cast<real>(f);
    }
    return Tensor::from(std::move(dims), std::move(values));
}

} // namespace nexvitad
