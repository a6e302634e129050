#include "nexvitad/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace nexvitad {

namespace {

std::uint32_t crc_table_entry(std::uint32_t n) {
    std::uint32_t c = n;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320U ^ (c >> 1) : c >> 1;
    return c;
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t crc = 0xffffffffU) {
    static std::uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (std::uint32_t n = 0; n < 256; ++n) table[n] = crc_table_entry(n);
        init = true;
    }
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return crc;
}

std::uint32_t adler32(const std::uint8_t* data, std::size_t len) {
    std::uint32_t a = 1, b = 0;
    for (std::size_t i = 0; i < len; ++i) {
        a = (a + data[i]) % 65521;
        b = (b + a) % 65521;
    }
    return (b << 16) | a;
}

void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

std::uint32_t get_u32be(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& payload) {
    put_u32be(out, static_cast<std::uint32_t>(payload.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    put_u32be(out, crc32(body.data(), body.size()) ^ 0xffffffffU);
}

std::vector<std::uint8_t> zlib_stored(const std::vector<std::uint8_t>& raw) {
    std::vector<std::uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    std::size_t off = 0;
    do {
        const std::size_t n = std::min<std::size_t>(raw.size() - off, 65535);
        const bool final_block = (off + n == raw.size());
        z.push_back(final_block ? 1 : 0); // BTYPE=00 stored
        z.push_back(static_cast<std::uint8_t>(n & 0xff));
        z.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
        z.push_back(static_cast<std::uint8_t>(~n & 0xff));
        z.push_back(static_cast<std::uint8_t>((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(off), raw.begin() + static_cast<std::ptrdiff_t>(off + n));
        off += n;
    } while (off < raw.size());
    const std::uint32_t ad = adler32(raw.data(), raw.size());
    put_u32be(z, ad);
    return z;
}

std::vector<std::uint8_t> zlib_unstored(const std::uint8_t* z, std::size_t len, const std::string& path) {
    if (len < 6) throw_data("truncated zlib stream in " + path);
    if ((z[0] & 0x0f) != 8) throw_data("unsupported zlib method in " + path);
    std::size_t off = 2;
    std::vector<std::uint8_t> raw;
    while (true) {
        if (off >= len) throw_data("truncated deflate stream in " + path);
        const std::uint8_t header = z[off++];
        if ((header >> 1) != 0) {
            throw_data("compressed PNG not supported by this reader (stored blocks only): " + path);
        }
        if (off + 4 > len) throw_data("truncated stored block in " + path);
        const std::size_t n = static_cast<std::size_t>(z[off]) | (static_cast<std::size_t>(z[off + 1]) << 8);
        off += 4;
        if (off + n > len) throw_data("truncated stored block payload in " + path);
        raw.insert(raw.end(), z + off, z + off + n);
        off += n;
        if (header & 1) break;
    }
    return raw;
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace

void write_png(const std::string& path, int h, int w, int channels, const std::vector<std::uint8_t>& pixels) {
    if (channels != 1 && channels != 3) throw_config("write_png supports 1 or 3 channels");
    if (pixels.size() != static_cast<std::size_t>(h) * w * channels) {
        throw_shape("write_png pixel buffer size mismatch for " + path);
    }
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(h) * (static_cast<std::size_t>(w) * channels + 1));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0); // filter: none
        const std::uint8_t* row = pixels.data() + static_cast<std::size_t>(y) * w * channels;
        raw.insert(raw.end(), row, row + static_cast<std::size_t>(w) * channels);
    }
    std::vector<std::uint8_t> out;
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.insert(out.end(), sig, sig + 8);
    std::vector<std::uint8_t> ihdr;
    put_u32be(ihdr, static_cast<std::uint32_t>(w));
    put_u32be(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);              // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", zlib_stored(raw));
    append_chunk(out, "IEND", {});
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw_data("cannot open for writing: " + path);
    os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!os) throw_data("write failed: " + path);
}

PngImage read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw_data("cannot open: " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0) throw_data("not a PNG file: " + path);
    PngImage img;
    std::vector<std::uint8_t> idat;
    std::size_t off = 8;
    bool seen_ihdr = false;
    while (off + 8 <= buf.size()) {
        const std::uint32_t len = get_u32be(buf.data() + off);
        if (off + 12 + len > buf.size()) throw_data("truncated PNG chunk in " + path);
        const char* type = reinterpret_cast<const char*>(buf.data() + off + 4);
        const std::uint8_t* payload = buf.data() + off + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.w = static_cast<int>(get_u32be(payload));
            img.h = static_cast<int>(get_u32be(payload + 4));
            const int depth = payload[8];
            const int color = payload[9];
            if (depth != 8 || (color != 0 && color != 2) || payload[12] != 0) {
                throw_data("unsupported PNG format (need 8-bit gray/RGB, no interlace): " + path);
            }
            img.channels = color == 0 ? 1 : 3;
            seen_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        off += 12 + len;
    }
    if (!seen_ihdr || img.w <= 0 || img.h <= 0) throw_data("missing IHDR in " + path);
    const std::vector<std::uint8_t> raw = zlib_unstored(idat.data(), idat.size(), path);
    const std::size_t stride = static_cast<std::size_t>(img.w) * img.channels;
    if (raw.size() != static_cast<std::size_t>(img.h) * (stride + 1)) throw_data("PNG scanline size mismatch: " + path);
    img.pixels.assign(static_cast<std::size_t>(img.h) * stride, 0);
    const int bpp = img.channels;
    for (int y = 0; y < img.h; ++y) {
        const std::uint8_t filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
        const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
        std::uint8_t* dst = img.pixels.data() + static_cast<std::size_t>(y) * stride;
        const std::uint8_t* up = y > 0 ? img.pixels.data() + static_cast<std::size_t>(y - 1) * stride : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int left = i >= static_cast<std::size_t>(bpp) ? dst[i - bpp] : 0;
            const int above = up ? up[i] : 0;
            const int corner = (up && i >= static_cast<std::size_t>(bpp)) ? up[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += above; break;
                case 3: v += (left + above) / 2; break;
                case 4: v += paeth(left, above, corner); break;
                default: throw_data("bad PNG filter type in " + path);
            }
            dst[i] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return img;
}

void save_image_png(const Tensor& image, const std::string& path) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw_shape("save_image_png expects (h,w,3), got " + dims_to_string(image.dims));
    }
    std::vector<std::uint8_t> px(image.size());
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        const real v = std::clamp(image.data[i], static_cast<real>(0.0), static_cast<real>(1.0));
        px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    write_png(path, image.dim(0), image.dim(1), 3, px);
}

Tensor load_image_png(const std::string& path) {
    PngImage img = read_png(path);
    if (img.channels != 3) throw_data("expected RGB image: " + path);
    Tensor t({img.h, img.w, 3});
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = img.pixels[i] / 255.0;
    return t;
}

void save_mask_png(const Tensor& mask, const std::string& path) {
    if (mask.rank() != 2) throw_shape("save_mask_png expects (h,w), got " + dims_to_string(mask.dims));
    std::vector<std::uint8_t> px(mask.size());
    for (std::size_t i = 0; i < mask.data.size(); ++i) px[i] = mask.data[i] > 0.5 ? 255 : 0;
    write_png(path, mask.dim(0), mask.dim(1), 1, px);
}

Tensor load_mask_png(const std::string& path) {
    PngImage img = read_png(path);
    if (img.channels != 1) throw_data("expected grayscale mask: " + path);
    Tensor t({img.h, img.w});
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = img.pixels[i] > 127 ? 1.0 : 0.0;
    return t;
}

void save_heatmap_png(const Tensor& scores, const std::string& path) {
    if (scores.rank() != 2) throw_shape("save_heatmap_png expects (h,w), got " + dims_to_string(scores.dims));
    real lo = scores.data[0], hi = scores.data[0];
    for (real v : scores.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const real range = hi - lo;
    std::vector<std::uint8_t> px(scores.size() * 3);
    for (std::size_t i = 0; i < scores.data.size(); ++i) {
        const real t = range > 1e-12 ? (scores.data[i] - lo) / range : 0.0;
        // jet-style ramp: blue -> cyan -> yellow -> red
        const real r = std::clamp(std::min(4.0 * t - 1.5, -4.0 * t + 4.5), 0.0, 1.0);
        const real g = std::clamp(std::min(4.0 * t - 0.5, -4.0 * t + 3.5), 0.0, 1.0);
        const real b = std::clamp(std::min(4.0 * t + 0.5, -4.0 * t + 2.5), 0.0, 1.0);
        px[3 * i + 0] = static_cast<std::uint8_t>(std::lround(r * 255.0));
        px[3 * i + 1] = static_cast<std::uint8_t>(std::lround(g * 255.0));
        px[3 * i + 2] = static_cast<std::uint8_t>(std::lround(b * 255.0));
    }
    write_png(path, scores.dim(0), scores.dim(1), 3, px);
}

} // namespace nexvitad
