#include "nexvitad/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "nexvitad/ops.hpp"

namespace nexvitad {

namespace {

// shift a value away from its current half of [0,1]; the result always
// differs from v by at least min(delta, distance to the clamp bound)
real shift_pixel(real v, real delta) {
    const real out = v > 0.5 ? v - delta : v + delta;
    return std::clamp(out, static_cast<real>(0.0), static_cast<real>(1.0));
}

void paint_pattern(int class_id, Tensor& field, Rng& rng) {
    const int h = field.dim(0);
    const int w = field.dim(1);
    const real size = static_cast<real>(std::max(h, w));
    switch (class_id) {
        case 0: { // stripes
            const real theta = rng.uniform(-0.35, 0.35);
            const real lambda = rng.uniform(6.0, 10.0) * size / 64.0;
            const real phase = rng.uniform(0.0, 2.0 * M_PI);
            const real ux = std::cos(theta), uy = std::sin(theta);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    field.at(y, x) = 0.5 + 0.5 * std::sin(2.0 * M_PI * (ux * x + uy * y) / lambda + phase);
            break;
        }
        case 1: { // checker
            const int cell = rng.uniform_int(6, 9) * std::max(1, static_cast<int>(size) / 64);
            const int ox = rng.uniform_int(0, cell - 1);
            const int oy = rng.uniform_int(0, cell - 1);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    field.at(y, x) = (((x + ox) / cell + (y + oy) / cell) % 2 == 0) ? 0.15 : 0.85;
            break;
        }
        case 2: { // blob noise
            Tensor n1 = value_noise(h, w, 5, rng);
            Tensor n2 = value_noise(h, w, 11, rng);
            for (std::size_t i = 0; i < field.data.size(); ++i) {
                const real v = 0.65 * n1.data[i] + 0.35 * n2.data[i];
                field.data[i] = std::clamp((v - 0.38) / 0.24, 0.0, 1.0);
            }
            break;
        }
        case 3: { // wood rings
            const real cx = rng.uniform(0.2, 0.8) * w;
            const real cy = rng.uniform(0.2, 0.8) * h;
            const real lambda = rng.uniform(5.0, 8.0) * size / 64.0;
            Tensor wobble = value_noise(h, w, 4, rng);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const real r = std::hypot(x - cx, y - cy);
                    field.at(y, x) =
                        0.5 + 0.5 * std::sin(2.0 * M_PI * r / lambda + 3.0 * wobble.at(y, x));
                }
            break;
        }
        case 4: { // polka dots
            const real period = rng.uniform(8.0, 12.0) * size / 64.0;
            const real radius = rng.uniform(2.2, 3.6) * size / 64.0;
            const real jx = rng.uniform(0.0, period);
            const real jy = rng.uniform(0.0, period);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const real gx = std::fmod(x + jx, period) - period / 2;
                    const real gy = std::fmod(y + jy, period) - period / 2;
                    const real d = std::hypot(gx, gy);
                    field.at(y, x) = std::clamp((radius - d) / 1.5 + 0.5, 0.0, 1.0);
                }
            break;
        }
        case 5: { // weave
            const real period = rng.uniform(5.0, 8.0) * size / 64.0;
            const real phase = rng.uniform(0.0, 2.0 * M_PI);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    field.at(y, x) = std::abs(std::sin(2.0 * M_PI * x / period + phase) *
                                              std::sin(2.0 * M_PI * y / period + phase));
            break;
        }
        case 6: { // radial rings with angular modulation
            const real cx = rng.uniform(0.3, 0.7) * w;
            const real cy = rng.uniform(0.3, 0.7) * h;
            const real lambda = rng.uniform(6.0, 9.0) * size / 64.0;
            const real phi = rng.uniform(0.0, 2.0 * M_PI);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const real r = std::hypot(x - cx, y - cy);
                    const real a = std::atan2(y - cy, x - cx);
                    field.at(y, x) = 0.5 + 0.5 * std::sin(2.0 * M_PI * r / lambda) * std::cos(4.0 * a + phi);
                }
            break;
        }
        case 7: { // voronoi cells
            const int n = rng.uniform_int(10, 16);
            std::vector<real> px(static_cast<std::size_t>(n)), py(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                px[static_cast<std::size_t>(i)] = rng.uniform(0.0, static_cast<real>(w));
                py[static_cast<std::size_t>(i)] = rng.uniform(0.0, static_cast<real>(h));
            }
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    real best = 1e30, second = 1e30;
                    for (int i = 0; i < n; ++i) {
                        const real d = std::hypot(x - px[static_cast<std::size_t>(i)], y - py[static_cast<std::size_t>(i)]);
                        if (d < best) {
                            second = best;
                            best = d;
                        } else if (d < second) {
                            second = d;
                        }
                    }
                    field.at(y, x) = std::clamp((second - best) / (0.25 * size), 0.0, 1.0);
                }
            break;
        }
        case 8: { // marble
            const real lambda = rng.uniform(10.0, 16.0) * size / 64.0;
            Tensor turb = value_noise(h, w, 6, rng);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    field.at(y, x) = 0.5 + 0.5 * std::sin(2.0 * M_PI * x / lambda + 4.0 * turb.at(y, x));
            break;
        }
        case 9: { // grid lines
            const int period = rng.uniform_int(7, 10) * std::max(1, static_cast<int>(size) / 64);
            const int ox = rng.uniform_int(0, period - 1);
            const int oy = rng.uniform_int(0, period - 1);
            const int lw = rng.uniform_int(1, 2);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const bool on_line = ((x + ox) % period) < lw || ((y + oy) % period) < lw;
                    field.at(y, x) = on_line ? 1.0 : 0.1;
                }
            break;
        }
        case 10: { // smooth gradient with speckle
            Tensor base = value_noise(h, w, 3, rng);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    real v = base.at(y, x) * 0.7 + 0.15;
                    if (rng.uniform() < 0.06) v = v > 0.5 ? v - 0.45 : v + 0.45;
                    field.at(y, x) = std::clamp(v, 0.0, 1.0);
                }
            break;
        }
        case 11: { // triaxial interference (honeycomb-like)
            const real lambda = rng.uniform(6.0, 9.0) * size / 64.0;
            const real phase = rng.uniform(0.0, 2.0 * M_PI);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    real acc = 0.0;
                    for (int j = 0; j < 3; ++j) {
                        const real th = phase * 0.1 + j * M_PI / 3.0;
                        acc += std::sin(2.0 * M_PI * (x * std::cos(th) + y * std::sin(th)) / lambda + phase);
                    }
                    field.at(y, x) = std::clamp(0.5 + acc / 3.0, 0.0, 1.0);
                }
            break;
        }
        default:
            throw_config("unknown texture class id " + std::to_string(class_id));
    }
}

// normal decorative micro-structures: every class carries a few of these at
// random positions, so the normal patch distribution has many modes and a
// small prototype budget genuinely underfits it
void sprinkle_motifs(Tensor& field, int size, Rng& rng) {
    const int count = rng.uniform_int(2, 4);
    const real unit = size / 64.0;
    for (int m = 0; m < count; ++m) {
        const int kind = rng.uniform_int(0, 2);
        const real cx = rng.uniform(8.0, size - 8.0);
        const real cy = rng.uniform(8.0, size - 8.0);
        const real level = rng.uniform() < 0.5 ? 0.0 : 1.0;
        if (kind == 0) { // ring
            const real radius = rng.uniform(4.0, 6.0) * unit;
            const real thick = rng.uniform(1.2, 2.0) * unit;
            const int lo_y = std::max(0, (int)(cy - radius - thick)), hi_y = std::min(size - 1, (int)(cy + radius + thick));
            const int lo_x = std::max(0, (int)(cx - radius - thick)), hi_x = std::min(size - 1, (int)(cx + radius + thick));
            for (int y = lo_y; y <= hi_y; ++y)
                for (int x = lo_x; x <= hi_x; ++x) {
                    if (std::abs(std::hypot(x - cx, y - cy) - radius) <= thick / 2) field.at(y, x) = level;
                }
        } else if (kind == 1) { // bar
            const real len = rng.uniform(8.0, 14.0) * unit;
            const real wid = rng.uniform(2.0, 3.0) * unit;
            const real th = rng.uniform(0.0, M_PI);
            const real ux = std::cos(th), uy = std::sin(th);
            const int reach = (int)(len / 2 + wid) + 1;
            for (int y = std::max(0, (int)cy - reach); y <= std::min(size - 1, (int)cy + reach); ++y)
                for (int x = std::max(0, (int)cx - reach); x <= std::min(size - 1, (int)cx + reach); ++x) {
                    const real along = (x - cx) * ux + (y - cy) * uy;
                    const real across = -(x - cx) * uy + (y - cy) * ux;
                    if (std::abs(along) <= len / 2 && std::abs(across) <= wid / 2) field.at(y, x) = level;
                }
        } else { // dot cluster
            const int dots = rng.uniform_int(3, 5);
            for (int d = 0; d < dots; ++d) {
                const real dx = cx + rng.uniform(-5.0, 5.0) * unit;
                const real dy = cy + rng.uniform(-5.0, 5.0) * unit;
                const real r = rng.uniform(1.2, 2.0) * unit;
                for (int y = std::max(0, (int)(dy - r)); y <= std::min(size - 1, (int)(dy + r)); ++y)
                    for (int x = std::max(0, (int)(dx - r)); x <= std::min(size - 1, (int)(dx + r)); ++x) {
                        if (std::hypot(x - dx, y - dy) <= r) field.at(y, x) = level;
                    }
            }
        }
    }
}

// smooth random domain distortion: every patch of every image differs a
// little, so normal patches form a continuous manifold rather than a few
// discrete modes
Tensor warp_field(const Tensor& field, int size, Rng& rng) {
    const real amp = rng.uniform(2.5, 5.0) * size / 64.0;
    Tensor wx = value_noise(size, size, 4, rng);
    Tensor wy = value_noise(size, size, 4, rng);
    Tensor out({size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const real sx = std::clamp(x + amp * (2.0 * wx.at(y, x) - 1.0), 0.0, size - 1.0);
            const real sy = std::clamp(y + amp * (2.0 * wy.at(y, x) - 1.0), 0.0, size - 1.0);
            const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
            const int x1 = std::min(x0 + 1, size - 1), y1 = std::min(y0 + 1, size - 1);
            const real fx = sx - x0, fy = sy - y0;
            out.at(y, x) = field.at(y0, x0) * (1 - fy) * (1 - fx) + field.at(y0, x1) * (1 - fy) * fx +
                           field.at(y1, x0) * fy * (1 - fx) + field.at(y1, x1) * fy * fx;
        }
    return out;
}

Tensor render_class_image(int class_id, int size, Rng& rng) {
    Tensor field({size, size});
    paint_pattern(class_id, field, rng);
    field = warp_field(field, size, rng);
    // anchor the pattern coverage so the class's mean statistics stay tight
    // across draws
    static constexpr real kFieldAnchor[kNumTextureClasses] = {0.5, 0.5, 0.5,  0.5, 0.25, 0.4,
                                                              0.5, 0.45, 0.5, 0.3, 0.45, 0.5};
    real field_mean = 0.0;
    for (real v : field.data) field_mean += v;
    field_mean /= static_cast<real>(field.size());
    const real shift = kFieldAnchor[class_id] - field_mean;
    for (auto& v : field.data) v = std::clamp(v + shift, 0.0, 1.0);
    sprinkle_motifs(field, size, rng);
    // permuted hue wheel: classes adjacent in value share no nearby hue
    const real hue = static_cast<real>((class_id * 7) % kNumTextureClasses) / kNumTextureClasses;
    const real val_bg = 0.35 + 0.20 * (class_id % 3);
    real bg[3], fg[3];
    hsv_to_rgb(hue, 0.62, val_bg, bg);
    hsv_to_rgb(std::fmod(hue + 0.1, 1.0), 0.7, std::min(val_bg + 0.25, 1.0), fg);
    for (int c = 0; c < 3; ++c) {
        bg[c] = std::clamp(bg[c] + rng.normal(0.0, 0.015), 0.0, 1.0);
        fg[c] = std::clamp(fg[c] + rng.normal(0.0, 0.015), 0.0, 1.0);
    }
    // smooth multiplicative shading: a wide, continuous family of normal
    // looks per class with no sharp internal boundaries. A small prototype
    // budget covers it coarsely; a larger one keeps normal scores tight.
    Tensor shade = value_noise(size, size, 3, rng);
    Tensor image({size, size, 3});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const real s = field.at(y, x);
            const real sh = 0.55 + 0.90 * shade.at(y, x);
            for (int c = 0; c < 3; ++c) {
                const real v = (bg[c] * (1.0 - s) + fg[c] * s) * sh + rng.uniform(-0.01, 0.01);
                image.at(y, x, c) = std::clamp(v, 0.0, 1.0);
            }
        }
    return image;
}

} // namespace

void hsv_to_rgb(real h, real s, real v, real rgb[3]) {
    const real hh = std::fmod(h, 1.0) * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const real f = hh - std::floor(hh);
    const real p = v * (1.0 - s);
    const real q = v * (1.0 - s * f);
    const real t = v * (1.0 - s * (1.0 - f));
    switch (sector) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
}

Tensor value_noise(int h, int w, int cells, Rng& rng) {
    Tensor grid({cells + 1, cells + 1});
    for (auto& v : grid.data) v = rng.uniform();
    return bilinear_resize(grid, h, w);
}

void inject_scratch(Tensor& image, Tensor& mask, real x0, real y0, real x1, real y1, real width, real delta) {
    const int h = image.dim(0), w = image.dim(1);
    const real len = std::hypot(x1 - x0, y1 - y0);
    const int steps = std::max(2, static_cast<int>(std::ceil(len * 2.0)));
    const real r = width / 2.0;
    for (int s = 0; s <= steps; ++s) {
        const real t = static_cast<real>(s) / steps;
        const real cx = x0 + t * (x1 - x0);
        const real cy = y0 + t * (y1 - y0);
        const int ylo = std::max(0, static_cast<int>(std::floor(cy - r)));
        const int yhi = std::min(h - 1, static_cast<int>(std::ceil(cy + r)));
        const int xlo = std::max(0, static_cast<int>(std::floor(cx - r)));
        const int xhi = std::min(w - 1, static_cast<int>(std::ceil(cx + r)));
        for (int y = ylo; y <= yhi; ++y)
            for (int x = xlo; x <= xhi; ++x) {
                if (std::hypot(x - cx, y - cy) > r) continue;
                if (mask.at(y, x) > 0.5) continue;
                mask.at(y, x) = 1.0;
                for (int c = 0; c < 3; ++c) image.at(y, x, c) = shift_pixel(image.at(y, x, c), delta);
            }
    }
}

void inject_blob(Tensor& image, Tensor& mask, real cx, real cy, real radius, real delta) {
    const int h = image.dim(0), w = image.dim(1);
    const int ylo = std::max(0, static_cast<int>(std::floor(cy - radius)));
    const int yhi = std::min(h - 1, static_cast<int>(std::ceil(cy + radius)));
    const int xlo = std::max(0, static_cast<int>(std::floor(cx - radius)));
    const int xhi = std::min(w - 1, static_cast<int>(std::ceil(cx + radius)));
    for (int y = ylo; y <= yhi; ++y)
        for (int x = xlo; x <= xhi; ++x) {
            if (std::hypot(x - cx, y - cy) > radius) continue;
            mask.at(y, x) = 1.0;
            for (int c = 0; c < 3; ++c) image.at(y, x, c) = shift_pixel(image.at(y, x, c), delta);
        }
}

void inject_patch_swap(Tensor& image, Tensor& mask, int sx, int sy, int dx, int dy, int pw, int ph) {
    Tensor patch({ph, pw, 3});
    for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x)
            for (int c = 0; c < 3; ++c) patch.at(y, x, c) = image.at(sy + y, sx + x, c);
    for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
            mask.at(dy + y, dx + x) = 1.0;
            for (int c = 0; c < 3; ++c) {
                const real old = image.at(dy + y, dx + x, c);
                // transplanted texture gets a photometric shift so the patch
                // interior is anomalous too, not just its seams
                real v = shift_pixel(patch.at(y, x, c), 0.18);
                if (std::abs(v - old) < 0.02) v = shift_pixel(old, 0.25);
                image.at(dy + y, dx + x, c) = v;
            }
        }
}

ImageSample inject_defect(const ImageSample& sample, DefectKind kind, std::uint64_t seed) {
    if (sample.is_defective) throw_contract("inject_defect on an already defective sample");
    ImageSample out = sample;
    out.is_defective = true;
    Rng rng(seed);
    const int h = out.image.dim(0), w = out.image.dim(1);
    const real scale = static_cast<real>(std::max(h, w)) / 64.0;
    switch (kind) {
        case DefectKind::Scratch: {
            const real width = rng.uniform(6.0, 8.0) * scale;
            const real len = rng.uniform(0.35, 0.6) * std::max(h, w);
            const real cx = rng.uniform(0.25, 0.75) * w;
            const real cy = rng.uniform(0.25, 0.75) * h;
            const real th = rng.uniform(0.0, M_PI);
            const real delta = rng.uniform(0.35, 0.5);
            inject_scratch(out.image, out.mask, cx - 0.5 * len * std::cos(th), cy - 0.5 * len * std::sin(th),
                           cx + 0.5 * len * std::cos(th), cy + 0.5 * len * std::sin(th), width, delta);
            break;
        }
        case DefectKind::Blob: {
            const real radius = rng.uniform(8.0, 11.0) * scale;
            const real cx = rng.uniform(radius + 1, w - radius - 1);
            const real cy = rng.uniform(radius + 1, h - radius - 1);
            const real delta = rng.uniform(0.35, 0.5);
            inject_blob(out.image, out.mask, cx, cy, radius, delta);
            break;
        }
        case DefectKind::PatchSwap: {
            const int pw = rng.uniform_int(static_cast<int>(17 * scale), static_cast<int>(20 * scale));
            const int ph = rng.uniform_int(static_cast<int>(17 * scale), static_cast<int>(20 * scale));
            const int sx = rng.uniform_int(0, w - pw - 1);
            const int sy = rng.uniform_int(0, h - ph - 1);
            int dx = rng.uniform_int(0, w - pw - 1);
            int dy = rng.uniform_int(0, h - ph - 1);
            // keep source and destination apart
            for (int tries = 0; tries < 16 && std::abs(dx - sx) + std::abs(dy - sy) < pw; ++tries) {
                dx = rng.uniform_int(0, w - pw - 1);
                dy = rng.uniform_int(0, h - ph - 1);
            }
            inject_patch_swap(out.image, out.mask, sx, sy, dx, dy, pw, ph);
            break;
        }
    }
    // defect area contract: between 0.5% and 10% of the image
    std::size_t area = 0;
    for (real v : out.mask.data) area += v > 0.5 ? 1 : 0;
    const std::size_t lo = static_cast<std::size_t>(0.005 * h * w);
    const std::size_t hi = static_cast<std::size_t>(0.10 * h * w);
    if (area < lo || area > hi) {
        // parameter ranges above keep this rare; retry with a derived seed
        return inject_defect(sample, kind, mix_seed(seed, 0x5eedu, static_cast<std::uint64_t>(kind)));
    }
    return out;
}

std::vector<ImageSample> synth_class(int class_id, std::uint64_t seed, int n_train, int n_test, int size) {
    if (class_id < 0 || class_id >= kNumTextureClasses) {
        throw_config("class_id must be in [0," + std::to_string(kNumTextureClasses) + "), got " + std::to_string(class_id));
    }
    if (size < 32) throw_config("image size must be >= 32");
    std::vector<ImageSample> samples;
    samples.reserve(static_cast<std::size_t>(n_train + n_test));
    const DefectKind kinds[3] = {DefectKind::Scratch, DefectKind::Blob, DefectKind::PatchSwap};
    for (int split_idx = 0; split_idx < 2; ++split_idx) {
        const Split split = split_idx == 0 ? Split::Train : Split::Test;
        const int count = split_idx == 0 ? n_train : n_test;
        for (int i = 0; i < count; ++i) {
            const std::uint64_t child = mix_seed(seed, static_cast<std::uint64_t>(class_id),
                                                 static_cast<std::uint64_t>(i * 2 + split_idx));
            Rng rng(child);
            ImageSample s;
            s.class_id = class_id;
            s.split = split;
            s.index = i;
            s.image = render_class_image(class_id, size, rng);
            s.mask = Tensor({size, size});
            s.is_defective = false;
            if (i % 2 == 1) {
                s = inject_defect(s, kinds[(i / 2) % 3], mix_seed(child, 0xdefec7u));
            }
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

SplitConfig random_split(int total_classes, int n_target, std::uint64_t seed) {
    if (n_target <= 0 || n_target >= total_classes) throw_config("target class count must be in (0, total)");
    std::vector<int> ids(static_cast<std::size_t>(total_classes));
    for (int i = 0; i < total_classes; ++i) ids[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(seed, 0x54117u));
    for (int i = total_classes - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i + 1)));
        std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
    }
    SplitConfig cfg;
    cfg.seed = seed;
    cfg.target_classes.assign(ids.begin(), ids.begin() + n_target);
    cfg.source_classes.assign(ids.begin() + n_target, ids.end());
    std::sort(cfg.target_classes.begin(), cfg.target_classes.end());
    std::sort(cfg.source_classes.begin(), cfg.source_classes.end());
    return cfg;
}

void validate_split(const SplitConfig& config, int total_classes) {
    std::set<int> seen;
    for (int c : config.source_classes) {
        if (!seen.insert(c).second) throw_config("duplicate class id " + std::to_string(c) + " in split");
    }
    for (int c : config.target_classes) {
        if (!seen.insert(c).second) throw_config("class id " + std::to_string(c) + " appears in both source and target");
    }
    if (static_cast<int>(seen.size()) != total_classes) {
        throw_config("split must cover all " + std::to_string(total_classes) + " classes exactly once");
    }
    for (int c : seen) {
        if (c < 0 || c >= total_classes) throw_config("class id " + std::to_string(c) + " out of range");
    }
    if (config.source_classes.empty() || config.target_classes.empty()) {
        throw_config("both source and target class sets must be nonempty");
    }
}

DatasetSplit make_split(const std::vector<ImageSample>& dataset, const SplitConfig& config, int bank_images) {
    if (bank_images <= 0) throw_config("bank_images must be positive");
    int max_class = 0;
    for (const auto& s : dataset) max_class = std::max(max_class, s.class_id);
    validate_split(config, max_class + 1);
    const std::set<int> target(config.target_classes.begin(), config.target_classes.end());
    DatasetSplit out;
    std::vector<UnlabeledSample> target_normals;
    for (const auto& s : dataset) {
        const bool is_target = target.count(s.class_id) > 0;
        if (s.split == Split::Train) {
            if (is_target) {
                if (!s.is_defective) {
                    out.target_train.push_back({s.image, s.class_id, s.index});
                    target_normals.push_back({s.image, s.class_id, s.index});
                }
            } else {
                out.source_train.push_back(s);
            }
        } else if (is_target) {
            out.target_test.push_back(s);
        }
    }
    if (static_cast<int>(target_normals.size()) < bank_images) {
        throw_data("not enough defect-free target images for the memory bank: have " +
                   std::to_string(target_normals.size()) + ", need " + std::to_string(bank_images));
    }
    Rng rng(mix_seed(config.seed, 0xba7du));
    for (std::size_t i = target_normals.size() - 1; i > 0; --i) {
        const std::size_t j = rng.next_below(i + 1);
        std::swap(target_normals[i], target_normals[j]);
    }
    out.bank_candidates.assign(target_normals.begin(), target_normals.begin() + bank_images);
    return out;
}

} // namespace nexvitad
