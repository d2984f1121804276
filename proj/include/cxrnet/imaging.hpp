#pragma once

// 8-bit grayscale rasters: binary PGM I/O, bilinear resampling, CLAHE and the
// seeded geometric augmentation used for training.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <vector>

#include "cxrnet/error.hpp"
#include "cxrnet/rng.hpp"
#include "cxrnet/tensor.hpp"

namespace cxr {

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major

    GrayImage() = default;
    GrayImage(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {
        require(w >= 1 && h >= 1, ErrorKind::parameter, "image extents must be >= 1");
    }

    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

    bool operator==(const GrayImage&) const = default;
};

inline std::uint8_t clamp_round_u8(double v) {
    const double r = std::round(v);
    return static_cast<std::uint8_t>(r < 0 ? 0 : (r > 255 ? 255 : r));
}

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255)

namespace detail {

class PgmHeaderReader {
public:
    explicit PgmHeaderReader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const auto c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
            } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
                ++pos_;
            } else {
                break;
            }
        }
    }

    long read_uint(const char* field) {
        skip_space_and_comments();
        const std::size_t start = pos_;
        long v = 0;
        while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
            v = v * 10 + (bytes_[pos_] - '0');
            require(v < (1L << 30), ErrorKind::format,
                    std::string("PGM ") + field + " too large at byte " + std::to_string(start));
            ++pos_;
        }
        require(pos_ > start, ErrorKind::format,
                std::string("PGM expected ") + field + " at byte " + std::to_string(start));
        return v;
    }

    std::size_t pos_ = 0;

private:
    const std::vector<std::uint8_t>& bytes_;
};

}  // namespace detail

inline GrayImage load_pgm(const std::vector<std::uint8_t>& bytes) {
    require(bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5', ErrorKind::format,
            "bad PGM magic at byte 0 (expected P5)");
    detail::PgmHeaderReader r(bytes);
    r.pos_ = 2;
    const long w = r.read_uint("width");
    const long h = r.read_uint("height");
    const std::size_t maxval_at = r.pos_;
    const long maxval = r.read_uint("maxval");
    require(w >= 1 && h >= 1, ErrorKind::format, "PGM extents must be >= 1");
    require(maxval == 255, ErrorKind::format,
            "PGM maxval must be 255, got " + std::to_string(maxval) + " near byte " +
                std::to_string(maxval_at));
    require(r.pos_ < bytes.size(), ErrorKind::format,
            "PGM header not terminated at byte " + std::to_string(r.pos_));
    const std::size_t payload_at = r.pos_ + 1;  // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    require(bytes.size() - payload_at >= need, ErrorKind::format,
            "PGM payload truncated at byte " + std::to_string(bytes.size()) + ": need " +
                std::to_string(need) + " bytes from offset " + std::to_string(payload_at));
    GrayImage img(static_cast<int>(w), static_cast<int>(h));
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(payload_at), need, img.pixels.begin());
    return img;
}

inline std::vector<std::uint8_t> save_pgm(const GrayImage& img) {
    const std::string header =
        "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path);
}

inline GrayImage read_pgm_file(const std::string& path) {
    try {
        return load_pgm(read_file_bytes(path));
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::format) fail(ErrorKind::format, path + ": " + e.detail());
        throw;
    }
}

inline void write_pgm_file(const std::string& path, const GrayImage& img) {
    write_file_bytes(path, save_pgm(img));
}

// ---------------------------------------------------------------------------
// Bilinear resampling, align-corners = false.

namespace detail {

struct Tap {
    int i0, i1;
    double frac;
};

inline Tap source_tap(int dst, int in_extent, int out_extent) {
    const double scale = static_cast<double>(in_extent) / out_extent;
    double s = (dst + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_extent - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, in_extent - 1);
    return {i0, i1, s - i0};
}

}  // namespace detail

inline GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
    require(out_w >= 1 && out_h >= 1, ErrorKind::parameter, "resize target extents must be >= 1");
    GrayImage out(out_w, out_h);
    for (int y = 0; y < out_h; ++y) {
        const auto ty = detail::source_tap(y, img.height, out_h);
        for (int x = 0; x < out_w; ++x) {
            const auto tx = detail::source_tap(x, img.width, out_w);
            const double top = img.at(tx.i0, ty.i0) * (1 - tx.frac) + img.at(tx.i1, ty.i0) * tx.frac;
            const double bot = img.at(tx.i0, ty.i1) * (1 - tx.frac) + img.at(tx.i1, ty.i1) * tx.frac;
            out.at(x, y) = clamp_round_u8(top * (1 - ty.frac) + bot * ty.frac);
        }
    }
    return out;
}

// Same sampling rule on a real-valued [h, w] map.
template <typename Real>
Tensor<Real> resize_bilinear(const Tensor<Real>& map, int out_w, int out_h) {
    require(map.rank() == 2, ErrorKind::shape, "map resize expects [h, w]");
    require(out_w >= 1 && out_h >= 1, ErrorKind::parameter, "resize target extents must be >= 1");
    const int h = static_cast<int>(map.dim(0)), w = static_cast<int>(map.dim(1));
    Tensor<Real> out({out_h, out_w}, Real(0));
    for (int y = 0; y < out_h; ++y) {
        const auto ty = detail::source_tap(y, h, out_h);
        for (int x = 0; x < out_w; ++x) {
            const auto tx = detail::source_tap(x, w, out_w);
            const double top = map(ty.i0, tx.i0) * (1 - tx.frac) + map(ty.i0, tx.i1) * tx.frac;
            const double bot = map(ty.i1, tx.i0) * (1 - tx.frac) + map(ty.i1, tx.i1) * tx.frac;
            out(y, x) = static_cast<Real>(top * (1 - ty.frac) + bot * ty.frac);
        }
    }
    return out;
}

template <typename Real = real_t>
Tensor<Real> normalize(const GrayImage& img) {
    Tensor<Real> t({1, img.height, img.width}, Real(0));
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        t[i] = static_cast<Real>(img.pixels[i] / 255.0);
    return t;
}

// ---------------------------------------------------------------------------
// CLAHE

struct ClaheParams {
    int tiles_x = 8;
    int tiles_y = 8;
    double clip_limit = 2.0;  // multiple of the uniform bin height
};

using Lut = std::array<std::uint8_t, 256>;

namespace detail {

// Tile i covers [i * (extent / tiles), (i + 1) * (extent / tiles)); the last
// tile absorbs the remainder.
inline std::pair<int, int> tile_span(int i, int tiles, int extent) {
    const int step = extent / tiles;
    const int lo = i * step;
    const int hi = (i == tiles - 1) ? extent : lo + step;
    return {lo, hi};
}

inline Lut identity_lut() {
    Lut l{};
    for (int v = 0; v < 256; ++v) l[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(v);
    return l;
}

}  // namespace detail

// Maps a histogram to round(255 * cdf(v) / total) after clipping each bin at
// clip_limit * total / 256 and spreading the clipped mass evenly. A histogram
// with a single occupied level maps through the identity.
inline Lut equalization_lut(const std::array<double, 256>& raw_hist, double clip_limit) {
    double total = 0;
    int occupied = 0;
    for (double h : raw_hist) {
        total += h;
        occupied += h > 0 ? 1 : 0;
    }
    if (occupied <= 1) return detail::identity_lut();

    std::array<double, 256> hist = raw_hist;
    const double limit = clip_limit * total / 256.0;
    double excess = 0;
    for (double& h : hist) {
        if (h > limit) {
            excess += h - limit;
            h = limit;
        }
    }
    if (excess > 0)
        for (double& h : hist) h += excess / 256.0;

    Lut lut{};
    double cdf = 0;
    for (std::size_t v = 0; v < 256; ++v) {
        cdf += hist[v];
        lut[v] = clamp_round_u8(255.0 * cdf / total);
    }
    return lut;
}

// Row-major [tiles_y][tiles_x] grid of per-tile mappings.
inline std::vector<Lut> clahe_tile_luts(const GrayImage& img, const ClaheParams& p) {
    require(p.tiles_x >= 1 && p.tiles_y >= 1, ErrorKind::parameter, "CLAHE tiles must be >= 1");
    require(p.clip_limit > 1.0, ErrorKind::parameter, "CLAHE clip_limit must be > 1");
    require(p.tiles_x <= img.width && p.tiles_y <= img.height, ErrorKind::parameter,
            "CLAHE tile grid " + std::to_string(p.tiles_x) + "x" + std::to_string(p.tiles_y) +
                " larger than image " + std::to_string(img.width) + "x" + std::to_string(img.height));
    std::vector<Lut> luts;
    luts.reserve(static_cast<std::size_t>(p.tiles_x * p.tiles_y));
    for (int ty = 0; ty < p.tiles_y; ++ty) {
        const auto [y0, y1] = detail::tile_span(ty, p.tiles_y, img.height);
        for (int tx = 0; tx < p.tiles_x; ++tx) {
            const auto [x0, x1] = detail::tile_span(tx, p.tiles_x, img.width);
            std::array<double, 256> hist{};
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) hist[img.at(x, y)] += 1.0;
            luts.push_back(equalization_lut(hist, p.clip_limit));
        }
    }
    return luts;
}

inline GrayImage clahe(const GrayImage& img, const ClaheParams& p) {
    const auto luts = clahe_tile_luts(img, p);

    // Pixel -> (lower tile, upper tile, weight of upper) along one axis, using
    // tile centers as interpolation nodes. Pixels outside the outermost centers
    // use the nearest tile alone.
    auto axis_taps = [](int tiles, int extent) {
        std::vector<detail::Tap> taps(static_cast<std::size_t>(extent));
        std::vector<double> centers(static_cast<std::size_t>(tiles));
        for (int i = 0; i < tiles; ++i) {
            const auto [lo, hi] = detail::tile_span(i, tiles, extent);
            centers[static_cast<std::size_t>(i)] = (lo + hi - 1) / 2.0;
        }
        int t = 0;
        for (int x = 0; x < extent; ++x) {
            if (x <= centers.front()) {
                taps[static_cast<std::size_t>(x)] = {0, 0, 0.0};
            } else if (x >= centers.back()) {
                taps[static_cast<std::size_t>(x)] = {tiles - 1, tiles - 1, 0.0};
            } else {
                while (centers[static_cast<std::size_t>(t + 1)] < x) ++t;
                const double c0 = centers[static_cast<std::size_t>(t)];
                const double c1 = centers[static_cast<std::size_t>(t + 1)];
                taps[static_cast<std::size_t>(x)] = {t, t + 1, (x - c0) / (c1 - c0)};
            }
        }
        return taps;
    };
    const auto xt = axis_taps(p.tiles_x, img.width);
    const auto yt = axis_taps(p.tiles_y, img.height);

    GrayImage out(img.width, img.height);
    for (int y = 0; y < img.height; ++y) {
        const auto& ty = yt[static_cast<std::size_t>(y)];
        for (int x = 0; x < img.width; ++x) {
            const auto& tx = xt[static_cast<std::size_t>(x)];
            const std::uint8_t v = img.at(x, y);
            auto lut = [&](int row, int col) -> double {
                return luts[static_cast<std::size_t>(row * p.tiles_x + col)][v];
            };
            const double top = lut(ty.i0, tx.i0) * (1 - tx.frac) + lut(ty.i0, tx.i1) * tx.frac;
            const double bot = lut(ty.i1, tx.i0) * (1 - tx.frac) + lut(ty.i1, tx.i1) * tx.frac;
            out.at(x, y) = clamp_round_u8(top * (1 - ty.frac) + bot * ty.frac);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Geometric augmentation

struct AugmentParams {
    double rotation_deg = 0;
    bool hflip = false;
    double zoom = 1;
    double shear = 0;  // radians
};

struct AugmentRanges {
    double rotation_deg = 15.0;
    double hflip_prob = 0.5;
    double zoom_min = 0.8;
    double zoom_max = 1.2;
    double shear = 0.2;
};

inline AugmentParams random_augment_params(Rng& rng, const AugmentRanges& r = {}) {
    AugmentParams a;
    a.rotation_deg = rng.uniform(-r.rotation_deg, r.rotation_deg);
    a.hflip = rng.bernoulli(r.hflip_prob);
    a.zoom = rng.uniform(r.zoom_min, r.zoom_max);
    a.shear = rng.uniform(-r.shear, r.shear);
    return a;
}

// 2x2 forward map about the image center: zoom * shear * rotation * flip.
struct Affine2 {
    double a = 1, b = 0, c = 0, d = 1;

    Affine2 operator*(const Affine2& o) const {
        return {a * o.a + b * o.c, a * o.b + b * o.d, c * o.a + d * o.c, c * o.b + d * o.d};
    }
    Affine2 inverse() const {
        const double det = a * d - b * c;
        return {d / det, -b / det, -c / det, a / det};
    }
};

inline Affine2 augment_matrix(const AugmentParams& p) {
    const double th = p.rotation_deg * std::numbers::pi / 180.0;
    const Affine2 flip{p.hflip ? -1.0 : 1.0, 0, 0, 1};
    const Affine2 rot{std::cos(th), -std::sin(th), std::sin(th), std::cos(th)};
    const Affine2 shear{1, std::tan(p.shear), 0, 1};
    const Affine2 zoom{p.zoom, 0, 0, p.zoom};
    return zoom * shear * rot * flip;
}

// Single bilinear resample of the composed map; samples that fall outside the
// source frame repeat the nearest edge pixel.
inline GrayImage apply_augment(const GrayImage& img, const AugmentParams& p) {
    const Affine2 inv = augment_matrix(p).inverse();
    const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
    GrayImage out(img.width, img.height);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double dx = x - cx, dy = y - cy;
            double sx = cx + inv.a * dx + inv.b * dy;
            double sy = cy + inv.c * dx + inv.d * dy;
            sx = std::clamp(sx, 0.0, img.width - 1.0);
            sy = std::clamp(sy, 0.0, img.height - 1.0);
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
            const double fx = sx - x0, fy = sy - y0;
            const double top = img.at(x0, y0) * (1 - fx) + img.at(x1, y0) * fx;
            const double bot = img.at(x0, y1) * (1 - fx) + img.at(x1, y1) * fx;
            out.at(x, y) = clamp_round_u8(top * (1 - fy) + bot * fy);
        }
    }
    return out;
}

}  // namespace cxr
