// RGB image tensor plus binary PPM (P6) ingestion and PGM (P5) export.
// Pixels live in [0,1], row-major H x W x 3.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sycoca/errors.hpp"

namespace sycoca {

struct ImageTensor {
    int h = 0;
    int w = 0;
    std::vector<float> data;  // h * w * 3

    ImageTensor() = default;
    ImageTensor(int h_, int w_) : h(h_), w(w_), data(static_cast<std::size_t>(h_) * w_ * 3, 0.f) {}

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
    float at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * w + x) * 3 + c];
    }
};

namespace detail {

// PPM/PGM headers allow '#' comments between tokens.
inline std::string next_pnm_token(std::istream& in, const std::string& path) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw FormatError(path + ": truncated header");
    return tok;
}

}  // namespace detail

inline ImageTensor resize_nearest(const ImageTensor& src, int h, int w) {
    if (src.h == h && src.w == w) return src;
    ImageTensor dst(h, w);
    for (int y = 0; y < h; ++y) {
        int sy = static_cast<int>((static_cast<long long>(y) * src.h) / h);
        for (int x = 0; x < w; ++x) {
            int sx = static_cast<int>((static_cast<long long>(x) * src.w) / w);
            for (int c = 0; c < 3; ++c) dst.at(y, x, c) = src.at(sy, sx, c);
        }
    }
    return dst;
}

inline ImageTensor load_image_ppm(const std::string& path, int target_h = 0, int target_w = 0) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image: " + path);

    const std::string magic = detail::next_pnm_token(f, path);
    if (magic != "P6") throw FormatError(path + ": expected binary PPM magic P6, got \"" + magic + "\"");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(detail::next_pnm_token(f, path));
        h = std::stoi(detail::next_pnm_token(f, path));
        maxval = std::stoi(detail::next_pnm_token(f, path));
    } catch (const std::exception&) {
        throw FormatError(path + ": bad PPM header");
    }
    if (w <= 0 || h <= 0) throw FormatError(path + ": bad dimensions");
    if (maxval != 255) throw FormatError(path + ": only maxval 255 is supported");

    std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(f.gcount()) != raw.size())
        throw FormatError(path + ": truncated pixel payload");

    ImageTensor img(h, w);
    for (std::size_t i = 0; i < raw.size(); ++i) img.data[i] = static_cast<float>(raw[i]) / 255.f;
    if (target_h > 0 && target_w > 0) img = resize_nearest(img, target_h, target_w);
    return img;
}

inline void save_image_ppm(const ImageTensor& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image for writing: " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<std::uint8_t> raw(img.data.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        float v = img.data[i];
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        raw[i] = static_cast<std::uint8_t>(std::lround(v * 255.f));
    }
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError("failed writing image: " + path);
}

inline void save_gray_pgm(const std::vector<std::uint8_t>& pix, int h, int w,
                          const std::string& path) {
    if (static_cast<std::size_t>(h) * w != pix.size())
        throw InputError("save_gray_pgm: size mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open heatmap for writing: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
    if (!f) throw IoError("failed writing heatmap: " + path);
}

}  // namespace sycoca
