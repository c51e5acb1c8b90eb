#pragma once

// Image containers and file I/O.
//
// Color images live in [0,1] doubles, row-major, RGB interleaved. Depth and
// other scalar maps are doubles with <= 0 meaning invalid. Formats:
//   * 8-bit RGB PNG for color
//   * float32 PFM (little-endian, bottom-up per convention) or 16-bit
//     millimeter-scaled grayscale PNG for depth
//   * .flo (PIEH magic, float32 2-channel) for optical flow; values with
//     magnitude > 1e9 mark invalid pixels

#include "fieldchain/core.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>

namespace fieldchain {

struct DecodeError : Error {
    using Error::Error;
};

struct ImageRGB {
    int width = 0, height = 0;
    std::vector<double> data;  // width*height*3

    ImageRGB() = default;
    ImageRGB(int w, int h) : width(w), height(h), data(size_t(w) * h * 3, 0.0) {}

    double* at(int x, int y) { return &data[(size_t(y) * width + x) * 3]; }
    const double* at(int x, int y) const { return &data[(size_t(y) * width + x) * 3]; }

    Vec3 pixel(int x, int y) const {
        const double* p = at(x, y);
        return {p[0], p[1], p[2]};
    }
    void set_pixel(int x, int y, const Vec3& c) {
        double* p = at(x, y);
        p[0] = c.x();
        p[1] = c.y();
        p[2] = c.z();
    }
};

struct ImageGray {
    int width = 0, height = 0;
    std::vector<double> data;  // width*height

    ImageGray() = default;
    ImageGray(int w, int h, double fill = 0.0)
        : width(w), height(h), data(size_t(w) * h, fill) {}

    double& at(int x, int y) { return data[size_t(y) * width + x]; }
    double at(int x, int y) const { return data[size_t(y) * width + x]; }
};

// Two-channel flow field, Eq-style displacement; invalid pixels hold the
// sentinel below in both channels.
struct ImageFlow {
    static constexpr double kInvalid = 1e10;
    int width = 0, height = 0;
    std::vector<double> data;  // width*height*2

    ImageFlow() = default;
    ImageFlow(int w, int h) : width(w), height(h), data(size_t(w) * h * 2, kInvalid) {}

    double* at(int x, int y) { return &data[(size_t(y) * width + x) * 2]; }
    const double* at(int x, int y) const { return &data[(size_t(y) * width + x) * 2]; }

    bool valid(int x, int y) const { return std::abs(at(x, y)[0]) < 1e9 && std::abs(at(x, y)[1]) < 1e9; }
    void set(int x, int y, const Vec2& f) {
        at(x, y)[0] = f.x();
        at(x, y)[1] = f.y();
    }
};

inline double bilinear(const ImageGray& img, double x, double y) {
    const int x0 = std::clamp(int(std::floor(x)), 0, img.width - 2);
    const int y0 = std::clamp(int(std::floor(y)), 0, img.height - 2);
    const double fx = std::clamp(x - x0, 0.0, 1.0);
    const double fy = std::clamp(y - y0, 0.0, 1.0);
    return (1 - fy) * ((1 - fx) * img.at(x0, y0) + fx * img.at(x0 + 1, y0)) +
           fy * ((1 - fx) * img.at(x0, y0 + 1) + fx * img.at(x0 + 1, y0 + 1));
}

inline Vec3 bilinear_rgb(const ImageRGB& img, double x, double y) {
    const int x0 = std::clamp(int(std::floor(x)), 0, img.width - 2);
    const int y0 = std::clamp(int(std::floor(y)), 0, img.height - 2);
    const double fx = std::clamp(x - x0, 0.0, 1.0);
    const double fy = std::clamp(y - y0, 0.0, 1.0);
    Vec3 out;
    for (int c = 0; c < 3; ++c) {
        out[c] = (1 - fy) * ((1 - fx) * img.at(x0, y0)[c] + fx * img.at(x0 + 1, y0)[c]) +
                 fy * ((1 - fx) * img.at(x0, y0 + 1)[c] + fx * img.at(x0 + 1, y0 + 1)[c]);
    }
    return out;
}

// --- PNG ----------------------------------------------------------------

namespace detail {

struct PngCloser {
    std::FILE* f = nullptr;
    ~PngCloser() {
        if (f) std::fclose(f);
    }
};

}  // namespace detail

inline void save_png_rgb8(const std::string& path, const ImageRGB& img) {
    detail::PngCloser fc{std::fopen(path.c_str(), "wb")};
    if (!fc.f) throw Error("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("png write failed: " + path);
    }
    png_init_io(png, fc.f);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(size_t(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double* p = img.at(x, y);
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(p[c], 0.0, 1.0);
                row[size_t(x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline ImageRGB load_png_rgb(const std::string& path) {
    detail::PngCloser fc{std::fopen(path.c_str(), "rb")};
    if (!fc.f) throw Error("cannot open: " + path);
    unsigned char header[8];
    if (std::fread(header, 1, 8, fc.f) != 8 || png_sig_cmp(header, 0, 8))
        throw DecodeError("not a PNG file: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DecodeError("corrupt PNG: " + path);
    }
    png_init_io(png, fc.f);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int w = int(png_get_image_width(png, info));
    const int h = int(png_get_image_height(png, info));
    ImageRGB img(w, h);
    std::vector<unsigned char> row(size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y)[c] = row[size_t(x) * 3 + c] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

// Depth as 16-bit grayscale PNG, millimeter-scaled: value = depth * 1000,
// saturating at the 16-bit range; 0 marks invalid.
inline void save_png_depth16(const std::string& path, const ImageGray& depth) {
    detail::PngCloser fc{std::fopen(path.c_str(), "wb")};
    if (!fc.f) throw Error("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("png write failed: " + path);
    }
    png_init_io(png, fc.f);
    png_set_IHDR(png, info, depth.width, depth.height, 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(size_t(depth.width) * 2);
    for (int y = 0; y < depth.height; ++y) {
        for (int x = 0; x < depth.width; ++x) {
            const double d = depth.at(x, y);
            const long mm = d > 0 ? std::lround(std::clamp(d * 1000.0, 0.0, 65535.0)) : 0;
            row[size_t(x) * 2] = static_cast<unsigned char>((mm >> 8) & 0xff);
            row[size_t(x) * 2 + 1] = static_cast<unsigned char>(mm & 0xff);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline ImageGray load_png_depth16(const std::string& path, double scale = 0.001) {
    detail::PngCloser fc{std::fopen(path.c_str(), "rb")};
    if (!fc.f) throw Error("cannot open: " + path);
    unsigned char header[8];
    if (std::fread(header, 1, 8, fc.f) != 8 || png_sig_cmp(header, 0, 8))
        throw DecodeError("not a PNG file: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DecodeError("corrupt PNG: " + path);
    }
    png_init_io(png, fc.f);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    if (png_get_bit_depth(png, info) != 16 || png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DecodeError("expected 16-bit grayscale PNG: " + path);
    }
    const int w = int(png_get_image_width(png, info));
    const int h = int(png_get_image_height(png, info));
    ImageGray img(w, h);
    std::vector<unsigned char> row(size_t(w) * 2);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            const unsigned v = (unsigned(row[size_t(x) * 2]) << 8) | row[size_t(x) * 2 + 1];
            img.at(x, y) = v == 0 ? 0.0 : v * scale;
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

// --- PFM ----------------------------------------------------------------

inline void save_pfm(const std::string& path, const ImageGray& img) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw Error("cannot open for writing: " + path);
    std::fprintf(f, "Pf\n%d %d\n-1.0\n", img.width, img.height);  // -1 => little endian
    std::vector<float> row(img.width);
    for (int y = img.height - 1; y >= 0; --y) {  // PFM stores bottom-up
        for (int x = 0; x < img.width; ++x) row[x] = float(img.at(x, y));
        std::fwrite(row.data(), sizeof(float), row.size(), f);
    }
    std::fclose(f);
}

inline ImageGray load_pfm(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw Error("cannot open: " + path);
    char magic[3] = {0};
    int w = 0, h = 0;
    double scale = 0;
    if (std::fscanf(f, "%2s %d %d %lf", magic, &w, &h, &scale) != 4 ||
        std::string(magic) != "Pf" || w <= 0 || h <= 0) {
        std::fclose(f);
        throw DecodeError("bad PFM header: " + path);
    }
    std::fgetc(f);  // single whitespace after the header
    if (scale > 0) {
        std::fclose(f);
        throw DecodeError("big-endian PFM unsupported: " + path);
    }
    ImageGray img(w, h);
    std::vector<float> row(w);
    for (int y = h - 1; y >= 0; --y) {
        if (std::fread(row.data(), sizeof(float), row.size(), f) != row.size()) {
            std::fclose(f);
            throw DecodeError("truncated PFM: " + path);
        }
        for (int x = 0; x < w; ++x) img.at(x, y) = row[x];
    }
    std::fclose(f);
    return img;
}

// --- .flo ---------------------------------------------------------------

inline void save_flo(const std::string& path, const ImageFlow& flow) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw Error("cannot open for writing: " + path);
    const float magic = 202021.25f;  // "PIEH"
    std::fwrite(&magic, 4, 1, f);
    const int32_t w = flow.width, h = flow.height;
    std::fwrite(&w, 4, 1, f);
    std::fwrite(&h, 4, 1, f);
    std::vector<float> row(size_t(w) * 2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            row[size_t(x) * 2] = float(flow.at(x, y)[0]);
            row[size_t(x) * 2 + 1] = float(flow.at(x, y)[1]);
        }
        std::fwrite(row.data(), sizeof(float), row.size(), f);
    }
    std::fclose(f);
}

inline ImageFlow load_flo(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw Error("cannot open: " + path);
    float magic = 0;
    int32_t w = 0, h = 0;
    if (std::fread(&magic, 4, 1, f) != 1 || magic != 202021.25f || std::fread(&w, 4, 1, f) != 1 ||
        std::fread(&h, 4, 1, f) != 1 || w <= 0 || h <= 0) {
        std::fclose(f);
        throw DecodeError("bad .flo header: " + path);
    }
    ImageFlow flow(w, h);
    std::vector<float> row(size_t(w) * 2);
    for (int y = 0; y < h; ++y) {
        if (std::fread(row.data(), sizeof(float), row.size(), f) != row.size()) {
            std::fclose(f);
            throw DecodeError("truncated .flo: " + path);
        }
        for (int x = 0; x < w; ++x) {
            flow.at(x, y)[0] = row[size_t(x) * 2];
            flow.at(x, y)[1] = row[size_t(x) * 2 + 1];
        }
    }
    std::fclose(f);
    return flow;
}

}  // namespace fieldchain
