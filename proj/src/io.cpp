#include "m2m/io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace m2m {
namespace {

constexpr float kFloMagic = 202021.25f;

std::uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("unexpected end of file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32le(std::istream& is) {
    std::uint32_t u = read_u32le(is);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

void write_f32le(std::ostream& os, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    write_u32le(os, u);
}

unsigned char to_u8(float v) {
    const float c = std::min(std::max(v, 0.0f), 1.0f);
    return static_cast<unsigned char>(std::lround(c * 255.0f));
}

bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

Tensor<float> rgb8_to_image(const std::vector<unsigned char>& rgb, int h, int w) {
    Tensor<float> img({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) =
                    static_cast<float>(rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
    return img;
}

std::vector<unsigned char> image_to_rgb8(const Tensor<float>& img) {
    const int h = img.shape[1], w = img.shape[2];
    std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_u8(img.at(c, y, x));
    return rgb;
}

Tensor<float> read_ppm(std::istream& is) {
    std::string magic;
    is >> magic;
    if (magic != "P6") throw IoError("PPM: bad magic '" + magic + "'");
    auto next_token = [&is]() {
        std::string tok;
        while (is >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(is, rest);
                continue;
            }
            return tok;
        }
        throw IoError("PPM: truncated header");
    };
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (w <= 0 || h <= 0) throw IoError("PPM: nonpositive dimensions");
    if (maxval != 255) throw IoError("PPM: only maxval 255 supported");
    is.get();  // single whitespace after maxval
    std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
    is.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (is.gcount() != static_cast<std::streamsize>(rgb.size()))
        throw IoError("PPM: truncated payload");
    return rgb8_to_image(rgb, h, w);
}

void write_ppm(const std::string& path, const Tensor<float>& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "P6\n" << img.shape[2] << " " << img.shape[1] << "\n255\n";
    auto rgb = image_to_rgb8(img);
    os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!os) throw IoError("PPM: write failed for " + path);
}

Tensor<float> read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("PNG: corrupt file " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = &rgb[static_cast<std::size_t>(y) * w * 3];
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return rgb8_to_image(rgb, h, w);
}

void write_png(const std::string& path, const Tensor<float>& img) {
    const int h = img.shape[1], w = img.shape[2];
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("PNG: write failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto rgb = image_to_rgb8(img);
    for (int y = 0; y < h; ++y) png_write_row(png, &rgb[static_cast<std::size_t>(y) * w * 3]);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace

FlowField<float> read_flo(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    const float magic = read_f32le(is);
    if (magic != kFloMagic) throw IoError(".flo: bad magic in " + path);
    const auto w = static_cast<std::int32_t>(read_u32le(is));
    const auto h = static_cast<std::int32_t>(read_u32le(is));
    if (w <= 0 || h <= 0) throw IoError(".flo: nonpositive dimensions in " + path);
    FlowField<float> f(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            f.u(y, x) = read_f32le(is);
            f.v(y, x) = read_f32le(is);
        }
    if (!is) throw IoError(".flo: truncated payload in " + path);
    return f;
}

void write_flo(const std::string& path, const FlowField<float>& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_f32le(os, kFloMagic);
    write_u32le(os, static_cast<std::uint32_t>(f.width()));
    write_u32le(os, static_cast<std::uint32_t>(f.height()));
    for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) {
            write_f32le(os, f.u(y, x));
            write_f32le(os, f.v(y, x));
        }
    if (!os) throw IoError(".flo: write failed for " + path);
}

Tensor<float> read_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("cannot open " + path);
    unsigned char sig[2] = {0, 0};
    probe.read(reinterpret_cast<char*>(sig), 2);
    probe.seekg(0);
    if (sig[0] == 'P' && sig[1] == '6') return read_ppm(probe);
    if (sig[0] == 0x89 && sig[1] == 'P') {
        probe.close();
        return read_png(path);
    }
    throw IoError("unsupported image format: " + path);
}

void write_image(const std::string& path, const Tensor<float>& img) {
    require(img.rank() == 3 && img.shape[0] == 3, "write_image: expected [3,H,W]");
    if (has_suffix(path, ".ppm"))
        write_ppm(path, img);
    else if (has_suffix(path, ".png"))
        write_png(path, img);
    else
        throw IoError("unsupported output extension: " + path);
}

Tensor<float> flow_to_color(const FlowField<float>& f, float max_mag) {
    // Standard Middlebury wheel: 55 hues across RY/YG/GC/CB/BM/MR sectors.
    static const int kSeg[6] = {15, 6, 4, 11, 13, 6};
    static const int kNcols = 55;
    static float wheel[kNcols][3];
    static bool built = false;
    if (!built) {
        int col = 0;
        auto fill = [&col](int n, int c_from, int c_to, bool up) {
            for (int i = 0; i < n; ++i, ++col) {
                wheel[col][0] = wheel[col][1] = wheel[col][2] = 0.0f;
                const float v = static_cast<float>(i) / static_cast<float>(n);
                wheel[col][c_from] = 1.0f;
                wheel[col][c_to] = up ? v : 1.0f - v;
            }
        };
        // RY: R=1, G ramps up; YG: G=1, R ramps down; etc.
        fill(kSeg[0], 0, 1, true);
        fill(kSeg[1], 1, 0, false);
        fill(kSeg[2], 1, 2, true);
        fill(kSeg[3], 2, 1, false);
        fill(kSeg[4], 2, 0, true);
        fill(kSeg[5], 0, 2, false);
        built = true;
    }
    const int h = f.height(), w = f.width();
    float norm = max_mag;
    if (norm <= 0.0f) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                norm = std::max(norm, std::hypot(f.u(y, x), f.v(y, x)));
        if (norm <= 0.0f) norm = 1.0f;
    }
    Tensor<float> img({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float u = f.u(y, x) / norm, v = f.v(y, x) / norm;
            const float rad = std::min(std::hypot(u, v), 1.0f);
            const float a = std::atan2(-v, -u) / static_cast<float>(M_PI);
            const float fk = (a + 1.0f) / 2.0f * (kNcols - 1);
            const int k0 = static_cast<int>(fk) % kNcols;
            const int k1 = (k0 + 1) % kNcols;
            const float t = fk - std::floor(fk);
            for (int c = 0; c < 3; ++c) {
                float cc = (1.0f - t) * wheel[k0][c] + t * wheel[k1][c];
                // saturate toward white at the wheel center
                img.at(c, y, x) = 1.0f - rad * (1.0f - cc);
            }
        }
    return img;
}

}  // namespace m2m
