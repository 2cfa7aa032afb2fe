#include <png.h>

#include <cmath>
#include <stdexcept>

#include "gprxv/gateway/service.hpp"

namespace gprxv {

namespace {

void write_to_string(png_structp png, png_bytep data, png_size_t n)
{
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), n);
}

void no_flush(png_structp) {}

int clip(int v, int hi) { return std::clamp(v, 0, hi); }

}  // namespace

std::string encode_png_gray(const Image& img)
{
    if (img.size() == 0) throw std::invalid_argument("cannot encode an empty image");
    const float lo = img.minCoeff(), hi = img.maxCoeff();
    const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
    const int H = int(img.rows()), W = int(img.cols());
    std::vector<png_byte> pixels(std::size_t(H) * W);
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) pixels[std::size_t(r) * W + c] = png_byte(std::lround((img(r, c) - lo) * scale));
    }

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    std::string out;
    std::vector<png_bytep> rows(static_cast<std::size_t>(H));
    for (int r = 0; r < H; ++r) rows[std::size_t(r)] = pixels.data() + std::size_t(r) * W;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png encoding failed");
    }
    png_set_write_fn(png, &out, write_to_string, no_flush);
    png_set_IHDR(png, info, png_uint_32(W), png_uint_32(H), 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

SliceRender render_footprint(const Volume& v, const VoxelBox& b, View view)
{
    const Dims& d = v.dims();
    SliceRender r;
    r.view = view;
    SliceImage img;
    switch (view) {
        case View::B:
            r.slice_index = clip((b.c0 + b.c1 - 1) / 2, d.n_channels - 1);
            img = b_scan(v, r.slice_index);
            r.box = {b.k0, b.x0, b.k1, b.x1};
            break;
        case View::C:
            r.slice_index = clip((b.k0 + b.k1 - 1) / 2, d.n_samples - 1);
            img = c_scan(v, r.slice_index);
            r.box = {b.c0, b.x0, b.c1, b.x1};
            break;
        case View::D:
            r.slice_index = clip((b.x0 + b.x1 - 1) / 2, d.n_traces - 1);
            img = d_scan(v, r.slice_index);
            r.box = {b.k0, b.c0, b.k1, b.c1};
            break;
    }
    r.rows = int(img.pixels.rows());
    r.cols = int(img.pixels.cols());
    r.box = {clip(r.box.r0, r.rows), clip(r.box.c0, r.cols), clip(r.box.r1, r.rows), clip(r.box.c1, r.cols)};
    r.png = encode_png_gray(img.pixels);
    return r;
}

}  // namespace gprxv
