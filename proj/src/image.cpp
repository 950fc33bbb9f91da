#include "cag/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "cag/autodiff.hpp"
#include "cag/ops.hpp"

namespace cag {

void ImageBatch::validate() const {
    if (data.rank() != 4 || data.dim(0) < 1 || data.dim(2) != data.dim(3))
        throw std::invalid_argument("image batch must be [N>=1,C,H,H], got " + shape_to_string(data.shape()));
    for (Index i = 0; i < data.size(); ++i) {
        const double v = data[i];
        if (!std::isfinite(v) || v < 0.0 || v > 1.0)
            throw std::domain_error("image batch value " + std::to_string(v) + " at flat index " + std::to_string(i) +
                                    " outside [0,1]");
    }
}

void clamp_unit(Tensor& t) {
    for (double& v : t.values()) v = std::clamp(v, 0.0, 1.0);
}

Tensor resize_bilinear(const Tensor& images, Index out_h, Index out_w) {
    ad::Graph g;
    const ad::Var x = g.constant(images);
    return g.value(ad::resize_bilinear(g, x, out_h, out_w));
}

Tensor area_downsample(const Tensor& images, int factor) {
    if (images.rank() != 4) throw std::invalid_argument("area_downsample expects [N,C,H,W]");
    const Index N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (factor <= 0 || H % factor || W % factor)
        throw std::invalid_argument("area_downsample: " + shape_to_string(images.shape()) + " not divisible by " +
                                    std::to_string(factor));
    const Index h = H / factor, w = W / factor;
    Tensor out({N, C, h, w});
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (Index p = 0; p < N * C; ++p)
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x)
                out[(p * h + y / factor) * w + x / factor] += images[(p * H + y) * W + x] * inv;
    return out;
}

ImageBatch upsample(const ImageBatch& batch, Index new_resolution) {
    if (new_resolution < batch.resolution())
        throw std::invalid_argument("upsample: cannot downscale from " + std::to_string(batch.resolution()) + " to " +
                                    std::to_string(new_resolution));
    ImageBatch out{resize_bilinear(batch.data, new_resolution, new_resolution), batch.target_class};
    clamp_unit(out.data);
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return f;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
        throw std::invalid_argument("write_png expects [1|3,H,W], got " + shape_to_string(image.shape()));
    const Index C = image.dim(0), H = image.dim(1), W = image.dim(2);
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialization failed");
    }
    std::vector<png_byte> row(static_cast<std::size_t>(C * W));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (Index y = 0; y < H; ++y) {
        for (Index x = 0; x < W; ++x)
            for (Index c = 0; c < C; ++c) {
                const double v = std::clamp(image[(c * H + y) * W + x], 0.0, 1.0);
                row[static_cast<std::size_t>(x * C + c)] = static_cast<png_byte>(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng failed reading " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const Index W = png_get_image_width(png, info), H = png_get_image_height(png, info);
    const Index C = png_get_channels(png, info);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    Tensor out({C, H, W});
    for (Index y = 0; y < H; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (Index x = 0; x < W; ++x)
            for (Index c = 0; c < C; ++c) out[(c * H + y) * W + x] = row[static_cast<std::size_t>(x * C + c)] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_contact_sheet(const std::filesystem::path& path, const Tensor& images, Index columns) {
    if (images.rank() != 4) throw std::invalid_argument("contact sheet expects [N,C,H,W]");
    const Index N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (columns <= 0) columns = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(N))));
    const Index rows = (N + columns - 1) / columns;
    const Index SH = rows * (H + 1) + 1, SW = columns * (W + 1) + 1;
    Tensor sheet({C, SH, SW}, 0.5);
    for (Index n = 0; n < N; ++n) {
        const Index oy = (n / columns) * (H + 1) + 1, ox = (n % columns) * (W + 1) + 1;
        for (Index c = 0; c < C; ++c)
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x)
                    sheet[(c * SH + oy + y) * SW + ox + x] = images[((n * C + c) * H + y) * W + x];
    }
    write_png(path, sheet);
}

namespace {
constexpr char kRawMagic[8] = {'C', 'A', 'G', 'R', 'A', 'W', '1', '\n'};
}

void write_raw(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kRawMagic, sizeof kRawMagic);
    const std::int64_t rank = t.rank();
    os.write(reinterpret_cast<const char*>(&rank), sizeof rank);
    for (Index d : t.shape()) {
        const std::int64_t v = d;
        os.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!os) throw std::runtime_error("short write to " + path.string());
}

Tensor read_raw(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    char magic[sizeof kRawMagic];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kRawMagic, sizeof magic) != 0)
        throw std::runtime_error(path.string() + " is not a raw tensor dump");
    std::int64_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), sizeof rank);
    if (!is || rank < 0 || rank > 8) throw std::runtime_error(path.string() + ": bad rank");
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& d : shape) {
        std::int64_t v = 0;
        is.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!is || v < 0) throw std::runtime_error(path.string() + ": bad shape");
        d = v;
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw std::runtime_error(path.string() + ": truncated payload");
    return t;
}

}  // namespace cag
