#pragma once

#include <filesystem>

#include "cag/tensor.hpp"

namespace cag {

// N class-targeted images, data [N,C,H,W] with H == W, pixels in [0,1].
struct ImageBatch {
    Tensor data;
    int target_class = -1;

    Index count() const { return data.dim(0); }
    Index channels() const { return data.dim(1); }
    Index resolution() const { return data.dim(2); }

    // Throws if the shape is not [N>=1,C,H,H] or a value is non-finite or outside [0,1].
    void validate() const;
};

void clamp_unit(Tensor& t);

// Bilinear, half-pixel centers, edge clamped. [N,C,H,W] -> [N,C,h,w].
Tensor resize_bilinear(const Tensor& images, Index out_h, Index out_w);
// Mean over non-overlapping factor x factor blocks.
Tensor area_downsample(const Tensor& images, int factor);

// Bilinear growth to a larger stage resolution; downscaling is rejected.
ImageBatch upsample(const ImageBatch& batch, Index new_resolution);

// 8-bit PNG of a single [C,H,W] image (C = 1 or 3).
void write_png(const std::filesystem::path& path, const Tensor& image);
Tensor read_png(const std::filesystem::path& path);
// Square-ish grid of every image of a [N,C,H,W] batch with a 1px gap.
void write_contact_sheet(const std::filesystem::path& path, const Tensor& images, Index columns = 0);

// Raw little-endian double dump with shape header; exact round-trip.
void write_raw(const std::filesystem::path& path, const Tensor& t);
Tensor read_raw(const std::filesystem::path& path);

}  // namespace cag
