#pragma once

#include <cstdint>
#include <vector>

#include "cag/model_interface.hpp"
#include "cag/rng.hpp"

namespace cag {

// Per-patch boolean mask. `masked` is row-major grid_h x grid_w, true = hidden.
struct MaskPattern {
    int grid_h = 1;
    int grid_w = 1;
    int patch_size = 1;
    double ratio = 0.0;
    std::vector<std::uint8_t> masked;

    int cells() const { return grid_h * grid_w; }
    int masked_count() const;
    bool is_masked(int row, int col) const { return masked[static_cast<std::size_t>(row * grid_w + col)] != 0; }
    MaskPattern complement() const;
};

// Number of hidden patches for a grid: round(ratio * cells).
int masked_patch_count(int grid_h, int grid_w, double ratio);

// Uniformly random subset of exactly masked_patch_count() patches.
MaskPattern sample_mask(int grid_h, int grid_w, double ratio, Rng& rng, int patch_size = 1);

// [C,H,W] (or [H,W] when channels == 0) indicator, 1 on hidden pixels.
// H and W must be multiples of the grid dimensions.
Tensor pixel_mask(const MaskPattern& pattern, Index channels, Index height, Index width);

// m: keep hidden patches, zero the visible ones. m-bar: the reverse.
// image is [C,H,W] or [N,C,H,W] (one pattern for every image).
Tensor apply_mask(const Tensor& image, const MaskPattern& pattern);
Tensor apply_complement(const Tensor& image, const MaskPattern& pattern);

// g(x): visible patches pass through, hidden patches come from the module's
// prediction given only the visible region (hidden pixels set to fill_value).
// One pattern per image; images must be at the module's input resolution.
ad::Var masked_reconstruct(ad::Graph& g, const ReconstructionModule& module, ad::Var images,
                           const std::vector<MaskPattern>& patterns, double fill_value = 0.0);

Tensor masked_reconstruct(const ReconstructionModule& module, const Tensor& images,
                          const std::vector<MaskPattern>& patterns, double fill_value = 0.0);

// Stacked [N,C,H,W] hidden-pixel indicator for one pattern per image.
Tensor batch_pixel_mask(const std::vector<MaskPattern>& patterns, Index channels, Index height, Index width);

}  // namespace cag
