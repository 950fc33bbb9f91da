#include "cag/masking.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "cag/ops.hpp"

namespace cag {

int MaskPattern::masked_count() const {
    return static_cast<int>(std::count_if(masked.begin(), masked.end(), [](std::uint8_t v) { return v != 0; }));
}

MaskPattern MaskPattern::complement() const {
    MaskPattern c = *this;
    for (auto& v : c.masked) v = v ? 0 : 1;
    c.ratio = 1.0 - ratio;
    return c;
}

int masked_patch_count(int grid_h, int grid_w, double ratio) {
    if (grid_h < 1 || grid_w < 1) throw std::invalid_argument("mask grid dimensions must be >= 1");
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw std::invalid_argument("mask ratio " + std::to_string(ratio) + " outside [0,1]");
    return static_cast<int>(std::lround(ratio * grid_h * grid_w));
}

MaskPattern sample_mask(int grid_h, int grid_w, double ratio, Rng& rng, int patch_size) {
    const int k = masked_patch_count(grid_h, grid_w, ratio);
    if (patch_size < 1) throw std::invalid_argument("patch size must be >= 1");
    const int n = grid_h * grid_w;
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<int> pick(i, n - 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    }
    MaskPattern p{grid_h, grid_w, patch_size, ratio, std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0)};
    for (int i = 0; i < k; ++i) p.masked[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
    return p;
}

Tensor pixel_mask(const MaskPattern& pattern, Index channels, Index height, Index width) {
    if (height % pattern.grid_h || width % pattern.grid_w)
        throw std::invalid_argument("image " + std::to_string(height) + "x" + std::to_string(width) +
                                    " not divisible by mask grid " + std::to_string(pattern.grid_h) + "x" +
                                    std::to_string(pattern.grid_w) + "; expected height a multiple of " +
                                    std::to_string(pattern.grid_h) + " and width a multiple of " +
                                    std::to_string(pattern.grid_w));
    const Index ch = height / pattern.grid_h, cw = width / pattern.grid_w;
    const Index planes = std::max<Index>(channels, 1);
    Tensor m(channels > 0 ? Shape{channels, height, width} : Shape{height, width});
    for (Index y = 0; y < height; ++y)
        for (Index x = 0; x < width; ++x) {
            const double v = pattern.is_masked(static_cast<int>(y / ch), static_cast<int>(x / cw)) ? 1.0 : 0.0;
            for (Index c = 0; c < planes; ++c) m[(c * height + y) * width + x] = v;
        }
    return m;
}

namespace {

Tensor select(const Tensor& image, const MaskPattern& pattern, bool keep_masked) {
    if (image.rank() != 3 && image.rank() != 4)
        throw std::invalid_argument("apply_mask expects [C,H,W] or [N,C,H,W], got " + shape_to_string(image.shape()));
    const Index H = image.dim(-2), W = image.dim(-1);
    const Tensor plane = pixel_mask(pattern, 0, H, W);
    Tensor out = image;
    const Index P = H * W;
    for (Index i = 0; i < out.size(); ++i) {
        const bool hidden = plane[i % P] != 0.0;
        if (hidden != keep_masked) out[i] = 0.0;
    }
    return out;
}

}  // namespace

Tensor apply_mask(const Tensor& image, const MaskPattern& pattern) { return select(image, pattern, true); }

Tensor apply_complement(const Tensor& image, const MaskPattern& pattern) { return select(image, pattern, false); }

Tensor batch_pixel_mask(const std::vector<MaskPattern>& patterns, Index channels, Index height, Index width) {
    const Index N = static_cast<Index>(patterns.size());
    Tensor out({N, channels, height, width});
    const Index per = channels * height * width;
    for (Index n = 0; n < N; ++n) {
        const Tensor m = pixel_mask(patterns[static_cast<std::size_t>(n)], channels, height, width);
        std::copy(m.data(), m.data() + per, out.data() + n * per);
    }
    return out;
}

ad::Var masked_reconstruct(ad::Graph& g, const ReconstructionModule& module, ad::Var images,
                           const std::vector<MaskPattern>& patterns, double fill_value) {
    const Shape s = g.shape(images);
    if (s.size() != 4) throw ShapeError("masked_reconstruct expects [N,C,H,W], got " + shape_to_string(s));
    const Index N = s[0], C = s[1], H = s[2], W = s[3];
    if (static_cast<Index>(patterns.size()) != N)
        throw std::invalid_argument("masked_reconstruct: " + std::to_string(patterns.size()) + " masks for " +
                                    std::to_string(N) + " images");
    if (C != module.channels())
        throw ShapeError(module.identifier() + ": expected " + std::to_string(module.channels()) + " channels, got " +
                         std::to_string(C));
    const Index R = module.input_resolution();
    if (H != R || W != R)
        throw ShapeError(module.identifier() + ": expected " + std::to_string(R) + "x" + std::to_string(R) +
                         " input, got " + std::to_string(H) + "x" + std::to_string(W));
    for (const auto& p : patterns)
        if (p.patch_size != module.patch_size() || p.grid_h * p.patch_size != R || p.grid_w * p.patch_size != R)
            throw std::invalid_argument("mask pattern " + std::to_string(p.grid_h) + "x" + std::to_string(p.grid_w) +
                                        " of patch " + std::to_string(p.patch_size) +
                                        " incompatible with module patch size " + std::to_string(module.patch_size()) +
                                        " at resolution " + std::to_string(R));

    const Tensor hidden = batch_pixel_mask(patterns, C, H, W);
    Tensor keep = Tensor::like(hidden);
    Tensor fill = Tensor::like(hidden);
    for (Index i = 0; i < hidden.size(); ++i) {
        keep[i] = 1.0 - hidden[i];
        fill[i] = fill_value * hidden[i];
    }
    const ad::Var passthrough = ad::mul_const(g, images, keep);
    const ad::Var visible = fill_value == 0.0 ? passthrough : ad::add_const(g, passthrough, fill);
    const ad::Var predicted = module.predict(g, visible, hidden);
    return ad::add(g, passthrough, ad::mul_const(g, predicted, hidden));
}

Tensor masked_reconstruct(const ReconstructionModule& module, const Tensor& images,
                          const std::vector<MaskPattern>& patterns, double fill_value) {
    ad::Graph g;
    return g.value(masked_reconstruct(g, module, g.constant(images), patterns, fill_value));
}

}  // namespace cag
