#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "cag/architectures.hpp"
#include "cag/model_interface.hpp"
#include "cag/ops.hpp"
#include "cag/rng.hpp"

namespace cag::test {

inline std::shared_ptr<ConvClassifier> tiny_conv(std::uint64_t seed, int res = 8, int classes = 3) {
    ConvClassifierConfig c;
    c.resolution = res;
    c.classes = classes;
    c.conv1 = 2;
    c.conv2 = 3;
    c.hidden = 5;
    auto m = std::make_shared<ConvClassifier>(c);
    Rng rng(seed);
    initialize_parameters(m->parameters(), rng);
    return m;
}

inline std::shared_ptr<AttentionClassifier> tiny_attention(std::uint64_t seed, int res = 8, int classes = 3) {
    AttentionClassifierConfig c;
    c.resolution = res;
    c.classes = classes;
    c.patch = 4;
    c.width = 6;
    c.mlp = 8;
    auto m = std::make_shared<AttentionClassifier>(c);
    Rng rng(seed);
    initialize_parameters(m->parameters(), rng);
    return m;
}

inline std::shared_ptr<MlpMaskedAutoencoder> tiny_mae(std::uint64_t seed, int res = 8, int patch = 2) {
    MaskedAutoencoderConfig c;
    c.resolution = res;
    c.patch = patch;
    c.hidden = 6;
    auto m = std::make_shared<MlpMaskedAutoencoder>(c);
    Rng rng(seed);
    initialize_parameters(m->parameters(), rng);
    return m;
}

inline Tensor random_images(Index n, Index c, Index r, std::uint64_t seed, double lo = 0.1, double hi = 0.9) {
    Tensor t({n, c, r, r});
    Rng rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.storage()) v = u(rng);
    return t;
}

inline RowMatrix random_matrix(Index rows, Index cols, std::uint64_t seed) {
    RowMatrix m(rows, cols);
    Rng rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = nd(rng);
    return m;
}

inline double loss_at(const LossFn& loss, const Tensor& x) {
    ad::Graph g;
    const ad::Var v = g.input(x);
    return g.value(loss(g, v))[0];
}

// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor), where the
// floor is 1e-3 of the largest numeric entry.
inline double finite_difference_error(const LossFn& loss, const Tensor& x, double eps = 1e-4) {
    const Tensor analytic = input_gradient(loss, x);
    Tensor numeric = Tensor::like(x);
    Tensor probe = x;
    for (Index i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + eps;
        const double up = loss_at(loss, probe);
        probe[i] = x[i] - eps;
        const double down = loss_at(loss, probe);
        probe[i] = x[i];
        numeric[i] = (up - down) / (2.0 * eps);
    }
    const double floor = std::max(1e-3 * numeric.max_abs(), 1e-12);
    double worst = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

}  // namespace cag::test
