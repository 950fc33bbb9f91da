#include "doctest.h"

#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/QR>

#include "cag/losses.hpp"
#include "support.hpp"

using namespace cag;
using cag::test::random_images;
using cag::test::random_matrix;

namespace {

std::vector<double> row(std::initializer_list<double> v) { return v; }

LabeledImages toy_dataset(Index per_class, int classes, std::uint64_t seed) {
    LabeledImages d;
    d.images = random_images(per_class * classes, 1, 8, seed);
    d.num_classes = classes;
    for (Index i = 0; i < per_class * classes; ++i) d.labels.push_back(static_cast<int>(i % classes));
    return d;
}

ClassStatistics stats_of(const RowMatrix& f, int id = 0) {
    const FeatureMoments m = batch_statistics(f);
    return {id, m.mean, m.var, static_cast<long>(f.rows())};
}

}  // namespace

TEST_CASE("classification loss") {
    const std::vector<double> uniform(10, 0.3);
    CHECK(classification_loss(uniform, 4) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    std::vector<double> saturated(10, 0.0);
    saturated[2] = 100.0;
    CHECK(classification_loss(saturated, 2) < 1e-10);
    CHECK(classification_loss(saturated, 2) >= 0.0);
    const double expect = -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(1.0) + 1.0));
    CHECK(classification_loss(row({2, 1, 0}), 0) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(std::abs(classification_loss(row({2, 1, 0}), 0) - 0.40761) < 1e-5);
    CHECK_THROWS(classification_loss(row({2, 1, 0}), 3));
    CHECK_THROWS(classification_loss(row({2, 1, 0}), -1));
}

TEST_CASE("distance-metric loss") {
    CHECK(distance_metric_loss(random_matrix(1, 5, 1)) == 0.0);
    RowMatrix two(2, 3);
    two << 0.6, 0.8, 0.0, 0.6, 0.8, 0.0;
    CHECK(distance_metric_loss(two) == doctest::Approx(2.0).epsilon(1e-14));
    const RowMatrix eye = RowMatrix::Identity(3, 3);
    CHECK(distance_metric_loss(eye) == 0.0);

    SUBCASE("orthonormal sets give zero") {
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(random_matrix(6, 6, 2)).householderQ();
        const RowMatrix rows = q.topRows(4);
        CHECK(std::abs(distance_metric_loss(rows)) < 1e-12);
    }
    SUBCASE("sum over ordered pairs, permutation invariant, may be negative") {
        const RowMatrix z = random_matrix(5, 4, 3);
        double brute = 0.0;
        for (Index i = 0; i < 5; ++i)
            for (Index j = 0; j < 5; ++j)
                if (i != j) brute += z.row(i).dot(z.row(j));
        CHECK(distance_metric_loss(z) == doctest::Approx(brute).epsilon(1e-12));
        RowMatrix p = z;
        p.row(0).swap(p.row(3));
        p.row(1).swap(p.row(4));
        CHECK(distance_metric_loss(p) == doctest::Approx(distance_metric_loss(z)).epsilon(1e-12));
        RowMatrix anti(2, 2);
        anti << 1, 0, -1, 0;
        CHECK(distance_metric_loss(anti) == -2.0);
    }
    SUBCASE("cosine mode ignores scale") {
        RowMatrix z = random_matrix(4, 3, 4);
        RowMatrix s = z;
        s.row(2) *= 7.0;
        CHECK(distance_metric_loss(s, DiversityMode::cosine) ==
              doctest::Approx(distance_metric_loss(z, DiversityMode::cosine)).epsilon(1e-12));
    }
}

TEST_CASE("batch statistics") {
    RowMatrix same(3, 2);
    same << 1, 2, 1, 2, 1, 2;
    CHECK(batch_statistics(same).var.cwiseAbs().maxCoeff() == 0.0);
    RowMatrix pair(2, 1);
    pair << 0, 2;
    const FeatureMoments m = batch_statistics(pair);
    CHECK(m.mean[0] == 1.0);
    CHECK(m.var[0] == 2.0);
    CHECK_THROWS_AS(batch_statistics(random_matrix(1, 3, 1)), std::invalid_argument);

    const RowMatrix r = random_matrix(100, 8, 5);
    const FeatureMoments fm = batch_statistics(r);
    for (Index j = 0; j < 8; ++j) {
        double mean = 0.0;
        for (Index i = 0; i < 100; ++i) mean += r(i, j);
        mean /= 100.0;
        double ss = 0.0;
        for (Index i = 0; i < 100; ++i) ss += (r(i, j) - mean) * (r(i, j) - mean);
        CHECK(std::abs(fm.mean[j] - mean) < 1e-12);
        CHECK(std::abs(fm.var[j] - ss / 99.0) < 1e-12);
    }
}

TEST_CASE("distribution loss") {
    const RowMatrix r = random_matrix(10, 4, 6);
    const ClassStatistics s = stats_of(r);
    const FeatureMoments m = batch_statistics(r);
    CHECK(distribution_loss(m.mean, m.var, s) == 0.0);
    Eigen::VectorXd shifted = s.mu;
    shifted[0] += 1.0;
    CHECK(distribution_loss(shifted, s.var, s) == doctest::Approx(1.0).epsilon(1e-12));

    const RowMatrix o = random_matrix(7, 4, 7);
    const FeatureMoments g = batch_statistics(o);
    double hand = 0.0;
    for (Index j = 0; j < 4; ++j)
        hand += (g.mean[j] - s.mu[j]) * (g.mean[j] - s.mu[j]) + (g.var[j] - s.var[j]) * (g.var[j] - s.var[j]);
    CHECK(std::abs(distribution_loss(g.mean, g.var, s) - hand) < 1e-12);
    CHECK(distribution_loss(g.mean, g.var, s) >= 0.0);
    CHECK_THROWS(distribution_loss(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3), s));
}

TEST_CASE("class statistics estimation") {
    const auto conv = cag::test::tiny_conv(8);
    const auto mae = cag::test::tiny_mae(9);

    SUBCASE("identical images with an empty mask have zero variance") {
        LabeledImages d;
        d.images = Tensor({5, 1, 8, 8}, 0.4);
        d.labels = {0, 0, 0, 0, 0};
        d.num_classes = 1;
        const ClassStatistics s = estimate_class_statistics(d, 0, *conv, mae.get(), {0.0, 1, 1, 0.0});
        CHECK(s.var.cwiseAbs().maxCoeff() < 1e-24);
        CHECK(s.count == 5);
    }
    SUBCASE("two-image class equals batch statistics of the two feature rows") {
        const LabeledImages d = toy_dataset(2, 3, 10);
        const ClassStatistics s = estimate_class_statistics(d, 1, *conv, nullptr, {});
        const RowMatrix f = extract_features(*conv, d.class_images(1));
        const FeatureMoments m = batch_statistics(f);
        CHECK(s.mu == m.mean);
        CHECK(s.var == m.var);
        CHECK(s.dim() == conv->feature_dim());
    }
    SUBCASE("deterministic given the seed, sensitive to it through g") {
        const LabeledImages d = toy_dataset(6, 2, 11);
        const StatisticsOptions a{0.75, 3, 2, 0.0}, b{0.75, 4, 2, 0.0};
        const ClassStatistics s1 = estimate_class_statistics(d, 0, *conv, mae.get(), a);
        const ClassStatistics s2 = estimate_class_statistics(d, 0, *conv, mae.get(), a);
        const ClassStatistics s3 = estimate_class_statistics(d, 0, *conv, mae.get(), b);
        CHECK(s1.mu == s2.mu);
        CHECK(s1.var == s2.var);
        CHECK(s1.mu != s3.mu);
        CHECK(s1.count == 12);
    }
    SUBCASE("empty class is rejected") {
        const LabeledImages d = toy_dataset(3, 2, 12);
        CHECK_THROWS_AS(estimate_class_statistics(d, 5, *conv, nullptr, {}), std::invalid_argument);
    }
}

TEST_CASE("class statistics text record round-trips bit-exactly") {
    const RowMatrix r = random_matrix(9, 6, 13);
    ClassStatistics s = stats_of(r, 7);
    s.mu[0] = 1.0 / 3.0;
    s.var[1] = 5e-324;
    std::stringstream ss;
    write_class_statistics(ss, s);
    const ClassStatistics t = read_class_statistics(ss);
    CHECK(t.class_id == 7);
    CHECK(t.count == 9);
    CHECK(t.mu == s.mu);
    CHECK(t.var == s.var);

    std::stringstream bad("cag-stats v999\n");
    CHECK_THROWS(read_class_statistics(bad));
}

TEST_CASE("composite loss") {
    const auto conv = cag::test::tiny_conv(14);
    const auto mae = cag::test::tiny_mae(15);
    const Tensor x = random_images(4, 1, 8, 16);
    Rng rng(17);
    std::vector<MaskPattern> masks;
    for (int i = 0; i < 4; ++i) masks.push_back(sample_mask(4, 4, 0.75, rng, 2));
    const RowMatrix real = random_matrix(20, conv->feature_dim(), 18);
    const ClassStatistics stats = stats_of(real, 1);

    auto value = [&](LossWeights w, const ClassStatistics* st, const Tensor& in = Tensor()) {
        return composite_loss_value(in.empty() ? x : in, 1, *conv, mae.get(), masks, st, {w, DiversityMode::raw, 0.0});
    };

    SUBCASE("classification-only weights give the mean classification loss") {
        const LossBreakdown b = value({1, 0, 0}, nullptr);
        const Tensor g = masked_reconstruct(*mae, x, masks);
        const RowMatrix logits = predict_logits(*conv, g);
        double mean = 0.0;
        for (Index i = 0; i < 4; ++i) {
            std::vector<double> r(logits.row(i).data(), logits.row(i).data() + logits.cols());
            mean += classification_loss(r, 1) / 4.0;
        }
        CHECK(b.total == doctest::Approx(mean).epsilon(1e-12));
        CHECK(b.total == b.cls);
    }
    SUBCASE("div-only weight with one sample is zero") {
        const Tensor one = random_images(1, 1, 8, 19);
        const std::vector<MaskPattern> m1{masks[0]};
        const LossBreakdown b = composite_loss_value(one, 0, *conv, mae.get(), m1, nullptr, {{0, 1, 0}, DiversityMode::raw, 0.0});
        CHECK(b.total == 0.0);
    }
    SUBCASE("unit weights equal the sum of independently computed terms") {
        const LossBreakdown b = value({1, 1, 1}, &stats);
        const Tensor g = masked_reconstruct(*mae, x, masks);
        const RowMatrix f = extract_features(*conv, g);
        const RowMatrix logits = apply_head(*conv, f);
        double cls = 0.0;
        for (Index i = 0; i < 4; ++i) {
            std::vector<double> r(logits.row(i).data(), logits.row(i).data() + logits.cols());
            cls += classification_loss(r, 1) / 4.0;
        }
        const FeatureMoments m = batch_statistics(f);
        const double expect = cls + distance_metric_loss(f) + distribution_loss(m.mean, m.var, stats);
        CHECK(std::abs(b.total - expect) < 1e-10);
        CHECK(std::abs(b.cls - cls) < 1e-12);
        CHECK(std::abs(b.div - distance_metric_loss(f)) < 1e-10);
    }
    SUBCASE("linear in weights, breakdown reported before weighting") {
        const LossBreakdown a = value({1, 0.1, 0.1}, &stats), b = value({1, 0.2, 0.1}, &stats);
        CHECK(a.div == b.div);
        CHECK((b.total - a.total) == doctest::Approx(0.1 * a.div).epsilon(1e-9));
    }
    SUBCASE("missing statistics with w_dist > 0 is rejected") {
        CHECK_THROWS_AS(value({1, 0, 0.5}, nullptr), std::invalid_argument);
    }
    SUBCASE("gradient matches central differences") {
        for (DiversityMode mode : {DiversityMode::raw, DiversityMode::cosine}) {
            const LossFn f = [&](ad::Graph& g, ad::Var v) {
                return composite_loss(g, v, 1, *conv, mae.get(), masks, &stats, {{1, 0.1, 0.1}, mode, 0.0}).total;
            };
            CHECK(cag::test::finite_difference_error(f, x) < 1e-4);
        }
    }
}
