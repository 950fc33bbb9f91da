#include "doctest.h"

#include <cmath>
#include <sstream>

#include "cag/metrics.hpp"
#include "support.hpp"

using namespace cag;
using cag::test::random_matrix;

namespace {

RowMatrix random_probabilities(Index n, Index k, std::uint64_t seed) {
    RowMatrix p = random_matrix(n, k, seed).array().exp();
    for (Index i = 0; i < n; ++i) p.row(i) /= p.row(i).sum();
    return p;
}

}  // namespace

TEST_CASE("gaussian summary") {
    RowMatrix same(4, 3);
    same.rowwise() = Eigen::RowVector3d(1, 2, 3);
    CHECK(gaussian_summary(same).covariance.cwiseAbs().maxCoeff() == 0.0);

    RowMatrix two(2, 2);
    two << 1, 0, -1, 0;
    const GaussianSummary s = gaussian_summary(two);
    CHECK(s.mean == Eigen::Vector2d(0, 0));
    CHECK(s.covariance == Eigen::Matrix2d((Eigen::Matrix2d() << 2, 0, 0, 0).finished()));
    CHECK(s.count == 2);
    CHECK_THROWS_AS(gaussian_summary(random_matrix(1, 3, 1)), std::invalid_argument);

    const RowMatrix r = random_matrix(200, 6, 2);
    const GaussianSummary g = gaussian_summary(r);
    for (Index a = 0; a < 6; ++a)
        for (Index b = 0; b < 6; ++b) {
            double ma = 0.0, mb = 0.0;
            for (Index i = 0; i < 200; ++i) {
                ma += r(i, a) / 200.0;
                mb += r(i, b) / 200.0;
            }
            double c = 0.0;
            for (Index i = 0; i < 200; ++i) c += (r(i, a) - ma) * (r(i, b) - mb);
            CHECK(std::abs(g.covariance(a, b) - c / 199.0) < 1e-10);
            CHECK(std::abs(g.covariance(a, b) - g.covariance(b, a)) < 1e-10);
        }
    CHECK_NOTHROW(g.validate());
}

TEST_CASE("frechet distance") {
    const GaussianSummary a = gaussian_summary(random_matrix(50, 5, 3));
    CHECK(std::abs(frechet_distance(a, a)) <= 1e-8);

    GaussianSummary b = a;
    const Eigen::VectorXd v = random_matrix(5, 1, 4).col(0);
    b.mean += v;
    CHECK(std::abs(frechet_distance(a, b) - v.squaredNorm()) <= 1e-8);

    GaussianSummary d4{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 4.0), 10};
    GaussianSummary d1{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 1.0), 10};
    CHECK(frechet_distance(d4, d1) == doctest::Approx(1.0).epsilon(1e-12));

    const GaussianSummary c = gaussian_summary(random_matrix(40, 5, 5) * 2.0);
    const double ac = frechet_distance(a, c), ca = frechet_distance(c, a);
    CHECK(ac >= -1e-10);
    CHECK(std::abs(ac - ca) < 1e-8 * std::max(1.0, ac));

    SUBCASE("commuting diagonal covariances have the closed form") {
        Eigen::VectorXd sa(3), sb(3);
        sa << 4, 9, 1;
        sb << 1, 4, 16;
        const GaussianSummary x{Eigen::VectorXd::Zero(3), sa.asDiagonal().toDenseMatrix(), 10};
        const GaussianSummary y{Eigen::VectorXd::Ones(3), sb.asDiagonal().toDenseMatrix(), 10};
        const double expect = 3.0 + (sa.array().sqrt() - sb.array().sqrt()).square().sum();
        CHECK(frechet_distance(x, y) == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("matching dimensions are required") {
        const GaussianSummary small = gaussian_summary(random_matrix(10, 2, 6));
        CHECK_THROWS(frechet_distance(a, small));
    }
}

TEST_CASE("inception score") {
    RowMatrix same(20, 4);
    same.rowwise() = Eigen::RowVector4d(0.1, 0.2, 0.3, 0.4);
    CHECK(inception_score(same, 1).mean == doctest::Approx(1.0).epsilon(1e-12));

    const RowMatrix eye = RowMatrix::Identity(10, 10);
    CHECK(std::abs(inception_score(eye, 1).mean - 10.0) <= 1e-6);
    CHECK(inception_score(eye, 1).std == 0.0);

    const RowMatrix p = random_probabilities(100, 10, 7);
    const InceptionScore is = inception_score(p, 5);
    std::vector<double> scores;
    for (int s = 0; s < 5; ++s) {
        std::vector<double> marginal(10, 0.0);
        for (int i = 20 * s; i < 20 * (s + 1); ++i)
            for (int k = 0; k < 10; ++k) marginal[k] += p(i, k) / 20.0;
        double kl = 0.0;
        for (int i = 20 * s; i < 20 * (s + 1); ++i)
            for (int k = 0; k < 10; ++k) kl += p(i, k) * std::log(p(i, k) / marginal[k]) / 20.0;
        scores.push_back(std::exp(kl));
    }
    double mean = 0.0, var = 0.0;
    for (double s : scores) mean += s / 5.0;
    for (double s : scores) var += (s - mean) * (s - mean) / 5.0;
    CHECK(std::abs(is.mean - mean) < 1e-9);
    CHECK(std::abs(is.std - std::sqrt(var)) < 1e-9);

    RowMatrix bad = p;
    bad(0, 0) += 0.1;
    CHECK_THROWS_AS(inception_score(bad, 1), std::invalid_argument);
    CHECK_THROWS_AS(inception_score(p.topRows(3), 5), std::invalid_argument);
    const RowMatrix sm = softmax_rows(random_matrix(4, 3, 8));
    for (Index i = 0; i < 4; ++i) CHECK(sm.row(i).sum() == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("diversity score") {
    RowMatrix same(3, 2);
    same.rowwise() = Eigen::RowVector2d(3, 4);
    CHECK(diversity_score(same) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(diversity_score(RowMatrix::Identity(4, 4)) == 0.0);

    RowMatrix zero = RowMatrix::Identity(3, 3);
    zero.row(1).setZero();
    const DiversityResult d = diversity(zero);
    CHECK(d.excluded == 1);
    CHECK(d.pairs == 1);

    const RowMatrix r = random_matrix(12, 5, 9);
    double sum = 0.0;
    long pairs = 0;
    for (Index i = 0; i < 12; ++i)
        for (Index j = i + 1; j < 12; ++j, ++pairs) sum += r.row(i).dot(r.row(j)) / (r.row(i).norm() * r.row(j).norm());
    const double score = diversity_score(r);
    CHECK(std::abs(score - sum / static_cast<double>(pairs)) < 1e-12);
    CHECK(score >= -1.0);
    CHECK(score <= 1.0);
    CHECK_THROWS(diversity_score(random_matrix(1, 3, 1)));
}

TEST_CASE("metric records round-trip") {
    std::vector<MetricRecord> rec{{"fid", 12.5, 0.0, 160, 1000, "conv", ""},
                                  {"inception_score", 1.0 / 3.0, 0.25, 160, 0, "conv", "splits=10"}};
    std::stringstream ss;
    write_metric_records(ss, rec);
    const auto back = read_metric_records(ss);
    REQUIRE(back.size() == 2);
    CHECK(back[1].name == "inception_score");
    CHECK(back[1].value == rec[1].value);
    CHECK(back[1].spread == 0.25);
    CHECK(back[0].reference_samples == 1000);
    CHECK(back[1].note == "splits=10");
}
