#include "doctest.h"

#include "cag/losses.hpp"
#include "cag/masking.hpp"
#include "support.hpp"

using namespace cag;
using cag::test::random_images;

namespace {

// h(x) = flattened pixels, f = W h with no bias.
class LinearProbe final : public GeneralizedClassifier {
public:
    LinearProbe(int res, int classes, std::uint64_t seed) : res_(res), w_({classes, res * res}) {
        Rng rng(seed);
        std::normal_distribution<double> nd(0.0, 1.0);
        for (double& v : w_.storage()) v = nd(rng);
    }
    int num_classes() const override { return static_cast<int>(w_.dim(0)); }
    int feature_dim() const override { return res_ * res_; }
    int input_resolution() const override { return res_; }
    int input_channels() const override { return 1; }
    std::string identifier() const override { return "linear-probe"; }
    ModelOutput forward(ad::Graph& g, ad::Var images) const override {
        const Index n = g.shape(images)[0];
        const ad::Var h = ad::reshape(g, images, {n, static_cast<Index>(res_) * res_});
        return {h, head(g, h)};
    }
    ad::Var head(ad::Graph& g, ad::Var features) const override {
        return ad::matmul_nt(g, features, g.parameter(w_));
    }

private:
    int res_;
    Tensor w_;
};

class FixedImageEncoder final : public ImageEncoder {
public:
    explicit FixedImageEncoder(Tensor embedding) : e_(std::move(embedding)) {}
    int embedding_dim() const override { return static_cast<int>(e_.size()); }
    int input_resolution() const override { return 4; }
    int input_channels() const override { return 1; }
    std::string identifier() const override { return "fixed"; }
    ad::Var embed(ad::Graph& g, ad::Var images) const override {
        const Index n = g.shape(images)[0];
        Tensor rows({n, static_cast<Index>(e_.size())});
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < e_.size(); ++j) rows[i * e_.size() + j] = e_[j];
        return g.constant(rows);
    }

private:
    Tensor e_;
};

class FixedTextEncoder final : public TextEncoder {
public:
    explicit FixedTextEncoder(Tensor rows) : rows_(std::move(rows)) {}
    int embedding_dim() const override { return static_cast<int>(rows_.dim(1)); }
    ad::Var embed(ad::Graph& g, const std::vector<std::string>& texts) const override {
        Tensor t({static_cast<Index>(texts.size()), rows_.dim(1)});
        for (Index i = 0; i < t.size(); ++i) t[i] = rows_[i % rows_.size()];
        return g.constant(t);
    }

private:
    Tensor rows_;
};

double member_loss(const GeneralizedClassifier& m, const Tensor& x, int target) {
    ad::Graph g;
    const ModelOutput o = forward_adapted(m, g, g.input(x));
    return g.value(m.classification_loss(g, o, target))[0];
}

LossFn classification_fn(const GeneralizedClassifier& m, int target) {
    return [&m, target](ad::Graph& g, ad::Var x) { return m.classification_loss(g, forward_adapted(m, g, x), target); };
}

}  // namespace

TEST_CASE("zero image into bias-free linear probe gives zero logits") {
    const LinearProbe probe(4, 3, 1);
    const RowMatrix logits = predict_logits(probe, Tensor({2, 1, 4, 4}));
    CHECK(logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("duplicated rows give identical logits and features") {
    const auto m = cag::test::tiny_conv(3);
    Tensor x = random_images(2, 1, 8, 7);
    std::copy(x.data(), x.data() + 64, x.data() + 64);
    const RowMatrix l = predict_logits(*m, x);
    const RowMatrix f = extract_features(*m, x);
    CHECK(l.row(0) == l.row(1));
    CHECK(f.row(0) == f.row(1));
}

TEST_CASE("head of features reproduces logits exactly") {
    const auto conv = cag::test::tiny_conv(4);
    const auto attn = cag::test::tiny_attention(5);
    const Tensor x = random_images(5, 1, 8, 9);
    for (const GeneralizedClassifier* m : {static_cast<const GeneralizedClassifier*>(conv.get()),
                                           static_cast<const GeneralizedClassifier*>(attn.get())}) {
        const RowMatrix logits = predict_logits(*m, x);
        CHECK(logits.cols() == m->num_classes());
        CHECK(extract_features(*m, x).cols() == m->feature_dim());
        CHECK(apply_head(*m, extract_features(*m, x)) == logits);
    }
}

TEST_CASE("forward map is bit-deterministic") {
    const auto m = cag::test::tiny_attention(6);
    const Tensor x = random_images(3, 1, 8, 10);
    CHECK(predict_logits(*m, x) == predict_logits(*m, x));
}

TEST_CASE("wrong channel count is rejected with both counts in the message") {
    const auto m = cag::test::tiny_conv(1);
    try {
        predict_logits(*m, Tensor({1, 3, 8, 8}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find('1') != std::string::npos);
        CHECK(msg.find('3') != std::string::npos);
    }
}

TEST_CASE("inputs at another resolution are resized to the model resolution") {
    const auto m = cag::test::tiny_conv(2, 8);
    const RowMatrix l = predict_logits(*m, random_images(2, 1, 16, 3));
    CHECK(l.rows() == 2);
    CHECK(l.allFinite());
}

TEST_CASE("input gradient of simple losses") {
    const Tensor x = random_images(2, 1, 4, 11);
    SUBCASE("sum of pixels gives all ones") {
        const Tensor grad = input_gradient([](ad::Graph& g, ad::Var v) { return ad::sum(g, v); }, x);
        for (double v : grad.values()) CHECK(v == 1.0);
    }
    SUBCASE("half squared norm gives x") {
        const Tensor grad =
            input_gradient([](ad::Graph& g, ad::Var v) { return ad::scale(g, ad::sum(g, ad::square(g, v)), 0.5); }, x);
        for (Index i = 0; i < x.size(); ++i) CHECK(grad[i] == doctest::Approx(x[i]).epsilon(1e-15));
    }
}

TEST_CASE("non-finite loss carries the step index") {
    const Tensor x = random_images(1, 1, 4, 12);
    try {
        input_gradient([](ad::Graph& g, ad::Var v) { return ad::scale(g, ad::sum(g, v), std::nan("")); }, x, 17);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(e.step() == 17);
    }
}

TEST_CASE("classifier gradients match central differences") {
    const Tensor x = random_images(2, 1, 8, 13);
    CHECK(cag::test::finite_difference_error(classification_fn(*cag::test::tiny_conv(21), 1), x) < 1e-4);
    CHECK(cag::test::finite_difference_error(classification_fn(*cag::test::tiny_attention(22), 2), x) < 1e-4);
}

TEST_CASE("ensemble loss is the weighted sum of member losses") {
    const auto conv = cag::test::tiny_conv(31);
    const auto attn = cag::test::tiny_attention(32);
    const Tensor x = random_images(3, 1, 8, 14);

    SUBCASE("single member, weight one, is bitwise equal") {
        const auto e = make_ensemble({{conv}, {1.0}});
        CHECK(member_loss(*e, x, 1) == member_loss(*conv, x, 1));
        CHECK(e->feature_dim() == conv->feature_dim());
    }
    SUBCASE("two identical members at one half") {
        const auto e = make_ensemble({{conv, conv}, {0.5, 0.5}});
        CHECK(member_loss(*e, x, 2) == doctest::Approx(member_loss(*conv, x, 2)).epsilon(1e-14));
        CHECK(e->feature_dim() == 2 * conv->feature_dim());
    }
    SUBCASE("conv + attention gradient is the mean of member gradients") {
        const auto e = make_ensemble({{conv, attn}, {0.5, 0.5}});
        const Tensor ge = input_gradient(classification_fn(*e, 0), x);
        const Tensor gc = input_gradient(classification_fn(*conv, 0), x);
        const Tensor ga = input_gradient(classification_fn(*attn, 0), x);
        double worst = 0.0;
        for (Index i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(ge[i] - 0.5 * (gc[i] + ga[i])));
        CHECK(worst < 1e-10);
        CHECK(cag::test::finite_difference_error(classification_fn(*e, 0), x) < 1e-4);
        CHECK(member_loss(*e, x, 0) ==
              doctest::Approx(0.5 * member_loss(*conv, x, 0) + 0.5 * member_loss(*attn, x, 0)).epsilon(1e-13));
    }
    SUBCASE("invalid specs are rejected") {
        CHECK_THROWS_AS(make_ensemble({{conv, attn}, {0.5, 0.6}}), std::invalid_argument);
        CHECK_THROWS_AS(make_ensemble({{conv}, {0.5, 0.5}}), std::invalid_argument);
        CHECK_THROWS_AS(make_ensemble({{conv, cag::test::tiny_conv(1, 8, 4)}, {0.5, 0.5}}), std::invalid_argument);
        CHECK_THROWS_AS(make_ensemble({{conv, attn}, {1.5, -0.5}}), std::invalid_argument);
    }
}

TEST_CASE("text classifier logits are temperature-scaled cosines") {
    SUBCASE("one prompt aligned with the image gives tau") {
        const Tensor e({3}, std::vector<double>{0.6, 0.0, 0.8});
        const auto clf = text_to_classifier(std::make_shared<FixedImageEncoder>(e),
                                            std::make_shared<FixedTextEncoder>(Tensor({1, 3}, e.storage())),
                                            {"only"}, 100.0);
        CHECK(clf->num_classes() == 1);
        CHECK(predict_logits(*clf, Tensor({1, 1, 4, 4}))(0, 0) == doctest::Approx(100.0).epsilon(1e-12));
    }
    SUBCASE("orthogonal prompts pick the aligned one") {
        const auto clf = text_to_classifier(
            std::make_shared<FixedImageEncoder>(Tensor({2}, std::vector<double>{2.0, 0.0})),
            std::make_shared<FixedTextEncoder>(Tensor({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0})), {"a", "b"});
        CHECK(predict_labels(*clf, Tensor({1, 1, 4, 4}))[0] == 0);
        CHECK(clf->feature_dim() == 2);
    }
    SUBCASE("dimension mismatch and empty prompts are rejected") {
        auto img = std::make_shared<FixedImageEncoder>(Tensor({2}, std::vector<double>{1.0, 0.0}));
        auto txt = std::make_shared<FixedTextEncoder>(Tensor({1, 3}, std::vector<double>{1.0, 0.0, 0.0}));
        CHECK_THROWS_AS(text_to_classifier(img, txt, {"a"}), ShapeError);
        CHECK_THROWS_AS(text_to_classifier(img, txt, {}), std::invalid_argument);
    }
}
