#include "doctest.h"

#include <atomic>
#include <cmath>

#include "cag/sampler.hpp"
#include "support.hpp"

using namespace cag;
using cag::test::random_images;

namespace {

SamplerConfig small_config(std::uint64_t seed = 5) {
    SamplerConfig c;
    c.stages = {{4, 4}, {8, 4}};
    c.batch_size = 3;
    c.target_class = 1;
    c.seed = seed;
    c.step_size = 0.05;
    c.weights = {1.0, 0.1, 0.0};
    return c;
}

SamplerModels small_models() {
    return {cag::test::tiny_conv(40), cag::test::tiny_mae(41), nullptr};
}

// Logits turn NaN after a fixed number of forward passes.
class PoisonAfter final : public GeneralizedClassifier {
public:
    PoisonAfter(ClassifierPtr inner, int calls) : inner_(std::move(inner)), left_(calls) {}
    int num_classes() const override { return inner_->num_classes(); }
    int feature_dim() const override { return inner_->feature_dim(); }
    int input_resolution() const override { return inner_->input_resolution(); }
    int input_channels() const override { return inner_->input_channels(); }
    std::string identifier() const override { return "poison"; }
    ModelOutput forward(ad::Graph& g, ad::Var images) const override {
        ModelOutput o = inner_->forward(g, images);
        if (left_-- <= 0) o.logits = ad::scale(g, o.logits, std::nan(""));
        return o;
    }
    ad::Var head(ad::Graph& g, ad::Var features) const override { return inner_->head(g, features); }

private:
    ClassifierPtr inner_;
    mutable std::atomic<int> left_;
};

}  // namespace

TEST_CASE("init input is deterministic, clamped and near N(0.5, 0.2)") {
    SamplerConfig c = small_config();
    c.batch_size = 64;
    c.stages = {{16, 1}};
    const ImageBatch a = init_input(c, 9), b = init_input(c, 9), other = init_input(c, 10);
    CHECK(a.data == b.data);
    CHECK_FALSE(a.data == other.data);
    CHECK(a.count() == 64);
    CHECK(a.resolution() == 16);
    double mean = 0.0, sq = 0.0;
    for (double v : a.data.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mean += v;
        sq += v * v;
    }
    const double n = static_cast<double>(a.data.size());
    mean /= n;
    const double sd = std::sqrt(sq / n - mean * mean);
    CHECK(std::abs(mean - 0.5) < 0.02);
    CHECK(std::abs(sd - 0.2) < 0.02);
}

TEST_CASE("gradient blur") {
    const auto k = gaussian_kernel(1.0);
    CHECK(k.size() == 7);
    double sum = 0.0;
    for (double v : k) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));

    SUBCASE("constant gradient is unchanged") {
        const Tensor g({2, 1, 9, 9}, 0.3);
        const Tensor b = gradient_blur(g, 1.5);
        for (double v : b.values()) CHECK(v == doctest::Approx(0.3).epsilon(1e-13));
    }
    SUBCASE("sigma zero is the identity") {
        const Tensor g = random_images(2, 1, 6, 1, -1.0, 1.0);
        CHECK(gradient_blur(g, 0.0) == g);
    }
    SUBCASE("an interior impulse becomes the outer product of the kernel") {
        Tensor g({1, 1, 15, 15}, 0.0);
        g[7 * 15 + 7] = 1.0;
        const Tensor b = gradient_blur(g, 1.0);
        for (int dy = -3; dy <= 3; ++dy)
            for (int dx = -3; dx <= 3; ++dx)
                CHECK(b[(7 + dy) * 15 + 7 + dx] == doctest::Approx(k[3 + dy] * k[3 + dx]).epsilon(1e-13));
        CHECK(b[0] == 0.0);
    }
}

TEST_CASE("upsampling between stages") {
    SUBCASE("constant images stay constant") {
        const Tensor u = upsample(ImageBatch{Tensor({1, 1, 4, 4}, 0.7), 0}, 8).data;
        for (double v : u.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-14));
    }
    SUBCASE("checkerboard corners keep their values") {
        Tensor t({1, 1, 2, 2});
        t[0] = 0.0;
        t[1] = 1.0;
        t[2] = 1.0;
        t[3] = 0.0;
        const Tensor u = upsample(ImageBatch{t, 0}, 4).data;
        CHECK(u[0] == 0.0);
        CHECK(u[3] == 1.0);
        CHECK(u[12] == 1.0);
        CHECK(u[15] == 0.0);
    }
    SUBCASE("smooth images survive an upsample and area downsample") {
        Tensor t({1, 1, 8, 8});
        for (Index y = 0; y < 8; ++y)
            for (Index x = 0; x < 8; ++x) t[y * 8 + x] = 0.5 + 0.3 * std::sin(0.4 * static_cast<double>(x + y));
        const Tensor back = area_downsample(upsample(ImageBatch{t, 0}, 16).data, 2);
        double mae = 0.0;
        for (Index i = 0; i < t.size(); ++i) mae += std::abs(back[i] - t[i]) / static_cast<double>(t.size());
        CHECK(mae < 0.02);
    }
}

TEST_CASE("sampler step") {
    const SamplerConfig c = small_config();
    const SamplerModels m = small_models();
    SamplerState s;
    s.images = init_input(c, c.seed).data;

    SUBCASE("zero step size leaves the images unchanged") {
        SamplerConfig z = c;
        z.step_size = 0.0;
        for (OptimizerKind k : {OptimizerKind::adam, OptimizerKind::plain}) {
            z.optimizer = k;
            SamplerState t = s;
            sampler_step(t, z, m);
            CHECK(t.images == s.images);
            CHECK(t.step == 1);
        }
    }
    SUBCASE("same state and step give the same result") {
        SamplerState a = s, b = s;
        const LogEntry ea = sampler_step(a, c, m), eb = sampler_step(b, c, m);
        CHECK(a == b);
        CHECK(ea == eb);
        CHECK(ea.step == 1);
        CHECK(ea.mask_stamp == mask_stamp(c, 1));
        CHECK_FALSE(a.images == s.images);
    }
    SUBCASE("masks are reproducible per step and differ across steps") {
        const auto m1 = step_masks(c, *m.reconstruction, 3), m2 = step_masks(c, *m.reconstruction, 3);
        const auto m3 = step_masks(c, *m.reconstruction, 4);
        CHECK(m1.size() == 3);
        bool same = true, differs = false;
        for (std::size_t i = 0; i < m1.size(); ++i) {
            same = same && m1[i].masked == m2[i].masked;
            differs = differs || m1[i].masked != m3[i].masked;
        }
        CHECK(same);
        CHECK(differs);
    }
}

TEST_CASE("progressive generation bookkeeping") {
    SamplerConfig c = small_config();
    c.stages = {{4, 3}, {8, 5}};
    const GenerationResult r = progressive_generate(c, small_models());
    CHECK(r.record.log.size() == 8);
    CHECK(r.record.stage_images.size() == 2);
    CHECK(r.record.stage_images[0].dim(2) == 4);
    CHECK(r.images.resolution() == 8);
    CHECK(r.record.finished);
    CHECK_FALSE(r.record.aborted);
    for (long i = 0; i < 8; ++i) CHECK(r.record.log[static_cast<std::size_t>(i)].step == i + 1);
    CHECK(r.record.log[2].resolution == 4);
    CHECK(r.record.log[3].resolution == 8);
    CHECK(r.record.log[3].stage == 1);
    CHECK(r.record.final_images == r.record.stage_images[1]);
    CHECK(r.record.checkpoint.step == 8);
    for (const Tensor& t : r.record.stage_images)
        for (double v : t.values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    CHECK_NOTHROW(r.images.validate());
}

TEST_CASE("split stages") {
    CHECK(split_stages({16, 32}, 200) == std::vector<Stage>{{16, 100}, {32, 100}});
    CHECK(split_stages({8, 16, 32}, 100) == std::vector<Stage>{{8, 50}, {16, 25}, {32, 25}});
    CHECK(split_stages({14, 28}, 2001) == std::vector<Stage>{{14, 1001}, {28, 1000}});
}

TEST_CASE("zero steps return the initial batch") {
    SamplerConfig c = small_config();
    c.stages = {{8, 0}};
    const GenerationResult r = progressive_generate(c, small_models());
    CHECK(r.record.log.empty());
    CHECK(r.images.data == init_input(c, c.seed).data);
}

TEST_CASE("fast mode halves the budget and switches blur on") {
    SamplerConfig c = small_config();
    c.fast_mode = true;
    const SamplerConfig e = c.effective();
    CHECK(e.total_steps() == c.total_steps() / 2);
    CHECK(e.blur_sigma == c.fast_blur_sigma);
}

TEST_CASE("whole runs are bit-reproducible and resumable") {
    SamplerConfig c = small_config();
    c.checkpoint_every = 3;
    const SamplerModels m = small_models();
    const GenerationResult full = progressive_generate(c, m);
    CHECK(full.record.log == progressive_generate(c, m).record.log);
    CHECK(full.images.data == progressive_generate(c, m).images.data);

    std::vector<RunRecord> partial;
    progressive_generate(c, m, {[&](const RunRecord& r) { partial.push_back(r); }, {}});
    REQUIRE(partial.size() >= 3);
    for (const RunRecord& p : {partial[1], partial[partial.size() / 2]}) {
        const GenerationResult resumed = resume_generate(p, c, m);
        CHECK(resumed.record.log == full.record.log);
        CHECK(resumed.images.data == full.images.data);
        CHECK(resumed.record.stage_images == full.record.stage_images);
        CHECK(resumed.record.checkpoint == full.record.checkpoint);
    }
}

TEST_CASE("a non-finite loss aborts and keeps the last valid state") {
    SamplerConfig c = small_config();
    const SamplerModels clean = small_models();
    const auto poison = std::make_shared<PoisonAfter>(clean.classifier, 5);
    const GenerationResult r = progressive_generate(c, {poison, clean.reconstruction, nullptr});
    CHECK(r.record.aborted);
    CHECK_FALSE(r.record.finished);
    CHECK_FALSE(r.record.failure.empty());
    const long done = r.record.checkpoint.step;
    CHECK(done < c.total_steps());
    CHECK(static_cast<long>(r.record.log.size()) == done);
    for (double v : r.record.checkpoint.images.values()) CHECK(std::isfinite(v));

    SamplerConfig shorter = c;
    shorter.stages = {{4, 4}, {8, static_cast<int>(done) - 4}};
    REQUIRE(done > 4);
    CHECK(progressive_generate(shorter, clean).images.data == r.record.checkpoint.images);
}

TEST_CASE("the adversarial baseline attacks the plain classifier") {
    SamplerConfig c = small_config();
    c.weights = {1, 0, 0};
    c.stages = {{8, 30}};
    c.step_size = 0.05;
    const GenerationResult r = adversarial_baseline_generate(c, cag::test::tiny_conv(40));
    CHECK(r.record.log.back().loss.cls < r.record.log.front().loss.cls);
    c.step_size = 0.0;
    CHECK(adversarial_baseline_generate(c, cag::test::tiny_conv(40)).images.data == init_input(c, c.seed).data);
}

TEST_CASE("loss trend") {
    std::vector<LogEntry> log(20);
    for (std::size_t i = 0; i < log.size(); ++i) log[i].loss.total = 20.0 - static_cast<double>(i);
    CHECK(loss_trend_decreasing(log));
    CHECK(median_total_loss(log, 0, 2) == 19.5);
    std::reverse(log.begin(), log.end());
    CHECK_FALSE(loss_trend_decreasing(log));
}
