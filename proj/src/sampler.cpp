#include "cag/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "cag/metrics.hpp"
#include "cag/ops.hpp"
#include "cag/rng.hpp"

namespace cag {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "plain"; }

OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "plain") return OptimizerKind::plain;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected adam or plain)");
}

void SamplerConfig::validate() const {
    if (stages.empty()) throw std::invalid_argument("at least one stage is required");
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (stages[i].resolution < 1) throw std::invalid_argument("stage resolution must be >= 1");
        if (stages[i].steps < 0) throw std::invalid_argument("stage step count must be >= 0");
        if (i && stages[i].resolution <= stages[i - 1].resolution)
            throw std::invalid_argument("stage resolutions must be strictly increasing");
    }
    if (!(step_size >= 0.0)) throw std::invalid_argument("step_size must be >= 0");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("mask_ratio must lie in [0,1]");
    if (!(blur_sigma >= 0.0) || !(fast_blur_sigma >= 0.0)) throw std::invalid_argument("blur sigma must be >= 0");
    if (!(fast_step_fraction > 0.0 && fast_step_fraction <= 1.0))
        throw std::invalid_argument("fast_step_fraction must lie in (0,1]");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (target_class < 0) throw std::invalid_argument("target class must be >= 0");
    if (channels < 1) throw std::invalid_argument("channels must be >= 1");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
    weights.validate();
}

long SamplerConfig::total_steps() const {
    long n = 0;
    for (const auto& s : stages) n += s.steps;
    return n;
}

SamplerConfig SamplerConfig::effective() const {
    if (!fast_mode) return *this;
    SamplerConfig c = *this;
    for (auto& s : c.stages) s.steps = static_cast<int>(std::lround(s.steps * fast_step_fraction));
    if (c.blur_sigma == 0.0) c.blur_sigma = fast_blur_sigma;
    c.fast_mode = false;
    return c;
}

std::vector<Stage> split_stages(const std::vector<int>& resolutions, long total) {
    if (resolutions.empty()) throw std::invalid_argument("no stage resolutions");
    if (total < 0) throw std::invalid_argument("total steps must be >= 0");
    std::vector<double> share(resolutions.size(), 1.0 / static_cast<double>(resolutions.size()));
    if (resolutions.size() == 3) share = {0.5, 0.25, 0.25};
    std::vector<Stage> out;
    long used = 0;
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
        const long n = i + 1 == resolutions.size() ? total - used : std::lround(share[i] * static_cast<double>(total));
        out.push_back({resolutions[i], static_cast<int>(n)});
        used += n;
    }
    return out;
}

bool LogEntry::operator==(const LogEntry& o) const {
    return step == o.step && stage == o.stage && resolution == o.resolution && loss.cls == o.loss.cls &&
           loss.div == o.loss.div && loss.dist == o.loss.dist && loss.total == o.loss.total &&
           grad_norm == o.grad_norm && hit_rate == o.hit_rate && mask_stamp == o.mask_stamp;
}

ImageBatch init_input(const SamplerConfig& config, std::uint64_t seed) {
    const Index N = config.batch_size, C = config.channels, R = config.stages.front().resolution;
    ImageBatch b{Tensor({N, C, R, R}), config.target_class};
    const Index per = C * R * R;
    for (Index i = 0; i < N; ++i) {
        Rng rng = make_stream(seed, StreamDomain::init, static_cast<std::uint64_t>(i), 0);
        std::normal_distribution<double> nd(0.5, 0.2);
        for (Index p = 0; p < per; ++p) b.data[i * per + p] = nd(rng);
    }
    clamp_unit(b.data);
    return b;
}

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0)) return {1.0};
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double s = 0.0;
    for (int j = -r; j <= r; ++j) s += k[static_cast<std::size_t>(j + r)] = std::exp(-0.5 * j * j / (sigma * sigma));
    for (double& v : k) v /= s;
    return k;
}

namespace {

// Half-sample symmetric reflection: ... c b a | a b c ... | c b a ...
Index reflect(Index i, Index n) {
    const Index period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

}  // namespace

Tensor gradient_blur(const Tensor& grad, double sigma) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("blur sigma must be >= 0");
    if (sigma == 0.0) return grad;
    if (grad.rank() != 4) throw std::invalid_argument("gradient_blur expects [N,C,H,W]");
    const std::vector<double> k = gaussian_kernel(sigma);
    const Index r = static_cast<Index>(k.size() / 2);
    const Index planes = grad.dim(0) * grad.dim(1), H = grad.dim(2), W = grad.dim(3);
    Tensor tmp = Tensor::like(grad), out = Tensor::like(grad);
    for (Index p = 0; p < planes; ++p) {
        const double* src = grad.data() + p * H * W;
        double* t = tmp.data() + p * H * W;
        double* dst = out.data() + p * H * W;
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
                double acc = 0.0;
                for (Index j = -r; j <= r; ++j) acc += k[static_cast<std::size_t>(j + r)] * src[y * W + reflect(x + j, W)];
                t[y * W + x] = acc;
            }
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
                double acc = 0.0;
                for (Index j = -r; j <= r; ++j) acc += k[static_cast<std::size_t>(j + r)] * t[reflect(y + j, H) * W + x];
                dst[y * W + x] = acc;
            }
    }
    return out;
}

std::vector<MaskPattern> step_masks(const SamplerConfig& config, const ReconstructionModule& module, long step) {
    const int grid = module.input_resolution() / module.patch_size();
    std::vector<MaskPattern> masks;
    for (int i = 0; i < config.batch_size; ++i) {
        Rng rng = make_stream(config.seed, StreamDomain::sampler_mask, static_cast<std::uint64_t>(i),
                              static_cast<std::uint64_t>(step));
        masks.push_back(sample_mask(grid, grid, config.mask_ratio, rng, module.patch_size()));
    }
    return masks;
}

std::uint64_t mask_stamp(const SamplerConfig& config, long step) {
    return stream_key(config.seed, StreamDomain::sampler_mask, 0, static_cast<std::uint64_t>(step));
}

LogEntry sampler_step(SamplerState& state, const SamplerConfig& config, const SamplerModels& models) {
    if (!models.classifier) throw std::invalid_argument("sampler needs a classifier");
    const long step = state.step + 1;
    const Index N = state.images.dim(0);
    if (N != config.batch_size) throw std::invalid_argument("state batch does not match batch_size");
    std::vector<MaskPattern> masks;
    if (models.reconstruction) masks = step_masks(config, *models.reconstruction, step);

    CompositeOptions opts{config.weights, config.diversity, config.fill_value};
    ad::Graph g;
    const ad::Var x = g.input(state.images);
    const CompositeTerms terms = composite_loss(g, x, config.target_class, *models.classifier,
                                                models.reconstruction.get(), masks, models.stats, opts);
    LogEntry e;
    e.step = step;
    e.stage = state.stage;
    e.resolution = static_cast<int>(state.images.dim(2));
    e.loss = terms.breakdown(g);
    e.mask_stamp = models.reconstruction ? mask_stamp(config, step) : 0;
    {
        const Tensor& logits = g.value(terms.output.logits);
        const ConstMatrixMap lm = logits.matrix(N, logits.size() / N);
        long hits = 0;
        for (Index i = 0; i < N; ++i) {
            Index best = 0;
            lm.row(i).maxCoeff(&best);
            hits += best == config.target_class;
        }
        e.hit_rate = static_cast<double>(hits) / static_cast<double>(N);
    }
    if (!std::isfinite(e.loss.total)) throw NonFiniteError("non-finite loss at step " + std::to_string(step), step);
    g.backward(terms.total);
    Tensor grad = g.grad(x);
    if (!grad.all_finite()) throw NonFiniteError("non-finite gradient at step " + std::to_string(step), step);
    double ss = 0.0;
    for (double v : grad.values()) ss += v * v;
    e.grad_norm = std::sqrt(ss);
    grad = gradient_blur(grad, config.blur_sigma);

    const double lr = config.step_size;
    if (config.optimizer == OptimizerKind::adam) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        if (state.adam_m.shape() != grad.shape()) {
            state.adam_m = Tensor::like(grad);
            state.adam_v = Tensor::like(grad);
            state.adam_t = 0;
        }
        ++state.adam_t;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.adam_t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.adam_t));
        for (Index i = 0; i < grad.size(); ++i) {
            state.adam_m[i] = b1 * state.adam_m[i] + (1.0 - b1) * grad[i];
            state.adam_v[i] = b2 * state.adam_v[i] + (1.0 - b2) * grad[i] * grad[i];
            state.images[i] -= lr * (state.adam_m[i] / c1) / (std::sqrt(state.adam_v[i] / c2) + eps);
        }
    } else {
        for (Index i = 0; i < grad.size(); ++i) state.images[i] -= lr * grad[i];
    }
    clamp_unit(state.images);
    state.step = step;
    ++state.stage_step;
    return e;
}

namespace {

SamplerState initial_state(const SamplerConfig& cfg) {
    SamplerState s;
    s.images = init_input(cfg, cfg.seed).data;
    return s;
}

void check_models(const SamplerConfig& cfg, const SamplerModels& models) {
    if (!models.classifier) throw std::invalid_argument("sampler needs a classifier");
    if (cfg.target_class >= models.classifier->num_classes())
        throw std::invalid_argument("target class " + std::to_string(cfg.target_class) + " outside [0," +
                                    std::to_string(models.classifier->num_classes()) + ")");
    if (cfg.channels != models.classifier->input_channels())
        throw std::invalid_argument("config channels " + std::to_string(cfg.channels) + " do not match classifier (" +
                                    std::to_string(models.classifier->input_channels()) + ")");
    if (cfg.weights.dist > 0.0 && !models.stats)
        throw std::invalid_argument("w_dist > 0 requires class statistics");
}

GenerationResult run_loop(RunRecord record, SamplerState state, const SamplerConfig& cfg, const SamplerModels& models,
                          const RunCallbacks& cb) {
    const auto t0 = std::chrono::steady_clock::now();
    record.checkpoint = state;
    try {
        for (; state.stage < static_cast<int>(cfg.stages.size()); ++state.stage, state.stage_step = 0) {
            const Stage& st = cfg.stages[static_cast<std::size_t>(state.stage)];
            if (state.images.dim(2) != st.resolution) {
                state.images = upsample(ImageBatch{state.images, cfg.target_class}, st.resolution).data;
                state.adam_m = Tensor();
                state.adam_v = Tensor();
                state.adam_t = 0;
            }
            while (state.stage_step < st.steps) {
                SamplerState next = state;
                const LogEntry e = sampler_step(next, cfg, models);
                state = std::move(next);
                record.log.push_back(e);
                if (cb.on_step) cb.on_step(e);
                if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
                    record.checkpoint = state;
                    if (cb.on_checkpoint) cb.on_checkpoint(record);
                }
            }
            if (static_cast<int>(record.stage_images.size()) <= state.stage) record.stage_images.push_back(state.images);
            SamplerState boundary = state;
            ++boundary.stage;
            boundary.stage_step = 0;
            record.checkpoint = boundary;
            if (cb.on_checkpoint) cb.on_checkpoint(record);
        }
        record.finished = true;
    } catch (const NonFiniteError& err) {
        record.checkpoint = state;
        record.aborted = true;
        record.failure = err.what();
    }
    record.final_images = record.aborted ? record.checkpoint.images : state.images;
    record.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    GenerationResult out{ImageBatch{record.final_images, cfg.target_class}, std::move(record)};
    return out;
}

}  // namespace

GenerationResult progressive_generate(const SamplerConfig& config, const SamplerModels& models,
                                      const RunCallbacks& callbacks) {
    config.validate();
    const SamplerConfig cfg = config.effective();
    check_models(cfg, models);
    RunRecord record;
    record.config = config;
    SamplerState state = initial_state(cfg);
    record.initial = state.images;
    return run_loop(std::move(record), std::move(state), cfg, models, callbacks);
}

GenerationResult resume_generate(const RunRecord& partial, const SamplerConfig& config, const SamplerModels& models,
                                 const RunCallbacks& callbacks) {
    config.validate();
    const SamplerConfig cfg = config.effective();
    check_models(cfg, models);
    RunRecord record = partial;
    record.config = config;
    record.aborted = false;
    record.finished = false;
    record.failure.clear();
    const SamplerState& cp = partial.checkpoint;
    if (cp.images.empty()) throw std::invalid_argument("run record has no checkpoint to resume from");
    std::erase_if(record.log, [&](const LogEntry& e) { return e.step > cp.step; });
    record.stage_images.resize(std::min<std::size_t>(record.stage_images.size(), static_cast<std::size_t>(cp.stage)));
    return run_loop(std::move(record), cp, cfg, models, callbacks);
}

GenerationResult adversarial_baseline_generate(const SamplerConfig& config, ClassifierPtr model,
                                               const ClassStatistics* stats, const RunCallbacks& callbacks) {
    return progressive_generate(config, SamplerModels{std::move(model), nullptr, stats}, callbacks);
}

double median_total_loss(const std::vector<LogEntry>& log, std::size_t begin, std::size_t end) {
    end = std::min(end, log.size());
    if (begin >= end) throw std::invalid_argument("empty log range for median");
    std::vector<double> v;
    for (std::size_t i = begin; i < end; ++i) v.push_back(log[i].loss.total);
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

bool loss_trend_decreasing(const std::vector<LogEntry>& log) {
    if (log.size() < 10) return false;
    const std::size_t d = log.size() / 10;
    return median_total_loss(log, log.size() - d, log.size()) < median_total_loss(log, 0, d);
}

BatchSummary summarize_batch(const Tensor& images, int target, const GeneralizedClassifier& classifier,
                             const ReconstructionModule* reconstruction, const ClassStatistics& stats,
                             double mask_ratio, std::uint64_t seed) {
    const Index n = images.dim(0);
    BatchSummary s;
    const std::vector<int> labels = predict_labels(classifier, images);
    s.hit_rate = static_cast<double>(std::count(labels.begin(), labels.end(), target)) / static_cast<double>(n);
    const RowMatrix plain = extract_features(classifier, images);
    s.diversity = diversity_score(plain);
    RowMatrix feats = plain;
    if (reconstruction) {
        const int grid = reconstruction->input_resolution() / reconstruction->patch_size();
        std::vector<MaskPattern> masks;
        for (Index i = 0; i < n; ++i) {
            Rng rng = make_stream(seed, StreamDomain::evaluation, static_cast<std::uint64_t>(i), 0x5E7A);
            masks.push_back(sample_mask(grid, grid, mask_ratio, rng, reconstruction->patch_size()));
        }
        ad::Graph g;
        const ModelOutput out = generation_forward(g, g.constant(images), classifier, reconstruction, masks);
        feats = g.value(out.features).matrix(n, classifier.feature_dim());
    }
    const FeatureMoments m = batch_statistics(feats);
    s.distribution_loss = distribution_loss(m.mean, m.var, stats);
    s.mean_distance = (m.mean - stats.mu).norm();
    return s;
}

}  // namespace cag
