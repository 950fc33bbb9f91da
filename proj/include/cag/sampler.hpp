#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cag/image.hpp"
#include "cag/losses.hpp"
#include "cag/masking.hpp"
#include "cag/model_interface.hpp"

namespace cag {

enum class OptimizerKind { plain, adam };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct Stage {
    int resolution = 28;
    int steps = 0;

    bool operator==(const Stage&) const = default;
};

struct SamplerConfig {
    std::vector<Stage> stages{{14, 1000}, {28, 1000}};
    double step_size = 0.05;
    OptimizerKind optimizer = OptimizerKind::adam;
    double mask_ratio = 0.75;
    double blur_sigma = 0.0;
    LossWeights weights;
    DiversityMode diversity = DiversityMode::raw;
    double fill_value = 0.0;
    std::uint64_t seed = 0;
    int batch_size = 16;
    int target_class = 0;
    int channels = 1;
    bool fast_mode = false;
    double fast_blur_sigma = 1.0;
    double fast_step_fraction = 0.5;
    int checkpoint_every = 0;  // 0: only at stage ends

    void validate() const;
    long total_steps() const;
    // Fast mode applied: every stage budget scaled by fast_step_fraction and
    // blur switched on (fast_blur_sigma) unless an explicit sigma is set.
    SamplerConfig effective() const;
};

// Splits `total` steps over `resolutions`: 50/25/25 for three stages, equal
// shares otherwise; the last stage absorbs rounding.
std::vector<Stage> split_stages(const std::vector<int>& resolutions, long total);

struct SamplerModels {
    ClassifierPtr classifier;
    ReconstructionPtr reconstruction;  // null: adversarial baseline (no g in the path)
    const ClassStatistics* stats = nullptr;
};

struct LogEntry {
    long step = 0;  // 1-based global step index
    int stage = 0;
    int resolution = 0;
    LossBreakdown loss;
    double grad_norm = 0.0;
    double hit_rate = 0.0;  // fraction of samples whose logits argmax equals the target
    std::uint64_t mask_stamp = 0;

    bool operator==(const LogEntry& o) const;
};

// Everything needed to continue a run exactly.
struct SamplerState {
    Tensor images;  // [N,C,R,R]
    Tensor adam_m, adam_v;
    long adam_t = 0;
    long step = 0;  // steps completed
    int stage = 0;
    int stage_step = 0;  // steps completed inside `stage`

    bool operator==(const SamplerState&) const = default;
};

struct RunRecord {
    SamplerConfig config;
    Tensor initial;
    std::vector<LogEntry> log;
    std::vector<Tensor> stage_images;
    Tensor final_images;
    SamplerState checkpoint;  // latest valid state
    bool aborted = false;
    bool finished = false;  // every stage ran to its budget
    std::string failure;
    double wall_seconds = 0.0;
};

struct GenerationResult {
    ImageBatch images;
    RunRecord record;
};

// N(0.5, 0.2) pixels clamped to [0,1] at the first stage resolution; sample
// i draws from its own stream (seed, init, i, 0).
ImageBatch init_input(const SamplerConfig& config, std::uint64_t seed);

// Normalized sampled Gaussian, radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);
// Separable per-channel blur with half-sample symmetric reflection.
Tensor gradient_blur(const Tensor& grad, double sigma);

// Masks for every sample at a step: stream (seed, sampler_mask, i, step).
std::vector<MaskPattern> step_masks(const SamplerConfig& config, const ReconstructionModule& module, long step);
std::uint64_t mask_stamp(const SamplerConfig& config, long step);

// One optimization step at state.step + 1. Throws NonFiniteError on a
// non-finite loss or gradient, leaving `state` untouched.
LogEntry sampler_step(SamplerState& state, const SamplerConfig& config, const SamplerModels& models);

struct RunCallbacks {
    // The record so far; record.checkpoint is the state just taken.
    std::function<void(const RunRecord&)> on_checkpoint;
    std::function<void(const LogEntry&)> on_step;
};

GenerationResult progressive_generate(const SamplerConfig& config, const SamplerModels& models,
                                      const RunCallbacks& callbacks = {});
// Continues `partial` from its checkpoint; the log is truncated to the
// checkpoint step first.
GenerationResult resume_generate(const RunRecord& partial, const SamplerConfig& config, const SamplerModels& models,
                                 const RunCallbacks& callbacks = {});
// The same loop without the reconstruction module.
GenerationResult adversarial_baseline_generate(const SamplerConfig& config, ClassifierPtr model,
                                               const ClassStatistics* stats = nullptr,
                                               const RunCallbacks& callbacks = {});

// Post-hoc view of a final batch. Features pass through g with evaluation
// masks (seed, evaluation, i, 0x5E7A) when `reconstruction` is set, so runs
// with and without g in the loop are scored in one space.
struct BatchSummary {
    double hit_rate = 0.0;        // plain f(x) argmax == target
    double distribution_loss = 0.0;
    double mean_distance = 0.0;   // |gen_mean - mu_c|
    double diversity = 0.0;       // mean pairwise cosine of h(x)
};
BatchSummary summarize_batch(const Tensor& images, int target, const GeneralizedClassifier& classifier,
                             const ReconstructionModule* reconstruction, const ClassStatistics& stats,
                             double mask_ratio, std::uint64_t seed);

// Trend statistics on the composite loss.
double median_total_loss(const std::vector<LogEntry>& log, std::size_t begin, std::size_t end);
// Median over the last decile of steps < median over the first decile.
bool loss_trend_decreasing(const std::vector<LogEntry>& log);

}  // namespace cag
