#pragma once

// Flat "key = value" experiment configuration. Unknown keys are errors.
// Precedence when combining sources: flags > file > defaults.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cag/sampler.hpp"

namespace cag {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using KeyValues = std::map<std::string, std::string>;

// '#' starts a comment; blank lines ignored; duplicate keys rejected.
KeyValues parse_key_values(std::istream& is, const std::string& origin = "<config>");
KeyValues read_key_values(const std::filesystem::path& path);
// First line is the version tag, keys in sorted order.
void write_key_values(std::ostream& os, const KeyValues& kv, const std::string& tag);

struct ExperimentConfig {
    std::optional<std::uint64_t> seed;
    std::string out = "runs";
    int workers = 1;

    // data and models
    std::string dataset = "mnist:data/mnist";
    std::string classifier;          // model container path
    std::string reconstruction;      // model container path, or "none"
    std::vector<std::string> ensemble;
    std::vector<double> ensemble_weights;
    std::string stats;               // directory of class_<k>.stats files
    std::string dual_encoder;
    double temperature = 100.0;

    // sampling
    std::vector<int> classes{0};
    std::vector<std::string> prompts;
    long steps = 2000;
    std::vector<int> stage_resolutions{14, 28};
    std::vector<Stage> explicit_stages;  // overrides steps/stage_resolutions when set
    double step_size = 0.05;
    std::string optimizer = "adam";
    double mask_ratio = 0.75;
    double blur_sigma = 0.0;
    double w_cls = 1.0;
    double w_div = 0.1;
    double w_dist = 0.1;
    std::string diversity = "raw";
    double fill_value = 0.0;
    int batch_size = 16;
    bool fast = false;
    double fast_blur_sigma = 1.0;
    double fast_step_fraction = 0.5;
    int checkpoint_every = 0;

    // statistics
    int stats_masks_per_image = 1;

    // zoo training
    std::vector<std::string> train_models{"classifier", "autoencoder", "dual-encoder"};
    std::string preset = "small-convolutional";
    int train_epochs = 0;  // 0: preset default
    int train_batch_size = 32;
    double train_learning_rate = 0.0;  // 0: preset default
    int train_shift = 1;

    // evaluation
    std::string run;        // run directory to evaluate
    std::string extractor;  // classifier container for FID / IS / diversity
    int is_splits = 10;

    // ablation
    std::string axis;

    // Applies one key; throws ConfigError for unknown keys or bad values.
    void set(const std::string& key, const std::string& value);
    void apply(const KeyValues& kv);
    KeyValues to_key_values() const;
    void validate(const std::string& command) const;

    SamplerConfig sampler_config(int target_class) const;
};

// Documented keys in a stable order, with one-line descriptions.
const std::vector<std::pair<std::string, std::string>>& config_keys();

// Sampler-only view used by run records.
KeyValues sampler_to_key_values(const SamplerConfig& c);
SamplerConfig sampler_from_key_values(const KeyValues& kv);

std::string format_stages(const std::vector<Stage>& stages);
std::vector<Stage> parse_stages(const std::string& s);

}  // namespace cag
