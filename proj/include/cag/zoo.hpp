#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "cag/architectures.hpp"
#include "cag/dataset.hpp"
#include "cag/masking.hpp"

namespace cag {

struct TrainConfig {
    std::string dataset = "mnist";
    int epochs = 5;
    int batch_size = 32;
    double learning_rate = 2e-3;
    std::string preset = "small-convolutional";
    std::uint64_t seed = 0;
    int max_shift = 1;          // random integer translation augmentation, pixels
    double mask_ratio = 0.75;   // autoencoder only
    double temperature = 10.0;  // dual encoder contrastive temperature

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
// FNV-1a of the canonical JSON dump.
std::string config_hash(const TrainConfig& c);

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;       // mean training loss over the epoch
    double held_out = 0.0;   // accuracy, retrieval accuracy or masked MSE
};

struct TrainReport {
    std::string kind;
    std::string preset;
    std::vector<EpochRecord> epochs;
    std::vector<double> step_losses;
    double first_step_loss = 0.0;
    double last_step_loss = 0.0;
    double held_out_metric = 0.0;  // accuracy or masked MSE
    double floor = 0.0;
    bool passed = false;
    double untrained_metric = 0.0;  // autoencoder: held-out masked MSE before training
    double probe_loss = 0.0;        // autoencoder: loss on the fixed probe batch + mask
    std::vector<Index> probe_indices;
    std::uint64_t probe_mask_seed = 0;
};

void to_json(nlohmann::json& j, const TrainReport& r);
void from_json(const nlohmann::json& j, TrainReport& r);

// Adam over a parameter store.
class ParameterAdam {
public:
    explicit ParameterAdam(const std::vector<ParameterStore*>& stores, double lr, double beta1 = 0.9,
                           double beta2 = 0.999, double eps = 1e-8);
    // Collects parameter gradients from a graph after backward() and updates.
    void step(const ad::Graph& g);
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    std::vector<Tensor*> params_;
    std::vector<Tensor> m_, v_;
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
};

// Held-out accuracy floor for a classifier preset on MNIST-like data.
double accuracy_floor(const std::string& preset);

std::shared_ptr<GeneralizedClassifier> make_classifier(const std::string& preset, int channels, int resolution,
                                                       int classes);
Trainable& as_trainable(const GeneralizedClassifier& model);

double classification_accuracy(const GeneralizedClassifier& model, const LabeledImages& data);

struct TrainedClassifier {
    std::shared_ptr<GeneralizedClassifier> model;
    TrainReport report;
};
TrainedClassifier train_classifier(const LabeledImages& train, const LabeledImages& held_out, const TrainConfig& config);

// Eqn-2 objective: squared error of g's prediction on hidden pixels only,
// averaged over the N*C*H*W pixels of the batch. Zero when nothing is masked.
double autoencoder_loss(const MlpMaskedAutoencoder& module, const Tensor& images, const std::vector<MaskPattern>& masks);
// Mean squared error per hidden pixel, with masks drawn from `seed`.
double masked_reconstruction_error(const ReconstructionModule& module, const Tensor& images, double mask_ratio,
                                   std::uint64_t seed);
std::vector<MaskPattern> probe_masks(const ReconstructionModule& module, Index count, double mask_ratio,
                                     std::uint64_t seed);

struct TrainedAutoencoder {
    std::shared_ptr<MlpMaskedAutoencoder> model;
    TrainReport report;
};
TrainedAutoencoder train_masked_autoencoder(const LabeledImages& train, const LabeledImages& held_out,
                                            const TrainConfig& config);

struct DualEncoder {
    std::shared_ptr<ConvImageEncoder> image;
    std::shared_ptr<HashedTextEncoder> text;
};
// Caption templates used in training; {} is replaced by the class name.
const std::vector<std::string>& caption_templates();
std::string make_caption(const std::string& templ, const std::string& name);
// Fraction of images whose nearest caption (by cosine) names their class,
// averaged over the caption templates.
double retrieval_accuracy(const DualEncoder& enc, const LabeledImages& data);

struct TrainedDualEncoder {
    DualEncoder model;
    TrainReport report;
};
TrainedDualEncoder train_dual_encoder(const LabeledImages& train, const LabeledImages& held_out,
                                      const TrainConfig& config);

// Container: a "CAGMODEL" line, one JSON header line, then the raw tensor
// payload (little-endian doubles) in header order.
inline constexpr int kModelFormatVersion = 1;

struct ModelArtifact {
    std::string kind;  // classifier | autoencoder | dual-encoder
    nlohmann::json header;
    std::shared_ptr<GeneralizedClassifier> classifier;
    std::shared_ptr<MlpMaskedAutoencoder> autoencoder;
    DualEncoder dual;
};

void save_model(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& architecture,
                const std::vector<const ParameterStore*>& stores, const TrainConfig& config,
                const nlohmann::json& meta);
void save_classifier(const std::filesystem::path& path, const GeneralizedClassifier& model, const TrainConfig& config,
                     const TrainReport& report);
void save_autoencoder(const std::filesystem::path& path, const MlpMaskedAutoencoder& model, const TrainConfig& config,
                      const TrainReport& report);
void save_dual_encoder(const std::filesystem::path& path, const DualEncoder& model, const TrainConfig& config,
                       const TrainReport& report);

ModelArtifact load_model(const std::filesystem::path& path);
std::shared_ptr<GeneralizedClassifier> load_classifier(const std::filesystem::path& path);
std::shared_ptr<MlpMaskedAutoencoder> load_autoencoder(const std::filesystem::path& path);
DualEncoder load_dual_encoder(const std::filesystem::path& path);

}  // namespace cag
