#pragma once

// Tiny reference models used by the zoo. Every model computes logits as
// head(features) inside forward(), so h and f agree bit-for-bit.

#include <cstdint>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cag/model_interface.hpp"
#include "cag/rng.hpp"

namespace cag {

struct NamedTensor {
    std::string name;
    Tensor value;
};

// Stable-address parameter storage (graphs borrow parameters by address).
class ParameterStore {
public:
    Tensor& add(std::string name, Shape shape);
    Tensor& get(std::string_view name);
    const Tensor& get(std::string_view name) const;
    std::deque<NamedTensor>& items() { return items_; }
    const std::deque<NamedTensor>& items() const { return items_; }
    Index total_size() const;

private:
    std::deque<NamedTensor> items_;
};

class Trainable {
public:
    virtual ~Trainable() = default;
    virtual ParameterStore& parameters() = 0;
    virtual const ParameterStore& parameters() const = 0;
    virtual nlohmann::json architecture() const = 0;
};

// Draws He-style uniform weights into every parameter; biases and norms get
// their conventional constants.
void initialize_parameters(ParameterStore& params, Rng& rng);

struct ConvClassifierConfig {
    int channels = 1;
    int resolution = 28;
    int classes = 10;
    int conv1 = 16;
    int conv2 = 32;
    int hidden = 128;
};

class ConvClassifier final : public GeneralizedClassifier, public Trainable {
public:
    explicit ConvClassifier(const ConvClassifierConfig& cfg);

    int num_classes() const override { return cfg_.classes; }
    int feature_dim() const override { return cfg_.hidden; }
    int input_resolution() const override { return cfg_.resolution; }
    int input_channels() const override { return cfg_.channels; }
    std::string identifier() const override { return "small-convolutional"; }
    ModelOutput forward(ad::Graph& g, ad::Var images) const override;
    ad::Var head(ad::Graph& g, ad::Var features) const override;

    ParameterStore& parameters() override { return params_; }
    const ParameterStore& parameters() const override { return params_; }
    nlohmann::json architecture() const override;
    const ConvClassifierConfig& config() const { return cfg_; }

private:
    ConvClassifierConfig cfg_;
    ParameterStore params_;
};

struct AttentionClassifierConfig {
    int channels = 1;
    int resolution = 28;
    int classes = 10;
    int patch = 7;
    int width = 32;
    int mlp = 64;
};

// Patch embedding, one pre-norm self-attention block, mean-pooled tokens.
class AttentionClassifier final : public GeneralizedClassifier, public Trainable {
public:
    explicit AttentionClassifier(const AttentionClassifierConfig& cfg);

    int num_classes() const override { return cfg_.classes; }
    int feature_dim() const override { return cfg_.width; }
    int input_resolution() const override { return cfg_.resolution; }
    int input_channels() const override { return cfg_.channels; }
    std::string identifier() const override { return "small-attention"; }
    ModelOutput forward(ad::Graph& g, ad::Var images) const override;
    ad::Var head(ad::Graph& g, ad::Var features) const override;

    ParameterStore& parameters() override { return params_; }
    const ParameterStore& parameters() const override { return params_; }
    nlohmann::json architecture() const override;
    const AttentionClassifierConfig& config() const { return cfg_; }

private:
    AttentionClassifierConfig cfg_;
    ParameterStore params_;
};

struct MaskedAutoencoderConfig {
    int channels = 1;
    int resolution = 28;
    int patch = 7;
    int hidden = 256;
};

// MLP over the visible pixels plus the per-patch mask indicator.
class MlpMaskedAutoencoder final : public ReconstructionModule, public Trainable {
public:
    explicit MlpMaskedAutoencoder(const MaskedAutoencoderConfig& cfg);

    int patch_size() const override { return cfg_.patch; }
    int input_resolution() const override { return cfg_.resolution; }
    int channels() const override { return cfg_.channels; }
    std::string identifier() const override { return "mlp-mae"; }
    ad::Var predict(ad::Graph& g, ad::Var visible, const Tensor& hidden_mask) const override;

    ParameterStore& parameters() override { return params_; }
    const ParameterStore& parameters() const override { return params_; }
    nlohmann::json architecture() const override;
    const MaskedAutoencoderConfig& config() const { return cfg_; }

private:
    MaskedAutoencoderConfig cfg_;
    ParameterStore params_;
};

struct DualEncoderConfig {
    int channels = 1;
    int resolution = 28;
    int embedding = 32;
    int conv1 = 8;
    int conv2 = 16;
    int image_hidden = 64;
    int text_features = 256;
    int text_hidden = 64;
};

class ConvImageEncoder final : public ImageEncoder, public Trainable {
public:
    explicit ConvImageEncoder(const DualEncoderConfig& cfg);

    int embedding_dim() const override { return cfg_.embedding; }
    int input_resolution() const override { return cfg_.resolution; }
    int input_channels() const override { return cfg_.channels; }
    std::string identifier() const override { return "conv-image-encoder"; }
    ad::Var embed(ad::Graph& g, ad::Var images) const override;

    ParameterStore& parameters() override { return params_; }
    const ParameterStore& parameters() const override { return params_; }
    nlohmann::json architecture() const override;
    const DualEncoderConfig& config() const { return cfg_; }

private:
    DualEncoderConfig cfg_;
    ParameterStore params_;
};

// Hashed word + character-trigram bag, followed by a two-layer MLP.
class HashedTextEncoder final : public TextEncoder, public Trainable {
public:
    explicit HashedTextEncoder(const DualEncoderConfig& cfg);

    int embedding_dim() const override { return cfg_.embedding; }
    ad::Var embed(ad::Graph& g, const std::vector<std::string>& texts) const override;
    Tensor featurize(const std::vector<std::string>& texts) const;

    ParameterStore& parameters() override { return params_; }
    const ParameterStore& parameters() const override { return params_; }
    nlohmann::json architecture() const override;

private:
    DualEncoderConfig cfg_;
    ParameterStore params_;
};

void to_json(nlohmann::json& j, const ConvClassifierConfig& c);
void from_json(const nlohmann::json& j, ConvClassifierConfig& c);
void to_json(nlohmann::json& j, const AttentionClassifierConfig& c);
void from_json(const nlohmann::json& j, AttentionClassifierConfig& c);
void to_json(nlohmann::json& j, const MaskedAutoencoderConfig& c);
void from_json(const nlohmann::json& j, MaskedAutoencoderConfig& c);
void to_json(nlohmann::json& j, const DualEncoderConfig& c);
void from_json(const nlohmann::json& j, DualEncoderConfig& c);

}  // namespace cag
