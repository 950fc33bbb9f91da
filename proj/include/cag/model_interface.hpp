#pragma once

// Contracts every downstream module depends on: differentiable classifiers
// (logits f and penultimate features h), reconstruction modules, encoders for
// the dual-encoder adapter, and loss-level ensembles.
//
// All models are immutable after construction. forward() only reads
// parameters, so one model may serve many graphs from many threads.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "cag/autodiff.hpp"
#include "cag/image.hpp"

namespace cag {

struct ModelOutput {
    ad::Var features;  // [N, feature_dim]
    ad::Var logits;    // [N, num_classes]
};

class GeneralizedClassifier {
public:
    virtual ~GeneralizedClassifier() = default;

    virtual int num_classes() const = 0;
    virtual int feature_dim() const = 0;
    virtual int input_resolution() const = 0;
    virtual int input_channels() const = 0;
    virtual std::string identifier() const = 0;

    // images: [N, C, R, R] at input_resolution().
    virtual ModelOutput forward(ad::Graph& g, ad::Var images) const = 0;
    // The final layer: head(h(x)) == f(x).
    virtual ad::Var head(ad::Graph& g, ad::Var features) const = 0;
    // Batch-mean cross-entropy against `target`.
    virtual ad::Var classification_loss(ad::Graph& g, const ModelOutput& out, int target) const;
};

using ClassifierPtr = std::shared_ptr<const GeneralizedClassifier>;

// The module g: reconstruct an image from its visible patches.
class ReconstructionModule {
public:
    virtual ~ReconstructionModule() = default;

    virtual int patch_size() const = 0;
    virtual int input_resolution() const = 0;
    virtual int channels() const = 0;
    virtual std::string identifier() const = 0;

    // visible: [N,C,R,R] with hidden pixels already filled; hidden_mask has the
    // same shape and is 1 on hidden pixels. Returns a full-image prediction.
    virtual ad::Var predict(ad::Graph& g, ad::Var visible, const Tensor& hidden_mask) const = 0;
};

using ReconstructionPtr = std::shared_ptr<const ReconstructionModule>;

class ImageEncoder {
public:
    virtual ~ImageEncoder() = default;
    virtual int embedding_dim() const = 0;
    virtual int input_resolution() const = 0;
    virtual int input_channels() const = 0;
    virtual std::string identifier() const = 0;
    virtual ad::Var embed(ad::Graph& g, ad::Var images) const = 0;
};

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual int embedding_dim() const = 0;
    virtual ad::Var embed(ad::Graph& g, const std::vector<std::string>& texts) const = 0;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

// Differentiable bilinear resize of [N,C,H,W] to the model's input resolution
// followed by the forward map. Rejects a channel-count mismatch.
ModelOutput forward_adapted(const GeneralizedClassifier& model, ad::Graph& g, ad::Var images);

RowMatrix predict_logits(const GeneralizedClassifier& model, const Tensor& images);
RowMatrix extract_features(const GeneralizedClassifier& model, const Tensor& images);
// Applies the model's final layer to precomputed features.
RowMatrix apply_head(const GeneralizedClassifier& model, const RowMatrix& features);
std::vector<int> predict_labels(const GeneralizedClassifier& model, const Tensor& images);

using LossFn = std::function<ad::Var(ad::Graph&, ad::Var images)>;
// d loss / d images. Throws NonFiniteError(step_index) for a non-finite loss or gradient.
Tensor input_gradient(const LossFn& loss, const Tensor& images, long step_index = -1, double* loss_value = nullptr);

struct EnsembleSpec {
    std::vector<ClassifierPtr> members;
    std::vector<double> weights;
};

// Loss-level ensemble: loss = sum_i w_i L_i; features concatenate member
// features; logits are the weighted sum of member log-probabilities.
ClassifierPtr make_ensemble(const EnsembleSpec& spec);

// logits_k(x) = tau * <normalize(image_encoder(x)), normalize(text_encoder(prompt_k))>.
ClassifierPtr text_to_classifier(std::shared_ptr<const ImageEncoder> image_encoder,
                                 std::shared_ptr<const TextEncoder> text_encoder,
                                 const std::vector<std::string>& prompts, double temperature = 100.0);

}  // namespace cag
