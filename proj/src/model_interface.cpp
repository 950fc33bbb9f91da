#include "cag/model_interface.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cag/ops.hpp"

namespace cag {

ad::Var GeneralizedClassifier::classification_loss(ad::Graph& g, const ModelOutput& out, int target) const {
    const Index n = g.shape(out.logits)[0];
    if (target < 0 || target >= num_classes())
        throw std::out_of_range("target class " + std::to_string(target) + " outside [0," +
                                std::to_string(num_classes()) + ")");
    return ad::mean(g, ad::cross_entropy(g, out.logits, std::vector<int>(static_cast<std::size_t>(n), target)));
}

ModelOutput forward_adapted(const GeneralizedClassifier& model, ad::Graph& g, ad::Var images) {
    const Shape s = g.shape(images);
    if (s.size() != 4) throw ShapeError("classifier input must be [N,C,H,W], got " + shape_to_string(s));
    if (s[1] != model.input_channels())
        throw ShapeError(model.identifier() + ": expected " + std::to_string(model.input_channels()) +
                         " input channels, got " + std::to_string(s[1]));
    const Index r = model.input_resolution();
    return model.forward(g, ad::resize_bilinear(g, images, r, r));
}

namespace {

template <class Pick>
RowMatrix run_chunks(const GeneralizedClassifier& model, const Tensor& images, Index width, Pick pick) {
    if (images.rank() != 4) throw ShapeError("expected [N,C,H,W] images, got " + shape_to_string(images.shape()));
    const Index N = images.dim(0), per = images.size() / std::max<Index>(N, 1);
    RowMatrix out(N, width);
    constexpr Index chunk = 256;
    for (Index start = 0; start < N; start += chunk) {
        const Index len = std::min(chunk, N - start);
        Shape shape = images.shape();
        shape[0] = len;
        std::vector<double> buf(images.data() + start * per, images.data() + (start + len) * per);
        ad::Graph g;
        const ModelOutput o = forward_adapted(model, g, g.constant(Tensor(shape, std::move(buf))));
        out.middleRows(start, len) = g.value(pick(o)).matrix(len, width);
    }
    return out;
}

}  // namespace

RowMatrix predict_logits(const GeneralizedClassifier& model, const Tensor& images) {
    return run_chunks(model, images, model.num_classes(), [](const ModelOutput& o) { return o.logits; });
}

RowMatrix extract_features(const GeneralizedClassifier& model, const Tensor& images) {
    return run_chunks(model, images, model.feature_dim(), [](const ModelOutput& o) { return o.features; });
}

RowMatrix apply_head(const GeneralizedClassifier& model, const RowMatrix& features) {
    if (features.cols() != model.feature_dim())
        throw ShapeError("feature width " + std::to_string(features.cols()) + " does not match feature_dim " +
                         std::to_string(model.feature_dim()));
    ad::Graph g;
    Tensor t({features.rows(), features.cols()});
    t.matrix(features.rows(), features.cols()) = features;
    const ad::Var logits = model.head(g, g.constant(std::move(t)));
    return g.value(logits).matrix(features.rows(), model.num_classes());
}

std::vector<int> predict_labels(const GeneralizedClassifier& model, const Tensor& images) {
    const RowMatrix logits = predict_logits(model, images);
    std::vector<int> labels(static_cast<std::size_t>(logits.rows()));
    for (Index i = 0; i < logits.rows(); ++i) {
        Index best = 0;
        logits.row(i).maxCoeff(&best);
        labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return labels;
}

Tensor input_gradient(const LossFn& loss, const Tensor& images, long step_index, double* loss_value) {
    ad::Graph g;
    const ad::Var x = g.input(images);
    const ad::Var l = loss(g, x);
    const double v = g.value(l)[0];
    if (!std::isfinite(v)) throw NonFiniteError("non-finite loss at step " + std::to_string(step_index), step_index);
    g.backward(l);
    Tensor grad = g.grad(x);
    if (!grad.all_finite())
        throw NonFiniteError("non-finite input gradient at step " + std::to_string(step_index), step_index);
    if (loss_value) *loss_value = v;
    return grad;
}

namespace {

class LossEnsemble final : public GeneralizedClassifier {
public:
    explicit LossEnsemble(EnsembleSpec spec) : spec_(std::move(spec)) {
        Index off = 0;
        for (const auto& m : spec_.members) {
            offsets_.push_back(off);
            off += m->feature_dim();
        }
        feature_dim_ = static_cast<int>(off);
    }

    int num_classes() const override { return spec_.members.front()->num_classes(); }
    int feature_dim() const override { return feature_dim_; }
    int input_resolution() const override {
        int r = 0;
        for (const auto& m : spec_.members) r = std::max(r, m->input_resolution());
        return r;
    }
    int input_channels() const override { return spec_.members.front()->input_channels(); }
    std::string identifier() const override {
        std::string id = "ensemble(";
        for (std::size_t i = 0; i < spec_.members.size(); ++i) {
            if (i) id += ",";
            id += spec_.members[i]->identifier();
        }
        return id + ")";
    }

    ModelOutput forward(ad::Graph& g, ad::Var images) const override {
        std::vector<ad::Var> feats;
        for (const auto& m : spec_.members) feats.push_back(forward_adapted(*m, g, images).features);
        const ad::Var features = feats.size() == 1 ? feats.front() : ad::concat_cols(g, feats);
        return {features, head(g, features)};
    }

    ad::Var head(ad::Graph& g, ad::Var features) const override {
        ad::Var total;
        for (std::size_t i = 0; i < spec_.members.size(); ++i) {
            const ad::Var lp = ad::log_softmax(g, spec_.members[i]->head(g, member_features(g, features, i)));
            const ad::Var w = ad::scale(g, lp, spec_.weights[i]);
            total = total.valid() ? ad::add(g, total, w) : w;
        }
        return total;
    }

    ad::Var classification_loss(ad::Graph& g, const ModelOutput& out, int target) const override {
        ad::Var total;
        for (std::size_t i = 0; i < spec_.members.size(); ++i) {
            const auto& m = *spec_.members[i];
            const ad::Var f = member_features(g, out.features, i);
            const ad::Var li = ad::scale(g, m.classification_loss(g, {f, m.head(g, f)}, target), spec_.weights[i]);
            total = total.valid() ? ad::add(g, total, li) : li;
        }
        return total;
    }

private:
    ad::Var member_features(ad::Graph& g, ad::Var features, std::size_t i) const {
        if (spec_.members.size() == 1) return features;
        return ad::slice_cols(g, features, offsets_[i], spec_.members[i]->feature_dim());
    }

    EnsembleSpec spec_;
    std::vector<Index> offsets_;
    int feature_dim_ = 0;
};

class TextConditionedClassifier final : public GeneralizedClassifier {
public:
    TextConditionedClassifier(std::shared_ptr<const ImageEncoder> image_encoder, Tensor text_embeddings, double tau,
                              std::size_t prompts)
        : image_encoder_(std::move(image_encoder)),
          text_(std::move(text_embeddings)),
          tau_(tau),
          num_classes_(static_cast<int>(prompts)) {}

    int num_classes() const override { return num_classes_; }
    int feature_dim() const override { return image_encoder_->embedding_dim(); }
    int input_resolution() const override { return image_encoder_->input_resolution(); }
    int input_channels() const override { return image_encoder_->input_channels(); }
    std::string identifier() const override { return "text(" + image_encoder_->identifier() + ")"; }

    ModelOutput forward(ad::Graph& g, ad::Var images) const override {
        const ad::Var h = image_encoder_->embed(g, images);
        return {h, head(g, h)};
    }

    ad::Var head(ad::Graph& g, ad::Var features) const override {
        const ad::Var unit = ad::l2_normalize_rows(g, features);
        return ad::scale(g, ad::matmul_nt(g, unit, g.parameter(text_)), tau_);
    }

private:
    std::shared_ptr<const ImageEncoder> image_encoder_;
    Tensor text_;  // [K, E], unit rows
    double tau_;
    int num_classes_;
};

}  // namespace

ClassifierPtr make_ensemble(const EnsembleSpec& spec) {
    if (spec.members.empty()) throw std::invalid_argument("ensemble needs at least one member");
    if (spec.members.size() != spec.weights.size())
        throw std::invalid_argument("ensemble has " + std::to_string(spec.members.size()) + " members but " +
                                    std::to_string(spec.weights.size()) + " weights");
    double total = 0.0;
    for (double w : spec.weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("ensemble weights must be nonnegative");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("ensemble weights must sum to 1");
    const int k = spec.members.front()->num_classes();
    const int c = spec.members.front()->input_channels();
    for (const auto& m : spec.members) {
        if (!m) throw std::invalid_argument("null ensemble member");
        if (m->num_classes() != k)
            throw std::invalid_argument("ensemble members disagree on class count: " + std::to_string(k) + " vs " +
                                        std::to_string(m->num_classes()));
        if (m->input_channels() != c) throw std::invalid_argument("ensemble members disagree on channel count");
    }
    return std::make_shared<LossEnsemble>(spec);
}

ClassifierPtr text_to_classifier(std::shared_ptr<const ImageEncoder> image_encoder,
                                 std::shared_ptr<const TextEncoder> text_encoder,
                                 const std::vector<std::string>& prompts, double temperature) {
    if (!image_encoder || !text_encoder) throw std::invalid_argument("text_to_classifier needs both encoders");
    if (prompts.empty()) throw std::invalid_argument("text_to_classifier needs at least one prompt");
    if (image_encoder->embedding_dim() != text_encoder->embedding_dim())
        throw ShapeError("embedding dimension mismatch: image " + std::to_string(image_encoder->embedding_dim()) +
                         " vs text " + std::to_string(text_encoder->embedding_dim()));
    ad::Graph g;
    const ad::Var t = ad::l2_normalize_rows(g, text_encoder->embed(g, prompts));
    return std::make_shared<TextConditionedClassifier>(std::move(image_encoder), g.value(t), temperature,
                                                       prompts.size());
}

}  // namespace cag
