#include "cag/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cag/ops.hpp"

namespace cag {

namespace {

constexpr const char* kMagic = "CAGMODEL";

std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<Index> permutation(Index n, Rng& rng) {
    std::vector<Index> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), Index{0});
    for (Index i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<Index> d(0, i);
        std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(d(rng))]);
    }
    return p;
}

// Integer translation with zero fill, independently per image.
void random_shift(Tensor& batch, int max_shift, Rng& rng) {
    if (max_shift <= 0) return;
    const Index N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    std::uniform_int_distribution<int> d(-max_shift, max_shift);
    std::vector<double> tmp(static_cast<std::size_t>(C * H * W));
    for (Index n = 0; n < N; ++n) {
        const int dy = d(rng), dx = d(rng);
        double* img = batch.data() + n * C * H * W;
        std::fill(tmp.begin(), tmp.end(), 0.0);
        for (Index c = 0; c < C; ++c)
            for (Index y = 0; y < H; ++y) {
                const Index sy = y - dy;
                if (sy < 0 || sy >= H) continue;
                for (Index x = 0; x < W; ++x) {
                    const Index sx = x - dx;
                    if (sx < 0 || sx >= W) continue;
                    tmp[static_cast<std::size_t>((c * H + y) * W + x)] = img[(c * H + sy) * W + sx];
                }
            }
        std::copy(tmp.begin(), tmp.end(), img);
    }
}

void check_dataset(const LabeledImages& d, const char* what) {
    if (d.size() == 0) throw std::invalid_argument(std::string(what) + " dataset is empty");
    if (d.images.rank() != 4) throw std::invalid_argument(std::string(what) + " images must be [N,C,H,W]");
}

// Cosine decay from the configured rate to zero over the whole run.
template <class StepFn>
void run_epochs(const TrainConfig& config, Index n, ParameterAdam& opt, TrainReport& report, StepFn step) {
    const long per_epoch = static_cast<long>((n + config.batch_size - 1) / config.batch_size);
    const double total_steps = static_cast<double>(per_epoch * config.epochs);
    long t = 0;
    for (int e = 0; e < config.epochs; ++e) {
        Rng rng = make_stream(config.seed, StreamDomain::training, static_cast<std::uint64_t>(e), 0);
        const std::vector<Index> perm = permutation(n, rng);
        double total = 0.0;
        long batches = 0;
        for (Index start = 0; start < n; start += config.batch_size) {
            const Index len = std::min<Index>(config.batch_size, n - start);
            std::vector<Index> idx(perm.begin() + start, perm.begin() + start + len);
            opt.set_learning_rate(config.learning_rate * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t++) / total_steps)));
            const double loss = step(idx, rng);
            if (!std::isfinite(loss)) throw NonFiniteError("training loss became non-finite", static_cast<long>(report.step_losses.size()));
            report.step_losses.push_back(loss);
            total += loss;
            ++batches;
        }
        report.epochs.push_back({e + 1, total / static_cast<double>(std::max<long>(batches, 1)), 0.0});
    }
    if (!report.step_losses.empty()) {
        report.first_step_loss = report.step_losses.front();
        report.last_step_loss = report.step_losses.back();
    }
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    if (preset != "small-convolutional" && preset != "small-attention")
        throw std::invalid_argument("unknown preset '" + preset + "' (expected small-convolutional or small-attention)");
    if (max_shift < 0) throw std::invalid_argument("max_shift must be >= 0");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw std::invalid_argument("mask_ratio must lie in [0,1]");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"dataset", c.dataset},     {"epochs", c.epochs},         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate}, {"preset", c.preset}, {"seed", c.seed},
         {"max_shift", c.max_shift}, {"mask_ratio", c.mask_ratio}, {"temperature", c.temperature}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("dataset").get_to(c.dataset);
    j.at("epochs").get_to(c.epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("preset").get_to(c.preset);
    j.at("seed").get_to(c.seed);
    j.at("max_shift").get_to(c.max_shift);
    j.at("mask_ratio").get_to(c.mask_ratio);
    j.at("temperature").get_to(c.temperature);
}

std::string config_hash(const TrainConfig& c) {
    const std::string s = nlohmann::json(c).dump();
    return hex64(fnv1a_bytes(s.data(), s.size()));
}

void to_json(nlohmann::json& j, const TrainReport& r) {
    nlohmann::json ep = nlohmann::json::array();
    for (const auto& e : r.epochs) ep.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"held_out", e.held_out}});
    j = {{"kind", r.kind},
         {"preset", r.preset},
         {"epochs", ep},
         {"steps", r.step_losses.size()},
         {"first_step_loss", r.first_step_loss},
         {"last_step_loss", r.last_step_loss},
         {"held_out_metric", r.held_out_metric},
         {"floor", r.floor},
         {"passed", r.passed},
         {"untrained_metric", r.untrained_metric},
         {"probe_loss", r.probe_loss},
         {"probe_indices", r.probe_indices},
         {"probe_mask_seed", r.probe_mask_seed}};
}

void from_json(const nlohmann::json& j, TrainReport& r) {
    j.at("kind").get_to(r.kind);
    j.at("preset").get_to(r.preset);
    r.epochs.clear();
    for (const auto& e : j.at("epochs")) r.epochs.push_back({e.at("epoch"), e.at("loss"), e.at("held_out")});
    j.at("first_step_loss").get_to(r.first_step_loss);
    j.at("last_step_loss").get_to(r.last_step_loss);
    j.at("held_out_metric").get_to(r.held_out_metric);
    j.at("floor").get_to(r.floor);
    j.at("passed").get_to(r.passed);
    j.at("untrained_metric").get_to(r.untrained_metric);
    j.at("probe_loss").get_to(r.probe_loss);
    j.at("probe_indices").get_to(r.probe_indices);
    j.at("probe_mask_seed").get_to(r.probe_mask_seed);
}

ParameterAdam::ParameterAdam(const std::vector<ParameterStore*>& stores, double lr, double beta1, double beta2,
                             double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (ParameterStore* s : stores)
        for (auto& it : s->items()) {
            params_.push_back(&it.value);
            m_.push_back(Tensor::like(it.value));
            v_.push_back(Tensor::like(it.value));
        }
}

void ParameterAdam::step(const ad::Graph& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const Tensor grad = g.parameter_grad(*params_[k]);
        Tensor& p = *params_[k];
        for (Index i = 0; i < p.size(); ++i) {
            m_[k][i] = b1_ * m_[k][i] + (1.0 - b1_) * grad[i];
            v_[k][i] = b2_ * v_[k][i] + (1.0 - b2_) * grad[i] * grad[i];
            p[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
        }
    }
}

double accuracy_floor(const std::string& preset) {
    if (preset == "small-convolutional") return 0.97;
    if (preset == "small-attention") return 0.90;
    throw std::invalid_argument("unknown preset '" + preset + "'");
}

std::shared_ptr<GeneralizedClassifier> make_classifier(const std::string& preset, int channels, int resolution,
                                                       int classes) {
    if (preset == "small-convolutional") {
        ConvClassifierConfig c;
        c.channels = channels;
        c.resolution = resolution;
        c.classes = classes;
        return std::make_shared<ConvClassifier>(c);
    }
    if (preset == "small-attention") {
        AttentionClassifierConfig c;
        c.channels = channels;
        c.resolution = resolution;
        c.classes = classes;
        return std::make_shared<AttentionClassifier>(c);
    }
    throw std::invalid_argument("unknown preset '" + preset + "' (expected small-convolutional or small-attention)");
}

Trainable& as_trainable(const GeneralizedClassifier& model) {
    auto* t = dynamic_cast<const Trainable*>(&model);
    if (!t) throw std::invalid_argument(model.identifier() + " is not a trainable zoo model");
    return const_cast<Trainable&>(*t);
}

double classification_accuracy(const GeneralizedClassifier& model, const LabeledImages& data) {
    const std::vector<int> pred = predict_labels(model, data.images);
    long hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
    return static_cast<double>(hit) / static_cast<double>(std::max<std::size_t>(pred.size(), 1));
}

TrainedClassifier train_classifier(const LabeledImages& train, const LabeledImages& held_out, const TrainConfig& config) {
    config.validate();
    check_dataset(train, "training");
    TrainedClassifier out;
    out.model = make_classifier(config.preset, static_cast<int>(train.channels()), static_cast<int>(train.resolution()),
                                train.num_classes);
    Trainable& tr = as_trainable(*out.model);
    Rng init = make_stream(config.seed, StreamDomain::training, 0xC1A5, 0);
    initialize_parameters(tr.parameters(), init);
    ParameterAdam opt({&tr.parameters()}, config.learning_rate);

    out.report.kind = "classifier";
    out.report.preset = config.preset;
    const GeneralizedClassifier& model = *out.model;
    run_epochs(config, train.size(), opt, out.report, [&](const std::vector<Index>& idx, Rng& rng) {
        Tensor batch = gather_rows(train.images, idx);
        random_shift(batch, config.max_shift, rng);
        std::vector<int> labels;
        for (Index i : idx) labels.push_back(train.labels[static_cast<std::size_t>(i)]);
        ad::Graph g;
        g.set_track_parameters(true);
        const ModelOutput o = model.forward(g, g.constant(std::move(batch)));
        const ad::Var loss = ad::mean(g, ad::cross_entropy(g, o.logits, labels));
        g.backward(loss);
        opt.step(g);
        return g.value(loss)[0];
    });
    const LabeledImages& eval = held_out.size() ? held_out : train;
    out.report.held_out_metric = classification_accuracy(model, eval);
    if (!out.report.epochs.empty()) out.report.epochs.back().held_out = out.report.held_out_metric;
    out.report.floor = accuracy_floor(config.preset);
    out.report.passed = out.report.held_out_metric >= out.report.floor;
    return out;
}

namespace {

ad::Var autoencoder_loss_var(ad::Graph& g, const MlpMaskedAutoencoder& module, const Tensor& images,
                             const std::vector<MaskPattern>& masks) {
    const Index N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    Tensor hidden = batch_pixel_mask(masks, C, H, W);
    Tensor visible = images;
    for (Index i = 0; i < visible.size(); ++i)
        if (hidden[i] != 0.0) visible[i] = 0.0;
    const ad::Var pred = module.predict(g, g.constant(std::move(visible)), hidden);
    const ad::Var residual = ad::mul_const(g, ad::sub_const(g, pred, images), hidden);
    return ad::scale(g, ad::sum(g, ad::square(g, residual)), 1.0 / static_cast<double>(N * C * H * W));
}

}  // namespace

double autoencoder_loss(const MlpMaskedAutoencoder& module, const Tensor& images, const std::vector<MaskPattern>& masks) {
    ad::Graph g;
    return g.value(autoencoder_loss_var(g, module, images, masks))[0];
}

std::vector<MaskPattern> probe_masks(const ReconstructionModule& module, Index count, double mask_ratio,
                                     std::uint64_t seed) {
    const int grid = module.input_resolution() / module.patch_size();
    std::vector<MaskPattern> masks;
    for (Index i = 0; i < count; ++i) {
        Rng rng = make_stream(seed, StreamDomain::evaluation, static_cast<std::uint64_t>(i), 0x3A5C);
        masks.push_back(sample_mask(grid, grid, mask_ratio, rng, module.patch_size()));
    }
    return masks;
}

double masked_reconstruction_error(const ReconstructionModule& module, const Tensor& images, double mask_ratio,
                                   std::uint64_t seed) {
    const std::vector<MaskPattern> masks = probe_masks(module, images.dim(0), mask_ratio, seed);
    const Tensor hidden = batch_pixel_mask(masks, images.dim(1), images.dim(2), images.dim(3));
    const Tensor rec = masked_reconstruct(module, images, masks, 0.0);
    double se = 0.0, count = 0.0;
    for (Index i = 0; i < images.size(); ++i)
        if (hidden[i] != 0.0) {
            se += (rec[i] - images[i]) * (rec[i] - images[i]);
            count += 1.0;
        }
    return count > 0.0 ? se / count : 0.0;
}

TrainedAutoencoder train_masked_autoencoder(const LabeledImages& train, const LabeledImages& held_out,
                                            const TrainConfig& config) {
    config.validate();
    check_dataset(train, "training");
    MaskedAutoencoderConfig mc;
    mc.channels = static_cast<int>(train.channels());
    mc.resolution = static_cast<int>(train.resolution());
    TrainedAutoencoder out;
    out.model = std::make_shared<MlpMaskedAutoencoder>(mc);
    Rng init = make_stream(config.seed, StreamDomain::training, 0xAE, 0);
    initialize_parameters(out.model->parameters(), init);

    const LabeledImages& eval = held_out.size() ? held_out : train;
    const Index eval_n = std::min<Index>(eval.size(), 500);
    const Tensor eval_images = eval.rows(0, eval_n);
    out.report.kind = "autoencoder";
    out.report.preset = out.model->identifier();
    out.report.untrained_metric = masked_reconstruction_error(*out.model, eval_images, config.mask_ratio, config.seed);

    ParameterAdam opt({&out.model->parameters()}, config.learning_rate);
    const int grid = mc.resolution / mc.patch;
    const MlpMaskedAutoencoder& module = *out.model;
    run_epochs(config, train.size(), opt, out.report, [&](const std::vector<Index>& idx, Rng& rng) {
        Tensor batch = gather_rows(train.images, idx);
        random_shift(batch, config.max_shift, rng);
        std::vector<MaskPattern> masks;
        for (std::size_t i = 0; i < idx.size(); ++i) masks.push_back(sample_mask(grid, grid, config.mask_ratio, rng, mc.patch));
        ad::Graph g;
        g.set_track_parameters(true);
        const ad::Var loss = autoencoder_loss_var(g, module, batch, masks);
        g.backward(loss);
        opt.step(g);
        return g.value(loss)[0];
    });

    out.report.held_out_metric = masked_reconstruction_error(module, eval_images, config.mask_ratio, config.seed);
    if (!out.report.epochs.empty()) out.report.epochs.back().held_out = out.report.held_out_metric;
    out.report.floor = 0.5 * out.report.untrained_metric;
    out.report.passed = out.report.held_out_metric <= out.report.floor;

    const Index probe_n = std::min<Index>(train.size(), 16);
    for (Index i = 0; i < probe_n; ++i) out.report.probe_indices.push_back(i);
    out.report.probe_mask_seed = config.seed;
    out.report.probe_loss = autoencoder_loss(module, gather_rows(train.images, out.report.probe_indices),
                                             probe_masks(module, probe_n, config.mask_ratio, config.seed));
    return out;
}

const std::vector<std::string>& caption_templates() {
    static const std::vector<std::string> t = {"{}", "the digit {}", "a handwritten {}", "an image of the number {}"};
    return t;
}

std::string make_caption(const std::string& templ, const std::string& name) {
    const auto pos = templ.find("{}");
    if (pos == std::string::npos) return templ;
    return templ.substr(0, pos) + name + templ.substr(pos + 2);
}

namespace {

std::vector<std::string> captions_for(const LabeledImages& data, const std::string& templ) {
    std::vector<std::string> caps;
    for (int k = 0; k < data.num_classes; ++k)
        caps.push_back(make_caption(templ, k < static_cast<int>(data.class_names.size()) ? data.class_names[k]
                                                                                         : std::to_string(k)));
    return caps;
}

}  // namespace

double retrieval_accuracy(const DualEncoder& enc, const LabeledImages& data) {
    double total = 0.0;
    for (const auto& templ : caption_templates()) {
        ClassifierPtr clf = text_to_classifier(enc.image, enc.text, captions_for(data, templ));
        total += classification_accuracy(*clf, data);
    }
    return total / static_cast<double>(caption_templates().size());
}

TrainedDualEncoder train_dual_encoder(const LabeledImages& train, const LabeledImages& held_out,
                                      const TrainConfig& config) {
    config.validate();
    check_dataset(train, "training");
    DualEncoderConfig dc;
    dc.channels = static_cast<int>(train.channels());
    dc.resolution = static_cast<int>(train.resolution());
    TrainedDualEncoder out;
    out.model.image = std::make_shared<ConvImageEncoder>(dc);
    out.model.text = std::make_shared<HashedTextEncoder>(dc);
    Rng init = make_stream(config.seed, StreamDomain::training, 0xD0E, 0);
    initialize_parameters(out.model.image->parameters(), init);
    initialize_parameters(out.model.text->parameters(), init);
    ParameterAdam opt({&out.model.image->parameters(), &out.model.text->parameters()}, config.learning_rate);

    out.report.kind = "dual-encoder";
    out.report.preset = out.model.image->identifier();
    const auto& templates = caption_templates();
    run_epochs(config, train.size(), opt, out.report, [&](const std::vector<Index>& idx, Rng& rng) {
        Tensor batch = gather_rows(train.images, idx);
        random_shift(batch, config.max_shift, rng);
        std::vector<int> labels;
        for (Index i : idx) labels.push_back(train.labels[static_cast<std::size_t>(i)]);
        std::uniform_int_distribution<std::size_t> pick(0, templates.size() - 1);
        const std::vector<std::string> caps = captions_for(train, templates[pick(rng)]);
        ad::Graph g;
        g.set_track_parameters(true);
        const ad::Var img = ad::l2_normalize_rows(g, out.model.image->embed(g, g.constant(std::move(batch))));
        const ad::Var txt = ad::l2_normalize_rows(g, out.model.text->embed(g, caps));
        const ad::Var logits = ad::scale(g, ad::matmul_nt(g, img, txt), config.temperature);
        const ad::Var loss = ad::mean(g, ad::cross_entropy(g, logits, labels));
        g.backward(loss);
        opt.step(g);
        return g.value(loss)[0];
    });
    const LabeledImages& eval = held_out.size() ? held_out : train;
    out.report.held_out_metric = retrieval_accuracy(out.model, eval);
    if (!out.report.epochs.empty()) out.report.epochs.back().held_out = out.report.held_out_metric;
    out.report.floor = 0.90;
    out.report.passed = out.report.held_out_metric >= out.report.floor;
    return out;
}

void save_model(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& architecture,
                const std::vector<const ParameterStore*>& stores, const TrainConfig& config,
                const nlohmann::json& meta) {
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<const Tensor*> order;
    for (const ParameterStore* s : stores)
        for (const auto& it : s->items()) {
            tensors.push_back({{"name", it.name}, {"shape", it.value.shape()}});
            order.push_back(&it.value);
        }
    std::uint64_t checksum = 0xcbf29ce484222325ULL;
    std::size_t bytes = 0;
    for (const Tensor* t : order) {
        checksum = fnv1a_bytes(t->data(), static_cast<std::size_t>(t->size()) * sizeof(double), checksum);
        bytes += static_cast<std::size_t>(t->size()) * sizeof(double);
    }
    const nlohmann::json header = {{"version", kModelFormatVersion},
                                   {"kind", kind},
                                   {"architecture", architecture},
                                   {"train_config", config},
                                   {"config_hash", config_hash(config)},
                                   {"meta", meta},
                                   {"tensors", tensors},
                                   {"payload_bytes", bytes},
                                   {"checksum", hex64(checksum)}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << kMagic << '\n' << header.dump() << '\n';
    for (const Tensor* t : order)
        os.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

void save_classifier(const std::filesystem::path& path, const GeneralizedClassifier& model, const TrainConfig& config,
                     const TrainReport& report) {
    const Trainable& t = as_trainable(model);
    save_model(path, "classifier", t.architecture(), {&t.parameters()}, config, {{"report", report}});
}

void save_autoencoder(const std::filesystem::path& path, const MlpMaskedAutoencoder& model, const TrainConfig& config,
                      const TrainReport& report) {
    save_model(path, "autoencoder", model.architecture(), {&model.parameters()}, config, {{"report", report}});
}

void save_dual_encoder(const std::filesystem::path& path, const DualEncoder& model, const TrainConfig& config,
                       const TrainReport& report) {
    save_model(path, "dual-encoder", {{"image", model.image->architecture()}, {"text", model.text->architecture()}},
               {&model.image->parameters(), &model.text->parameters()}, config, {{"report", report}});
}

ModelArtifact load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open model file " + path.string());
    std::string magic, line;
    if (!std::getline(is, magic) || magic != kMagic) throw std::runtime_error(path.string() + ": not a model container");
    if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": truncated header");
    ModelArtifact art;
    try {
        art.header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path.string() + ": corrupted header (" + e.what() + ")");
    }
    const nlohmann::json& h = art.header;
    const int version = h.value("version", -1);
    if (version != kModelFormatVersion)
        throw std::runtime_error(path.string() + ": container version " + std::to_string(version) + ", expected " +
                                 std::to_string(kModelFormatVersion));
    art.kind = h.at("kind").get<std::string>();
    const nlohmann::json& arch = h.at("architecture");

    std::vector<ParameterStore*> stores;
    if (art.kind == "classifier") {
        const std::string preset = arch.at("preset");
        if (preset == "small-convolutional")
            art.classifier = std::make_shared<ConvClassifier>(arch.at("config").get<ConvClassifierConfig>());
        else if (preset == "small-attention")
            art.classifier = std::make_shared<AttentionClassifier>(arch.at("config").get<AttentionClassifierConfig>());
        else
            throw std::runtime_error(path.string() + ": unknown classifier preset '" + preset + "'");
        stores.push_back(&as_trainable(*art.classifier).parameters());
    } else if (art.kind == "autoencoder") {
        art.autoencoder = std::make_shared<MlpMaskedAutoencoder>(arch.at("config").get<MaskedAutoencoderConfig>());
        stores.push_back(&art.autoencoder->parameters());
    } else if (art.kind == "dual-encoder") {
        art.dual.image = std::make_shared<ConvImageEncoder>(arch.at("image").at("config").get<DualEncoderConfig>());
        art.dual.text = std::make_shared<HashedTextEncoder>(arch.at("text").at("config").get<DualEncoderConfig>());
        stores.push_back(&art.dual.image->parameters());
        stores.push_back(&art.dual.text->parameters());
    } else {
        throw std::runtime_error(path.string() + ": unknown model kind '" + art.kind + "'");
    }

    std::vector<Tensor*> order;
    for (ParameterStore* s : stores)
        for (auto& it : s->items()) order.push_back(&it.value);
    const nlohmann::json& tensors = h.at("tensors");
    if (tensors.size() != order.size())
        throw std::runtime_error(path.string() + ": tensor count " + std::to_string(tensors.size()) +
                                 " does not match architecture (" + std::to_string(order.size()) + ")");
    std::size_t k = 0;
    for (ParameterStore* s : stores)
        for (auto& it : s->items()) {
            const auto& t = tensors[k++];
            if (t.at("name").get<std::string>() != it.name || t.at("shape").get<Shape>() != it.value.shape())
                throw std::runtime_error(path.string() + ": tensor " + it.name + " does not match architecture");
        }

    std::uint64_t checksum = 0xcbf29ce484222325ULL;
    std::size_t bytes = 0;
    for (Tensor* t : order) {
        const auto n = static_cast<std::streamsize>(t->size() * sizeof(double));
        is.read(reinterpret_cast<char*>(t->data()), n);
        if (is.gcount() != n) throw std::runtime_error(path.string() + ": truncated payload");
        checksum = fnv1a_bytes(t->data(), static_cast<std::size_t>(n), checksum);
        bytes += static_cast<std::size_t>(n);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path.string() + ": trailing bytes after payload");
    if (bytes != h.at("payload_bytes").get<std::size_t>()) throw std::runtime_error(path.string() + ": payload size mismatch");
    if (hex64(checksum) != h.at("checksum").get<std::string>())
        throw std::runtime_error(path.string() + ": checksum mismatch (corrupted payload)");
    return art;
}

std::shared_ptr<GeneralizedClassifier> load_classifier(const std::filesystem::path& path) {
    ModelArtifact a = load_model(path);
    if (a.kind != "classifier") throw std::runtime_error(path.string() + ": expected a classifier, found " + a.kind);
    return a.classifier;
}

std::shared_ptr<MlpMaskedAutoencoder> load_autoencoder(const std::filesystem::path& path) {
    ModelArtifact a = load_model(path);
    if (a.kind != "autoencoder") throw std::runtime_error(path.string() + ": expected an autoencoder, found " + a.kind);
    return a.autoencoder;
}

DualEncoder load_dual_encoder(const std::filesystem::path& path) {
    ModelArtifact a = load_model(path);
    if (a.kind != "dual-encoder") throw std::runtime_error(path.string() + ": expected a dual encoder, found " + a.kind);
    return a.dual;
}

}  // namespace cag
