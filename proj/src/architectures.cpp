#include "cag/architectures.hpp"

#include <cctype>
#include <cmath>
#include <stdexcept>

#include "cag/ops.hpp"

namespace cag {

Tensor& ParameterStore::add(std::string name, Shape shape) {
    for (const auto& it : items_)
        if (it.name == name) throw std::logic_error("duplicate parameter " + name);
    items_.push_back({std::move(name), Tensor(std::move(shape))});
    return items_.back().value;
}

Tensor& ParameterStore::get(std::string_view name) {
    for (auto& it : items_)
        if (it.name == name) return it.value;
    throw std::out_of_range("no parameter named " + std::string(name));
}

const Tensor& ParameterStore::get(std::string_view name) const {
    for (const auto& it : items_)
        if (it.name == name) return it.value;
    throw std::out_of_range("no parameter named " + std::string(name));
}

Index ParameterStore::total_size() const {
    Index n = 0;
    for (const auto& it : items_) n += it.value.size();
    return n;
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void initialize_parameters(ParameterStore& params, Rng& rng) {
    for (auto& [name, t] : params.items()) {
        if (ends_with(name, ".gamma")) {
            t.fill(1.0);
        } else if (ends_with(name, ".b") || ends_with(name, ".beta")) {
            t.fill(0.0);
        } else if (ends_with(name, ".pos")) {
            std::normal_distribution<double> nd(0.0, 0.02);
            for (double& v : t.values()) v = nd(rng);
        } else {
            const Index fan_in = t.rank() == 4 ? t.dim(1) * t.dim(2) * t.dim(3) : t.dim(0);
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::uniform_real_distribution<double> ud(-bound, bound);
            for (double& v : t.values()) v = ud(rng);
        }
    }
}

// ---------------------------------------------------------------------------
// small-convolutional

ConvClassifier::ConvClassifier(const ConvClassifierConfig& cfg) : cfg_(cfg) {
    if (cfg.resolution % 4) throw std::invalid_argument("conv classifier resolution must be a multiple of 4");
    const Index flat = static_cast<Index>(cfg.conv2) * (cfg.resolution / 4) * (cfg.resolution / 4);
    params_.add("conv1.w", {cfg.conv1, cfg.channels, 3, 3});
    params_.add("conv1.b", {cfg.conv1});
    params_.add("conv2.w", {cfg.conv2, cfg.conv1, 3, 3});
    params_.add("conv2.b", {cfg.conv2});
    params_.add("fc.w", {flat, cfg.hidden});
    params_.add("fc.b", {cfg.hidden});
    params_.add("head.w", {cfg.hidden, cfg.classes});
    params_.add("head.b", {cfg.classes});
}

ModelOutput ConvClassifier::forward(ad::Graph& g, ad::Var images) const {
    auto p = [&](const char* n) { return g.parameter(params_.get(n)); };
    ad::Var x = ad::conv2d(g, images, p("conv1.w"), p("conv1.b"), 1);
    x = ad::avg_pool2(g, ad::silu(g, x));
    x = ad::conv2d(g, x, p("conv2.w"), p("conv2.b"), 1);
    x = ad::avg_pool2(g, ad::silu(g, x));
    const Index n = g.shape(x)[0];
    x = ad::reshape(g, x, {n, g.value(x).size() / n});
    const ad::Var h = ad::silu(g, ad::linear(g, x, p("fc.w"), p("fc.b")));
    return {h, head(g, h)};
}

ad::Var ConvClassifier::head(ad::Graph& g, ad::Var features) const {
    return ad::linear(g, features, g.parameter(params_.get("head.w")), g.parameter(params_.get("head.b")));
}

nlohmann::json ConvClassifier::architecture() const { return {{"preset", identifier()}, {"config", cfg_}}; }

// ---------------------------------------------------------------------------
// small-attention

AttentionClassifier::AttentionClassifier(const AttentionClassifierConfig& cfg) : cfg_(cfg) {
    if (cfg.resolution % cfg.patch) throw std::invalid_argument("attention classifier resolution must be a multiple of patch");
    const Index grid = cfg.resolution / cfg.patch, tokens = grid * grid;
    const Index D = cfg.width;
    params_.add("embed.w", {static_cast<Index>(cfg.channels) * cfg.patch * cfg.patch, D});
    params_.add("embed.b", {D});
    params_.add("embed.pos", {tokens, D});
    params_.add("ln1.gamma", {D});
    params_.add("ln1.beta", {D});
    params_.add("q.w", {D, D});
    params_.add("q.b", {D});
    params_.add("k.w", {D, D});
    params_.add("k.b", {D});
    params_.add("v.w", {D, D});
    params_.add("v.b", {D});
    params_.add("o.w", {D, D});
    params_.add("o.b", {D});
    params_.add("ln2.gamma", {D});
    params_.add("ln2.beta", {D});
    params_.add("mlp1.w", {D, cfg.mlp});
    params_.add("mlp1.b", {cfg.mlp});
    params_.add("mlp2.w", {cfg.mlp, D});
    params_.add("mlp2.b", {D});
    params_.add("lnf.gamma", {D});
    params_.add("lnf.beta", {D});
    params_.add("head.w", {D, cfg.classes});
    params_.add("head.b", {cfg.classes});
}

ModelOutput AttentionClassifier::forward(ad::Graph& g, ad::Var images) const {
    auto p = [&](const char* n) { return g.parameter(params_.get(n)); };
    const Index grid = cfg_.resolution / cfg_.patch, tokens = grid * grid;
    ad::Var t = ad::linear(g, ad::patchify(g, images, cfg_.patch), p("embed.w"), p("embed.b"));
    t = ad::add_rows_periodic(g, t, p("embed.pos"));

    const ad::Var a = ad::layer_norm(g, t, p("ln1.gamma"), p("ln1.beta"));
    const ad::Var att = ad::self_attention(g, ad::linear(g, a, p("q.w"), p("q.b")), ad::linear(g, a, p("k.w"), p("k.b")),
                                           ad::linear(g, a, p("v.w"), p("v.b")), tokens);
    t = ad::add(g, t, ad::linear(g, att, p("o.w"), p("o.b")));

    const ad::Var b = ad::layer_norm(g, t, p("ln2.gamma"), p("ln2.beta"));
    const ad::Var m = ad::linear(g, ad::silu(g, ad::linear(g, b, p("mlp1.w"), p("mlp1.b"))), p("mlp2.w"), p("mlp2.b"));
    t = ad::add(g, t, m);

    const ad::Var h = ad::layer_norm(g, ad::mean_pool_tokens(g, t, tokens), p("lnf.gamma"), p("lnf.beta"));
    return {h, head(g, h)};
}

ad::Var AttentionClassifier::head(ad::Graph& g, ad::Var features) const {
    return ad::linear(g, features, g.parameter(params_.get("head.w")), g.parameter(params_.get("head.b")));
}

nlohmann::json AttentionClassifier::architecture() const { return {{"preset", identifier()}, {"config", cfg_}}; }

// ---------------------------------------------------------------------------
// mlp-mae

MlpMaskedAutoencoder::MlpMaskedAutoencoder(const MaskedAutoencoderConfig& cfg) : cfg_(cfg) {
    if (cfg.resolution % cfg.patch) throw std::invalid_argument("autoencoder resolution must be a multiple of patch");
    const Index grid = cfg.resolution / cfg.patch;
    const Index pixels = static_cast<Index>(cfg.channels) * cfg.resolution * cfg.resolution;
    params_.add("enc.w", {pixels + grid * grid, cfg.hidden});
    params_.add("enc.b", {cfg.hidden});
    params_.add("mid.w", {cfg.hidden, cfg.hidden});
    params_.add("mid.b", {cfg.hidden});
    params_.add("dec.w", {cfg.hidden, pixels});
    params_.add("dec.b", {pixels});
}

ad::Var MlpMaskedAutoencoder::predict(ad::Graph& g, ad::Var visible, const Tensor& hidden_mask) const {
    auto p = [&](const char* n) { return g.parameter(params_.get(n)); };
    const Shape s = g.shape(visible);
    const Index N = s[0], R = cfg_.resolution, grid = R / cfg_.patch, pixels = cfg_.channels * R * R;
    Tensor indicator({N, grid * grid});
    for (Index n = 0; n < N; ++n)
        for (Index ty = 0; ty < grid; ++ty)
            for (Index tx = 0; tx < grid; ++tx)
                indicator[n * grid * grid + ty * grid + tx] = hidden_mask[n * pixels + ty * cfg_.patch * R + tx * cfg_.patch];
    const ad::Var in = ad::concat_cols(g, {ad::reshape(g, visible, {N, pixels}), g.constant(std::move(indicator))});
    ad::Var h = ad::silu(g, ad::linear(g, in, p("enc.w"), p("enc.b")));
    h = ad::silu(g, ad::linear(g, h, p("mid.w"), p("mid.b")));
    const ad::Var out = ad::sigmoid(g, ad::linear(g, h, p("dec.w"), p("dec.b")));
    return ad::reshape(g, out, s);
}

nlohmann::json MlpMaskedAutoencoder::architecture() const { return {{"preset", identifier()}, {"config", cfg_}}; }

// ---------------------------------------------------------------------------
// dual encoder

ConvImageEncoder::ConvImageEncoder(const DualEncoderConfig& cfg) : cfg_(cfg) {
    if (cfg.resolution % 4) throw std::invalid_argument("image encoder resolution must be a multiple of 4");
    const Index flat = static_cast<Index>(cfg.conv2) * (cfg.resolution / 4) * (cfg.resolution / 4);
    params_.add("img.conv1.w", {cfg.conv1, cfg.channels, 3, 3});
    params_.add("img.conv1.b", {cfg.conv1});
    params_.add("img.conv2.w", {cfg.conv2, cfg.conv1, 3, 3});
    params_.add("img.conv2.b", {cfg.conv2});
    params_.add("img.fc.w", {flat, cfg.image_hidden});
    params_.add("img.fc.b", {cfg.image_hidden});
    params_.add("img.proj.w", {cfg.image_hidden, cfg.embedding});
    params_.add("img.proj.b", {cfg.embedding});
}

ad::Var ConvImageEncoder::embed(ad::Graph& g, ad::Var images) const {
    auto p = [&](const char* n) { return g.parameter(params_.get(n)); };
    ad::Var x = ad::avg_pool2(g, ad::silu(g, ad::conv2d(g, images, p("img.conv1.w"), p("img.conv1.b"), 1)));
    x = ad::avg_pool2(g, ad::silu(g, ad::conv2d(g, x, p("img.conv2.w"), p("img.conv2.b"), 1)));
    const Index n = g.shape(x)[0];
    x = ad::reshape(g, x, {n, g.value(x).size() / n});
    x = ad::silu(g, ad::linear(g, x, p("img.fc.w"), p("img.fc.b")));
    return ad::linear(g, x, p("img.proj.w"), p("img.proj.b"));
}

nlohmann::json ConvImageEncoder::architecture() const { return {{"preset", identifier()}, {"config", cfg_}}; }

HashedTextEncoder::HashedTextEncoder(const DualEncoderConfig& cfg) : cfg_(cfg) {
    params_.add("txt.fc.w", {cfg.text_features, cfg.text_hidden});
    params_.add("txt.fc.b", {cfg.text_hidden});
    params_.add("txt.proj.w", {cfg.text_hidden, cfg.embedding});
    params_.add("txt.proj.b", {cfg.embedding});
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

Tensor HashedTextEncoder::featurize(const std::vector<std::string>& texts) const {
    const Index F = cfg_.text_features;
    Tensor out({static_cast<Index>(texts.size()), F});
    for (std::size_t t = 0; t < texts.size(); ++t) {
        std::vector<std::string> words;
        std::string cur;
        for (char ch : texts[t]) {
            if (std::isalnum(static_cast<unsigned char>(ch))) {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            } else if (!cur.empty()) {
                words.push_back(cur);
                cur.clear();
            }
        }
        if (!cur.empty()) words.push_back(cur);
        double* row = out.data() + static_cast<Index>(t) * F;
        for (const auto& w : words) {
            row[fnv1a("w:" + w) % static_cast<std::uint64_t>(F)] += 1.0;
            const std::string padded = "^" + w + "$";
            for (std::size_t i = 0; i + 3 <= padded.size(); ++i)
                row[fnv1a("c:" + padded.substr(i, 3)) % static_cast<std::uint64_t>(F)] += 1.0;
        }
        double ss = 0.0;
        for (Index f = 0; f < F; ++f) ss += row[f] * row[f];
        if (ss > 0.0)
            for (Index f = 0; f < F; ++f) row[f] /= std::sqrt(ss);
    }
    return out;
}

ad::Var HashedTextEncoder::embed(ad::Graph& g, const std::vector<std::string>& texts) const {
    auto p = [&](const char* n) { return g.parameter(params_.get(n)); };
    const ad::Var x = g.constant(featurize(texts));
    const ad::Var h = ad::silu(g, ad::linear(g, x, p("txt.fc.w"), p("txt.fc.b")));
    return ad::linear(g, h, p("txt.proj.w"), p("txt.proj.b"));
}

nlohmann::json HashedTextEncoder::architecture() const { return {{"preset", "hashed-text-encoder"}, {"config", cfg_}}; }

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const ConvClassifierConfig& c) {
    j = {{"channels", c.channels}, {"resolution", c.resolution}, {"classes", c.classes},
         {"conv1", c.conv1},       {"conv2", c.conv2},           {"hidden", c.hidden}};
}
void from_json(const nlohmann::json& j, ConvClassifierConfig& c) {
    j.at("channels").get_to(c.channels);
    j.at("resolution").get_to(c.resolution);
    j.at("classes").get_to(c.classes);
    j.at("conv1").get_to(c.conv1);
    j.at("conv2").get_to(c.conv2);
    j.at("hidden").get_to(c.hidden);
}
void to_json(nlohmann::json& j, const AttentionClassifierConfig& c) {
    j = {{"channels", c.channels}, {"resolution", c.resolution}, {"classes", c.classes},
         {"patch", c.patch},       {"width", c.width},           {"mlp", c.mlp}};
}
void from_json(const nlohmann::json& j, AttentionClassifierConfig& c) {
    j.at("channels").get_to(c.channels);
    j.at("resolution").get_to(c.resolution);
    j.at("classes").get_to(c.classes);
    j.at("patch").get_to(c.patch);
    j.at("width").get_to(c.width);
    j.at("mlp").get_to(c.mlp);
}
void to_json(nlohmann::json& j, const MaskedAutoencoderConfig& c) {
    j = {{"channels", c.channels}, {"resolution", c.resolution}, {"patch", c.patch}, {"hidden", c.hidden}};
}
void from_json(const nlohmann::json& j, MaskedAutoencoderConfig& c) {
    j.at("channels").get_to(c.channels);
    j.at("resolution").get_to(c.resolution);
    j.at("patch").get_to(c.patch);
    j.at("hidden").get_to(c.hidden);
}
void to_json(nlohmann::json& j, const DualEncoderConfig& c) {
    j = {{"channels", c.channels},         {"resolution", c.resolution},       {"embedding", c.embedding},
         {"conv1", c.conv1},               {"conv2", c.conv2},                 {"image_hidden", c.image_hidden},
         {"text_features", c.text_features}, {"text_hidden", c.text_hidden}};
}
void from_json(const nlohmann::json& j, DualEncoderConfig& c) {
    j.at("channels").get_to(c.channels);
    j.at("resolution").get_to(c.resolution);
    j.at("embedding").get_to(c.embedding);
    j.at("conv1").get_to(c.conv1);
    j.at("conv2").get_to(c.conv2);
    j.at("image_hidden").get_to(c.image_hidden);
    j.at("text_features").get_to(c.text_features);
    j.at("text_hidden").get_to(c.text_hidden);
}

}  // namespace cag
