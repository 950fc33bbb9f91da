#include "cag/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>

namespace cag {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
    double d = 0.0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), d);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size())
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    return d;
}

long to_long(const std::string& key, const std::string& v) {
    long d = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), d);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size())
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    return d;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t d = 0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), d);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size())
        throw ConfigError("key '" + key + "': expected a nonnegative integer, got '" + v + "'");
    return d;
}

int to_int(const std::string& key, const std::string& v) { return static_cast<int>(to_long(key, v)); }

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::string> split(const std::string& v, char sep) {
    std::vector<std::string> out;
    if (trim(v).empty()) return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f, char sep = ',') {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += sep;
        s += f(v[i]);
    }
    return s;
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

struct Key {
    std::string name;
    std::string doc;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define CAG_NUM(field, conv)                                                                    \
    [](ExperimentConfig& c, const std::string& v) { c.field = conv(#field, v); },               \
        [](const ExperimentConfig& c) { return fmt(static_cast<double>(c.field)); }
#define CAG_INT(field)                                                                          \
    [](ExperimentConfig& c, const std::string& v) { c.field = to_int(#field, v); },             \
        [](const ExperimentConfig& c) { return std::to_string(c.field); }
#define CAG_STR(field)                                                                          \
    [](ExperimentConfig& c, const std::string& v) { c.field = v; },                             \
        [](const ExperimentConfig& c) { return c.field; }

const std::vector<Key>& keys() {
    static const std::vector<Key> k = {
        {"seed", "master seed (required)",
         [](ExperimentConfig& c, const std::string& v) { c.seed = to_u64("seed", v); },
         [](const ExperimentConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }},
        {"out", "output directory", CAG_STR(out)},
        {"workers", "parallel independent runs", CAG_INT(workers)},
        {"dataset", "dataset spec: mnist:<dir>, cifar10:<dir>, folder:<dir>", CAG_STR(dataset)},
        {"classifier", "classifier model container", CAG_STR(classifier)},
        {"reconstruction", "masked-autoencoder container, or none", CAG_STR(reconstruction)},
        {"ensemble", "comma-separated classifier containers (loss-level ensemble)",
         [](ExperimentConfig& c, const std::string& v) { c.ensemble = split(v, ','); },
         [](const ExperimentConfig& c) { return join(c.ensemble, [](const std::string& s) { return s; }); }},
        {"ensemble_weights", "comma-separated ensemble weights summing to 1",
         [](ExperimentConfig& c, const std::string& v) {
             c.ensemble_weights.clear();
             for (const auto& s : split(v, ',')) c.ensemble_weights.push_back(to_double("ensemble_weights", s));
         },
         [](const ExperimentConfig& c) { return join(c.ensemble_weights, fmt); }},
        {"stats", "directory holding class_<k>.stats files", CAG_STR(stats)},
        {"dual_encoder", "dual-encoder container for t2i", CAG_STR(dual_encoder)},
        {"temperature", "text classifier temperature tau", CAG_NUM(temperature, to_double)},
        {"classes", "comma-separated target classes",
         [](ExperimentConfig& c, const std::string& v) {
             c.classes.clear();
             for (const auto& s : split(v, ',')) c.classes.push_back(to_int("classes", s));
         },
         [](const ExperimentConfig& c) { return join(c.classes, [](int i) { return std::to_string(i); }); }},
        {"prompts", "'|'-separated text prompts",
         [](ExperimentConfig& c, const std::string& v) { c.prompts = split(v, '|'); },
         [](const ExperimentConfig& c) { return join(c.prompts, [](const std::string& s) { return s; }, '|'); }},
        {"steps", "total sampling steps split over stage_resolutions",
         [](ExperimentConfig& c, const std::string& v) { c.steps = to_long("steps", v); },
         [](const ExperimentConfig& c) { return std::to_string(c.steps); }},
        {"stage_resolutions", "comma-separated stage resolutions",
         [](ExperimentConfig& c, const std::string& v) {
             c.stage_resolutions.clear();
             for (const auto& s : split(v, ',')) c.stage_resolutions.push_back(to_int("stage_resolutions", s));
         },
         [](const ExperimentConfig& c) { return join(c.stage_resolutions, [](int i) { return std::to_string(i); }); }},
        {"stages", "explicit stages res:steps,... (overrides steps/stage_resolutions)",
         [](ExperimentConfig& c, const std::string& v) { c.explicit_stages = parse_stages(v); },
         [](const ExperimentConfig& c) { return format_stages(c.explicit_stages); }},
        {"step_size", "optimizer step size", CAG_NUM(step_size, to_double)},
        {"optimizer", "adam or plain", CAG_STR(optimizer)},
        {"mask_ratio", "fraction of patches hidden per step", CAG_NUM(mask_ratio, to_double)},
        {"blur_sigma", "gradient blur sigma (0 = off)", CAG_NUM(blur_sigma, to_double)},
        {"w_cls", "classification loss weight", CAG_NUM(w_cls, to_double)},
        {"w_div", "distance-metric loss weight", CAG_NUM(w_div, to_double)},
        {"w_dist", "distribution loss weight", CAG_NUM(w_dist, to_double)},
        {"diversity", "raw or cosine inner products", CAG_STR(diversity)},
        {"fill_value", "value written into hidden patches", CAG_NUM(fill_value, to_double)},
        {"batch_size", "samples per run (N)", CAG_INT(batch_size)},
        {"fast", "fast mode: fewer steps, gradient blur on",
         [](ExperimentConfig& c, const std::string& v) { c.fast = to_bool("fast", v); },
         [](const ExperimentConfig& c) { return bool_str(c.fast); }},
        {"fast_blur_sigma", "blur sigma used by fast mode", CAG_NUM(fast_blur_sigma, to_double)},
        {"fast_step_fraction", "fraction of the step budget used by fast mode", CAG_NUM(fast_step_fraction, to_double)},
        {"checkpoint_every", "steps between checkpoints (0 = stage ends only)", CAG_INT(checkpoint_every)},
        {"stats_masks_per_image", "random masks per real image for statistics", CAG_INT(stats_masks_per_image)},
        {"train_models", "comma-separated: classifier, autoencoder, dual-encoder",
         [](ExperimentConfig& c, const std::string& v) { c.train_models = split(v, ','); },
         [](const ExperimentConfig& c) { return join(c.train_models, [](const std::string& s) { return s; }); }},
        {"preset", "classifier preset: small-convolutional or small-attention", CAG_STR(preset)},
        {"train_epochs", "training epochs (0 = preset default)", CAG_INT(train_epochs)},
        {"train_batch_size", "training minibatch size", CAG_INT(train_batch_size)},
        {"train_learning_rate", "training learning rate (0 = preset default)", CAG_NUM(train_learning_rate, to_double)},
        {"train_shift", "max random translation in training, pixels", CAG_INT(train_shift)},
        {"run", "run directory to evaluate", CAG_STR(run)},
        {"extractor", "classifier container used for FID / IS / diversity", CAG_STR(extractor)},
        {"is_splits", "inception score splits", CAG_INT(is_splits)},
        {"axis", "ablation axis: reconstruction, blur, progressive, div-loss, dist-loss, ensemble", CAG_STR(axis)},
    };
    return k;
}

#undef CAG_NUM
#undef CAG_INT
#undef CAG_STR

}  // namespace

KeyValues parse_key_values(std::istream& is, const std::string& origin) {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
        if (k.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        if (!kv.emplace(k, v).second) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + k + "'");
    }
    return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    return parse_key_values(is, path.string());
}

void write_key_values(std::ostream& os, const KeyValues& kv, const std::string& tag) {
    os << "# " << tag << '\n';
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    for (const auto& k : keys())
        if (k.name == key) {
            k.set(*this, value);
            return;
        }
    throw ConfigError("unknown config key '" + key + "'");
}

void ExperimentConfig::apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) set(k, v);
}

KeyValues ExperimentConfig::to_key_values() const {
    KeyValues kv;
    for (const auto& k : keys()) kv[k.name] = k.get(*this);
    return kv;
}

const std::vector<std::pair<std::string, std::string>>& config_keys() {
    static const std::vector<std::pair<std::string, std::string>> out = [] {
        std::vector<std::pair<std::string, std::string>> v;
        for (const auto& k : keys()) v.emplace_back(k.name, k.doc);
        return v;
    }();
    return out;
}

void ExperimentConfig::validate(const std::string& command) const {
    if (!seed) throw ConfigError("seed is required (--seed or 'seed = ...' in the config file)");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    auto need_file = [](const std::string& what, const std::string& path) {
        if (path.empty()) throw ConfigError(what + " path is required");
        if (!std::filesystem::exists(path)) throw ConfigError(what + " not found: " + path);
    };
    const bool sampling = command == "generate" || command == "t2i" || command == "ablate";
    if (sampling) {
        try {
            sampler_config(classes.empty() ? 0 : classes.front()).validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        if (optimizer != "adam" && optimizer != "plain") throw ConfigError("optimizer must be adam or plain");
        if (diversity != "raw" && diversity != "cosine") throw ConfigError("diversity must be raw or cosine");
    }
    if (command == "generate" || command == "ablate" || command == "stats") {
        if (ensemble.empty())
            need_file("classifier", classifier);
        else
            for (const auto& e : ensemble) need_file("ensemble member", e);
        if (!ensemble.empty() && ensemble.size() != ensemble_weights.size())
            throw ConfigError("ensemble_weights must list one weight per ensemble member");
        if (reconstruction != "none") need_file("reconstruction", reconstruction);
        if (classes.empty()) throw ConfigError("at least one class is required");
        for (int c : classes)
            if (c < 0) throw ConfigError("classes must be >= 0");
    }
    if ((command == "generate" || command == "ablate") && w_dist > 0.0) need_file("stats directory", stats);
    if (command == "t2i") {
        need_file("dual_encoder", dual_encoder);
        if (prompts.empty()) throw ConfigError("at least one prompt is required (--prompt)");
        if (reconstruction != "none") need_file("reconstruction", reconstruction);
        if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    }
    if (command == "evaluate") {
        need_file("run directory", run);
        need_file("extractor", extractor);
        if (is_splits < 1) throw ConfigError("is_splits must be >= 1");
    }
    if (command == "ablate") {
        static const std::vector<std::string> axes = {"reconstruction", "blur", "progressive", "div-loss", "dist-loss", "ensemble"};
        if (std::find(axes.begin(), axes.end(), axis) == axes.end())
            throw ConfigError("axis must be one of reconstruction, blur, progressive, div-loss, dist-loss, ensemble");
        if (axis == "reconstruction" && reconstruction == "none")
            throw ConfigError("axis reconstruction needs a reconstruction module");
        if (axis == "ensemble" && ensemble.size() < 2) throw ConfigError("axis ensemble needs >= 2 ensemble members");
    }
    if (command == "zoo-train") {
        for (const auto& m : train_models)
            if (m != "classifier" && m != "autoencoder" && m != "dual-encoder")
                throw ConfigError("unknown train_models entry '" + m + "'");
        if (preset != "small-convolutional" && preset != "small-attention")
            throw ConfigError("preset must be small-convolutional or small-attention");
        if (train_epochs < 0 || train_batch_size < 1 || train_learning_rate < 0.0 || train_shift < 0)
            throw ConfigError("invalid training hyperparameters");
    }
}

SamplerConfig ExperimentConfig::sampler_config(int target_class) const {
    SamplerConfig s;
    try {
        s.stages = explicit_stages.empty() ? split_stages(stage_resolutions, steps) : explicit_stages;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    s.step_size = step_size;
    s.optimizer = optimizer == "plain" ? OptimizerKind::plain : OptimizerKind::adam;
    s.mask_ratio = mask_ratio;
    s.blur_sigma = blur_sigma;
    s.weights = {w_cls, w_div, w_dist};
    s.diversity = diversity == "cosine" ? DiversityMode::cosine : DiversityMode::raw;
    s.fill_value = fill_value;
    s.seed = seed.value_or(0);
    s.batch_size = batch_size;
    s.target_class = target_class;
    s.fast_mode = fast;
    s.fast_blur_sigma = fast_blur_sigma;
    s.fast_step_fraction = fast_step_fraction;
    s.checkpoint_every = checkpoint_every;
    return s;
}

std::string format_stages(const std::vector<Stage>& stages) {
    return join(stages, [](const Stage& s) { return std::to_string(s.resolution) + ":" + std::to_string(s.steps); });
}

std::vector<Stage> parse_stages(const std::string& s) {
    std::vector<Stage> out;
    for (const auto& item : split(s, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("stage '" + item + "' must be resolution:steps");
        out.push_back({to_int("stages", trim(item.substr(0, colon))), to_int("stages", trim(item.substr(colon + 1)))});
    }
    return out;
}

KeyValues sampler_to_key_values(const SamplerConfig& c) {
    return {{"stages", format_stages(c.stages)},
            {"step_size", fmt(c.step_size)},
            {"optimizer", to_string(c.optimizer)},
            {"mask_ratio", fmt(c.mask_ratio)},
            {"blur_sigma", fmt(c.blur_sigma)},
            {"w_cls", fmt(c.weights.cls)},
            {"w_div", fmt(c.weights.div)},
            {"w_dist", fmt(c.weights.dist)},
            {"diversity", c.diversity == DiversityMode::cosine ? "cosine" : "raw"},
            {"fill_value", fmt(c.fill_value)},
            {"seed", std::to_string(c.seed)},
            {"batch_size", std::to_string(c.batch_size)},
            {"target_class", std::to_string(c.target_class)},
            {"channels", std::to_string(c.channels)},
            {"fast", bool_str(c.fast_mode)},
            {"fast_blur_sigma", fmt(c.fast_blur_sigma)},
            {"fast_step_fraction", fmt(c.fast_step_fraction)},
            {"checkpoint_every", std::to_string(c.checkpoint_every)}};
}

SamplerConfig sampler_from_key_values(const KeyValues& kv) {
    SamplerConfig c;
    std::vector<std::string> seen;
    for (const auto& [k, v] : kv) {
        if (k == "stages") c.stages = parse_stages(v);
        else if (k == "step_size") c.step_size = to_double(k, v);
        else if (k == "optimizer") {
            try {
                c.optimizer = parse_optimizer(v);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        } else if (k == "mask_ratio") c.mask_ratio = to_double(k, v);
        else if (k == "blur_sigma") c.blur_sigma = to_double(k, v);
        else if (k == "w_cls") c.weights.cls = to_double(k, v);
        else if (k == "w_div") c.weights.div = to_double(k, v);
        else if (k == "w_dist") c.weights.dist = to_double(k, v);
        else if (k == "diversity") {
            if (v != "raw" && v != "cosine") throw ConfigError("diversity must be raw or cosine");
            c.diversity = v == "cosine" ? DiversityMode::cosine : DiversityMode::raw;
        } else if (k == "fill_value") c.fill_value = to_double(k, v);
        else if (k == "seed") c.seed = to_u64(k, v);
        else if (k == "batch_size") c.batch_size = to_int(k, v);
        else if (k == "target_class") c.target_class = to_int(k, v);
        else if (k == "channels") c.channels = to_int(k, v);
        else if (k == "fast") c.fast_mode = to_bool(k, v);
        else if (k == "fast_blur_sigma") c.fast_blur_sigma = to_double(k, v);
        else if (k == "fast_step_fraction") c.fast_step_fraction = to_double(k, v);
        else if (k == "checkpoint_every") c.checkpoint_every = to_int(k, v);
        else throw ConfigError("unknown sampler key '" + k + "'");
    }
    return c;
}

}  // namespace cag
