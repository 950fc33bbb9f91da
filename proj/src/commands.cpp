#include "cag/commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>

#include "cag/dataset.hpp"
#include "cag/image.hpp"
#include "cag/rng.hpp"
#include "cag/zoo.hpp"

namespace cag {

namespace fs = std::filesystem;

namespace {

std::mutex log_mutex;

void say(std::ostream& log, const std::string& line) {
    std::lock_guard<std::mutex> lock(log_mutex);
    log << line << '\n' << std::flush;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string class_dir(int k) { return "class_" + std::to_string(k); }

StatisticsOptions stats_options(const ExperimentConfig& c) {
    return {c.mask_ratio, *c.seed, c.stats_masks_per_image, c.fill_value};
}

ClassStatistics load_stats_checked(const ExperimentConfig& c, int k, const GeneralizedClassifier& model) {
    const fs::path p = stats_file(c.stats, k);
    if (!fs::exists(p)) throw ConfigError("missing statistics for class " + std::to_string(k) + ": " + p.string());
    ClassStatistics s = load_class_statistics(p);
    if (s.dim() != model.feature_dim())
        throw ConfigError("statistics " + p.string() + " have dimension " + std::to_string(s.dim()) +
                          " but the classifier has feature_dim " + std::to_string(model.feature_dim()));
    return s;
}

void check_class(int k, const GeneralizedClassifier& model) {
    if (k < 0 || k >= model.num_classes())
        throw ConfigError("class " + std::to_string(k) + " is outside [0, " + std::to_string(model.num_classes()) + ")");
}

double final_hit_rate(const RunRecord& r, const GeneralizedClassifier& model) {
    const std::vector<int> labels = predict_labels(model, r.final_images);
    return static_cast<double>(std::count(labels.begin(), labels.end(), r.config.target_class)) /
           static_cast<double>(labels.size());
}

std::string run_line(const std::string& name, const RunRecord& r, const fs::path& dir, double hit_rate) {
    std::string s = name + " status=" + (r.aborted ? "aborted" : "complete") + " steps=" + std::to_string(r.log.size()) +
                    " hit_rate=" + num(hit_rate);
    if (!r.log.empty()) s += " final_total=" + num(r.log.back().loss.total);
    s += " dir=" + dir.string();
    if (r.aborted) s += " failure=\"" + r.failure + "\"";
    return s;
}

struct JobOutcome {
    RunRecord record;
    fs::path dir;
};

}  // namespace

fs::path stats_file(const fs::path& dir, int class_id) { return dir / ("class_" + std::to_string(class_id) + ".stats"); }

ClassifierPtr load_generation_classifier(const ExperimentConfig& c) {
    if (c.ensemble.empty()) return load_classifier(c.classifier);
    EnsembleSpec spec;
    for (const auto& p : c.ensemble) spec.members.push_back(load_classifier(p));
    spec.weights = c.ensemble_weights;
    try {
        return make_ensemble(spec);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

ReconstructionPtr load_reconstruction(const ExperimentConfig& c) {
    if (c.reconstruction.empty() || c.reconstruction == "none") return nullptr;
    return load_autoencoder(c.reconstruction);
}

void write_effective_config(const fs::path& dir, const ExperimentConfig& c) {
    fs::create_directories(dir);
    std::ofstream os(dir / "experiment.txt");
    if (!os) throw std::runtime_error("cannot write " + (dir / "experiment.txt").string());
    write_key_values(os, c.to_key_values(), "cag-experiment v1");
}

RunRecord execute_run(const SamplerConfig& config, const SamplerModels& models, const fs::path& dir, bool resume,
                      const nlohmann::json& meta) {
    fs::create_directories(dir);
    RunCallbacks cb;
    cb.on_checkpoint = [&](const RunRecord& partial) { save_run_record(dir, partial, meta); };
    GenerationResult result;
    if (resume && fs::exists(dir / "status.txt")) {
        const RunRecord partial = load_run_record(dir);
        if (partial.finished) return partial;
        if (sampler_to_key_values(partial.config) != sampler_to_key_values(config))
            throw ConfigError("cannot resume " + dir.string() + ": its config differs from the requested one");
        result = resume_generate(partial, config, models, cb);
    } else {
        result = progressive_generate(config, models, cb);
    }
    save_run_record(dir, result.record, meta);
    return std::move(result.record);
}

std::vector<fs::path> find_runs(const fs::path& dir) {
    if (fs::exists(dir / "config.txt") && fs::exists(dir / "final.raw")) return {dir};
    std::vector<fs::path> out;
    if (fs::is_directory(dir))
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory() && fs::exists(e.path() / "config.txt") && fs::exists(e.path() / "final.raw"))
                out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

EvaluationReport evaluate_runs(const std::vector<fs::path>& runs, const GeneralizedClassifier& extractor,
                               const LabeledImages& real, int is_splits, std::uint64_t seed) {
    if (runs.empty()) throw ConfigError("no run records to evaluate");
    EvaluationReport rep;
    std::vector<RowMatrix> feats;
    std::vector<RowMatrix> probs;
    std::vector<int> classes;
    long total = 0, hits = 0;
    Index channels = 0, res = 0;
    for (const auto& dir : runs) {
        const RunRecord r = load_run_record(dir);
        const Tensor& x = r.final_images;
        channels = x.dim(1);
        res = x.dim(2);
        const RowMatrix f = extract_features(extractor, x);
        const RowMatrix logits = apply_head(extractor, f);
        rep.diversity += diversity_score(f);
        for (Index i = 0; i < logits.rows(); ++i) {
            Index arg = 0;
            logits.row(i).maxCoeff(&arg);
            hits += arg == r.config.target_class;
        }
        total += x.dim(0);
        feats.push_back(f);
        probs.push_back(softmax_rows(logits));
        if (std::find(classes.begin(), classes.end(), r.config.target_class) == classes.end())
            classes.push_back(r.config.target_class);
    }
    rep.diversity /= static_cast<double>(runs.size());
    rep.accuracy = static_cast<double>(hits) / static_cast<double>(total);
    auto stack = [](const std::vector<RowMatrix>& parts) {
        Index rows = 0;
        for (const auto& p : parts) rows += p.rows();
        RowMatrix m(rows, parts.front().cols());
        Index at = 0;
        for (const auto& p : parts) {
            m.middleRows(at, p.rows()) = p;
            at += p.rows();
        }
        return m;
    };
    const RowMatrix gen = stack(feats);
    const RowMatrix gen_probs = stack(probs);

    std::vector<Index> idx;
    for (Index i = 0; i < real.size(); ++i)
        if (std::find(classes.begin(), classes.end(), real.labels[static_cast<std::size_t>(i)]) != classes.end())
            idx.push_back(i);
    if (idx.size() < 4) throw ConfigError("reference dataset has too few images of the generated classes");
    const Tensor real_images = gather_rows(real.images, idx);
    const RowMatrix real_f = extract_features(extractor, real_images);
    const GaussianSummary real_s = gaussian_summary(real_f);

    const FrechetResult fid = frechet(gaussian_summary(gen), real_s);
    rep.fid = fid.value;

    RowMatrix half_a(0, real_f.cols()), half_b(0, real_f.cols());
    {
        std::vector<Index> a, b;
        for (Index i = 0; i < real_f.rows(); ++i) (i % 2 ? b : a).push_back(i);
        half_a.resize(static_cast<Index>(a.size()), real_f.cols());
        half_b.resize(static_cast<Index>(b.size()), real_f.cols());
        for (std::size_t i = 0; i < a.size(); ++i) half_a.row(static_cast<Index>(i)) = real_f.row(a[i]);
        for (std::size_t i = 0; i < b.size(); ++i) half_b.row(static_cast<Index>(i)) = real_f.row(b[i]);
    }
    rep.fid_real_split = frechet_distance(gaussian_summary(half_a), gaussian_summary(half_b));

    Tensor noise({static_cast<Index>(total), channels, res, res});
    {
        const Index per = channels * res * res;
        for (Index i = 0; i < noise.dim(0); ++i) {
            Rng rng = make_stream(seed, StreamDomain::evaluation, static_cast<std::uint64_t>(i), 0x0015E);
            std::normal_distribution<double> nd(0.5, 0.2);
            for (Index j = 0; j < per; ++j) noise[i * per + j] = nd(rng);
        }
        clamp_unit(noise);
    }
    rep.fid_noise = frechet_distance(gaussian_summary(extract_features(extractor, noise)), real_s);

    // Runs are stacked class by class; shuffle so each split mixes classes.
    RowMatrix mixed(gen_probs.rows(), gen_probs.cols());
    {
        std::vector<Index> order(static_cast<std::size_t>(gen_probs.rows()));
        std::iota(order.begin(), order.end(), Index{0});
        Rng rng = make_stream(seed, StreamDomain::evaluation, 0, 0x15);
        std::shuffle(order.begin(), order.end(), rng);
        for (Index i = 0; i < mixed.rows(); ++i) mixed.row(i) = gen_probs.row(order[static_cast<std::size_t>(i)]);
    }
    rep.inception = inception_score(mixed, std::min<int>(is_splits, static_cast<int>(mixed.rows())));

    const std::string id = extractor.identifier();
    const long n = static_cast<long>(gen.rows()), m = static_cast<long>(real_f.rows());
    rep.records.push_back({"fid", rep.fid, 0.0, n, m, id, fid.warnings.empty() ? "" : fid.warnings.front()});
    rep.records.push_back({"fid_real_split", rep.fid_real_split, 0.0, static_cast<long>(half_a.rows()),
                           static_cast<long>(half_b.rows()), id, ""});
    rep.records.push_back({"fid_noise", rep.fid_noise, 0.0, n, m, id, ""});
    rep.records.push_back({"inception_score", rep.inception.mean, rep.inception.std, n, 0, id,
                           "splits=" + std::to_string(std::min<int>(is_splits, static_cast<int>(n)))});
    rep.records.push_back({"diversity", rep.diversity, 0.0, n, 0, id, "runs=" + std::to_string(runs.size())});
    rep.records.push_back({"accuracy", rep.accuracy, 0.0, n, 0, id, ""});
    return rep;
}

int cmd_zoo_train(const ExperimentConfig& c, std::ostream& log) {
    c.validate("zoo-train");
    const fs::path out = c.out;
    write_effective_config(out, c);
    const LabeledImages train = load_dataset(c.dataset, Split::train);
    const LabeledImages test = load_dataset(c.dataset, Split::test);
    auto base = [&] {
        TrainConfig t;
        t.dataset = c.dataset;
        t.batch_size = c.train_batch_size;
        t.seed = *c.seed;
        t.max_shift = c.train_shift;
        t.mask_ratio = c.mask_ratio;
        return t;
    };
    auto pick = [](int v, int dflt) { return v > 0 ? v : dflt; };
    auto pickd = [](double v, double dflt) { return v > 0.0 ? v : dflt; };
    auto report_line = [&](const std::string& name, const TrainReport& r, const fs::path& path) {
        say(log, "model=" + name + " metric=" + num(r.held_out_metric) + " floor=" + num(r.floor) +
                     " passed=" + (r.passed ? "true" : "false") + " path=" + path.string());
        if (!r.passed) say(log, "warning floor_unmet model=" + name);
        std::ofstream os(out / (name + ".report.json"));
        os << nlohmann::json(r).dump(2) << '\n';
    };
    for (const auto& m : c.train_models) {
        if (m == "classifier") {
            TrainConfig t = base();
            t.preset = c.preset;
            const bool attn = c.preset == "small-attention";
            t.epochs = pick(c.train_epochs, attn ? 20 : 5);
            t.learning_rate = pickd(c.train_learning_rate, attn ? 3e-3 : 2e-3);
            const auto r = train_classifier(train, test, t);
            const fs::path p = out / "classifier.cagm";
            save_classifier(p, *r.model, t, r.report);
            report_line("classifier", r.report, p);
        } else if (m == "autoencoder") {
            TrainConfig t = base();
            t.epochs = pick(c.train_epochs, 5);
            t.learning_rate = pickd(c.train_learning_rate, 1e-3);
            const auto r = train_masked_autoencoder(train, test, t);
            const fs::path p = out / "autoencoder.cagm";
            save_autoencoder(p, *r.model, t, r.report);
            report_line("autoencoder", r.report, p);
        } else {
            TrainConfig t = base();
            t.epochs = pick(c.train_epochs, 5);
            t.learning_rate = pickd(c.train_learning_rate, 2e-3);
            const auto r = train_dual_encoder(train, test, t);
            const fs::path p = out / "dual_encoder.cagm";
            save_dual_encoder(p, r.model, t, r.report);
            report_line("dual_encoder", r.report, p);
        }
    }
    return exit_ok;
}

int cmd_stats(const ExperimentConfig& c, std::ostream& log) {
    c.validate("stats");
    const fs::path out = c.out;
    write_effective_config(out, c);
    const ClassifierPtr model = load_generation_classifier(c);
    const ReconstructionPtr recon = load_reconstruction(c);
    const LabeledImages train = load_dataset(c.dataset, Split::train);
    for (int k : c.classes) check_class(k, *model);
    std::vector<std::function<int()>> jobs;
    for (int k : c.classes)
        jobs.push_back([&, k] {
            const ClassStatistics s = estimate_class_statistics(train, k, *model, recon.get(), stats_options(c));
            const fs::path p = stats_file(out, k);
            save_class_statistics(p, s);
            say(log, "class=" + std::to_string(k) + " count=" + std::to_string(s.count) +
                         " dim=" + std::to_string(s.dim()) + " path=" + p.string());
            return 0;
        });
    run_parallel(jobs, c.workers);
    return exit_ok;
}

int cmd_generate(const ExperimentConfig& c, std::ostream& log, bool resume) {
    c.validate("generate");
    const fs::path out = c.out;
    write_effective_config(out, c);
    const ClassifierPtr model = load_generation_classifier(c);
    const ReconstructionPtr recon = load_reconstruction(c);
    std::map<int, ClassStatistics> stats;
    for (int k : c.classes) {
        check_class(k, *model);
        if (c.w_dist > 0.0) stats.emplace(k, load_stats_checked(c, k, *model));
    }
    std::vector<std::function<JobOutcome()>> jobs;
    for (int k : c.classes)
        jobs.push_back([&, k] {
            const SamplerConfig sc = c.sampler_config(k);
            const SamplerModels m{model, recon, c.w_dist > 0.0 ? &stats.at(k) : nullptr};
            const fs::path dir = out / class_dir(k);
            const nlohmann::json meta = {{"command", "generate"},
                                         {"classifier", model->identifier()},
                                         {"reconstruction", recon ? recon->identifier() : "none"}};
            RunRecord r = execute_run(sc, m, dir, resume, meta);
            say(log, run_line("class=" + std::to_string(k), r, dir, final_hit_rate(r, *model)));
            return JobOutcome{std::move(r), dir};
        });
    const auto results = run_parallel(jobs, c.workers);
    for (const auto& r : results)
        if (r.record.aborted) return exit_numerical;
    return exit_ok;
}

int cmd_t2i(const ExperimentConfig& c, std::ostream& log) {
    c.validate("t2i");
    const fs::path out = c.out;
    write_effective_config(out, c);
    const DualEncoder dual = load_dual_encoder(c.dual_encoder);
    ClassifierPtr model;
    try {
        model = text_to_classifier(dual.image, dual.text, c.prompts, c.temperature);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const ReconstructionPtr recon = load_reconstruction(c);
    ClassifierPtr judge;
    if (!c.classifier.empty()) judge = load_classifier(c.classifier);
    std::vector<std::function<JobOutcome()>> jobs;
    for (std::size_t k = 0; k < c.prompts.size(); ++k)
        jobs.push_back([&, k] {
            SamplerConfig sc = c.sampler_config(static_cast<int>(k));
            sc.weights.dist = 0.0;
            const SamplerModels m{model, recon, nullptr};
            const fs::path dir = out / ("prompt_" + std::to_string(k));
            const nlohmann::json meta = {{"command", "t2i"}, {"prompt", c.prompts[k]}, {"temperature", c.temperature}};
            RunRecord r = execute_run(sc, m, dir, false, meta);
            {
                std::ofstream os(dir / "prompt.txt");
                os << c.prompts[k] << '\n';
            }
            std::string line = run_line("prompt=" + std::to_string(k), r, dir, final_hit_rate(r, *model));
            if (judge) {
                std::map<int, int> votes;
                for (int l : predict_labels(*judge, r.final_images)) ++votes[l];
                std::string v;
                for (const auto& [l, n] : votes) v += (v.empty() ? "" : ",") + std::to_string(l) + ":" + std::to_string(n);
                line += " classifier_votes=" + v;
            }
            say(log, line);
            return JobOutcome{std::move(r), dir};
        });
    const auto results = run_parallel(jobs, c.workers);
    for (const auto& r : results)
        if (r.record.aborted) return exit_numerical;
    return exit_ok;
}

int cmd_evaluate(const ExperimentConfig& c, std::ostream& log) {
    c.validate("evaluate");
    const fs::path out = c.out;
    write_effective_config(out, c);
    const auto extractor = load_classifier(c.extractor);
    const LabeledImages real = load_dataset(c.dataset, Split::test);
    const EvaluationReport rep = evaluate_runs(find_runs(c.run), *extractor, real, c.is_splits, *c.seed);
    save_metric_report(out / "metrics.txt", rep.records);
    write_metric_records(log, rep.records);
    return exit_ok;
}

int cmd_ablate(const ExperimentConfig& c, std::ostream& log) {
    c.validate("ablate");
    const fs::path out = c.out;
    write_effective_config(out, c);
    const LabeledImages train = load_dataset(c.dataset, Split::train);

    struct Variant {
        std::string name;
        ExperimentConfig config;
        ClassifierPtr classifier;
        ReconstructionPtr reconstruction;
    };
    Variant on{c.axis + "-on", c, nullptr, nullptr}, off{c.axis + "-off", c, nullptr, nullptr};
    ClassifierPtr main = c.ensemble.empty() ? load_classifier(c.classifier) : load_classifier(c.ensemble.front());
    const ReconstructionPtr recon = load_reconstruction(c);
    on.classifier = off.classifier = main;
    on.reconstruction = off.reconstruction = recon;
    if (c.axis == "reconstruction") {
        off.reconstruction = nullptr;
    } else if (c.axis == "blur") {
        on.config.blur_sigma = c.blur_sigma > 0.0 ? c.blur_sigma : 1.0;
        off.config.blur_sigma = 0.0;
    } else if (c.axis == "progressive") {
        const long total = on.config.sampler_config(0).total_steps();
        const int final_res = on.config.sampler_config(0).stages.back().resolution;
        off.config.explicit_stages = {Stage{final_res, static_cast<int>(total)}};
    } else if (c.axis == "div-loss") {
        on.config.w_div = c.w_div > 0.0 ? c.w_div : 0.1;
        off.config.w_div = 0.0;
    } else if (c.axis == "dist-loss") {
        on.config.w_dist = c.w_dist > 0.0 ? c.w_dist : 0.1;
        off.config.w_dist = 0.0;
    } else if (c.axis == "ensemble") {
        on.classifier = load_generation_classifier(c);
    }

    const ClassifierPtr judge = c.extractor.empty() ? main : load_classifier(c.extractor);
    std::map<int, ClassStatistics> eval_stats;
    std::map<std::pair<int, int>, ClassStatistics> gen_stats;
    Variant* variants[2] = {&on, &off};
    for (int k : c.classes) {
        check_class(k, *main);
        eval_stats.emplace(k, estimate_class_statistics(train, k, *judge, recon.get(), stats_options(c)));
        for (int v = 0; v < 2; ++v)
            if (variants[v]->config.w_dist > 0.0)
                gen_stats.emplace(std::make_pair(v, k),
                                  estimate_class_statistics(train, k, *variants[v]->classifier,
                                                            variants[v]->reconstruction.get(), stats_options(c)));
    }

    struct Row {
        int k = 0;
        int v = 0;
        RunRecord record;
        BatchSummary summary;
    };
    std::vector<std::function<Row()>> jobs;
    for (int k : c.classes)
        for (int v = 0; v < 2; ++v)
            jobs.push_back([&, k, v] {
                const Variant& var = *variants[v];
                const SamplerConfig sc = var.config.sampler_config(k);
                const auto it = gen_stats.find({v, k});
                const SamplerModels m{var.classifier, var.reconstruction, it == gen_stats.end() ? nullptr : &it->second};
                const fs::path dir = out / var.name / class_dir(k);
                const nlohmann::json meta = {{"command", "ablate"}, {"axis", c.axis}, {"variant", var.name}};
                Row r{k, v, execute_run(sc, m, dir, false, meta), {}};
                r.summary = summarize_batch(r.record.final_images, k, *judge, recon.get(), eval_stats.at(k),
                                            c.mask_ratio, *c.seed);
                say(log, run_line(var.name + " class=" + std::to_string(k), r.record, dir, r.summary.hit_rate));
                return r;
            });
    const auto rows = run_parallel(jobs, c.workers);

    std::ofstream os(out / "ablation.tsv");
    os << "class\tvariant\thit_rate\tdistribution_loss\tmean_distance\tdiversity\tfinal_total\ttrend_decreasing\n";
    bool aborted = false;
    std::map<int, double> dist[2];
    double mean_dist[2] = {0, 0}, div[2] = {0, 0};
    for (const auto& r : rows) {
        aborted |= r.record.aborted;
        os << r.k << '\t' << variants[r.v]->name << '\t' << r.summary.hit_rate << '\t' << r.summary.distribution_loss
           << '\t' << r.summary.mean_distance << '\t' << r.summary.diversity << '\t'
           << (r.record.log.empty() ? 0.0 : r.record.log.back().loss.total) << '\t'
           << (loss_trend_decreasing(r.record.log) ? "true" : "false") << '\n';
        dist[r.v][r.k] = r.summary.distribution_loss;
        mean_dist[r.v] += r.summary.mean_distance;
        div[r.v] += r.summary.diversity;
    }
    int halved = 0;
    for (int k : c.classes) halved += dist[0][k] <= 0.5 * dist[1][k];
    const double n = static_cast<double>(c.classes.size());
    say(log, "axis=" + c.axis + " classes=" + std::to_string(c.classes.size()) +
                 " dist_halved=" + std::to_string(halved) + " mean_distance_on=" + num(mean_dist[0] / n) +
                 " mean_distance_off=" + num(mean_dist[1] / n) + " diversity_on=" + num(div[0] / n) +
                 " diversity_off=" + num(div[1] / n));

    for (int k : c.classes) {
        const Tensor* a = nullptr;
        const Tensor* b = nullptr;
        for (const auto& r : rows)
            if (r.k == k) (r.v == 0 ? a : b) = &r.record.final_images;
        if (a->dim(2) != b->dim(2)) continue;
        Tensor both({a->dim(0) + b->dim(0), a->dim(1), a->dim(2), a->dim(3)});
        std::copy(a->data(), a->data() + a->size(), both.data());
        std::copy(b->data(), b->data() + b->size(), both.data() + a->size());
        write_contact_sheet(out / (class_dir(k) + "_side_by_side.png"), both, a->dim(0));
    }
    return aborted ? exit_numerical : exit_ok;
}

}  // namespace cag
