#include "cag/losses.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "cag/ops.hpp"

namespace cag {

void ClassStatistics::validate() const {
    if (mu.size() != var.size()) throw std::invalid_argument("class statistics: mu and var dimensions differ");
    if (count < 2) throw std::invalid_argument("class statistics: count must be >= 2");
    for (Index i = 0; i < var.size(); ++i)
        if (!(var[i] >= 0.0)) throw std::invalid_argument("class statistics: negative or NaN variance");
}

void LossWeights::validate() const {
    if (!(cls >= 0.0 && div >= 0.0 && dist >= 0.0)) throw std::invalid_argument("loss weights must be nonnegative");
    if (cls == 0.0 && div == 0.0 && dist == 0.0) throw std::invalid_argument("at least one loss weight must be > 0");
}

double classification_loss(std::span<const double> logits, int target) {
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
        throw std::out_of_range("target " + std::to_string(target) + " outside [0," + std::to_string(logits.size()) + ")");
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double se = 0.0;
    for (double v : logits) se += std::exp(v - mx);
    return mx + std::log(se) - logits[static_cast<std::size_t>(target)];
}

double distance_metric_loss(const RowMatrix& features, DiversityMode mode) {
    RowMatrix z = features;
    if (mode == DiversityMode::cosine)
        for (Index i = 0; i < z.rows(); ++i) z.row(i) /= std::sqrt(z.row(i).squaredNorm() + 1e-12);
    const Eigen::RowVectorXd s = z.colwise().sum();
    return s.squaredNorm() - z.rowwise().squaredNorm().sum();
}

FeatureMoments batch_statistics(const RowMatrix& features) {
    const Index n = features.rows();
    if (n < 2) throw std::invalid_argument("batch_statistics needs N >= 2, got " + std::to_string(n));
    FeatureMoments m;
    m.mean = features.colwise().mean().transpose();
    m.var = (features.rowwise() - m.mean.transpose()).array().square().colwise().sum().transpose() /
            static_cast<double>(n - 1);
    return m;
}

double distribution_loss(const Eigen::VectorXd& gen_mean, const Eigen::VectorXd& gen_var, const ClassStatistics& stats) {
    if (gen_mean.size() != stats.dim() || gen_var.size() != stats.dim())
        throw std::invalid_argument("distribution_loss: dimension " + std::to_string(gen_mean.size()) +
                                    " does not match statistics dimension " + std::to_string(stats.dim()));
    return (gen_mean - stats.mu).squaredNorm() + (gen_var - stats.var).squaredNorm();
}

ModelOutput generation_forward(ad::Graph& g, ad::Var images, const GeneralizedClassifier& model,
                               const ReconstructionModule* recon, const std::vector<MaskPattern>& masks,
                               double fill_value) {
    if (!recon) return forward_adapted(model, g, images);
    const Index r = recon->input_resolution();
    const ad::Var at_recon = ad::resize_bilinear(g, images, r, r);
    return forward_adapted(model, g, masked_reconstruct(g, *recon, at_recon, masks, fill_value));
}

ClassStatistics estimate_class_statistics(const LabeledImages& dataset, int class_id,
                                          const GeneralizedClassifier& model, const ReconstructionModule* recon,
                                          const StatisticsOptions& options) {
    const std::vector<Index> idx = dataset.indices_of(class_id);
    if (idx.empty()) throw std::invalid_argument("class " + std::to_string(class_id) + " has no images");
    if (options.masks_per_image < 1) throw std::invalid_argument("masks_per_image must be >= 1");
    const Index masks = options.masks_per_image;
    const Index rows = static_cast<Index>(idx.size()) * masks;
    if (rows < 2) throw std::invalid_argument("class " + std::to_string(class_id) + " yields fewer than 2 feature rows");

    const int grid = recon ? recon->input_resolution() / recon->patch_size() : 1;
    RowMatrix features(rows, model.feature_dim());
    constexpr Index chunk_images = 32;
    for (Index start = 0; start < static_cast<Index>(idx.size()); start += chunk_images) {
        const Index len = std::min<Index>(chunk_images, static_cast<Index>(idx.size()) - start);
        std::vector<Index> rep;
        std::vector<MaskPattern> patterns;
        for (Index j = start; j < start + len; ++j)
            for (Index m = 0; m < masks; ++m) {
                rep.push_back(idx[static_cast<std::size_t>(j)]);
                if (recon) {
                    Rng rng = make_stream(options.seed, StreamDomain::stats_mask, static_cast<std::uint64_t>(j),
                                          static_cast<std::uint64_t>(m));
                    patterns.push_back(sample_mask(grid, grid, options.mask_ratio, rng, recon->patch_size()));
                }
            }
        ad::Graph g;
        const ModelOutput out =
            generation_forward(g, g.constant(gather_rows(dataset.images, rep)), model, recon, patterns, options.fill_value);
        features.middleRows(start * masks, len * masks) = g.value(out.features).matrix(len * masks, model.feature_dim());
    }
    const FeatureMoments mom = batch_statistics(features);
    return ClassStatistics{class_id, mom.mean, mom.var, static_cast<long>(rows)};
}

LossBreakdown CompositeTerms::breakdown(const ad::Graph& g) const {
    LossBreakdown b;
    b.cls = g.value(cls)[0];
    b.div = g.value(div)[0];
    b.dist = dist.valid() ? g.value(dist)[0] : 0.0;
    b.total = g.value(total)[0];
    return b;
}

CompositeTerms composite_loss(ad::Graph& g, ad::Var images, int target, const GeneralizedClassifier& model,
                              const ReconstructionModule* recon, const std::vector<MaskPattern>& masks,
                              const ClassStatistics* stats, const CompositeOptions& options) {
    const LossWeights& w = options.weights;
    w.validate();
    if (w.dist > 0.0 && !stats) throw std::invalid_argument("distribution loss weight > 0 but no class statistics given");
    if (stats && stats->dim() != model.feature_dim())
        throw std::invalid_argument("class statistics dimension " + std::to_string(stats->dim()) +
                                    " does not match feature_dim " + std::to_string(model.feature_dim()));

    CompositeTerms t;
    t.output = generation_forward(g, images, model, recon, masks, options.fill_value);
    const ad::Var z = t.output.features;
    t.cls = model.classification_loss(g, t.output, target);
    t.div = ad::pairwise_inner_sum(g, options.diversity == DiversityMode::cosine ? ad::l2_normalize_rows(g, z) : z);
    const Index n = g.shape(z)[0];
    if (stats && (n >= 2 || w.dist > 0.0)) {
        Tensor mu({stats->dim()}), var({stats->dim()});
        for (Index i = 0; i < stats->dim(); ++i) {
            mu[i] = stats->mu[i];
            var[i] = stats->var[i];
        }
        const ad::Var dm = ad::sum(g, ad::square(g, ad::sub_const(g, ad::column_mean(g, z), mu)));
        const ad::Var dv = ad::sum(g, ad::square(g, ad::sub_const(g, ad::column_variance(g, z), var)));
        t.dist = ad::add(g, dm, dv);
    }

    ad::Var total;
    auto accumulate = [&](ad::Var term, double weight) {
        if (weight == 0.0) return;
        const ad::Var scaled = ad::scale(g, term, weight);
        total = total.valid() ? ad::add(g, total, scaled) : scaled;
    };
    accumulate(t.cls, w.cls);
    accumulate(t.div, w.div);
    if (t.dist.valid()) accumulate(t.dist, w.dist);
    t.total = total;
    return t;
}

LossBreakdown composite_loss_value(const Tensor& images, int target, const GeneralizedClassifier& model,
                                   const ReconstructionModule* recon, const std::vector<MaskPattern>& masks,
                                   const ClassStatistics* stats, const CompositeOptions& options) {
    ad::Graph g;
    return composite_loss(g, g.constant(images), target, model, recon, masks, stats, options).breakdown(g);
}

namespace {

constexpr const char* kStatsTag = "cag-class-stats v1";

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::runtime_error("bad number '" + s + "'");
    return v;
}

void write_vector(std::ostream& os, const char* key, const Eigen::VectorXd& v) {
    os << key;
    for (Index i = 0; i < v.size(); ++i) os << ' ' << format_double(v[i]);
    os << '\n';
}

Eigen::VectorXd read_vector(std::istream& is, const char* key, Index d) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error(std::string("class statistics: missing ") + key);
    std::istringstream ls(line);
    std::string k;
    ls >> k;
    if (k != key) throw std::runtime_error(std::string("class statistics: expected '") + key + "', got '" + k + "'");
    Eigen::VectorXd v(d);
    std::string tok;
    for (Index i = 0; i < d; ++i) {
        if (!(ls >> tok)) throw std::runtime_error(std::string("class statistics: short ") + key + " row");
        v[i] = parse_double(tok);
    }
    if (ls >> tok) throw std::runtime_error(std::string("class statistics: extra values in ") + key + " row");
    return v;
}

long read_int_field(std::istream& is, const char* key) {
    std::string line, k;
    if (!std::getline(is, line)) throw std::runtime_error(std::string("class statistics: missing ") + key);
    std::istringstream ls(line);
    long v = 0;
    if (!(ls >> k >> v) || k != key) throw std::runtime_error(std::string("class statistics: bad ") + key + " line");
    return v;
}

}  // namespace

void write_class_statistics(std::ostream& os, const ClassStatistics& stats) {
    os << kStatsTag << '\n';
    os << "class_id " << stats.class_id << '\n';
    os << "d " << stats.dim() << '\n';
    os << "count " << stats.count << '\n';
    write_vector(os, "mu", stats.mu);
    write_vector(os, "var", stats.var);
}

ClassStatistics read_class_statistics(std::istream& is) {
    std::string tag;
    if (!std::getline(is, tag) || tag != kStatsTag)
        throw std::runtime_error("class statistics: unsupported version tag '" + tag + "'");
    ClassStatistics s;
    s.class_id = static_cast<int>(read_int_field(is, "class_id"));
    const long d = read_int_field(is, "d");
    if (d < 1) throw std::runtime_error("class statistics: dimension must be >= 1");
    s.count = read_int_field(is, "count");
    s.mu = read_vector(is, "mu", d);
    s.var = read_vector(is, "var", d);
    s.validate();
    return s;
}

void save_class_statistics(const std::filesystem::path& path, const ClassStatistics& stats) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_class_statistics(os, stats);
}

ClassStatistics load_class_statistics(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return read_class_statistics(is);
}

}  // namespace cag
