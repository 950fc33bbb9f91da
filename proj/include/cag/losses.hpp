#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "cag/dataset.hpp"
#include "cag/masking.hpp"
#include "cag/model_interface.hpp"

namespace cag {

// Feature mean and elementwise variance of one class of real data, measured
// through the same h(g(x)) pipeline used during generation.
struct ClassStatistics {
    int class_id = 0;
    Eigen::VectorXd mu;
    Eigen::VectorXd var;
    long count = 0;

    Index dim() const { return mu.size(); }
    void validate() const;
};

struct LossWeights {
    double cls = 1.0;
    double div = 0.1;
    double dist = 0.1;

    void validate() const;
};

enum class DiversityMode { raw, cosine };

// Plain-value forms of each term.
double classification_loss(std::span<const double> logits, int target);
double distance_metric_loss(const RowMatrix& features, DiversityMode mode = DiversityMode::raw);

struct FeatureMoments {
    Eigen::VectorXd mean;
    Eigen::VectorXd var;  // unbiased, divisor N-1
};
FeatureMoments batch_statistics(const RowMatrix& features);

double distribution_loss(const Eigen::VectorXd& gen_mean, const Eigen::VectorXd& gen_var, const ClassStatistics& stats);

// Features of g(x) (or x when recon is null) under the given masks.
ModelOutput generation_forward(ad::Graph& g, ad::Var images, const GeneralizedClassifier& model,
                               const ReconstructionModule* recon, const std::vector<MaskPattern>& masks,
                               double fill_value = 0.0);

struct StatisticsOptions {
    double mask_ratio = 0.75;
    std::uint64_t seed = 0;
    int masks_per_image = 1;
    double fill_value = 0.0;
};

ClassStatistics estimate_class_statistics(const LabeledImages& dataset, int class_id,
                                          const GeneralizedClassifier& model, const ReconstructionModule* recon,
                                          const StatisticsOptions& options);

struct LossBreakdown {
    double cls = 0.0;
    double div = 0.0;
    double dist = 0.0;
    double total = 0.0;
};

struct CompositeTerms {
    ad::Var total;
    ad::Var cls;
    ad::Var div;
    ad::Var dist;  // invalid when no statistics were supplied
    ModelOutput output;

    LossBreakdown breakdown(const ad::Graph& g) const;
};

struct CompositeOptions {
    LossWeights weights;
    DiversityMode diversity = DiversityMode::raw;
    double fill_value = 0.0;
};

// w_cls * mean_i L_cls + w_div * L_div + w_dist * L_distribution, with the
// features z_i = h(g(x_i)) computed once and shared by every term.
CompositeTerms composite_loss(ad::Graph& g, ad::Var images, int target, const GeneralizedClassifier& model,
                              const ReconstructionModule* recon, const std::vector<MaskPattern>& masks,
                              const ClassStatistics* stats, const CompositeOptions& options);

LossBreakdown composite_loss_value(const Tensor& images, int target, const GeneralizedClassifier& model,
                                   const ReconstructionModule* recon, const std::vector<MaskPattern>& masks,
                                   const ClassStatistics* stats, const CompositeOptions& options);

// Version-tagged text record; decimal values round-trip bit-exactly.
void write_class_statistics(std::ostream& os, const ClassStatistics& stats);
ClassStatistics read_class_statistics(std::istream& is);
void save_class_statistics(const std::filesystem::path& path, const ClassStatistics& stats);
ClassStatistics load_class_statistics(const std::filesystem::path& path);

}  // namespace cag
