#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cag/tensor.hpp"

namespace cag {

struct GaussianSummary {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    long count = 0;

    Index dim() const { return mean.size(); }
    void validate() const;
};

// Sample mean and unbiased covariance; N >= 2.
GaussianSummary gaussian_summary(const RowMatrix& features);

struct FrechetResult {
    double value = 0.0;
    int clipped_eigenvalues = 0;  // eigenvalues below -1e-8 that were clipped to 0
    std::vector<std::string> warnings;
};

// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the trace of the
// root taken as tr((A S_b A)^{1/2}), A = S_a^{1/2}.
FrechetResult frechet(const GaussianSummary& a, const GaussianSummary& b);
double frechet_distance(const GaussianSummary& a, const GaussianSummary& b);

struct InceptionScore {
    double mean = 0.0;
    double std = 0.0;  // population std over splits
};
// Rows of `probabilities` are softmax outputs; contiguous splits.
InceptionScore inception_score(const RowMatrix& probabilities, int splits = 10);
RowMatrix softmax_rows(const RowMatrix& logits);

struct DiversityResult {
    double score = 0.0;  // mean cosine over unordered pairs of nonzero rows
    long pairs = 0;
    long excluded = 0;   // zero-norm rows
};
DiversityResult diversity(const RowMatrix& features);
double diversity_score(const RowMatrix& features);

struct MetricRecord {
    std::string name;
    double value = 0.0;
    double spread = 0.0;  // std over splits where applicable
    long samples = 0;
    long reference_samples = 0;
    std::string extractor;
    std::string note;
};

// One "key=value" line per record, tab separated.
void write_metric_records(std::ostream& os, const std::vector<MetricRecord>& records);
std::vector<MetricRecord> read_metric_records(std::istream& is);
void save_metric_report(const std::filesystem::path& path, const std::vector<MetricRecord>& records);

}  // namespace cag
