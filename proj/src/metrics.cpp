#include "cag/metrics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>

namespace cag {

namespace {

constexpr double kPsdTolerance = 1e-8;

// Symmetric square root with eigenvalue clipping; counts clipped eigenvalues.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m, int& clipped) {
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    for (Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -kPsdTolerance) ++clipped;
        ev[i] = std::sqrt(std::max(ev[i], 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace

void GaussianSummary::validate() const {
    if (covariance.rows() != mean.size() || covariance.cols() != mean.size())
        throw std::invalid_argument("gaussian summary: covariance must be d x d");
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-10)
        throw std::invalid_argument("gaussian summary: covariance is not symmetric");
}

GaussianSummary gaussian_summary(const RowMatrix& features) {
    const Index n = features.rows();
    if (n < 2) throw std::invalid_argument("gaussian_summary needs N >= 2, got " + std::to_string(n));
    GaussianSummary s;
    s.count = static_cast<long>(n);
    s.mean = features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
    s.covariance = centered.transpose() * centered / static_cast<double>(n - 1);
    s.covariance = 0.5 * (s.covariance + s.covariance.transpose());
    return s;
}

FrechetResult frechet(const GaussianSummary& a, const GaussianSummary& b) {
    if (a.dim() != b.dim())
        throw std::invalid_argument("frechet_distance: dimensions " + std::to_string(a.dim()) + " and " +
                                    std::to_string(b.dim()) + " differ");
    FrechetResult r;
    int clipped = 0;
    const Eigen::MatrixXd root_a = sqrt_psd(a.covariance, clipped);
    const Eigen::MatrixXd inner = root_a * b.covariance * root_a;
    const Eigen::MatrixXd sym = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw std::runtime_error("frechet_distance: eigendecomposition failed");
    double tr_root = 0.0;
    for (Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double ev = es.eigenvalues()[i];
        if (ev < -kPsdTolerance) ++clipped;
        tr_root += std::sqrt(std::max(ev, 0.0));
    }
    r.clipped_eigenvalues = clipped;
    if (clipped)
        r.warnings.push_back("clipped " + std::to_string(clipped) + " negative eigenvalue(s) below -1e-8 in the matrix square root");
    r.value = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_root;
    return r;
}

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) { return frechet(a, b).value; }

RowMatrix softmax_rows(const RowMatrix& logits) {
    RowMatrix p(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

InceptionScore inception_score(const RowMatrix& probabilities, int splits) {
    const Index N = probabilities.rows(), K = probabilities.cols();
    if (splits < 1) throw std::invalid_argument("inception_score: splits must be >= 1");
    if (N < splits) throw std::invalid_argument("inception_score: N=" + std::to_string(N) + " < splits=" + std::to_string(splits));
    for (Index i = 0; i < N; ++i) {
        if ((probabilities.row(i).array() < 0.0).any() || !probabilities.row(i).allFinite())
            throw std::invalid_argument("inception_score: row " + std::to_string(i) + " has a negative or non-finite entry");
        if (std::abs(probabilities.row(i).sum() - 1.0) > 1e-6)
            throw std::invalid_argument("inception_score: row " + std::to_string(i) + " does not sum to 1");
    }
    std::vector<double> scores;
    for (int s = 0; s < splits; ++s) {
        const Index begin = s * N / splits, end = (s + 1) * N / splits;
        const Eigen::RowVectorXd marginal = probabilities.middleRows(begin, end - begin).colwise().mean();
        double kl = 0.0;
        for (Index i = begin; i < end; ++i)
            for (Index k = 0; k < K; ++k) {
                const double p = probabilities(i, k);
                if (p > 0.0) kl += p * (std::log(p) - std::log(marginal[k]));
            }
        scores.push_back(std::exp(kl / static_cast<double>(end - begin)));
    }
    InceptionScore r;
    for (double v : scores) r.mean += v;
    r.mean /= static_cast<double>(scores.size());
    for (double v : scores) r.std += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(r.std / static_cast<double>(scores.size()));
    return r;
}

DiversityResult diversity(const RowMatrix& features) {
    if (features.rows() < 2) throw std::invalid_argument("diversity_score needs N >= 2");
    std::vector<Eigen::VectorXd> rows;
    DiversityResult r;
    for (Index i = 0; i < features.rows(); ++i) {
        const double n = features.row(i).norm();
        if (n == 0.0) {
            ++r.excluded;
            continue;
        }
        rows.push_back(features.row(i).transpose() / n);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            total += rows[i].dot(rows[j]);
            ++r.pairs;
        }
    r.score = r.pairs ? total / static_cast<double>(r.pairs) : 0.0;
    return r;
}

double diversity_score(const RowMatrix& features) { return diversity(features).score; }

void write_metric_records(std::ostream& os, const std::vector<MetricRecord>& records) {
    for (const auto& r : records) {
        os << "metric=" << r.name << "\tvalue=" << format_double(r.value) << "\tspread=" << format_double(r.spread)
           << "\tsamples=" << r.samples << "\treference_samples=" << r.reference_samples << "\textractor=" << r.extractor;
        if (!r.note.empty()) os << "\tnote=" << r.note;
        os << '\n';
    }
}

std::vector<MetricRecord> read_metric_records(std::istream& is) {
    std::vector<MetricRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        MetricRecord r;
        std::istringstream ls(line);
        std::string field;
        while (std::getline(ls, field, '\t')) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) throw std::runtime_error("metric record field without '=': " + field);
            const std::string k = field.substr(0, eq), v = field.substr(eq + 1);
            if (k == "metric") r.name = v;
            else if (k == "value") r.value = std::stod(v);
            else if (k == "spread") r.spread = std::stod(v);
            else if (k == "samples") r.samples = std::stol(v);
            else if (k == "reference_samples") r.reference_samples = std::stol(v);
            else if (k == "extractor") r.extractor = v;
            else if (k == "note") r.note = v;
            else throw std::runtime_error("unknown metric record key '" + k + "'");
        }
        out.push_back(r);
    }
    return out;
}

void save_metric_report(const std::filesystem::path& path, const std::vector<MetricRecord>& records) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    write_metric_records(os, records);
}

}  // namespace cag
