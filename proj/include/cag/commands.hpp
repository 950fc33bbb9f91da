#pragma once

// Experiment orchestration behind the command-line tool. Every command takes
// an already-merged ExperimentConfig, writes under config.out and returns a
// process exit status.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cag/config.hpp"
#include "cag/losses.hpp"
#include "cag/metrics.hpp"
#include "cag/run_record.hpp"
#include "cag/sampler.hpp"

namespace cag {

enum ExitCode : int { exit_ok = 0, exit_config = 2, exit_numerical = 3 };

// "class_<k>.stats" inside `dir`.
std::filesystem::path stats_file(const std::filesystem::path& dir, int class_id);

// The single classifier, or the loss-level ensemble when `ensemble` is set.
ClassifierPtr load_generation_classifier(const ExperimentConfig& config);
// Null when reconstruction = none.
ReconstructionPtr load_reconstruction(const ExperimentConfig& config);

// Runs one progressive generation, persisting partial records at every
// checkpoint and the final record at the end. With `resume`, an unfinished
// record already in `dir` is continued from its checkpoint.
RunRecord execute_run(const SamplerConfig& config, const SamplerModels& models, const std::filesystem::path& dir,
                      bool resume = false, const nlohmann::json& meta = nlohmann::json::object());

// Final run directories below `dir`: `dir` itself when it holds a record,
// otherwise its immediate sub-directories that do, sorted by name.
std::vector<std::filesystem::path> find_runs(const std::filesystem::path& dir);

struct EvaluationReport {
    std::vector<MetricRecord> records;
    double fid = 0.0;
    double fid_real_split = 0.0;  // real half A vs real half B
    double fid_noise = 0.0;       // N(0.5, 0.2) noise vs real
    InceptionScore inception;
    double diversity = 0.0;  // mean over runs
    double accuracy = 0.0;   // extractor argmax == target
};
EvaluationReport evaluate_runs(const std::vector<std::filesystem::path>& runs, const GeneralizedClassifier& extractor,
                               const LabeledImages& real, int is_splits, std::uint64_t seed);

// Calls every job, at most `workers` at a time; results keep job order. The
// first failing job's exception is rethrown after all workers finish.
template <class T>
std::vector<T> run_parallel(const std::vector<std::function<T()>>& jobs, int workers);

void write_effective_config(const std::filesystem::path& dir, const ExperimentConfig& config);

int cmd_zoo_train(const ExperimentConfig& config, std::ostream& log);
int cmd_stats(const ExperimentConfig& config, std::ostream& log);
int cmd_generate(const ExperimentConfig& config, std::ostream& log, bool resume = false);
int cmd_t2i(const ExperimentConfig& config, std::ostream& log);
int cmd_evaluate(const ExperimentConfig& config, std::ostream& log);
int cmd_ablate(const ExperimentConfig& config, std::ostream& log);

template <class T>
std::vector<T> run_parallel(const std::vector<std::function<T()>>& jobs, int workers) {
    std::vector<std::optional<T>> slots(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                slots[i].emplace(jobs[i]());
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), jobs.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<T> out;
    out.reserve(slots.size());
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

}  // namespace cag
