#pragma once

// On-disk layout of a run directory:
//   config.txt            sampler snapshot, "# cag-run v1"
//   log.tsv               one line per step
//   initial.raw           init batch
//   stage_<k>.raw/.png    end-of-stage images (png is a contact sheet)
//   final.raw, final_<i>.png, contact_sheet.png
//   checkpoint/           images.raw, adam_m.raw, adam_v.raw, state.txt
//   status.txt            "complete", "running" or "aborted <reason>"
//   meta.json             wall clock and free-form metadata, not replayed

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "cag/sampler.hpp"

namespace cag {

inline constexpr const char* kRunTag = "cag-run v1";

void write_log(std::ostream& os, const std::vector<LogEntry>& log);
std::vector<LogEntry> read_log(std::istream& is);

void save_checkpoint(const std::filesystem::path& dir, const SamplerState& state);
SamplerState load_checkpoint(const std::filesystem::path& dir);

void save_run_record(const std::filesystem::path& dir, const RunRecord& record,
                     const nlohmann::json& meta = nlohmann::json::object());
RunRecord load_run_record(const std::filesystem::path& dir);

// Everything except wall-clock metadata.
bool same_trajectory(const RunRecord& a, const RunRecord& b);

}  // namespace cag
