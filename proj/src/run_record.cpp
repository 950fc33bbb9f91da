#include "cag/run_record.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "cag/config.hpp"
#include "cag/image.hpp"

namespace cag {

namespace fs = std::filesystem;

namespace {

const char* kLogHeader = "step\tstage\tresolution\tcls\tdiv\tdist\ttotal\tgrad_norm\thit_rate\tmask_stamp";

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

template <class T>
T parse(const std::string& s, const std::string& what) {
    T v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw std::runtime_error("run record: bad " + what + " '" + s + "'");
    return v;
}

void write_if_nonempty(const fs::path& path, const Tensor& t) {
    if (!t.empty()) write_raw(path, t);
}

Tensor read_if_exists(const fs::path& path) { return fs::exists(path) ? read_raw(path) : Tensor(); }

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    return is;
}

}  // namespace

void write_log(std::ostream& os, const std::vector<LogEntry>& log) {
    os << kLogHeader << '\n';
    for (const auto& e : log)
        os << e.step << '\t' << e.stage << '\t' << e.resolution << '\t' << fmt(e.loss.cls) << '\t' << fmt(e.loss.div)
           << '\t' << fmt(e.loss.dist) << '\t' << fmt(e.loss.total) << '\t' << fmt(e.grad_norm) << '\t'
           << fmt(e.hit_rate) << '\t' << e.mask_stamp << '\n';
}

std::vector<LogEntry> read_log(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kLogHeader) throw std::runtime_error("run record: bad log header");
    std::vector<LogEntry> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string item;
        while (std::getline(ss, item, '\t')) f.push_back(item);
        if (f.size() != 10) throw std::runtime_error("run record: log line has " + std::to_string(f.size()) + " fields");
        LogEntry e;
        e.step = parse<long>(f[0], "step");
        e.stage = parse<int>(f[1], "stage");
        e.resolution = parse<int>(f[2], "resolution");
        e.loss.cls = parse<double>(f[3], "cls");
        e.loss.div = parse<double>(f[4], "div");
        e.loss.dist = parse<double>(f[5], "dist");
        e.loss.total = parse<double>(f[6], "total");
        e.grad_norm = parse<double>(f[7], "grad_norm");
        e.hit_rate = parse<double>(f[8], "hit_rate");
        e.mask_stamp = parse<std::uint64_t>(f[9], "mask_stamp");
        out.push_back(e);
    }
    return out;
}

void save_checkpoint(const fs::path& dir, const SamplerState& state) {
    fs::create_directories(dir);
    write_if_nonempty(dir / "images.raw", state.images);
    write_if_nonempty(dir / "adam_m.raw", state.adam_m);
    write_if_nonempty(dir / "adam_v.raw", state.adam_v);
    auto os = open_out(dir / "state.txt");
    write_key_values(os,
                     {{"adam_t", std::to_string(state.adam_t)},
                      {"step", std::to_string(state.step)},
                      {"stage", std::to_string(state.stage)},
                      {"stage_step", std::to_string(state.stage_step)}},
                     kRunTag);
}

SamplerState load_checkpoint(const fs::path& dir) {
    SamplerState s;
    s.images = read_if_exists(dir / "images.raw");
    s.adam_m = read_if_exists(dir / "adam_m.raw");
    s.adam_v = read_if_exists(dir / "adam_v.raw");
    auto is = open_in(dir / "state.txt");
    const KeyValues kv = parse_key_values(is, (dir / "state.txt").string());
    auto get = [&](const char* k) {
        const auto it = kv.find(k);
        if (it == kv.end()) throw std::runtime_error("checkpoint state missing '" + std::string(k) + "'");
        return parse<long>(it->second, k);
    };
    s.adam_t = get("adam_t");
    s.step = get("step");
    s.stage = static_cast<int>(get("stage"));
    s.stage_step = static_cast<int>(get("stage_step"));
    return s;
}

void save_run_record(const fs::path& dir, const RunRecord& record, const nlohmann::json& meta) {
    fs::create_directories(dir);
    {
        auto os = open_out(dir / "config.txt");
        write_key_values(os, sampler_to_key_values(record.config), kRunTag);
    }
    {
        auto os = open_out(dir / "log.tsv");
        write_log(os, record.log);
    }
    write_if_nonempty(dir / "initial.raw", record.initial);
    for (std::size_t k = 0; k < record.stage_images.size(); ++k) {
        const std::string base = "stage_" + std::to_string(k);
        write_raw(dir / (base + ".raw"), record.stage_images[k]);
        write_contact_sheet(dir / (base + ".png"), record.stage_images[k]);
    }
    if (!record.final_images.empty()) {
        write_raw(dir / "final.raw", record.final_images);
        const Tensor& f = record.final_images;
        const Index n = f.dim(0), per = f.size() / n;
        for (Index i = 0; i < n; ++i) {
            Tensor one({f.dim(1), f.dim(2), f.dim(3)});
            std::copy(f.data() + i * per, f.data() + (i + 1) * per, one.data());
            char name[32];
            std::snprintf(name, sizeof name, "final_%02td.png", i);
            write_png(dir / name, one);
        }
        write_contact_sheet(dir / "contact_sheet.png", f);
    }
    save_checkpoint(dir / "checkpoint", record.checkpoint);
    {
        auto os = open_out(dir / "status.txt");
        os << (record.aborted ? "aborted " + record.failure : std::string(record.finished ? "complete" : "running")) << '\n';
    }
    nlohmann::json m = meta;
    m["wall_seconds"] = record.wall_seconds;
    m["stages_completed"] = record.stage_images.size();
    m["steps_logged"] = record.log.size();
    auto os = open_out(dir / "meta.json");
    os << m.dump(2) << '\n';
}

RunRecord load_run_record(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("run directory not found: " + dir.string());
    RunRecord r;
    {
        auto is = open_in(dir / "config.txt");
        std::string tag;
        std::getline(is, tag);
        if (tag != std::string("# ") + kRunTag)
            throw std::runtime_error("run record: unsupported config tag '" + tag + "'");
        r.config = sampler_from_key_values(parse_key_values(is, (dir / "config.txt").string()));
    }
    {
        auto is = open_in(dir / "log.tsv");
        r.log = read_log(is);
    }
    r.initial = read_if_exists(dir / "initial.raw");
    for (std::size_t k = 0;; ++k) {
        const fs::path p = dir / ("stage_" + std::to_string(k) + ".raw");
        if (!fs::exists(p)) break;
        r.stage_images.push_back(read_raw(p));
    }
    r.final_images = read_if_exists(dir / "final.raw");
    r.checkpoint = load_checkpoint(dir / "checkpoint");
    {
        auto is = open_in(dir / "status.txt");
        std::string status;
        std::getline(is, status);
        if (status.rfind("aborted", 0) == 0) {
            r.aborted = true;
            r.failure = status.size() > 8 ? status.substr(8) : "";
        } else if (status == "complete") {
            r.finished = true;
        } else if (status != "running") {
            throw std::runtime_error("run record: bad status '" + status + "'");
        }
    }
    if (fs::exists(dir / "meta.json")) {
        auto is = open_in(dir / "meta.json");
        const auto m = nlohmann::json::parse(is);
        r.wall_seconds = m.value("wall_seconds", 0.0);
    }
    return r;
}

bool same_trajectory(const RunRecord& a, const RunRecord& b) {
    return sampler_to_key_values(a.config) == sampler_to_key_values(b.config) && a.initial == b.initial &&
           a.log == b.log && a.stage_images == b.stage_images && a.final_images == b.final_images &&
           a.checkpoint == b.checkpoint && a.aborted == b.aborted && a.finished == b.finished && a.failure == b.failure;
}

}  // namespace cag
