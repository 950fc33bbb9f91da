// cag: classifier-as-generator experiments.
//
//   cag zoo-train --seed 0 --out models
//   cag stats     --seed 0 --config exp.txt --out stats
//   cag generate  --seed 0 --config exp.txt --class 3 --out runs/gen
//   cag t2i       --seed 0 --config exp.txt --prompt "the digit three"
//   cag evaluate  --seed 0 --config exp.txt --set run=runs/gen
//   cag ablate    --seed 0 --config exp.txt --set axis=div-loss
//
// Exit status: 0 success, 2 configuration error, 3 numerical failure (the
// run's last valid checkpoint is kept), 1 anything else. Diagnostics are one
// line on stderr: error kind=<config|numerical|runtime> command=... message="..."

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cag/commands.hpp"

namespace {

struct Flags {
    std::string config_file;
    std::vector<std::string> sets;
    std::vector<std::string> classes, prompts;
    bool fast = false;
    bool resume = false;
    bool list_keys = false;
};

void add_common(CLI::App* sub, Flags& f, std::map<std::string, std::string>& opts) {
    sub->add_option("--config", f.config_file, "flat key = value config file");
    sub->add_option("--set", f.sets, "override any config key: key=value (repeatable)");
    static const std::vector<std::pair<std::string, std::string>> flag_keys = {
        {"--seed", "seed"},
        {"--out", "out"},
        {"--workers", "workers"},
        {"--steps", "steps"},
        {"--stages", "stages"},
        {"--mask-ratio", "mask_ratio"},
        {"--blur-sigma", "blur_sigma"},
        {"--w-div", "w_div"},
        {"--w-dist", "w_dist"},
        {"--classifier", "classifier"},
        {"--reconstruction", "reconstruction"},
        {"--stats", "stats"},
        {"--dual-encoder", "dual_encoder"},
        {"--dataset", "dataset"},
    };
    for (const auto& [flag, key] : flag_keys) sub->add_option(flag, opts[key], "config key " + key);
    sub->add_option("--class", f.classes, "target class (repeatable or comma-separated)");
    sub->add_option("--prompt", f.prompts, "text prompt (repeatable)");
    sub->add_flag("--fast", f.fast, "fast mode: fewer steps with gradient blurring");
    sub->add_flag("--list-keys", f.list_keys, "print every config key and exit");
}

cag::ExperimentConfig merge(const Flags& f, const std::map<std::string, std::string>& opts, CLI::App* sub) {
    cag::ExperimentConfig c;
    if (!f.config_file.empty()) c.apply(cag::read_key_values(f.config_file));
    for (const auto& [key, value] : opts) {
        if (value.empty()) continue;
        if (key == "stages" && value.find(':') == std::string::npos)
            c.set("stage_resolutions", value);
        else
            c.set(key, value);
    }
    if (!f.classes.empty()) {
        std::string joined;
        for (const auto& s : f.classes) joined += (joined.empty() ? "" : ",") + s;
        c.set("classes", joined);
    }
    if (!f.prompts.empty()) {
        for (const auto& p : f.prompts)
            if (p.find('|') != std::string::npos) throw cag::ConfigError("prompts may not contain '|'");
        c.prompts = f.prompts;
    }
    if (sub->count("--fast")) c.fast = true;
    for (const auto& s : f.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw cag::ConfigError("--set expects key=value, got '" + s + "'");
        c.set(s.substr(0, eq), s.substr(eq + 1));
    }
    return c;
}

std::string one_line(std::string s) {
    for (char& ch : s)
        if (ch == '\n' || ch == '\r') ch = ' ';
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Generate images by optimizing classifier inputs through a masked reconstruction module"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* help;
        CLI::App* app = nullptr;
        Flags flags;
        std::map<std::string, std::string> opts;
    };
    std::vector<Sub> subs;
    subs.push_back({"zoo-train", "train the desk-scale classifier, masked autoencoder and dual encoder", nullptr, {}, {}});
    subs.push_back({"stats", "estimate per-class feature statistics from real data", nullptr, {}, {}});
    subs.push_back({"generate", "class-conditional generation", nullptr, {}, {}});
    subs.push_back({"t2i", "prompt-conditional generation through a dual encoder", nullptr, {}, {}});
    subs.push_back({"evaluate", "FID / inception score / diversity of a run directory", nullptr, {}, {}});
    subs.push_back({"ablate", "paired runs toggling one axis", nullptr, {}, {}});
    for (auto& s : subs) {
        s.app = app.add_subcommand(s.name, s.help);
        add_common(s.app, s.flags, s.opts);
        if (std::string(s.name) == "generate")
            s.app->add_flag("--resume", s.flags.resume, "continue unfinished runs in --out from their checkpoints");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error kind=config message=\"" << one_line(e.what()) << "\"\n";
        return cag::exit_config;
    }

    for (auto& s : subs) {
        if (!s.app->parsed()) continue;
        if (s.flags.list_keys) {
            for (const auto& [k, doc] : cag::config_keys()) std::cout << k << "\t" << doc << "\n";
            return cag::exit_ok;
        }
        const std::string name = s.name;
        try {
            const cag::ExperimentConfig c = merge(s.flags, s.opts, s.app);
            if (name == "zoo-train") return cag::cmd_zoo_train(c, std::cout);
            if (name == "stats") return cag::cmd_stats(c, std::cout);
            if (name == "generate") return cag::cmd_generate(c, std::cout, s.flags.resume);
            if (name == "t2i") return cag::cmd_t2i(c, std::cout);
            if (name == "evaluate") return cag::cmd_evaluate(c, std::cout);
            if (name == "ablate") return cag::cmd_ablate(c, std::cout);
        } catch (const cag::ConfigError& e) {
            std::cerr << "error kind=config command=" << name << " message=\"" << one_line(e.what()) << "\"\n";
            return cag::exit_config;
        } catch (const std::invalid_argument& e) {
            std::cerr << "error kind=config command=" << name << " message=\"" << one_line(e.what()) << "\"\n";
            return cag::exit_config;
        } catch (const cag::NonFiniteError& e) {
            std::cerr << "error kind=numerical command=" << name << " step=" << e.step() << " message=\""
                      << one_line(e.what()) << "\"\n";
            return cag::exit_numerical;
        } catch (const std::exception& e) {
            std::cerr << "error kind=runtime command=" << name << " message=\"" << one_line(e.what()) << "\"\n";
            return 1;
        }
    }
    return 1;
}
