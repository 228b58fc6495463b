// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT

// sfvm: assemble, verify, run and explore filters against syscall traces,
// run the bundled vulnerability scenarios and print the attack surface table.
//
// Exit codes: 0 success, 1 policy or scenario failure (rejected program,
// failed scenario, deadlocked run), 2 usage, input or schema errors.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "sfvm/sfvm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPolicy = 1;
constexpr int kExitUsage = 2;

#ifndef SFVM_DATA_DIR
#define SFVM_DATA_DIR "data"
#endif

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

fs::path data_dir(const std::string& flag) {
    if (!flag.empty()) {
        return flag;
    }
    if (const char* env = std::getenv("SFVM_DATA_DIR"); env && *env) {
        return env;
    }
    return SFVM_DATA_DIR;
}

sfvm::EngineConfig engine_config(const std::string& protection) {
    sfvm::EngineConfig cfg;
    if (const char* env = std::getenv("SFVM_PRIVILEGED_ONLY"); env && std::string(env) == "1") {
        cfg.privileged_only = true;
    }
    auto mode = sfvm::parse_protection_mode(protection);
    if (!mode) {
        throw UsageError("unknown protection mode '" + protection + "' (copy, write_protect, none)");
    }
    cfg.protection = *mode;
    return cfg;
}

sfvm::Engine make_engine(const sfvm::EngineConfig& cfg, const std::string& descriptors) {
    if (descriptors.empty()) {
        return sfvm::Engine(cfg);
    }
    return sfvm::Engine(cfg, sfvm::DescriptorTable::load(descriptors));
}

void write_output(const json& j, const std::string& path) {
    if (path.empty() || path == "-") {
        std::cout << j.dump(2) << "\n";
        return;
    }
    std::ofstream out(path);
    if (!out) {
        throw UsageError("cannot write " + path);
    }
    out << j.dump(2) << "\n";
}

sfvm::BundleRegistry load_filters(const std::vector<std::string>& paths) {
    sfvm::BundleRegistry reg;
    for (const auto& p : paths) {
        auto b = sfvm::load_filter(p);
        std::string name = b.name;
        if (!reg.emplace(name, std::move(b)).second) {
            throw UsageError("two filters are named '" + name + "'");
        }
    }
    return reg;
}

// Installs of unknown filters would only be logged as event errors, and the
// run would go on unfiltered.
void require_filters(const std::vector<sfvm::TraceEvent>& events, const sfvm::BundleRegistry& reg) {
    for (const auto& ev : events) {
        if ((ev.kind == sfvm::EventKind::load || ev.kind == sfvm::EventKind::install) && !ev.filter.empty() &&
            !reg.contains(ev.filter)) {
            throw UsageError("the trace uses filter '" + ev.filter +
                             "' but no --filter provides it (filters are named after the file stem or the json name)");
        }
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw UsageError("cannot open " + path);
    }
    return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------------------

int cmd_asm(const std::string& in, const std::string& out) {
    auto prog = sfvm::assemble(read_file(in));
    auto bytes = sfvm::encode_program(prog);
    std::ofstream f(out, std::ios::binary);
    if (!f) {
        throw UsageError("cannot write " + out);
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    std::cout << "wrote " << bytes.size() << " bytes (" << prog.instructions.size() << " instructions) to " << out
              << "\n";
    return kExitOk;
}

int cmd_disasm(const std::string& in) {
    auto b = sfvm::load_filter(in);
    std::cout << sfvm::disassemble(b.main);
    for (const auto& [name, p] : b.aux) {
        std::cout << "\n; " << name << "\n" << sfvm::disassemble(p);
    }
    return kExitOk;
}

int cmd_verify(const std::string& in, bool as_json) {
    auto b = sfvm::load_filter(in);
    std::vector<sfvm::VerifiedProgram> progs;
    progs.push_back({b.name, &b.main, sfvm::check_program(b.main)});
    for (const auto& [name, p] : b.aux) {
        progs.push_back({name, &p, sfvm::check_program(p)});
    }
    auto j = sfvm::verify_report(progs);
    if (as_json) {
        std::cout << j.dump(2) << "\n";
    } else {
        for (const auto& p : progs) {
            std::cout << p.name << ": " << (p.report.accepted ? "accepted" : "rejected");
            if (!p.report.accepted) {
                std::cout << " at instruction "
                          << (p.report.offending_instruction ? std::to_string(*p.report.offending_instruction) : "?")
                          << ": " << p.report.reason;
            }
            std::cout << " (" << p.program->instructions.size() << " instructions, " << p.report.steps
                      << " verifier steps)\n";
        }
    }
    return j["accepted"].get<bool>() ? kExitOk : kExitPolicy;
}

int cmd_run(const std::string& trace, const std::vector<std::string>& filters, const std::string& schedule,
            const std::string& report, const sfvm::EngineConfig& cfg, const std::string& descriptors) {
    auto reg = load_filters(filters);
    auto events = sfvm::load_trace(trace);
    require_filters(events, reg);
    sfvm::Simulator sim(make_engine(cfg, descriptors), events, reg);
    sim.run(sfvm::Schedule::parse(schedule));
    const auto& log = sim.log();
    write_output(sfvm::run_report(log), report);
    if (!report.empty() && report != "-") {
        auto s = sfvm::run_summary(log);
        std::cout << s["decisions"] << " decisions, " << s["steps_executed"] << " filter steps, " << s["stalls"]
                  << " stalls, " << s["deadlocks"] << " deadlocks\n";
    }
    if (!log.deadlocks.empty()) {
        std::cerr << "deadlock: tasks";
        for (auto t : log.deadlocks.front().cycle) {
            std::cerr << " " << t;
        }
        std::cerr << " wait on each other\n";
        return kExitPolicy;
    }
    return kExitOk;
}

int cmd_explore(const std::string& trace, const std::vector<std::string>& filters, size_t max_steps, bool prune,
                const std::string& report, const sfvm::EngineConfig& cfg, const std::string& descriptors) {
    auto reg = load_filters(filters);
    auto events = sfvm::load_trace(trace);
    require_filters(events, reg);
    sfvm::ExploreOptions opt;
    opt.max_steps = max_steps;
    opt.prune = prune;
    auto res = sfvm::explore_interleavings(sfvm::Simulator(make_engine(cfg, descriptors), events, reg), opt);
    auto j = sfvm::explore_report(res);
    write_output(j, report);
    if (!report.empty() && report != "-") {
        std::cout << res.schedules() << " schedules over " << res.concurrent_events << " events, "
                  << res.deadlocks() << " deadlocked\n";
        for (const auto& o : j["overlaps"]) {
            std::cout << "  " << o["pair"][0].get<std::string>() << "/" << o["pair"][1].get<std::string>()
                      << " overlapped in " << o["schedules"] << " schedules\n";
        }
    }
    return res.deadlocks() == 0 ? kExitOk : kExitPolicy;
}

int cmd_scenario(const fs::path& dir, const std::string& name, bool all, bool list, const std::string& report,
                 const sfvm::EngineConfig& cfg) {
    auto scenarios = sfvm::load_scenarios(dir);
    if (list) {
        for (const auto& s : scenarios) {
            std::cout << s.name << "  " << s.mitigation << "  " << s.reference << "\n";
        }
        return kExitOk;
    }
    if (all == !name.empty()) {
        throw UsageError("give a scenario name or --all");
    }
    std::vector<sfvm::ScenarioResult> results;
    for (const auto& s : scenarios) {
        if (all || s.name == name) {
            results.push_back(sfvm::run_scenario(s, cfg));
        }
    }
    if (results.empty()) {
        throw UsageError("unknown scenario '" + name + "' (see --list)");
    }
    for (const auto& r : results) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " [" << r.mitigation << "]\n";
        if (r.error) {
            std::cout << "  error: " << *r.error << "\n";
        }
        for (const auto& c : r.checks) {
            std::cout << "  " << (c.passed ? "ok   " : "FAIL ") << c.kind << ": " << c.detail << "\n";
        }
    }
    if (!report.empty()) {
        write_output(sfvm::scenarios_report(results), report);
    }
    bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
    return ok ? kExitOk : kExitPolicy;
}

int cmd_attack_surface(const std::string& profiles, bool as_json) {
    auto rows = sfvm::attack_surface_table(sfvm::load_profiles(profiles));
    if (as_json) {
        std::cout << sfvm::attack_surface_report(rows).dump(2) << "\n";
    } else {
        std::cout << sfvm::format_attack_surface(rows);
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"sfvm: stateful syscall filters on a simulated kernel"};
    app.require_subcommand(1);
    std::string data_flag;
    std::string protection = "copy";
    std::string descriptors;
    app.add_option("--data-dir", data_flag, "bundled data directory (scenarios, profiles)");
    app.add_option("--protection", protection, "argument protection: copy, write_protect or none");
    app.add_option("--descriptors", descriptors, "argument descriptor file")->check(CLI::ExistingFile);

    std::string in, out;
    auto* asm_cmd = app.add_subcommand("asm", "assemble a text program into the binary encoding");
    asm_cmd->add_option("input", in)->required()->check(CLI::ExistingFile);
    asm_cmd->add_option("-o,--output", out)->required();

    auto* disasm_cmd = app.add_subcommand("disasm", "print a filter as assembly");
    disasm_cmd->add_option("input", in)->required()->check(CLI::ExistingFile);

    bool as_json = false;
    auto* verify_cmd = app.add_subcommand("verify", "run the verifier on a filter");
    verify_cmd->add_option("program", in)->required()->check(CLI::ExistingFile);
    verify_cmd->add_flag("--json", as_json);

    std::string trace, schedule = "trace", report;
    std::vector<std::string> filters;
    auto* run_cmd = app.add_subcommand("run", "run a trace under one schedule");
    run_cmd->add_option("--trace", trace)->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--filter", filters, "filter file (.s, .json generator spec or binary)")
        ->check(CLI::ExistingFile);
    run_cmd->add_option("--schedule", schedule, "trace, seed:<n> or a comma-separated tid list");
    run_cmd->add_option("--report", report, "write the JSON report here (default stdout)");

    size_t max_steps = sfvm::kDefaultMaxExploreSteps;
    bool prune = false;
    auto* explore_cmd = app.add_subcommand("explore", "enumerate every interleaving of a trace");
    explore_cmd->add_option("--trace", trace)->required()->check(CLI::ExistingFile);
    explore_cmd->add_option("--filter", filters)->check(CLI::ExistingFile);
    explore_cmd->add_option("--max-steps", max_steps, "exploration bound (at most 14)");
    explore_cmd->add_flag("--prune", prune, "skip schedules that reach an already visited state");
    explore_cmd->add_option("--report", report);

    std::string scenario_name;
    bool all = false, list = false;
    auto* scenario_cmd = app.add_subcommand("scenario", "run bundled vulnerability scenarios");
    scenario_cmd->add_option("name", scenario_name);
    scenario_cmd->add_flag("--all", all);
    scenario_cmd->add_flag("--list", list);
    scenario_cmd->add_option("--report", report);

    std::string profiles;
    auto* report_cmd = app.add_subcommand("report", "derived tables");
    report_cmd->require_subcommand(1);
    auto* surface_cmd = report_cmd->add_subcommand("attack-surface", "two-phase attack surface per application");
    surface_cmd->add_option("--profiles", profiles, "profile file (default: bundled six applications)");
    surface_cmd->add_flag("--json", as_json);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        auto cfg = engine_config(protection);
        fs::path data = data_dir(data_flag);
        if (*asm_cmd) {
            return cmd_asm(in, out);
        }
        if (*disasm_cmd) {
            return cmd_disasm(in);
        }
        if (*verify_cmd) {
            return cmd_verify(in, as_json);
        }
        if (*run_cmd) {
            return cmd_run(trace, filters, schedule, report, cfg, descriptors);
        }
        if (*explore_cmd) {
            return cmd_explore(trace, filters, max_steps, prune, report, cfg, descriptors);
        }
        if (*scenario_cmd) {
            return cmd_scenario(data / "scenarios", scenario_name, all, list, report, cfg);
        }
        if (*surface_cmd) {
            return cmd_attack_surface(profiles.empty() ? (data / "profiles" / "six_apps.json").string() : profiles,
                                      as_json);
        }
    } catch (const sfvm::ExploreRefused& e) {
        std::cerr << "sfvm: " << e.what() << "\n";
        return kExitUsage;
    } catch (const sfvm::TraceError& e) {
        std::cerr << "sfvm: trace line " << e.line() << ": " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "sfvm: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
