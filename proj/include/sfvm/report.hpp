// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Machine-readable reports. Every report is a JSON object with "format",
// "version" and "kind"; field names are part of the interface and the shape
// is pinned by data/schema/report.schema.json. Reports carry no wall-clock
// timings so that repeated runs produce identical files.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "sfvm/profiles.hpp"
#include "sfvm/scenario.hpp"
#include "sfvm/simulator.hpp"
#include "sfvm/verifier.hpp"

namespace sfvm {

inline constexpr const char* kReportFormat = "sfvm-report";
inline constexpr int kReportVersion = 1;

inline nlohmann::json report_header(const std::string& kind) {
    return {{"format", kReportFormat}, {"version", kReportVersion}, {"kind", kind}};
}

struct SurfaceRow {
    std::string application;
    size_t s_init = 0;
    size_t s_serv = 0;
    size_t s_comm = 0;
    size_t union_size = 0;
    double reduction_pct = 0.0; // rounded to one decimal
    std::vector<std::string> warnings;
};

inline SurfaceRow surface_row(const PhaseProfile& p) {
    SurfaceRow r;
    r.application = p.name;
    r.s_init = p.s_init.size();
    r.s_serv = p.s_serv.size();
    r.s_comm = p.s_comm().size();
    r.union_size = union_size(p);
    r.reduction_pct = round_to(attack_surface_reduction(p), 1);
    if (p.s_serv.empty()) {
        r.warnings.push_back("empty serving set: the union is the initialization set");
    }
    if (p.s_init.empty()) {
        r.warnings.push_back("empty initialization set");
    }
    return r;
}

inline std::vector<SurfaceRow> attack_surface_table(const std::vector<PhaseProfile>& profiles) {
    std::vector<SurfaceRow> rows;
    rows.reserve(profiles.size());
    for (const auto& p : profiles) {
        rows.push_back(surface_row(p));
    }
    return rows;
}

inline nlohmann::json attack_surface_report(const std::vector<SurfaceRow>& rows) {
    auto j = report_header("attack_surface");
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"application", r.application},
                             {"s_init", r.s_init},
                             {"s_serv", r.s_serv},
                             {"s_comm", r.s_comm},
                             {"union", r.union_size},
                             {"reduction_pct", r.reduction_pct},
                             {"warnings", r.warnings}});
    }
    return j;
}

inline std::string format_attack_surface(const std::vector<SurfaceRow>& rows) {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-12s %7s %7s %7s %7s %10s\n", "application", "s_init", "s_serv", "s_comm",
                  "union", "reduction");
    out += buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-12s %7zu %7zu %7zu %7zu %9.1f%%\n", r.application.c_str(), r.s_init,
                      r.s_serv, r.s_comm, r.union_size, r.reduction_pct);
        out += buf;
        for (const auto& w : r.warnings) {
            out += "  warning: " + w + "\n";
        }
    }
    return out;
}

struct VerifiedProgram {
    std::string name;
    const FilterProgram* program = nullptr;
    VerifierReport report;
};

inline nlohmann::json verify_report(const std::vector<VerifiedProgram>& progs) {
    auto j = report_header("verify");
    bool all = true;
    j["programs"] = nlohmann::json::array();
    for (const auto& p : progs) {
        const auto& v = p.report;
        all = all && v.accepted;
        j["programs"].push_back(
            {{"name", p.name},
             {"accepted", v.accepted},
             {"reason", v.reason},
             {"offending_instruction",
              v.offending_instruction ? nlohmann::json(*v.offending_instruction) : nlohmann::json(nullptr)},
             {"instructions", p.program->instructions.size()},
             {"maps", p.program->map_refs.size()},
             {"sleepable", p.program->sleepable},
             {"steps", v.steps}});
    }
    j["accepted"] = all;
    return j;
}

inline nlohmann::json run_summary(const DecisionLog& log) {
    return {{"decisions", log.decisions.size()},
            {"steps_executed", log.total_steps_executed()},
            {"stalls", log.stalls},
            {"deadlocks", log.deadlocks.size()},
            {"blocked_entries", log.blocked_entries},
            {"skipped_events", log.skipped}};
}

inline nlohmann::json run_report(const DecisionLog& log) {
    auto j = report_header("run");
    j["summary"] = run_summary(log);
    j["log"] = log.to_json();
    return j;
}

inline std::string hex_digest(uint64_t d) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
    return buf;
}

inline nlohmann::json explore_report(const ExploreResult& res) {
    auto j = report_header("explore");
    j["concurrent_events"] = res.concurrent_events;
    j["schedules"] = res.schedules();
    j["pruned"] = res.pruned;
    j["deadlocked_schedules"] = res.deadlocks();
    std::map<std::pair<int32_t, int32_t>, size_t> counts;
    for (const auto& r : res.runs) {
        for (const auto& p : r.overlaps) {
            ++counts[p];
        }
    }
    j["overlaps"] = nlohmann::json::array();
    for (const auto& [p, n] : counts) {
        j["overlaps"].push_back(
            {{"pair", {syscall_label(p.first), syscall_label(p.second)}}, {"schedules", n}});
    }
    j["runs"] = nlohmann::json::array();
    for (const auto& r : res.runs) {
        nlohmann::json ov = nlohmann::json::array();
        for (const auto& [a, b] : r.overlaps) {
            ov.push_back({syscall_label(a), syscall_label(b)});
        }
        j["runs"].push_back({{"schedule", r.schedule},
                             {"digest", hex_digest(r.digest)},
                             {"deadlock", r.deadlock},
                             {"overlaps", ov},
                             {"decisions", r.log.decisions.size()}});
    }
    return j;
}

inline nlohmann::json scenarios_report(const std::vector<ScenarioResult>& results) {
    auto j = report_header("scenarios");
    size_t passed = 0;
    j["scenarios"] = nlohmann::json::array();
    for (const auto& r : results) {
        passed += r.passed ? 1 : 0;
        j["scenarios"].push_back(r.to_json());
    }
    j["passed"] = passed;
    j["failed"] = results.size() - passed;
    return j;
}

} // namespace sfvm
