// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Filters described as JSON generator specs, filter files, and declarative
// scenarios: a trace, the filters it installs, a run or explore mode and a
// list of checks evaluated on the resulting decision logs.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "sfvm/action.hpp"
#include "sfvm/assembler.hpp"
#include "sfvm/bundle.hpp"
#include "sfvm/policy.hpp"
#include "sfvm/program.hpp"
#include "sfvm/simulator.hpp"
#include "sfvm/syscalls.hpp"
#include "sfvm/trace.hpp"

namespace sfvm {

class ScenarioError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace scenario_detail {

using nlohmann::json;

inline const json& need(const json& j, const char* key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) {
        throw ScenarioError(where + ": missing '" + key + "'");
    }
    return j.at(key);
}

inline int32_t syscall_of(const json& j, const std::string& where) {
    try {
        if (j.is_number_integer()) {
            return j.get<int32_t>();
        }
        if (j.is_string()) {
            return parse_syscall(j.get<std::string>());
        }
    } catch (const std::exception& e) {
        throw ScenarioError(where + ": " + e.what());
    }
    throw ScenarioError(where + ": expected a syscall name or number");
}

inline uint64_t u64_of(const json& j, const std::string& where) {
    if (j.is_number_unsigned()) {
        return j.get<uint64_t>();
    }
    if (j.is_number_integer() && j.get<int64_t>() >= 0) {
        return j.get<uint64_t>();
    }
    if (j.is_string()) {
        try {
            return std::stoull(j.get<std::string>(), nullptr, 0);
        } catch (const std::exception&) {
        }
    }
    throw ScenarioError(where + ": expected a non-negative integer");
}

inline SyscallSet set_of(const json& j, const std::string& where) {
    if (!j.is_array()) {
        throw ScenarioError(where + ": expected an array of syscalls");
    }
    SyscallSet s;
    for (const auto& v : j) {
        s.insert(syscall_of(v, where));
    }
    return s;
}

inline SyscallPair pair_of(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 2) {
        throw ScenarioError(where + ": expected a pair of syscalls");
    }
    return {syscall_of(j[0], where), syscall_of(j[1], where)};
}

} // namespace scenario_detail

/// "ALLOW", "ERRNO", "ERRNO(13)", "TRAP(2)", "KILL_PROCESS" ...
/// Without a data suffix ERRNO means EPERM.
inline ResolvedAction parse_action(std::string_view text) {
    std::string_view name = text;
    std::optional<uint16_t> data;
    if (auto open = text.find('('); open != std::string_view::npos) {
        if (text.back() != ')') {
            throw ScenarioError("bad action '" + std::string(text) + "'");
        }
        name = text.substr(0, open);
        std::string num(text.substr(open + 1, text.size() - open - 2));
        try {
            unsigned long v = std::stoul(num, nullptr, 0);
            if (v > 0xffff) {
                throw std::out_of_range("data");
            }
            data = static_cast<uint16_t>(v);
        } catch (const std::exception&) {
            throw ScenarioError("bad action data in '" + std::string(text) + "'");
        }
    }
    auto kind = parse_action_name(name);
    if (!kind) {
        throw ScenarioError("unknown action '" + std::string(name) + "'");
    }
    if (!data && *kind == ActionKind::errno_) {
        data = kEperm;
    }
    return make_action(*kind, data.value_or(0));
}

/// True if `a` satisfies the expectation text; a bare kind matches any data.
inline bool action_matches(const ResolvedAction& a, std::string_view expect) {
    if (expect.find('(') == std::string_view::npos) {
        auto kind = parse_action_name(expect);
        if (!kind) {
            throw ScenarioError("unknown action '" + std::string(expect) + "'");
        }
        return a.kind == *kind;
    }
    return a == parse_action(expect);
}

/// Builds a bundle from {"generator": ..., "spec": {...}}. `base` resolves
/// relative file names for the asm generator.
inline PolicyBundle generate_filter(const std::string& name, const nlohmann::json& decl,
                                    const std::filesystem::path& base = {}) {
    using namespace scenario_detail;
    const std::string where = "filter '" + name + "'";
    const std::string gen = need(decl, "generator", where).get<std::string>();
    const json spec = decl.value("spec", json::object());
    GenOptions opt;
    if (spec.contains("deny")) {
        opt.deny = parse_action(spec["deny"].get<std::string>());
    }
    PolicyBundle b;
    try {
        if (gen == "allowlist" || gen == "denylist") {
            auto style = parse_list_style(spec.value("style", "binary"));
            if (!style) {
                throw ScenarioError(where + ": unknown style");
            }
            auto set = set_of(need(spec, "syscalls", where), where);
            b = gen == "allowlist" ? gen_allowlist(set, *style, opt) : gen_denylist(set, *style, opt);
        } else if (gen == "count_limit") {
            CountLimitSpec s;
            s.nr = syscall_of(need(spec, "nr", where), where);
            if (spec.contains("arg_index")) {
                s.arg_index = static_cast<uint32_t>(u64_of(spec["arg_index"], where));
                s.arg_value = u64_of(need(spec, "arg_value", where), where);
            }
            s.max_count = u64_of(need(spec, "max_count", where), where);
            b = gen_count_limit(s, opt);
        } else if (gen == "rate_limit") {
            RateLimitSpec s;
            s.nr = syscall_of(need(spec, "nr", where), where);
            s.capacity = u64_of(need(spec, "capacity", where), where);
            s.refill_per_sec = need(spec, "refill_per_sec", where).get<double>();
            b = gen_rate_limit(s, opt);
        } else if (gen == "sfip") {
            SfipSpec s;
            for (const auto& v : need(spec, "syscalls", where)) {
                s.syscalls.push_back(syscall_of(v, where));
            }
            const size_t n = s.syscalls.size();
            if (spec.contains("matrix")) {
                for (const auto& row : spec["matrix"]) {
                    std::vector<bool> r;
                    for (const auto& c : row) {
                        r.push_back(c.is_boolean() ? c.get<bool>() : c.get<int>() != 0);
                    }
                    s.matrix.push_back(std::move(r));
                }
            } else {
                s.matrix.assign(n, std::vector<bool>(n, false));
                auto idx = [&](int32_t nr) {
                    auto it = std::find(s.syscalls.begin(), s.syscalls.end(), nr);
                    if (it == s.syscalls.end()) {
                        throw ScenarioError(where + ": transition uses " + syscall_label(nr) + " outside 'syscalls'");
                    }
                    return static_cast<size_t>(it - s.syscalls.begin());
                };
                for (const auto& t : spec.value("transitions", json::array())) {
                    auto [from, to] = pair_of(t, where);
                    s.matrix[idx(from)][idx(to)] = true;
                }
            }
            s.start = set_of(spec.value("start", json::array()), where);
            const json origins = spec.value("origins", json::object());
            for (const auto& [k, addrs] : origins.items()) {
                auto& dst = s.origin[syscall_of(json(k), where)];
                for (const auto& a : addrs) {
                    dst.insert(u64_of(a, where));
                }
            }
            b = gen_sfip(s, opt);
        } else if (gen == "temporal") {
            PhaseProfile p;
            p.name = name;
            p.s_init = set_of(need(spec, "s_init", where), where);
            p.s_serv = set_of(need(spec, "s_serv", where), where);
            p.phase_marker_nr = spec.value("phase_marker_nr", kDefaultPhaseMarkerNr);
            b = gen_temporal(p, opt);
        } else if (gen == "serialization") {
            std::vector<SyscallPair> pairs;
            for (const auto& p : need(spec, "pairs", where)) {
                pairs.push_back(pair_of(p, where));
            }
            b = gen_serialization(pairs, spec.value("capacity", 64U), opt);
        } else if (gen == "draco") {
            DracoSpec s;
            for (const auto& [k, rules] : need(spec, "checks", where).items()) {
                auto& dst = s.checks[syscall_of(json(k), where)];
                for (const auto& r : rules) {
                    ArgRule rule;
                    rule.index = static_cast<uint32_t>(u64_of(need(r, "arg", where), where));
                    for (const auto& v : need(r, "allowed", where)) {
                        rule.allowed.push_back(u64_of(v, where));
                    }
                    dst.push_back(std::move(rule));
                }
            }
            s.cache = spec.value("cache", true);
            s.cache_entries = spec.value("cache_entries", 1024U);
            b = gen_draco(s, opt);
        } else if (gen == "asm") {
            std::string text;
            if (spec.contains("text")) {
                text = spec["text"].get<std::string>();
            } else {
                auto path = base / need(spec, "source", where).get<std::string>();
                std::ifstream in(path);
                if (!in) {
                    throw ScenarioError(where + ": cannot open " + path.string());
                }
                text.assign(std::istreambuf_iterator<char>(in), {});
            }
            b = PolicyBundle::single(name, assemble(text));
        } else {
            throw ScenarioError(where + ": unknown generator '" + gen + "'");
        }
    } catch (const ScenarioError&) {
        throw;
    } catch (const std::exception& e) {
        throw ScenarioError(where + ": " + e.what());
    }
    b.name = name;
    return b;
}

/// Reads a filter from a file: assembly (.s/.asm), a JSON generator spec
/// (.json, optional "name"), or the binary program encoding (anything else).
/// The bundle is named after the file stem unless the spec names it.
inline PolicyBundle load_filter(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ScenarioError("cannot open " + path.string());
    }
    std::string data((std::istreambuf_iterator<char>(in)), {});
    const std::string ext = path.extension().string();
    const std::string stem = path.stem().string();
    try {
        if (ext == ".s" || ext == ".asm") {
            return PolicyBundle::single(stem, assemble(data));
        }
        if (ext == ".json") {
            auto j = nlohmann::json::parse(data);
            return generate_filter(j.value("name", stem), j, path.parent_path());
        }
        Bytes bytes(data.begin(), data.end());
        return PolicyBundle::single(stem, decode_program(bytes));
    } catch (const ScenarioError&) {
        throw;
    } catch (const std::exception& e) {
        throw ScenarioError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Scenarios

struct ScenarioCheck {
    std::string kind; // actions, overlap, control_overlap, no_deadlock
    nlohmann::json params;
};

struct Scenario {
    std::string name;
    std::string reference;
    std::string pattern;
    std::string mitigation;
    std::string description;
    std::filesystem::path trace;
    std::vector<std::pair<std::string, nlohmann::json>> filters;
    bool explore = false;
    std::string schedule = "trace";
    size_t max_steps = kDefaultMaxExploreSteps;
    std::vector<ScenarioCheck> checks;
    std::filesystem::path base;
};

inline Scenario scenario_from_json(const nlohmann::json& j, const std::filesystem::path& base) {
    using namespace scenario_detail;
    Scenario s;
    s.name = need(j, "name", "scenario").get<std::string>();
    const std::string where = "scenario '" + s.name + "'";
    s.reference = j.value("reference", "");
    s.pattern = j.value("pattern", "");
    s.mitigation = j.value("mitigation", "");
    s.description = j.value("description", "");
    s.base = base;
    s.trace = base / need(j, "trace", where).get<std::string>();
    const auto& filters = need(j, "filters", where);
    if (!filters.is_object()) {
        throw ScenarioError(where + ": 'filters' must map names to generator specs");
    }
    for (const auto& [name, decl] : filters.items()) {
        s.filters.emplace_back(name, decl);
    }
    std::string mode = j.value("mode", "run");
    if (mode != "run" && mode != "explore") {
        throw ScenarioError(where + ": mode must be 'run' or 'explore'");
    }
    s.explore = mode == "explore";
    s.schedule = j.value("schedule", "trace");
    s.max_steps = j.value("max_steps", kDefaultMaxExploreSteps);
    static const std::set<std::string> kinds{"actions", "overlap", "control_overlap", "no_deadlock"};
    for (const auto& c : need(j, "expect", where)) {
        ScenarioCheck chk;
        chk.kind = need(c, "check", where).get<std::string>();
        if (!kinds.contains(chk.kind)) {
            throw ScenarioError(where + ": unknown check '" + chk.kind + "'");
        }
        chk.params = c;
        s.checks.push_back(std::move(chk));
    }
    if (s.checks.empty()) {
        throw ScenarioError(where + ": no checks");
    }
    return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ScenarioError("cannot open " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ScenarioError(path.string() + ": " + e.what());
    }
    return scenario_from_json(j, path.parent_path());
}

/// Every *.json in `dir`, sorted by scenario name.
inline std::vector<Scenario> load_scenarios(const std::filesystem::path& dir) {
    std::vector<Scenario> out;
    if (!std::filesystem::is_directory(dir)) {
        throw ScenarioError("no scenario directory " + dir.string());
    }
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".json") {
            out.push_back(load_scenario(entry.path()));
        }
    }
    std::sort(out.begin(), out.end(), [](const Scenario& a, const Scenario& b) { return a.name < b.name; });
    return out;
}

struct CheckResult {
    std::string kind;
    bool passed = false;
    std::string detail;
};

struct ScenarioResult {
    std::string name;
    std::string reference;
    std::string mitigation;
    bool passed = false;
    std::vector<CheckResult> checks;
    size_t schedules = 0;
    size_t decisions = 0; // first (or only) run
    std::optional<std::string> error;

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json checks_j = nlohmann::json::array();
        for (const auto& c : checks) {
            checks_j.push_back({{"check", c.kind}, {"passed", c.passed}, {"detail", c.detail}});
        }
        return {{"name", name},
                {"reference", reference},
                {"mitigation", mitigation},
                {"passed", passed},
                {"schedules", schedules},
                {"decisions", decisions},
                {"checks", checks_j},
                {"error", error ? nlohmann::json(*error) : nlohmann::json(nullptr)}};
    }
};

namespace scenario_detail {

// The trace minus the loads and installs of the named filters.
inline std::vector<TraceEvent> without_filters(const std::vector<TraceEvent>& events,
                                               const std::set<std::string>& names) {
    std::set<std::string> dropped_handles;
    std::vector<TraceEvent> out;
    for (const auto& ev : events) {
        if (ev.kind == EventKind::load && names.contains(ev.filter)) {
            dropped_handles.insert(ev.handle);
            continue;
        }
        if (ev.kind == EventKind::install &&
            (names.contains(ev.filter) || (ev.filter.empty() && dropped_handles.contains(ev.handle)))) {
            continue;
        }
        out.push_back(ev);
    }
    return out;
}

struct Outcome {
    std::vector<DecisionLog> logs;
};

inline Outcome execute(const Scenario& s, const std::vector<TraceEvent>& events, const BundleRegistry& reg,
                       const EngineConfig& cfg) {
    Outcome o;
    Simulator sim(Engine(cfg), events, reg);
    if (s.explore) {
        ExploreOptions opt;
        opt.max_steps = s.max_steps;
        auto res = explore_interleavings(std::move(sim), opt);
        for (auto& r : res.runs) {
            o.logs.push_back(std::move(r.log));
        }
    } else {
        sim.run(Schedule::parse(s.schedule));
        o.logs.push_back(sim.log());
    }
    return o;
}

inline size_t overlapping(const Outcome& o, SyscallPair p) {
    return static_cast<size_t>(std::count_if(o.logs.begin(), o.logs.end(),
                                             [&](const DecisionLog& l) { return l.overlapped(p.first, p.second); }));
}

inline CheckResult check_actions(const ScenarioCheck& c, const Outcome& o) {
    CheckResult r{c.kind, true, ""};
    std::optional<Tid> tid;
    std::optional<int32_t> nr;
    if (c.params.contains("tid")) {
        tid = c.params["tid"].get<Tid>();
    }
    if (c.params.contains("nr")) {
        nr = syscall_of(c.params["nr"], "actions check");
    }
    std::vector<std::string> expect = need(c.params, "actions", "actions check").get<std::vector<std::string>>();
    for (size_t run = 0; run < o.logs.size(); ++run) {
        std::vector<ResolvedAction> got;
        for (const auto& d : o.logs[run].decisions) {
            if ((!tid || d.tid == *tid) && (!nr || d.nr == *nr)) {
                got.push_back(d.action);
            }
        }
        bool ok = got.size() == expect.size();
        for (size_t i = 0; ok && i < got.size(); ++i) {
            ok = action_matches(got[i], expect[i]);
        }
        if (!ok) {
            std::string seen;
            for (const auto& a : got) {
                seen += (seen.empty() ? "" : " ") + describe(a);
            }
            r.passed = false;
            r.detail = "run " + std::to_string(run) + ": got [" + seen + "]";
            return r;
        }
    }
    std::string what = (tid ? "tid " + std::to_string(*tid) + " " : std::string()) + (nr ? syscall_label(*nr) + " " : "");
    std::string seq;
    for (const auto& e : expect) {
        seq += (seq.empty() ? "" : " ") + e;
    }
    r.detail = what + "[" + seq + "] in " + std::to_string(o.logs.size()) + " run(s)";
    return r;
}

} // namespace scenario_detail

inline ScenarioResult run_scenario(const Scenario& s, const EngineConfig& cfg = {}) {
    using namespace scenario_detail;
    ScenarioResult res;
    res.name = s.name;
    res.reference = s.reference;
    res.mitigation = s.mitigation;
    try {
        BundleRegistry reg;
        std::set<std::string> names;
        for (const auto& [name, decl] : s.filters) {
            reg.emplace(name, generate_filter(name, decl, s.base));
            names.insert(name);
        }
        auto events = load_trace(s.trace.string());
        Outcome main = execute(s, events, reg, cfg);
        res.schedules = main.logs.size();
        res.decisions = main.logs.empty() ? 0 : main.logs.front().decisions.size();
        std::optional<Outcome> control;
        for (const auto& c : s.checks) {
            CheckResult r{c.kind, false, ""};
            if (c.kind == "actions") {
                r = check_actions(c, main);
            } else if (c.kind == "overlap" || c.kind == "control_overlap") {
                auto pair = pair_of(need(c.params, "pair", c.kind), c.kind);
                const Outcome* o = &main;
                if (c.kind == "control_overlap") {
                    if (!control) {
                        control = execute(s, without_filters(events, names), reg, cfg);
                    }
                    o = &*control;
                }
                size_t n = overlapping(*o, pair);
                std::string label = syscall_label(pair.first) + "/" + syscall_label(pair.second);
                if (c.params.contains("max")) {
                    r.passed = n <= c.params["max"].get<size_t>();
                } else {
                    r.passed = n >= c.params.value("min", size_t{1});
                }
                r.detail = label + " overlapped in " + std::to_string(n) + " of " + std::to_string(o->logs.size()) +
                           " schedule(s)" + (c.kind == "control_overlap" ? " without the filter" : "");
            } else if (c.kind == "no_deadlock") {
                size_t n = static_cast<size_t>(std::count_if(main.logs.begin(), main.logs.end(),
                                                             [](const DecisionLog& l) { return !l.deadlocks.empty(); }));
                r.passed = n == 0;
                r.detail = std::to_string(n) + " deadlocked schedule(s)";
            }
            res.checks.push_back(std::move(r));
        }
        res.passed = std::all_of(res.checks.begin(), res.checks.end(), [](const CheckResult& c) { return c.passed; });
    } catch (const std::exception& e) {
        res.error = e.what();
        res.passed = false;
    }
    return res;
}

} // namespace sfvm
