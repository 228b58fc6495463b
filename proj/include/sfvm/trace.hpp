// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Workload traces: one JSON object per line.
//
//   {"ev":"spawn","tid":1,"child":2}
//   {"ev":"install","tid":2,"filter":"allowlist"}
//   {"ev":"syscall_enter","tid":2,"nr":"mremap","args":[4096,8192,16384,1,0,0]}
//   {"ev":"syscall_exit","tid":2,"nr":25}
//   {"ev":"mem_write","tid":3,"addr":4096,"data":"BBBB","dt_ms":5}
//
// Every event may carry dt_ns or dt_ms; the simulation clock advances by
// that amount before the event runs.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "sfvm/bytes.hpp"
#include "sfvm/context.hpp"
#include "sfvm/engine.hpp"
#include "sfvm/syscalls.hpp"

namespace sfvm {

enum class EventKind : uint8_t {
    spawn,
    spawn_thread,
    set_nnp,
    set_dumpable,
    set_caps,
    new_userns,
    load,
    install,
    syscall_enter,
    syscall_exit,
    mem_map,
    mem_write,
    mem_protect,
    map_update,
    phase_marker,
    checkpoint,
    restore,
};

inline constexpr std::array<std::pair<std::string_view, EventKind>, 17> kEventNames{{
    {"spawn", EventKind::spawn},
    {"spawn_thread", EventKind::spawn_thread},
    {"set_nnp", EventKind::set_nnp},
    {"set_dumpable", EventKind::set_dumpable},
    {"set_caps", EventKind::set_caps},
    {"new_userns", EventKind::new_userns},
    {"load", EventKind::load},
    {"install", EventKind::install},
    {"syscall_enter", EventKind::syscall_enter},
    {"syscall_exit", EventKind::syscall_exit},
    {"mem_map", EventKind::mem_map},
    {"mem_write", EventKind::mem_write},
    {"mem_protect", EventKind::mem_protect},
    {"map_update", EventKind::map_update},
    {"phase_marker", EventKind::phase_marker},
    {"checkpoint", EventKind::checkpoint},
    {"restore", EventKind::restore},
}};

inline std::string_view event_name(EventKind k) {
    for (const auto& [n, v] : kEventNames) {
        if (v == k) {
            return n;
        }
    }
    return "?";
}

/// Dummy syscall number marking the switch from initialization to serving.
inline constexpr int32_t kPhaseMarkerNr = 1000;

struct TraceEvent {
    EventKind kind = EventKind::syscall_enter;
    Tid tid = 0;
    size_t line = 0;
    uint64_t dt_ns = 0;

    std::optional<Tid> child;                        // spawn, spawn_thread
    bool flag = false;                               // set_dumpable, mem_map/mem_protect writable
    Credentials creds;                               // set_caps
    std::string filter;                              // load, install
    std::string handle;                              // load (label), install (label)
    InstallFlags install_flags = InstallFlags::extended;
    SyscallContext ctx;                              // syscall_enter; ctx.nr for exit / phase_marker
    uint64_t addr = 0;                               // mem_*
    uint64_t len = 0;
    Bytes data;
    Tid target = 0;                                  // map_update
    size_t filter_index = 0;
    std::string map;
    nlohmann::json key;
    nlohmann::json value;
    std::string label;                               // checkpoint, restore
    std::vector<Tid> tids;                           // checkpoint
    std::map<Tid, Tid> tid_map;                      // restore

    /// Events that shape tasks and policy rather than exercise it.
    [[nodiscard]] bool is_setup() const {
        switch (kind) {
        case EventKind::spawn:
        case EventKind::spawn_thread:
        case EventKind::set_nnp:
        case EventKind::set_dumpable:
        case EventKind::set_caps:
        case EventKind::new_userns:
        case EventKind::load:
        case EventKind::install:
        case EventKind::mem_map:
            return true;
        default:
            return false;
        }
    }

    [[nodiscard]] std::string describe() const {
        std::string s = std::string(event_name(kind)) + " tid=" + std::to_string(tid);
        if (kind == EventKind::syscall_enter || kind == EventKind::syscall_exit || kind == EventKind::phase_marker) {
            s += " nr=" + syscall_label(ctx.nr);
        }
        if (child) {
            s += " child=" + std::to_string(*child);
        }
        return s;
    }
};

class TraceError : public std::runtime_error {
  public:
    TraceError(size_t line, const std::string& what)
        : std::runtime_error("trace line " + std::to_string(line) + ": " + what), line_(line) {}
    [[nodiscard]] size_t line() const { return line_; }

  private:
    size_t line_;
};

namespace trace_detail {

inline int32_t syscall_field(const nlohmann::json& j, size_t line) {
    if (j.is_number_integer()) {
        return j.get<int32_t>();
    }
    if (j.is_string()) {
        try {
            return parse_syscall(j.get<std::string>());
        } catch (const std::exception& e) {
            throw TraceError(line, e.what());
        }
    }
    throw TraceError(line, "nr must be a number or a syscall name");
}

inline uint64_t u64_field(const nlohmann::json& obj, const char* key, size_t line, std::optional<uint64_t> dflt = {}) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        if (dflt) {
            return *dflt;
        }
        throw TraceError(line, std::string("missing field '") + key + "'");
    }
    if (it->is_number_unsigned() || (it->is_number_integer() && it->get<int64_t>() >= 0)) {
        return it->get<uint64_t>();
    }
    if (it->is_string()) {
        // Hex addresses are easier to read in traces.
        try {
            return std::stoull(it->get<std::string>(), nullptr, 0);
        } catch (const std::exception&) {
        }
    }
    throw TraceError(line, std::string("field '") + key + "' must be a non-negative integer");
}

inline std::string str_field(const nlohmann::json& obj, const char* key, size_t line, std::optional<std::string> dflt = {}) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        if (dflt) {
            return *dflt;
        }
        throw TraceError(line, std::string("missing field '") + key + "'");
    }
    if (!it->is_string()) {
        throw TraceError(line, std::string("field '") + key + "' must be a string");
    }
    return it->get<std::string>();
}

inline bool bool_field(const nlohmann::json& obj, const char* key, size_t line, bool dflt) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        return dflt;
    }
    if (!it->is_boolean()) {
        throw TraceError(line, std::string("field '") + key + "' must be a boolean");
    }
    return it->get<bool>();
}

inline Bytes data_field(const nlohmann::json& obj, size_t line) {
    if (auto it = obj.find("hex"); it != obj.end()) {
        try {
            return from_hex(it->get<std::string>());
        } catch (const std::exception& e) {
            throw TraceError(line, std::string("bad hex: ") + e.what());
        }
    }
    std::string s = str_field(obj, "data", line);
    Bytes out(s.begin(), s.end());
    if (bool_field(obj, "nul", line, false)) {
        out.push_back(0);
    }
    return out;
}

} // namespace trace_detail

/// Parses one event; `line` is used for diagnostics only.
inline TraceEvent parse_event(const nlohmann::json& j, size_t line) {
    using namespace trace_detail;
    if (!j.is_object()) {
        throw TraceError(line, "event must be a JSON object");
    }
    TraceEvent ev;
    ev.line = line;
    std::string name = str_field(j, "ev", line);
    bool known = false;
    for (const auto& [n, k] : kEventNames) {
        if (n == name) {
            ev.kind = k;
            known = true;
        }
    }
    if (!known) {
        throw TraceError(line, "unknown event '" + name + "'");
    }
    ev.tid = u64_field(j, "tid", line);
    if (j.contains("dt_ns")) {
        ev.dt_ns = u64_field(j, "dt_ns", line);
    } else if (j.contains("dt_ms")) {
        ev.dt_ns = u64_field(j, "dt_ms", line) * 1'000'000;
    }
    switch (ev.kind) {
    case EventKind::spawn:
    case EventKind::spawn_thread:
        if (j.contains("child")) {
            ev.child = u64_field(j, "child", line);
        }
        break;
    case EventKind::set_nnp:
    case EventKind::new_userns:
        break;
    case EventKind::set_dumpable:
        ev.flag = bool_field(j, "value", line, false);
        break;
    case EventKind::set_caps:
        ev.creds.uid = static_cast<uint32_t>(u64_field(j, "uid", line, 0));
        ev.creds.gid = static_cast<uint32_t>(u64_field(j, "gid", line, ev.creds.uid));
        ev.creds.cap_sys_admin = bool_field(j, "cap_sys_admin", line, false);
        ev.creds.cap_sys_ptrace = bool_field(j, "cap_sys_ptrace", line, false);
        break;
    case EventKind::load:
        ev.filter = str_field(j, "filter", line);
        ev.handle = str_field(j, "handle", line, ev.filter);
        break;
    case EventKind::install: {
        ev.filter = str_field(j, "filter", line, "");
        ev.handle = str_field(j, "handle", line, "");
        if (ev.filter.empty() == ev.handle.empty()) {
            throw TraceError(line, "install needs exactly one of 'filter' or 'handle'");
        }
        std::string fl = str_field(j, "flags", line, "extended");
        if (fl == "classic") {
            ev.install_flags = InstallFlags::classic;
        } else if (fl != "extended") {
            throw TraceError(line, "flags must be 'extended' or 'classic'");
        }
        break;
    }
    case EventKind::syscall_enter: {
        if (!j.contains("nr")) {
            throw TraceError(line, "missing field 'nr'");
        }
        ev.ctx.nr = syscall_field(j.at("nr"), line);
        ev.ctx.arch = static_cast<uint32_t>(u64_field(j, "arch", line, kAuditArchX86_64));
        ev.ctx.calling_address = u64_field(j, "addr", line, 0);
        if (auto a = j.find("args"); a != j.end()) {
            if (!a->is_array() || a->size() > 6) {
                throw TraceError(line, "args must be an array of at most 6 integers");
            }
            for (size_t i = 0; i < a->size(); ++i) {
                const auto& v = (*a)[i];
                if (v.is_number_unsigned()) {
                    ev.ctx.args[i] = v.get<uint64_t>();
                } else if (v.is_number_integer()) {
                    ev.ctx.args[i] = static_cast<uint64_t>(v.get<int64_t>());
                } else if (v.is_string()) {
                    try {
                        ev.ctx.args[i] = std::stoull(v.get<std::string>(), nullptr, 0);
                    } catch (const std::exception&) {
                        throw TraceError(line, "args must be integers");
                    }
                } else {
                    throw TraceError(line, "args must be integers");
                }
            }
        }
        break;
    }
    case EventKind::syscall_exit:
        if (!j.contains("nr")) {
            throw TraceError(line, "missing field 'nr'");
        }
        ev.ctx.nr = syscall_field(j.at("nr"), line);
        break;
    case EventKind::phase_marker:
        ev.ctx.nr = j.contains("nr") ? syscall_field(j.at("nr"), line) : kPhaseMarkerNr;
        break;
    case EventKind::mem_map:
        ev.addr = u64_field(j, "addr", line);
        ev.len = u64_field(j, "len", line, kPageSize);
        ev.flag = bool_field(j, "writable", line, true);
        break;
    case EventKind::mem_write:
        ev.addr = u64_field(j, "addr", line);
        ev.data = data_field(j, line);
        break;
    case EventKind::mem_protect:
        ev.addr = u64_field(j, "addr", line);
        ev.len = u64_field(j, "len", line, kPageSize);
        ev.flag = bool_field(j, "writable", line, false);
        break;
    case EventKind::map_update:
        ev.target = u64_field(j, "target", line);
        ev.filter_index = u64_field(j, "filter", line, 0);
        ev.map = str_field(j, "map", line);
        if (!j.contains("key") || !j.contains("value")) {
            throw TraceError(line, "map_update needs 'key' and 'value'");
        }
        ev.key = j.at("key");
        ev.value = j.at("value");
        break;
    case EventKind::checkpoint:
        ev.label = str_field(j, "label", line, "ckpt");
        if (auto t = j.find("tids"); t != j.end()) {
            for (const auto& v : *t) {
                ev.tids.push_back(v.get<Tid>());
            }
        }
        break;
    case EventKind::restore:
        ev.label = str_field(j, "label", line, "ckpt");
        if (auto m = j.find("tid_map"); m != j.end()) {
            for (const auto& [k, v] : m->items()) {
                ev.tid_map[std::stoull(k)] = v.get<Tid>();
            }
        }
        break;
    }
    return ev;
}

/// Structural checks over the whole trace: tids exist when used, syscall
/// enter/exit pair up per task, checkpoints precede their restores.
inline void validate_trace(const std::vector<TraceEvent>& events) {
    std::set<Tid> known{kInitTid};
    std::map<Tid, int32_t> open;
    std::set<std::string> labels;
    std::set<std::string> handles;
    for (const auto& ev : events) {
        if (!known.contains(ev.tid)) {
            throw TraceError(ev.line, "task " + std::to_string(ev.tid) + " does not exist yet");
        }
        switch (ev.kind) {
        case EventKind::spawn:
        case EventKind::spawn_thread:
            if (!ev.child) {
                throw TraceError(ev.line, "spawn needs 'child'");
            }
            if (!known.insert(*ev.child).second) {
                throw TraceError(ev.line, "task " + std::to_string(*ev.child) + " already exists");
            }
            break;
        case EventKind::syscall_enter:
            if (open.contains(ev.tid)) {
                throw TraceError(ev.line, "task " + std::to_string(ev.tid) + " is already inside " +
                                              syscall_label(open[ev.tid]));
            }
            open[ev.tid] = ev.ctx.nr;
            break;
        case EventKind::syscall_exit: {
            auto it = open.find(ev.tid);
            if (it == open.end()) {
                throw TraceError(ev.line, "syscall_exit without a matching syscall_enter");
            }
            if (it->second != ev.ctx.nr) {
                throw TraceError(ev.line, "syscall_exit for " + syscall_label(ev.ctx.nr) + " but task is inside " +
                                              syscall_label(it->second));
            }
            open.erase(it);
            break;
        }
        case EventKind::phase_marker:
            if (open.contains(ev.tid)) {
                throw TraceError(ev.line, "phase marker while a syscall is open");
            }
            break;
        case EventKind::load:
            handles.insert(ev.handle);
            break;
        case EventKind::install:
            if (!ev.handle.empty() && !handles.contains(ev.handle)) {
                throw TraceError(ev.line, "install of unknown handle '" + ev.handle + "'");
            }
            break;
        case EventKind::map_update:
            if (!known.contains(ev.target)) {
                throw TraceError(ev.line, "map_update target does not exist");
            }
            break;
        case EventKind::checkpoint:
            labels.insert(ev.label);
            for (Tid t : ev.tids) {
                if (!known.contains(t)) {
                    throw TraceError(ev.line, "checkpoint of unknown task " + std::to_string(t));
                }
            }
            break;
        case EventKind::restore:
            if (!labels.contains(ev.label)) {
                throw TraceError(ev.line, "restore of unknown checkpoint '" + ev.label + "'");
            }
            break;
        default:
            break;
        }
    }
}

inline std::vector<TraceEvent> parse_trace(std::istream& in) {
    std::vector<TraceEvent> out;
    std::string text;
    size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        auto first = text.find_first_not_of(" \t\r");
        if (first == std::string::npos || text[first] == '#') {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw TraceError(line, std::string("invalid JSON: ") + e.what());
        }
        out.push_back(parse_event(j, line));
    }
    validate_trace(out);
    return out;
}

inline std::vector<TraceEvent> parse_trace(std::string_view text) {
    std::istringstream in{std::string(text)};
    return parse_trace(in);
}

inline std::vector<TraceEvent> load_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open trace " + path);
    }
    return parse_trace(in);
}

/// Packs a JSON key or value into exactly `size` bytes: an integer is stored
/// little-endian, an array of integers as consecutive u64 words, a string as
/// hex ("0x...").
inline Bytes encode_map_bytes(const nlohmann::json& j, size_t size) {
    Bytes out;
    if (j.is_number_integer()) {
        put_le<uint64_t>(out, j.get<uint64_t>());
        out.resize(std::max<size_t>(size, 8), 0);
        if (size < 8) {
            // Truncation must not lose set bits.
            for (size_t i = size; i < 8; ++i) {
                if (out[i] != 0) {
                    throw std::invalid_argument("integer does not fit in " + std::to_string(size) + " bytes");
                }
            }
            out.resize(size);
        }
        return out;
    }
    if (j.is_array()) {
        for (const auto& v : j) {
            put_le<uint64_t>(out, v.get<uint64_t>());
        }
    } else if (j.is_string()) {
        out = from_hex(j.get<std::string>());
    } else {
        throw std::invalid_argument("map bytes must be an integer, an integer array or a hex string");
    }
    if (out.size() != size) {
        throw std::invalid_argument("expected " + std::to_string(size) + " bytes, got " + std::to_string(out.size()));
    }
    return out;
}

} // namespace sfvm
