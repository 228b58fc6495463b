// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// A policy as it is shipped to a task: the entry program, any tail-call
// targets, initial map contents and prog_array wiring. install_bundle runs
// the loader sequence (load, populate, install, close all fds).

#include <map>
#include <string>
#include <vector>

#include "sfvm/action.hpp"
#include "sfvm/bytes.hpp"
#include "sfvm/engine.hpp"
#include "sfvm/program.hpp"

namespace sfvm {

struct MapInit {
    std::string map; // declared map name
    Bytes key;
    Bytes value;
};

struct ProgSlot {
    std::string map; // a prog_array
    uint32_t index = 0;
    std::string program; // name of an entry in PolicyBundle::aux
};

struct PolicyBundle {
    std::string name;
    FilterProgram main;
    std::vector<std::pair<std::string, FilterProgram>> aux;
    std::vector<MapInit> init;
    std::vector<ProgSlot> slots;

    static PolicyBundle single(std::string name, FilterProgram p) {
        PolicyBundle b;
        b.name = std::move(name);
        b.main = std::move(p);
        return b;
    }

    /// Every program in the bundle, entry first.
    [[nodiscard]] std::vector<const FilterProgram*> programs() const {
        std::vector<const FilterProgram*> out{&main};
        for (const auto& [n, p] : aux) {
            out.push_back(&p);
        }
        return out;
    }
};

struct InstallResult {
    EngineStatus status = EngineStatus::ok;
    ProgId prog = 0;
    std::string detail;
};

/// Loads every program of the bundle with maps shared by name, fills the
/// maps, installs the entry program and closes all remaining handles.
inline InstallResult install_bundle(Engine& e, Tid tid, const PolicyBundle& b,
                                    InstallFlags flags = InstallFlags::extended) {
    InstallResult res;
    std::map<std::string, HandleId> maps;
    std::map<std::string, ProgId> aux_ids;
    std::vector<HandleId> aux_handles;
    auto fail = [&](EngineStatus s, std::string why) {
        for (HandleId h : aux_handles) {
            e.close_handle(h);
        }
        e.close_map_handles(tid);
        res.status = s;
        res.detail = std::move(why);
        return res;
    };
    auto load = [&](const FilterProgram& p, const std::string& label) -> std::optional<LoadResult> {
        std::map<std::string, HandleId> bind;
        for (const auto& d : p.map_refs) {
            if (auto it = maps.find(d.name); it != maps.end()) {
                bind.emplace(d.name, it->second);
            }
        }
        LoadResult lr = e.load_program(tid, p, bind);
        if (lr.status != EngineStatus::ok) {
            res.detail = label + ": " + (lr.report.reason.empty() ? engine_status_name(lr.status) : lr.report.reason);
            return std::nullopt;
        }
        maps.insert(lr.map_handles.begin(), lr.map_handles.end());
        return lr;
    };

    auto main = load(b.main, b.name);
    if (!main) {
        return fail(EngineStatus::verification_failed, res.detail);
    }
    for (const auto& [name, p] : b.aux) {
        auto lr = load(p, b.name + "/" + name);
        if (!lr) {
            e.close_handle(main->handle);
            return fail(EngineStatus::verification_failed, res.detail);
        }
        aux_ids[name] = lr->prog;
        aux_handles.push_back(lr->handle);
    }
    for (const auto& m : b.init) {
        auto h = maps.find(m.map);
        MapStatus s = h == maps.end() ? MapStatus::invalid : e.update_map_via_handle(tid, h->second, m.key, m.value);
        if (s != MapStatus::ok) {
            e.close_handle(main->handle);
            return fail(EngineStatus::invalid, "map '" + m.map + "': " + map_status_name(s));
        }
    }
    for (const auto& slot : b.slots) {
        auto h = maps.find(slot.map);
        auto target = aux_ids.find(slot.program);
        if (h == maps.end() || target == aux_ids.end()) {
            e.close_handle(main->handle);
            return fail(EngineStatus::invalid, "bad prog_array slot " + slot.map + "[" + std::to_string(slot.index) + "]");
        }
        const PolicyMap* pm = e.find_map(*e.map_of_handle(h->second));
        Bytes key;
        Bytes value;
        if (pm->decl().key_size == 4) {
            put_le<uint32_t>(key, slot.index);
        } else {
            put_le<uint64_t>(key, slot.index);
        }
        if (pm->decl().value_size == 4) {
            put_le<uint32_t>(value, static_cast<uint32_t>(target->second));
        } else {
            put_le<uint64_t>(value, target->second);
        }
        MapStatus s = e.update_map_via_handle(tid, h->second, key, value);
        if (s != MapStatus::ok) {
            e.close_handle(main->handle);
            return fail(EngineStatus::invalid, "prog_array '" + slot.map + "': " + map_status_name(s));
        }
    }
    EngineStatus st = e.install_filter(tid, main->handle, flags);
    if (st != EngineStatus::ok) {
        e.close_handle(main->handle);
        return fail(st, engine_status_name(st));
    }
    res.prog = main->prog;
    // Tail-call targets stay alive through their prog_array slots.
    for (HandleId h : aux_handles) {
        e.close_handle(h);
    }
    e.close_map_handles(tid);
    return res;
}

} // namespace sfvm
