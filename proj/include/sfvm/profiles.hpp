// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Two-phase syscall profiles (initialization, serving) and the attack
// surface arithmetic that compares a phase-aware filter with a single
// allowlist of the union.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "sfvm/syscalls.hpp"

namespace sfvm {

inline constexpr int32_t kDefaultPhaseMarkerNr = 1000;

class ProfileError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using SyscallSet = std::set<int32_t>;

struct PhaseProfile {
    std::string name;
    SyscallSet s_init;
    SyscallSet s_serv;
    int32_t phase_marker_nr = kDefaultPhaseMarkerNr;

    [[nodiscard]] SyscallSet s_comm() const {
        SyscallSet out;
        std::set_intersection(s_init.begin(), s_init.end(), s_serv.begin(), s_serv.end(),
                              std::inserter(out, out.end()));
        return out;
    }

    [[nodiscard]] SyscallSet s_union() const {
        SyscallSet out = s_init;
        out.insert(s_serv.begin(), s_serv.end());
        return out;
    }

    /// Serving-phase calls that a union allowlist exposes during initialization.
    [[nodiscard]] SyscallSet serv_only() const {
        SyscallSet out;
        std::set_difference(s_serv.begin(), s_serv.end(), s_init.begin(), s_init.end(),
                            std::inserter(out, out.end()));
        return out;
    }
};

inline size_t union_size(const PhaseProfile& p) { return p.s_init.size() + p.s_serv.size() - p.s_comm().size(); }

/// Percentage of the union that the initialization phase no longer exposes.
inline double attack_surface_reduction(const PhaseProfile& p) {
    size_t u = union_size(p);
    if (u == 0) {
        return 0.0;
    }
    return static_cast<double>(u - p.s_init.size()) / static_cast<double>(u) * 100.0;
}

inline double round_to(double v, int digits) {
    double scale = std::pow(10.0, digits);
    return std::round(v * scale) / scale;
}

namespace profile_detail {

inline SyscallSet parse_set(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array()) {
        throw ProfileError(where + " must be an array");
    }
    SyscallSet out;
    for (const auto& v : j) {
        int32_t nr = 0;
        if (v.is_number_integer()) {
            int64_t n = v.get<int64_t>();
            if (n < 0 || n > 0xffff) {
                throw ProfileError(where + ": syscall number " + std::to_string(n) + " out of range");
            }
            nr = static_cast<int32_t>(n);
        } else if (v.is_string()) {
            try {
                nr = parse_syscall(v.get<std::string>());
            } catch (const std::exception& e) {
                throw ProfileError(where + ": " + e.what());
            }
        } else {
            throw ProfileError(where + ": entries must be syscall numbers or names");
        }
        if (!out.insert(nr).second) {
            throw ProfileError(where + ": duplicate syscall " + syscall_label(nr));
        }
    }
    return out;
}

} // namespace profile_detail

/// {"phase_marker_nr": 1000, "applications": [{"name", "s_init", "s_serv"}]}
inline std::vector<PhaseProfile> profiles_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("applications") || !j["applications"].is_array()) {
        throw ProfileError("profile file needs an 'applications' array");
    }
    int32_t marker = kDefaultPhaseMarkerNr;
    if (j.contains("phase_marker_nr")) {
        if (!j["phase_marker_nr"].is_number_integer()) {
            throw ProfileError("phase_marker_nr must be an integer");
        }
        marker = j["phase_marker_nr"].get<int32_t>();
    }
    std::vector<PhaseProfile> out;
    std::set<std::string> names;
    for (const auto& a : j["applications"]) {
        if (!a.is_object() || !a.contains("name") || !a["name"].is_string()) {
            throw ProfileError("each application needs a string 'name'");
        }
        PhaseProfile p;
        p.name = a["name"].get<std::string>();
        if (!names.insert(p.name).second) {
            throw ProfileError("duplicate application '" + p.name + "'");
        }
        if (!a.contains("s_init") || !a.contains("s_serv")) {
            throw ProfileError(p.name + ": needs 's_init' and 's_serv'");
        }
        p.s_init = profile_detail::parse_set(a["s_init"], p.name + ".s_init");
        p.s_serv = profile_detail::parse_set(a["s_serv"], p.name + ".s_serv");
        p.phase_marker_nr = marker;
        if (p.s_init.contains(marker) || p.s_serv.contains(marker)) {
            throw ProfileError(p.name + ": the phase marker must not be a member of either set");
        }
        out.push_back(std::move(p));
    }
    return out;
}

inline std::vector<PhaseProfile> load_profiles(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ProfileError("cannot open " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ProfileError(path + ": " + e.what());
    }
    return profiles_from_json(j);
}

} // namespace sfvm
