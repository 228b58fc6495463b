// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Filter return values and chain resolution.
//
// Raw values follow the Linux seccomp encoding: the upper 16 bits select the
// action, the lower 16 bits carry action data (the errno for ERRNO).

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sfvm {

enum class ActionKind : uint8_t {
    allow,
    log,
    errno_,
    trap,
    kill_thread,
    kill_process,
};

namespace raw_action {
inline constexpr uint32_t kill_process = 0x80000000U;
inline constexpr uint32_t kill_thread = 0x00000000U;
inline constexpr uint32_t trap = 0x00030000U;
inline constexpr uint32_t errno_base = 0x00050000U;
inline constexpr uint32_t log = 0x7ffc0000U;
inline constexpr uint32_t allow = 0x7fff0000U;
inline constexpr uint32_t action_mask = 0xffff0000U;
inline constexpr uint32_t data_mask = 0x0000ffffU;

constexpr uint32_t errno_(uint16_t code) { return errno_base | code; }
} // namespace raw_action

inline constexpr uint16_t kEperm = 1;

/// Higher value wins: KILL_PROCESS > KILL_THREAD > TRAP > ERRNO > LOG > ALLOW.
constexpr int precedence(ActionKind k) { return static_cast<int>(k); }

struct ResolvedAction {
    ActionKind kind = ActionKind::allow;
    uint32_t raw = raw_action::allow;

    [[nodiscard]] uint16_t data() const { return static_cast<uint16_t>(raw & raw_action::data_mask); }

    friend bool operator==(const ResolvedAction&, const ResolvedAction&) = default;
};

// Unrecognised actions (including TRACE and USER_NOTIF, which this engine
// does not model) decode as KILL_PROCESS, the most restrictive outcome.
constexpr ActionKind classify(uint32_t raw) {
    switch (raw & raw_action::action_mask) {
    case raw_action::kill_process: return ActionKind::kill_process;
    case raw_action::kill_thread: return ActionKind::kill_thread;
    case raw_action::trap: return ActionKind::trap;
    case raw_action::errno_base: return ActionKind::errno_;
    case raw_action::log: return ActionKind::log;
    case raw_action::allow: return ActionKind::allow;
    default: return ActionKind::kill_process;
    }
}

inline ResolvedAction decode_action(uint32_t raw) { return {classify(raw), raw}; }

inline ResolvedAction make_action(ActionKind kind, uint16_t data = 0) {
    switch (kind) {
    case ActionKind::allow: return {kind, raw_action::allow};
    case ActionKind::log: return {kind, raw_action::log};
    case ActionKind::errno_: return {kind, raw_action::errno_(data)};
    case ActionKind::trap: return {kind, raw_action::trap | data};
    case ActionKind::kill_thread: return {kind, raw_action::kill_thread};
    case ActionKind::kill_process: return {kind, raw_action::kill_process};
    }
    return {ActionKind::kill_process, raw_action::kill_process};
}

inline const char* action_name(ActionKind k) {
    switch (k) {
    case ActionKind::allow: return "ALLOW";
    case ActionKind::log: return "LOG";
    case ActionKind::errno_: return "ERRNO";
    case ActionKind::trap: return "TRAP";
    case ActionKind::kill_thread: return "KILL_THREAD";
    case ActionKind::kill_process: return "KILL_PROCESS";
    }
    return "?";
}

inline std::optional<ActionKind> parse_action_name(std::string_view s) {
    for (auto k : {ActionKind::allow, ActionKind::log, ActionKind::errno_, ActionKind::trap, ActionKind::kill_thread,
                   ActionKind::kill_process}) {
        if (s == action_name(k)) {
            return k;
        }
    }
    return std::nullopt;
}

inline std::string describe(const ResolvedAction& a) {
    std::string s = action_name(a.kind);
    if (a.kind == ActionKind::errno_ || a.kind == ActionKind::trap) {
        s += "(" + std::to_string(a.data()) + ")";
    }
    return s;
}

/// Chain result: the highest-precedence vote. Ties go to the lowest index
/// (earliest-installed filter), which is what decides which errno is reported.
inline ResolvedAction resolve(std::span<const ResolvedAction> votes) {
    if (votes.empty()) {
        return make_action(ActionKind::allow);
    }
    ResolvedAction best = votes.front();
    for (const auto& v : votes.subspan(1)) {
        if (precedence(v.kind) > precedence(best.kind)) {
            best = v;
        }
    }
    return best;
}

} // namespace sfvm
