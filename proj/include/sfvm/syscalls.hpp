// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// x86_64 syscall numbers for the names used by bundled policies, traces and
// scenarios. Anything else can be given numerically.

#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace sfvm {

inline constexpr uint32_t kAuditArchX86_64 = 0xc000003eU;
/// Largest syscall number swept by policy-equivalence checks (inclusive).
inline constexpr int32_t kMaxSyscallNr = 450;

namespace detail {
inline constexpr std::array<std::pair<std::string_view, int32_t>, 48> kSyscallNames{{
    {"read", 0},           {"write", 1},        {"open", 2},        {"close", 3},
    {"stat", 4},           {"fstat", 5},        {"poll", 7},        {"lseek", 8},
    {"mmap", 9},           {"mprotect", 10},    {"munmap", 11},     {"brk", 12},
    {"rt_sigaction", 13},  {"ioctl", 16},       {"pread64", 17},    {"writev", 20},
    {"mremap", 25},        {"madvise", 28},     {"getpid", 39},     {"sendfile", 40},
    {"socket", 41},        {"connect", 42},     {"accept", 43},     {"sendto", 44},
    {"recvfrom", 45},      {"bind", 49},        {"listen", 50},     {"clone", 56},
    {"fork", 57},          {"execve", 59},      {"exit", 60},       {"wait4", 61},
    {"fcntl", 72},         {"ftruncate", 77},   {"rename", 82},     {"getuid", 102},
    {"ptrace", 101},       {"getppid", 110},    {"io_setup", 206},  {"io_submit", 209},
    {"exit_group", 231},   {"epoll_wait", 232}, {"waitid", 247},    {"add_key", 248},
    {"keyctl", 250},       {"inotify_add_watch", 254}, {"openat", 257}, {"accept4", 288},
}};
} // namespace detail

inline std::optional<int32_t> syscall_number(std::string_view name) {
    for (const auto& [n, nr] : detail::kSyscallNames) {
        if (n == name) {
            return nr;
        }
    }
    return std::nullopt;
}

inline std::optional<std::string_view> syscall_name(int32_t nr) {
    for (const auto& [n, v] : detail::kSyscallNames) {
        if (v == nr) {
            return n;
        }
    }
    return std::nullopt;
}

/// Accepts a known name or a decimal number.
inline int32_t parse_syscall(std::string_view text) {
    if (auto nr = syscall_number(text)) {
        return *nr;
    }
    if (!text.empty() && (std::isdigit(static_cast<unsigned char>(text[0])) || text[0] == '-')) {
        return static_cast<int32_t>(std::stol(std::string(text)));
    }
    throw std::invalid_argument("unknown syscall '" + std::string(text) + "'");
}

inline std::string syscall_label(int32_t nr) {
    if (auto n = syscall_name(nr)) {
        return std::string(*n);
    }
    return std::to_string(nr);
}

} // namespace sfvm
