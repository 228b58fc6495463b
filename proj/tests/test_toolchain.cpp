// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#include <catch_amalgamated.hpp>

#include "sfvm/assembler.hpp"
#include "sfvm/program.hpp"
#include "sfvm/verifier.hpp"

using namespace sfvm;

namespace {

FilterProgram verified(std::string_view src) {
    auto p = assemble(src);
    auto rep = verify(p);
    INFO(rep.reason);
    REQUIRE(rep.accepted);
    return p;
}

VerifierReport rejected(std::string_view src) {
    auto p = assemble(src);
    auto rep = verify(p);
    CHECK_FALSE(rep.accepted);
    CHECK_FALSE(p.verified);
    return rep;
}

} // namespace

TEST_CASE("assemble minimal allow-all program", "[asm]") {
    auto p = assemble("section seccomp\n  ld_imm64 r0, 0x7fff0000\n  exit");
    REQUIRE(p.instructions.size() == 2);
    CHECK_FALSE(p.sleepable);
    CHECK(p.section_name == "seccomp");
    CHECK(p.instructions[0].opcode == Opcode::ld_imm64);
    CHECK(p.instructions[0].imm == 0x7fff0000);
    CHECK(p.instructions[1].opcode == Opcode::exit);
    CHECK_FALSE(p.verified);
}

TEST_CASE("sleepable section sets the flag", "[asm]") {
    auto p = assemble("section seccomp-sleepable\n  exit");
    CHECK(p.sleepable);
    CHECK(p.instructions.size() == 1);
}

TEST_CASE("assembler errors", "[asm]") {
    auto kind_of = [](std::string_view src) {
        try {
            (void)assemble(src);
        } catch (const AsmError& e) {
            return e.kind();
        }
        FAIL("expected an AsmError");
        return AsmError::Kind::syntax;
    };
    CHECK(kind_of("jmp missing_label") == AsmError::Kind::unresolved_label);
    CHECK(kind_of("frobnicate r0, 1") == AsmError::Kind::unknown_mnemonic);
    CHECK(kind_of("mov r11, 1") == AsmError::Kind::register_range);
    CHECK(kind_of("mov r0 1") == AsmError::Kind::syntax);
    CHECK(kind_of("section bogus") == AsmError::Kind::syntax);

    try {
        (void)assemble("exit\n  mov r0, 1, 2\n");
        FAIL("expected error");
    } catch (const AsmError& e) {
        CHECK(e.line() == 2);
        CHECK(e.column() >= 3);
    }
}

TEST_CASE("labels, comments and relative offsets", "[asm]") {
    auto p = assemble(R"(
        ; comment line
        section seccomp
        ld_ctx r2, nr          # symbolic field
        jeq r2, 39, allow
        ld_imm64 r0, 0x50001
        exit
    allow:
        ld_imm64 r0, 0x7fff0000
        exit
    )");
    REQUIRE(p.instructions.size() == 6);
    CHECK(p.instructions[1].offset == 2);
    CHECK(p.instructions[0].offset == 0);
    CHECK(p.instructions[0].imm == 4);

    auto q = assemble("ja +1\nexit\nmov r0, 0\nexit");
    CHECK(q.instructions[0].offset == 1);
}

TEST_CASE("disassemble round-trips", "[asm]") {
    SECTION("allow-all gives its two-line source") {
        auto p = assemble("section seccomp\n  ld_imm64 r0, 0x7fff0000\n  exit");
        auto text = disassemble(p);
        CHECK(text.find("ld_imm64 r0, 0x7fff0000") != std::string::npos);
        CHECK(text.find("exit") != std::string::npos);
        CHECK(assemble(text).instructions == p.instructions);
    }
    SECTION("empty program is an empty body under the section header") {
        FilterProgram empty;
        auto text = disassemble(empty);
        CHECK(text == "section seccomp\n");
        CHECK(assemble(text).instructions.empty());
    }
    SECTION("maps, helpers, context fields and stores") {
        auto src = R"(section seccomp-sleepable
map counts hash 8 8 16
map jt prog_array 4 4 8
    mov r6, r1
    ld_ctx r2, arg3
    st_map r10, r2, -8
    st_map r10, 7, -16
    mov r2, r10
    add r2, -8
    ld_imm64 r1, map:counts
    call map_lookup_elem
    jne r0, 0, hit
    ld_imm64 r0, 0
    tail_call r1, r0
hit:
    ld_map r3, r0, 0
    mov r1, 3
    mov r2, 4
    call wait_syscall
    ld_imm64 r0, -1
    exit
)";
        auto p = assemble(src);
        auto again = assemble(disassemble(p));
        CHECK(again.instructions == p.instructions);
        CHECK(again.map_refs == p.map_refs);
        CHECK(again.sleepable == p.sleepable);
    }
}

TEST_CASE("binary program format round-trips", "[asm]") {
    auto p = assemble("section seccomp-sleepable\nmap m array 4 8 4\nld_imm64 r0, map:m\nmov r0, -5\nexit\n");
    auto bytes = encode_program(p);
    CHECK(std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) == "SFVM");
    CHECK(load_le<uint16_t>(bytes, 4) == 1);
    auto q = decode_program(bytes);
    CHECK(q.instructions == p.instructions);
    CHECK(q.map_refs == p.map_refs);
    CHECK(q.sleepable);
    // Header + one map record + 3 fixed-width instruction records.
    CHECK(bytes.size() == 16 + (2 + 1 + 1 + 12) + 3 * 16);

    bytes.push_back(0);
    CHECK_THROWS_AS(decode_program(bytes), FormatError);
    bytes.pop_back();
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_program(bytes), FormatError);
}

TEST_CASE("verifier accepts the basic programs", "[verifier]") {
    auto p = verified("section seccomp\n  ld_imm64 r0, 0x7fff0000\n  exit");
    CHECK(p.verified);
    verified(R"(
        ld_ctx r2, nr
        jeq r2, 39, allow
        mov r0, 0x50001
        exit
    allow:
        mov r0, 0x7fff0000
        exit
    )");
}

TEST_CASE("verifier rejects context reads outside the record", "[verifier]") {
    auto rep = rejected("ld_ctx r0, 8, 64\nexit");
    CHECK(rep.reason.find("context read out of bounds") != std::string::npos);
    CHECK(rep.offending_instruction == 0u);
    CHECK(rejected("ld_ctx r0, 4, 62\nexit").reason.find("out of bounds") != std::string::npos);
    CHECK(rejected("ld_ctx r0, 4, 8\nexit").reason.find("misaligned") != std::string::npos);
    CHECK(rejected("ld_ctx r0, 2, 0\nexit").reason.find("misaligned") != std::string::npos);
    CHECK(rejected("ld_ctx r0, 8, 20\nexit").reason.find("misaligned") != std::string::npos);
    CHECK(rejected("ld_ctx r0, 8, -8\nexit").reason.find("out of bounds") != std::string::npos);
}

TEST_CASE("verifier rejects helpers outside the whitelist", "[verifier]") {
    CHECK(rejected("call 11\nmov r0, 0\nexit").reason.find("helper id 11") != std::string::npos);
    CHECK_FALSE(check_program(assemble("call 0\nmov r0, 0\nexit")).accepted);
    CHECK(rejected("mov r1, 1\nmov r2, 2\ncall wait_syscall\nexit").reason.find("sleepable") != std::string::npos);
    verified("section seccomp-sleepable\nmov r1, 1\nmov r2, 2\ncall wait_syscall\nexit");
}

TEST_CASE("verifier structural rules", "[verifier]") {
    SECTION("jump out of range") { CHECK(rejected("ja +5\nexit").reason.find("jump out of range") != std::string::npos); }
    SECTION("uninitialized register") {
        CHECK(rejected("exit").reason.find("uninitialized r0") != std::string::npos);
        CHECK(rejected("mov r0, r3\nexit").reason.find("uninitialized register r3") != std::string::npos);
        CHECK(rejected("mov r0, 1\ncall ktime_get_ns\nmov r0, r1\nexit").reason.find("r1") != std::string::npos);
    }
    SECTION("falls off the end") {
        CHECK(rejected("mov r0, 0").reason.find("falls off") != std::string::npos);
        CHECK(rejected("ld_ctx r1, nr\nmov r0, 0\njeq r1, 1, +1\nexit\nmov r0, 1").reason.find("falls off") != std::string::npos);
    }
    SECTION("empty program") { CHECK(rejected("").reason == "empty program"); }
    SECTION("instruction limit") {
        auto p = assemble("mov r0, 0\nmov r0, 0\nmov r0, 0\nexit");
        auto rep = check_program(p, VerifierConfig{3, 1000});
        CHECK_FALSE(rep.accepted);
        CHECK(rep.reason.find("limit is 3") != std::string::npos);
    }
    SECTION("r10 is read-only") { CHECK(rejected("mov r10, 0\nmov r0, 0\nexit").reason.find("read-only") != std::string::npos); }
    SECTION("tail_call needs a prog_array") {
        CHECK(rejected("map m array 4 8 4\nld_imm64 r2, map:m\nmov r3, 0\nmov r0, 0\ntail_call r2, r3")
                  .reason.find("prog_array") != std::string::npos);
        verified("map m prog_array 4 4 4\nld_imm64 r2, map:m\nmov r3, 0\nmov r0, 0\ntail_call r2, r3");
    }
    SECTION("pointer leaks and null checks") {
        CHECK_FALSE(check_program(assemble("mov r0, r10\nexit")).accepted);
        const char* lookup = R"(map m hash 8 8 4
            st_map r10, 1, -8
            mov r2, r10
            add r2, -8
            ld_imm64 r1, map:m
            call map_lookup_elem
            %s
            ld_map r0, r0, 0
            exit
        out:
            mov r0, 0
            exit)";
        char buf[512];
        std::snprintf(buf, sizeof buf, lookup, "");
        CHECK(rejected(buf).reason.find("null") != std::string::npos);
        std::snprintf(buf, sizeof buf, lookup, "jeq r0, 0, out");
        verified(buf);
    }
    SECTION("uninitialized stack and bounds") {
        CHECK(rejected("ld_map r0, r10, -8\nexit").reason.find("uninitialized stack") != std::string::npos);
        CHECK(rejected("st_map r10, 1, 0\nmov r0, 0\nexit").reason.find("out of bounds") != std::string::npos);
        CHECK(rejected("st_map r10, 1, -520\nmov r0, 0\nexit").reason.find("out of bounds") != std::string::npos);
        verified("st_map r10, 1, -512\nld_map r0, r10, -512\nexit");
    }
    SECTION("pointer arithmetic") {
        CHECK(rejected("ld_ctx r2, nr\nmov r3, r10\nadd r3, r2\nmov r0, 0\nexit").reason.find("non-constant") !=
              std::string::npos);
        CHECK(rejected("mov r3, r1\nadd r3, 8\nmov r0, 0\nexit").reason.find("ctx") != std::string::npos);
    }
}

TEST_CASE("verifier loop handling", "[verifier]") {
    SECTION("bounded loop with constant counter is accepted") {
        verified(R"(
            mov r2, 0
        loop:
            add r2, 1
            jlt r2, 100, loop
            mov r0, 0
            exit
        )");
    }
    SECTION("self-loop is rejected") { CHECK(rejected("mov r0, 0\nl: ja l\nexit").reason.find("loop") != std::string::npos); }
    SECTION("loop bounded only by an unknown value is rejected") {
        auto rep = rejected(R"(
            ld_ctx r3, arg0
            mov r2, 0
        loop:
            add r2, 1
            jlt r2, r3, loop
            mov r0, 0
            exit
        )");
        CHECK(rep.reason.find("budget") != std::string::npos);
    }
    SECTION("step budget is configurable") {
        auto p = assemble("mov r2, 0\nloop: add r2, 1\njlt r2, 1000, loop\nmov r0, 0\nexit");
        CHECK(check_program(p).accepted);
        CHECK_FALSE(check_program(p, VerifierConfig{100000, 500}).accepted);
    }
}

TEST_CASE("verifier is deterministic and annotates instructions", "[verifier]") {
    auto p = assemble("ld_ctx r2, nr\njeq r2, 1, +2\nmov r0, 0\nexit\nmov r0, 1\nexit\nmov r0, 2\nexit");
    auto a = check_program(p);
    auto b = check_program(p);
    CHECK(a == b);
    REQUIRE(a.notes.size() == p.instructions.size());
    CHECK(a.notes[6] == "unreachable");
    CHECK(a.notes[0] == "visits=1");
}
