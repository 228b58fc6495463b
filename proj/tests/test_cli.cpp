// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "sfvm/sfvm.hpp"

using namespace sfvm;
namespace fs = std::filesystem;

namespace {

const fs::path kData = SFVM_DATA_DIR;
const fs::path kSamples = fs::path(SFVM_DATA_DIR).parent_path() / "samples";

fs::path scratch_dir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("sfvm_cli_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

fs::path write_file(const std::string& name, const std::string& text) {
    auto p = scratch_dir() / name;
    std::ofstream(p) << text;
    return p;
}

int cli(const std::string& args) {
    std::string cmd = std::string(SFVM_CLI_PATH) + " --data-dir " + kData.string() + " " + args + " >" +
                      (scratch_dir() / "stdout.txt").string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string cli_output() {
    std::ifstream in(scratch_dir() / "stdout.txt");
    return {std::istreambuf_iterator<char>(in), {}};
}

PhaseProfile profile(std::string name, SyscallSet init, SyscallSet serv) {
    PhaseProfile p;
    p.name = std::move(name);
    p.s_init = std::move(init);
    p.s_serv = std::move(serv);
    return p;
}

} // namespace

TEST_CASE("action expressions", "[scenario]") {
    CHECK(parse_action("ALLOW") == make_action(ActionKind::allow));
    CHECK(parse_action("ERRNO") == make_action(ActionKind::errno_, kEperm));
    CHECK(parse_action("ERRNO(13)") == make_action(ActionKind::errno_, 13));
    CHECK(parse_action("TRAP(0x2)") == make_action(ActionKind::trap, 2));
    CHECK_THROWS_AS(parse_action("ERRNO(70000)"), ScenarioError);
    CHECK_THROWS_AS(parse_action("PERMIT"), ScenarioError);
    CHECK_THROWS_AS(parse_action("ERRNO(1"), ScenarioError);
    CHECK(action_matches(make_action(ActionKind::errno_, 13), "ERRNO"));
    CHECK_FALSE(action_matches(make_action(ActionKind::errno_, 13), "ERRNO(1)"));
    CHECK_FALSE(action_matches(make_action(ActionKind::allow), "LOG"));
}

TEST_CASE("generator specs build verified bundles", "[scenario]") {
    using nlohmann::json;
    auto b = generate_filter("k", json::parse(R"j({"generator":"count_limit",
        "spec":{"nr":"keyctl","arg_index":0,"arg_value":1,"max_count":2,"deny":"ERRNO(13)"}})j"));
    CHECK(b.name == "k");
    CHECK(b.main.verified);
    CHECK(disassemble(b.main).find("0x5000d") != std::string::npos);

    auto d = generate_filter("d", json::parse(R"({"generator":"draco",
        "spec":{"checks":{"openat":[{"arg":2,"allowed":[0,"0x80000"]}]}}})"));
    CHECK(d.aux.size() == 1);

    CHECK_THROWS_WITH(generate_filter("x", json::parse(R"({"generator":"magic"})")),
                      Catch::Matchers::ContainsSubstring("unknown generator"));
    CHECK_THROWS_WITH(generate_filter("x", json::parse(R"({"generator":"count_limit","spec":{"nr":"keyctl"}})")),
                      Catch::Matchers::ContainsSubstring("max_count"));
    CHECK_THROWS_WITH(generate_filter("x", json::parse(R"({"generator":"allowlist","spec":{"syscalls":["nosuch"]}})")),
                      Catch::Matchers::ContainsSubstring("filter 'x'"));
    CHECK_THROWS_AS(generate_filter("x", json::parse(R"({"generator":"sfip","spec":{"syscalls":["read"],
        "transitions":[["read","write"]]}})")),
                    ScenarioError);
}

TEST_CASE("filters load from assembly, specs and the binary encoding", "[scenario]") {
    auto text = load_filter(kSamples / "keyctl_join_twice.s");
    CHECK(text.name == "keyctl_join_twice");
    auto bin = scratch_dir() / "keyctl.prog";
    {
        auto bytes = encode_program(text.main);
        std::ofstream(bin, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                   static_cast<std::streamsize>(bytes.size()));
    }
    auto decoded = load_filter(bin);
    CHECK(decoded.name == "keyctl");
    CHECK(disassemble(decoded.main) == disassemble(text.main));

    auto spec = load_filter(kSamples / "sfip_applet.json");
    CHECK(spec.name == "applet-flow");
    CHECK(spec.main.verified);

    CHECK_THROWS_AS(load_filter(scratch_dir() / "missing.s"), ScenarioError);
    CHECK_THROWS_AS(load_filter(write_file("junk.prog", "not a program")), ScenarioError);
}

TEST_CASE("one bundled scenario per evaluated vulnerability, all passing", "[scenario]") {
    auto scenarios = load_scenarios(kData / "scenarios");
    std::map<std::string, std::string> mitigation;
    for (const auto& s : scenarios) {
        CHECK(mitigation.emplace(s.reference, s.mitigation).second);
    }
    const std::map<std::string, std::string> expected{
        {"CVE-2016-0728", "count_limit"},    {"CVE-2019-11487", "count_limit"},  {"CVE-2017-5123", "count_limit"},
        {"BusyBox bug 9071", "sfip"},        {"CVE-2018-18281", "serialization"}, {"CVE-2016-5195", "serialization"},
        {"CVE-2017-7533", "serialization"}};
    CHECK(mitigation == expected);

    for (const auto& s : scenarios) {
        INFO(s.name);
        auto r = run_scenario(s);
        CHECK_FALSE(r.error.has_value());
        for (const auto& c : r.checks) {
            INFO(c.kind << ": " << c.detail);
            CHECK(c.passed);
        }
        CHECK(r.passed);
        if (s.explore) {
            CHECK(r.schedules > 1);
        }
    }
}

TEST_CASE("scenario reports are identical across runs", "[scenario]") {
    auto scenarios = load_scenarios(kData / "scenarios");
    std::vector<ScenarioResult> a, b;
    for (const auto& s : scenarios) {
        a.push_back(run_scenario(s));
        b.push_back(run_scenario(s));
    }
    CHECK(scenarios_report(a).dump() == scenarios_report(b).dump());
}

TEST_CASE("a failing expectation fails the scenario without an error", "[scenario]") {
    auto s = load_scenario(kData / "scenarios" / "cve-2016-0728.json");
    s.checks.front().params["actions"] = {"ALLOW", "ALLOW", "ALLOW", "ALLOW", "ALLOW"};
    auto r = run_scenario(s);
    CHECK_FALSE(r.passed);
    CHECK_FALSE(r.error.has_value());
    CHECK(r.checks.front().detail.find("ERRNO(1)") != std::string::npos);

    s.trace = kData / "traces" / "missing.jsonl";
    auto e = run_scenario(s);
    CHECK_FALSE(e.passed);
    CHECK(e.error.has_value());
}

TEST_CASE("scenario files are validated", "[scenario]") {
    using nlohmann::json;
    auto base = json::parse(R"({"name":"t","trace":"x.jsonl","filters":{},
        "expect":[{"check":"no_deadlock"}]})");
    CHECK_NOTHROW(scenario_from_json(base, "."));
    auto bad = base;
    bad["mode"] = "sometimes";
    CHECK_THROWS_AS(scenario_from_json(bad, "."), ScenarioError);
    bad = base;
    bad["expect"] = json::array({{{"check", "vibes"}}});
    CHECK_THROWS_AS(scenario_from_json(bad, "."), ScenarioError);
    bad = base;
    bad["expect"] = json::array();
    CHECK_THROWS_AS(scenario_from_json(bad, "."), ScenarioError);
    bad = base;
    bad.erase("trace");
    CHECK_THROWS_AS(scenario_from_json(bad, "."), ScenarioError);
}

TEST_CASE("bundled descriptor file matches the built-in table", "[scenario][snapshot]") {
    auto file = DescriptorTable::load((kData / "descriptors.json").string());
    auto builtin = DescriptorTable::defaults();
    REQUIRE(file.size() == builtin.size());
    for (int32_t nr = 0; nr < 512; ++nr) {
        const auto* a = file.find(nr);
        const auto* b = builtin.find(nr);
        REQUIRE((a == nullptr) == (b == nullptr));
        if (a) {
            INFO(syscall_label(nr));
            CHECK(a->args == b->args);
        }
    }
}

TEST_CASE("attack surface rows", "[report]") {
    auto same = surface_row(profile("same", {0, 1, 2}, {0, 1, 2}));
    CHECK(same.union_size == 3);
    CHECK(same.reduction_pct == 0.0);
    CHECK(same.warnings.empty());

    auto empty_serv = surface_row(profile("init-only", {0, 1, 2, 3}, {}));
    CHECK(empty_serv.union_size == 4);
    CHECK(empty_serv.reduction_pct == 0.0);
    REQUIRE(empty_serv.warnings.size() == 1);
    CHECK(empty_serv.warnings.front().find("empty serving set") != std::string::npos);

    auto disjoint = surface_row(profile("disjoint", {0}, {1, 2, 3}));
    CHECK(disjoint.s_comm == 0);
    CHECK(disjoint.reduction_pct == 75.0);

    auto text = format_attack_surface({same, empty_serv});
    CHECK(text.find("init-only") != std::string::npos);
    CHECK(text.find("warning: empty serving set") != std::string::npos);

    auto j = attack_surface_report({disjoint});
    CHECK(j["kind"] == "attack_surface");
    CHECK(j["rows"][0]["union"] == 4);
}

TEST_CASE("bundled profiles reproduce the published table", "[report]") {
    struct Row {
        const char* app;
        size_t init, serv, comm, uni;
        double pct;
    };
    const Row table[] = {{"HTTPD", 71, 83, 47, 107, 33.6},    {"NGINX", 52, 93, 36, 109, 52.3},
                         {"Lighttpd", 46, 78, 25, 99, 53.5},  {"Memcached", 45, 83, 27, 101, 55.4},
                         {"Redis", 42, 84, 33, 93, 54.8},     {"Bind", 75, 113, 53, 135, 44.4}};
    auto rows = attack_surface_table(load_profiles((kData / "profiles" / "six_apps.json").string()));
    REQUIRE(rows.size() == 6);
    for (size_t i = 0; i < 6; ++i) {
        INFO(table[i].app);
        CHECK(rows[i].application == table[i].app);
        CHECK(rows[i].s_init == table[i].init);
        CHECK(rows[i].s_serv == table[i].serv);
        CHECK(rows[i].s_comm == table[i].comm);
        CHECK(rows[i].union_size == table[i].uni);
        CHECK(rows[i].reduction_pct == Catch::Approx(table[i].pct).margin(0.05));
    }
}

TEST_CASE("exit codes", "[cli]") {
    CHECK(cli("report attack-surface") == 0);
    CHECK(cli_output().find("Memcached") != std::string::npos);
    CHECK(cli("verify " + (kSamples / "allow_stdio.s").string()) == 0);

    CHECK(cli("verify " + (kSamples / "ctx_oob.s").string()) == 1);
    CHECK(cli_output().find("out of bounds") != std::string::npos);
    CHECK(cli("verify " + (kSamples / "missing_null_check.s").string() + " --json") == 1);
    CHECK(nlohmann::json::parse(cli_output())["accepted"] == false);

    CHECK(cli("scenario cve-2016-0728") == 0);
    CHECK(cli("scenario --list") == 0);
    CHECK(cli("scenario no-such-cve") == 2);
    CHECK(cli("scenario") == 2);

    auto trace = (kData / "traces" / "cve-2018-18281.jsonl").string();
    auto serialize =
        write_file("serialize.json", R"({"generator":"serialization","spec":{"pairs":[["mremap","ftruncate"]]}})").string();
    CHECK(cli("explore --trace " + trace + " --filter " + serialize + " --max-steps 20") == 2);
    CHECK(cli_output().find("exploration bound exceeded") != std::string::npos);
    CHECK(cli("explore --trace " + trace + " --filter " + serialize + " --max-steps 14 --report " +
              (scratch_dir() / "e.json").string()) == 0);
    CHECK(nlohmann::json::parse(std::ifstream(scratch_dir() / "e.json"))["overlaps"].empty());

    CHECK(cli("frobnicate") == 2);
    CHECK(cli("verify " + (scratch_dir() / "nope.s").string()) == 2);
    CHECK(cli("asm " + write_file("bad.s", "mov r0,\nexit\n").string() + " -o " +
              (scratch_dir() / "bad.prog").string()) == 2);
    CHECK(cli("run --trace " + write_file("bad.jsonl", "{\"ev\":\"teleport\",\"tid\":1}\n").string()) == 2);
    CHECK(cli_output().find("trace line 1") != std::string::npos);
    CHECK(cli("--protection sometimes scenario --all") == 2);
}

TEST_CASE("asm output runs through the engine", "[cli]") {
    auto prog = scratch_dir() / "join.prog";
    REQUIRE(cli("asm " + (kSamples / "keyctl_join_twice.s").string() + " -o " + prog.string()) == 0);
    auto trace = write_file("join.jsonl", R"({"ev":"spawn","tid":1,"child":2}
{"ev":"set_nnp","tid":2}
{"ev":"install","tid":2,"filter":"join"}
{"ev":"syscall_enter","tid":2,"nr":"keyctl","args":[1]}
{"ev":"syscall_exit","tid":2,"nr":"keyctl"}
{"ev":"syscall_enter","tid":2,"nr":"keyctl","args":[1]}
{"ev":"syscall_exit","tid":2,"nr":"keyctl"}
{"ev":"syscall_enter","tid":2,"nr":"keyctl","args":[1]}
{"ev":"syscall_exit","tid":2,"nr":"keyctl"}
)");
    REQUIRE(cli("run --trace " + trace.string() + " --filter " + prog.string()) == 0);
    auto j = nlohmann::json::parse(cli_output());
    CHECK(j["kind"] == "run");
    REQUIRE(j["log"]["decisions"].size() == 3);
    CHECK(j["log"]["decisions"][1]["action"] == "ALLOW");
    CHECK(j["log"]["decisions"][2]["action"] == "ERRNO");
    CHECK(j["summary"]["decisions"] == 3);

    // A filter under another name would leave the trace unfiltered.
    auto other = scratch_dir() / "other.prog";
    std::filesystem::copy_file(prog, other, std::filesystem::copy_options::overwrite_existing);
    CHECK(cli("run --trace " + trace.string() + " --filter " + other.string()) == 2);
    CHECK(cli_output().find("'join'") != std::string::npos);
    CHECK(cli("explore --trace " + trace.string() + " --filter " + other.string()) == 2);
}

TEST_CASE("a deadlocked run exits 1", "[cli]") {
    auto filter = write_file("serialize.s", R"(section seccomp-sleepable
    ld_ctx r6, nr
    jeq r6, 25, mremap
    jeq r6, 77, ftruncate
    ja done
mremap:
    mov r1, 25
    mov r2, 77
    call wait_syscall
    ja done
ftruncate:
    mov r1, 77
    mov r2, 25
    call wait_syscall
done:
    ld_imm64 r0, 0x7fff0000
    exit
)");
    auto trace = write_file("deadlock.jsonl", R"({"ev":"install","tid":1,"filter":"serialize"}
{"ev":"spawn","tid":1,"child":2}
{"ev":"spawn","tid":1,"child":3}
{"ev":"spawn_thread","tid":2,"child":4}
{"ev":"syscall_enter","tid":2,"nr":"mremap"}
{"ev":"syscall_enter","tid":4,"nr":"ftruncate"}
{"ev":"syscall_enter","tid":3,"nr":"mremap"}
{"ev":"syscall_exit","tid":2,"nr":"mremap"}
{"ev":"syscall_exit","tid":4,"nr":"ftruncate"}
{"ev":"syscall_exit","tid":3,"nr":"mremap"}
)");
    auto report = scratch_dir() / "deadlock.json";
    CHECK(cli("run --trace " + trace.string() + " --filter " + filter.string() + " --report " + report.string()) == 1);
    CHECK(cli_output().find("deadlock") != std::string::npos);
    std::ifstream in(report);
    auto j = nlohmann::json::parse(in);
    CHECK(j["summary"]["deadlocks"] == 1);
    CHECK_FALSE(j["log"]["deadlocks"][0]["cycle"].empty());
}

TEST_CASE("SFVM_PRIVILEGED_ONLY refuses unprivileged installs", "[cli]") {
    auto trace = write_file("unpriv.jsonl", R"({"ev":"spawn","tid":1,"child":2}
{"ev":"set_caps","tid":2,"uid":1000}
{"ev":"set_nnp","tid":2}
{"ev":"install","tid":2,"filter":"allow_stdio"}
{"ev":"syscall_enter","tid":2,"nr":"getpid"}
{"ev":"syscall_exit","tid":2,"nr":"getpid"}
)");
    auto args = "run --trace " + trace.string() + " --filter " + (kSamples / "allow_stdio.s").string();
    REQUIRE(cli(args) == 0);
    auto open = nlohmann::json::parse(cli_output());
    CHECK(open["log"]["decisions"][0]["action"] == "ERRNO");

    REQUIRE(std::system(("SFVM_PRIVILEGED_ONLY=1 " + std::string(SFVM_CLI_PATH) + " " + args + " >" +
                         (scratch_dir() / "stdout.txt").string())
                            .c_str()) == 0);
    auto locked = nlohmann::json::parse(cli_output());
    CHECK(locked["log"]["decisions"][0]["action"] == "ALLOW");
    bool refused = false;
    for (const auto& e : locked["log"]["events"]) {
        refused = refused || (e["ev"] == "install" && e["status"] != "ok");
    }
    CHECK(refused);
}
