// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Deterministic multi-task simulator. Each task owns the queue of its trace
// events (spawns belong to the parent). A scheduler step lets one runnable
// task execute its next event, or retry the event it is blocked on.

#include <algorithm>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "sfvm/action.hpp"
#include "sfvm/bundle.hpp"
#include "sfvm/engine.hpp"
#include "sfvm/isa.hpp"
#include "sfvm/syscalls.hpp"
#include "sfvm/trace.hpp"

namespace sfvm {

// ---------------------------------------------------------------------------
// Decision log

struct FilterRecord {
    size_t chain_index = 0;
    uint32_t raw = 0;
    uint64_t steps = 0;
    std::array<uint64_t, kNumHelpers> helper_calls{};
    uint32_t tail_calls = 0;
    std::optional<std::string> faulted;

    friend bool operator==(const FilterRecord&, const FilterRecord&) = default;
};

struct DecisionRecord {
    uint64_t step = 0;
    Tid tid = 0;
    int32_t nr = 0;
    ResolvedAction action;
    std::vector<FilterRecord> filters;
    uint64_t steps_executed = 0;
    bool waited = false; // the entry blocked at least once

    /// Equality ignoring the global step index.
    [[nodiscard]] bool same_decision(const DecisionRecord& o) const {
        return tid == o.tid && nr == o.nr && action == o.action && filters == o.filters &&
               steps_executed == o.steps_executed && waited == o.waited;
    }
};

struct EventRecord {
    uint64_t step = 0;
    Tid tid = 0;
    std::string ev;
    std::string status;
    std::string detail;
};

struct BlockedTask {
    Tid tid = 0;
    std::string reason; // "wait_syscall", "write_stall" or "not_spawned"
    int64_t nr = 0;
    int64_t target_nr = 0;
    uint64_t addr = 0;
    std::vector<Tid> waits_for;
};

struct DeadlockReport {
    uint64_t step = 0;
    std::vector<BlockedTask> blocked;
    std::vector<Tid> cycle;
};

struct DecisionLog {
    std::vector<DecisionRecord> decisions;
    std::vector<EventRecord> events;
    std::vector<DeadlockReport> deadlocks;
    uint64_t stalls = 0;      // user writes that hit a write-protected page
    uint64_t blocked_entries = 0;
    uint64_t skipped = 0;     // events of tasks that died
    std::set<std::pair<int32_t, int32_t>> overlaps;
    std::vector<Tid> schedule;
    std::vector<Tid> killed;

    [[nodiscard]] uint64_t total_steps_executed() const {
        uint64_t n = 0;
        for (const auto& d : decisions) {
            n += d.steps_executed;
        }
        return n;
    }

    [[nodiscard]] bool overlapped(int32_t a, int32_t b) const {
        return overlaps.contains({std::min(a, b), std::max(a, b)});
    }

    [[nodiscard]] nlohmann::json to_json() const {
        using nlohmann::json;
        json j;
        j["decisions"] = json::array();
        for (const auto& d : decisions) {
            json filters = json::array();
            for (const auto& f : d.filters) {
                json helpers = json::object();
                for (size_t i = 0; i < kNumHelpers; ++i) {
                    if (f.helper_calls[i]) {
                        helpers[std::string(kHelpers[i].name)] = f.helper_calls[i];
                    }
                }
                json fj = {{"index", f.chain_index},
                           {"raw", f.raw},
                           {"action", describe(decode_action(f.raw))},
                           {"steps", f.steps},
                           {"helper_calls", helpers},
                           {"tail_calls", f.tail_calls}};
                fj["faulted"] = f.faulted ? json(*f.faulted) : json(nullptr);
                filters.push_back(std::move(fj));
            }
            j["decisions"].push_back({{"step", d.step},
                                      {"tid", d.tid},
                                      {"nr", d.nr},
                                      {"syscall", syscall_label(d.nr)},
                                      {"action", action_name(d.action.kind)},
                                      {"raw", d.action.raw},
                                      {"errno", d.action.kind == ActionKind::errno_ ? json(d.action.data()) : json(nullptr)},
                                      {"filters", filters},
                                      {"steps_executed", d.steps_executed},
                                      {"waited", d.waited}});
        }
        j["events"] = json::array();
        for (const auto& e : events) {
            j["events"].push_back(
                {{"step", e.step}, {"tid", e.tid}, {"ev", e.ev}, {"status", e.status}, {"detail", e.detail}});
        }
        j["deadlocks"] = json::array();
        for (const auto& d : deadlocks) {
            json blocked = json::array();
            for (const auto& b : d.blocked) {
                blocked.push_back({{"tid", b.tid},
                                   {"reason", b.reason},
                                   {"nr", b.nr},
                                   {"target_nr", b.target_nr},
                                   {"addr", b.addr},
                                   {"waits_for", b.waits_for}});
            }
            j["deadlocks"].push_back({{"step", d.step}, {"blocked", blocked}, {"cycle", d.cycle}});
        }
        j["stalls"] = stalls;
        j["blocked_entries"] = blocked_entries;
        j["skipped_events"] = skipped;
        j["overlaps"] = json::array();
        for (const auto& [a, b] : overlaps) {
            j["overlaps"].push_back({a, b});
        }
        j["schedule"] = schedule;
        j["killed"] = killed;
        j["total_steps_executed"] = total_steps_executed();
        return j;
    }

    [[nodiscard]] uint64_t digest() const { return fnv1a(to_json().dump()); }
};

// ---------------------------------------------------------------------------
// Schedules

struct Schedule {
    enum class Mode : uint8_t { trace_order, seeded, explicit_choices } mode = Mode::trace_order;
    uint64_t seed = 0;
    std::vector<Tid> choices;

    static Schedule trace_order() { return {}; }
    static Schedule seeded(uint64_t s) { return {Mode::seeded, s, {}}; }
    static Schedule explicit_list(std::vector<Tid> c) { return {Mode::explicit_choices, 0, std::move(c)}; }

    /// "trace", "seed:<n>" or a comma separated list of tids.
    static Schedule parse(std::string_view s) {
        if (s.empty() || s == "trace") {
            return trace_order();
        }
        if (s.starts_with("seed:")) {
            return seeded(std::stoull(std::string(s.substr(5))));
        }
        std::vector<Tid> c;
        size_t pos = 0;
        while (pos <= s.size()) {
            size_t comma = s.find(',', pos);
            if (comma == std::string_view::npos) {
                comma = s.size();
            }
            c.push_back(std::stoull(std::string(s.substr(pos, comma - pos))));
            pos = comma + 1;
        }
        return explicit_list(std::move(c));
    }
};

class ScheduleError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Simulator

using BundleRegistry = std::map<std::string, PolicyBundle>;

class Simulator {
  public:
    Simulator(Engine engine, std::vector<TraceEvent> events, BundleRegistry bundles = {})
        : engine_(std::move(engine)),
          events_(std::make_shared<const std::vector<TraceEvent>>(std::move(events))),
          bundles_(std::make_shared<const BundleRegistry>(std::move(bundles))) {
        for (size_t i = 0; i < events_->size(); ++i) {
            queues_[(*events_)[i].tid].push_back(i);
        }
    }

    [[nodiscard]] const Engine& engine() const { return engine_; }
    Engine& engine() { return engine_; }
    [[nodiscard]] const DecisionLog& log() const { return log_; }
    [[nodiscard]] uint64_t steps() const { return step_; }
    [[nodiscard]] const std::vector<TraceEvent>& events() const { return *events_; }

    [[nodiscard]] bool finished() const {
        return std::all_of(queues_.begin(), queues_.end(), [](const auto& q) { return q.second.empty(); });
    }

    [[nodiscard]] size_t pending_events() const {
        size_t n = 0;
        for (const auto& [t, q] : queues_) {
            n += q.size();
        }
        return n;
    }

    /// Index of the next event of `tid`, if any.
    [[nodiscard]] std::optional<size_t> head(Tid tid) const {
        auto it = queues_.find(tid);
        if (it == queues_.end() || it->second.empty()) {
            return std::nullopt;
        }
        return it->second.front();
    }

    /// True if no task is between syscall entry and exit.
    [[nodiscard]] bool quiescent() const {
        for (const auto& [tid, t] : engine_.tasks()) {
            if (t.alive && t.sys) {
                return false;
            }
        }
        return std::none_of(actors_.begin(), actors_.end(), [](const auto& a) { return a.second.stalled; });
    }

    [[nodiscard]] std::vector<Tid> runnable() {
        purge_dead();
        std::vector<Tid> out;
        for (const auto& [tid, q] : queues_) {
            if (!q.empty() && can_step(tid)) {
                out.push_back(tid);
            }
        }
        return out;
    }

    /// Executes one scheduler step for `tid`.
    void step(Tid tid) {
        if (!can_step(tid)) {
            throw ScheduleError("task " + std::to_string(tid) + " is not runnable at step " + std::to_string(step_));
        }
        ++step_;
        log_.schedule.push_back(tid);
        Actor& a = actors_[tid];
        const TraceEvent& ev = (*events_)[queues_[tid].front()];
        if (!a.started) {
            a.started = true;
            engine_.advance_clock(ev.dt_ns);
        }
        bool done = execute(ev, a);
        if (done) {
            queues_[tid].pop_front();
            a = Actor{};
        }
        note_overlaps();
        note_kills();
    }

    /// Runs under `sched` until every queue drains or nothing can run.
    const DecisionLog& run(const Schedule& sched = Schedule::trace_order(),
                           std::optional<uint64_t> max_steps = std::nullopt) {
        std::mt19937_64 rng(sched.seed);
        size_t choice = 0;
        while (!max_steps || step_ < *max_steps) {
            auto ready = runnable();
            if (ready.empty()) {
                if (!finished()) {
                    report_deadlock();
                }
                break;
            }
            Tid pick = 0;
            switch (sched.mode) {
            case Schedule::Mode::trace_order:
                pick = *std::min_element(ready.begin(), ready.end(),
                                         [&](Tid a, Tid b) { return queues_[a].front() < queues_[b].front(); });
                break;
            case Schedule::Mode::seeded:
                pick = ready[rng() % ready.size()];
                break;
            case Schedule::Mode::explicit_choices:
                if (choice >= sched.choices.size()) {
                    return log_;
                }
                pick = sched.choices[choice++];
                break;
            }
            step(pick);
        }
        return log_;
    }

    /// Runs events in trace order while they are setup events.
    void run_setup_prefix() {
        while (true) {
            auto ready = runnable();
            if (ready.empty()) {
                return;
            }
            Tid pick = *std::min_element(ready.begin(), ready.end(),
                                         [&](Tid a, Tid b) { return queues_[a].front() < queues_[b].front(); });
            if (!(*events_)[queues_[pick].front()].is_setup()) {
                return;
            }
            step(pick);
        }
    }

    /// Hash of the full simulation state (engine, queues, actor flags).
    [[nodiscard]] uint64_t state_digest() const {
        uint64_t h = engine_.digest();
        for (const auto& [tid, q] : queues_) {
            h = fnv1a(words({tid, q.size(), q.empty() ? 0 : q.front()}), h);
        }
        for (const auto& [tid, a] : actors_) {
            h = fnv1a(words({tid, a.started, a.stalled, a.auto_exit}), h);
        }
        return h;
    }

    /// Replaces the remaining events with those of `other` (used after a restore).
    void adopt_queues(const Simulator& other) {
        events_ = other.events_;
        queues_ = other.queues_;
    }

    void set_step(uint64_t s) { step_ = s; }

  private:
    struct Actor {
        bool started = false;
        bool stalled = false;
        bool auto_exit = false; // phase markers exit as soon as they are decided
        bool waited = false;
    };

    [[nodiscard]] bool task_live(Tid tid) const { return engine_.has_task(tid) && engine_.task(tid).alive; }

    bool can_step(Tid tid) {
        auto q = queues_.find(tid);
        if (q == queues_.end() || q->second.empty() || !task_live(tid)) {
            return false;
        }
        const Task& t = engine_.task(tid);
        if (t.blocked()) {
            return engine_.can_resume(tid);
        }
        const Actor& a = actors_[tid];
        if (a.stalled) {
            const TraceEvent& ev = (*events_)[q->second.front()];
            return !engine_.mem_write_would_stall(tid, ev.addr, mem_len(ev));
        }
        return true;
    }

    static uint64_t mem_len(const TraceEvent& ev) { return ev.kind == EventKind::mem_write ? ev.data.size() : ev.len; }

    void purge_dead() {
        for (auto& [tid, q] : queues_) {
            if (!q.empty() && engine_.has_task(tid) && !engine_.task(tid).alive) {
                for (size_t idx : q) {
                    const TraceEvent& ev = (*events_)[idx];
                    log_.events.push_back({step_, tid, std::string(event_name(ev.kind)), "skipped", "task is dead"});
                    ++log_.skipped;
                }
                q.clear();
                actors_.erase(tid);
            }
        }
    }

    void note_event(const TraceEvent& ev, std::string status, std::string detail = {}) {
        log_.events.push_back({step_, ev.tid, std::string(event_name(ev.kind)), std::move(status), std::move(detail)});
    }

    void record_decision(const TraceEvent& ev, const EnterResult& r, bool waited) {
        DecisionRecord d;
        d.step = step_;
        d.tid = ev.tid;
        d.nr = ev.ctx.nr;
        d.action = r.action;
        d.waited = waited;
        for (const auto& v : r.votes) {
            FilterRecord f;
            f.chain_index = v.chain_index;
            f.raw = v.outcome.raw_action;
            f.steps = v.outcome.steps_executed;
            f.helper_calls = v.outcome.helper_calls;
            f.tail_calls = v.outcome.tail_calls;
            f.faulted = v.outcome.faulted;
            d.filters.push_back(std::move(f));
        }
        d.steps_executed = r.total_steps();
        log_.decisions.push_back(std::move(d));
    }

    // Returns true when the event is complete and can be dequeued.
    bool execute(const TraceEvent& ev, Actor& a) {
        Tid tid = ev.tid;
        if (engine_.task(tid).blocked()) {
            EnterResult r = engine_.resume(tid);
            return finish_enter(ev, a, r);
        }
        switch (ev.kind) {
        case EventKind::spawn:
            engine_.spawn(tid, ev.child);
            return true;
        case EventKind::spawn_thread:
            engine_.spawn_thread(tid, ev.child);
            return true;
        case EventKind::set_nnp:
            engine_.set_no_new_privs(tid);
            return true;
        case EventKind::set_dumpable:
            engine_.set_dumpable(tid, ev.flag);
            return true;
        case EventKind::set_caps:
            engine_.set_credentials(tid, ev.creds);
            return true;
        case EventKind::new_userns:
            engine_.new_userns(tid);
            return true;
        case EventKind::load: {
            auto b = bundles_->find(ev.filter);
            if (b == bundles_->end()) {
                note_event(ev, "error", "unknown filter '" + ev.filter + "'");
                return true;
            }
            LoadResult lr = engine_.load_program(tid, b->second.main);
            if (lr.status == EngineStatus::ok) {
                handles_[ev.handle] = lr.handle;
            }
            note_event(ev, engine_status_name(lr.status), lr.report.reason);
            return true;
        }
        case EventKind::install: {
            if (!ev.filter.empty()) {
                auto b = bundles_->find(ev.filter);
                if (b == bundles_->end()) {
                    note_event(ev, "error", "unknown filter '" + ev.filter + "'");
                    return true;
                }
                InstallResult ir = install_bundle(engine_, tid, b->second, ev.install_flags);
                note_event(ev, engine_status_name(ir.status), ir.detail);
                return true;
            }
            auto h = handles_.find(ev.handle);
            EngineStatus s = h == handles_.end() ? EngineStatus::bad_handle
                                                 : engine_.install_filter(tid, h->second, ev.install_flags);
            if (s == EngineStatus::ok) {
                engine_.close_map_handles(tid);
            }
            note_event(ev, engine_status_name(s));
            return true;
        }
        case EventKind::syscall_enter: {
            EnterResult r = engine_.syscall_enter(tid, ev.ctx);
            return finish_enter(ev, a, r);
        }
        case EventKind::phase_marker: {
            a.auto_exit = true;
            SyscallContext ctx;
            ctx.nr = ev.ctx.nr;
            EnterResult r = engine_.syscall_enter(tid, ctx);
            return finish_enter(ev, a, r);
        }
        case EventKind::syscall_exit:
            engine_.syscall_exit(tid, ev.ctx.nr);
            return true;
        case EventKind::mem_map:
        case EventKind::mem_write:
        case EventKind::mem_protect: {
            MemStatus s = ev.kind == EventKind::mem_map     ? engine_.mem_map(tid, ev.addr, ev.len, ev.flag)
                          : ev.kind == EventKind::mem_write ? engine_.mem_write(tid, ev.addr, ev.data)
                                                            : engine_.mem_protect(tid, ev.addr, ev.len, ev.flag);
            if (s == MemStatus::stalled) {
                if (!a.stalled) {
                    ++log_.stalls;
                }
                a.stalled = true;
                return false;
            }
            if (s != MemStatus::ok) {
                note_event(ev, mem_status_name(s));
            }
            return true;
        }
        case EventKind::map_update:
            map_update(ev);
            return true;
        case EventKind::checkpoint: {
            std::vector<Tid> tids = ev.tids;
            if (tids.empty()) {
                for (const auto& [t, task] : engine_.tasks()) {
                    if (task.alive && task.chain) {
                        tids.push_back(t);
                    }
                }
            }
            auto blob = engine_.checkpoint(tids, tid);
            if (blob) {
                checkpoints_[ev.label] = std::move(*blob);
            }
            note_event(ev, blob ? "ok" : "permission_denied");
            return true;
        }
        case EventKind::restore: {
            auto c = checkpoints_.find(ev.label);
            if (c == checkpoints_.end()) {
                note_event(ev, "invalid", "no checkpoint '" + ev.label + "'");
                return true;
            }
            auto rr = engine_.restore(c->second, tid, ev.tid_map);
            note_event(ev, engine_status_name(rr.status));
            return true;
        }
        }
        return true;
    }

    bool finish_enter(const TraceEvent& ev, Actor& a, const EnterResult& r) {
        if (!r.decided) {
            if (!a.waited) {
                ++log_.blocked_entries;
            }
            a.waited = true;
            return false;
        }
        record_decision(ev, r, a.waited);
        if (a.auto_exit && engine_.task(ev.tid).alive) {
            engine_.syscall_exit(ev.tid, ev.ctx.nr);
        }
        return true;
    }

    void map_update(const TraceEvent& ev) {
        auto maps = engine_.filter_maps(ev.tid, ev.target, ev.filter_index);
        if (!maps) {
            note_event(ev, "permission_denied");
            return;
        }
        for (MapId id : *maps) {
            const PolicyMap* m = engine_.find_map(id);
            if (!m || m->decl().name != ev.map) {
                continue;
            }
            Bytes key;
            Bytes value;
            try {
                key = encode_map_bytes(ev.key, m->decl().key_size);
                value = encode_map_bytes(ev.value, m->decl().value_size);
            } catch (const std::exception& e) {
                note_event(ev, "invalid", e.what());
                return;
            }
            MapStatus ms = MapStatus::ok;
            EngineStatus s = engine_.update_map_external(ev.tid, id, key, value, &ms);
            note_event(ev, engine_status_name(s), s == EngineStatus::ok ? "" : map_status_name(ms));
            return;
        }
        note_event(ev, "invalid", "no map named '" + ev.map + "'");
    }

    // Records every pair of syscalls executing at the same time on different tasks.
    void note_overlaps() {
        std::vector<std::pair<Tid, int32_t>> running;
        for (const auto& [tid, t] : engine_.tasks()) {
            if (t.alive && t.sys && t.sys->decided &&
                (t.sys->action.kind == ActionKind::allow || t.sys->action.kind == ActionKind::log)) {
                running.emplace_back(tid, t.sys->ctx.nr);
            }
        }
        for (size_t i = 0; i < running.size(); ++i) {
            for (size_t j = i + 1; j < running.size(); ++j) {
                int32_t a = running[i].second;
                int32_t b = running[j].second;
                log_.overlaps.emplace(std::min(a, b), std::max(a, b));
            }
        }
    }

    void note_kills() {
        for (const auto& [tid, t] : engine_.tasks()) {
            if (!t.alive && !std::count(log_.killed.begin(), log_.killed.end(), tid)) {
                log_.killed.push_back(tid);
            }
        }
    }

    void report_deadlock() {
        DeadlockReport rep;
        rep.step = step_;
        std::map<Tid, std::vector<Tid>> edges;
        for (const auto& [tid, q] : queues_) {
            if (q.empty()) {
                continue;
            }
            BlockedTask b;
            b.tid = tid;
            if (!engine_.has_task(tid)) {
                b.reason = "not_spawned";
            } else if (engine_.task(tid).blocked()) {
                const VmBlock& blk = engine_.task(tid).sys->vm->block;
                b.reason = "wait_syscall";
                b.nr = blk.curr_nr;
                b.target_nr = blk.target_nr;
                for (const auto& [other, t] : engine_.tasks()) {
                    if (other != tid && t.alive && t.sys && t.sys->inflight_held.contains(blk.target_nr)) {
                        b.waits_for.push_back(other);
                    }
                }
            } else if (actors_[tid].stalled) {
                const TraceEvent& ev = (*events_)[q.front()];
                b.reason = "write_stall";
                b.addr = ev.addr;
                for (const auto& [other, t] : engine_.tasks()) {
                    if (!t.alive || !t.sys || !t.sys->snapshot ||
                        t.address_space != engine_.task(tid).address_space) {
                        continue;
                    }
                    const auto& pages = t.sys->snapshot->protected_pages;
                    if (std::find(pages.begin(), pages.end(), page_of(ev.addr)) != pages.end()) {
                        b.waits_for.push_back(other);
                    }
                }
            } else {
                b.reason = "unknown";
            }
            edges[tid] = b.waits_for;
            rep.blocked.push_back(std::move(b));
        }
        rep.cycle = find_cycle(edges);
        log_.deadlocks.push_back(std::move(rep));
    }

    static std::vector<Tid> find_cycle(const std::map<Tid, std::vector<Tid>>& edges) {
        std::map<Tid, int> color; // 0 white, 1 on stack, 2 done
        std::vector<Tid> stack;
        std::vector<Tid> found;
        std::function<bool(Tid)> dfs = [&](Tid u) {
            color[u] = 1;
            stack.push_back(u);
            auto it = edges.find(u);
            if (it != edges.end()) {
                for (Tid v : it->second) {
                    if (color[v] == 1) {
                        auto from = std::find(stack.begin(), stack.end(), v);
                        found.assign(from, stack.end());
                        return true;
                    }
                    if (color[v] == 0 && dfs(v)) {
                        return true;
                    }
                }
            }
            stack.pop_back();
            color[u] = 2;
            return false;
        };
        for (const auto& [u, vs] : edges) {
            if (color[u] == 0 && dfs(u)) {
                break;
            }
        }
        return found;
    }

    Engine engine_;
    std::shared_ptr<const std::vector<TraceEvent>> events_;
    std::shared_ptr<const BundleRegistry> bundles_;
    std::map<Tid, std::deque<size_t>> queues_;
    std::map<Tid, Actor> actors_;
    std::map<std::string, HandleId> handles_;
    std::map<std::string, Bytes> checkpoints_;
    DecisionLog log_;
    uint64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Exhaustive exploration

inline constexpr size_t kDefaultMaxExploreSteps = 14;
/// Larger bounds are refused outright: enumeration cost grows with the
/// multinomial of the per-task event counts.
inline constexpr size_t kExploreStepCeiling = 14;

class ExploreRefused : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct ExploredRun {
    std::vector<Tid> schedule; // choices after the setup prefix
    uint64_t digest = 0;
    bool deadlock = false;
    std::set<std::pair<int32_t, int32_t>> overlaps;
    DecisionLog log;
};

struct ExploreOptions {
    size_t max_steps = kDefaultMaxExploreSteps;
    bool prune = false;    // skip states already seen (counts then drop below the multinomial)
    bool keep_logs = true;
};

struct ExploreResult {
    size_t concurrent_events = 0;
    std::vector<ExploredRun> runs;
    size_t pruned = 0;

    [[nodiscard]] size_t schedules() const { return runs.size(); }
    [[nodiscard]] size_t overlapping(int32_t a, int32_t b) const {
        return static_cast<size_t>(std::count_if(runs.begin(), runs.end(), [&](const ExploredRun& r) {
            return r.overlaps.contains({std::min(a, b), std::max(a, b)});
        }));
    }
    [[nodiscard]] size_t deadlocks() const {
        return static_cast<size_t>(std::count_if(runs.begin(), runs.end(), [](const auto& r) { return r.deadlock; }));
    }
};

/// Enumerates every interleaving of the events that follow the setup prefix.
/// Refuses (rather than truncating) when more than max_steps events remain.
inline ExploreResult explore_interleavings(Simulator sim, const ExploreOptions& opt = {}) {
    if (opt.max_steps > kExploreStepCeiling) {
        throw ExploreRefused("exploration bound exceeded: max steps " + std::to_string(opt.max_steps) +
                             " is above the supported " + std::to_string(kExploreStepCeiling));
    }
    sim.run_setup_prefix();
    ExploreResult res;
    res.concurrent_events = sim.pending_events();
    if (res.concurrent_events > opt.max_steps) {
        throw ExploreRefused("exploration bound exceeded: " + std::to_string(res.concurrent_events) +
                             " concurrent events, limit " + std::to_string(opt.max_steps));
    }
    const size_t prefix = sim.log().schedule.size();
    std::set<uint64_t> seen;
    std::function<void(Simulator&)> dfs = [&](Simulator& s) {
        if (opt.prune && !seen.insert(s.state_digest()).second) {
            ++res.pruned;
            return;
        }
        auto ready = s.runnable();
        if (ready.empty()) {
            bool deadlock = !s.finished();
            if (deadlock) {
                s.run(); // records the deadlock report
            }
            ExploredRun r;
            r.schedule.assign(s.log().schedule.begin() + static_cast<std::ptrdiff_t>(prefix), s.log().schedule.end());
            r.digest = s.log().digest();
            r.deadlock = deadlock;
            r.overlaps = s.log().overlaps;
            if (opt.keep_logs) {
                r.log = s.log();
            }
            res.runs.push_back(std::move(r));
            return;
        }
        for (size_t i = 0; i < ready.size(); ++i) {
            if (i + 1 == ready.size()) {
                s.step(ready[i]); // last branch reuses this state
                dfs(s);
            } else {
                Simulator next = s;
                next.step(ready[i]);
                dfs(next);
            }
        }
    };
    dfs(sim);
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoint/restore replay

struct ReplayComparison {
    bool quiescent = false;
    bool restored = false;
    size_t suffix_decisions = 0;
    bool identical = false;
    std::string detail;
};

/// Runs the trace in trace order to `split` steps, checkpoints every filtered
/// task, rebuilds the tasks in a fresh engine without their filters, restores
/// the checkpoint and runs the rest of the trace on both engines.
inline ReplayComparison replay_after_checkpoint(const std::vector<TraceEvent>& events, const BundleRegistry& bundles,
                                                const EngineConfig& cfg, uint64_t split) {
    ReplayComparison out;
    Simulator original(Engine(cfg), events, bundles);
    original.run(Schedule::trace_order(), split);
    if (!original.quiescent()) {
        out.detail = "split point is inside a syscall";
        return out;
    }
    out.quiescent = true;
    const size_t before = original.log().decisions.size();

    std::vector<Tid> filtered;
    for (const auto& [tid, t] : original.engine().tasks()) {
        if (t.alive && t.chain) {
            filtered.push_back(tid);
        }
    }
    auto blob = original.engine().checkpoint(filtered, kInitTid);
    if (!blob) {
        out.detail = "checkpoint refused";
        return out;
    }

    // Task structure, credentials and memory, but no filters or filter state.
    std::vector<TraceEvent> structural;
    {
        Simulator probe(Engine(cfg), events, bundles);
        for (Tid t : original.log().schedule) {
            size_t idx = *probe.head(t);
            const TraceEvent& ev = events[idx];
            probe.step(t);
            if (probe.head(t) == idx) {
                continue; // blocked or stalled; the event is retried later
            }
            switch (ev.kind) {
            case EventKind::spawn:
            case EventKind::spawn_thread:
            case EventKind::set_nnp:
            case EventKind::set_dumpable:
            case EventKind::set_caps:
            case EventKind::new_userns:
            case EventKind::mem_map:
            case EventKind::mem_write:
            case EventKind::mem_protect:
                structural.push_back(ev);
                break;
            default:
                break;
            }
        }
    }
    Simulator rebuilt(Engine(cfg), structural, bundles);
    rebuilt.run();
    for (const auto& [tid, t] : original.engine().tasks()) {
        if (!t.alive && rebuilt.engine().has_task(tid)) {
            rebuilt.engine().terminate(tid);
        }
    }
    rebuilt.engine().set_clock(original.engine().clock_ns());
    auto rr = rebuilt.engine().restore(*blob, kInitTid);
    if (rr.status != EngineStatus::ok) {
        out.detail = std::string("restore failed: ") + engine_status_name(rr.status);
        return out;
    }
    out.restored = true;

    Simulator resumed(std::move(rebuilt.engine()), {}, bundles);
    resumed.adopt_queues(original);
    resumed.run();
    original.run();

    const auto& a = original.log().decisions;
    const auto& b = resumed.log().decisions;
    out.suffix_decisions = a.size() - before;
    if (b.size() != out.suffix_decisions) {
        out.detail = "suffix lengths differ: " + std::to_string(out.suffix_decisions) + " vs " + std::to_string(b.size());
        return out;
    }
    for (size_t i = 0; i < b.size(); ++i) {
        if (!a[before + i].same_decision(b[i])) {
            out.detail = "decision " + std::to_string(i) + " differs";
            return out;
        }
    }
    out.identical = true;
    return out;
}

} // namespace sfvm
