#!/usr/bin/env python3
# Copyright (c) sfvm contributors.
# SPDX-License-Identifier: MIT
"""Runs every report-producing subcommand and validates its JSON against
data/schema/report.schema.json. Also checks that the scenario suite report is
identical across two runs.

usage: validate_report.py <sfvm binary> <data dir> <scratch dir>
"""
import json
import os
import subprocess
import sys

import jsonschema


def main():
    cli, data, scratch = sys.argv[1:4]
    root = os.path.dirname(os.path.abspath(data))
    samples = os.path.join(root, "samples")
    traces = os.path.join(data, "traces")
    with open(os.path.join(data, "schema", "report.schema.json")) as f:
        schema = json.load(f)
    jsonschema.Draft202012Validator.check_schema(schema)
    validator = jsonschema.Draft202012Validator(schema)

    def produce(name, args, codes=(0,), to_file=False):
        out = os.path.join(scratch, "report_" + name + ".json")
        cmd = [cli, "--data-dir", data] + args + (["--report", out] if to_file else [])
        p = subprocess.run(cmd, capture_output=True, text=True)
        if p.returncode not in codes:
            raise SystemExit(f"{name}: exit {p.returncode}\n{p.stdout}\n{p.stderr}")
        if to_file:
            with open(out) as f:
                return json.load(f)
        return json.loads(p.stdout)

    reports = {
        "attack_surface": produce("attack_surface", ["report", "attack-surface", "--json"]),
        "verify_ok": produce("verify_ok", ["verify", os.path.join(samples, "keyctl_join_twice.s"), "--json"]),
        "verify_rejected": produce("verify_rejected", ["verify", os.path.join(samples, "ctx_oob.s"), "--json"], (1,)),
        "run": produce("run", ["run", "--trace", os.path.join(samples, "keyctl_loop.jsonl"),
                               "--filter", os.path.join(samples, "keyctl_join_twice.s")], to_file=True),
        "explore": produce("explore", ["explore", "--trace", os.path.join(traces, "cve-2018-18281.jsonl"),
                                       "--filter", os.path.join(samples, "serialize.json"),
                                       "--max-steps", "14"], to_file=True),
        "scenarios": produce("scenarios", ["scenario", "--all"], to_file=True),
    }
    failed = 0
    for name, report in reports.items():
        errors = sorted(validator.iter_errors(report), key=lambda e: list(e.path))
        print(("PASS " if not errors else "FAIL ") + name)
        for e in errors[:5]:
            print("   ", list(e.path), e.message[:200])
        failed += bool(errors)

    # The schema must be strict enough to notice a broken report.
    broken = json.loads(json.dumps(reports["attack_surface"]))
    broken["rows"][0]["union"] = "107"
    del broken["version"]
    strict = not validator.is_valid(broken)
    print(("PASS " if strict else "FAIL ") + "schema rejects a malformed report")
    failed += not strict

    again = produce("scenarios_again", ["scenario", "--all"], to_file=True)
    same = again == reports["scenarios"]
    print(("PASS " if same else "FAIL ") + "scenario suite report is identical across runs")
    failed += not same
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
