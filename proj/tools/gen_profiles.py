#!/usr/bin/env python3
# Copyright (c) sfvm contributors.
# SPDX-License-Identifier: MIT
"""Writes data/profiles/six_apps.json.

Only the set sizes are known for these applications, so members are drawn
from the x86_64 syscall range with a per-application seed. The arithmetic
(|S_init|, |S_serv|, |S_comm|, union, reduction) is exact; the identities of
the syscalls are not.
"""
import json
import random
import sys
from pathlib import Path

SIZES = [
    # name, |s_init|, |s_serv|, |s_comm|
    ("HTTPD", 71, 83, 47),
    ("NGINX", 52, 93, 36),
    ("Lighttpd", 46, 78, 25),
    ("Memcached", 45, 83, 27),
    ("Redis", 42, 84, 33),
    ("Bind", 75, 113, 53),
]
SYSCALL_RANGE = range(0, 335)


def build(name, n_init, n_serv, n_comm):
    rng = random.Random(name)
    members = rng.sample(list(SYSCALL_RANGE), n_init + n_serv - n_comm)
    comm = members[:n_comm]
    init_only = members[n_comm:n_init]
    serv_only = members[n_init:]
    return {
        "name": name,
        "s_init": sorted(comm + init_only),
        "s_serv": sorted(comm + serv_only),
    }


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "data/profiles/six_apps.json"
    doc = {
        "phase_marker_nr": 1000,
        "applications": [build(*row) for row in SIZES],
    }
    out.write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main()
