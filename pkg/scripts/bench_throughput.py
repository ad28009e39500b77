#!/usr/bin/env python3
"""Detection throughput over synthetic pools.

Builds seeded pools of random functions (a third sharing the signature's
comparison vocabulary so coarse filtering stays honest) and reports the
mean wall time per target.  Run from the repository root:

    python scripts/bench_throughput.py [n_functions] [max_blocks]
"""
from __future__ import annotations

import os
import random
import statistics
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ploc.callsim import MatrixProvider  # noqa: E402
from ploc.cfg import load_cfg_bundle  # noqa: E402
from ploc.detector import Thresholds  # noqa: E402
from ploc.engine import detect_pool  # noqa: E402
from ploc.patch import parse_patch  # noqa: E402
from ploc.signature import generate_signature_pair  # noqa: E402
from ploc.testkit import synth_pool  # noqa: E402

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
FIXTURES = os.path.join(ROOT, "tests", "fixtures", "motivating")


def main():
    n_functions = int(sys.argv[1]) if len(sys.argv) > 1 else 100
    max_blocks = int(sys.argv[2]) if len(sys.argv) > 2 else 200

    pair = generate_signature_pair(
        load_cfg_bundle(os.path.join(FIXTURES, "vul_ref.json"))
        .functions["process_key_exchange"],
        load_cfg_bundle(os.path.join(FIXTURES, "fix_ref.json"))
        .functions["process_key_exchange"],
        open(os.path.join(FIXTURES, "skex_vul.c")).read(),
        open(os.path.join(FIXTURES, "skex_fix.c")).read(),
        parse_patch(os.path.join(FIXTURES, "patch.diff")),
        cve="bench")
    provider = MatrixProvider(os.path.join(FIXTURES, "simdb.csv"))

    for seed in (1, 2, 3):
        rng = random.Random(seed)
        pool = synth_pool(n_functions, rng,
                          blocks_range=(20, max_blocks),
                          shared_vocabulary=[0x66, 0x200, 8, 0xE, 0xE0, 0])
        start = time.perf_counter()
        rows = detect_pool(pair, pool, provider, Thresholds(), threads=1)
        elapsed = time.perf_counter() - start
        times = [r["time_ms"] for r in rows]
        filtered = sum(1 for r in rows if r["label"] == "irrelevant")
        print(f"seed {seed}: {len(rows)} targets in {elapsed:.2f}s  "
              f"mean {elapsed / len(rows) * 1000:.1f} ms  "
              f"median {statistics.median(times):.1f} ms  "
              f"max {max(times):.1f} ms  irrelevant {filtered}")


if __name__ == "__main__":
    main()
