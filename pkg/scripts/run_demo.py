#!/usr/bin/env python3
"""End-to-end walkthrough on the motivating fixture.

Generates the signature for the null-check patch, detects it across a
pool holding the fixed reference, two differently-compiled vulnerable
variants and their callee stubs, then scores the report against ground
truth.  Run from the repository root:

    python scripts/run_demo.py [workdir]
"""
from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
FIXTURES = os.path.join(ROOT, "tests", "fixtures", "motivating")


def run(argv):
    print("+", " ".join(argv))
    env = dict(os.environ, PYTHONPATH=os.path.join(ROOT, "src"))
    proc = subprocess.run([sys.executable, "-m", "ploc.cli"] + argv,
                          env=env, capture_output=True, text=True)
    sys.stdout.write(proc.stdout)
    sys.stderr.write(proc.stderr)
    proc.check_returncode()
    return proc


def main():
    workdir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(
        prefix="ploc-demo-")
    os.makedirs(workdir, exist_ok=True)
    sigdb = os.path.join(workdir, "sigdb")
    report = os.path.join(workdir, "report.json")

    run(["sign",
         "--cfg", os.path.join(FIXTURES, "vul_ref.json"),
         "--cfg", os.path.join(FIXTURES, "fix_ref.json"),
         "--src", os.path.join(FIXTURES, "skex_vul.c"),
         "--src", os.path.join(FIXTURES, "skex_fix.c"),
         "--patch", os.path.join(FIXTURES, "patch.diff"),
         "--out", sigdb, "--cve", "CVE-2014-3470-shape",
         "--dump-ag", os.path.join(workdir, "dots")])

    run(["detect",
         "--sig", os.path.join(sigdb, "CVE-2014-3470-shape.json"),
         "--pool", os.path.join(FIXTURES, "pool.json"),
         "--simdb", os.path.join(FIXTURES, "simdb.csv"),
         "--report", report,
         "--csv", os.path.join(workdir, "report.csv")])

    run(["evaluate", "--report", report,
         "--truth", os.path.join(FIXTURES, "truth.csv")])

    rows = json.load(open(report))["rows"]
    print("\nverdicts:")
    for row in rows:
        print(f"  {row['target']:>24}  {row['label']:>11}  "
              f"{row['score']:+.3f}")
    rejected = [r for r in rows
                if isinstance(r["evidence"].get("fix"), dict)
                and r["evidence"]["fix"]["rejected_patch_candidates"]]
    print(f"\n{len(rejected)} targets had patch-similar code rejected by "
          f"control-flow verification")
    print(f"artifacts in {workdir}")


if __name__ == "__main__":
    main()
