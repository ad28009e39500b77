"""Command-line surface: signature generation, batch detection, metrics.

Log level comes from the PLOC_LOG environment variable (DEBUG/INFO/...).
"""
from __future__ import annotations

import datetime
import json
import logging
import os
import sys

import click

from . import __version__
from .anchors import build_anchor_graph, compute_weights
from .callsim import MatrixProvider
from .cfg import BundleError, load_cfg_bundle
from .detector import Thresholds
from .engine import build_report, detect_pool
from .metrics import EvaluationError, compute_metrics, load_truth_csv
from .patch import PatchParseError, parse_patch
from .signature import (
    SignatureError, UndetectablePatchError, generate_signature_pair,
    load_signature_pair, map_patch_to_blocks, save_signature_pair,
)

log = logging.getLogger("ploc.cli")


def _setup_logging():
    level = os.environ.get("PLOC_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")


@click.group()
@click.version_option(__version__, prog_name="ploc")
def main():
    """Patch presence testing over CFG bundles."""
    _setup_logging()


def _read_text(path) -> str:
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        return fh.read()


def _pick_reference(pool, explicit_name, source, patch, side):
    """Choose the reference function: explicit name, the only function,
    or the one the patch maps into."""
    if explicit_name:
        fn = pool.functions.get(explicit_name)
        if fn is None:
            raise click.ClickException(
                f"function {explicit_name!r} not found in bundle "
                f"(has: {', '.join(sorted(pool.functions))})")
        return fn
    if len(pool.functions) == 1:
        return next(iter(pool.functions.values()))
    best, best_hits = None, 0
    for fn in pool.functions.values():
        hits = len(map_patch_to_blocks(fn, source, patch, side))
        if hits > best_hits:
            best, best_hits = fn, hits
    if best is None:
        # Fall back to any function carrying line info; mapping may
        # legitimately be empty on one side.
        with_lines = [fn for fn in pool.functions.values()
                      if any(i.source_line for i in fn.iter_instructions())]
        if len(with_lines) == 1:
            return with_lines[0]
        raise click.ClickException(
            f"cannot determine the {side} reference function; "
            f"pass --function")
    return best


@main.command("sign")
@click.option("--cfg", "cfg_paths", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Reference CFG bundles: vulnerable first, fixed second.")
@click.option("--src", "src_paths", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Reference sources: vulnerable first, fixed second.")
@click.option("--patch", "patch_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--cve", required=True, help="Identifier for the database "
              "entry (sigdb/<cve>.json).")
@click.option("--function", "function_name", default=None,
              help="Reference function name in both bundles.")
@click.option("--dump-ag", "dump_ag", default=None, type=click.Path(),
              help="Directory for DOT dumps of the reference anchor "
              "graphs.")
def cmd_sign(cfg_paths, src_paths, patch_path, out_dir, cve, function_name,
             dump_ag):
    """Generate and store the signature pair for one patch."""
    if len(cfg_paths) != 2 or len(src_paths) != 2:
        raise click.ClickException(
            "--cfg and --src must each be given twice "
            "(vulnerable first, fixed second)")
    try:
        pool_vul = load_cfg_bundle(cfg_paths[0])
        pool_fix = load_cfg_bundle(cfg_paths[1])
        patch = parse_patch(patch_path)
    except (BundleError, PatchParseError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)

    src_vul = _read_text(src_paths[0])
    src_fix = _read_text(src_paths[1])
    f_vul = _pick_reference(pool_vul, function_name, src_vul, patch, "vul")
    f_fix = _pick_reference(pool_fix, function_name, src_fix, patch, "fix")

    try:
        # The on-disk names of saved source versions routinely differ from
        # the names recorded in debug info, so no filename filter here.
        pair = generate_signature_pair(
            f_vul, f_fix, src_vul, src_fix, patch, cve=cve)
    except UndetectablePatchError as exc:
        click.echo(f"undetectable patch: {exc}", err=True)
        sys.exit(2)
    except SignatureError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)

    path = save_signature_pair(pair, out_dir)
    if dump_ag:
        os.makedirs(dump_ag, exist_ok=True)
        for fn, side in ((f_vul, "vul"), (f_fix, "fix")):
            ag = compute_weights(build_anchor_graph(fn))
            dot_path = os.path.join(dump_ag, f"{cve}.{side}.dot")
            with open(dot_path, "w", encoding="utf-8") as fh:
                fh.write(ag.to_dot() + "\n")
    click.echo(path)


@main.command("detect")
@click.option("--sig", "sig_path", required=True, type=click.Path())
@click.option("--pool", "pool_path", required=True, type=click.Path())
@click.option("--simdb", "simdb_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Precomputed similarity CSV (query_id,candidate_id,"
              "score).")
@click.option("--t-iff", default=0.4, show_default=True,
              help="Irrelevant-function filtering threshold.")
@click.option("--t-cpm", default=0.3, show_default=True,
              help="Context-path matching-ratio threshold.")
@click.option("--t-bcsd", default=0.9, show_default=True,
              help="Callee-similarity threshold.")
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--csv", "csv_path", default=None, type=click.Path(),
              help="Also write rows as CSV.")
@click.option("--threads", default=None, type=int,
              help="Worker threads (default: logical cores).")
@click.option("--no-timestamp", is_flag=True,
              help="Omit the timestamp and per-row timings so identical "
              "inputs produce byte-identical reports.")
@click.option("--dump-ag", "dump_ag", default=None, type=click.Path(),
              help="Directory for DOT dumps of each target anchor graph.")
def cmd_detect(sig_path, pool_path, simdb_path, t_iff, t_cpm, t_bcsd,
               report_path, csv_path, threads, no_timestamp, dump_ag):
    """Classify every function in a pool against one signature."""
    for path, what in ((sig_path, "signature"), (pool_path, "pool")):
        if not os.path.exists(path):
            click.echo(f"error: {what} file not found: {path}", err=True)
            sys.exit(2)
    try:
        sig_pair = load_signature_pair(sig_path)
        pool = load_cfg_bundle(pool_path)
    except (BundleError, SignatureError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)

    provider = MatrixProvider(simdb_path) if simdb_path else None
    thresholds = Thresholds(t_iff=t_iff, t_cpm=t_cpm, t_bcsd=t_bcsd)

    if dump_ag:
        os.makedirs(dump_ag, exist_ok=True)
        for uid, fn in sorted(pool.functions.items()):
            with open(os.path.join(dump_ag, f"{uid}.dot"), "w",
                      encoding="utf-8") as fh:
                fh.write(build_anchor_graph(fn).to_dot() + "\n")

    rows = detect_pool(sig_pair, pool, provider, thresholds,
                       threads=threads, record_time=not no_timestamp)
    timestamp = None if no_timestamp else \
        datetime.datetime.now(datetime.timezone.utc).isoformat()
    report = build_report(sig_pair, rows, thresholds, timestamp)
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path:
        _write_csv(csv_path, rows)
    counts = {}
    for row in rows:
        counts[row["label"]] = counts.get(row["label"], 0) + 1
    click.echo(f"{len(rows)} functions: " + ", ".join(
        f"{label}={count}" for label, count in sorted(counts.items())))


def _write_csv(path, rows):
    import csv as _csv
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["target", "label", "score", "time_ms"])
        for row in rows:
            writer.writerow([row["target"], row["label"], row["score"],
                             row["time_ms"]])


@main.command("evaluate")
@click.option("--report", "report_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--truth", "truth_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="Write a copy of the report with metrics filled in.")
def cmd_evaluate(report_path, truth_path, out_path):
    """Compute TPR/FPR and support-rate metrics for a report."""
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    try:
        truth = load_truth_csv(truth_path)
        bundle = compute_metrics(report.get("rows", []), truth)
    except EvaluationError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps(bundle.to_json(), indent=2, sort_keys=True))
    if out_path:
        report["metrics"] = bundle.to_json()
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")


@main.command("dump-ag")
@click.option("--cfg", "cfg_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--function", "function_name", default=None)
def cmd_dump_ag(cfg_path, function_name):
    """Print the anchor graph of one function as DOT."""
    try:
        pool = load_cfg_bundle(cfg_path)
    except BundleError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    if function_name is None and len(pool.functions) == 1:
        function_name = next(iter(pool.functions))
    fn = pool.functions.get(function_name)
    if fn is None:
        click.echo(f"error: function {function_name!r} not in bundle",
                   err=True)
        sys.exit(2)
    click.echo(compute_weights(build_anchor_graph(fn)).to_dot())


if __name__ == "__main__":
    main()
