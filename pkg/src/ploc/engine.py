"""Detection orchestration: one target end to end, and pools in batch.

Targets are independent; batch detection fans out over a worker pool and
reassembles rows in deterministic target order.  Signatures, the pool and
the provider are shared read-only.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from .anchors import AnchorGraph, build_anchor_graph
from .callsim import Callee, SimilarityProvider
from .cfg import BinaryPool, FunctionCFG
from .classifier import (
    IRRELEVANT, SideDetection, Verdict, classify, path_score,
)
from .detector import (
    CalleeMatcher, MatchedPath, Thresholds, build_candidate_sets,
    filter_irrelevant, match_context, match_patch, select_verified_patch,
)
from .signature import Signature, SignaturePair

log = logging.getLogger("ploc.engine")


def _target_invoked(tgt: FunctionCFG, pool: BinaryPool | None
                    ) -> list[Callee]:
    seen: dict[str, Callee] = {}
    for _site, callee in tgt.invoked:
        if callee is None or callee in seen:
            continue
        cfg = pool.functions.get(callee) if pool else None
        seen[callee] = Callee(callee, cfg)
    return list(seen.values())


def _fmt_distance(d: float) -> float | str:
    return "inf" if d == math.inf else d


def _path_sites(match: MatchedPath | None) -> list[int | None] | None:
    if match is None:
        return None
    return [a.site if a is not None else None for _, a in match.pairs]


def _detect_side(sig: Signature, tgt_ag: AnchorGraph,
                 matcher: CalleeMatcher, th: Thresholds,
                 rho: float) -> SideDetection:
    side = SideDetection(rho=rho)
    side.bw_ref_len = len(sig.bw_path)
    side.fw_ref_len = len(sig.fw_path)
    if sig.patch_path is None:
        return side
    side.patch_exists = True

    bw_sets = build_candidate_sets(sig.bw_path, tgt_ag, matcher)
    fw_sets = build_candidate_sets(sig.fw_path, tgt_ag, matcher)
    patch_sets = build_candidate_sets(sig.patch_path, tgt_ag, matcher)

    side.bw_matched = match_context(sig.bw_path, bw_sets, tgt_ag, th.t_cpm)
    side.fw_matched = match_context(sig.fw_path, fw_sets, tgt_ag, th.t_cpm)

    full = match_patch(sig.patch_path, patch_sets, tgt_ag)
    side.patch_matched = bool(full)
    winner, audited = select_verified_patch(
        full, side.bw_matched, side.fw_matched, sig, tgt_ag)
    side.rejected = [
        {"path": _path_sites(m), "d_bw": _fmt_distance(d_bw),
         "d_fw": _fmt_distance(d_fw)}
        for m, ok, d_bw, d_fw in audited if not ok
    ]
    if winner is not None:
        side.verified, side.verified_d_bw, side.verified_d_fw = winner
        side.patch_score = path_score(sig.patch_path, side.verified)
    side.bw_score = path_score(sig.bw_path, side.bw_matched)
    side.fw_score = path_score(sig.fw_path, side.fw_matched)
    return side


def _side_evidence(side: SideDetection, sig: Signature) -> dict:
    return {
        "rho": round(side.rho, 6),
        "patch_in_signature": sig.patch_path is not None,
        "patch_matched": side.patch_matched,
        "patch_verified": side.verified is not None,
        "verified_path": _path_sites(side.verified),
        "verified_d_bw": _fmt_distance(side.verified_d_bw),
        "verified_d_fw": _fmt_distance(side.verified_d_fw),
        "rejected_patch_candidates": side.rejected,
        "bw_matched": _path_sites(side.bw_matched),
        "fw_matched": _path_sites(side.fw_matched),
        "patch_score": round(side.patch_score, 6),
        "context_score": round(side.context_score, 6),
    }


def detect_one(sig_pair: SignaturePair, tgt: FunctionCFG,
               pool: BinaryPool | None = None,
               provider: SimilarityProvider | None = None,
               thresholds: Thresholds = Thresholds(),
               ref_callee_cfg=None) -> Verdict:
    """Classify one target function against a signature pair."""
    tgt_ag = build_anchor_graph(tgt)
    passed, rho_vul, rho_fix = filter_irrelevant(
        sig_pair, tgt_ag, thresholds.t_iff)
    if not passed:
        verdict = classify(sig_pair, SideDetection(rho=rho_vul),
                           SideDetection(rho=rho_fix), passed_filter=False)
        verdict.evidence.update({
            "rho_vul": round(rho_vul, 6), "rho_fix": round(rho_fix, 6)})
        return verdict

    matcher = CalleeMatcher(_target_invoked(tgt, pool), provider,
                            thresholds.t_bcsd, ref_callee_cfg)
    vul_side = _detect_side(sig_pair.vul, tgt_ag, matcher, thresholds,
                            rho_vul)
    fix_side = _detect_side(sig_pair.fix, tgt_ag, matcher, thresholds,
                            rho_fix)
    verdict = classify(sig_pair, vul_side, fix_side, passed_filter=True)
    verdict.evidence.update({
        "vul": _side_evidence(vul_side, sig_pair.vul),
        "fix": _side_evidence(fix_side, sig_pair.fix),
    })
    return verdict


def detect_pool(sig_pair: SignaturePair, pool: BinaryPool,
                provider: SimilarityProvider | None = None,
                thresholds: Thresholds = Thresholds(),
                threads: int | None = None,
                record_time: bool = True) -> list[dict]:
    """Classify every function in the pool; returns report rows sorted by
    target id.  A per-function failure yields an irrelevant row with an
    error note instead of aborting the batch."""
    targets = sorted(pool.functions.keys())

    def run(uid: str) -> dict:
        start = time.perf_counter()
        try:
            verdict = detect_one(sig_pair, pool.functions[uid], pool,
                                 provider, thresholds)
            row = {
                "target": uid,
                "label": verdict.label,
                "score": verdict.score,
                "evidence": verdict.evidence,
            }
        except Exception as exc:  # noqa: BLE001 - batch must survive
            log.exception("detection failed for %s", uid)
            row = {
                "target": uid,
                "label": IRRELEVANT,
                "score": 0.0,
                "evidence": {"error": f"{type(exc).__name__}: {exc}"},
            }
        elapsed = (time.perf_counter() - start) * 1000.0
        row["time_ms"] = round(elapsed, 3) if record_time else 0.0
        return row

    if threads is None:
        threads = os.cpu_count() or 1
    if threads <= 1:
        rows = [run(uid) for uid in targets]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            rows = list(pool_exec.map(run, targets))
    rows.sort(key=lambda r: r["target"])
    return rows


def build_report(sig_pair: SignaturePair, rows: Sequence[dict],
                 thresholds: Thresholds,
                 timestamp: str | None = None) -> dict:
    report = {
        "cve": sig_pair.cve,
        "thresholds": {"t_iff": thresholds.t_iff,
                       "t_cpm": thresholds.t_cpm,
                       "t_bcsd": thresholds.t_bcsd},
        "rows": list(rows),
        "metrics": None,
    }
    if timestamp is not None:
        report["generated_at"] = timestamp
    return report
