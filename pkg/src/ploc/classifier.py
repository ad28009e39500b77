"""Verdict computation: path scoring and the classification decision tree.

A matched path scores the average per-anchor LCS of auxiliary constants
against its reference path.  The tree first honors the coarse filter, then
compares verified patch paths when both sides have one, and falls back to
context evidence when a side's patch path does not exist (pure addition or
pure deletion patches).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .detector import MatchedPath, lcs_length
from .signature import SigAnchor, SignaturePair

VULNERABLE = "vulnerable"
FIXED = "fixed"
IRRELEVANT = "irrelevant"

# Smallest score magnitude for a non-irrelevant verdict; keeps the sign
# meaningful even when every matched anchor has empty aux.
MIN_SCORE_MAGNITUDE = 1.0 / 64

# Decision points of the classification tree, recorded in evidence so a
# verdict can be audited.
DP_FILTERED = "filtered-irrelevant"
DP_BOTH_PATCHES = "both-patch-paths-compared"
DP_ONE_PATCH = "single-verified-patch-path"
DP_NO_PATCH_MATCH = "no-verified-patch-path"
DP_ADDITION_PATCH = "addition-only-patch"
DP_DELETION_PATCH = "deletion-only-patch"
DP_CONTEXT_ONLY = "context-without-patch"
DP_TIE = "tie"


@dataclass(frozen=True)
class Verdict:
    label: str
    score: float
    evidence: dict = field(default_factory=dict, compare=False)


@dataclass
class SideDetection:
    """Everything the detector learned about one signature side."""
    rho: float = 0.0
    patch_exists: bool = False
    patch_matched: bool = False
    verified: MatchedPath | None = None
    verified_d_bw: float = math.inf
    verified_d_fw: float = math.inf
    patch_score: float = 0.0
    bw_matched: MatchedPath | None = None
    fw_matched: MatchedPath | None = None
    bw_ref_len: int = 0
    fw_ref_len: int = 0
    bw_score: float = 0.0
    fw_score: float = 0.0
    rejected: list = field(default_factory=list)

    @property
    def context_score(self) -> float:
        return self.bw_score + self.fw_score

    @property
    def context_matched(self) -> bool:
        """A non-empty reference context side matched in the target."""
        return ((self.bw_ref_len > 0 and self.bw_matched is not None)
                or (self.fw_ref_len > 0 and self.fw_matched is not None))

    def total_score(self) -> float:
        return (self.patch_score if self.verified is not None else 0.0) \
            + self.context_score


def path_score(ap_ref: Sequence[SigAnchor],
               matched: MatchedPath | None) -> float:
    """Average auxiliary-LCS per reference anchor; gaps contribute 0."""
    if not ap_ref or matched is None:
        return 0.0
    total = 0
    for idx, anchor in matched.pairs:
        if anchor is not None:
            total += lcs_length(ap_ref[idx].aux, anchor.aux)
    return total / len(ap_ref)


def _signed_score(label: str, favor_fixed: float,
                  favor_vulnerable: float) -> float:
    if label == IRRELEVANT:
        return 0.0
    raw = (favor_fixed - favor_vulnerable) / \
        max(1.0, favor_fixed + favor_vulnerable)
    raw = max(-1.0, min(1.0, raw))
    if label == FIXED:
        return max(raw, MIN_SCORE_MAGNITUDE)
    return min(raw, -MIN_SCORE_MAGNITUDE)


def classify(sig_pair: SignaturePair, vul: SideDetection,
             fix: SideDetection, passed_filter: bool) -> Verdict:
    """Walk the decision tree and emit a signed verdict.

    Negative scores lean vulnerable, positive lean fixed, zero is
    irrelevant; the magnitude reflects how much matched evidence the
    winning side accumulated.
    """
    evidence: dict = {}

    def verdict(label, favor_fixed, favor_vul, decision):
        evidence["decision"] = decision
        return Verdict(label=label,
                       score=_signed_score(label, favor_fixed, favor_vul),
                       evidence=evidence)

    if not passed_filter:
        return verdict(IRRELEVANT, 0.0, 0.0, DP_FILTERED)

    vul_has = sig_pair.vul.patch_path is not None
    fix_has = sig_pair.fix.patch_path is not None

    if vul_has and fix_has:
        v_ok = vul.verified is not None
        f_ok = fix.verified is not None
        if v_ok and f_ok:
            if fix.patch_score > vul.patch_score:
                return verdict(FIXED, fix.total_score(), vul.total_score(),
                               DP_BOTH_PATCHES)
            if vul.patch_score > fix.patch_score:
                return verdict(VULNERABLE, fix.total_score(),
                               vul.total_score(), DP_BOTH_PATCHES)
            if fix.context_score > vul.context_score:
                return verdict(FIXED, fix.total_score(), vul.total_score(),
                               DP_BOTH_PATCHES)
            if vul.context_score > fix.context_score:
                return verdict(VULNERABLE, fix.total_score(),
                               vul.total_score(), DP_BOTH_PATCHES)
            return verdict(IRRELEVANT, 0.0, 0.0, DP_TIE)
        if f_ok:
            return verdict(FIXED, fix.total_score(), vul.total_score(),
                           DP_ONE_PATCH)
        if v_ok:
            return verdict(VULNERABLE, fix.total_score(), vul.total_score(),
                           DP_ONE_PATCH)
        return verdict(IRRELEVANT, 0.0, 0.0, DP_NO_PATCH_MATCH)

    if not vul_has:
        # Pure-addition patch: the vulnerable reference shows no patch
        # code, so absence of the fix patch plus presence of its context
        # is the vulnerable signal.
        if fix.verified is not None:
            return verdict(FIXED, fix.total_score(), 0.0,
                           DP_ADDITION_PATCH)
        if fix.context_matched:
            return verdict(VULNERABLE, 0.0, fix.context_score or 0.0,
                           DP_CONTEXT_ONLY)
        return verdict(IRRELEVANT, 0.0, 0.0, DP_ADDITION_PATCH)

    # Pure-deletion patch: symmetric.
    if vul.verified is not None:
        return verdict(VULNERABLE, 0.0, vul.total_score(),
                       DP_DELETION_PATCH)
    if vul.context_matched:
        return verdict(FIXED, vul.context_score or 0.0, 0.0,
                       DP_CONTEXT_ONLY)
    return verdict(IRRELEVANT, 0.0, 0.0, DP_DELETION_PATCH)
