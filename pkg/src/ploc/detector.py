"""Patch detection in target anchor graphs.

Matching proceeds in four stages: coarse irrelevant-function filtering on
unique anchor values, candidate-set construction per reference anchor,
depth-first path matching that keeps only stepwise-closest candidates and
skips anchors with no candidates, and control-flow verification of matched
patch paths against the matched context.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .anchors import Anchor, AnchorGraph, CALL, CMP
from .callsim import Callee, SimilarityProvider, match_callee
from .signature import SigAnchor, Signature, SignaturePair

log = logging.getLogger("ploc.detector")

MAX_MATCHED_PATHS = 64


@dataclass(frozen=True)
class Thresholds:
    t_iff: float = 0.4
    t_cpm: float = 0.3
    t_bcsd: float = 0.9


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length (elements compared by ==)."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------------------
# Irrelevant function filtering
# ---------------------------------------------------------------------------

def matching_proportion(sig: Signature, tgt_ag: AnchorGraph) -> float:
    """Fraction of the reference's unique anchor values found in the
    target; 0 when the reference has none."""
    if not sig.unique_values:
        return 0.0
    tgt_values = {a.value_key() for a in tgt_ag.anchors}
    matched = len(sig.unique_values & tgt_values)
    return matched / len(sig.unique_values)


def filter_irrelevant(sig_pair: SignaturePair, tgt_ag: AnchorGraph,
                      t_iff: float) -> tuple[bool, float, float]:
    """Returns (passes, rho_vul, rho_fix); the target is irrelevant when
    neither proportion exceeds the threshold."""
    rho_vul = matching_proportion(sig_pair.vul, tgt_ag)
    rho_fix = matching_proportion(sig_pair.fix, tgt_ag)
    return (rho_vul > t_iff or rho_fix > t_iff), rho_vul, rho_fix


# ---------------------------------------------------------------------------
# Candidate sets
# ---------------------------------------------------------------------------

def anchor_distance(ag: AnchorGraph, a: Anchor, b: Anchor) -> int | None:
    """Shortest-path edge count in the AG; None when unreachable."""
    return ag.distance(a, b)


@dataclass(frozen=True)
class CandidateSet:
    ref: SigAnchor
    candidates: tuple[Anchor, ...]


class CalleeMatcher:
    """Resolves reference callees against one target's invoked set.

    The provider is only ever consulted with the target's own invoked
    functions as candidates, and each reference callee is resolved once.
    """

    def __init__(self, tgt_invoked: Sequence[Callee],
                 provider: SimilarityProvider | None,
                 t_bcsd: float,
                 ref_callee_cfg: Callable | None = None):
        self._invoked = tuple(tgt_invoked)
        self._provider = provider
        self._t_bcsd = t_bcsd
        self._ref_cfg = ref_callee_cfg
        self._memo: dict[int | str, str | None] = {}

    def resolve(self, ref_value: int | str) -> str | None:
        """Name of the matched target callee for a reference CALL value."""
        if ref_value in self._memo:
            return self._memo[ref_value]
        if not isinstance(ref_value, str):
            result = None
        else:
            cfg = self._ref_cfg(ref_value) if self._ref_cfg else None
            matched = match_callee(Callee(ref_value, cfg), self._invoked,
                                   self._provider, self._t_bcsd)
            result = matched.name if matched else None
        self._memo[ref_value] = result
        return result


def build_candidate_sets(ap_ref: Sequence[SigAnchor], tgt_ag: AnchorGraph,
                         matcher: CalleeMatcher | None = None
                         ) -> list[CandidateSet]:
    """Candidate target anchors per reference anchor.

    Comparison anchors match on equal value; call anchors match on the
    resolved callee.  Candidates are ordered by decreasing auxiliary
    agreement (LCS on aux), then by site.
    """
    sets: list[CandidateSet] = []
    for ref in ap_ref:
        if ref.kind == CMP:
            cands = [a for a in tgt_ag.anchors
                     if a.kind == CMP and a.value == ref.value]
        elif ref.kind == CALL:
            if matcher is not None:
                # Exact-name precedence and the threshold rule both live
                # in the callee matcher.
                resolved = matcher.resolve(ref.value)
                cands = ([a for a in tgt_ag.anchors
                          if a.kind == CALL and a.callee == resolved]
                         if resolved is not None else [])
            else:
                cands = [a for a in tgt_ag.anchors
                         if a.kind == CALL and a.value == ref.value
                         and ref.value != "?"]
        else:
            cands = []
        cands.sort(key=lambda a: (-lcs_length(ref.aux, a.aux), a.site))
        sets.append(CandidateSet(ref=ref, candidates=tuple(cands)))
    return sets


# ---------------------------------------------------------------------------
# Path matching (depth-first with stepwise-closest pruning)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchedPath:
    """Alignment of a reference anchor path onto target anchors.

    ``pairs[i]`` is (reference index, matched target anchor or None for a
    gap).  Matched anchors appear in an order consistent with target-AG
    reachability.
    """
    pairs: tuple[tuple[int, Anchor | None], ...]

    @property
    def matched_count(self) -> int:
        return sum(1 for _, a in self.pairs if a is not None)

    def matched_anchors(self) -> tuple[Anchor, ...]:
        return tuple(a for _, a in self.pairs if a is not None)

    def first_matched(self) -> Anchor | None:
        for _, a in self.pairs:
            if a is not None:
                return a
        return None

    def last_matched(self) -> Anchor | None:
        for _, a in reversed(self.pairs):
            if a is not None:
                return a
        return None

    def ratio(self) -> float:
        """Matched fraction; vacuously 1 for an empty reference path."""
        if not self.pairs:
            return 1.0
        return self.matched_count / len(self.pairs)


def path_match(ap_ref: Sequence[SigAnchor],
               cand_sets: Sequence[CandidateSet],
               tgt_ag: AnchorGraph) -> list[MatchedPath]:
    """All maximal-length alignments of the reference path in the target.

    Depth-first over candidate choices.  After the first match, only the
    candidates at minimum finite distance from the last matched anchor are
    explored; unreachable candidates are discarded even when nothing
    closer exists.  Indices with no viable candidates are skipped.
    """
    if len(ap_ref) != len(cand_sets):
        raise ValueError("candidate sets must align with the anchor path")
    n = len(ap_ref)
    results: list[tuple[tuple[int, Anchor | None], ...]] = []
    max_len = 0
    truncated = False
    budget = 500_000  # guards pathological tie explosions only

    def recurse(index: int, pairs: list[tuple[int, Anchor | None]],
                last: Anchor | None, matched: int):
        nonlocal max_len, truncated, results, budget
        budget -= 1
        if budget < 0:
            truncated = True
            return
        if index == n:
            if matched > max_len:
                max_len = matched
                results = [tuple(pairs)]
            elif matched == max_len:
                if len(results) < MAX_MATCHED_PATHS:
                    results.append(tuple(pairs))
                else:
                    truncated = True
            return
        options = cand_sets[index].candidates
        if last is not None and options:
            dists = [(tgt_ag.distance(last, c), c) for c in options]
            finite = [(d, c) for d, c in dists if d is not None]
            if finite:
                dmin = min(d for d, _ in finite)
                options = tuple(c for d, c in finite if d == dmin)
            else:
                options = ()
        if not options:
            pairs.append((index, None))
            recurse(index + 1, pairs, last, matched)
            pairs.pop()
            return
        for cand in options:
            pairs.append((index, cand))
            recurse(index + 1, pairs, cand, matched + 1)
            pairs.pop()

    recurse(0, [], None, 0)
    if truncated:
        log.warning("path matching truncated (cap %d paths)",
                    MAX_MATCHED_PATHS)
    return [MatchedPath(p) for p in results]


def _path_aux_score(ap_ref: Sequence[SigAnchor], match: MatchedPath) -> float:
    total = 0
    for idx, anchor in match.pairs:
        if anchor is not None:
            total += lcs_length(ap_ref[idx].aux, anchor.aux)
    return total


def match_context(ap_ref: Sequence[SigAnchor],
                  cand_sets: Sequence[CandidateSet],
                  tgt_ag: AnchorGraph,
                  t_cpm: float) -> MatchedPath | None:
    """Best context alignment, kept only when the matched ratio exceeds
    the threshold.  An empty reference path matches vacuously."""
    if not ap_ref:
        return MatchedPath(())
    matches = path_match(ap_ref, cand_sets, tgt_ag)
    best = max(matches, key=lambda m: (m.matched_count,
                                       _path_aux_score(ap_ref, m)))
    if best.ratio() > t_cpm:
        return best
    return None


def match_patch(ap_ref: Sequence[SigAnchor],
                cand_sets: Sequence[CandidateSet],
                tgt_ag: AnchorGraph) -> list[MatchedPath]:
    """Patch alignments must be gap-free; returns every full match."""
    if not ap_ref:
        return []
    matches = path_match(ap_ref, cand_sets, tgt_ag)
    return [m for m in matches if m.matched_count == len(ap_ref)]


# ---------------------------------------------------------------------------
# Patch path verification
# ---------------------------------------------------------------------------

def _side_distance(tgt_ag: AnchorGraph, ref_d: int | None,
                   boundary_from: Anchor | None,
                   boundary_to: Anchor | None) -> tuple[bool, float]:
    """One inequality of the verification condition.

    Returns (satisfied, matched distance).  A missing matched side is
    acceptable only when the reference-side distance is infinite.
    """
    ref = math.inf if ref_d is None else ref_d
    if boundary_from is None or boundary_to is None:
        return (ref == math.inf), math.inf
    d = tgt_ag.distance(boundary_from, boundary_to)
    dist = math.inf if d is None else d
    return dist <= ref, dist


def verify_patch_path(matched: MatchedPath, bw: MatchedPath | None,
                      fw: MatchedPath | None, sig: Signature,
                      tgt_ag: AnchorGraph) -> tuple[bool, float, float]:
    """Check that the matched patch keeps the reference's control-flow
    relationship with its matched context.

    Returns (verified, d_bw, d_fw); distances are taken between the last
    matched anchor of one path and the first of the next.
    """
    patch_first = matched.first_matched()
    patch_last = matched.last_matched()
    bw_last = bw.last_matched() if bw is not None else None
    fw_first = fw.first_matched() if fw is not None else None
    ok_bw, d_bw = _side_distance(tgt_ag, sig.d_bw_patch, bw_last,
                                 patch_first)
    ok_fw, d_fw = _side_distance(tgt_ag, sig.d_patch_fw, patch_last,
                                 fw_first)
    return ok_bw and ok_fw, d_bw, d_fw


def select_verified_patch(full_matches: Sequence[MatchedPath],
                          bw: MatchedPath | None, fw: MatchedPath | None,
                          sig: Signature, tgt_ag: AnchorGraph):
    """Verify every full patch match; keep the one closest to the context.

    Returns (winner or None, [(match, verified, d_bw, d_fw), ...]); the
    second element records every candidate for evidence reporting.
    """
    audited = []
    winner = None
    winner_key = None
    for match in full_matches:
        verified, d_bw, d_fw = verify_patch_path(match, bw, fw, sig, tgt_ag)
        audited.append((match, verified, d_bw, d_fw))
        if not verified:
            continue
        total = (0 if d_bw == math.inf else d_bw) + \
            (0 if d_fw == math.inf else d_fw)
        if winner_key is None or total < winner_key:
            winner, winner_key = (match, d_bw, d_fw), total
    return winner, audited
