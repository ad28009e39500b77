from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from ploc.anchors import CALL, CMP, Anchor, AnchorGraph, INF_VALUE
from ploc.callsim import Callee
from ploc.detector import (
    CalleeMatcher, CandidateSet, MatchedPath, anchor_distance,
    build_candidate_sets, filter_irrelevant, lcs_length, match_context,
    match_patch, path_match, select_verified_patch, verify_patch_path,
)
from ploc.signature import SigAnchor, Signature, SignaturePair

from oracles import brute_force_distance, brute_force_path_match, \
    lcs_recursive


def mk(kind, value, site, aux=(), callee=None):
    return Anchor(kind=kind, value=value, aux=tuple(aux), site=site,
                  block=f"b{site}", callee=callee)


def sig_anchor(kind, value, aux=()):
    return SigAnchor(kind=kind, value=value, aux=tuple(aux))


def make_sig(patch=None, bw=(), fw=(), d_bw=None, d_fw=None, uv=(),
             origin="fix"):
    return Signature(patch_path=patch, bw_path=tuple(bw),
                     fw_path=tuple(fw), d_bw_patch=d_bw, d_patch_fw=d_fw,
                     unique_values=frozenset(uv), origin=origin)


def random_dag(rng, n, value_space=(0, 1, 2), aux_space=(0, 1),
               edge_p=0.3, call_p=0.2):
    anchors = []
    for i in range(n):
        if rng.random() < call_p:
            name = rng.choice(["alpha", "beta"])
            anchors.append(mk(CALL, name, i, callee=name))
        else:
            aux = tuple(
                (rng.choice(aux_space), rng.choice(("add", "offset")))
                for _ in range(rng.randint(0, 2)))
            anchors.append(mk(CMP, rng.choice(value_space), i, aux=aux))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)
             if rng.random() < edge_p]
    return AnchorGraph(anchors, edges)


def random_match_instance(rng):
    """A randomized path-matching instance within the oracle's scale:
    target AG <= 10 anchors, reference path <= 5, candidate sets <= 4."""
    ag = random_dag(rng, rng.randint(1, 10))
    ref = []
    for _ in range(rng.randint(1, 5)):
        if rng.random() < 0.2:
            ref.append(sig_anchor(CALL, rng.choice(["alpha", "beta"])))
        else:
            aux = tuple(
                (rng.choice((0, 1)), rng.choice(("add", "offset")))
                for _ in range(rng.randint(0, 2)))
            ref.append(sig_anchor(CMP, rng.choice((0, 1, 2, 7)), aux=aux))
    sets = build_candidate_sets(ref, ag, matcher=None)
    sets = [CandidateSet(ref=s.ref, candidates=s.candidates[:4])
            for s in sets]
    return ref, sets, ag


class TestFilterIrrelevant:
    def test_half_matching_passes(self):
        sig_vul = make_sig(uv={(2, CMP), (0xE, CMP), ("foobar", CALL),
                               (0, CMP)}, origin="vul")
        sig_fix = make_sig(uv={(99, CMP)})
        tgt = AnchorGraph([mk(CMP, 2, 1), mk(CMP, 0, 2)], [(0, 1)])
        pair = SignaturePair("x", sig_vul, sig_fix)
        passed, rho_vul, rho_fix = filter_irrelevant(pair, tgt, 0.4)
        assert rho_vul == pytest.approx(0.5)
        assert passed

    def test_disjoint_is_irrelevant(self):
        pair = SignaturePair(
            "x", make_sig(uv={(1, CMP)}, origin="vul"),
            make_sig(uv={(2, CMP)}))
        tgt = AnchorGraph([mk(CMP, 77, 1)], [])
        passed, rho_vul, rho_fix = filter_irrelevant(pair, tgt, 0.4)
        assert (rho_vul, rho_fix) == (0.0, 0.0)
        assert not passed

    def test_self_match_is_full(self):
        values = {(2, CMP), (5, CMP), ("g", CALL)}
        pair = SignaturePair("x", make_sig(uv=values, origin="vul"),
                             make_sig(uv=values))
        tgt = AnchorGraph([mk(CMP, 2, 1), mk(CMP, 5, 2),
                           mk(CALL, "g", 3, callee="g")], [(0, 1), (1, 2)])
        passed, rho_vul, _ = filter_irrelevant(pair, tgt, 0.4)
        assert rho_vul == pytest.approx(1.0)
        assert passed

    def test_empty_reference_rho_is_zero(self):
        pair = SignaturePair("x", make_sig(uv=set(), origin="vul"),
                             make_sig(uv=set()))
        tgt = AnchorGraph([mk(CMP, 1, 1)], [])
        passed, rho_vul, rho_fix = filter_irrelevant(pair, tgt, 0.4)
        assert (rho_vul, rho_fix) == (0.0, 0.0)
        assert not passed

    def test_boundary_not_exceeding_is_irrelevant(self):
        # rho equal to the threshold does not pass.
        pair = SignaturePair(
            "x",
            make_sig(uv={(1, CMP), (2, CMP), (3, CMP), (4, CMP),
                         (5, CMP)}, origin="vul"),
            make_sig(uv={(9, CMP)}))
        tgt = AnchorGraph([mk(CMP, 1, 1), mk(CMP, 2, 2)], [(0, 1)])
        passed, rho_vul, _ = filter_irrelevant(pair, tgt, 0.4)
        assert rho_vul == pytest.approx(0.4)
        assert not passed

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_in_target_anchors(self, seed):
        rng = random.Random(seed)
        sig = make_sig(uv={(v, CMP) for v in range(rng.randint(1, 6))})
        pair = SignaturePair("x", sig, sig)
        anchors = [mk(CMP, rng.randint(0, 8), i) for i in range(8)]
        previous = 0.0
        for cut in range(1, 9):
            tgt = AnchorGraph(anchors[:cut], [])
            _, rho, _ = filter_irrelevant(pair, tgt, 0.4)
            assert rho >= previous
            previous = rho


class TestAnchorDistance:
    def test_direct_edge(self):
        ag = AnchorGraph([mk(CMP, 1, 1), mk(CMP, 2, 2)], [(0, 1)])
        assert anchor_distance(ag, ag.anchors[0], ag.anchors[1]) == 1

    def test_unreachable_is_none(self):
        ag = AnchorGraph([mk(CMP, 1, 1), mk(CMP, 2, 2)], [])
        assert anchor_distance(ag, ag.anchors[0], ag.anchors[1]) is None

    def test_self_distance_zero(self):
        ag = AnchorGraph([mk(CMP, 1, 1)], [])
        assert anchor_distance(ag, ag.anchors[0], ag.anchors[0]) == 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_exhaustive_enumeration(self, seed):
        rng = random.Random(seed)
        ag = random_dag(rng, rng.randint(1, 10), edge_p=0.35)
        for a in ag.anchors:
            for b in ag.anchors:
                assert ag.distance(a, b) == brute_force_distance(ag, a, b)


class TestCandidateSets:
    def test_ordered_by_aux_agreement(self):
        ref = [sig_anchor(CMP, 0, aux=((0xE, "offset"),))]
        tgt = AnchorGraph([mk(CMP, 0, 1, aux=((3, "add"),)),
                           mk(CMP, 0, 2, aux=((0xE, "offset"),))], [(0, 1)])
        sets = build_candidate_sets(ref, tgt)
        assert [a.site for a in sets[0].candidates] == [2, 1]

    def test_value_mismatch_is_empty(self):
        ref = [sig_anchor(CMP, 42)]
        tgt = AnchorGraph([mk(CMP, 0, 1)], [])
        assert build_candidate_sets(ref, tgt)[0].candidates == ()

    def test_inf_matches_inf_only(self):
        ref = [sig_anchor(CMP, INF_VALUE)]
        tgt = AnchorGraph([mk(CMP, INF_VALUE, 1), mk(CMP, 0, 2)], [(0, 1)])
        sets = build_candidate_sets(ref, tgt)
        assert [a.site for a in sets[0].candidates] == [1]

    def test_call_via_matcher_over_invoked_only(self):
        class Recording:
            def __init__(self):
                self.calls = []

            def scores(self, query, candidates):
                self.calls.append(tuple(c.name for c in candidates))
                return [0.95 for _ in candidates]

        provider = Recording()
        tgt = AnchorGraph(
            [mk(CALL, "?", 1, callee="sub_a"),
             mk(CALL, "?", 2, callee="sub_b")], [(0, 1)])
        matcher = CalleeMatcher([Callee("sub_a"), Callee("sub_b")],
                                provider, 0.9)
        ref = [sig_anchor(CALL, "ssl3_send_alert")]
        sets = build_candidate_sets(ref, tgt, matcher)
        # Provider consulted once, over the invoked set only; the best
        # match resolves to sub_a (first of the ties).
        assert provider.calls == [("sub_a", "sub_b")]
        assert [a.callee for a in sets[0].candidates] == ["sub_a"]

    def test_exact_name_match_skips_provider(self):
        class Exploding:
            def scores(self, query, candidates):
                raise AssertionError("must not be called")

        tgt = AnchorGraph([mk(CALL, "foobar", 1, callee="foobar")], [])
        matcher = CalleeMatcher([Callee("foobar")], Exploding(), 0.9)
        sets = build_candidate_sets([sig_anchor(CALL, "foobar")], tgt,
                                    matcher)
        assert [a.site for a in sets[0].candidates] == [1]


def chain_ag(values):
    anchors = [mk(CMP, v, i) for i, v in enumerate(values)]
    return AnchorGraph(anchors, [(i, i + 1) for i in range(len(values) - 1)])


class TestPathMatch:
    def test_min_distance_candidate_chosen(self):
        # y1 at distance 1, y2 at distance 3: only y1 survives.
        x1 = mk(CMP, 10, 0)
        y1 = mk(CMP, 20, 1)
        m1 = mk(CMP, 99, 2)
        m2 = mk(CMP, 98, 3)
        y2 = mk(CMP, 20, 4)
        ag = AnchorGraph([x1, y1, m1, m2, y2],
                         [(0, 1), (0, 2), (2, 3), (3, 4)])
        ref = [sig_anchor(CMP, 10), sig_anchor(CMP, 20)]
        results = path_match(ref, build_candidate_sets(ref, ag), ag)
        assert len(results) == 1
        assert [a.site for a in results[0].matched_anchors()] == [0, 1]

    def test_gap_on_empty_candidate_set(self):
        y1 = mk(CMP, 20, 1)
        ag = AnchorGraph([y1], [])
        ref = [sig_anchor(CMP, 10), sig_anchor(CMP, 20)]
        results = path_match(ref, build_candidate_sets(ref, ag), ag)
        assert len(results) == 1
        assert results[0].pairs[0] == (0, None)
        assert results[0].matched_count == 1

    def test_ties_preserved(self):
        x1 = mk(CMP, 10, 0)
        y1 = mk(CMP, 20, 1)
        y2 = mk(CMP, 20, 2)
        ag = AnchorGraph([x1, y1, y2], [(0, 1), (0, 2)])
        ref = [sig_anchor(CMP, 10), sig_anchor(CMP, 20)]
        results = path_match(ref, build_candidate_sets(ref, ag), ag)
        matched = {tuple(a.site for a in m.matched_anchors())
                   for m in results}
        assert matched == {(0, 1), (0, 2)}

    def test_unreachable_candidates_discarded(self):
        # The only continuation is unreachable from the first match: the
        # second index becomes a gap even though a candidate exists.
        x1 = mk(CMP, 10, 0)
        y1 = mk(CMP, 20, 1)
        ag = AnchorGraph([x1, y1], [(1, 0)])  # y1 -> x1 only
        ref = [sig_anchor(CMP, 10), sig_anchor(CMP, 20)]
        results = path_match(ref, build_candidate_sets(ref, ag), ag)
        assert len(results) == 1
        assert results[0].matched_count == 1
        assert results[0].pairs[1] == (1, None)

    def test_empty_reference(self):
        ag = chain_ag([1, 2])
        assert path_match([], [], ag) == [MatchedPath(())]

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 10**6))
    def test_oracle_equivalence(self, seed):
        rng = random.Random(seed)
        ref, sets, ag = random_match_instance(rng)
        produced = {tuple(a for _, a in m.pairs)
                    for m in path_match(ref, sets, ag)}
        expected = brute_force_path_match(ref, sets, ag)
        assert produced == expected


class TestMatchContext:
    def _ag_and_sets(self, n_match):
        # Reference context of 4 anchors; n_match of them present.
        ref = [sig_anchor(CMP, 100 + i) for i in range(4)]
        values = [100 + i for i in range(n_match)] or [999]
        ag = chain_ag(values)
        return ref, build_candidate_sets(ref, ag), ag

    def test_half_matched_kept(self):
        ref, sets, ag = self._ag_and_sets(2)
        result = match_context(ref, sets, ag, 0.3)
        assert result is not None and result.matched_count == 2

    def test_quarter_matched_rejected(self):
        ref, sets, ag = self._ag_and_sets(1)
        assert match_context(ref, sets, ag, 0.3) is None

    def test_empty_reference_matches_vacuously(self):
        ag = chain_ag([1])
        result = match_context([], [], ag, 0.3)
        assert result == MatchedPath(())
        assert result.ratio() == 1.0


class TestMatchPatch:
    def test_full_match_kept(self):
        ref = [sig_anchor(CMP, 1), sig_anchor(CMP, 2)]
        ag = chain_ag([1, 2])
        results = match_patch(ref, build_candidate_sets(ref, ag), ag)
        assert len(results) == 1
        assert results[0].matched_count == 2

    def test_gap_disqualifies(self):
        ref = [sig_anchor(CMP, 1), sig_anchor(CMP, 77)]
        ag = chain_ag([1, 2])
        assert match_patch(ref, build_candidate_sets(ref, ag), ag) == []


class TestVerification:
    def _setting(self):
        # Target: ctx -> p1 -> p2 -> fwc, plus a far-away patch-similar
        # pair unreachable from ctx.
        ctx = mk(CMP, 5, 0, aux=((0xE, "and"),))
        p1 = mk(CMP, 0, 1, aux=((0x88, "offset"),))
        p2 = mk(CALL, "alert", 2, callee="alert")
        fwc = mk(CALL, "cleanup", 3, callee="cleanup")
        y1 = mk(CMP, 0, 4, aux=((0x88, "offset"),))
        y2 = mk(CALL, "alert", 5, callee="alert")
        ag = AnchorGraph([ctx, p1, p2, fwc, y1, y2],
                         [(0, 1), (1, 2), (2, 3), (4, 5), (5, 0)])
        sig = make_sig(
            patch=(sig_anchor(CMP, 0, ((0x88, "offset"),)),
                   sig_anchor(CALL, "alert")),
            bw=(sig_anchor(CMP, 5, ((0xE, "and"),)),),
            fw=(sig_anchor(CALL, "cleanup"),),
            d_bw=1, d_fw=1)
        bw_m = MatchedPath(((0, ctx),))
        fw_m = MatchedPath(((0, fwc),))
        real = MatchedPath(((0, p1), (1, p2)))
        decoy = MatchedPath(((0, y1), (1, y2)))
        return ag, sig, bw_m, fw_m, real, decoy

    def test_real_patch_verified_at_boundary(self):
        ag, sig, bw_m, fw_m, real, _ = self._setting()
        ok, d_bw, d_fw = verify_patch_path(real, bw_m, fw_m, sig, ag)
        assert ok and d_bw == 1 and d_fw == 1

    def test_unreachable_decoy_rejected(self):
        ag, sig, bw_m, fw_m, _, decoy = self._setting()
        ok, d_bw, _ = verify_patch_path(decoy, bw_m, fw_m, sig, ag)
        assert not ok and d_bw == math.inf

    def test_distance_violation_rejected(self):
        ag, sig, bw_m, fw_m, real, _ = self._setting()
        tight = make_sig(patch=sig.patch_path, bw=sig.bw_path,
                         fw=sig.fw_path, d_bw=0, d_fw=1)
        ok, _, _ = verify_patch_path(real, bw_m, fw_m, tight, ag)
        assert not ok

    def test_missing_context_fails_unless_ref_infinite(self):
        ag, sig, _, fw_m, real, _ = self._setting()
        ok, _, _ = verify_patch_path(real, None, fw_m, sig, ag)
        assert not ok
        relaxed = make_sig(patch=sig.patch_path, bw=(), fw=sig.fw_path,
                           d_bw=None, d_fw=1)
        ok2, _, _ = verify_patch_path(real, None, fw_m, relaxed, ag)
        assert ok2

    def test_minimum_distance_candidate_selected(self):
        # Two verified candidates at context distances 1 and 2.
        ctx = mk(CMP, 5, 0)
        near = mk(CMP, 0, 1)
        mid = mk(CMP, 99, 2)
        far = mk(CMP, 0, 3)
        ag = AnchorGraph([ctx, near, mid, far],
                         [(0, 1), (0, 2), (2, 3)])
        sig = make_sig(patch=(sig_anchor(CMP, 0),),
                       bw=(sig_anchor(CMP, 5),), fw=(), d_bw=2,
                       d_fw=None)
        bw_m = MatchedPath(((0, ctx),))
        cand_near = MatchedPath(((0, near),))
        cand_far = MatchedPath(((0, far),))
        winner, audited = select_verified_patch(
            [cand_far, cand_near], bw_m, MatchedPath(()), sig, ag)
        assert winner is not None
        assert winner[0] is cand_near
        assert len(audited) == 2


class TestLCS:
    def test_pairs_match_on_constant_and_tag(self):
        ref = ((0xE, "offset"), (2, "add"))
        got = ((0xE, "offset"), (9, "add"))
        assert lcs_length(ref, got) == 1

    @settings(max_examples=120, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3),
                              st.sampled_from(["add", "offset", "param"])),
                    max_size=8),
           st.lists(st.tuples(st.integers(0, 3),
                              st.sampled_from(["add", "offset", "param"])),
                    max_size=8))
    def test_against_recursive_oracle(self, a, b):
        assert lcs_length(a, b) == lcs_recursive(a, b)
