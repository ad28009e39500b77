"""Pluggable callee similarity for matching CALL anchors in stripped code.

When a reference callee's symbol is unavailable in the target, the search
space is restricted to the functions the target actually invokes, and a
similarity provider decides the match.  Exact symbol names always win
without consulting the provider.  Providers shipped here: a precomputed
score matrix (CSV, for plugging an offline BCSD tool) and a
mnemonic-histogram fallback.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Protocol, Sequence

from .cfg import FunctionCFG, symbol_available

log = logging.getLogger("ploc.callsim")

DEFAULT_T_BCSD = 0.9


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class Callee:
    """A callable referenced by name, with its CFG when resolvable."""
    name: str | None
    cfg: FunctionCFG | None = None

    @property
    def symbol(self) -> str | None:
        return self.name if symbol_available(self.name) else None


class SimilarityProvider(Protocol):
    def scores(self, query: Callee,
               candidates: Sequence[Callee]) -> list[float]:
        """Similarity in [0,1] per candidate; deterministic for fixed
        inputs; must be safe to call from concurrent workers."""
        ...


def _mnemonic_histogram(cfg: FunctionCFG) -> Counter:
    counts: Counter = Counter()
    for insn in cfg.iter_instructions():
        counts[insn.mnemonic] += 1
    return counts


def histogram_similarity(a: FunctionCFG, b: FunctionCFG) -> float:
    """Cosine similarity of mnemonic-frequency vectors."""
    ha, hb = _mnemonic_histogram(a), _mnemonic_histogram(b)
    if not ha and not hb:
        return 1.0
    if not ha or not hb:
        return 0.0
    dot = sum(ha[m] * hb[m] for m in ha.keys() & hb.keys())
    norm = math.sqrt(sum(v * v for v in ha.values())) * \
        math.sqrt(sum(v * v for v in hb.values()))
    return dot / norm


class HistogramProvider:
    """Default stand-in provider; needs both CFGs to score."""

    def scores(self, query: Callee,
               candidates: Sequence[Callee]) -> list[float]:
        if query.cfg is None:
            raise ProviderError(
                f"histogram provider has no CFG for query "
                f"{query.name or '?'}")
        out = []
        for cand in candidates:
            out.append(0.0 if cand.cfg is None
                       else histogram_similarity(query.cfg, cand.cfg))
        return out


class MatrixProvider:
    """Pairwise scores loaded from a query_id,candidate_id,score CSV."""

    def __init__(self, path):
        self._scores: dict[tuple[str, str], float] = {}
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.reader(fh):
                if not row or len(row) < 3:
                    continue
                query, cand, score = row[0].strip(), row[1].strip(), row[2]
                try:
                    self._scores[(query, cand)] = float(score)
                except ValueError:
                    if query.lower() in ("query", "query_id"):
                        continue  # header row
                    raise ProviderError(
                        f"{path}: bad score {score!r} for "
                        f"({query}, {cand})")

    def scores(self, query: Callee,
               candidates: Sequence[Callee]) -> list[float]:
        if query.name is None:
            return [0.0] * len(candidates)
        return [self._scores.get((query.name, c.name), 0.0)
                if c.name is not None else 0.0
                for c in candidates]


def match_callee(ref_callee: Callee, tgt_invoked: Sequence[Callee],
                 provider: SimilarityProvider | None,
                 t_bcsd: float = DEFAULT_T_BCSD) -> Callee | None:
    """Match a reference callee against the target's invoked functions.

    Exact symbol equality wins outright (no provider call); otherwise the
    highest-scoring candidate strictly above ``t_bcsd`` is returned, or
    None.  Provider failures are logged and treated as no match.
    """
    if ref_callee.symbol is not None:
        for cand in tgt_invoked:
            if cand.symbol == ref_callee.symbol:
                return cand
    if provider is None or not tgt_invoked:
        return None
    try:
        scores = provider.scores(ref_callee, tgt_invoked)
    except Exception as exc:
        log.warning("similarity provider failed for %s: %s",
                    ref_callee.name or "?", exc)
        return None
    if len(scores) != len(tgt_invoked):
        log.warning("similarity provider returned %d scores for %d "
                    "candidates; ignoring", len(scores), len(tgt_invoked))
        return None
    best_idx, best_score = -1, t_bcsd
    for i, score in enumerate(scores):
        if score > best_score:
            best_idx, best_score = i, score
    return tgt_invoked[best_idx] if best_idx >= 0 else None
