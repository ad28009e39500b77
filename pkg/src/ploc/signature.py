"""Signature generation: from a patch and two reference functions to a
portable (patch path, backward context, forward context) triple per side.

Patch lines are located in the reference source by normalized-line hashing
disambiguated with hunk context, then projected onto instructions through
the embedded debug line info.  Anchor weights (1/TF), the two priorities
for patch-path selection, and the greedy context walk operate on the
weighted anchor graph.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass

from .anchors import (
    Anchor, AnchorGraph, build_anchor_graph, compute_weights,
)
from .cfg import FunctionCFG
from .patch import Hunk, PatchFile

log = logging.getLogger("ploc.signature")

BLANK = "blank"
MAX_CANDIDATE_PATHS = 256

AuxEntry = tuple[int | str, str]


class SignatureError(ValueError):
    pass


class UndetectablePatchError(SignatureError):
    """The patch changes no key instructions on either side."""


# ---------------------------------------------------------------------------
# Source-line normalization and patch mapping
# ---------------------------------------------------------------------------

_LINE_COMMENT_RE = re.compile(r"//.*$|/\*.*?\*/")


def normalize_line(line: str) -> str:
    """Strip comments, braces, tabs and whitespace from one source line."""
    text = _LINE_COMMENT_RE.sub("", line)
    # An unterminated /* ... opens a block comment; drop the remainder.
    pos = text.find("/*")
    if pos >= 0:
        text = text[:pos]
    return re.sub(r"[{}\s]+", "", text)


def normalize_and_hash_line(line: str) -> str:
    """Stable 128-bit token of the normalized residue; 'blank' if empty."""
    residue = normalize_line(line)
    if not residue:
        return BLANK
    return hashlib.md5(residue.encode("utf-8")).hexdigest()


def _normalize_source(text: str) -> list[str]:
    """Per-line tokens for a whole file, tracking /* */ across lines."""
    tokens: list[str] = []
    in_comment = False
    for raw in text.splitlines():
        line = raw
        out = []
        i = 0
        while i < len(line):
            if in_comment:
                end = line.find("*/", i)
                if end < 0:
                    i = len(line)
                else:
                    in_comment = False
                    i = end + 2
            else:
                block = line.find("/*", i)
                lcom = line.find("//", i)
                if lcom >= 0 and (block < 0 or lcom < block):
                    out.append(line[i:lcom])
                    i = len(line)
                elif block >= 0:
                    out.append(line[i:block])
                    in_comment = True
                    i = block + 2
                else:
                    out.append(line[i:])
                    i = len(line)
        residue = re.sub(r"[{}\s]+", "", "".join(out))
        tokens.append(
            BLANK if not residue
            else hashlib.md5(residue.encode("utf-8")).hexdigest())
    return tokens


def _find_subsequence(haystack: list[str], needle: list[str]) -> list[int]:
    if not needle:
        return []
    positions = []
    for start in range(len(haystack) - len(needle) + 1):
        if haystack[start:start + len(needle)] == needle:
            positions.append(start)
    return positions


def _locate_hunk_side(src_tokens: list[str], hunk: Hunk,
                      side: str) -> list[int] | None:
    """1-based source line numbers of the hunk's changed lines, or None."""
    before, changed, after = hunk.side_sequence(side)
    if not changed:
        return []
    changed_tokens = [normalize_and_hash_line(l) for l in changed]
    # Widest context first; trim when the provided source does not cover
    # the full context (e.g. a function-only source snippet).
    attempts = [
        (list(before), list(after)),
        ([], list(after)),
        (list(before), []),
        ([], []),
    ]
    for ctx_before, ctx_after in attempts:
        needle = ([normalize_and_hash_line(l) for l in ctx_before]
                  + changed_tokens
                  + [normalize_and_hash_line(l) for l in ctx_after])
        if all(t == BLANK for t in needle):
            continue
        positions = _find_subsequence(src_tokens, needle)
        if len(positions) == 1:
            offset = positions[0] + len(ctx_before)
            return [offset + i + 1 for i in range(len(changed_tokens))]
        if len(positions) > 1:
            log.warning(
                "hunk at -%d/+%d matches source ambiguously (%d sites); "
                "using the first", hunk.old_start, hunk.new_start,
                len(positions))
            offset = positions[0] + len(ctx_before)
            return [offset + i + 1 for i in range(len(changed_tokens))]
    return None


def map_patch_to_blocks(f_ref: FunctionCFG, source: str, patch: PatchFile,
                        side: str,
                        src_file: str | None = None
                        ) -> frozenset[tuple[str, int]]:
    """Locate the patch's changed lines for one side in the reference.

    Returns the (block id, instruction address) pairs whose debug line
    info lands on a located patch line.  ``side`` is "vul" (deleted lines)
    or "fix" (added lines).  Line numbers in *source* must be the ones the
    reference binary's debug info refers to.
    """
    src_tokens = _normalize_source(source)
    mapped_lines: set[int] = set()
    for hunk in patch.hunks:
        changed = hunk.side_lines(side)
        if not changed:
            continue
        located = _locate_hunk_side(src_tokens, hunk, side)
        if located is None:
            # Per-line fallback: unique occurrences only.
            located = []
            for line in changed:
                token = normalize_and_hash_line(line)
                if token == BLANK:
                    continue
                occurrences = [i + 1 for i, t in enumerate(src_tokens)
                               if t == token]
                if len(occurrences) == 1:
                    located.append(occurrences[0])
                elif not occurrences:
                    log.warning("patch line not found in source: %r",
                                line.strip())
                else:
                    log.warning("patch line ambiguous in source, "
                                "skipped: %r", line.strip())
        mapped_lines.update(located)

    if not mapped_lines:
        log.warning("no %s-side patch lines mapped into %s",
                    side, f_ref.uid)
        return frozenset()

    want_file = os.path.basename(src_file) if src_file else None
    hits: set[tuple[str, int]] = set()
    for block in f_ref.reachable_blocks():
        for insn in block.instructions:
            if insn.source_line is None:
                continue
            fname, line = insn.source_line
            if line not in mapped_lines:
                continue
            if want_file and os.path.basename(fname) != want_file:
                continue
            hits.add((block.id, insn.addr))
    return frozenset(hits)


# ---------------------------------------------------------------------------
# Patch path selection and context extraction
# ---------------------------------------------------------------------------

def _patch_components(ag: AnchorGraph,
                      patch_anchors: set[Anchor]) -> list[list[Anchor]]:
    """Weakly-connected components of the patch-anchor induced subgraph."""
    members = [a for a in ag.anchors if a in patch_anchors]
    neighbors: dict[Anchor, set[Anchor]] = {a: set() for a in members}
    for src, dst in ag.edges:
        a, b = ag.anchors[src], ag.anchors[dst]
        if a in patch_anchors and b in patch_anchors:
            neighbors[a].add(b)
            neighbors[b].add(a)
    seen: set[Anchor] = set()
    components = []
    for anchor in members:
        if anchor in seen:
            continue
        comp = []
        stack = [anchor]
        seen.add(anchor)
        while stack:
            cur = stack.pop()
            comp.append(cur)
            for nxt in neighbors[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        comp.sort(key=lambda a: a.site)
        components.append(comp)
    return components


def _component_paths(ag: AnchorGraph,
                     component: list[Anchor]) -> list[tuple[Anchor, ...]]:
    """All simple entry-to-exit paths within one patch component."""
    comp = set(component)
    succ = {a: [s for s in ag.successors(a) if s in comp]
            for a in component}
    pred_count = {a: 0 for a in component}
    for a in component:
        for s in succ[a]:
            pred_count[s] += 1
    entries = [a for a in component if pred_count[a] == 0]
    paths: list[tuple[Anchor, ...]] = []
    capped = False

    def walk(node: Anchor, trail: list[Anchor]):
        nonlocal capped
        if len(paths) >= MAX_CANDIDATE_PATHS:
            capped = True
            return
        trail.append(node)
        nexts = [s for s in succ[node] if s not in trail]
        if not nexts:
            paths.append(tuple(trail))
        else:
            for nxt in sorted(nexts, key=lambda a: a.site):
                walk(nxt, trail)
        trail.pop()

    for entry in sorted(entries, key=lambda a: a.site):
        walk(entry, [])
    if capped:
        log.warning("patch component in %s exceeded %d candidate paths; "
                    "truncated", ag.origin, MAX_CANDIDATE_PATHS)
    return paths


def select_patch_path(ag: AnchorGraph, patch_anchors: set[Anchor],
                      other_ref_ag: AnchorGraph
                      ) -> tuple[Anchor, ...] | None:
    """Pick the most distinguishing patch path among all candidates.

    Priority 1: contains an anchor absent from the other reference.
    Priority 2: higher total weight.  Remaining ties break on lowest
    first-anchor address, then shorter path.
    """
    if not patch_anchors:
        return None
    for anchor in patch_anchors:
        if anchor.weight is None:
            raise SignatureError("select_patch_path requires a weighted AG")
    other_identities = {a.identity() for a in other_ref_ag.anchors}
    candidates: list[tuple[Anchor, ...]] = []
    for component in _patch_components(ag, set(patch_anchors)):
        candidates.extend(_component_paths(ag, component))
    if not candidates:
        return None

    def rank(path: tuple[Anchor, ...]):
        exclusive = any(a.identity() not in other_identities for a in path)
        total = sum(a.weight for a in path)
        return (-int(exclusive), -total, path[0].site, len(path))

    return min(candidates, key=rank)


def extract_context_paths(ag: AnchorGraph, patch_path: tuple[Anchor, ...],
                          exclude: set[Anchor] | None = None
                          ) -> tuple[tuple[Anchor, ...], tuple[Anchor, ...]]:
    """Greedy highest-weight walks out of the patch path.

    Backward from its first anchor to an AG entry, forward from its last
    anchor to an AG exit; patch anchors are never part of the context.
    Weight ties break on lowest site address.
    """
    if not patch_path:
        raise SignatureError("extract_context_paths requires a patch path")
    excluded = set(exclude) if exclude is not None else set(patch_path)
    excluded.update(patch_path)

    def walk(start: Anchor, neighbors) -> list[Anchor]:
        out: list[Anchor] = []
        current = start
        while True:
            options = [a for a in neighbors(current)
                       if a not in excluded and a not in out]
            if not options:
                break
            best = min(options, key=lambda a: (-a.weight, a.site))
            out.append(best)
            current = best
        return out

    bw = walk(patch_path[0], ag.predecessors)
    bw.reverse()  # control-flow order, ending just before the patch
    fw = walk(patch_path[-1], ag.successors)
    return tuple(bw), tuple(fw)


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SigAnchor:
    """Portable anchor: what survives into the signature database."""
    kind: str
    value: int | str
    aux: tuple[AuxEntry, ...]

    @classmethod
    def from_anchor(cls, anchor: Anchor) -> "SigAnchor":
        return cls(kind=anchor.kind, value=anchor.value, aux=anchor.aux)


@dataclass(frozen=True)
class Signature:
    patch_path: tuple[SigAnchor, ...] | None
    bw_path: tuple[SigAnchor, ...]
    fw_path: tuple[SigAnchor, ...]
    d_bw_patch: int | None  # None encodes an infinite distance
    d_patch_fw: int | None
    unique_values: frozenset[tuple[int | str, str]]
    origin: str


@dataclass(frozen=True)
class SignaturePair:
    cve: str
    vul: Signature
    fix: Signature


def _unique_values(ag: AnchorGraph) -> frozenset[tuple[int | str, str]]:
    return frozenset(a.value_key() for a in ag.anchors)


def _wire(path) -> tuple[SigAnchor, ...]:
    return tuple(SigAnchor.from_anchor(a) for a in path)


def _build_side(ag: AnchorGraph, patch_sites: frozenset[tuple[str, int]],
                other_ag: AnchorGraph, origin: str) -> Signature:
    sites = {addr for _block, addr in patch_sites}
    patch_anchors = {a for a in ag.anchors if a.site in sites}
    patch_path = select_patch_path(ag, patch_anchors, other_ag)
    if patch_path is None:
        return Signature(
            patch_path=None, bw_path=(), fw_path=(),
            d_bw_patch=None, d_patch_fw=None,
            unique_values=_unique_values(ag), origin=origin)
    bw, fw = extract_context_paths(ag, patch_path, exclude=patch_anchors)
    d_bw = ag.distance(bw[-1], patch_path[0]) if bw else None
    d_fw = ag.distance(patch_path[-1], fw[0]) if fw else None
    return Signature(
        patch_path=_wire(patch_path), bw_path=_wire(bw), fw_path=_wire(fw),
        d_bw_patch=d_bw, d_patch_fw=d_fw,
        unique_values=_unique_values(ag), origin=origin)


def generate_signature_pair(f_vul: FunctionCFG, f_fix: FunctionCFG,
                            src_vul: str, src_fix: str, patch: PatchFile,
                            cve: str = "",
                            src_vul_file: str | None = None,
                            src_fix_file: str | None = None
                            ) -> SignaturePair:
    """Run the whole generation pipeline for both reference functions."""
    vul_sites = map_patch_to_blocks(f_vul, src_vul, patch, "vul",
                                    src_file=src_vul_file)
    fix_sites = map_patch_to_blocks(f_fix, src_fix, patch, "fix",
                                    src_file=src_fix_file)
    ag_vul = compute_weights(build_anchor_graph(f_vul))
    ag_fix = compute_weights(build_anchor_graph(f_fix))
    sig_vul = _build_side(ag_vul, vul_sites, ag_fix, "vul")
    sig_fix = _build_side(ag_fix, fix_sites, ag_vul, "fix")
    if sig_vul.patch_path is None and sig_fix.patch_path is None:
        raise UndetectablePatchError(
            "undetectable patch: no key instructions on either side")
    return SignaturePair(cve=cve, vul=sig_vul, fix=sig_fix)


# ---------------------------------------------------------------------------
# Serialization (sigdb/<cve>.json)
# ---------------------------------------------------------------------------

def _anchor_to_json(anchor: SigAnchor) -> dict:
    return {"kind": anchor.kind, "value": anchor.value,
            "aux": [[c, t] for c, t in anchor.aux]}


def _anchor_from_json(obj: dict) -> SigAnchor:
    if not isinstance(obj, dict) or "kind" not in obj or "value" not in obj:
        raise SignatureError(f"malformed anchor record: {obj!r}")
    aux = tuple((c, t) for c, t in obj.get("aux", []))
    return SigAnchor(kind=obj["kind"], value=obj["value"], aux=aux)


def _dist_to_json(d: int | None):
    return "inf" if d is None else d


def _dist_from_json(v) -> int | None:
    if v == "inf" or v is None:
        return None
    return int(v)


def _side_to_json(sig: Signature) -> dict:
    return {
        "patch_path": (None if sig.patch_path is None
                       else [_anchor_to_json(a) for a in sig.patch_path]),
        "bw": [_anchor_to_json(a) for a in sig.bw_path],
        "fw": [_anchor_to_json(a) for a in sig.fw_path],
        "d_bw_patch": _dist_to_json(sig.d_bw_patch),
        "d_patch_fw": _dist_to_json(sig.d_patch_fw),
        "unique_values": sorted(
            ([v, k] for v, k in sig.unique_values),
            key=lambda e: (e[1], isinstance(e[0], str), str(e[0]))),
    }


def _side_from_json(obj: dict, origin: str) -> Signature:
    raw_patch = obj.get("patch_path")
    patch = (None if raw_patch is None
             else tuple(_anchor_from_json(a) for a in raw_patch))
    uv = frozenset((v, k) for v, k in obj.get("unique_values", []))
    return Signature(
        patch_path=patch,
        bw_path=tuple(_anchor_from_json(a) for a in obj.get("bw", [])),
        fw_path=tuple(_anchor_from_json(a) for a in obj.get("fw", [])),
        d_bw_patch=_dist_from_json(obj.get("d_bw_patch")),
        d_patch_fw=_dist_from_json(obj.get("d_patch_fw")),
        unique_values=uv,
        origin=origin)


def signature_pair_to_json(pair: SignaturePair) -> dict:
    return {"cve": pair.cve,
            "vul": _side_to_json(pair.vul),
            "fix": _side_to_json(pair.fix)}


def signature_pair_from_json(doc: dict) -> SignaturePair:
    if not isinstance(doc, dict) or "vul" not in doc or "fix" not in doc:
        raise SignatureError("malformed signature document")
    return SignaturePair(
        cve=doc.get("cve", ""),
        vul=_side_from_json(doc["vul"], "vul"),
        fix=_side_from_json(doc["fix"], "fix"))


def save_signature_pair(pair: SignaturePair, directory) -> str:
    """Write sigdb/<cve>.json atomically; returns the path."""
    os.makedirs(directory, exist_ok=True)
    name = pair.cve if pair.cve else "signature"
    path = os.path.join(directory, f"{name}.json")
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(signature_pair_to_json(pair), fh, indent=2,
                      sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_signature_pair(path) -> SignaturePair:
    with open(path, "r", encoding="utf-8") as fh:
        return signature_pair_from_json(json.load(fh))
