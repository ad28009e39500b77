"""Anchor mining and anchor-graph construction.

Anchors are the compiler-stable facts of a function: the constant compared
by a condition comparison, or the callee of a function call, plus auxiliary
constants gathered by backward slicing from the instructions the key
instruction data-depends on.  The anchor graph (AG) connects anchors along
the function's control flow, with loop back-edges removed so the graph is
a DAG.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .cfg import (
    FunctionCFG, Instruction, Imm, Mem, Reg, Sym,
    register_family, symbol_available,
)

log = logging.getLogger("ploc.anchors")

CMP = "CMP"
CALL = "CALL"

# Comparison of two variables carries no constant; flagged specially.
INF_VALUE = "INF"
# Callee whose identity is unknown (indirect call, or stripped name).
UNRESOLVED = "?"

COMPARISON_MNEMONICS = frozenset({"cmp", "test"})

# Registers whose displacements are frame- or code-relative and therefore
# not stable across compilers; loads through them yield no offset aux.
_UNSTABLE_BASES = frozenset({"rsp", "rbp", "rip"})

_ARITH_TAGS = {
    "add": "add", "sub": "sub",
    "imul": "mul", "mul": "mul",
    "idiv": "div", "div": "div",
    "and": "and", "or": "or", "xor": "xor",
    "shl": "shl", "shr": "shr", "sar": "shl", "sal": "shl",
}

SLICE_INSTRUCTION_BUDGET = 64
MAX_CALL_PARAMS = 8

AuxEntry = tuple[int | str, str]


@dataclass(frozen=True)
class Anchor:
    kind: str
    value: int | str
    aux: tuple[AuxEntry, ...]
    site: int
    block: str
    weight: float | None = field(default=None, compare=False)
    # Pool id of the callee for CALL anchors; kept for similarity lookups
    # even when the value is the unresolved marker.
    callee: str | None = field(default=None, compare=False)

    def identity(self) -> tuple:
        """Two anchors are the same feature iff value, kind and aux agree."""
        return (self.kind, self.value, self.aux)

    def value_key(self) -> tuple:
        return (self.value, self.kind)


@dataclass(frozen=True)
class KeyInstruction:
    instruction: Instruction
    kind: str
    value: int | str
    callee: str | None = None


class AnchorGraph:
    """Directed acyclic graph of anchors following control flow."""

    def __init__(self, anchors: Sequence[Anchor],
                 edges: Iterable[tuple[int, int]], origin: str = ""):
        self.anchors: tuple[Anchor, ...] = tuple(anchors)
        self.origin = origin
        self.edges: tuple[tuple[int, int], ...] = tuple(sorted(set(edges)))
        n = len(self.anchors)
        succ: list[list[int]] = [[] for _ in range(n)]
        pred: list[list[int]] = [[] for _ in range(n)]
        for src, dst in self.edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise ValueError(f"edge ({src},{dst}) out of range")
            succ[src].append(dst)
            pred[dst].append(src)
        self._succ = tuple(tuple(s) for s in succ)
        self._pred = tuple(tuple(p) for p in pred)
        self._index = {a: i for i, a in enumerate(self.anchors)}
        self._dist_cache: dict[int, dict[int, int]] = {}

    def __len__(self) -> int:
        return len(self.anchors)

    def index_of(self, anchor: Anchor) -> int:
        return self._index[anchor]

    def successors(self, anchor: Anchor) -> tuple[Anchor, ...]:
        return tuple(self.anchors[i]
                     for i in self._succ[self.index_of(anchor)])

    def predecessors(self, anchor: Anchor) -> tuple[Anchor, ...]:
        return tuple(self.anchors[i]
                     for i in self._pred[self.index_of(anchor)])

    @property
    def entry_anchors(self) -> tuple[Anchor, ...]:
        return tuple(a for i, a in enumerate(self.anchors)
                     if not self._pred[i])

    @property
    def exit_anchors(self) -> tuple[Anchor, ...]:
        return tuple(a for i, a in enumerate(self.anchors)
                     if not self._succ[i])

    def distance(self, a: Anchor, b: Anchor) -> int | None:
        """Shortest-path edge count a->b; None when unreachable; d(a,a)=0."""
        src = self.index_of(a)
        row = self._dist_cache.get(src)
        if row is None:
            row = self._bfs(src)
            self._dist_cache[src] = row
        return row.get(self.index_of(b))

    def _bfs(self, src: int) -> dict[int, int]:
        dist = {src: 0}
        frontier = [src]
        while frontier:
            nxt = []
            for node in frontier:
                for succ in self._succ[node]:
                    if succ not in dist:
                        dist[succ] = dist[node] + 1
                        nxt.append(succ)
            frontier = nxt
        return dist

    def weighted(self) -> "AnchorGraph":
        """Return a copy whose anchors carry w = 1/TF weights."""
        counts: dict[tuple, int] = {}
        for anchor in self.anchors:
            counts[anchor.identity()] = counts.get(anchor.identity(), 0) + 1
        anchors = [replace(a, weight=1.0 / counts[a.identity()])
                   for a in self.anchors]
        return AnchorGraph(anchors, self.edges, self.origin)

    def to_dot(self) -> str:
        lines = [f'digraph "{self.origin or "ag"}" {{']
        for i, a in enumerate(self.anchors):
            aux = ",".join(f"({c},{t})" for c, t in a.aux)
            lines.append(f'  n{i} [label="{a.kind}:{a.value}|{aux}"];')
        for src, dst in self.edges:
            lines.append(f"  n{src} -> n{dst};")
        lines.append("}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Key instruction identification
# ---------------------------------------------------------------------------

def _normalize_callee(name: str | None) -> int | str:
    return name if symbol_available(name) else UNRESOLVED


def _comparison_value(insn: Instruction) -> int | str:
    ops = insn.parsed
    if insn.mnemonic == "test":
        # test computes an AND and sets flags against zero; an immediate
        # mask is recorded during slicing, not here.
        return 0
    if len(ops) >= 2 and isinstance(ops[1], Imm):
        return ops[1].value
    return INF_VALUE


def identify_key_instructions(f: FunctionCFG) -> list[KeyInstruction]:
    """Find condition-comparison and function-call instructions.

    Equivalent forms are canonicalized: ``test r, r`` -> compare with 0,
    ``cmp r1, r2`` -> compare of two variables (INF), ``call reg`` ->
    unresolved callee.  A ``jmp`` recorded in the function's invoked list
    (or targeting a symbol outside the function) is a tail call.
    """
    invoked = f.invoked_map()
    keys: list[KeyInstruction] = []
    for block in f.reachable_blocks():
        for insn in block.instructions:
            if insn.mnemonic in COMPARISON_MNEMONICS:
                keys.append(KeyInstruction(
                    insn, CMP, _comparison_value(insn)))
            elif insn.mnemonic == "call":
                callee = invoked.get(insn.addr)
                if callee is None and insn.parsed and isinstance(
                        insn.parsed[0], Sym):
                    callee = insn.parsed[0].name
                keys.append(KeyInstruction(
                    insn, CALL, _normalize_callee(callee), callee))
            elif insn.mnemonic == "jmp":
                callee = None
                if insn.addr in invoked:
                    callee = invoked[insn.addr]
                elif (insn.parsed and isinstance(insn.parsed[0], Sym)
                        and insn.parsed[0].name not in f.blocks):
                    callee = insn.parsed[0].name
                else:
                    continue
                keys.append(KeyInstruction(
                    insn, CALL, _normalize_callee(callee), callee))
    keys.sort(key=lambda k: k.instruction.addr)
    return keys


# ---------------------------------------------------------------------------
# Backward slicing
# ---------------------------------------------------------------------------

def _mem_offset_aux(mem: Mem) -> AuxEntry | None:
    regs = {register_family(r) for r in mem.registers()}
    if regs & _UNSTABLE_BASES:
        return None
    return (mem.disp, "offset")


class _Tracker:
    """Tracked-variable set for the backward data slice."""

    def __init__(self):
        self.regs: set[str] = set()
        self.mems: set[tuple] = set()

    def track_operand(self, op) -> None:
        if isinstance(op, Reg):
            self.regs.add(register_family(op.name))
        elif isinstance(op, Mem):
            self.mems.add(op.key())
            for r in op.registers():
                self.regs.add(register_family(r))

    def tracks_reg(self, name: str) -> bool:
        return register_family(name) in self.regs

    def drop_reg(self, name: str) -> None:
        self.regs.discard(register_family(name))

    def tracks_mem(self, mem: Mem) -> bool:
        return mem.key() in self.mems

    def drop_mem(self, mem: Mem) -> None:
        self.mems.discard(mem.key())

    def empty(self) -> bool:
        return not self.regs and not self.mems


def _slice_step(insn: Instruction, tracker: _Tracker,
                aux: list[AuxEntry]) -> None:
    mnem = insn.mnemonic
    ops = insn.parsed

    if mnem == "call":
        # The return-value register is redefined by the call; its origin
        # is outside the slice.
        tracker.drop_reg("rax")
        return
    if mnem == "pop" and ops and isinstance(ops[0], Reg):
        if tracker.tracks_reg(ops[0].name):
            tracker.drop_reg(ops[0].name)
        return
    if len(ops) < 1:
        return

    dst = ops[0]
    src = ops[1] if len(ops) > 1 else None

    if mnem in ("mov", "movzx", "movsx", "movsxd"):
        if isinstance(dst, Reg) and tracker.tracks_reg(dst.name):
            tracker.drop_reg(dst.name)
            _consume_source(src, tracker, aux)
        elif isinstance(dst, Mem) and tracker.tracks_mem(dst):
            tracker.drop_mem(dst)
            _consume_source(src, tracker, aux)
        return

    if mnem == "lea" and isinstance(dst, Reg) and isinstance(src, Mem):
        if tracker.tracks_reg(dst.name):
            tracker.drop_reg(dst.name)
            if src.disp:
                entry = _mem_offset_aux(src)
                if entry is not None:
                    aux.append(entry)
            for r in src.registers():
                tracker.regs.add(register_family(r))
        return

    if mnem == "xor" and isinstance(dst, Reg) and isinstance(src, Reg) \
            and register_family(dst.name) == register_family(src.name):
        # Self-xor is the idiomatic zero assignment.
        if tracker.tracks_reg(dst.name):
            tracker.drop_reg(dst.name)
            aux.append((0, "mov"))
        return

    tag = _ARITH_TAGS.get(mnem)
    if tag is not None:
        if mnem == "imul" and len(ops) == 3:
            # imul dst, src, imm redefines dst from src * imm.
            if isinstance(dst, Reg) and tracker.tracks_reg(dst.name):
                tracker.drop_reg(dst.name)
                if isinstance(ops[2], Imm):
                    aux.append((ops[2].value, "mul"))
                _consume_source(ops[1], tracker, aux)
            return
        target_tracked = (
            (isinstance(dst, Reg) and tracker.tracks_reg(dst.name))
            or (isinstance(dst, Mem) and tracker.tracks_mem(dst)))
        if target_tracked:
            if isinstance(src, Imm):
                aux.append((src.value, tag))
            elif isinstance(src, (Reg, Mem)):
                # dst stays tracked (it is also a source of the operation);
                # the other operand joins the slice.
                if isinstance(src, Reg):
                    tracker.regs.add(register_family(src.name))
                else:
                    entry = _mem_offset_aux(src)
                    if entry is not None:
                        aux.append(entry)
                    tracker.mems.add(src.key())
                    for r in src.registers():
                        tracker.regs.add(register_family(r))
        return


def _consume_source(src, tracker: _Tracker, aux: list[AuxEntry]) -> None:
    """Fold the operand that redefines a tracked variable into the slice."""
    if isinstance(src, Imm):
        aux.append((src.value, "mov"))
    elif isinstance(src, Reg):
        tracker.regs.add(register_family(src.name))
    elif isinstance(src, Mem):
        entry = _mem_offset_aux(src)
        if entry is not None:
            aux.append(entry)
        tracker.mems.add(src.key())
        for r in src.registers():
            tracker.regs.add(register_family(r))
    # Sym/Opaque sources are untrackable; the chain ends there.


def _block_order(f: FunctionCFG) -> dict[str, list[Instruction]]:
    return {b.id: list(b.instructions) for b in f.blocks.values()}


def _unique_predecessors(f: FunctionCFG) -> dict[str, list[str]]:
    preds: dict[str, list[str]] = {bid: [] for bid in f.blocks}
    for block in f.blocks.values():
        for succ in block.successors:
            preds[succ].append(block.id)
    return preds


def _data_slice(f: FunctionCFG, key: Instruction) -> tuple[AuxEntry, ...]:
    tracker = _Tracker()
    aux: list[AuxEntry] = []
    for op in key.parsed:
        if isinstance(op, (Reg, Mem)):
            tracker.track_operand(op)
            if isinstance(op, Mem):
                entry = _mem_offset_aux(op)
                if entry is not None:
                    aux.append(entry)
    if key.mnemonic == "test" and len(key.parsed) >= 2 \
            and isinstance(key.parsed[1], Imm):
        # test r, imm is an AND against a mask folded into the compare.
        aux.append((key.parsed[1].value, "and"))

    insns = _block_order(f)
    preds = _unique_predecessors(f)
    block_id = _block_of(f, key.addr)
    position = next(i for i, insn in enumerate(insns[block_id])
                    if insn.addr == key.addr)

    examined = 0
    visited_blocks = {block_id}
    cur_block, cur_pos = block_id, position - 1
    while examined < SLICE_INSTRUCTION_BUDGET and not tracker.empty():
        if cur_pos < 0:
            uniq = preds[cur_block]
            if len(uniq) != 1 or uniq[0] in visited_blocks:
                break
            cur_block = uniq[0]
            visited_blocks.add(cur_block)
            cur_pos = len(insns[cur_block]) - 1
            continue
        insn = insns[cur_block][cur_pos]
        _slice_step(insn, tracker, aux)
        examined += 1
        cur_pos -= 1
    return tuple(aux)


def _param_slice(f: FunctionCFG, key: Instruction) -> tuple[AuxEntry, ...]:
    """Immediate arguments staged for a call via the x86 stack convention."""
    insns = _block_order(f)
    block_id = _block_of(f, key.addr)
    position = next(i for i, insn in enumerate(insns[block_id])
                    if insn.addr == key.addr)
    params: list[AuxEntry] = []
    for insn in reversed(insns[block_id][:position]):
        if insn.mnemonic == "call":
            break
        ops = insn.parsed
        if insn.mnemonic == "push" and ops and isinstance(ops[0], Imm):
            params.append((ops[0].value, "param"))
        elif (insn.mnemonic == "mov" and len(ops) >= 2
                and isinstance(ops[0], Mem)
                and ops[0].base is not None
                and register_family(ops[0].base) == "rsp"
                and ops[0].index is None
                and isinstance(ops[1], Imm)):
            params.append((ops[1].value, "param"))
        if len(params) >= MAX_CALL_PARAMS:
            break
    params.reverse()  # report in program order
    return tuple(params)


def _block_of(f: FunctionCFG, addr: int) -> str:
    for block in f.blocks.values():
        for insn in block.instructions:
            if insn.addr == addr:
                return block.id
    raise KeyError(f"address {addr:#x} not found in function {f.uid}")


def backward_slice(f: FunctionCFG, key: Instruction) -> tuple[AuxEntry, ...]:
    """Collect auxiliary constants for one key instruction.

    Comparison keys track the compared variables backward through copies
    and arithmetic within the block and through chains of unique
    predecessor blocks; call keys collect immediate stack arguments.
    """
    if key.mnemonic in COMPARISON_MNEMONICS:
        return _data_slice(f, key)
    return _param_slice(f, key)


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------

def _acyclic_successors(f: FunctionCFG) -> dict[str, tuple[str, ...]]:
    """CFG successor map with DFS back-edges removed."""
    back_edges: set[tuple[str, str]] = set()
    state: dict[str, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[str, int]] = [(f.entry, 0)]
    state[f.entry] = 1
    while stack:
        block, child = stack[-1]
        succs = f.blocks[block].successors
        if child < len(succs):
            stack[-1] = (block, child + 1)
            nxt = succs[child]
            st = state.get(nxt)
            if st == 1:
                back_edges.add((block, nxt))
            elif st is None:
                state[nxt] = 1
                stack.append((nxt, 0))
        else:
            state[block] = 2
            stack.pop()
    return {
        bid: tuple(s for s in f.blocks[bid].successors
                   if (bid, s) not in back_edges and s not in f.unreachable)
        for bid in f.blocks if bid not in f.unreachable
    }


def build_anchor_graph(f: FunctionCFG) -> AnchorGraph:
    """Build the anchor graph of *f*.

    One anchor per key instruction; an edge connects two anchors iff the
    second's instruction is reachable from the first's along the (acyclic)
    control flow without crossing another key instruction.
    """
    keys = identify_key_instructions(f)
    anchors = [
        Anchor(kind=k.kind, value=k.value,
               aux=backward_slice(f, k.instruction),
               site=k.instruction.addr,
               block=_block_of(f, k.instruction.addr),
               callee=k.callee)
        for k in keys
    ]
    index_by_site = {a.site: i for i, a in enumerate(anchors)}

    per_block: dict[str, list[int]] = {}
    for i, anchor in enumerate(anchors):
        per_block.setdefault(anchor.block, []).append(i)
    for lst in per_block.values():
        lst.sort(key=lambda i: anchors[i].site)

    succs = _acyclic_successors(f)

    # First anchors reachable from a block's start without crossing an
    # anchor; blocks with anchors stop the walk at their first one.
    first_reach: dict[str, frozenset[int]] = {}

    def reach(block: str, trail: frozenset) -> frozenset[int]:
        if block in first_reach:
            return first_reach[block]
        if block in trail:
            return frozenset()
        if per_block.get(block):
            result = frozenset({per_block[block][0]})
        else:
            acc: set[int] = set()
            for succ in succs.get(block, ()):
                acc |= reach(succ, trail | {block})
            result = frozenset(acc)
        first_reach[block] = result
        return result

    edges: set[tuple[int, int]] = set()
    for block, members in per_block.items():
        for a, b in zip(members, members[1:]):
            edges.add((a, b))
        last = members[-1]
        for succ in succs.get(block, ()):
            for target in reach(succ, frozenset({block})):
                edges.add((last, target))

    ag = AnchorGraph(anchors, edges, origin=f.uid)
    if len(index_by_site) != len(anchors):
        raise AssertionError("anchor sites must be unique")
    return ag


def compute_weights(ag: AnchorGraph) -> AnchorGraph:
    """Attach w = 1/TF to every anchor (TF over identical anchors)."""
    return ag.weighted()
