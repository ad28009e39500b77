"""CFG-bundle interchange model.

A *bundle* is a JSON document describing the disassembled functions of one
binary: basic blocks, instructions, edges, the call sites each function
makes ("invoked"), and optional per-instruction source line info from debug
data.  The schema:

    {"metadata": {"compiler": str, "optimization": str, "stripped": bool},
     "functions": [{"name": str|null,
                    "entry": str,
                    "blocks": [{"id": str,
                                "instructions": [{"addr": int,
                                                  "mnemonic": str,
                                                  "operands": [str],
                                                  "line": [str, int]|null}],
                                "succs": [str]}],
                    "invoked": [{"site": int, "callee": str|null}]}]}

Operand strings use a small fixed grammar: a register token ("eax"), an
immediate integer ("2", "0xE", "-4"), a memory expression
("[eax+ebx*4+0xE]", any subset of base/index*scale/disp), or a bare symbol
token ("foobar").  Anything else is kept as an opaque token and ignored by
downstream analyses.

All model types are immutable after load and safe to share across workers.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


class BundleError(ValueError):
    """Base class for bundle loading failures."""


class ParseError(BundleError):
    """Schema violation; message names the offending field and location."""


class IntegrityError(BundleError):
    """Structurally valid JSON whose cross-references are inconsistent."""


MAX_ADDRESS = 2**64

# Auto-generated names produced by disassemblers for unnamed functions.
# Such names are treated as *unavailable* symbols: they identify a pool
# entry but never participate in exact-name matching.
STRIPPED_NAME_RE = re.compile(r"^sub_[0-9a-fA-F]+$")


def symbol_available(name: str | None) -> bool:
    """True when *name* is a real symbol usable for exact-name matching."""
    return name is not None and STRIPPED_NAME_RE.match(name) is None


# ---------------------------------------------------------------------------
# Operand grammar
# ---------------------------------------------------------------------------

_GP = [
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "rip",
    "eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp", "eip",
    "ax", "bx", "cx", "dx", "si", "di", "bp", "sp",
    "al", "bl", "cl", "dl", "ah", "bh", "ch", "dh",
    "sil", "dil", "bpl", "spl",
]
_EXT = [f"r{n}{s}" for n in range(8, 16) for s in ("", "d", "w", "b")]
_VEC = [f"{p}{n}" for p in ("xmm", "ymm") for n in range(16)]
X86_REGISTERS = frozenset(_GP + _EXT + _VEC)

# Sub-register -> canonical 64-bit family name, used so that dataflow
# tracking sees "al", "ax", "eax" and "rax" as the same variable.
_FAMILY_BASE = {
    "a": "rax", "b": "rbx", "c": "rcx", "d": "rdx",
    "si": "rsi", "di": "rdi", "bp": "rbp", "sp": "rsp", "ip": "rip",
}
REG_FAMILY: dict[str, str] = {}
for _letter, _canon in (("a", "rax"), ("b", "rbx"), ("c", "rcx"), ("d", "rdx")):
    for _r in (f"r{_letter}x", f"e{_letter}x", f"{_letter}x",
               f"{_letter}l", f"{_letter}h"):
        REG_FAMILY[_r] = _canon
for _stem in ("si", "di", "bp", "sp", "ip"):
    for _r in (f"r{_stem}", f"e{_stem}", _stem, f"{_stem}l"):
        REG_FAMILY[_r] = f"r{_stem}"
for _n in range(8, 16):
    for _s in ("", "d", "w", "b"):
        REG_FAMILY[f"r{_n}{_s}"] = f"r{_n}"
for _v in _VEC:
    REG_FAMILY[_v] = _v


def register_family(name: str) -> str:
    return REG_FAMILY.get(name, name)


_IMM_RE = re.compile(r"^-?(?:0[xX][0-9a-fA-F]+|\d+)$")
_SYM_RE = re.compile(r"^[A-Za-z_.@$][A-Za-z0-9_.@$]*$")
_SCALED_RE = re.compile(r"^([a-z0-9]+)\*([1248])$")


@dataclass(frozen=True)
class Reg:
    name: str


@dataclass(frozen=True)
class Imm:
    value: int


@dataclass(frozen=True)
class Mem:
    base: str | None = None
    index: str | None = None
    scale: int = 1
    disp: int = 0

    def registers(self) -> tuple[str, ...]:
        return tuple(r for r in (self.base, self.index) if r is not None)

    def key(self) -> tuple:
        """Canonical identity for syntactic memory-slot tracking."""
        base = register_family(self.base) if self.base else None
        index = register_family(self.index) if self.index else None
        return ("mem", base, index, self.scale, self.disp)


@dataclass(frozen=True)
class Sym:
    name: str


@dataclass(frozen=True)
class Opaque:
    text: str


Operand = Reg | Imm | Mem | Sym | Opaque


def _parse_int(text: str) -> int:
    return int(text, 0)


def parse_operand(text: str) -> Operand:
    """Parse one operand string against the fixed grammar.

    Unparseable text degrades to Opaque rather than failing: the model
    keeps it verbatim and the analyses ignore it.
    """
    text = text.strip()
    if text in X86_REGISTERS:
        return Reg(text)
    if _IMM_RE.match(text):
        return Imm(_parse_int(text))
    if text.startswith("[") and text.endswith("]"):
        mem = _parse_mem(text[1:-1])
        if mem is not None:
            return mem
        return Opaque(text)
    if _SYM_RE.match(text):
        return Sym(text)
    return Opaque(text)


def _parse_mem(inner: str) -> Mem | None:
    # Split "eax+ebx*4+0xE" / "eax-0x8" into signed terms.
    inner = inner.replace(" ", "")
    if not inner:
        return None
    terms: list[tuple[int, str]] = []
    sign, start = 1, 0
    if inner[0] in "+-":
        sign = -1 if inner[0] == "-" else 1
        start = 1
    buf = ""
    for ch in inner[start:]:
        if ch in "+-":
            if not buf:
                return None
            terms.append((sign, buf))
            sign = -1 if ch == "-" else 1
            buf = ""
        else:
            buf += ch
    if not buf:
        return None
    terms.append((sign, buf))

    base: str | None = None
    index: str | None = None
    scale = 1
    disp = 0
    for sgn, term in terms:
        scaled = _SCALED_RE.match(term)
        if scaled and scaled.group(1) in X86_REGISTERS:
            if index is not None or sgn < 0:
                return None
            index, scale = scaled.group(1), int(scaled.group(2))
        elif term in X86_REGISTERS:
            if sgn < 0:
                return None
            if base is None:
                base = term
            elif index is None:
                index = term
            else:
                return None
        elif _IMM_RE.match(term):
            disp += sgn * _parse_int(term)
        else:
            return None
    return Mem(base=base, index=index, scale=scale, disp=disp)


# ---------------------------------------------------------------------------
# Model types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Instruction:
    addr: int
    mnemonic: str
    operands: tuple[str, ...]
    source_line: tuple[str, int] | None = None
    parsed: tuple[Operand, ...] = field(
        default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "parsed", tuple(parse_operand(o) for o in self.operands))


@dataclass(frozen=True)
class BasicBlock:
    id: str
    instructions: tuple[Instruction, ...]
    successors: tuple[str, ...]

    @property
    def start(self) -> int:
        return self.instructions[0].addr


@dataclass(frozen=True)
class FunctionCFG:
    uid: str
    name: str | None
    entry: str
    blocks: dict[str, BasicBlock]
    invoked: tuple[tuple[int, str | None], ...]
    unreachable: frozenset[str] = frozenset()

    @property
    def symbol(self) -> str | None:
        """Real symbol name, or None when stripped/auto-generated."""
        return self.name if symbol_available(self.name) else None

    def invoked_map(self) -> dict[int, str | None]:
        return dict(self.invoked)

    def reachable_blocks(self) -> list[BasicBlock]:
        blocks = [b for bid, b in self.blocks.items()
                  if bid not in self.unreachable]
        blocks.sort(key=lambda b: b.start)
        return blocks

    def iter_instructions(self):
        for block in self.reachable_blocks():
            yield from block.instructions


@dataclass(frozen=True)
class BinaryPool:
    functions: dict[str, FunctionCFG]
    compiler: str = ""
    optimization: str = ""
    stripped: bool = False


# ---------------------------------------------------------------------------
# Loading / validation
# ---------------------------------------------------------------------------

def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise ParseError(f"{where}: missing field '{key}'")
    return obj[key]


def _load_instruction(obj, where: str) -> Instruction:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: instruction must be an object")
    addr = _need(obj, "addr", where)
    if not isinstance(addr, int) or isinstance(addr, bool):
        raise ParseError(f"{where}.addr: expected integer")
    if not 0 <= addr < MAX_ADDRESS:
        raise ParseError(f"{where}.addr: out of 64-bit range")
    mnemonic = _need(obj, "mnemonic", where)
    if not isinstance(mnemonic, str) or not mnemonic:
        raise ParseError(f"{where}.mnemonic: expected non-empty string")
    operands = _need(obj, "operands", where)
    if not isinstance(operands, list) or any(
            not isinstance(o, str) for o in operands):
        raise ParseError(f"{where}.operands: expected list of strings")
    line = obj.get("line")
    source_line = None
    if line is not None:
        if (not isinstance(line, list) or len(line) != 2
                or not isinstance(line[0], str)
                or not isinstance(line[1], int) or isinstance(line[1], bool)):
            raise ParseError(f"{where}.line: expected [file, line] or null")
        source_line = (line[0], line[1])
    return Instruction(addr=addr, mnemonic=mnemonic.lower(),
                       operands=tuple(operands), source_line=source_line)


def _load_block(obj, where: str) -> BasicBlock:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: block must be an object")
    bid = _need(obj, "id", where)
    if not isinstance(bid, str) or not bid:
        raise ParseError(f"{where}.id: expected non-empty string")
    raw_insns = _need(obj, "instructions", where)
    if not isinstance(raw_insns, list) or not raw_insns:
        raise ParseError(f"{where}.instructions: expected non-empty list")
    insns = [
        _load_instruction(raw, f"{where}.instructions[{i}]")
        for i, raw in enumerate(raw_insns)
    ]
    for prev, cur in zip(insns, insns[1:]):
        if cur.addr <= prev.addr:
            raise IntegrityError(
                f"{where}: instructions not strictly address-ordered "
                f"at {cur.addr:#x}")
    succs = _need(obj, "succs", where)
    if not isinstance(succs, list) or any(
            not isinstance(s, str) for s in succs):
        raise ParseError(f"{where}.succs: expected list of strings")
    return BasicBlock(id=bid, instructions=tuple(insns),
                      successors=tuple(succs))


def _reachable_from(entry: str, blocks: dict[str, BasicBlock]) -> set[str]:
    seen = {entry}
    stack = [entry]
    while stack:
        for succ in blocks[stack.pop()].successors:
            if succ not in seen:
                seen.add(succ)
                stack.append(succ)
    return seen


def _load_function(obj, where: str, taken_uids: set[str]) -> FunctionCFG:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: function must be an object")
    name = obj.get("name")
    if name is not None and not isinstance(name, str):
        raise ParseError(f"{where}.name: expected string or null")
    entry = _need(obj, "entry", where)
    if not isinstance(entry, str):
        raise ParseError(f"{where}.entry: expected string")
    raw_blocks = _need(obj, "blocks", where)
    if not isinstance(raw_blocks, list) or not raw_blocks:
        raise ParseError(f"{where}.blocks: expected non-empty list")

    blocks: dict[str, BasicBlock] = {}
    for i, raw in enumerate(raw_blocks):
        block = _load_block(raw, f"{where}.blocks[{i}]")
        if block.id in blocks:
            raise IntegrityError(f"{where}: duplicate block id '{block.id}'")
        blocks[block.id] = block

    if entry not in blocks:
        raise IntegrityError(f"{where}: entry block '{entry}' not in blocks")
    for block in blocks.values():
        for succ in block.successors:
            if succ not in blocks:
                raise IntegrityError(
                    f"{where}: block '{block.id}' lists unknown successor "
                    f"'{succ}'")

    addrs: set[int] = set()
    for block in blocks.values():
        for insn in block.instructions:
            if insn.addr in addrs:
                raise IntegrityError(
                    f"{where}: duplicate instruction address "
                    f"{insn.addr:#x}")
            addrs.add(insn.addr)

    raw_invoked = obj.get("invoked", [])
    if not isinstance(raw_invoked, list):
        raise ParseError(f"{where}.invoked: expected list")
    invoked: list[tuple[int, str | None]] = []
    for i, raw in enumerate(raw_invoked):
        iw = f"{where}.invoked[{i}]"
        if not isinstance(raw, dict):
            raise ParseError(f"{iw}: expected object")
        site = _need(raw, "site", iw)
        if not isinstance(site, int) or isinstance(site, bool):
            raise ParseError(f"{iw}.site: expected integer")
        callee = raw.get("callee")
        if callee is not None and not isinstance(callee, str):
            raise ParseError(f"{iw}.callee: expected string or null")
        if site not in addrs:
            raise IntegrityError(
                f"{iw}: site {site:#x} is not an instruction address")
        invoked.append((site, callee))
    site_mnems = {insn.addr: insn.mnemonic
                  for block in blocks.values()
                  for insn in block.instructions}
    for site, _callee in invoked:
        if site_mnems[site] not in ("call", "jmp"):
            raise IntegrityError(
                f"{where}: invoked site {site:#x} is not a call-type "
                f"instruction")

    reachable = _reachable_from(entry, blocks)
    unreachable = frozenset(bid for bid in blocks if bid not in reachable)

    uid = name if name else f"sub_{blocks[entry].start:x}"
    if uid in taken_uids:
        raise IntegrityError(f"{where}: duplicate function id '{uid}'")
    taken_uids.add(uid)

    return FunctionCFG(uid=uid, name=name, entry=entry, blocks=blocks,
                       invoked=tuple(invoked), unreachable=unreachable)


def load_cfg_bundle_obj(doc) -> BinaryPool:
    """Validate a decoded bundle document and build the immutable pool."""
    if not isinstance(doc, dict):
        raise ParseError("$: bundle must be a JSON object")
    meta = doc.get("metadata", {})
    if not isinstance(meta, dict):
        raise ParseError("$.metadata: expected object")
    compiler = meta.get("compiler", "")
    optimization = meta.get("optimization", "")
    stripped = meta.get("stripped", False)
    if not isinstance(compiler, str) or not isinstance(optimization, str):
        raise ParseError("$.metadata: compiler/optimization must be strings")
    if not isinstance(stripped, bool):
        raise ParseError("$.metadata.stripped: expected boolean")

    raw_functions = _need(doc, "functions", "$")
    if not isinstance(raw_functions, list):
        raise ParseError("$.functions: expected list")
    functions: dict[str, FunctionCFG] = {}
    taken: set[str] = set()
    for i, raw in enumerate(raw_functions):
        fn = _load_function(raw, f"$.functions[{i}]", taken)
        functions[fn.uid] = fn
    return BinaryPool(functions=functions, compiler=compiler,
                      optimization=optimization, stripped=stripped)


def load_cfg_bundle(path) -> BinaryPool:
    """Load and validate a CFG-bundle JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    return load_cfg_bundle_obj(doc)


def dump_cfg_bundle(pool: BinaryPool) -> dict:
    """Emit the schema document for *pool* (inverse of loading)."""
    functions = []
    for fn in pool.functions.values():
        blocks = []
        for block in sorted(fn.blocks.values(), key=lambda b: b.start):
            blocks.append({
                "id": block.id,
                "instructions": [
                    {"addr": insn.addr,
                     "mnemonic": insn.mnemonic,
                     "operands": list(insn.operands),
                     "line": (list(insn.source_line)
                              if insn.source_line else None)}
                    for insn in block.instructions
                ],
                "succs": list(block.successors),
            })
        functions.append({
            "name": fn.name,
            "entry": fn.entry,
            "blocks": blocks,
            "invoked": [{"site": site, "callee": callee}
                        for site, callee in fn.invoked],
        })
    return {
        "metadata": {"compiler": pool.compiler,
                     "optimization": pool.optimization,
                     "stripped": pool.stripped},
        "functions": functions,
    }


def save_cfg_bundle(pool: BinaryPool, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dump_cfg_bundle(pool), fh, indent=2, sort_keys=True)
        fh.write("\n")
