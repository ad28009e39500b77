"""Fixture-construction helpers: a small builder for CFG bundles and a
seeded synthetic-pool generator for benchmarks and property tests.

Instructions are written as assembly-ish strings ("mov eax, [ebx+0xE]");
addresses are assigned sequentially.  ``call <symbol>`` instructions are
registered in the function's invoked list automatically; other invoked
entries (tail jumps, indirect calls with known targets) are declared via
the optional per-instruction options dict.
"""
from __future__ import annotations

import random

from .cfg import BinaryPool, load_cfg_bundle_obj

_ADDR_STEP = 4


def parse_asm(text: str) -> tuple[str, list[str]]:
    text = text.strip()
    if " " not in text:
        return text, []
    mnemonic, rest = text.split(None, 1)
    operands = [op.strip() for op in rest.split(",")]
    return mnemonic, operands


class FunctionBuilder:
    def __init__(self, name: str | None, base: int = 0x1000,
                 source_file: str = "src.c"):
        self.name = name
        self.source_file = source_file
        self._addr = base
        self._blocks: list[dict] = []
        self._invoked: list[dict] = []
        self._entry: str | None = None

    def block(self, bid: str, instructions, succs=()) -> "FunctionBuilder":
        """Add a block.  Each instruction is a string, a (string, line)
        pair, or a (string, line, options) triple with options
        {"invoked": callee|None} forcing an invoked entry."""
        if self._entry is None:
            self._entry = bid
        insns = []
        for item in instructions:
            options = {}
            line = None
            if isinstance(item, tuple):
                text = item[0]
                if len(item) > 1:
                    line = item[1]
                if len(item) > 2:
                    options = item[2]
            else:
                text = item
            mnemonic, operands = parse_asm(text)
            addr = self._addr
            self._addr += _ADDR_STEP
            insns.append({
                "addr": addr,
                "mnemonic": mnemonic,
                "operands": operands,
                "line": [self.source_file, line] if line is not None
                        else None,
            })
            if "invoked" in options:
                self._invoked.append({"site": addr,
                                      "callee": options["invoked"]})
            elif mnemonic == "call" and operands and _looks_symbolic(
                    operands[0]):
                self._invoked.append({"site": addr, "callee": operands[0]})
        self._blocks.append({"id": bid, "instructions": insns,
                             "succs": list(succs)})
        return self

    def build(self) -> dict:
        if self._entry is None:
            raise ValueError("function has no blocks")
        return {"name": self.name, "entry": self._entry,
                "blocks": self._blocks, "invoked": self._invoked}


def _looks_symbolic(operand: str) -> bool:
    from .cfg import Sym, parse_operand
    return isinstance(parse_operand(operand), Sym)


def bundle(functions, compiler: str = "gcc", optimization: str = "O0",
           stripped: bool = False) -> dict:
    built = [f.build() if isinstance(f, FunctionBuilder) else f
             for f in functions]
    return {"metadata": {"compiler": compiler, "optimization": optimization,
                         "stripped": stripped},
            "functions": built}


def build_pool(functions, **metadata) -> BinaryPool:
    return load_cfg_bundle_obj(bundle(functions, **metadata))


# ---------------------------------------------------------------------------
# Synthetic pools
# ---------------------------------------------------------------------------

def synth_function(rng: random.Random, name: str | None, base: int,
                   n_blocks: int, vocabulary: list[int],
                   callees: list[str]) -> FunctionBuilder:
    """A random function whose comparisons draw from *vocabulary*."""
    fb = FunctionBuilder(name, base=base)
    regs = ["eax", "ebx", "ecx", "edx", "esi", "edi"]
    for i in range(n_blocks):
        bid = f"b{i}"
        insns = []
        for _ in range(rng.randint(2, 5)):
            roll = rng.random()
            reg = rng.choice(regs)
            if roll < 0.30:
                insns.append(f"mov {reg}, [{rng.choice(regs)}"
                             f"+{rng.randrange(0, 0x100, 4):#x}]")
            elif roll < 0.55:
                insns.append(f"cmp {reg}, {rng.choice(vocabulary)}")
            elif roll < 0.65:
                insns.append(f"test {reg}, {reg}")
            elif roll < 0.75 and callees:
                insns.append(f"push {rng.randrange(0, 64)}")
                insns.append(f"call {rng.choice(callees)}")
            elif roll < 0.9:
                insns.append(f"add {reg}, {rng.randrange(1, 32)}")
            else:
                insns.append(f"mov {reg}, {rng.choice(regs)}")
        succs = []
        if i + 1 < n_blocks:
            succs.append(f"b{i + 1}")
            # Forward branch, and occasionally a loop back-edge.
            if rng.random() < 0.4:
                succs.append(f"b{rng.randint(i + 1, n_blocks - 1)}")
            elif rng.random() < 0.15 and i > 0:
                succs.append(f"b{rng.randint(0, i)}")
        else:
            insns.append("ret")
        fb.block(bid, insns, succs=sorted(set(succs)))
    return fb


def synth_pool(n_functions: int, rng: random.Random,
               blocks_range: tuple[int, int] = (20, 200),
               shared_vocabulary: list[int] | None = None,
               stripped: bool = True) -> BinaryPool:
    """A pool of random functions.  About a third of them reuse the shared
    comparison vocabulary, so coarse filtering passes for a realistic
    fraction of targets."""
    shared = shared_vocabulary or [0, 2, 8, 0x28, 0x66, 0x200]
    callees = [f"sub_{0xf000 + i:x}" for i in range(4)]
    functions = []
    for i in range(n_functions):
        if rng.random() < 0.35:
            vocab = shared
        else:
            vocab = [rng.randrange(0x1000, 0x8000) for _ in range(6)]
        n_blocks = rng.randint(*blocks_range)
        functions.append(synth_function(
            rng, f"sub_{0x10000 + i * 0x1000:x}", 0x10000 + i * 0x1000,
            n_blocks, vocab, callees))
    for i, callee in enumerate(callees):
        fb = FunctionBuilder(callee, base=0xf000 + i * 0x40)
        fb.block("b0", ["mov eax, 1", "ret"])
        functions.append(fb)
    return build_pool(functions, stripped=stripped)
