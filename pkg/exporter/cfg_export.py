#!/usr/bin/env python3
"""CFG-bundle exporter built on binutils.

Walks a binary's functions via objdump's disassembly (Intel syntax),
rebuilds basic blocks and successor edges, renders operands in the
bundle's fixed grammar, embeds source line info when debug data is
present, and writes the CFG-bundle JSON plus a manifest.

Usage:
    python cfg_export.py <binary> <out.json> [--sections .text ...]

The manifest lands at <out.json>.manifest.  For stripped binaries the
function boundaries are recovered heuristically from the program entry
point and direct call targets; names are left null.

Operand normalization table (objdump Intel syntax -> bundle grammar):
    DWORD PTR [rbp-0x18]    -> [rbp-0x18]     (size prefixes dropped)
    1149 <checksum>         -> checksum       (call target, symbol form)
    1168 <checksum+0x1f>    -> 0x1168         (branch target, address)
    0x5 / 5 / rax           -> unchanged
    anything unparseable    -> kept verbatim as an opaque token (warned)
"""
from __future__ import annotations

import argparse
import datetime
import json
import os
import re
import subprocess
import sys

SIZE_PREFIX_RE = re.compile(
    r"^(?:BYTE|WORD|DWORD|QWORD|TBYTE|XMMWORD|YMMWORD|FWORD) PTR ",
    re.IGNORECASE)
FUNC_HEADER_RE = re.compile(r"^([0-9a-f]+) <([^>]+)>:$")
SECTION_RE = re.compile(r"^Disassembly of section ([^:]+):$")
INSN_RE = re.compile(r"^\s+([0-9a-f]+):\t(.*)$")
LINE_MARKER_RE = re.compile(
    r"^(\S[^:]*):(\d+)(?:\s+\(discriminator \d+\))?$")
SCOPE_MARKER_RE = re.compile(r"^\S.*\(\):$")
TARGET_RE = re.compile(r"^([0-9a-f]+)\s+<([^>]+)>$")

MNEMONIC_PREFIXES = frozenset({
    "bnd", "lock", "rep", "repz", "repnz", "repe", "repne", "notrack",
    "data16", "cs", "ds", "es", "fs", "gs", "ss",
})
CONDITIONAL_JUMPS = frozenset({
    "ja", "jae", "jb", "jbe", "jc", "jcxz", "jecxz", "jrcxz", "je", "jg",
    "jge", "jl", "jle", "jna", "jnae", "jnb", "jnbe", "jnc", "jne", "jng",
    "jnge", "jnl", "jnle", "jno", "jnp", "jns", "jnz", "jo", "jp", "jpe",
    "jpo", "js", "jz", "loop", "loope", "loopne",
})
NO_FALLTHROUGH = frozenset({"jmp", "ret", "retq", "ud2", "hlt"})

TOOL_NAME = "binutils-objdump"


class ExportError(RuntimeError):
    pass


def run_objdump(args):
    proc = subprocess.run(["objdump"] + args, capture_output=True,
                          text=True)
    if proc.returncode != 0:
        raise ExportError(f"objdump {' '.join(args)} failed: "
                          f"{proc.stderr.strip()}")
    return proc.stdout


def objdump_version():
    first = run_objdump(["--version"]).splitlines()[0]
    return first.strip()


def binary_is_stripped(path):
    out = subprocess.run(["objdump", "-t", path], capture_output=True,
                         text=True).stdout
    return not any(" F " in line for line in out.splitlines())


def entry_point(path):
    out = run_objdump(["-f", path])
    match = re.search(r"start address (0x[0-9a-f]+)", out)
    return int(match.group(1), 16) if match else None


# ---------------------------------------------------------------------------
# Disassembly parsing
# ---------------------------------------------------------------------------

def parse_disassembly(text, sections):
    """Yields raw instructions grouped by (section, symbol-or-None).

    Returns a list of regions: dicts with section, name, start and
    instructions [(addr, mnemonic, raw_operand_text, source_line)].
    """
    regions = []
    current = None
    section = None
    line_info = None
    for raw in text.splitlines():
        sec = SECTION_RE.match(raw)
        if sec:
            section = sec.group(1)
            current = None
            line_info = None
            continue
        if section not in sections:
            continue
        header = FUNC_HEADER_RE.match(raw)
        if header:
            current = {"section": section,
                       "name": header.group(2),
                       "start": int(header.group(1), 16),
                       "instructions": []}
            regions.append(current)
            line_info = None
            continue
        if SCOPE_MARKER_RE.match(raw):
            continue
        marker = LINE_MARKER_RE.match(raw)
        if marker:
            line_info = (os.path.basename(marker.group(1)),
                         int(marker.group(2)))
            continue
        insn = INSN_RE.match(raw)
        if insn and current is not None:
            addr = int(insn.group(1), 16)
            body = insn.group(2).split("#", 1)[0].rstrip()
            if not body:
                continue
            mnemonic, operand_text = _split_mnemonic(body)
            if mnemonic == "(bad)":
                continue
            current["instructions"].append(
                (addr, mnemonic, operand_text, line_info))
    return regions


def _split_mnemonic(body):
    parts = body.split(None, 1)
    mnemonic = parts[0]
    rest = parts[1] if len(parts) > 1 else ""
    while mnemonic.lower() in MNEMONIC_PREFIXES and rest:
        parts = rest.split(None, 1)
        mnemonic = parts[0]
        rest = parts[1] if len(parts) > 1 else ""
    return mnemonic.lower(), rest.strip()


def _clean_symbol(sym):
    return sym.split("@", 1)[0]


def normalize_operand(text, warnings, context):
    text = SIZE_PREFIX_RE.sub("", text.strip()).strip()
    target = TARGET_RE.match(text)
    if target:
        return text  # handled by the caller (branch/call targets)
    if re.match(r"^[a-z0-9]+$", text):
        return text
    if re.match(r"^-?0x[0-9a-f]+$|^-?\d+$", text):
        return text
    if text.startswith("[") and text.endswith("]"):
        return text
    if re.match(r"^[A-Za-z_.@$][A-Za-z0-9_.@$]*$", text):
        return text
    warnings.append(f"opaque operand {text!r} at {context}")
    return text


# ---------------------------------------------------------------------------
# Function slicing for stripped sections
# ---------------------------------------------------------------------------

def recover_functions(region, entry):
    """Split a symbol-less region at the entry point and call targets."""
    insns = region["instructions"]
    if not insns:
        return []
    starts = set()
    if entry is not None:
        starts.add(entry)
    addresses = {addr for addr, *_rest in insns}
    for _addr, mnemonic, operand_text, _line in insns:
        if mnemonic == "call":
            target = TARGET_RE.match(SIZE_PREFIX_RE.sub(
                "", operand_text.strip()))
            if target:
                t = int(target.group(1), 16)
                if t in addresses:
                    starts.add(t)
    starts = sorted(s for s in starts if s in addresses)
    if not starts:
        starts = [insns[0][0]]
    functions = []
    for i, start in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else float("inf")
        chunk = [r for r in insns if start <= r[0] < end]
        if chunk:
            functions.append({"section": region["section"], "name": None,
                              "start": start, "instructions": chunk})
    return functions


# ---------------------------------------------------------------------------
# Block construction
# ---------------------------------------------------------------------------

def build_function(fn, known_entries, warnings):
    insns = fn["instructions"]
    addresses = [a for a, *_ in insns]
    addr_set = set(addresses)
    sym_name = fn["name"]

    def parse_target(operand_text):
        cleaned = SIZE_PREFIX_RE.sub("", operand_text.strip()).strip()
        match = TARGET_RE.match(cleaned)
        if not match:
            return None, None
        addr = int(match.group(1), 16)
        sym = match.group(2)
        if "+" in sym:
            return addr, None
        return addr, _clean_symbol(sym)

    # Pass 1: leaders and call edges.
    leaders = {addresses[0]}
    invoked = []
    records = []  # (addr, mnemonic, operands, line, succ_kind, target)
    for idx, (addr, mnemonic, operand_text, line) in enumerate(insns):
        next_addr = addresses[idx + 1] if idx + 1 < len(insns) else None
        target_addr, target_sym = (None, None)
        if operand_text:
            target_addr, target_sym = parse_target(operand_text)

        if mnemonic == "call":
            if target_addr is not None:
                callee = target_sym or known_entries.get(target_addr)
                if callee is None:
                    warnings.append(
                        f"unresolved direct call target at {addr:#x}")
                operands = [callee if callee else f"0x{target_addr:x}"]
                invoked.append({"site": addr, "callee": callee})
            else:
                # Indirect call through a register or memory.
                operands = _operands(mnemonic, operand_text, warnings,
                                     addr)
                invoked.append({"site": addr, "callee": None})
            records.append((addr, mnemonic, operands, line, "fall", None))
            continue

        is_jump = mnemonic in CONDITIONAL_JUMPS or mnemonic == "jmp"
        if is_jump and target_addr is not None:
            if target_addr in addr_set:
                operands = [f"0x{target_addr:x}"]
                kind = "cond" if mnemonic in CONDITIONAL_JUMPS else "jump"
                records.append((addr, mnemonic, operands, line, kind,
                                target_addr))
                leaders.add(target_addr)
                if next_addr is not None:
                    leaders.add(next_addr)
                continue
            # Jump out of the function: a tail call.
            callee = target_sym or known_entries.get(target_addr)
            operands = [callee if callee else f"0x{target_addr:x}"]
            if mnemonic == "jmp":
                invoked.append({"site": addr, "callee": callee})
                records.append((addr, mnemonic, operands, line, "stop",
                                None))
            else:
                warnings.append(
                    f"conditional jump leaves function at {addr:#x}")
                records.append((addr, mnemonic, operands, line, "fall",
                                None))
            if next_addr is not None:
                leaders.add(next_addr)
            continue

        operands = _operands(mnemonic, operand_text, warnings, addr)
        if mnemonic in NO_FALLTHROUGH or (is_jump and target_addr is None):
            # Indirect jmp or terminator.
            records.append((addr, mnemonic, operands, line, "stop", None))
            if next_addr is not None:
                leaders.add(next_addr)
        elif mnemonic in CONDITIONAL_JUMPS:
            # Conditional with unparseable target: fall through only.
            records.append((addr, mnemonic, operands, line, "fall", None))
        else:
            records.append((addr, mnemonic, operands, line, "fall", None))

    # Pass 2: cut blocks.
    blocks = []
    block = None
    by_addr = {}
    for idx, rec in enumerate(records):
        addr, mnemonic, operands, line, kind, target = rec
        if addr in leaders or block is None:
            block = {"id": f"0x{addr:x}", "start": addr,
                     "instructions": [], "ends": None}
            blocks.append(block)
            by_addr[addr] = block
        block["instructions"].append(
            {"addr": addr, "mnemonic": mnemonic, "operands": operands,
             "line": [line[0], line[1]] if line else None})
        next_addr = records[idx + 1][0] if idx + 1 < len(records) else None
        ends_block = (kind in ("jump", "cond", "stop")
                      or next_addr is None or next_addr in leaders)
        if ends_block:
            block["ends"] = (kind, target, next_addr)
            block = None

    block_ids = {b["start"]: b["id"] for b in blocks}
    out_blocks = []
    for b in blocks:
        kind, target, next_addr = b["ends"]
        succs = []
        if kind == "jump":
            succs = [block_ids[target]]
        elif kind == "cond":
            if next_addr is not None:
                succs.append(block_ids[next_addr])
            succs.append(block_ids[target])
        elif kind == "stop":
            succs = []
        else:  # fall
            if next_addr is not None:
                succs.append(block_ids[next_addr])
        # De-duplicate while preserving order (jcc to next instruction).
        seen = set()
        succs = [s for s in succs
                 if not (s in seen or seen.add(s))]
        out_blocks.append({"id": b["id"],
                           "instructions": b["instructions"],
                           "succs": succs})

    name = sym_name
    if name is not None and (name.startswith(".") or "@" in name):
        name = None
    return {
        "name": name,
        "entry": f"0x{fn['start']:x}",
        "blocks": out_blocks,
        "invoked": invoked,
    }


def _operands(mnemonic, operand_text, warnings, addr):
    if not operand_text:
        return []
    return [normalize_operand(part, warnings, f"{addr:#x}")
            for part in operand_text.split(",")]


# ---------------------------------------------------------------------------
# Export driver
# ---------------------------------------------------------------------------

def export_binary(binary, out_path, sections=(".text",)):
    sections = set(sections)
    stripped = binary_is_stripped(binary)
    text = run_objdump(["-d", "-M", "intel", "--no-show-raw-insn", "-l",
                        binary])
    regions = parse_disassembly(text, sections)

    warnings = []
    functions = []
    if stripped or all(r["name"] is None for r in regions):
        entry = entry_point(binary)
        split = []
        for region in regions:
            split.extend(recover_functions(region, entry))
        if split:
            warnings.append(
                f"no function symbols; recovered {len(split)} functions "
                f"from call targets and the entry point")
        functions = split
    else:
        functions = regions

    functions.sort(key=lambda f: f["start"])
    known_entries = {f["start"]: f["name"] for f in functions
                     if f["name"]}
    built = [build_function(f, known_entries, warnings)
             for f in functions if f["instructions"]]

    bundle = {
        "metadata": {
            "compiler": "unknown",
            "optimization": "unknown",
            "stripped": stripped,
        },
        "functions": built,
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(bundle, fh, indent=2, sort_keys=True)
        fh.write("\n")

    manifest = {
        "binary": os.path.abspath(binary),
        "tool": TOOL_NAME,
        "tool_version": objdump_version(),
        "generated_at": datetime.datetime.now(
            datetime.timezone.utc).isoformat(),
        "function_count": len(built),
        "functions": {
            (f["name"] or f["entry"]): {
                "blocks": len(f["blocks"]),
                "instructions": sum(len(b["instructions"])
                                    for b in f["blocks"]),
            } for f in built
        },
        "warnings": warnings,
    }
    manifest_path = f"{out_path}.manifest"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return bundle, manifest


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Export a binary's CFGs as a bundle JSON.")
    parser.add_argument("binary")
    parser.add_argument("out")
    parser.add_argument("--sections", nargs="+", default=[".text"],
                        help="code sections to export (default: .text)")
    args = parser.parse_args(argv)
    if not os.path.exists(args.binary):
        parser.error(f"binary not found: {args.binary}")
    _bundle, manifest = export_binary(args.binary, args.out,
                                      sections=args.sections)
    print(f"{manifest['function_count']} functions -> {args.out}")
    for warning in manifest["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
