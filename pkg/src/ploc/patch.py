"""Unified-diff parsing.

A diff section ("@@ -a,n +b,m @@") may interleave context and change lines;
we split it into logical hunks at each maximal run of +/- lines, so every
hunk is (context-before, deleted, added, context-after).  The surrounding
context is what lets patch lines be located unambiguously when the same
statement recurs in a function.
"""
from __future__ import annotations

import re
from dataclasses import dataclass


class PatchParseError(ValueError):
    pass


HUNK_HEADER_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


@dataclass(frozen=True)
class Hunk:
    context_before: tuple[str, ...]
    deleted: tuple[str, ...]
    added: tuple[str, ...]
    context_after: tuple[str, ...]
    old_start: int = 0
    new_start: int = 0

    def side_lines(self, side: str) -> tuple[str, ...]:
        """Changed lines for one side: 'vul' -> deleted, 'fix' -> added."""
        if side == "vul":
            return self.deleted
        if side == "fix":
            return self.added
        raise ValueError(f"unknown side {side!r}")

    def side_sequence(self, side: str) -> tuple[tuple[str, ...], ...]:
        """(before, changed, after) as they appear in that side's source."""
        return (self.context_before, self.side_lines(side),
                self.context_after)


@dataclass(frozen=True)
class PatchFile:
    hunks: tuple[Hunk, ...]


def parse_patch_text(text: str) -> PatchFile:
    hunks: list[Hunk] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("@@"):
            match = HUNK_HEADER_RE.match(line)
            if not match:
                raise PatchParseError(f"malformed hunk header: {line!r}")
            old_start = int(match.group(1))
            new_start = int(match.group(3))
            section: list[str] = []
            i += 1
            while i < len(lines):
                body = lines[i]
                if body.startswith("@@"):
                    break
                if body and body[0] in " +-\\":
                    section.append(body)
                    i += 1
                elif body == "":
                    # Some tools emit empty context lines with the leading
                    # space trimmed.
                    section.append(" ")
                    i += 1
                else:
                    break
            hunks.extend(_split_section(section, old_start, new_start))
        else:
            i += 1
    if not any(h.deleted or h.added for h in hunks):
        raise PatchParseError("patch contains no deleted or added lines")
    return PatchFile(hunks=tuple(hunks))


def _split_section(section: list[str], old_start: int,
                   new_start: int) -> list[Hunk]:
    # Runs of +/- lines separated by context; context between two runs
    # serves as 'after' for the first and 'before' for the second.
    entries: list[tuple[str, str]] = []  # (tag, text)
    for raw in section:
        tag, text = raw[0], raw[1:]
        if tag == "\\":
            continue  # "\ No newline at end of file"
        entries.append((tag, text))

    hunks: list[Hunk] = []
    old_line, new_line = old_start, new_start
    idx = 0
    while idx < len(entries):
        if entries[idx][0] == " ":
            idx += 1
            old_line += 1
            new_line += 1
            continue
        run_old, run_new = old_line, new_line
        deleted: list[str] = []
        added: list[str] = []
        start = idx
        while idx < len(entries) and entries[idx][0] in "+-":
            tag, text = entries[idx]
            if tag == "-":
                deleted.append(text)
                old_line += 1
            else:
                added.append(text)
                new_line += 1
            idx += 1
        before = [t for _, t in _context_back(entries, start)]
        after = [t for _, t in _context_fwd(entries, idx)]
        hunks.append(Hunk(
            context_before=tuple(before),
            deleted=tuple(deleted),
            added=tuple(added),
            context_after=tuple(after),
            old_start=run_old,
            new_start=run_new,
        ))
    return hunks


def _context_back(entries, start):
    out = []
    j = start - 1
    while j >= 0 and entries[j][0] == " ":
        out.append(entries[j])
        j -= 1
    return reversed(out)


def _context_fwd(entries, start):
    out = []
    j = start
    while j < len(entries) and entries[j][0] == " ":
        out.append(entries[j])
        j += 1
    return out


def parse_patch(path) -> PatchFile:
    """Parse a unified-diff file."""
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        return parse_patch_text(fh.read())
