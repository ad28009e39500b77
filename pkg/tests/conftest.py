from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ploc.testkit import FunctionBuilder, build_pool  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(*parts) -> str:
    return os.path.join(FIXTURES, *parts)


@pytest.fixture
def table_demo_pool():
    """One function exercising each sliced-instruction family."""
    fb = FunctionBuilder("demo")
    fb.block("b0", [
        ("mov eax, [ebx+0xE]", 3),
        ("test eax, eax", 3),
        ("je b2", 3),
    ], succs=["b1", "b2"])
    fb.block("b1", [
        ("push 0xA", 4),
        ("mov [esp], 3", 4),
        ("call foobar", 4),
    ], succs=["b2"])
    fb.block("b2", [
        ("mov eax, 3", 6),
        ("cmp eax, 2", 6),
        "ret",
    ], succs=[])
    return build_pool([fb])


@pytest.fixture
def diamond_pool():
    """Two-way branch with a cmp in each arm and a call at the join."""
    fb = FunctionBuilder("diamond")
    fb.block("b0", ["mov eax, [ebx]", "je b2"], succs=["b1", "b2"])
    fb.block("b1", ["cmp eax, 5", "jmp b3"], succs=["b3"])
    fb.block("b2", ["cmp eax, 9"], succs=["b3"])
    fb.block("b3", ["call sink", "ret"], succs=[])
    return build_pool([fb])
