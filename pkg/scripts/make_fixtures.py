#!/usr/bin/env python3
"""Regenerate the checked-in CFG-bundle fixtures under tests/fixtures/.

The motivating fixture models a null-check + error-call patch whose error
handling is duplicated elsewhere in the same function (patch-similar
blocks), detected across reordering and comparison-style variants of the
vulnerable build.  Run from the repository root:

    python scripts/make_fixtures.py
"""
from __future__ import annotations

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ploc.testkit import FunctionBuilder, bundle  # noqa: E402

ROOT = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")


def write_json(path, doc):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_text(path, text):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# Motivating fixture: added NULL check + alert call, with duplicated
# error handling acting as patch-similar code.
# ---------------------------------------------------------------------------

SKEX_FIX = """\
#include "ssl_local.h"

int process_key_exchange(SSL *s, int alg) {
    if (s->msg_type != 0x66)
        return -1;
    if (s->rec_len < 0x200)
        return -1;
    while (s->pending > 8)
        s->pending -= 8;
    if ((alg & 0xF) == 0xE) {
        if (s->sess_cert == NULL) {
            ssl3_send_alert(2, 40);
            goto err;
        }
        use_cert(s);
    }
    if ((alg & 0xF0) == 0xE0) {
        if (s->peer_tmp == NULL) {
            ssl3_send_alert(2, 40);
            goto err;
        }
        use_tmp(s);
    }
    return finish(s);
err:
    cleanup(s);
    return -1;
}
"""

SKEX_VUL = """\
#include "ssl_local.h"

int process_key_exchange(SSL *s, int alg) {
    if (s->msg_type != 0x66)
        return -1;
    if (s->rec_len < 0x200)
        return -1;
    while (s->pending > 8)
        s->pending -= 8;
    if ((alg & 0xF) == 0xE) {
        use_cert(s);
    }
    if ((alg & 0xF0) == 0xE0) {
        if (s->peer_tmp == NULL) {
            ssl3_send_alert(2, 40);
            goto err;
        }
        use_tmp(s);
    }
    return finish(s);
err:
    cleanup(s);
    return -1;
}
"""

SKEX_PATCH = """\
--- a/skex.c
+++ b/skex.c
@@ -8,6 +8,10 @@ int process_key_exchange(SSL *s, int alg) {
     while (s->pending > 8)
         s->pending -= 8;
     if ((alg & 0xF) == 0xE) {
+        if (s->sess_cert == NULL) {
+            ssl3_send_alert(2, 40);
+            goto err;
+        }
         use_cert(s);
     }
     if ((alg & 0xF0) == 0xE0) {
"""


def skex_function(name, base, *, patched, order="source", style="gcc",
                  lines=True, sp="esi", callees=None):
    """One build variant of the key-exchange function.

    patched: include the added NULL-check blocks.
    order:   "source" keeps the 0xE branch first; "reordered" hoists the
             0xE0 branch ahead of it (optimizer-style reordering).
    style:   "gcc" uses test-against-self for NULL checks, "clang" uses
             an explicit compare with zero.
    """
    callees = callees or {
        "alert": "ssl3_send_alert", "use_cert": "use_cert",
        "use_tmp": "use_tmp", "finish": "finish", "cleanup": "cleanup",
    }
    ln = (lambda n: n) if lines else (lambda n: None)
    null_check = "test eax, eax" if style == "gcc" else "cmp eax, 0"
    fb = FunctionBuilder(name, base=base, source_file="skex.c")

    def eax_guard(mask, want):
        return [f"mov eax, [ebp+0xc]", f"and eax, {mask:#x}",
                f"cmp eax, {want:#x}"]

    fb.block("b0", [
        (f"mov {sp}, [ebp+0x8]", ln(3)),
        (f"mov eax, [{sp}+0x1c]", ln(4)),
        ("cmp eax, 0x66", ln(4)),
        ("jne bneg", ln(4)),
    ], succs=["b1", "bneg"])
    fb.block("b1", [
        (f"mov eax, [{sp}+0x20]", ln(6)),
        ("cmp eax, 0x200", ln(6)),
        ("jl bneg", ln(6)),
    ], succs=["b2", "bneg"])
    first_branch = "ba" if order == "source" else "bb"
    fb.block("b2", [
        (f"mov eax, [{sp}+0x24]", ln(8)),
        ("cmp eax, 8", ln(8)),
        (f"jle {first_branch}", ln(8)),
    ], succs=["b3", first_branch])
    fb.block("b3", [
        (f"mov eax, [{sp}+0x24]", ln(9)),
        ("sub eax, 8", ln(9)),
        (f"mov [{sp}+0x24], eax", ln(9)),
        ("jmp b2", ln(9)),
    ], succs=["b2"])

    # Line numbers differ between the two sources past the loop.
    if patched:
        l_a, l_chk, l_alert, l_goto, l_uc = 10, 11, 12, 13, 15
        l_b, l_ychk, l_yalert, l_ygoto, l_ut = 17, 18, 19, 20, 22
        l_fin, l_err, l_neg1, l_ret = 24, 26, 27, 28
    else:
        l_a, l_uc = 10, 11
        l_b, l_ychk, l_yalert, l_ygoto, l_ut = 13, 14, 15, 16, 18
        l_fin, l_err, l_neg1, l_ret = 20, 22, 23, 24
        l_chk = l_alert = l_goto = None

    def branch_a(next_block):
        fb.block("ba", [(t, ln(l_a)) for t in eax_guard(0xF, 0xE)]
                 + [(f"jne {next_block}", ln(l_a))],
                 succs=["ba_body", next_block])
        if patched:
            fb.block("ba_body", [
                (f"mov eax, [{sp}+0x88]", ln(l_chk)),
                (null_check, ln(l_chk)),
                ("jne ba_uc", ln(l_chk)),
            ], succs=["ba_alert", "ba_uc"])
            fb.block("ba_alert", [
                ("push 0x28", ln(l_alert)),
                ("push 0x2", ln(l_alert)),
                (f"push {sp}", ln(l_alert)),
                (f"call {callees['alert']}", ln(l_alert)),
                ("jmp berr", ln(l_goto)),
            ], succs=["berr"])
            fb.block("ba_uc", [
                (f"push {sp}", ln(l_uc)),
                (f"call {callees['use_cert']}", ln(l_uc)),
            ], succs=[next_block])
        else:
            fb.block("ba_body", [
                (f"push {sp}", ln(l_uc)),
                (f"call {callees['use_cert']}", ln(l_uc)),
            ], succs=[next_block])

    def branch_b(next_block):
        fb.block("bb", [(t, ln(l_b)) for t in eax_guard(0xF0, 0xE0)]
                 + [(f"jne {next_block}", ln(l_b))],
                 succs=["bb_body", next_block])
        fb.block("bb_body", [
            (f"mov eax, [{sp}+0x88]", ln(l_ychk)),
            (null_check, ln(l_ychk)),
            ("jne bb_ut", ln(l_ychk)),
        ], succs=["bb_alert", "bb_ut"])
        fb.block("bb_alert", [
            ("push 0x28", ln(l_yalert)),
            ("push 0x2", ln(l_yalert)),
            (f"push {sp}", ln(l_yalert)),
            (f"call {callees['alert']}", ln(l_yalert)),
            ("jmp berr", ln(l_ygoto)),
        ], succs=["berr"])
        fb.block("bb_ut", [
            (f"push {sp}", ln(l_ut)),
            (f"call {callees['use_tmp']}", ln(l_ut)),
        ], succs=[next_block])

    if order == "source":
        branch_a("bb")
        branch_b("bfin")
    else:
        branch_b("ba")
        branch_a("bfin")

    fb.block("bfin", [
        (f"push {sp}", ln(l_fin)),
        (f"call {callees['finish']}", ln(l_fin)),
    ], succs=["bret"])
    fb.block("berr", [
        (f"push {sp}", ln(l_err)),
        (f"call {callees['cleanup']}", ln(l_err)),
        ("mov eax, -1", ln(l_neg1)),
    ], succs=["bret"])
    fb.block("bret", [("ret", ln(l_ret))], succs=[])
    fb.block("bneg", [("mov eax, -1", ln(5)), ("jmp bret", ln(5))],
             succs=["bret"])
    return fb


STUB_CALLEES = {
    "alert": "sub_a100", "use_tmp": "sub_a200", "use_cert": "sub_a300",
    "finish": "sub_a400", "cleanup": "sub_a500",
}


def stub(name, base, body=("mov eax, 1", "ret")):
    fb = FunctionBuilder(name, base=base)
    fb.block("b0", list(body))
    return fb


def stub_set():
    return [
        stub("sub_a100", 0xa100, ("push ebp", "mov eax, 5", "ret")),
        stub("sub_a200", 0xa200, ("mov eax, 2", "ret")),
        stub("sub_a300", 0xa300, ("mov eax, 3", "ret")),
        stub("sub_a400", 0xa400, ("mov eax, 4", "ret")),
        stub("sub_a500", 0xa500, ("xor eax, eax", "ret")),
    ]


SIMDB = """\
query_id,candidate_id,score
ssl3_send_alert,sub_a100,0.95
ssl3_send_alert,sub_a200,0.12
ssl3_send_alert,sub_a300,0.10
ssl3_send_alert,sub_a500,0.22
use_tmp,sub_a200,0.94
use_cert,sub_a300,0.92
finish,sub_a400,0.91
cleanup,sub_a500,0.93
cleanup,sub_a100,0.31
"""


def motivating():
    out = os.path.join(ROOT, "motivating")
    write_text(os.path.join(out, "skex_fix.c"), SKEX_FIX)
    write_text(os.path.join(out, "skex_vul.c"), SKEX_VUL)
    write_text(os.path.join(out, "patch.diff"), SKEX_PATCH)
    write_text(os.path.join(out, "simdb.csv"), SIMDB)

    vul_ref = skex_function("process_key_exchange", 0x1000, patched=False)
    fix_ref = skex_function("process_key_exchange", 0x1000, patched=True)
    write_json(os.path.join(out, "vul_ref.json"), bundle([vul_ref]))
    write_json(os.path.join(out, "fix_ref.json"), bundle([fix_ref]))

    # Pool: the fixed reference itself, an optimizer-reordered vulnerable
    # variant, and a different-compiler vulnerable variant, all next to
    # the callee stubs they invoke.  The variants are stripped.
    fix_tgt = skex_function("process_key_exchange", 0x1000, patched=True)
    vul_o3 = skex_function(None, 0x2000, patched=False, order="reordered",
                           lines=False, sp="edi", callees=STUB_CALLEES)
    vul_clang = skex_function(None, 0x3000, patched=False, style="clang",
                              lines=False, sp="ecx", callees=STUB_CALLEES)
    pool = bundle([fix_tgt, vul_o3, vul_clang] + stub_set(),
                  compiler="mixed", optimization="mixed", stripped=True)
    write_json(os.path.join(out, "pool.json"), pool)
    write_text(os.path.join(out, "truth.csv"),
               "process_key_exchange,fixed\n"
               "sub_2000,vulnerable\n"
               "sub_3000,vulnerable\n"
               + "".join(f"{s},irrelevant\n"
                         for s in sorted(STUB_CALLEES.values())))


def pool10():
    """One vulnerable variant, one fixed variant, eight irrelevant."""
    out = os.path.join(ROOT, "pool10")
    vul = skex_function(None, 0x5000, patched=False, style="clang",
                        lines=False, sp="edx", callees=STUB_CALLEES)
    fix = skex_function(None, 0x6000, patched=True, style="clang",
                        lines=False, sp="ebx", callees=STUB_CALLEES)
    irrelevant = []
    for i in range(8):
        fb = FunctionBuilder(None, base=0x7000 + i * 0x100)
        value = 0x700 + i * 3
        body0 = [f"mov eax, [esi+{8 * i:#x}]", f"cmp eax, {value:#x}",
                 "jne b1"]
        if i % 3 == 0:
            body0 = ["test eax, eax", "je b1"] + body0[:1]
        fb.block("b0", body0, succs=["b1", "b2"])
        fb.block("b1", [f"add eax, {i + 1}", "cmp eax, ebx"],
                 succs=["b2"])
        fb.block("b2", ["ret"])
        irrelevant.append(fb)
    pool = bundle([vul, fix] + irrelevant, compiler="mixed",
                  optimization="mixed", stripped=True)
    write_json(os.path.join(out, "pool.json"), pool)
    rows = ["sub_5000,vulnerable", "sub_6000,fixed"]
    rows += [f"sub_{0x7000 + i * 0x100:x},irrelevant" for i in range(8)]
    write_text(os.path.join(out, "truth.csv"), "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# Tiny fixture: single-parameter change.
# ---------------------------------------------------------------------------

PR_VUL = """\
int parse_record(BUF *b, int len) {
    if (len < 8)
        return -1;
    record_fetch(b, len, 12);
    return record_finish(b);
}
"""

PR_FIX = PR_VUL.replace("12", "16")

PR_PATCH = """\
--- a/pr.c
+++ b/pr.c
@@ -1,6 +1,6 @@
 int parse_record(BUF *b, int len) {
     if (len < 8)
         return -1;
-    record_fetch(b, len, 12);
+    record_fetch(b, len, 16);
     return record_finish(b);
 }
"""


def parse_record_fn(name, base, const, lines=True, pad=False):
    ln = (lambda n: n) if lines else (lambda n: None)
    fb = FunctionBuilder(name, base=base, source_file="pr.c")
    entry = ["nop"] if pad else []
    fb.block("b0", [(t, ln(2)) for t in
                    ["mov eax, [ebp+0xc]", "cmp eax, 8"]]
             + [("jge b2", ln(2))] + entry,
             succs=["b1", "b2"])
    fb.block("b1", [("mov eax, -1", ln(3)), ("jmp bret", ln(3))],
             succs=["bret"])
    fb.block("b2", [
        (f"push {const:#x}", ln(4)),
        ("push [ebp+0xc]", ln(4)),
        ("push [ebp+0x8]", ln(4)),
        ("call record_fetch", ln(4)),
        ("add esp, 0xc", ln(4)),
        ("push [ebp+0x8]", ln(5)),
        ("call record_finish", ln(5)),
    ], succs=["bret"])
    fb.block("bret", [("ret", ln(6))], succs=[])
    return fb


def tiny_param():
    out = os.path.join(ROOT, "tiny_param")
    write_text(os.path.join(out, "pr_vul.c"), PR_VUL)
    write_text(os.path.join(out, "pr_fix.c"), PR_FIX)
    write_text(os.path.join(out, "patch.diff"), PR_PATCH)
    write_json(os.path.join(out, "vul_ref.json"),
               bundle([parse_record_fn("parse_record", 0x1000, 12)]))
    write_json(os.path.join(out, "fix_ref.json"),
               bundle([parse_record_fn("parse_record", 0x1000, 16)]))
    pool = bundle([
        parse_record_fn(None, 0x5000, 12, lines=False),
        parse_record_fn(None, 0x6000, 16, lines=False),
    ])
    write_json(os.path.join(out, "pool.json"), pool)
    write_text(os.path.join(out, "truth.csv"),
               "sub_5000,vulnerable\nsub_6000,fixed\n")


# ---------------------------------------------------------------------------
# Assignment-only fixture: no key instructions change.
# ---------------------------------------------------------------------------

RS_VUL = """\
int reset_state(CTX *c) {
    c->count = 0;
    return do_reset(c);
}
"""

RS_FIX = """\
int reset_state(CTX *c) {
    c->count = 0;
    c->flags = 1;
    return do_reset(c);
}
"""

RS_PATCH = """\
--- a/rs.c
+++ b/rs.c
@@ -1,4 +1,5 @@
 int reset_state(CTX *c) {
     c->count = 0;
+    c->flags = 1;
     return do_reset(c);
 }
"""


def assign_only():
    out = os.path.join(ROOT, "assign_only")
    write_text(os.path.join(out, "rs_vul.c"), RS_VUL)
    write_text(os.path.join(out, "rs_fix.c"), RS_FIX)
    write_text(os.path.join(out, "patch.diff"), RS_PATCH)

    vul = FunctionBuilder("reset_state", source_file="rs.c")
    vul.block("b0", [("mov [eax+0x10], 0", 2), ("call do_reset", 3),
                     ("ret", 4)])
    fix = FunctionBuilder("reset_state", source_file="rs.c")
    fix.block("b0", [("mov [eax+0x10], 0", 2), ("mov [eax+0x14], 1", 3),
                     ("call do_reset", 4), ("ret", 5)])
    write_json(os.path.join(out, "vul_ref.json"), bundle([vul]))
    write_json(os.path.join(out, "fix_ref.json"), bundle([fix]))


def main():
    motivating()
    pool10()
    tiny_param()
    assign_only()
    print(f"fixtures written under {os.path.abspath(ROOT)}")


if __name__ == "__main__":
    main()
