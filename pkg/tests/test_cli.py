from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from ploc.cli import main
from ploc.engine import detect_pool
from ploc.metrics import EvaluationError, compute_metrics, load_truth_csv
from ploc.signature import load_signature_pair
from ploc.testkit import bundle

from conftest import fixture_path


@pytest.fixture
def runner():
    return CliRunner()


def sign_motivating(runner, tmp_path, cve="CVE-2014-3470-shape"):
    result = runner.invoke(main, [
        "sign",
        "--cfg", fixture_path("motivating", "vul_ref.json"),
        "--cfg", fixture_path("motivating", "fix_ref.json"),
        "--src", fixture_path("motivating", "skex_vul.c"),
        "--src", fixture_path("motivating", "skex_fix.c"),
        "--patch", fixture_path("motivating", "patch.diff"),
        "--out", str(tmp_path / "sigdb"),
        "--cve", cve,
    ])
    assert result.exit_code == 0, result.output
    return tmp_path / "sigdb" / f"{cve}.json"


class TestSign:
    def test_writes_signature_db_entry(self, runner, tmp_path):
        sig_path = sign_motivating(runner, tmp_path)
        assert sig_path.exists()
        pair = load_signature_pair(sig_path)
        assert pair.cve == "CVE-2014-3470-shape"
        assert pair.vul.patch_path is None
        assert pair.fix.patch_path is not None

    def test_undetectable_patch_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, [
            "sign",
            "--cfg", fixture_path("assign_only", "vul_ref.json"),
            "--cfg", fixture_path("assign_only", "fix_ref.json"),
            "--src", fixture_path("assign_only", "rs_vul.c"),
            "--src", fixture_path("assign_only", "rs_fix.c"),
            "--patch", fixture_path("assign_only", "patch.diff"),
            "--out", str(tmp_path / "sigdb"),
            "--cve", "CVE-2014-0224-shape",
        ])
        assert result.exit_code == 2
        assert "undetectable patch" in result.output

    def test_dump_ag_writes_dot(self, runner, tmp_path):
        result = runner.invoke(main, [
            "sign",
            "--cfg", fixture_path("tiny_param", "vul_ref.json"),
            "--cfg", fixture_path("tiny_param", "fix_ref.json"),
            "--src", fixture_path("tiny_param", "pr_vul.c"),
            "--src", fixture_path("tiny_param", "pr_fix.c"),
            "--patch", fixture_path("tiny_param", "patch.diff"),
            "--out", str(tmp_path / "sigdb"),
            "--cve", "tiny",
            "--dump-ag", str(tmp_path / "dots"),
        ])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "dots" / "tiny.vul.dot").exists()
        assert "digraph" in (tmp_path / "dots" / "tiny.vul.dot").read_text()


class TestDetect:
    def test_motivating_pool_labels(self, runner, tmp_path):
        sig_path = sign_motivating(runner, tmp_path)
        report_path = tmp_path / "report.json"
        result = runner.invoke(main, [
            "detect",
            "--sig", str(sig_path),
            "--pool", fixture_path("motivating", "pool.json"),
            "--simdb", fixture_path("motivating", "simdb.csv"),
            "--report", str(report_path),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads(report_path.read_text())
        labels = {r["target"]: r["label"] for r in report["rows"]}
        assert labels["process_key_exchange"] == "fixed"
        assert labels["sub_2000"] == "vulnerable"
        assert labels["sub_3000"] == "vulnerable"
        assert report["thresholds"] == {"t_iff": 0.4, "t_cpm": 0.3,
                                        "t_bcsd": 0.9}
        assert "generated_at" in report

    def test_rows_sorted_and_complete(self, runner, tmp_path):
        sig_path = sign_motivating(runner, tmp_path)
        report_path = tmp_path / "report.json"
        runner.invoke(main, [
            "detect", "--sig", str(sig_path),
            "--pool", fixture_path("motivating", "pool.json"),
            "--simdb", fixture_path("motivating", "simdb.csv"),
            "--report", str(report_path)])
        report = json.loads(report_path.read_text())
        targets = [r["target"] for r in report["rows"]]
        assert targets == sorted(targets)
        assert len(targets) == 8  # every pool function classified

    def test_empty_pool(self, runner, tmp_path):
        sig_path = sign_motivating(runner, tmp_path)
        pool_path = tmp_path / "empty.json"
        pool_path.write_text(json.dumps(bundle([])))
        report_path = tmp_path / "report.json"
        result = runner.invoke(main, [
            "detect", "--sig", str(sig_path), "--pool", str(pool_path),
            "--report", str(report_path)])
        assert result.exit_code == 0, result.output
        assert json.loads(report_path.read_text())["rows"] == []

    def test_missing_files_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, [
            "detect", "--sig", str(tmp_path / "nope.json"),
            "--pool", str(tmp_path / "nope2.json"),
            "--report", str(tmp_path / "r.json")])
        assert result.exit_code == 2

    def test_byte_identical_reports_without_timestamp(self, runner,
                                                      tmp_path):
        sig_path = sign_motivating(runner, tmp_path)
        paths = [tmp_path / "r1.json", tmp_path / "r2.json"]
        for path in paths:
            result = runner.invoke(main, [
                "detect", "--sig", str(sig_path),
                "--pool", fixture_path("motivating", "pool.json"),
                "--simdb", fixture_path("motivating", "simdb.csv"),
                "--report", str(path), "--no-timestamp", "--threads", "4"])
            assert result.exit_code == 0, result.output
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_csv_output(self, runner, tmp_path):
        sig_path = sign_motivating(runner, tmp_path)
        csv_path = tmp_path / "rows.csv"
        runner.invoke(main, [
            "detect", "--sig", str(sig_path),
            "--pool", fixture_path("tiny_param", "pool.json"),
            "--report", str(tmp_path / "r.json"), "--csv", str(csv_path)])
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "target,label,score,time_ms"
        assert len(lines) == 3

    def test_pool_of_only_the_vul_reference(self, runner, tmp_path):
        # Self-classification: the vulnerable reference itself must come
        # back vulnerable (its duplicated error handling matches the fix
        # patch path but fails control-flow verification).
        sig_path = sign_motivating(runner, tmp_path)
        report_path = tmp_path / "r.json"
        result = runner.invoke(main, [
            "detect", "--sig", str(sig_path),
            "--pool", fixture_path("motivating", "vul_ref.json"),
            "--report", str(report_path)])
        assert result.exit_code == 0, result.output
        rows = json.loads(report_path.read_text())["rows"]
        assert len(rows) == 1
        assert rows[0]["label"] == "vulnerable"
        assert rows[0]["evidence"]["fix"]["rejected_patch_candidates"]

    def test_pool_of_only_the_fix_reference(self, runner, tmp_path):
        sig_path = sign_motivating(runner, tmp_path)
        report_path = tmp_path / "r.json"
        result = runner.invoke(main, [
            "detect", "--sig", str(sig_path),
            "--pool", fixture_path("motivating", "fix_ref.json"),
            "--report", str(report_path)])
        assert result.exit_code == 0, result.output
        rows = json.loads(report_path.read_text())["rows"]
        assert rows[0]["label"] == "fixed"

    def test_tiny_param_pool(self, runner, tmp_path):
        result = runner.invoke(main, [
            "sign",
            "--cfg", fixture_path("tiny_param", "vul_ref.json"),
            "--cfg", fixture_path("tiny_param", "fix_ref.json"),
            "--src", fixture_path("tiny_param", "pr_vul.c"),
            "--src", fixture_path("tiny_param", "pr_fix.c"),
            "--patch", fixture_path("tiny_param", "patch.diff"),
            "--out", str(tmp_path / "sigdb"), "--cve", "tiny"])
        assert result.exit_code == 0, result.output
        report_path = tmp_path / "report.json"
        result = runner.invoke(main, [
            "detect", "--sig", str(tmp_path / "sigdb" / "tiny.json"),
            "--pool", fixture_path("tiny_param", "pool.json"),
            "--report", str(report_path)])
        assert result.exit_code == 0, result.output
        labels = {r["target"]: r["label"]
                  for r in json.loads(report_path.read_text())["rows"]}
        assert labels == {"sub_5000": "vulnerable", "sub_6000": "fixed"}


class TestEvaluate:
    def _report(self, tmp_path, rows):
        path = tmp_path / "report.json"
        path.write_text(json.dumps(
            {"cve": "x", "thresholds": {}, "rows": rows, "metrics": None}))
        return path

    def _truth(self, tmp_path, pairs):
        path = tmp_path / "truth.csv"
        path.write_text("".join(f"{t},{l}\n" for t, l in pairs))
        return path

    @staticmethod
    def _row(target, label, error=None):
        evidence = {"error": error} if error else {}
        return {"target": target, "label": label, "score": 0.0,
                "time_ms": 0.0, "evidence": evidence}

    def test_basic_confusion(self, runner, tmp_path):
        rows = [self._row(f"v{i}", "vulnerable") for i in range(9)]
        rows += [self._row("v9", "fixed")]
        rows += [self._row(f"n{i}", "irrelevant") for i in range(10)]
        truth = [(f"v{i}", "vulnerable") for i in range(10)]
        truth += [(f"n{i}", "fixed" if i < 5 else "irrelevant")
                  for i in range(10)]
        result = runner.invoke(main, [
            "evaluate", "--report", str(self._report(tmp_path, rows)),
            "--truth", str(self._truth(tmp_path, truth))])
        assert result.exit_code == 0, result.output
        metrics = json.loads(result.output)
        assert metrics["tp"] == 9 and metrics["fn"] == 1
        assert metrics["fp"] == 0 and metrics["tn"] == 10
        assert metrics["tpr"] == pytest.approx(0.9)
        assert metrics["fpr"] == 0.0

    def test_all_irrelevant_predictions(self, runner, tmp_path):
        rows = [self._row(f"t{i}", "irrelevant") for i in range(10)]
        truth = [(f"t{i}", "vulnerable" if i < 5 else "fixed")
                 for i in range(10)]
        result = runner.invoke(main, [
            "evaluate", "--report", str(self._report(tmp_path, rows)),
            "--truth", str(self._truth(tmp_path, truth))])
        metrics = json.loads(result.output)
        assert metrics["tpr"] == 0.0 and metrics["fpr"] == 0.0

    def test_support_rate_partitioning(self, runner, tmp_path):
        rows = [self._row(f"s{i}", "vulnerable") for i in range(18)]
        rows += [self._row(f"e{i}", "irrelevant", error="boom")
                 for i in range(2)]
        truth = [(f"s{i}", "vulnerable") for i in range(18)]
        truth += [(f"e{i}", "vulnerable") for i in range(2)]
        result = runner.invoke(main, [
            "evaluate", "--report", str(self._report(tmp_path, rows)),
            "--truth", str(self._truth(tmp_path, truth))])
        metrics = json.loads(result.output)
        assert metrics["sr"] == pytest.approx(0.9)
        assert metrics["tc_supported"] == 18 and metrics["tc_all"] == 20
        assert metrics["tpr_s"] == pytest.approx(1.0)
        assert metrics["tpr"] == pytest.approx(0.9)

    def test_id_mismatch_lists_missing(self, runner, tmp_path):
        rows = [self._row("a", "fixed")]
        result = runner.invoke(main, [
            "evaluate", "--report", str(self._report(tmp_path, rows)),
            "--truth", str(self._truth(tmp_path, [("b", "fixed")]))])
        assert result.exit_code == 2
        assert "a" in result.output and "b" in result.output

    def test_out_writes_report_with_metrics(self, runner, tmp_path):
        rows = [self._row("a", "fixed")]
        out = tmp_path / "with_metrics.json"
        result = runner.invoke(main, [
            "evaluate", "--report", str(self._report(tmp_path, rows)),
            "--truth", str(self._truth(tmp_path, [("a", "fixed")])),
            "--out", str(out)])
        assert result.exit_code == 0
        assert json.loads(out.read_text())["metrics"]["tn"] == 1


class TestMetricsUnit:
    def test_formulas_recomputable(self):
        rows = [{"target": "a", "label": "vulnerable", "evidence": {}},
                {"target": "b", "label": "fixed", "evidence": {}},
                {"target": "c", "label": "irrelevant", "evidence": {}}]
        truth = {"a": "vulnerable", "b": "vulnerable", "c": "irrelevant"}
        m = compute_metrics(rows, truth)
        assert m.tpr == m.tp / (m.tp + m.fn)
        assert m.fpr == m.fp / (m.tn + m.fp) if (m.tn + m.fp) else True
        assert m.sr == m.tc_supported / m.tc_all

    def test_truth_csv_header_tolerated(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("target_id,label\nx,fixed\n")
        assert load_truth_csv(path) == {"x": "fixed"}

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x,bogus\n")
        with pytest.raises(EvaluationError):
            load_truth_csv(path)


class TestBatchErrorHandling:
    def test_failing_target_yields_error_row(self, monkeypatch):
        from ploc import engine
        from ploc.cfg import load_cfg_bundle

        pool = load_cfg_bundle(fixture_path("tiny_param", "pool.json"))

        def exploding(sig_pair, tgt, *a, **k):
            if tgt.uid == "sub_5000":
                raise RuntimeError("induced failure")
            raise ValueError("other")

        monkeypatch.setattr(engine, "detect_one", exploding)
        rows = detect_pool(None, pool, threads=1)
        assert all(r["label"] == "irrelevant" for r in rows)
        assert all("error" in r["evidence"] for r in rows)
        assert "induced failure" in rows[0]["evidence"]["error"]
