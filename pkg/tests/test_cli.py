import csv
import json
import subprocess
import sys

import pytest

from rkalign.cli import REPORT_COLUMNS, main
from rkalign.data import read_pairs


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def task(tmp_path):
    assert run("gen-task", "--seed", 7, "--n", 64, "--vocab", 16, "--out", tmp_path / "task") == 0
    return tmp_path / "task" / "prompts.jsonl"


def pipeline(tmp_path, prompts, workers=1):
    """rollout -> annotate -> select into one directory."""
    out = tmp_path / f"pipe{workers}"
    assert run("rollout", "--prompts", prompts, "--seed", 1, "--out", out, "--workers", workers) == 0
    assert run("annotate", "--prompts", prompts, "--rollouts", out / "rollouts.jsonl", "--out", out,
               "--workers", workers) == 0
    assert run("select", "--rollouts", out / "rollouts.jsonl", "--annotations", out / "annotations.jsonl",
               "--out", out) == 0
    return out


class TestGenTask:
    def test_byte_identical(self, tmp_path, task):
        run("gen-task", "--seed", 7, "--n", 64, "--vocab", 16, "--out", tmp_path / "again")
        assert (tmp_path / "again" / "prompts.jsonl").read_bytes() == task.read_bytes()

    def test_missing_vocab(self, tmp_path, capsys):
        assert run("gen-task", "--n", 4, "--out", tmp_path) == 2
        assert "--vocab" in capsys.readouterr().err

    def test_schema_reparse(self, task):
        lines = task.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 64
        for i, line in enumerate(lines):
            row = json.loads(line)
            assert row["id"] == i
            assert row["gt_tokens"][-1] == 15
            assert not set(row["gt_tokens"]) & set(row["halluc_set"])
            assert len(row["halluc_set"]) == 2

    def test_resolved_config_written(self, tmp_path, task):
        text = (tmp_path / "task" / "gen-task.config").read_text(encoding="utf-8")
        assert "vocab = 16" in text and "seed = 7" in text
        assert "workers" not in text and "out =" not in text


class TestConfig:
    def test_unknown_key_named(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("# comment\nvocab = 16\nbogus_key = 3\n")
        assert run("gen-task", "--config", tmp_path / "c.cfg", "--out", tmp_path) == 2
        assert "bogus_key" in capsys.readouterr().err

    def test_flag_overrides_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("vocab = 16\nn = 10\nseed = 3\n")
        assert run("gen-task", "--config", tmp_path / "c.cfg", "--n", 5, "--out", tmp_path / "o") == 0
        assert len((tmp_path / "o" / "prompts.jsonl").read_text().splitlines()) == 5
        assert "n = 5" in (tmp_path / "o" / "gen-task.config").read_text()

    def test_resolved_config_round_trips(self, tmp_path):
        assert run("gen-task", "--vocab", 16, "--n", 6, "--out", tmp_path / "a") == 0
        assert run("gen-task", "--config", tmp_path / "a" / "gen-task.config", "--out", tmp_path / "b") == 0
        assert (tmp_path / "a" / "prompts.jsonl").read_bytes() == (tmp_path / "b" / "prompts.jsonl").read_bytes()

    def test_bad_value(self, tmp_path):
        assert run("gen-task", "--vocab", "sixteen", "--out", tmp_path) == 2

    def test_unknown_command(self):
        assert run("fly") == 2


class TestPipeline:
    def test_stages_and_workers(self, tmp_path, task):
        one = pipeline(tmp_path, task, 1)
        three = pipeline(tmp_path, task, 3)
        for name in ("rollouts.jsonl", "annotations.jsonl", "pairs.jsonl", "select_stats.json"):
            assert (one / name).read_bytes() == (three / name).read_bytes()
        assert read_pairs(one / "pairs.jsonl")

    def test_select_empty_exits_3(self, tmp_path):
        (tmp_path / "r.jsonl").write_text('{"prompt_id": 0, "response_id": 0, "tokens": [1, 15], "log_prob": -1.0}\n'
                                          '{"prompt_id": 0, "response_id": 1, "tokens": [2, 15], "log_prob": -1.0}\n')
        (tmp_path / "a.jsonl").write_text('{"prompt_id": 0, "response_id": 0, "p_halluc": 0.0, "label": 0}\n'
                                          '{"prompt_id": 0, "response_id": 1, "p_halluc": 0.0, "label": 0}\n')
        assert run("select", "--rollouts", tmp_path / "r.jsonl", "--annotations", tmp_path / "a.jsonl",
                   "--out", tmp_path / "o") == 3

    def test_malformed_input_exits_2(self, tmp_path, capsys):
        (tmp_path / "r.jsonl").write_text('{"prompt": 0, "tokens": [1]}\n')
        (tmp_path / "a.jsonl").write_text("")
        assert run("select", "--rollouts", tmp_path / "r.jsonl", "--annotations", tmp_path / "a.jsonl",
                   "--out", tmp_path / "o") == 2
        assert "missing field" in capsys.readouterr().err

    def test_missing_input_exits_2(self, tmp_path):
        assert run("rollout", "--prompts", tmp_path / "nope.jsonl", "--out", tmp_path) == 2

    def test_classifier_judge(self, tmp_path, task):
        out = tmp_path / "clf"
        assert run("train-classifier", "--prompts", task, "--n-examples", 400, "--classifier-epochs", 50,
                   "--out", out) == 0
        metrics = json.loads((out / "classifier_metrics.json").read_text())
        assert 0.5 <= metrics["validation_agreement"] <= 1.0
        pipe = pipeline(tmp_path, task)
        assert run("annotate", "--prompts", task, "--rollouts", pipe / "rollouts.jsonl", "--judge", "classifier",
                   "--classifier", out / "classifier.json", "--out", out) == 0


class TestAlign:
    def test_nu_one_matches_unweighted(self, tmp_path, task):
        assert run("align", "--prompts", task, "--nu", 1, "--out", tmp_path / "rk") == 0
        assert run("align", "--prompts", task, "--weighted", "false", "--out", tmp_path / "dpo") == 0

        def losses(path):
            with open(path / "report.csv") as fh:
                return [r["mean_loss"] for r in csv.DictReader(fh)]
        assert losses(tmp_path / "rk") == losses(tmp_path / "dpo") and len(losses(tmp_path / "rk")) == 5

    def test_paper_recipe_two_iterations(self, tmp_path, task):
        assert run("align", "--prompts", task, "--recipe", "paper", "--out", tmp_path / "a") == 0
        with open(tmp_path / "a" / "report.csv") as fh:
            assert {r["iteration"] for r in csv.DictReader(fh)} == {"1", "2"}
        assert sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir()) == ["iter_1.json", "iter_2.json"]

    def test_rerun_and_workers_byte_identical(self, tmp_path, task):
        for name, workers in (("a", 1), ("b", 1), ("c", 3)):
            assert run("align", "--prompts", task, "--recipe", "paper", "--workers", workers,
                       "--out", tmp_path / name) == 0
        for f in ("report.csv", "iterations.csv", "weight_histogram.csv", "summary.json", "align.config",
                  "checkpoints/iter_2.json"):
            a = (tmp_path / "a" / f).read_bytes()
            assert a == (tmp_path / "b" / f).read_bytes() == (tmp_path / "c" / f).read_bytes()

    def test_unknown_recipe(self, tmp_path, task):
        assert run("align", "--prompts", task, "--recipe", "fancy", "--out", tmp_path) == 2

    def test_nu_sweep_outputs(self, tmp_path, task):
        assert run("align", "--prompts", task, "--nu-sweep", "1,3", "--epochs", 1, "--out", tmp_path / "s") == 0
        with open(tmp_path / "s" / "weight_curves.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 401 and set(rows[0]) == {"margin", "nu_1", "nu_3"}
        assert all(float(r["nu_1"]) == 1.0 for r in rows)
        assert rows[0]["margin"] == "-10.0" and rows[200]["margin"] == "0.0"
        assert (tmp_path / "s" / "nu_3" / "report.csv").is_file()
        with open(tmp_path / "s" / "nu_sweep.csv") as fh:
            assert [r["nu"] for r in csv.DictReader(fh)] == ["1.0", "3.0"]


class TestDynamicsCommand:
    def test_offpolicy_small(self, tmp_path):
        assert run("dynamics", "--n-seeds", 5, "--vocab-sizes", "5,10", "--out", tmp_path) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["runs"] == 10
        assert summary["ordering_violations"] == 0 and summary["bound_violations"] == 0
        assert len((tmp_path / "runs.jsonl").read_text().splitlines()) == 10
        assert (tmp_path / "trajectories" / "V5_seed0.csv").is_file()

    def test_offpolicy_thousand_seeds_zero_violations(self, tmp_path):
        # Stated target: zero monotonicity violations. The gap shrinks under
        # this flow, so the summary reports violations and the check fails.
        assert run("dynamics", "--n-seeds", 1000, "--out", tmp_path) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["bound_violations"] == 0 and summary["ordering_violations"] == 0
        assert summary["monotonicity_violations"] == 0

    def test_workers_byte_identical(self, tmp_path):
        for name, w in (("a", 1), ("b", 4)):
            run("dynamics", "--n-seeds", 20, "--vocab-sizes", "5", "--trajectory-csvs", 3, "--workers", w,
                "--out", tmp_path / name)
        for f in ("runs.jsonl", "summary.json", "trajectories/V5_seed2.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_contrast_flips(self, tmp_path):
        assert run("dynamics", "--mode", "onpolicy-contrast", "--seed", 0, "--out", tmp_path) == 0
        lines = [json.loads(x) for x in (tmp_path / "summary.jsonl").read_text().splitlines()]
        by_arm = {x["arm"]: x for x in lines}
        assert by_arm["on_policy"]["flipped"] is True and by_arm["off_policy"]["flipped"] is False
        assert (tmp_path / "contrast.csv").is_file()

    def test_support_probe(self, tmp_path):
        assert run("dynamics", "--mode", "support-probe", "--out", tmp_path) == 0
        lines = {x["arm"]: x for x in map(json.loads, (tmp_path / "summary.jsonl").read_text().splitlines())}
        assert lines["low_support"]["below_ceiling"] is True
        assert lines["high_support"]["growth"] >= 10

    def test_bad_mode(self, tmp_path):
        assert run("dynamics", "--mode", "sideways", "--out", tmp_path) == 2

    def test_step_violation_exit_4(self, tmp_path, capsys):
        assert run("dynamics", "--n-seeds", 1, "--vocab-sizes", "5", "--step", 50, "--out", tmp_path) == 4
        assert "step 0" in capsys.readouterr().err


class TestReport:
    def test_empty_pairs_warns(self, tmp_path):
        (tmp_path / "pairs.jsonl").write_text("")
        (tmp_path / "ann.jsonl").write_text("")
        proc = subprocess.run([sys.executable, "-m", "rkalign", "report", "--pairs", str(tmp_path / "pairs.jsonl"),
                               "--annotations", str(tmp_path / "ann.jsonl"), "--out", str(tmp_path / "r")],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "WARNING" in proc.stderr and "empty" in proc.stderr
        assert proc.stdout == ""
        assert (tmp_path / "r" / "report.csv").read_text().splitlines() == [",".join(REPORT_COLUMNS)]

    def test_recount_and_golden_columns(self, tmp_path, task):
        pipe = pipeline(tmp_path, task)
        before = {p.name: p.read_bytes() for p in pipe.iterdir() if p.is_file()}
        assert run("report", "--pairs", pipe / "pairs.jsonl", "--annotations", pipe / "annotations.jsonl",
                   "--out", tmp_path / "r") == 0
        assert {p.name: p.read_bytes() for p in pipe.iterdir() if p.is_file()} == before

        counts = {}
        for line in (pipe / "annotations.jsonl").read_text().splitlines():
            row = json.loads(line)
            n, h = counts.get(row["prompt_id"], (0, 0))
            counts[row["prompt_id"]] = (n + 1, h + (row["p_halluc"] >= 0.5))
        with open(tmp_path / "r" / "report.csv") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        assert header == ["prompt_id", "n_responses", "n_hallucinated", "halluc_rate", "p_chosen", "p_rejected",
                          "chosen_len", "rejected_len"]
        assert rows
        for r in rows:
            n, h = counts[int(r[0])]
            assert int(r[1]) == n and int(r[2]) == h and float(r[3]) == h / n

    def test_align_dir_copied(self, tmp_path, task):
        pipe = pipeline(tmp_path, task)
        run("align", "--prompts", task, "--epochs", 1, "--out", tmp_path / "a")
        assert run("report", "--pairs", pipe / "pairs.jsonl", "--annotations", pipe / "annotations.jsonl",
                   "--align-dir", tmp_path / "a", "--out", tmp_path / "r") == 0
        assert (tmp_path / "r" / "report_iterations.csv").read_bytes() == (tmp_path / "a" / "iterations.csv").read_bytes()
        summary = json.loads((tmp_path / "r" / "report_summary.json").read_text())
        assert len(summary["halluc_rates_by_iteration"]) == 2

    def test_missing_inputs(self, tmp_path):
        assert run("report", "--pairs", tmp_path / "x", "--annotations", tmp_path / "y", "--out", tmp_path) == 2
