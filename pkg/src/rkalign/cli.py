"""Command-line harness: ``rkalign <command> [--config FILE] [--key value ...]``.

Every command reads a flat ``key = value`` config file (``#`` starts a
comment), applies command-line overrides, writes the resolved config to
``<out>/<command>.config`` and then runs. Machine-readable output goes to
files under ``--out``; progress goes to stderr.

Exit codes: 0 success, 2 config or input error, 3 empty dataset,
4 numerical violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import dynamics
from .alignment import AlignmentError, TrainingConfig, paper_recipe, run_iterative_alignment, weight_curve
from .data import (
    DataError,
    OracleJudge,
    ClassifierJudge,
    PreferencePair,
    PromptRecord,
    RolloutSet,
    generate_task,
    judge,
    make_classifier_corpus,
    read_annotations,
    read_pairs,
    read_prompts,
    read_rollouts,
    rollout_prompt,
    select_pair,
    train_classifier,
    write_annotations,
    write_pairs,
    write_prompts,
    write_rollouts,
)
from .policy import FeatureMap, Policy, PolicyError, init_policy, load_checkpoint, save_checkpoint
from .preference import PreferenceModelError

log = logging.getLogger("rkalign")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EMPTY = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    kind: Callable[[str], Any]
    default: Any
    help: str


# One flat namespace shared by all commands. Keys a command does not use are
# accepted and recorded but have no effect.
KEYS: tuple[Key, ...] = (
    Key("seed", int, 0, "master seed; every stream is derived from it"),
    Key("vocab", int, None, "vocabulary size V including the end token"),
    Key("n", int, 64, "number of prompts"),
    Key("halluc_fraction", float, 0.125, "fraction of V placed in each hallucination set"),
    Key("max_len", int, 6, "maximum response length"),
    Key("dim", int, 256, "feature dimension"),
    Key("window", int, 2, "previous-token window of the feature map"),
    Key("prompt_scale", float, 2.0, "weight of the prompt embedding in the features"),
    Key("init_scale", float, 1.5, "logit scale of the initial policy"),
    Key("min_len", int, 3, "positions before which the end token is masked"),
    Key("prompts", str, "", "prompts.jsonl path"),
    Key("rollouts", str, "", "rollouts.jsonl path"),
    Key("annotations", str, "", "annotations.jsonl path"),
    Key("pairs", str, "", "pairs.jsonl path"),
    Key("checkpoint", str, "", "policy checkpoint (default: fresh initial policy)"),
    Key("classifier", str, "", "classifier.json path (judge = classifier)"),
    Key("align_dir", str, "", "output directory of an align run (report)"),
    Key("judge", str, "oracle", "oracle | classifier"),
    Key("oracle_noise", float, 0.0, "label-flip probability of the oracle judge"),
    Key("k", int, 5, "responses sampled per prompt"),
    Key("temperature", float, 1.0, "sampling temperature"),
    Key("beta", float, 0.1, "DPO inverse temperature"),
    Key("nu", float, 3.0, "Rao-Kupper tie parameter (1 = plain DPO)"),
    Key("lr", float, 1.0, "learning rate"),
    Key("epochs", int, 5, "epochs per iteration"),
    Key("batch_size", int, 32, "mini-batch size"),
    Key("iterations", int, 1, "alignment iterations (ignored with recipe = paper)"),
    Key("tau", float, 0.5, "hallucination threshold"),
    Key("nll_weight", float, 0.0, "NLL regularizer weight on chosen responses"),
    Key("off_policy", _bool, False, "ground truth as chosen instead of sampled responses"),
    Key("weighted", _bool, True, "apply the Rao-Kupper sample weight"),
    Key("weight_mode", str, "step", "step | epoch: when the weights are recomputed"),
    Key("optimizer", str, "sgd", "sgd | adam"),
    Key("m_easy", float, 2.0, "margin at or above which a pair counts as easy"),
    Key("m_hard", float, -2.0, "margin at or below which a pair counts as hard"),
    Key("retries", int, 3, "extra sampling rounds for off-policy rejected responses"),
    Key("recipe", str, "", "'paper' for the two-iteration preset, empty for a uniform schedule"),
    Key("lr_offpolicy", float, 0.1, "paper recipe: learning rate of iteration 1"),
    Key("lr_onpolicy", float, 1.0, "paper recipe: learning rate of iteration 2"),
    Key("nu_sweep", str, "", "comma-separated nu values to sweep, e.g. 1,2,3,5,8"),
    Key("n_examples", int, 2000, "classifier corpus size"),
    Key("classifier_lr", float, 0.5, "classifier learning rate"),
    Key("classifier_epochs", int, 1000, "classifier epochs"),
    Key("val_fraction", float, 0.2, "held-out fraction of the classifier corpus"),
    Key("mode", str, "offpolicy", "dynamics: offpolicy | onpolicy-contrast | support-probe"),
    Key("integrator", str, "euler_probability_space", "euler_probability_space | gradient_weight_space"),
    Key("step", float, 0.05, "dynamics step size"),
    Key("n_steps", int, 200, "dynamics steps per trajectory"),
    Key("n_seeds", int, 1000, "dynamics seeds"),
    Key("vocab_sizes", str, "5,10,50", "dynamics vocabulary sizes"),
    Key("trajectory_csvs", int, 1, "seeds per vocabulary size with a full trajectory CSV"),
    Key("contrast_vocab", int, 8, "vocabulary size of the contrast setup"),
    Key("contrast_steps", int, 500, "DPO steps of the contrast run"),
    Key("contrast_lr", float, 0.1, "learning rate of the contrast run"),
    Key("contrast_beta", float, 0.1, "beta of the contrast run"),
    Key("probe_steps", int, 100, "DPO steps of the support probe"),
    Key("probe_lr", float, 0.1, "learning rate of the support probe"),
    Key("probe_beta", float, 0.5, "beta of the support probe"),
    Key("probe_ceiling", float, 1e-3, "ceiling for the low-support arm"),
)
KEY_INDEX = {k.name: k for k in KEYS}
# execution settings that never change results; left out of the resolved config
RUNTIME_KEYS = ("out", "workers")

COMMANDS = ("gen-task", "train-classifier", "rollout", "annotate", "select", "align", "dynamics", "report")
DYNAMICS_MODES = ("offpolicy", "onpolicy-contrast", "support-probe")
REPORT_COLUMNS = ("prompt_id", "n_responses", "n_hallucinated", "halluc_rate", "p_chosen", "p_rejected",
                  "chosen_len", "rejected_len")


# --- configuration -----------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` comments; unknown keys are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEY_INDEX and key not in RUNTIME_KEYS:
            raise CliError(EXIT_CONFIG, f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value: str) -> Any:
    try:
        return KEY_INDEX[key].kind(value)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad value for {key}: {exc}") from None


def resolve_config(args: argparse.Namespace) -> tuple[dict[str, Any], Path, int]:
    """(resolved keys, output directory, workers); flags override the file."""
    resolved = {k.name: k.default for k in KEYS}
    runtime = {"out": ".", "workers": "1"}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(EXIT_CONFIG, f"config file not found: {path}")
        for key, value in parse_config_text(path.read_text(encoding="utf-8"), str(path)).items():
            if key in RUNTIME_KEYS:
                runtime[key] = value
            else:
                resolved[key] = _convert(key, value)
    for key in KEY_INDEX:
        value = getattr(args, key)
        if value is not None:
            resolved[key] = _convert(key, value)
    for key in RUNTIME_KEYS:
        if getattr(args, key) is not None:
            runtime[key] = getattr(args, key)
    try:
        workers = int(runtime["workers"])
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad value for workers: {runtime['workers']!r}") from None
    if workers < 1:
        raise CliError(EXIT_CONFIG, "--workers must be >= 1")
    return resolved, Path(runtime["out"]), workers


def format_config(cfg: dict[str, Any]) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def training_config(cfg: dict[str, Any]) -> TrainingConfig:
    names = {f.name for f in fields(TrainingConfig)}
    return TrainingConfig(**{k: v for k, v in cfg.items() if k in names})


# --- helpers -----------------------------------------------------------------


def _require(cfg: dict[str, Any], key: str) -> Any:
    if cfg.get(key) in (None, ""):
        raise CliError(EXIT_CONFIG, f"missing required flag --{key.replace('_', '-')}")
    return cfg[key]


def _input(cfg: dict[str, Any], key: str) -> Path:
    path = Path(_require(cfg, key))
    if not path.is_file():
        raise CliError(EXIT_CONFIG, f"--{key.replace('_', '-')}: file not found: {path}")
    return path


def _floats(text: str, key: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--{key.replace('_', '-')}: expected comma-separated numbers") from None


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _cell(x: Any) -> Any:
    # numpy scalars would otherwise repr as "np.float64(...)"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def _csv(rows: Sequence[Sequence[Any]], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(x) for x in row])
    return buf.getvalue()


def _json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _vocab_from_prompts(prompts: Sequence[PromptRecord], cfg: dict[str, Any]) -> int:
    # every ground-truth answer ends with the end token V - 1
    v = prompts[0].gt_tokens[-1] + 1
    if cfg.get("vocab") not in (None, v):
        raise CliError(EXIT_CONFIG, f"--vocab {cfg['vocab']} does not match the prompts file (V = {v})")
    return v


def _load_prompts(cfg: dict[str, Any]) -> tuple[list[PromptRecord], int]:
    prompts = read_prompts(_input(cfg, "prompts"))
    if not prompts:
        raise CliError(EXIT_CONFIG, "prompts file is empty")
    return prompts, _vocab_from_prompts(prompts, cfg)


def _load_policy(cfg: dict[str, Any], vocab: int) -> Policy:
    if cfg["checkpoint"]:
        policy = load_checkpoint(_input(cfg, "checkpoint"))
        if policy.vocab_size != vocab:
            raise CliError(EXIT_CONFIG, f"checkpoint has V = {policy.vocab_size}, prompts have V = {vocab}")
        return policy
    fmap = FeatureMap(vocab, cfg["dim"], cfg["window"], cfg["seed"], cfg["prompt_scale"])
    return init_policy(fmap, cfg["init_scale"], cfg["seed"], cfg["min_len"])


def _load_judge(cfg: dict[str, Any]):
    if cfg["judge"] == "oracle":
        return OracleJudge(noise=cfg["oracle_noise"], seed=cfg["seed"])
    if cfg["judge"] == "classifier":
        doc = json.loads(_input(cfg, "classifier").read_text(encoding="utf-8"))
        return ClassifierJudge.from_dict(doc)
    raise CliError(EXIT_CONFIG, f"--judge must be 'oracle' or 'classifier', got {cfg['judge']!r}")


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- commands ----------------------------------------------------------------


def cmd_gen_task(cfg: dict[str, Any], out: Path, workers: int) -> int:
    vocab = _require(cfg, "vocab")
    prompts = generate_task(cfg["seed"], cfg["n"], vocab, cfg["halluc_fraction"], cfg["max_len"])
    write_prompts(out / "prompts.jsonl", prompts)
    log.info("wrote %d prompts (V = %d)", len(prompts), vocab)
    return EXIT_OK


def cmd_train_classifier(cfg: dict[str, Any], out: Path, workers: int) -> int:
    prompts, vocab = _load_prompts(cfg)
    oracle = OracleJudge(noise=cfg["oracle_noise"], seed=cfg["seed"])
    corpus = make_classifier_corpus(prompts, cfg["n_examples"], vocab, cfg["seed"], oracle, cfg["val_fraction"])
    history: list[float] = []
    clf = train_classifier(corpus, cfg["classifier_lr"], cfg["classifier_epochs"], cfg["seed"], vocab, history)
    _write(out / "classifier.json", json.dumps(clf.to_dict(), sort_keys=True) + "\n")
    _write(out / "classifier_loss.csv", _csv([(i, x) for i, x in enumerate(history)], ("epoch", "loss")))
    _write(out / "classifier_metrics.json", _json({
        "n_examples": cfg["n_examples"], "validation_agreement": clf.validation_accuracy,
        "final_loss": history[-1], "positive_rate": float(corpus.labels.mean()),
    }))
    log.info("classifier held-out agreement %.4f", clf.validation_accuracy)
    return EXIT_OK


def cmd_rollout(cfg: dict[str, Any], out: Path, workers: int) -> int:
    prompts, vocab = _load_prompts(cfg)
    policy = _load_policy(cfg, vocab)
    if cfg["k"] < 1:
        raise CliError(EXIT_CONFIG, "--k must be >= 1")

    def work(prompt: PromptRecord):
        return prompt.id, rollout_prompt(policy, prompt, cfg["k"], cfg["temperature"], cfg["seed"], cfg["max_len"])

    rows = _map(work, prompts, workers)
    write_rollouts(out / "rollouts.jsonl", rows)
    log.info("wrote %d x %d rollouts", len(rows), cfg["k"])
    return EXIT_OK


def cmd_annotate(cfg: dict[str, Any], out: Path, workers: int) -> int:
    prompts, _ = _load_prompts(cfg)
    by_id = {p.id: p for p in prompts}
    rollouts = read_rollouts(_input(cfg, "rollouts"))
    judge_ = _load_judge(cfg)
    missing = sorted(set(rollouts) - set(by_id))
    if missing:
        raise CliError(EXIT_CONFIG, f"rollouts reference unknown prompt ids, e.g. {missing[0]}")

    def work(pid: int):
        return [(pid, rid, judge(judge_, by_id[pid], resp)) for rid, resp in rollouts[pid]]

    rows = [r for chunk in _map(work, sorted(rollouts), workers) for r in chunk]
    write_annotations(out / "annotations.jsonl", rows)
    log.info("annotated %d responses", len(rows))
    return EXIT_OK


def cmd_select(cfg: dict[str, Any], out: Path, workers: int) -> int:
    rollouts = read_rollouts(_input(cfg, "rollouts"))
    notes = read_annotations(_input(cfg, "annotations"))
    pairs: list[PreferencePair] = []
    stats = {"admitted": 0, "filtered_all_clean": 0, "filtered_all_halluc": 0}
    for pid in sorted(rollouts):
        responses = tuple(resp for _, resp in rollouts[pid])
        try:
            scores = tuple(notes[(pid, rid)][0] for rid, _ in rollouts[pid])
        except KeyError as exc:
            raise CliError(EXIT_CONFIG, f"no annotation for (prompt, response) {exc.args[0]}") from None
        outcome = select_pair(RolloutSet(pid, responses, scores))
        if isinstance(outcome, PreferencePair):
            pairs.append(outcome)
            stats["admitted"] += 1
        else:
            stats["filtered_" + outcome.reason] += 1
    write_pairs(out / "pairs.jsonl", pairs)
    _write(out / "select_stats.json", _json(stats))
    log.info("selection: %s", stats)
    if not pairs:
        raise CliError(EXIT_EMPTY, "no preference pairs survived filtering")
    return EXIT_OK


def _run_alignment(cfg: dict[str, Any], prompts: list[PromptRecord], vocab: int, out: Path, workers: int,
                   nu: float | None = None) -> dict:
    base = training_config(cfg if nu is None else {**cfg, "nu": nu})
    if cfg["recipe"] == "paper":
        schedule = paper_recipe(base, cfg["lr_offpolicy"], cfg["lr_onpolicy"])
        if nu is not None:
            schedule = [c.replace(nu=nu) if c.weighted else c for c in schedule]
    elif cfg["recipe"] == "":
        schedule = [base] * base.iterations
    else:
        raise CliError(EXIT_CONFIG, f"unknown recipe {cfg['recipe']!r} (expected 'paper')")
    policy = _load_policy(cfg, vocab)
    checkpoints: list[Policy] = []
    _, report = run_iterative_alignment(schedule, prompts, _load_judge(cfg), policy, workers=workers,
                                        checkpoints=checkpoints)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for t, pol in enumerate(checkpoints, start=1):
        save_checkpoint(pol, ckpt_dir / f"iter_{t}.json")
    _write(out / "report.csv", report.to_csv())
    it_rows = [(0, "initial", report.initial_halluc_rate, "", "", "", "", "")]
    for it in report.iterations:
        d = it.dataset
        it_rows.append((it.iteration, it.status, it.halluc_rate, d["admitted"], d["filtered_all_clean"],
                        d["filtered_all_halluc"], d["skipped"], it.reference_checksum))
    _write(out / "iterations.csv", _csv(it_rows, ("iteration", "status", "halluc_rate", "admitted",
                                                  "filtered_all_clean", "filtered_all_halluc", "skipped",
                                                  "reference_sha256")))
    bins = np.linspace(0.0, 1.0, 11)
    hist_rows = [(t, e, *counts) for t, e, counts in report.weight_histogram(tuple(bins))]
    _write(out / "weight_histogram.csv",
           _csv(hist_rows, ("iteration", "epoch", *[f"w_{bins[i]:.1f}_{bins[i + 1]:.1f}" for i in range(10)])))
    rates = report.halluc_rates
    summary = {
        "halluc_rates": rates,
        "relative_reduction": (rates[0] - rates[-1]) / rates[0] if rates[0] > 0 else 0.0,
        "non_increasing": all(b <= a for a, b in zip(rates, rates[1:])),
        "failed_iterations": report.failed_iterations,
        "iterations": len(report.iterations),
        "final_mean_weight": report.epochs[-1].mean_weight if report.epochs else None,
        "final_mean_margin": report.epochs[-1].mean_margin if report.epochs else None,
    }
    _write(out / "summary.json", _json(summary))
    log.info("hallucination rate by iteration: %s", ", ".join(f"{r:.3f}" for r in rates))
    return summary


WEIGHT_CURVE_MARGINS = tuple(float(m) for m in np.round(np.linspace(-10.0, 10.0, 401), 10))


def cmd_align(cfg: dict[str, Any], out: Path, workers: int) -> int:
    prompts, vocab = _load_prompts(cfg)
    if cfg["nu_sweep"]:
        nus = _floats(cfg["nu_sweep"], "nu_sweep")
        if not nus:
            raise CliError(EXIT_CONFIG, "--nu-sweep is empty")
        curves = [weight_curve(nu, WEIGHT_CURVE_MARGINS) for nu in nus]
        rows = [(m, *[c[i] for c in curves]) for i, m in enumerate(WEIGHT_CURVE_MARGINS)]
        _write(out / "weight_curves.csv", _csv(rows, ("margin", *[f"nu_{nu:g}" for nu in nus])))
        sweep_rows, empty = [], False
        for nu in nus:
            log.info("nu = %g", nu)
            s = _run_alignment(cfg, prompts, vocab, out / f"nu_{nu:g}", workers, nu)
            empty |= bool(s["failed_iterations"])
            r = s["halluc_rates"]
            sweep_rows.append((nu, r[0], r[-1], s["relative_reduction"], s["non_increasing"],
                               s["final_mean_weight"], s["final_mean_margin"]))
        _write(out / "nu_sweep.csv", _csv(sweep_rows, ("nu", "initial_halluc_rate", "final_halluc_rate",
                                                        "relative_reduction", "non_increasing",
                                                        "final_mean_weight", "final_mean_margin")))
    else:
        empty = bool(_run_alignment(cfg, prompts, vocab, out, workers)["failed_iterations"])
    if empty:
        raise CliError(EXIT_EMPTY, "an iteration had an empty preference set after filtering")
    return EXIT_OK


def _offpolicy_run(args: tuple[int, int, dict]) -> tuple[dict, str | None]:
    seed, v, cfg = args
    config, y = dynamics.random_config(seed, v, cfg["step"], cfg["n_steps"], cfg["integrator"])
    result = dynamics.run_offpolicy_trajectory(config, y)
    line = {"seed": seed, "V": v, **result.summary()}
    return line, dynamics.trajectory_csv(result) if seed < cfg["trajectory_csvs"] else None


def cmd_dynamics(cfg: dict[str, Any], out: Path, workers: int) -> int:
    mode = cfg["mode"]
    if mode not in DYNAMICS_MODES:
        raise CliError(EXIT_CONFIG, f"--mode must be one of {', '.join(DYNAMICS_MODES)}, got {mode!r}")
    if mode == "offpolicy":
        if cfg["integrator"] not in ("euler_probability_space", "gradient_weight_space"):
            raise CliError(EXIT_CONFIG, f"unknown --integrator {cfg['integrator']!r}")
        sizes = [int(v) for v in _floats(cfg["vocab_sizes"], "vocab_sizes")]
        jobs = [(seed, v, cfg) for v in sizes for seed in range(cfg["n_seeds"])]
        results = _map(_offpolicy_run, jobs, workers)
        traj_dir = out / "trajectories"
        traj_dir.mkdir(exist_ok=True)
        for (line, text) in results:
            if text is not None:
                _write(traj_dir / f"V{line['V']}_seed{line['seed']}.csv", text)
        _write(out / "runs.jsonl", "".join(dynamics.summary_line(**line) + "\n" for line, _ in results))
        counts = ("monotonicity_violations", "ordering_violations", "bound_violations", "gap_increases")
        summary = {c: sum(line[c] for line, _ in results) for c in counts}
        summary.update(runs=len(results), runs_with_monotonicity_violations=sum(
            line["monotonicity_violations"] > 0 for line, _ in results),
            max_sum_drift=max(line["max_sum_drift"] for line, _ in results))
        _write(out / "summary.json", _json(summary))
        log.info("offpolicy: %s", summary)
    elif mode == "onpolicy-contrast":
        setup = dynamics.contrast_setup(cfg["seed"], cfg["contrast_vocab"])
        kw = dict(steps=cfg["contrast_steps"], lr=cfg["contrast_lr"], beta=cfg["contrast_beta"], k=cfg["k"],
                  seed=cfg["seed"])
        on = dynamics.run_onpolicy_contrast(setup, **kw)
        off = dynamics.run_onpolicy_contrast(setup, off_policy=True, **kw)
        _write(out / "contrast.csv", dynamics.contrast_csv(on, off))
        rows = [(tok, float(on.before[tok]), float(on.after[tok]), float(off.after[tok]),
                 "h" if tok == setup.hallucinated else "H" if tok in setup.prompt.halluc_set
                 else "gt" if tok == setup.ground_truth else "c")
                for tok in range(len(on.before))]
        _write(out / "contrast_distributions.csv", _csv(rows, ("token", "before", "on_policy_after",
                                                               "off_policy_after", "role")))
        lines = [dynamics.summary_line(seed=cfg["seed"], arm=arm, hallucinated=setup.hallucinated,
                                       ground_truth=setup.ground_truth, **res.summary())
                 for arm, res in (("on_policy", on), ("off_policy", off))]
        _write(out / "summary.jsonl", "\n".join(lines) + "\n")
        log.info("on-policy flip=%s (step %s); off-policy flip=%s", on.flipped, on.flip_step, off.flipped)
    else:
        reference, low, high = dynamics.support_probe_setup(cfg["seed"], cfg["contrast_vocab"])
        kw = dict(steps=cfg["probe_steps"], lr=cfg["probe_lr"], beta=cfg["probe_beta"])
        arms = (("low_support", dynamics.support_suppression_probe(reference, low, **kw)),
                ("high_support", dynamics.support_suppression_probe(reference, high, **kw)))
        rows = [(n, arms[0][1].history[n], arms[1][1].history[n]) for n in range(len(arms[0][1].history))]
        _write(out / "support_probe.csv", _csv(rows, ("step", "low_support_prob", "high_support_prob")))
        lines = []
        for arm, res in arms:
            extra = {"below_ceiling": res.final_prob < cfg["probe_ceiling"]} if arm == "low_support" else {}
            lines.append(dynamics.summary_line(seed=cfg["seed"], arm=arm, **res.summary(), **extra))
        _write(out / "summary.jsonl", "\n".join(lines) + "\n")
        log.info("support probe: %s", "; ".join(lines))
    return EXIT_OK


def cmd_report(cfg: dict[str, Any], out: Path, workers: int) -> int:
    pairs = read_pairs(_input(cfg, "pairs"))
    notes = read_annotations(_input(cfg, "annotations"))
    per_prompt: dict[int, list[int]] = {}
    for (pid, _), (_, label) in sorted(notes.items()):
        per_prompt.setdefault(pid, []).append(label)
    rows = []
    for pair in sorted(pairs, key=lambda p: p.prompt):
        labels = per_prompt.get(pair.prompt, [])
        n_h = sum(labels)
        rate = n_h / len(labels) if labels else float("nan")
        rows.append((pair.prompt, len(labels), n_h, rate, pair.p_chosen, pair.p_rejected,
                     len(pair.chosen.tokens), len(pair.rejected.tokens)))
    if not rows:
        log.warning("pairs file %s is empty; the report has no rows", cfg["pairs"])
    _write(out / "report.csv", _csv(rows, REPORT_COLUMNS))
    total = sum(len(v) for v in per_prompt.values())
    summary = {
        "pairs": len(rows),
        "responses": total,
        "halluc_rate": sum(map(sum, per_prompt.values())) / total if total else None,
    }
    if cfg["align_dir"]:
        align_dir = Path(cfg["align_dir"])
        for name in ("iterations.csv", "weight_histogram.csv"):
            src = align_dir / name
            if not src.is_file():
                raise CliError(EXIT_CONFIG, f"--align-dir: missing {src}")
            _write(out / f"report_{name}", src.read_text(encoding="utf-8"))
        with open(align_dir / "iterations.csv", encoding="utf-8") as fh:
            summary["halluc_rates_by_iteration"] = [float(r["halluc_rate"]) for r in csv.DictReader(fh)]
    _write(out / "report_summary.json", _json(summary))
    return EXIT_OK


HANDLERS = {
    "gen-task": cmd_gen_task,
    "train-classifier": cmd_train_classifier,
    "rollout": cmd_rollout,
    "annotate": cmd_annotate,
    "select": cmd_select,
    "align": cmd_align,
    "dynamics": cmd_dynamics,
    "report": cmd_report,
}


# --- entry point -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 as well, keep the contract explicit
        self.print_usage(sys.stderr)
        raise CliError(EXIT_CONFIG, message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="output directory, created if missing (default: .)")
    common.add_argument("--workers", help="parallel workers; results do not depend on it (default: 1)")
    common.add_argument("--verbose", "-v", action="store_true")
    for key in KEYS:
        default = "" if key.default is None else key.default
        common.add_argument("--" + key.name.replace("_", "-"), dest=key.name, default=None, metavar="VALUE",
                            help=f"{key.help} (default: {default})")
    parser = _Parser(prog="rkalign", description="Desk-scale iterative preference alignment experiments.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        doc = (HANDLERS[name].__doc__ or "").strip()
        sub.add_parser(name, parents=[common], help=doc or name.replace("-", " "))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        cfg, out, workers = resolve_config(args)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / f"{args.command}.config", format_config(cfg))
        return HANDLERS[args.command](cfg, out, workers)
    except CliError as exc:
        print(f"rkalign: error: {exc}", file=sys.stderr)
        return exc.code
    except dynamics.StepSizeError as exc:
        print(f"rkalign: numerical violation: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, AlignmentError, PolicyError, PreferenceModelError, ValueError, OSError) as exc:
        print(f"rkalign: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
