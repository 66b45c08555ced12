"""Token-distribution dynamics under off-policy and on-policy updates.

The probability-space route integrates the cross-entropy gradient flow of
a linear softmax read-out with explicit Euler steps,

    p_k <- p_k - s * p_k * ((p_k - [k == y]) - (|p|^2 - p_y)),

where ``s`` is the step size times ``eta * |phi|^2``. The weight-space
route applies exact SGD steps to ``W`` and recomputes the softmax; the two
agree to first order in ``s``.

For every corrective token ``c`` outside ``{h, y}`` the simulator records
the gap ``d_c = p_h - p_c`` between the dominant hallucinated token ``h``
and ``c``. Under this flow the ordering ``p_h >= p_c`` is never reversed
(since ``d_c' = d_c * (1 - s * (p_h + p_c - f))`` with ``f <= p_h``), while
the gap itself shrinks geometrically. Both facts are checked per step.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .alignment import nll_regularized_step
from .data import OracleJudge, PreferencePair, PromptRecord, RolloutSet, judge as judge_response, select_pair
from .policy import (
    FeatureMap,
    Policy,
    Response,
    cross_entropy_step,
    end_token,
    next_token_distribution,
    policy_for_distribution,
    sequence_log_prob,
)
from .rng import derive_rng

TOL = 1e-12


class StepSizeError(ArithmeticError):
    """An update left the open simplex interior."""

    def __init__(self, step_index: int, message: str) -> None:
        super().__init__(f"step {step_index}: {message}")
        self.step_index = step_index


def euler_step(p: np.ndarray, target: int, step: float, step_index: int = 0) -> np.ndarray:
    """One explicit Euler step of the cross-entropy probability flow toward ``target``.

    No renormalization is applied; the update components sum to zero
    analytically.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    p = np.asarray(p, dtype=float)
    onehot = np.zeros_like(p)
    onehot[target] = 1.0
    f = float(np.sum(p * (p - onehot)))
    out = p - step * p * ((p - onehot) - f)
    if out.min() <= 0.0 or out.max() >= 1.0:
        bad = int(np.flatnonzero((out <= 0.0) | (out >= 1.0))[0])
        raise StepSizeError(step_index, f"p[{bad}] = {float(out[bad])!r} left (0, 1); reduce the step size")
    return out


def weight_space_step(policy: Policy, prompt: int, prefix: Sequence[int], target: int, lr: float) -> Policy:
    """Exact SGD step on the read-out weights; ``lr = 0`` returns the policy unchanged."""
    if lr == 0:
        return policy
    return cross_entropy_step(policy, prompt, prefix, target, lr)


@dataclass(frozen=True)
class DynamicsConfig:
    vocab_size: int
    halluc_set: frozenset[int]
    initial: tuple[float, ...]
    step: float = 0.05
    n_steps: int = 200
    mode: str = "euler_probability_space"  # or "gradient_weight_space"
    tracked: tuple[int, ...] | None = None  # default: every corrective except y

    def __post_init__(self) -> None:
        if self.mode not in ("euler_probability_space", "gradient_weight_space"):
            raise ValueError(f"unknown dynamics mode {self.mode!r}")
        if len(self.initial) != self.vocab_size:
            raise ValueError("initial distribution has the wrong length")
        if not self.step > 0 or self.n_steps < 0:
            raise ValueError("need step > 0 and n_steps >= 0")
        if not self.halluc_set or len(self.halluc_set) >= self.vocab_size:
            raise ValueError("hallucination set must be non-empty and proper")

    @property
    def dominant(self) -> int:
        return int(np.argmax(self.initial))


def random_config(seed: int, vocab_size: int, step: float = 0.05, n_steps: int = 200,
                  mode: str = "euler_probability_space") -> tuple[DynamicsConfig, int]:
    """Random hallucinating start: ``p ~ Dirichlet(1)``, the argmax and about a
    quarter of the other tokens form ``H``, and ``y`` is a random corrective."""
    rng = derive_rng(seed, "dynamics-config", vocab_size)
    p = rng.dirichlet(np.ones(vocab_size))
    h = int(np.argmax(p))
    others = [k for k in range(vocab_size) if k != h]
    n_extra = min(max(vocab_size // 4 - 1, 0), len(others) - 1)
    extra = rng.choice(others, size=n_extra, replace=False) if n_extra else []
    halluc = frozenset([h, *map(int, extra)])
    correct = [k for k in range(vocab_size) if k not in halluc]
    y = int(rng.choice(correct))
    return DynamicsConfig(vocab_size, halluc, tuple(float(x) for x in p), step, n_steps, mode), y


@dataclass
class TrajectoryRecord:
    step: int
    probs: np.ndarray
    h: int
    y: int
    tracked: tuple[int, ...]
    gaps: np.ndarray


@dataclass
class TrajectoryResult:
    records: list[TrajectoryRecord]
    monotonicity_violations: int  # steps with d_c(n+1) < d_c(n) - tol
    ordering_violations: int  # steps with p_h < p_c - tol
    bound_violations: int  # steps with p_h < |p|^2 - p_y - tol
    gap_increases: int  # steps with d_c(n+1) > d_c(n) + tol
    max_sum_drift: float

    @property
    def final(self) -> np.ndarray:
        return self.records[-1].probs

    def summary(self) -> dict:
        return {
            "monotonicity_violations": self.monotonicity_violations,
            "ordering_violations": self.ordering_violations,
            "bound_violations": self.bound_violations,
            "gap_increases": self.gap_increases,
            "max_sum_drift": self.max_sum_drift,
            "h": self.records[0].h,
            "y": self.records[0].y,
            "final": [float(x) for x in self.final],
        }


def run_offpolicy_trajectory(config: DynamicsConfig, target: int) -> TrajectoryResult:
    """Train toward a fixed external target and record the hallucination gaps."""
    h = config.dominant
    if h not in config.halluc_set:
        raise ValueError("the initial modal token must be hallucinated")
    if target in config.halluc_set:
        raise ValueError("the training target must be a corrective token")
    tracked = config.tracked
    if tracked is None:
        tracked = tuple(c for c in range(config.vocab_size) if c not in config.halluc_set and c != target)
    tracked = tuple(c for c in tracked if c not in (h, target))
    idx = np.array(tracked, dtype=int)

    p = np.array(config.initial, dtype=float)
    step_fn = _euler_stepper(config, target) if config.mode == "euler_probability_space" else _weight_stepper(config, target)

    def record(n: int, probs: np.ndarray) -> TrajectoryRecord:
        return TrajectoryRecord(n, probs, h, target, tracked, probs[h] - probs[idx])

    records = [record(0, p)]
    mono = order = bound = inc = 0
    drift = abs(float(np.sum(p)) - 1.0)
    for n in range(config.n_steps):
        p_prev = p
        gap_prev = records[-1].gaps
        if p_prev[h] < float(p_prev @ p_prev) - p_prev[target] - TOL:
            bound += 1
        p = step_fn(p, n)
        rec = record(n + 1, p)
        if len(idx):
            delta = rec.gaps - gap_prev
            mono += int(delta.min() < -TOL)
            inc += int(delta.max() > TOL)
            order += int(rec.gaps.min() < -TOL)
        drift = max(drift, abs(float(p.sum()) - 1.0))
        records.append(rec)
    if len(records) > 0 and config.n_steps:
        last = records[-1].probs
        if last[h] < float(last @ last) - last[target] - TOL:
            bound += 1
    return TrajectoryResult(records, mono, order, bound, inc, drift)


def _euler_stepper(config: DynamicsConfig, target: int):
    def step(p: np.ndarray, n: int) -> np.ndarray:
        return euler_step(p, target, config.step, n)
    return step


def _weight_stepper(config: DynamicsConfig, target: int):
    fmap = FeatureMap(config.vocab_size, dim=8, window=0, seed=0)
    phi = fmap.features(0)
    lr = config.step / float(phi @ phi)  # so that eta * |phi|^2 equals the step
    state = {"policy": policy_for_distribution(np.array(config.initial), fmap)}

    def step(p: np.ndarray, n: int) -> np.ndarray:
        state["policy"] = cross_entropy_step(state["policy"], 0, (), target, lr)
        out = next_token_distribution(state["policy"], 0)
        if np.any(out <= 0.0) or np.any(out >= 1.0):
            raise StepSizeError(n, "probability left (0, 1)")
        return out
    return step


def trajectory_csv(result: TrajectoryResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    v = len(result.records[0].probs)
    tracked = result.records[0].tracked
    writer.writerow(["step", *[f"p_{k}" for k in range(v)], *[f"d_{c}" for c in tracked]])
    for rec in result.records:
        writer.writerow([rec.step, *map(repr, map(float, rec.probs)), *map(repr, map(float, rec.gaps))])
    return buf.getvalue()


# --- on-policy vs off-policy contrast -----------------------------------------


@dataclass(frozen=True)
class ContrastSetup:
    policy: Policy
    prompt: PromptRecord
    hallucinated: int  # dominant hallucinated token h
    correct: int  # the model's own best corrective token
    ground_truth: int  # external low-support target used off-policy
    external_rejected: int  # hallucinated token in the external data, not the model's own h


def contrast_setup(seed: int = 0, vocab_size: int = 8, p_halluc: float = 0.5, p_correct: float = 0.2,
                  p_ground_truth: float = 0.01, n_halluc: int = 3) -> ContrastSetup:
    """Single-context policy with a dominant hallucination (``p_halluc``), a
    runner-up correct token (``p_correct``), and a low-probability
    ground-truth token; the remaining mass is split at random."""
    rng = derive_rng(seed, "contrast-setup", vocab_size)
    stop = end_token(vocab_size)
    content = [int(t) for t in rng.permutation(stop)]
    if n_halluc < 2:
        raise ValueError("need at least two hallucinated tokens")
    h, c, gt = content[0], content[1], content[2]
    halluc = frozenset(content[3:3 + n_halluc - 1]) | {h}
    rest = [k for k in range(vocab_size) if k not in (h, c, gt)]
    probs = np.zeros(vocab_size)
    probs[[h, c, gt]] = [p_halluc, p_correct, p_ground_truth]
    remaining = 1.0 - probs.sum()
    cap = 0.9 * p_correct
    if remaining > cap * len(rest):
        raise ValueError("remaining mass cannot be spread below the runner-up")
    # keep every other token below the runner-up so h and c stay the top two;
    # mass above the cap is handed to the uncapped tokens until none exceeds it
    share = rng.dirichlet(np.ones(len(rest))) * remaining
    for _ in range(len(rest)):
        over = share > cap
        if not over.any():
            break
        excess = float(np.sum(share[over] - cap))
        share[over] = cap
        free = share < cap
        share[free] += excess * share[free] / share[free].sum()
    probs[rest] = share
    probs /= probs.sum()
    fmap = FeatureMap(vocab_size, dim=8, window=0, seed=seed)
    policy = policy_for_distribution(probs, fmap)
    prompt = PromptRecord(0, (gt, stop), halluc)
    return ContrastSetup(policy, prompt, h, c, gt, content[3])


@dataclass
class ContrastResult:
    before: np.ndarray
    after: np.ndarray
    flipped: bool
    flip_step: int | None
    history: list[np.ndarray] = field(repr=False)
    tracked: tuple[int, ...] = ()
    failures: int = 0  # steps where no admissible pair was found

    def summary(self) -> dict:
        return {
            "flipped": self.flipped,
            "flip_step": self.flip_step,
            "before": [float(x) for x in self.before],
            "after": [float(x) for x in self.after],
            "sampling_failures": self.failures,
        }


def _modal_is_correct(probs: np.ndarray, halluc: frozenset[int], candidates: Sequence[int]) -> bool:
    best = max(candidates, key=lambda k: (probs[k], -k))
    return best not in halluc


def run_onpolicy_contrast(
    setup: ContrastSetup,
    steps: int = 500,
    lr: float = 0.1,
    beta: float = 0.1,
    k: int = 5,
    seed: int = 0,
    off_policy: bool = False,
    retries: int = 10,
    judge=None,
) -> ContrastResult:
    """DPO on single-token pairs, drawn either from the current policy or from outside it.

    On-policy: K tokens are sampled from the current policy, judged, and the
    usual chosen/rejected selection applies. Off-policy: the pair is fixed
    external data, the ground-truth token against the external hallucinated
    token; neither comes from the policy. The flip is judged over ``h`` and
    the tracked correctives (every non-hallucinated token except the
    off-policy ground truth).
    """
    judge = judge or OracleJudge()
    policy = setup.policy
    reference = policy
    prompt = setup.prompt
    v = policy.vocab_size
    tracked = tuple(t for t in range(v) if t not in prompt.halluc_set and t != setup.ground_truth)
    candidates = (setup.hallucinated, *tracked)
    rng = derive_rng(seed, "contrast-offpolicy" if off_policy else "contrast-onpolicy")
    before = next_token_distribution(policy, prompt.id)
    history = [before]
    flip_step = 0 if _modal_is_correct(before, prompt.halluc_set, candidates) else None
    failures = 0
    external = PreferencePair(prompt.id, Response((setup.ground_truth,), 0.0),
                              Response((setup.external_rejected,), 0.0), 0.0, 1.0)
    for n in range(1, steps + 1):
        if flip_step == 0:
            break
        if off_policy:
            pair = external
        else:
            pair = None
            probs = next_token_distribution(policy, prompt.id)
            for _ in range(retries):
                toks = [int(t) for t in rng.choice(v, size=k, p=probs)]
                responses = tuple(Response((t,), float(np.log(probs[t]))) for t in toks)
                scores = tuple(judge_response(judge, prompt, r) for r in responses)
                outcome = select_pair(RolloutSet(prompt.id, responses, scores))
                if isinstance(outcome, PreferencePair):
                    pair = outcome
                    break
            if pair is None:
                failures += 1
                history.append(history[-1])
                continue
        policy = nll_regularized_step([pair], policy, reference, beta, lr, 0.0)
        probs = next_token_distribution(policy, prompt.id)
        history.append(probs)
        if flip_step is None and _modal_is_correct(probs, prompt.halluc_set, candidates):
            flip_step = n
    after = history[-1]
    return ContrastResult(before, after, flip_step is not None, flip_step, history, tracked, failures)


def contrast_csv(on: ContrastResult, off: ContrastResult) -> str:
    """Long-format CSV: arm, step, token, probability."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["arm", "step", "token", "prob"])
    for arm, res in (("on_policy", on), ("off_policy", off)):
        for n, probs in enumerate(res.history):
            for tok, pr in enumerate(probs):
                writer.writerow([arm, n, tok, repr(float(pr))])
    return buf.getvalue()


# --- support suppression --------------------------------------------------------


@dataclass
class SupportProbeResult:
    ref_prob: float
    final_prob: float
    reachable: bool
    history: list[float] = field(repr=False, default_factory=list)

    @property
    def growth(self) -> float:
        return self.final_prob / self.ref_prob if self.ref_prob > 0 else float("nan")

    def summary(self) -> dict:
        return {"ref_prob": self.ref_prob, "final_prob": self.final_prob, "reachable": self.reachable,
                "growth": self.growth}


def support_suppression_probe(reference: Policy, pair: PreferencePair, steps: int = 100, lr: float = 0.1,
                              beta: float = 0.5) -> SupportProbeResult:
    """DPO steps on one pair; reports ``pi(y_w | x)`` before and after.

    A chosen response with exactly zero reference probability cannot be
    moved by the log-ratio objective; it is reported as unreachable.
    """
    ref_logp = sequence_log_prob(reference, pair.prompt, pair.chosen)
    if not np.isfinite(ref_logp):
        return SupportProbeResult(0.0, 0.0, False)
    policy = reference
    history = [float(np.exp(ref_logp))]
    for _ in range(steps):
        policy = nll_regularized_step([pair], policy, reference, beta, lr, 0.0)
        history.append(float(np.exp(sequence_log_prob(policy, pair.prompt, pair.chosen))))
    return SupportProbeResult(history[0], history[-1], True, history)


def support_probe_setup(seed: int = 0, vocab_size: int = 8, p_low: float = 1e-7, p_high: float = 0.02,
                        p_rejected: float = 0.5) -> tuple[Policy, PreferencePair, PreferencePair]:
    """Single-context reference with a dominant rejected token, one
    low-support and one high-support chosen token.

    Returns ``(reference, low_pair, high_pair)``; both pairs share the
    rejected token, so the two arms differ only in the chosen token's
    reference probability.
    """
    if not 0 < p_low < p_high < 1 or p_low + p_high + p_rejected >= 1:
        raise ValueError("need 0 < p_low < p_high and p_low + p_high + p_rejected < 1")
    rng = derive_rng(seed, "support-probe", vocab_size)
    stop = end_token(vocab_size)
    content = [int(t) for t in rng.permutation(stop)]
    low, high, rejected = content[:3]
    rest = [k for k in range(vocab_size) if k not in (low, high, rejected)]
    probs = np.zeros(vocab_size)
    probs[[low, high, rejected]] = [p_low, p_high, p_rejected]
    probs[rest] = (1.0 - probs.sum()) * rng.dirichlet(np.ones(len(rest)))
    reference = policy_for_distribution(probs, FeatureMap(vocab_size, dim=8, window=0, seed=seed))
    rej = Response((rejected,), sequence_log_prob(reference, 0, (rejected,)))

    def pair(tok: int) -> PreferencePair:
        return PreferencePair(0, Response((tok,), sequence_log_prob(reference, 0, (tok,))), rej, 0.0, 1.0)
    return reference, pair(low), pair(high)


def summary_line(**fields) -> str:
    return json.dumps(fields, sort_keys=True)


__all__ = [
    "StepSizeError", "euler_step", "weight_space_step", "DynamicsConfig", "random_config", "TrajectoryRecord",
    "TrajectoryResult", "run_offpolicy_trajectory", "trajectory_csv", "contrast_setup", "run_onpolicy_contrast",
    "contrast_csv", "support_suppression_probe", "support_probe_setup",
]
