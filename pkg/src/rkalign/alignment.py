"""DPO, Rao-Kupper weighted DPO, and the iterative on-policy alignment loop.

Losses are minimized by plain gradient descent on the read-out weights (an
Adam variant is available through ``TrainingConfig.optimizer``). The sample
weight is computed from the current margins and then used as a constant,
so it never contributes to the gradient.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import (
    DataError,
    HallucinationJudge,
    PreferencePair,
    PromptRecord,
    build_offpolicy_dataset,
    build_preference_dataset,
    hallucination_rate,
)
from .policy import DEFAULT_MAX_LEN, Policy, sequence_log_prob_and_grad
from .preference import (
    DEFAULT_M_EASY,
    DEFAULT_M_HARD,
    RaoKupperModel,
    SampleCategory,
    categorize,
    sample_weight,
)
from .rng import derive_rng

log = logging.getLogger(__name__)

__all__ = [
    "PreferencePair",
    "TrainingConfig",
    "TrainingReport",
    "dpo_loss",
    "weighted_dpo_loss",
    "weighted_dpo_gradient",
    "nll_regularized_step",
    "run_iterative_alignment",
    "paper_recipe",
]


class AlignmentError(ValueError):
    pass


def _check_shapes(policy: Policy, reference: Policy) -> None:
    if policy.weights.shape != reference.weights.shape or policy.feature_map.params() != reference.feature_map.params():
        raise AlignmentError("policy and reference must share V, d and feature map")


def neg_log_sigmoid(m: float) -> float:
    return float(np.logaddexp(0.0, -m))


def _sigmoid_neg(m: float) -> float:
    """``sigma(-m)``, the magnitude of d(-log sigma(m))/dm."""
    return math.exp(-float(np.logaddexp(0.0, m)))


@dataclass(frozen=True)
class PairTerms:
    """Per-pair quantities at the current parameters."""

    margin: float
    grad_margin: np.ndarray  # d margin / dW
    chosen_logp: float
    grad_chosen: np.ndarray


def pair_terms(pair: PreferencePair, policy: Policy, beta: float, ref_logps: tuple[float, float]) -> PairTerms:
    lw, gw = sequence_log_prob_and_grad(policy, pair.prompt, pair.chosen.tokens)
    ll, gl = sequence_log_prob_and_grad(policy, pair.prompt, pair.rejected.tokens)
    margin = beta * ((lw - ref_logps[0]) - (ll - ref_logps[1]))
    return PairTerms(margin, beta * (gw - gl), lw, gw)


def reference_logps(pair: PreferencePair, reference: Policy) -> tuple[float, float]:
    lw, _ = sequence_log_prob_and_grad(reference, pair.prompt, pair.chosen.tokens)
    ll, _ = sequence_log_prob_and_grad(reference, pair.prompt, pair.rejected.tokens)
    return lw, ll


def dpo_loss(pair: PreferencePair, policy: Policy, reference: Policy, beta: float) -> tuple[float, float]:
    """``(-log sigma(margin), margin)`` with margin the implicit reward difference."""
    _check_shapes(policy, reference)
    if not beta > 0:
        raise AlignmentError("beta must be positive")
    terms = pair_terms(pair, policy, beta, reference_logps(pair, reference))
    return neg_log_sigmoid(terms.margin), terms.margin


def weighted_dpo_loss(pair: PreferencePair, policy: Policy, reference: Policy, beta: float,
                      rk: RaoKupperModel) -> tuple[float, float, float]:
    """``(weight * -log sigma(margin), weight, margin)``."""
    loss, margin = dpo_loss(pair, policy, reference, beta)
    weight = sample_weight(rk, margin)
    return weight * loss, weight, margin


def _canonical_order(batch: Sequence[PreferencePair]) -> list[int]:
    # fixed summation order -> permutation-invariant accumulation
    return sorted(range(len(batch)), key=lambda i: (batch[i].prompt, batch[i].chosen.tokens, batch[i].rejected.tokens))


@dataclass
class BatchResult:
    loss: float  # mean weighted DPO loss (+ nll term if any)
    grad: np.ndarray
    margins: list[float]
    weights: list[float]
    losses: list[float]  # per-pair weighted DPO losses, batch order


def batch_objective(
    batch: Sequence[PreferencePair],
    policy: Policy,
    beta: float,
    ref_logps: Sequence[tuple[float, float]],
    rk: RaoKupperModel | None = None,
    nll_weight: float = 0.0,
    frozen_weights: Sequence[float] | None = None,
) -> BatchResult:
    """Mean over the batch of ``weight * -log sigma(margin)`` plus ``nll_weight`` times
    the mean chosen NLL, with the gradient in ``W``.

    ``rk=None`` is unweighted DPO. ``frozen_weights`` overrides the weights
    computed from the current margins (used for per-epoch weighting and for
    finite-difference checks).
    """
    if not batch:
        raise AlignmentError("empty batch")
    n = len(batch)
    terms = [pair_terms(pair, policy, beta, ref) for pair, ref in zip(batch, ref_logps)]
    margins = [t.margin for t in terms]
    if frozen_weights is not None:
        weights = [float(w) for w in frozen_weights]
    elif rk is None:
        weights = [1.0] * n
    else:
        weights = [sample_weight(rk, m) for m in margins]
    base = [neg_log_sigmoid(m) for m in margins]
    if rk is None and frozen_weights is None:
        losses = base
        coefs = [-_sigmoid_neg(m) for m in margins]
    else:
        losses = [w * b for w, b in zip(weights, base)]
        coefs = [w * -_sigmoid_neg(m) for w, m in zip(weights, margins)]
    order = _canonical_order(batch)
    grad = np.sum(np.stack([coefs[i] * terms[i].grad_margin for i in order]), axis=0) / n
    loss = math.fsum(losses[i] for i in order) / n
    if nll_weight:
        nll_grad = np.sum(np.stack([terms[i].grad_chosen for i in order]), axis=0) / n
        grad = grad - nll_weight * nll_grad
        loss += nll_weight * -math.fsum(terms[i].chosen_logp for i in order) / n
    return BatchResult(loss, grad, margins, weights, losses)


def weighted_dpo_gradient(batch: Sequence[PreferencePair], policy: Policy, reference: Policy, beta: float,
                          rk: RaoKupperModel | None) -> np.ndarray:
    """Mean over the batch of ``sg(weight) * grad_W(-log sigma(margin))``."""
    if not batch:
        raise AlignmentError("empty batch")
    _check_shapes(policy, reference)
    refs = [reference_logps(p, reference) for p in batch]
    return batch_objective(batch, policy, beta, refs, rk).grad


def nll_regularized_step(batch: Sequence[PreferencePair], policy: Policy, reference: Policy, beta: float,
                         lr: float, nll_weight: float, rk: RaoKupperModel | None = None) -> Policy:
    """One gradient step on (weighted) DPO plus ``nll_weight`` times the chosen NLL."""
    if nll_weight < 0:
        raise AlignmentError("nll_weight must be >= 0")
    if not lr > 0:
        raise AlignmentError("learning rate must be positive")
    _check_shapes(policy, reference)
    refs = [reference_logps(p, reference) for p in batch]
    res = batch_objective(batch, policy, beta, refs, rk, nll_weight)
    return policy.with_weights(policy.weights - lr * res.grad)


# --- configuration and reporting ---------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    beta: float = 0.1
    nu: float = 3.0
    lr: float = 1.0
    epochs: int = 5
    batch_size: int = 32
    iterations: int = 1
    k: int = 5
    tau: float = 0.5
    nll_weight: float = 0.0
    seed: int = 0
    temperature: float = 1.0
    max_len: int = DEFAULT_MAX_LEN
    off_policy: bool = False
    weighted: bool = True
    weight_mode: str = "step"  # "step" | "epoch"
    optimizer: str = "sgd"  # "sgd" | "adam"
    m_easy: float = DEFAULT_M_EASY
    m_hard: float = DEFAULT_M_HARD
    retries: int = 3

    def __post_init__(self) -> None:
        checks = [
            (self.beta > 0, "beta must be > 0"),
            (self.nu >= 1, "nu must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.iterations >= 1, "iterations must be >= 1"),
            (self.k >= 2, "k must be >= 2"),
            (0 < self.tau < 1, "tau must be in (0, 1)"),
            (self.nll_weight >= 0, "nll_weight must be >= 0"),
            (self.temperature > 0, "temperature must be > 0"),
            (self.max_len >= 1, "max_len must be >= 1"),
            (self.weight_mode in ("step", "epoch"), "weight_mode must be 'step' or 'epoch'"),
            (self.optimizer in ("sgd", "adam"), "optimizer must be 'sgd' or 'adam'"),
            (self.m_hard < 0 < self.m_easy, "need m_hard < 0 < m_easy"),
            (self.retries >= 0, "retries must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise AlignmentError(msg)
        if self.tau != 0.5:
            raise AlignmentError("only tau = 0.5 is supported by the selection rule")

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)


def paper_recipe(base: TrainingConfig | None = None, lr_offpolicy: float = 0.1, lr_onpolicy: float = 1.0) -> list[TrainingConfig]:
    """Two iterations: off-policy DPO (beta 0.5, NLL 0.2, 1 epoch, batch 24) then
    on-policy Rao-Kupper weighted DPO (beta 0.1, nu 3, K 5, 5 epochs, batch 32).

    Learning rates are desk-scale choices for plain gradient descent.
    """
    base = base or TrainingConfig()
    first = base.replace(beta=0.5, nu=1.0, nll_weight=0.2, epochs=1, batch_size=24, off_policy=True,
                         weighted=False, lr=lr_offpolicy, iterations=2)
    second = base.replace(beta=0.1, nu=3.0, nll_weight=0.0, epochs=5, batch_size=32, k=5, off_policy=False,
                          weighted=True, lr=lr_onpolicy, iterations=2)
    return [first, second]


@dataclass
class EpochRecord:
    iteration: int
    epoch: int
    mean_loss: float
    mean_margin: float
    mean_weight: float
    n_easy: int
    n_hard: int
    n_boundary: int
    pairs: int
    weights: list[float] = field(default_factory=list, repr=False)


@dataclass
class IterationRecord:
    iteration: int
    config: TrainingConfig
    status: str  # "ok" | "empty"
    dataset: dict
    halluc_rate: float
    reference_checksum: str


REPORT_COLUMNS = ("iteration", "epoch", "mean_loss", "mean_margin", "mean_weight", "n_easy", "n_hard", "n_boundary", "pairs")


@dataclass
class TrainingReport:
    initial_halluc_rate: float
    epochs: list[EpochRecord] = field(default_factory=list)
    iterations: list[IterationRecord] = field(default_factory=list)

    @property
    def halluc_rates(self) -> list[float]:
        return [self.initial_halluc_rate] + [it.halluc_rate for it in self.iterations]

    @property
    def failed_iterations(self) -> list[int]:
        return [it.iteration for it in self.iterations if it.status != "ok"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for e in self.epochs:
            writer.writerow([e.iteration, e.epoch, repr(e.mean_loss), repr(e.mean_margin), repr(e.mean_weight),
                             e.n_easy, e.n_hard, e.n_boundary, e.pairs])
        return buf.getvalue()

    def weight_histogram(self, bins: Sequence[float] = tuple(np.linspace(0.0, 1.0, 11))) -> list[tuple[int, int, list[int]]]:
        return [(e.iteration, e.epoch, np.histogram(e.weights, bins=bins)[0].tolist()) for e in self.epochs]


class _Adam:
    def __init__(self, shape, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def update(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_on_pairs(
    pairs: Sequence[PreferencePair],
    policy: Policy,
    reference: Policy,
    config: TrainingConfig,
    iteration: int = 1,
) -> tuple[Policy, list[EpochRecord]]:
    """Stage 2: mini-batch (weighted) DPO epochs against a frozen reference."""
    if not pairs:
        raise AlignmentError("empty preference set")
    _check_shapes(policy, reference)
    refs = [reference_logps(p, reference) for p in pairs]
    rk = RaoKupperModel(config.nu) if config.weighted else None
    adam = _Adam(policy.weights.shape, config.lr) if config.optimizer == "adam" else None
    records = []
    n = len(pairs)
    for epoch in range(1, config.epochs + 1):
        order = derive_rng(config.seed, "minibatch-order", iteration, epoch).permutation(n)
        epoch_weights = None
        if rk is not None and config.weight_mode == "epoch":
            epoch_weights = [sample_weight(rk, pair_terms(pairs[i], policy, config.beta, refs[i]).margin) for i in range(n)]
        losses, margins, weights = [], [], []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [pairs[i] for i in idx]
            frozen = None if epoch_weights is None else [epoch_weights[i] for i in idx]
            res = batch_objective(batch, policy, config.beta, [refs[i] for i in idx], rk, config.nll_weight, frozen)
            step = adam.update(res.grad) if adam is not None else config.lr * res.grad
            policy = policy.with_weights(policy.weights - step)
            losses.extend(res.losses)
            margins.extend(res.margins)
            weights.extend(res.weights)
        cats = [categorize(m, config.m_easy, config.m_hard) for m in margins]
        records.append(EpochRecord(
            iteration, epoch,
            math.fsum(losses) / n, math.fsum(margins) / n, math.fsum(weights) / n,
            cats.count(SampleCategory.EASY), cats.count(SampleCategory.HARD), cats.count(SampleCategory.BOUNDARY),
            n, weights,
        ))
    return policy, records


def run_iterative_alignment(
    config: TrainingConfig | Sequence[TrainingConfig],
    prompts: Sequence[PromptRecord],
    judge: HallucinationJudge,
    policy: Policy,
    eval_prompts: Sequence[PromptRecord] | None = None,
    workers: int = 1,
    checkpoints: list | None = None,
) -> tuple[Policy, TrainingReport]:
    """Alternate preference-data construction and DPO training for T iterations.

    ``config`` is either one config (repeated ``config.iterations`` times) or
    an explicit per-iteration schedule. Each iteration uses the policy it
    started from as the frozen reference. An iteration whose preference set
    comes out empty is recorded with status ``"empty"`` and leaves the
    policy unchanged.
    """
    if not prompts:
        raise DataError("empty prompt dataset")
    schedule = [config] * config.iterations if isinstance(config, TrainingConfig) else list(config)
    if not schedule:
        raise AlignmentError("empty schedule")
    eval_prompts = list(prompts if eval_prompts is None else eval_prompts)
    report = TrainingReport(hallucination_rate(policy, eval_prompts, schedule[0].max_len))
    for t, cfg in enumerate(schedule, start=1):
        reference = policy
        ref_sum = reference.checksum()
        build = build_offpolicy_dataset if cfg.off_policy else build_preference_dataset
        kwargs = {"retries": cfg.retries} if cfg.off_policy else {}
        data = build(prompts, policy, judge, cfg.k, cfg.temperature, derive_seed(cfg.seed, t), cfg.max_len,
                     workers=workers, **kwargs)
        log.info("iteration %d: %s", t, data.stats.as_dict())
        status = "ok"
        if data.pairs:
            policy, records = train_on_pairs(data.pairs, policy, reference, cfg, t)
            report.epochs.extend(records)
        else:
            status = "empty"
            log.warning("iteration %d: preference set is empty after filtering", t)
        if reference.checksum() != ref_sum:
            raise AlignmentError("reference policy was modified during training")
        rate = hallucination_rate(policy, eval_prompts, cfg.max_len)
        report.iterations.append(IterationRecord(t, cfg, status, data.stats.as_dict(), rate, ref_sum))
        if checkpoints is not None:
            checkpoints.append(policy)
    return policy, report


def derive_seed(seed: int, iteration: int) -> int:
    return int(derive_rng(seed, "iteration-seed", iteration).integers(2**62))


def reward_margins(pairs: Sequence[PreferencePair], policy: Policy, reference: Policy, beta: float) -> list[float]:
    return [dpo_loss(p, policy, reference, beta)[1] for p in pairs]


def weight_curve(nu: float, margins: Sequence[float]) -> list[float]:
    rk = RaoKupperModel(nu)
    return [sample_weight(rk, m) for m in margins]
