"""Synthetic tasks, on-policy rollouts, hallucination judging and pair selection.

A prompt carries a ground-truth answer and a hallucination set ``H``: tokens
that contradict the (abstract) image behind the prompt. Hallucination sets
are built from a global token co-occurrence table, so that the tokens a
prompt is prone to hallucinate are those that commonly co-occur with its
true content. A response is hallucinated iff it contains any token of ``H``.
"""

from __future__ import annotations

import functools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .policy import DEFAULT_MAX_LEN, Policy, Response, end_token, sample_response, sequence_log_prob
from .rng import derive_rng, stable_hash

TAU = 0.5


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class PromptRecord:
    id: int
    gt_tokens: tuple[int, ...]
    halluc_set: frozenset[int]

    def __post_init__(self) -> None:
        if not self.halluc_set:
            raise DataError(f"prompt {self.id}: empty hallucination set")
        if set(self.gt_tokens) & self.halluc_set:
            raise DataError(f"prompt {self.id}: ground truth contains a hallucination token")

    def is_hallucinated(self, tokens: Iterable[int]) -> bool:
        return any(t in self.halluc_set for t in tokens)


def halluc_set_size(vocab_size: int, halluc_fraction: float) -> int:
    if not 0 < halluc_fraction < 1:
        raise DataError("halluc_fraction must be in (0, 1)")
    size = int(math.floor(halluc_fraction * vocab_size + 0.5))
    # at least one content token and the end token must stay correct
    if size < 1 or size > vocab_size - 2:
        raise DataError(f"halluc_fraction={halluc_fraction} gives |H|={size} for V={vocab_size}")
    return size


def generate_task(
    seed: int,
    n_prompts: int,
    vocab_size: int,
    halluc_fraction: float = 0.25,
    max_len: int = DEFAULT_MAX_LEN,
) -> list[PromptRecord]:
    """Deterministic synthetic prompt set.

    Ground-truth answers are 1..(max_len - 1) distinct content tokens plus the
    end token. ``H`` holds the ``round(halluc_fraction * V)`` content tokens
    with the highest summed co-occurrence with the answer tokens.
    """
    if n_prompts < 1:
        raise DataError("n_prompts must be >= 1")
    n_h = halluc_set_size(vocab_size, halluc_fraction)
    stop = end_token(vocab_size)
    n_content = vocab_size - 1
    max_gt = min(max_len - 1, n_content - n_h)
    if max_gt < 1:
        raise DataError("max_len too small for a ground-truth answer")
    cooc = derive_rng(seed, "task-cooccurrence", vocab_size).gamma(0.5, size=(n_content, n_content))
    prompts = []
    for pid in range(n_prompts):
        rng = derive_rng(seed, "task-prompt", pid)
        length = int(rng.integers(max(1, max_gt - 2), max_gt + 1))
        gt = [int(t) for t in rng.permutation(n_content)[:length]]
        score = cooc[gt].sum(axis=0) + 1e-6 * rng.random(n_content)
        score[gt] = -np.inf
        halluc = frozenset(int(t) for t in np.argsort(-score, kind="stable")[:n_h])
        prompts.append(PromptRecord(pid, tuple(gt) + (stop,), halluc))
    return prompts


# --- judges -----------------------------------------------------------------


@dataclass(frozen=True)
class OracleJudge:
    """Ground-truth containment check with optional label noise.

    Each (prompt, response) has its label flipped with probability ``noise``;
    the flip is a deterministic function of ``seed`` and the response, so
    re-judging gives the same answer. ``soft`` maps labels to
    ``soft`` / ``1 - soft`` instead of 0 / 1.
    """

    noise: float = 0.0
    soft: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.noise < 0.5:
            raise DataError("oracle noise must be in [0, 0.5)")
        if not 0 <= self.soft < 0.5:
            raise DataError("soft score must be in [0, 0.5)")

    def probability(self, prompt: PromptRecord, tokens: Sequence[int]) -> float:
        label = prompt.is_hallucinated(tokens)
        if self.noise > 0:
            key = stable_hash(",".join(map(str, tokens)))
            if derive_rng(self.seed, "oracle-noise", prompt.id, key).random() < self.noise:
                label = not label
        return 1.0 - self.soft if label else self.soft


def classifier_features(prompt: PromptRecord, tokens: Sequence[int], vocab_size: int) -> np.ndarray:
    """Token presence, ground-truth overlap counts, and presence x answer cross terms.

    The answer-indicator cross terms let a linear model learn which tokens
    are suspicious given the ground-truth content passed as side information.
    Presence rather than counts, since one hallucinated token is enough.
    """
    stop = end_token(vocab_size)
    bag = np.zeros(vocab_size)
    for t in tokens:
        bag[t] += 1.0
    bag[stop] = 0.0
    present = (bag > 0).astype(float)
    gt = np.zeros(vocab_size)
    gt[[t for t in prompt.gt_tokens if t != stop]] = 1.0
    overlap = float(bag @ gt)
    outside = float(bag.sum() - overlap)
    return np.concatenate([present, [overlap, outside], np.outer(present, gt).ravel()])


def n_classifier_features(vocab_size: int) -> int:
    return vocab_size + 2 + vocab_size * vocab_size


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


@dataclass(frozen=True, eq=False)
class ClassifierJudge:
    """Logistic hallucination classifier over :func:`classifier_features`."""

    weights: np.ndarray
    bias: float
    vocab_size: int
    validation_accuracy: float = float("nan")

    def probability(self, prompt: PromptRecord, tokens: Sequence[int]) -> float:
        x = classifier_features(prompt, tokens, self.vocab_size)
        return float(_sigmoid(x @ self.weights + self.bias))

    def to_dict(self) -> dict:
        return {
            "kind": "logistic",
            "V": self.vocab_size,
            "bias": float(self.bias),
            "weights": [float(w) for w in self.weights],
            "validation_accuracy": self.validation_accuracy,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClassifierJudge":
        return cls(np.array(doc["weights"], dtype=float), float(doc["bias"]), int(doc["V"]),
                   float(doc.get("validation_accuracy", float("nan"))))


HallucinationJudge = OracleJudge | ClassifierJudge


def judge(judge: HallucinationJudge, prompt: PromptRecord, response: Response | Sequence[int]) -> float:
    """``P(h = 1 | x, y)`` in [0, 1]."""
    tokens = response.tokens if isinstance(response, Response) else tuple(response)
    return judge.probability(prompt, tokens)


@dataclass
class ClassifierTrainSet:
    features: np.ndarray
    labels: np.ndarray
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")
        if not 0 <= self.val_fraction < 1:
            raise DataError("val_fraction must be in [0, 1)")

    def split(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.labels)
        order = derive_rng(seed, "classifier-split").permutation(n)
        n_val = int(round(self.val_fraction * n))
        return np.sort(order[n_val:]), np.sort(order[:n_val])


def make_classifier_corpus(
    prompts: Sequence[PromptRecord],
    n_examples: int,
    vocab_size: int,
    seed: int,
    oracle: OracleJudge | None = None,
    val_fraction: float = 0.2,
    max_corrupt: float = 0.5,
    halluc_bias: float = 0.5,
) -> ClassifierTrainSet:
    """Oracle-labeled corrupted answers.

    Each answer token is swapped with a per-example rate drawn from
    U(0, max_corrupt). With probability ``halluc_bias`` the replacement comes
    from the prompt's hallucination set, otherwise it is a uniform content
    token, so both labels are well represented.
    """
    oracle = oracle or OracleJudge()
    rng = derive_rng(seed, "classifier-corpus")
    stop = end_token(vocab_size)
    xs, ys = [], []
    for _ in range(n_examples):
        prompt = prompts[int(rng.integers(len(prompts)))]
        halluc = sorted(prompt.halluc_set)
        rate = rng.uniform(0.0, max_corrupt)
        tokens = []
        for t in prompt.gt_tokens:
            if t != stop and rng.random() < rate:
                if rng.random() < halluc_bias:
                    t = halluc[int(rng.integers(len(halluc)))]
                else:
                    t = int(rng.integers(vocab_size - 1))
            tokens.append(t)
        xs.append(classifier_features(prompt, tokens, vocab_size))
        ys.append(1.0 if oracle.probability(prompt, tokens) >= TAU else 0.0)
    return ClassifierTrainSet(np.array(xs), np.array(ys), val_fraction)


def logistic_loss_and_grad(weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy and its gradient in ``(weights, bias)``."""
    s = x @ weights + bias
    loss = float(np.mean(np.logaddexp(0.0, s) - y * s))
    resid = _sigmoid(s) - y
    return loss, x.T @ resid / len(y), float(np.mean(resid))


def _accuracy(weights, bias, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    pred = (_sigmoid(x @ weights + bias) >= TAU).astype(float)
    return float(np.mean(pred == y))


def train_classifier(
    train_set: ClassifierTrainSet,
    lr: float = 0.5,
    epochs: int = 1000,
    seed: int = 0,
    vocab_size: int | None = None,
    history: list | None = None,
) -> ClassifierJudge:
    """Full-batch gradient descent on the logistic loss.

    Weights start at zero and the bias at the training log-odds, so an
    untrained classifier predicts the majority class. ``history`` (if given)
    receives the training loss before each epoch and after the last one.
    """
    train_idx, val_idx = train_set.split(seed)
    x, y = train_set.features[train_idx], train_set.labels[train_idx]
    rate = float(y.mean()) if len(y) else 0.0
    if len(y) == 0 or rate in (0.0, 1.0):
        raise DataError("classifier training set needs both labels")
    if vocab_size is None:
        vocab_size = int(round((-1 + math.sqrt(1 + 4 * (x.shape[1] - 2))) / 2))
    w = np.zeros(x.shape[1])
    b = math.log(rate / (1.0 - rate))
    for _ in range(epochs):
        loss, gw, gb = logistic_loss_and_grad(w, b, x, y)
        if history is not None:
            history.append(loss)
        w = w - lr * gw
        b = b - lr * gb
    if history is not None:
        history.append(logistic_loss_and_grad(w, b, x, y)[0])
    xv, yv = train_set.features[val_idx], train_set.labels[val_idx]
    return ClassifierJudge(w, b, vocab_size, _accuracy(w, b, xv, yv))


# --- selection ----------------------------------------------------------------


@dataclass(frozen=True)
class PreferencePair:
    prompt: int
    chosen: Response
    rejected: Response
    p_chosen: float
    p_rejected: float


@dataclass(frozen=True)
class Filtered:
    prompt: int
    reason: str  # "all_clean" | "all_halluc"


@dataclass(frozen=True)
class RolloutSet:
    prompt: int
    responses: tuple[Response, ...]
    p_halluc: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.responses) < 2 or len(self.responses) != len(self.p_halluc):
            raise DataError("a rollout set needs K >= 2 annotated responses")

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(int(p >= TAU) for p in self.p_halluc)


def select_pair(rollout: RolloutSet) -> PreferencePair | Filtered:
    """Chosen = least hallucinated clean response, rejected = most hallucinated one.

    Ties go to the earliest response. A probability of exactly 0.5 counts as
    hallucinated.
    """
    clean = [i for i, p in enumerate(rollout.p_halluc) if p < TAU]
    halluc = [i for i, p in enumerate(rollout.p_halluc) if p >= TAU]
    if not halluc:
        return Filtered(rollout.prompt, "all_clean")
    if not clean:
        return Filtered(rollout.prompt, "all_halluc")
    w = min(clean, key=lambda i: (rollout.p_halluc[i], i))
    l = min(halluc, key=lambda i: (-rollout.p_halluc[i], i))
    return PreferencePair(rollout.prompt, rollout.responses[w], rollout.responses[l],
                          rollout.p_halluc[w], rollout.p_halluc[l])


@dataclass
class DatasetStats:
    admitted: int = 0
    filtered_all_clean: int = 0
    filtered_all_halluc: int = 0
    skipped: int = 0

    def as_dict(self) -> dict:
        return {"admitted": self.admitted, "filtered_all_clean": self.filtered_all_clean,
                "filtered_all_halluc": self.filtered_all_halluc, "skipped": self.skipped}


@dataclass
class PreferenceDataset:
    pairs: list[PreferencePair]
    stats: DatasetStats
    rollouts: list[RolloutSet] = field(default_factory=list)


def _map_prompts(fn: Callable, prompts: Sequence[PromptRecord], workers: int) -> list:
    # results come back in prompt order whatever the worker count
    if workers <= 1:
        return [fn(p) for p in prompts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, prompts))


def rollout_prompt(policy: Policy, prompt: PromptRecord, k: int, temperature: float, seed: int,
                   max_len: int = DEFAULT_MAX_LEN, purpose: str = "rollout") -> list[Response]:
    rng = derive_rng(seed, purpose, prompt.id)
    return [sample_response(policy, prompt.id, temperature, max_len, rng) for _ in range(k)]


def build_preference_dataset(
    prompts: Sequence[PromptRecord],
    policy: Policy,
    judge_: HallucinationJudge,
    k: int = 5,
    temperature: float = 1.0,
    seed: int = 0,
    max_len: int = DEFAULT_MAX_LEN,
    workers: int = 1,
) -> PreferenceDataset:
    """Stage 1 of iterative alignment: sample K responses, judge, select, filter."""
    if not prompts:
        raise DataError("empty prompt list")
    if k < 2:
        raise DataError("K must be >= 2")

    def work(prompt: PromptRecord):
        responses = rollout_prompt(policy, prompt, k, temperature, seed, max_len)
        probs = tuple(judge(judge_, prompt, r) for r in responses)
        rollout = RolloutSet(prompt.id, tuple(responses), probs)
        return rollout, select_pair(rollout)

    stats = DatasetStats()
    pairs, rollouts = [], []
    for rollout, outcome in _map_prompts(work, prompts, workers):
        rollouts.append(rollout)
        if isinstance(outcome, PreferencePair):
            pairs.append(outcome)
            stats.admitted += 1
        elif outcome.reason == "all_clean":
            stats.filtered_all_clean += 1
        else:
            stats.filtered_all_halluc += 1
    return PreferenceDataset(pairs, stats, rollouts)


def build_offpolicy_dataset(
    prompts: Sequence[PromptRecord],
    policy: Policy,
    judge_: HallucinationJudge,
    k: int = 5,
    temperature: float = 1.0,
    seed: int = 0,
    max_len: int = DEFAULT_MAX_LEN,
    retries: int = 3,
    workers: int = 1,
) -> PreferenceDataset:
    """Ground-truth answer as chosen, the most hallucinated of K samples as rejected.

    Up to ``retries`` extra rounds of K samples are drawn when no sample is
    judged hallucinated; the prompt is skipped after that, or when the judge
    flags the ground truth itself.
    """
    if not prompts:
        raise DataError("empty prompt list")

    def work(prompt: PromptRecord):
        p_gt = judge(judge_, prompt, prompt.gt_tokens)
        if p_gt >= TAU:
            return None
        rng = derive_rng(seed, "offpolicy-rollout", prompt.id)
        for _ in range(retries + 1):
            responses = [sample_response(policy, prompt.id, temperature, max_len, rng) for _ in range(k)]
            probs = [judge(judge_, prompt, r) for r in responses]
            worst = min(range(k), key=lambda i: (-probs[i], i))
            if probs[worst] >= TAU:
                chosen = Response(prompt.gt_tokens, sequence_log_prob(policy, prompt.id, prompt.gt_tokens))
                return PreferencePair(prompt.id, chosen, responses[worst], p_gt, probs[worst])
        return None

    stats = DatasetStats()
    pairs = []
    for outcome in _map_prompts(work, prompts, workers):
        if outcome is None:
            stats.skipped += 1
        else:
            pairs.append(outcome)
            stats.admitted += 1
    return PreferenceDataset(pairs, stats)


def hallucination_rate(policy: Policy, prompts: Sequence[PromptRecord], max_len: int = DEFAULT_MAX_LEN) -> float:
    """Fraction of prompts whose greedy response contains a hallucination token."""
    hits = sum(
        prompt.is_hallucinated(sample_response(policy, prompt.id, max_len=max_len, greedy=True).tokens)
        for prompt in prompts
    )
    return hits / len(prompts)


# --- JSON-Lines I/O -----------------------------------------------------------


def _write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=False, separators=(", ", ": ")) + "\n")


def _read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        try:
            return [json.loads(line) for line in fh if line.strip()]
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not JSON Lines ({exc})") from None


def _reader(fn):
    """Report missing or malformed fields as DataError naming the file."""
    @functools.wraps(fn)
    def wrapper(path):
        try:
            return fn(path)
        except KeyError as exc:
            raise DataError(f"{path}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{path}: bad record ({exc})") from None
    return wrapper


def write_prompts(path: str | Path, prompts: Iterable[PromptRecord]) -> None:
    _write_jsonl(path, ({"id": p.id, "gt_tokens": list(p.gt_tokens), "halluc_set": sorted(p.halluc_set)}
                        for p in prompts))


@_reader
def read_prompts(path: str | Path) -> list[PromptRecord]:
    return [PromptRecord(int(r["id"]), tuple(int(t) for t in r["gt_tokens"]), frozenset(int(t) for t in r["halluc_set"]))
            for r in _read_jsonl(path)]


def write_rollouts(path: str | Path, rollouts: Iterable[tuple[int, Sequence[Response]]]) -> None:
    _write_jsonl(path, ({"prompt_id": pid, "response_id": j, "tokens": list(r.tokens), "log_prob": r.log_prob}
                        for pid, responses in rollouts for j, r in enumerate(responses)))


@_reader
def read_rollouts(path: str | Path) -> dict[int, list[tuple[int, Response]]]:
    out: dict[int, list[tuple[int, Response]]] = {}
    for r in _read_jsonl(path):
        resp = Response(tuple(int(t) for t in r["tokens"]), float(r["log_prob"]))
        out.setdefault(int(r["prompt_id"]), []).append((int(r["response_id"]), resp))
    for rows in out.values():
        rows.sort(key=lambda item: item[0])
    return out


def write_annotations(path: str | Path, rows: Iterable[tuple[int, int, float]]) -> None:
    _write_jsonl(path, ({"prompt_id": pid, "response_id": rid, "p_halluc": p, "label": int(p >= TAU)}
                        for pid, rid, p in rows))


@_reader
def read_annotations(path: str | Path) -> dict[tuple[int, int], tuple[float, int]]:
    return {(int(r["prompt_id"]), int(r["response_id"])): (float(r["p_halluc"]), int(r["label"]))
            for r in _read_jsonl(path)}


def write_pairs(path: str | Path, pairs: Iterable[PreferencePair]) -> None:
    _write_jsonl(path, ({"prompt_id": p.prompt, "chosen": list(p.chosen.tokens), "rejected": list(p.rejected.tokens),
                         "p_chosen": p.p_chosen, "p_rejected": p.p_rejected} for p in pairs))


@_reader
def read_pairs(path: str | Path) -> list[PreferencePair]:
    return [PreferencePair(int(r["prompt_id"]), Response(tuple(int(t) for t in r["chosen"]), float("nan")),
                           Response(tuple(int(t) for t in r["rejected"]), float("nan")), float(r["p_chosen"]), float(r["p_rejected"]))
            for r in _read_jsonl(path)]
