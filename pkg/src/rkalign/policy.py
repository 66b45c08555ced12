"""Linearly parameterized softmax policies over a fixed random feature map.

A context is a prompt id plus the response prefix generated so far. The
feature map turns the prompt id and the last ``window`` prefix tokens into a
vector ``phi``; the policy reads out logits ``z = W.T @ phi`` and samples the
next token from ``softmax(z)``. Only ``W`` is ever trained.

Token ``V - 1`` is reserved as the end token. Prefix positions before the
start of the response are padded with the id ``V`` (which never appears as a
generated token).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import derive_rng

SCHEMA_VERSION = 1
DEFAULT_MAX_LEN = 6


class PolicyError(ValueError):
    """Invalid policy input (bad token id, non-finite weights, shape mismatch)."""


def end_token(vocab_size: int) -> int:
    return vocab_size - 1


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Seeded embedding of ``(prompt id, last `window` tokens)`` into R^dim.

    Coordinate 0 is a constant 1 (a bias feature); the remaining coordinates
    are the sum of a per-prompt Gaussian vector and one Gaussian vector per
    window slot, scaled so each entry has unit variance.
    """

    vocab_size: int
    dim: int = 32
    window: int = 2
    seed: int = 0
    prompt_scale: float = 1.0
    _token_table: np.ndarray = field(init=False, repr=False)
    _prompt_cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise PolicyError("vocab_size must be >= 2")
        if self.dim < 2:
            raise PolicyError("dim must be >= 2")
        if self.window < 0:
            raise PolicyError("window must be >= 0")
        if not self.prompt_scale >= 0 or (self.window == 0 and self.prompt_scale == 0):
            raise PolicyError("prompt_scale must be >= 0 and the features must depend on something")
        rng = derive_rng(self.seed, "feature-tokens", self.vocab_size, self.dim, self.window)
        table = rng.standard_normal((max(self.window, 1), self.vocab_size + 1, self.dim - 1))
        table.flags.writeable = False
        object.__setattr__(self, "_token_table", table)

    @property
    def pad_token(self) -> int:
        return self.vocab_size

    @property
    def max_norm(self) -> float:
        return 10.0 * math.sqrt(self.dim)

    def prompt_vector(self, prompt: int) -> np.ndarray:
        vec = self._prompt_cache.get(prompt)
        if vec is None:
            vec = derive_rng(self.seed, "feature-prompt", self.dim, prompt).standard_normal(self.dim - 1)
            vec.flags.writeable = False
            self._prompt_cache[prompt] = vec
        return vec

    def _window_ids(self, prefix: Sequence[int]) -> list[int]:
        tail = list(prefix[len(prefix) - self.window:]) if self.window else []
        return [self.pad_token] * (self.window - len(tail)) + tail

    def features(self, prompt: int, prefix: Sequence[int] = ()) -> np.ndarray:
        """Feature vector for the context ``(prompt, prefix)``."""
        body = self.prompt_scale * self.prompt_vector(prompt)
        for slot, tok in enumerate(self._window_ids(prefix)):
            if not 0 <= tok <= self.vocab_size:
                raise PolicyError(f"token id {tok} out of range")
            body += self._token_table[slot, tok]
        body /= math.sqrt(self.window + self.prompt_scale**2)
        phi = np.empty(self.dim)
        phi[0] = 1.0
        phi[1:] = body
        norm = float(np.linalg.norm(phi))
        if norm > self.max_norm:
            phi *= self.max_norm / norm
        return phi

    def sequence_features(self, prompt: int, tokens: Sequence[int]) -> np.ndarray:
        """Stacked features of the contexts that predict each token of ``tokens``."""
        return np.stack([self.features(prompt, tokens[:t]) for t in range(len(tokens))])

    def params(self) -> dict:
        return {"V": self.vocab_size, "d": self.dim, "w": self.window, "seed": self.seed,
                "prompt_scale": self.prompt_scale}


@dataclass(frozen=True, eq=False)
class Policy:
    """Read-out weights ``W`` (dim x V) over a feature map.

    ``support`` optionally masks tokens the policy can never emit (logit
    -inf). ``min_len`` forbids the end token at response positions before
    ``min_len``. Policies are treated as values: every update returns a new one.
    """

    weights: np.ndarray
    feature_map: FeatureMap
    support: np.ndarray | None = None
    min_len: int = 0

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float)
        if w.shape != (self.feature_map.dim, self.feature_map.vocab_size):
            raise PolicyError(
                f"weights shape {w.shape} != ({self.feature_map.dim}, {self.feature_map.vocab_size})"
            )
        if not np.all(np.isfinite(w)):
            raise PolicyError("policy weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if self.support is not None:
            s = np.array(self.support, dtype=bool)
            if s.shape != (self.vocab_size,) or not s.any():
                raise PolicyError("support must be a non-empty boolean mask of length V")
            s.flags.writeable = False
            object.__setattr__(self, "support", s)

    @property
    def vocab_size(self) -> int:
        return self.feature_map.vocab_size

    @property
    def dim(self) -> int:
        return self.feature_map.dim

    def with_weights(self, weights: np.ndarray) -> "Policy":
        return Policy(weights, self.feature_map, self.support, self.min_len)

    def logits(self, phi: np.ndarray, position: int | np.ndarray = 0) -> np.ndarray:
        """Logits for one context (``phi`` 1-D) or stacked contexts (``phi`` 2-D, ``position`` array)."""
        z = phi @ self.weights
        if self.support is not None:
            z = np.where(self.support, z, -np.inf)
        if self.min_len > 0:
            early = np.asarray(position) < self.min_len
            if np.any(early):
                z = np.array(z, dtype=float)
                z[..., end_token(self.vocab_size)] = np.where(early, -np.inf, z[..., end_token(self.vocab_size)])
        return z

    def checksum(self) -> str:
        return hashlib.sha256(self.weights.tobytes()).hexdigest()


@dataclass(frozen=True)
class Response:
    tokens: tuple[int, ...]
    log_prob: float

    def __len__(self) -> int:
        return len(self.tokens)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _check_tokens(tokens: Sequence[int], vocab_size: int) -> None:
    for tok in tokens:
        if not 0 <= int(tok) < vocab_size:
            raise PolicyError(f"token id {tok} out of range [0, {vocab_size})")


def next_token_distribution(policy: Policy, prompt: int, prefix: Sequence[int] = ()) -> np.ndarray:
    _check_tokens(prefix, policy.vocab_size)
    return softmax(policy.logits(policy.feature_map.features(prompt, prefix), len(prefix)))


def _step_log_probs(policy: Policy, prompt: int, tokens: Sequence[int]):
    phi = policy.feature_map.sequence_features(prompt, tokens)
    logp = log_softmax(policy.logits(phi, np.arange(len(tokens))))
    return phi, logp


def sequence_log_prob(policy: Policy, prompt: int, response: Response | Sequence[int]) -> float:
    """Sum over steps of ``log p(token_t | prompt, tokens_<t)`` in nats."""
    tokens = response.tokens if isinstance(response, Response) else tuple(response)
    if not tokens:
        raise PolicyError("response must be non-empty")
    _check_tokens(tokens, policy.vocab_size)
    _, logp = _step_log_probs(policy, prompt, tokens)
    return float(np.sum(logp[np.arange(len(tokens)), tokens]))


def sequence_log_prob_and_grad(policy: Policy, prompt: int, tokens: Sequence[int]) -> tuple[float, np.ndarray]:
    """Log-probability and its gradient with respect to ``W``.

    d/dW sum_t log p_t[y_t] = sum_t phi_t (e_{y_t} - p_t)^T.
    """
    tokens = tuple(tokens)
    if not tokens:
        raise PolicyError("response must be non-empty")
    _check_tokens(tokens, policy.vocab_size)
    phi, logp = _step_log_probs(policy, prompt, tokens)
    idx = np.arange(len(tokens))
    resid = -np.exp(logp)
    resid[idx, tokens] += 1.0
    return float(np.sum(logp[idx, tokens])), phi.T @ resid


def _as_rng(rng: int | np.random.Generator, prompt: int) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return derive_rng(int(rng), "sample", prompt)


def sample_response(
    policy: Policy,
    prompt: int,
    temperature: float = 1.0,
    max_len: int = DEFAULT_MAX_LEN,
    rng: int | np.random.Generator = 0,
    greedy: bool = False,
) -> Response:
    """Ancestral sampling until the end token or ``max_len`` tokens.

    ``greedy=True`` is the zero-temperature limit (argmax, lowest id on ties).
    The recorded ``log_prob`` is always under the temperature-1 policy.
    """
    if max_len < 1:
        raise PolicyError("max_len must be >= 1")
    if not greedy and not temperature > 0:
        raise PolicyError("temperature must be > 0")
    gen = None if greedy else _as_rng(rng, prompt)
    stop = end_token(policy.vocab_size)
    tokens: list[int] = []
    total = 0.0
    for _ in range(max_len):
        z = policy.logits(policy.feature_map.features(prompt, tokens), len(tokens))
        logp = log_softmax(z)
        if greedy:
            tok = int(np.argmax(z))
        else:
            probs = softmax(z / temperature)
            cdf = np.cumsum(probs)
            tok = int(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"))
            tok = min(tok, policy.vocab_size - 1)
        tokens.append(tok)
        total += float(logp[tok])
        if tok == stop:
            break
    return Response(tuple(tokens), total)


def cross_entropy_step(policy: Policy, prompt: int, prefix: Sequence[int], target: int, lr: float) -> Policy:
    """One SGD step on ``-log p(target | context)``: ``W - lr * phi (p - e_target)^T``."""
    if not lr > 0:
        raise PolicyError("learning rate must be positive")
    if not 0 <= target < policy.vocab_size:
        raise PolicyError(f"target {target} out of range")
    phi = policy.feature_map.features(prompt, prefix)
    p = softmax(policy.logits(phi, len(prefix)))
    p[target] -= 1.0
    return policy.with_weights(policy.weights - lr * np.outer(phi, p))


def cross_entropy_loss(policy: Policy, prompt: int, prefix: Sequence[int], target: int) -> float:
    phi = policy.feature_map.features(prompt, prefix)
    return -float(log_softmax(policy.logits(phi, len(prefix)))[target])


def init_policy(feature_map: FeatureMap, scale: float = 1.0, seed: int = 0, min_len: int = 0) -> Policy:
    """Random policy whose logits have roughly standard deviation ``scale``."""
    rng = derive_rng(seed, "init-policy", feature_map.vocab_size, feature_map.dim)
    w = rng.standard_normal((feature_map.dim, feature_map.vocab_size)) * (scale / math.sqrt(feature_map.dim))
    return Policy(w, feature_map, min_len=min_len)


def policy_for_distribution(probs: np.ndarray, feature_map: FeatureMap, prompt: int = 0, prefix: Sequence[int] = ()) -> Policy:
    """Policy whose next-token distribution at ``(prompt, prefix)`` equals ``probs``.

    Uses ``W = phi log(p)^T / |phi|^2`` so that ``W^T phi = log p``.
    """
    probs = np.asarray(probs, dtype=float)
    phi = feature_map.features(prompt, prefix)
    support = probs > 0
    logp = np.where(support, np.log(np.where(support, probs, 1.0)), 0.0)
    w = np.outer(phi, logp) / float(phi @ phi)
    return Policy(w, feature_map, None if support.all() else support)


def save_checkpoint(policy: Policy, path: str | Path) -> None:
    """Write a JSON text checkpoint; weights are row-major with 17 significant digits."""
    header = {"schema_version": SCHEMA_VERSION, **policy.feature_map.params(), "min_len": policy.min_len}
    if policy.support is not None:
        header["support"] = [int(b) for b in policy.support]
    parts = [json.dumps(header, sort_keys=True)[:-1]]
    entries = ", ".join(format(float(x), ".17g") for x in policy.weights.ravel(order="C"))
    text = parts[0] + ', "W": [' + entries + "]}\n"
    Path(path).write_text(text, encoding="utf-8")


def load_checkpoint(path: str | Path) -> Policy:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise PolicyError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    fmap = FeatureMap(int(doc["V"]), int(doc["d"]), int(doc["w"]), int(doc["seed"]), float(doc.get("prompt_scale", 1.0)))
    w = np.array(doc["W"], dtype=float)
    if w.size != fmap.dim * fmap.vocab_size:
        raise PolicyError("checkpoint weight count does not match V*d")
    support = doc.get("support")
    return Policy(w.reshape(fmap.dim, fmap.vocab_size), fmap, None if support is None else np.array(support, dtype=bool),
                  int(doc.get("min_len", 0)))
