"""Bradley-Terry / Rao-Kupper preference probabilities and the tie-based sample weight.

With reward gap ``d = r_i - r_j`` and tie parameter ``nu >= 1`` the
Rao-Kupper model assigns

    p_win  = 1 / (1 + nu * exp(-d))
    p_lose = 1 / (1 + nu * exp(d))
    p_tie  = (nu**2 - 1) / ((1 + nu * exp(d)) * (1 + nu * exp(-d)))

which sum to one. ``nu = 1`` removes ties and recovers Bradley-Terry.

The weight applied to a DPO pair is ``p_tie(margin) + 2 / (nu + 1)``: it
peaks for pairs the model cannot yet separate (margin near zero) and falls
to ``2 / (nu + 1)`` for pairs that are already learned or badly mislabeled.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class PreferenceModelError(ValueError):
    pass


@dataclass(frozen=True)
class RaoKupperModel:
    """Tie-aware paired-comparison model.

    ``swap_outcomes`` exchanges win and lose, giving ``p_win = 1 / (1 + nu*exp(d))``
    (the decreasing-in-``d`` ordering some write-ups use). Tie probability is even in ``d`` and is
    unaffected by the flag.
    """

    nu: float = 3.0
    swap_outcomes: bool = False

    def __post_init__(self) -> None:
        if not (math.isfinite(self.nu) and self.nu >= 1.0):
            raise PreferenceModelError(f"nu must be >= 1, got {self.nu}")


def implicit_reward(policy_logp: float, reference_logp: float, beta: float) -> float:
    """``beta * (log pi_theta(y|x) - log pi_ref(y|x))``."""
    if not beta > 0:
        raise PreferenceModelError("beta must be positive")
    if not (math.isfinite(policy_logp) and math.isfinite(reference_logp)):
        raise PreferenceModelError("log-probabilities must be finite")
    return beta * (policy_logp - reference_logp)


def tie_probability(nu: float, delta: float) -> float:
    # algebraically equal to the textbook form; exp(-|d|) never overflows
    a = math.exp(-abs(delta))
    return (nu * nu - 1.0) * a / ((a + nu) * (1.0 + nu * a))


def _inv_one_plus(nu: float, exponent: float) -> float:
    """``1 / (1 + nu * exp(exponent))`` without overflow."""
    x = math.log(nu) + exponent
    if x > 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


def rk_probabilities(model: RaoKupperModel, r_i: float, r_j: float) -> tuple[float, float, float]:
    """``(p_win, p_lose, p_tie)`` for ``y_i`` against ``y_j``."""
    delta = r_i - r_j
    win = _inv_one_plus(model.nu, -delta)
    lose = _inv_one_plus(model.nu, delta)
    if model.swap_outcomes:
        win, lose = lose, win
    return win, lose, tie_probability(model.nu, delta)


def sample_weight(model: RaoKupperModel, margin: float) -> float:
    """Stop-gradient weight ``p_tie(margin) + 2 / (nu + 1)``; exactly 1 at ``nu = 1``."""
    return tie_probability(model.nu, margin) + 2.0 / (model.nu + 1.0)


def bradley_terry(delta: float) -> float:
    """``sigma(delta)``, the Bradley-Terry win probability."""
    if delta >= 0:
        return 1.0 / (1.0 + math.exp(-delta))
    e = math.exp(delta)
    return e / (1.0 + e)


class SampleCategory(str, enum.Enum):
    EASY = "easy"
    HARD = "hard"
    BOUNDARY = "boundary"


DEFAULT_M_EASY = 2.0
DEFAULT_M_HARD = -2.0


def categorize(margin: float, m_easy: float = DEFAULT_M_EASY, m_hard: float = DEFAULT_M_HARD) -> SampleCategory:
    """Easy if ``margin >= m_easy``, hard if ``margin <= m_hard``, boundary otherwise."""
    if not m_hard < 0 < m_easy:
        raise PreferenceModelError(f"need m_hard < 0 < m_easy, got {m_hard}, {m_easy}")
    if margin >= m_easy:
        return SampleCategory.EASY
    if margin <= m_hard:
        return SampleCategory.HARD
    return SampleCategory.BOUNDARY
