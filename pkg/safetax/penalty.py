"""
Orthogonality penalties on an update D against (an approximation of) the base W,
with closed-form gradients.

With a = |W|^2, n = |D|^2 (Frobenius):

    col term   beta |W^T D|^2 / (a n)
    row term   beta |W D^T|^2 / (a n)

The "col" variant is the col term, "both" adds the row term. Both terms are
invariant to rescaling D, so their gradients are orthogonal to D itself.
"""

import logging
import math

from typing import Callable, NamedTuple

import numpy as np

from . import linalg
from .checkpoint import AdapterPair, build_adapter_pair
from .errors import ConfigError, DegenerateNormError
from .linalg import Matrix

logger = logging.getLogger(__name__)

PENALTY_VARIANTS = ("col", "both")
DEFAULT_BETA = 1.0
DEFAULT_BASE_RANK = 64
# scenario-file spelling of base_rank=None
EXACT_BASE = "exact"
DEFAULT_EPS = 1e-12
FD_STEP = 1e-5


class PenaltyConfig(NamedTuple):
    """
    base_rank is the rank of the base approximation used during training;
    None means the exact base.
    """

    variant: str = "col"
    beta: float = DEFAULT_BETA
    base_rank: int | None = DEFAULT_BASE_RANK
    eps: float = DEFAULT_EPS


class PenaltyResult(NamedTuple):
    value: float
    grad_B: Matrix
    grad_A: Matrix


class DeltaPenalty(NamedTuple):
    value: float
    grad: Matrix


def check_penalty_config(cfg: PenaltyConfig) -> PenaltyConfig:
    if cfg.variant not in PENALTY_VARIANTS:
        raise ConfigError(f"unknown penalty variant {cfg.variant!r}, choose col or both")
    if not (isinstance(cfg.beta, (int, float)) and math.isfinite(cfg.beta) and cfg.beta > 0):
        raise ConfigError(f"beta must be a positive number, got {cfg.beta!r}")
    if cfg.base_rank is not None and (
        isinstance(cfg.base_rank, bool) or not isinstance(cfg.base_rank, int) or cfg.base_rank < 1
    ):
        raise ConfigError(f"base_rank must be a positive integer or None, got {cfg.base_rank!r}")
    if not cfg.eps > 0:
        raise ConfigError(f"eps must be positive, got {cfg.eps!r}")
    return cfg


def low_rank_base(W: Matrix, m: int) -> Matrix:
    "best rank-m approximation of W in Frobenius norm"
    return linalg.truncated_svd(W, m).reconstruct()


def prepare_base(W: Matrix, cfg: PenaltyConfig) -> Matrix:
    "the base the penalty is evaluated against: exact, or rank-limited per cfg"
    W = linalg.as_matrix(W, "base")
    if cfg.base_rank is None or cfg.base_rank >= min(W.shape):
        return W
    return low_rank_base(W, cfg.base_rank)


def delta_penalty(W: Matrix, D: Matrix, cfg: PenaltyConfig) -> DeltaPenalty:
    "penalty value and its gradient with respect to the dense update D"
    check_penalty_config(cfg)
    a = float(np.sum(W * W))
    n = float(np.sum(D * D))
    if math.sqrt(a) <= cfg.eps:
        raise DegenerateNormError(f"base norm below eps={cfg.eps}")
    if math.sqrt(n) <= cfg.eps:
        raise DegenerateNormError(f"update norm below eps={cfg.eps}: all-zero adapter")

    P = W.T @ D
    c = float(np.sum(P * P))
    value = cfg.beta * c / (a * n)
    grad = (2 * cfg.beta / a) * ((W @ P) * n - c * D) / (n * n)

    if cfg.variant == "both":
        Q = W @ D.T
        c_row = float(np.sum(Q * Q))
        value += cfg.beta * c_row / (a * n)
        grad = grad + (2 * cfg.beta / a) * ((Q.T @ W) * n - c_row * D) / (n * n)

    return DeltaPenalty(value, grad)


def row_term(W: Matrix, D: Matrix, beta: float = DEFAULT_BETA) -> float:
    "the row-space term on its own"
    W = linalg.as_matrix(W, "base")
    D = linalg.as_matrix(D, "delta")
    ratio = linalg.frobenius_norm(W @ D.T) / (linalg.frobenius_norm(W) * linalg.frobenius_norm(D))
    return beta * ratio**2


def _adapter_delta(pair: AdapterPair) -> Matrix:
    return pair.scale * (pair.B @ pair.A)


def penalty_value(W: Matrix, pair: AdapterPair, cfg: PenaltyConfig = PenaltyConfig()) -> float:
    return delta_penalty(W, _adapter_delta(pair), cfg).value


def penalty_grads(
    W: Matrix, pair: AdapterPair, cfg: PenaltyConfig = PenaltyConfig()
) -> PenaltyResult:
    """
    Penalty value and gradients with respect to the adapter factors, chained
    through D = s B A as grad_B = s G A^T and grad_A = s B^T G.
    """
    value, G = delta_penalty(W, _adapter_delta(pair), cfg)
    s = pair.scale
    return PenaltyResult(value, s * (G @ pair.A.T), s * (pair.B.T @ G))


def _central_difference(f: Callable[[Matrix], float], X: Matrix, h: float) -> Matrix:
    grad = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        x = X.copy()
        x[idx] = X[idx] + h
        f_plus = f(x)
        x[idx] = X[idx] - h
        f_minus = f(x)
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def finite_difference_grads(
    W: Matrix, pair: AdapterPair, cfg: PenaltyConfig = PenaltyConfig(), h: float = FD_STEP
) -> tuple[Matrix, Matrix]:
    "central-difference (grad_B, grad_A), for checking penalty_grads"
    logger.debug(f"finite differences over {pair.B.size + pair.A.size} factor entries")

    def value_at_B(B: Matrix) -> float:
        return penalty_value(W, build_adapter_pair(pair.target, pair.A, B, pair.alpha), cfg)

    def value_at_A(A: Matrix) -> float:
        return penalty_value(W, build_adapter_pair(pair.target, A, pair.B, pair.alpha), cfg)

    return _central_difference(value_at_B, pair.B, h), _central_difference(value_at_A, pair.A, h)
