"""STAPLE expectation-maximization consensus over an ensemble of binary masks.

Each mask j carries a sensitivity alpha_j (probability of labeling a true
target pixel as target) and a false-positive rate beta_j. The E-step computes
the per-pixel target posterior in log-space; the M-step re-estimates the
per-mask rates from the posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence, Tuple

import numpy as np

RATE_FLOOR = 1e-6


@dataclass
class StapleState:
    alphas: np.ndarray
    betas: np.ndarray
    posterior: np.ndarray | None = None
    prior: float = 0.5
    iterations: int = 20
    log_likelihoods: list = field(default_factory=list)


def _stack_masks(masks: Sequence[np.ndarray]) -> np.ndarray:
    arr = np.stack([np.asarray(m) for m in masks]).astype(np.float64)
    if arr.ndim < 2:
        raise ValueError("each mask must be at least 1-D")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("masks must be binary")
    return arr


def _clamped_rates(state: StapleState) -> Tuple[np.ndarray, np.ndarray]:
    a = np.clip(np.asarray(state.alphas, dtype=np.float64), RATE_FLOOR, 1.0 - RATE_FLOOR)
    b = np.clip(np.asarray(state.betas, dtype=np.float64), RATE_FLOOR, 1.0 - RATE_FLOOR)
    return a, b


def _log_vote_terms(z: np.ndarray, state: StapleState) -> Tuple[np.ndarray, np.ndarray]:
    """Summed per-pixel log-likelihoods of the votes under y=1 and y=0."""
    a, b = _clamped_rates(state)
    shape = (-1,) + (1,) * (z.ndim - 1)
    a = a.reshape(shape)
    b = b.reshape(shape)
    log1 = (z * np.log(a) + (1.0 - z) * np.log(1.0 - a)).sum(axis=0)
    log0 = (z * np.log(b) + (1.0 - z) * np.log(1.0 - b)).sum(axis=0)
    return log1, log0


def e_step(masks: Sequence[np.ndarray], state: StapleState) -> np.ndarray:
    """Per-pixel posterior P(y=1 | votes) under the current rates."""
    z = _stack_masks(masks)
    log1, log0 = _log_vote_terms(z, state)
    logit = (log1 + np.log(state.prior)) - (log0 + np.log(1.0 - state.prior))
    # sigmoid in a stable form
    posterior = np.where(logit >= 0, 1.0 / (1.0 + np.exp(-logit)),
                         np.exp(logit) / (1.0 + np.exp(logit)))
    return posterior


def m_step(masks: Sequence[np.ndarray], posterior: np.ndarray,
           prev_alphas: np.ndarray | None = None,
           prev_betas: np.ndarray | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Rate updates alpha_j = sum(w z_j)/sum(w), beta_j = sum((1-w) z_j)/sum(1-w).

    Degenerate denominators keep the previous value for that mask.
    """
    z = _stack_masks(masks)
    w = np.asarray(posterior, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty pixel set")
    flat_z = z.reshape(z.shape[0], -1)
    flat_w = w.reshape(-1)
    w_sum = flat_w.sum()
    not_w = 1.0 - flat_w
    not_w_sum = not_w.sum()
    j = z.shape[0]
    alphas = np.empty(j)
    betas = np.empty(j)
    for idx in range(j):
        if w_sum > 0.0:
            alphas[idx] = float(flat_z[idx] @ flat_w) / w_sum
        else:
            alphas[idx] = prev_alphas[idx] if prev_alphas is not None else 0.5
        if not_w_sum > 0.0:
            betas[idx] = float(flat_z[idx] @ not_w) / not_w_sum
        else:
            betas[idx] = prev_betas[idx] if prev_betas is not None else 0.5
    return alphas, betas


def log_likelihood(masks: Sequence[np.ndarray], state: StapleState) -> float:
    """Observed-data log-likelihood sum_i log[p L(votes|1) + (1-p) L(votes|0)]."""
    z = _stack_masks(masks)
    log1, log0 = _log_vote_terms(z, state)
    la = log1 + np.log(state.prior)
    lb = log0 + np.log(1.0 - state.prior)
    hi = np.maximum(la, lb)
    return float((hi + np.log(np.exp(la - hi) + np.exp(lb - hi))).sum())


def staple_fuse(masks: Sequence[np.ndarray], iterations: int = 20,
                alpha0: float = 0.9, beta0: float = 0.1,
                prior: float = 0.5) -> Tuple[np.ndarray, StapleState]:
    """Run EM for a fixed iteration count and threshold the posterior at 0.5.

    Returns the binary consensus plus the final state (rates, posterior, and
    the per-iteration observed-data log-likelihood trace).
    """
    if len(masks) == 0:
        raise ValueError("need at least one mask")
    z = _stack_masks(masks)  # raises on shape disagreement
    j = z.shape[0]
    state = StapleState(
        alphas=np.full(j, float(alpha0)),
        betas=np.full(j, float(beta0)),
        prior=prior,
        iterations=iterations,
    )
    state.log_likelihoods.append(log_likelihood(masks, state))
    for _ in range(iterations):
        posterior = e_step(masks, state)
        alphas, betas = m_step(masks, posterior, state.alphas, state.betas)
        state = replace(state, alphas=alphas, betas=betas, posterior=posterior,
                        log_likelihoods=state.log_likelihoods)
        state.log_likelihoods.append(log_likelihood(masks, state))
    consensus = (state.posterior > 0.5).astype(np.uint8)
    return consensus, state
