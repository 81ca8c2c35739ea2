"""Training-time input permutations and target maps.

Plans store ``sigma`` and ``tau`` 1-based, exactly as they are written in
files: ``sigma[i-1]`` is the index of the i-th token fed to the model and
``tau[i-1]`` the index of the token it must predict.  A swap block of width
``w`` starting at ``k`` feeds ``k+1, ..., k+w-1, k`` and makes the first
``w-1`` of those positions predict the past token ``x_k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, StructureError


@dataclass(frozen=True)
class PermutationPlan:
    sigma: np.ndarray
    tau: np.ndarray
    deltas: np.ndarray
    swap_starts: tuple
    window: int

    @property
    def n(self) -> int:
        return int(self.sigma.size)

    @property
    def is_identity(self) -> bool:
        return not self.swap_starts


def _check_window(n, w):
    if w < 2 or w > n:
        raise ParameterError(f"window must satisfy 2 <= w <= n, got w={w}, n={n}")


def sigma_from_starts(n, w, swap_starts) -> np.ndarray:
    """Build sigma with a block at every (1-based) start in ``swap_starts``."""
    _check_window(n, w)
    sigma = np.arange(1, n + 1)
    prev_end = 0
    for k in sorted(swap_starts):
        if k < 1 or k > n - w + 1:
            raise ParameterError(f"block start {k} does not fit in a sequence of length {n}")
        if k <= prev_end:
            raise ParameterError(f"block at {k} overlaps the previous block")
        sigma[k - 1 : k + w - 2] = np.arange(k + 1, k + w)
        sigma[k + w - 2] = k
        prev_end = k + w - 1
    return sigma


def sample_swap_starts(n, q, w, rng) -> list:
    """Left-to-right traversal: each eligible index starts a block with probability q.

    After a block at ``k`` the traversal resumes at ``k + w``.  One uniform is
    drawn per index ``1..n-w+1``; only those the traversal reaches matter.
    """
    _check_window(n, w)
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"swap probability must lie in [0, 1], got {q}")
    hits = np.flatnonzero(rng.random(n - w + 1) < q) + 1
    starts = []
    next_free = 1
    for k in hits:
        if k >= next_free:
            starts.append(int(k))
            next_free = k + w
    return starts


def build_sigma(n, q, w, rng):
    """Random block permutation; returns ``(sigma, swap_starts)``."""
    starts = sample_swap_starts(n, q, w, rng)
    return sigma_from_starts(n, w, starts), starts


def build_tau(sigma, swap_starts, w, n=None) -> np.ndarray:
    """Target index for every position.

    ``tau_i = i + 1`` when the first ``i`` inputs are exactly ``{1..i}``,
    otherwise the start of the block that position ``i`` lies in.
    """
    sigma = np.asarray(sigma, dtype=int)
    n = sigma.size if n is None else n
    if sigma.size != n:
        raise StructureError(f"sigma has length {sigma.size}, expected {n}")
    try:
        expected = sigma_from_starts(n, w, swap_starts)
    except ParameterError as exc:
        raise StructureError(str(exc)) from exc
    if not np.array_equal(sigma, expected):
        raise StructureError("sigma is not made of the declared swap blocks")
    positions = np.arange(1, n + 1)
    closed = np.maximum.accumulate(sigma) == positions
    tau = np.where(closed, positions + 1, 0)
    for k in swap_starts:
        tau[k - 1 : k + w - 2] = k
    return tau


def position_deltas(sigma, tau) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=int)
    tau = np.asarray(tau, dtype=int)
    if sigma.shape != tau.shape:
        raise ParameterError("sigma and tau must have the same length")
    return tau - sigma


def make_plan(n, w, swap_starts=()) -> PermutationPlan:
    starts = tuple(sorted(int(k) for k in swap_starts))
    sigma = sigma_from_starts(n, w, starts)
    tau = build_tau(sigma, starts, w, n)
    return PermutationPlan(sigma, tau, position_deltas(sigma, tau), starts, w)


def sample_plan(n, q, w, rng) -> PermutationPlan:
    return make_plan(n, w, sample_swap_starts(n, q, w, rng))


def expected_swap_count(n, q, w) -> float:
    """Renewal approximation ``n q / (1 + q (w - 1))`` of the mean block count."""
    return n * q / (1.0 + q * (w - 1))


@dataclass(frozen=True)
class BatchSpec:
    tokens: np.ndarray
    plan: PermutationPlan
    permuted_tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @property
    def permuted(self) -> bool:
        return not self.plan.is_identity

    def to_record(self) -> dict:
        return {
            "tokens": self.tokens.tolist(),
            "sigma": self.plan.sigma.tolist(),
            "tau": self.plan.tau.tolist(),
            "deltas": self.plan.deltas.tolist(),
            "mask": self.mask.astype(int).tolist(),
        }


def batch_from_plan(tokens, plan: PermutationPlan) -> BatchSpec:
    tokens = np.asarray(tokens)
    n = tokens.size
    if plan.n != n:
        raise ParameterError(f"plan length {plan.n} != sequence length {n}")
    mask = plan.tau <= n
    targets = np.where(mask, tokens[np.minimum(plan.tau, n) - 1], -1)
    return BatchSpec(tokens, plan, tokens[plan.sigma - 1], targets, mask)


def make_training_batch(tokens, s, q, w, rng) -> BatchSpec:
    """With probability ``s`` permute the sequence, otherwise keep the identity.

    The final position's target lies beyond the sequence and is masked.
    """
    tokens = np.asarray(tokens)
    n = tokens.size
    _check_window(n, w)
    if not 0.0 <= s <= 1.0:
        raise ParameterError(f"sequence permute probability must lie in [0, 1], got {s}")
    if rng.random() < s:
        plan = sample_plan(n, q, w, rng)
    else:
        if not 0.0 <= q <= 1.0:
            raise ParameterError(f"swap probability must lie in [0, 1], got {q}")
        plan = make_plan(n, w)
    return batch_from_plan(tokens, plan)
