"""Finite-vocabulary probability primitives.

Conventions used throughout the package:

* a distribution is a 1-D float array summing to one;
* a joint ``pi`` is a ``(V, V)`` array with ``pi[a, b] = p(x_i=a, x_{i+1}=b)``;
* a conditional ``c`` is a ``(V, V)`` array with ``c[b, a] = p(b | a)``, so
  every *column* is a distribution over the conditioned token.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateConditioningError,
    DimensionError,
    InvalidWeightsError,
    RangeError,
)

TOL = 1e-12


def is_distribution(p, tol=TOL) -> bool:
    p = np.asarray(p, dtype=float)
    return p.ndim == 1 and bool(np.all(p >= 0)) and abs(p.sum() - 1.0) <= tol


def is_conditional(c, tol=TOL) -> bool:
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        return False
    return bool(np.all(c >= 0)) and bool(np.all(np.abs(c.sum(axis=0) - 1.0) <= tol))


def is_joint(pi, tol=TOL) -> bool:
    pi = np.asarray(pi, dtype=float)
    return pi.ndim == 2 and bool(np.all(pi >= 0)) and abs(pi.sum() - 1.0) <= tol


def normalize(weights) -> np.ndarray:
    """Scale non-negative weights so they sum to one."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidWeightsError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise InvalidWeightsError("weights must have positive total mass")
    return w / total


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionError(f"shape mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def l1_norm(e) -> float:
    return float(np.abs(np.asarray(e, dtype=float)).sum())


def max_norm(e) -> float:
    """Largest column L1 norm, i.e. ``max_a sum_b |e(b|a)|``.

    For a 1-D error vector this is its L1 norm.
    """
    e = np.abs(np.asarray(e, dtype=float))
    if e.ndim == 1:
        return float(e.sum())
    return float(e.sum(axis=0).max())


def random_distribution(size, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. U(0,1) weights, normalized."""
    return normalize(rng.uniform(0.0, 1.0, size=size))


def mix_noise(p, level, rng=None, noise=None):
    """Return ``((1 - level) * p + level * n, n)``.

    ``n`` is a fresh uniform-random distribution drawn from ``rng`` unless an
    explicit ``noise`` is given.
    """
    if not 0.0 <= level <= 1.0:
        raise RangeError(f"noise level must lie in [0, 1], got {level}")
    p = np.asarray(p, dtype=float)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be supplied")
        noise = random_distribution(p.shape[0], rng)
    else:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != p.shape:
            raise DimensionError(f"noise shape {noise.shape} != {p.shape}")
    return (1.0 - level) * p + level * noise, noise


def mix_noise_conditional(c, level, rng=None, noise=None):
    """Column-wise :func:`mix_noise`; each conditioning slice gets its own noise."""
    if not 0.0 <= level <= 1.0:
        raise RangeError(f"noise level must lie in [0, 1], got {level}")
    c = np.asarray(c, dtype=float)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be supplied")
        noise = np.stack([random_distribution(c.shape[0], rng) for _ in range(c.shape[1])], axis=1)
    else:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != c.shape:
            raise DimensionError(f"noise shape {noise.shape} != {c.shape}")
    return (1.0 - level) * c + level * noise, noise


def random_joint(vocab_size, rng: np.random.Generator) -> np.ndarray:
    return normalize(rng.uniform(0.0, 1.0, size=vocab_size * vocab_size)).reshape(vocab_size, vocab_size)


def conditionals_from_joint(pi):
    """Split a two-token joint into its marginal and both conditionals.

    Returns ``(marginal_i, next_given_prev, prev_given_next)`` where
    ``next_given_prev[b, a] = pi[a, b] / sum_b pi[a, b]`` and
    ``prev_given_next[a, b] = pi[a, b] / sum_a pi[a, b]``.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
        raise DimensionError(f"joint must be square, got shape {pi.shape}")
    marginal_i = pi.sum(axis=1)
    marginal_next = pi.sum(axis=0)
    if np.any(marginal_i <= 0) or np.any(marginal_next <= 0):
        raise DegenerateConditioningError("joint has a zero row or column marginal")
    next_given_prev = (pi / marginal_i[:, None]).T
    prev_given_next = pi / marginal_next[None, :]
    return marginal_i, next_given_prev, prev_given_next


def joint_from_conditional(marginal, next_given_prev) -> np.ndarray:
    """Chain rule: ``pi[a, b] = marginal[a] * next_given_prev[b, a]``."""
    return np.asarray(marginal, dtype=float)[:, None] * np.asarray(next_given_prev, dtype=float).T
