"""RPT Markov chain analysis and the synthetic NTP-vs-RPT study.

A state of the refinement chain is the pair ``(x_i, x_{i+1})`` flattened
row-major to ``a * V + b``.  One refinement step draws ``x_i'`` from the
previous-token conditional given ``x_{i+1}`` and then ``x_{i+1}'`` from the
next-token conditional given ``x_i'``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import prob
from .errors import (
    ConvergenceError,
    DegenerateRatioError,
    DimensionError,
    NonErgodicError,
    ParameterError,
)

STATIONARY_TOL = 1e-12
STATIONARY_MAX_ITERS = 100_000


# ---------------------------------------------------------------------------
# kernel and its queries
# ---------------------------------------------------------------------------


def build_rpt_kernel(prev_given_next, next_given_prev) -> np.ndarray:
    """Row-stochastic ``(V*V, V*V)`` transition matrix of one refinement step.

    ``P[(a, b), (a2, b2)] = prev_given_next[a2, b] * next_given_prev[b2, a2]``;
    rows only depend on ``b``.
    """
    d = np.asarray(prev_given_next, dtype=float)
    c = np.asarray(next_given_prev, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape != c.shape:
        raise DimensionError(f"conditionals must be equal square matrices, got {d.shape} and {c.shape}")
    v = d.shape[0]
    # rows_by_next[b, a2, b2] = d[a2, b] * c[b2, a2]
    rows_by_next = d.T[:, :, None] * c.T[None, :, :]
    return np.tile(rows_by_next.reshape(v, v * v), (v, 1))


def power_iteration(kernel, initial=None, tol=STATIONARY_TOL, max_iters=STATIONARY_MAX_ITERS):
    """Stationary row vector of ``kernel`` by power iteration.

    A second chain started from a point mass runs alongside; convergence
    requires both the residual ``max|rP - r|`` and the gap between the two
    chains to drop below ``tol``.  A kernel with several stationary laws
    (e.g. the identity) therefore never converges.
    """
    p = np.asarray(kernel, dtype=float)
    n = p.shape[0]
    if p.ndim != 2 or p.shape[1] != n:
        raise DimensionError(f"kernel must be square, got {p.shape}")
    x0 = np.full(n, 1.0 / n) if initial is None else np.asarray(initial, dtype=float).ravel()
    if x0.shape != (n,):
        raise DimensionError(f"initial state has size {x0.size}, kernel has {n} states")
    probe = np.zeros(n)
    probe[int(np.argmin(x0))] = 1.0
    x = np.stack([x0 / x0.sum(), probe])

    residual = math.inf
    last_spread = math.inf
    for it in range(max_iters):
        y = x @ p
        resid = np.abs(y - x).max(axis=1)
        spread = float(np.abs(x[0] - x[1]).max())
        residual = float(resid[0])
        if residual <= tol and spread <= tol:
            return x[0] / x[0].sum(), it
        if it % 1000 == 999:
            # both chains sit at distinct fixed points: nothing left to contract
            if resid.max() <= tol and spread >= last_spread:
                break
            last_spread = spread
        x = y
    raise ConvergenceError(
        f"power iteration did not converge (residual={residual:.3e}, chain gap={spread:.3e})",
        residual=residual,
        iterations=it + 1,
    )


def stationary_distribution(kernel, initial=None, tol=STATIONARY_TOL, max_iters=STATIONARY_MAX_ITERS):
    """Stationary law of a pair-state kernel, reshaped to a ``(V, V)`` joint."""
    vec, _ = power_iteration(kernel, initial=initial, tol=tol, max_iters=max_iters)
    v = math.isqrt(vec.size)
    if v * v != vec.size:
        raise DimensionError(f"kernel with {vec.size} states is not a pair-state kernel")
    return vec.reshape(v, v)


def ergodicity_coefficient(kernel) -> float:
    """Dobrushin coefficient: largest total-variation distance between two rows."""
    kernel = np.ascontiguousarray(kernel, dtype=float)
    # identical rows contribute nothing; RPT kernels repeat each row V times
    distinct = {row.tobytes(): row for row in kernel}
    rows = np.array(list(distinct.values()))
    worst = 0.0
    for i in range(rows.shape[0] - 1):
        worst = max(worst, 0.5 * float(np.abs(rows[i + 1 :] - rows[i]).sum(axis=1).max()))
    return min(worst, 1.0)


def condition_number(kernel) -> float:
    lam = ergodicity_coefficient(kernel)
    if lam >= 1.0 - prob.TOL:
        raise NonErgodicError(f"ergodicity coefficient is {lam!r}; condition number is unbounded")
    return 1.0 / (1.0 - lam)


# ---------------------------------------------------------------------------
# perturbation analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationBundle:
    ground_truth: np.ndarray
    marginal: np.ndarray
    next_given_prev: np.ndarray
    prev_given_next: np.ndarray
    hat_marginal: np.ndarray
    hat_next_given_prev: np.ndarray
    hat_prev_given_next: np.ndarray

    @property
    def eps_marginal(self):
        return self.hat_marginal - self.marginal

    @property
    def eps_next_given_prev(self):
        return self.hat_next_given_prev - self.next_given_prev

    @property
    def eps_prev_given_next(self):
        return self.hat_prev_given_next - self.prev_given_next


def make_bundle(pi, hat_marginal, hat_next_given_prev, hat_prev_given_next) -> PerturbationBundle:
    m, c, d = prob.conditionals_from_joint(pi)
    return PerturbationBundle(
        ground_truth=np.asarray(pi, dtype=float),
        marginal=m,
        next_given_prev=c,
        prev_given_next=d,
        hat_marginal=np.asarray(hat_marginal, dtype=float),
        hat_next_given_prev=np.asarray(hat_next_given_prev, dtype=float),
        hat_prev_given_next=np.asarray(hat_prev_given_next, dtype=float),
    )


def mixed_bundle(pi, ntp_level, ptp_level, rng=None, noise=None):
    """Perturb every factor of ``pi`` by convex mixing with uniform-random noise.

    The marginal and the next-given-previous conditional are mixed at
    ``ntp_level``, the previous-given-next conditional at ``ptp_level``.
    Noise is drawn from ``rng`` in the order marginal, next|prev, prev|next,
    unless a previously returned ``noise`` triple is passed back in.
    Returns ``(bundle, noise)``.
    """
    m, c, d = prob.conditionals_from_joint(pi)
    nm, nc, nd = noise if noise is not None else (None, None, None)
    hat_m, nm = prob.mix_noise(m, ntp_level, rng, noise=nm)
    hat_c, nc = prob.mix_noise_conditional(c, ntp_level, rng, noise=nc)
    hat_d, nd = prob.mix_noise_conditional(d, ptp_level, rng, noise=nd)
    bundle = PerturbationBundle(np.asarray(pi, dtype=float), m, c, d, hat_m, hat_c, hat_d)
    return bundle, (nm, nc, nd)


def ntp_joint_error(bundle: PerturbationBundle):
    """Joint produced by NTP sampling with the perturbed factors.

    Returns ``(hat_joint, error, first_order)``; ``error`` is exact and
    ``first_order`` is the linearised error
    ``eps(a) p(b|a) + eps(b|a) p(a)``.
    """
    hat_joint = prob.joint_from_conditional(bundle.hat_marginal, bundle.hat_next_given_prev)
    error = hat_joint - bundle.ground_truth
    first_order = (
        bundle.eps_marginal[:, None] * bundle.next_given_prev.T
        + bundle.eps_next_given_prev.T * bundle.marginal[:, None]
    )
    return hat_joint, error, first_order


def kernel_error(bundle: PerturbationBundle):
    """Exact and first-order error of the perturbed refinement kernel."""
    exact_kernel = build_rpt_kernel(bundle.prev_given_next, bundle.next_given_prev)
    hat_kernel = build_rpt_kernel(bundle.hat_prev_given_next, bundle.hat_next_given_prev)
    first_order = build_rpt_kernel(bundle.eps_prev_given_next, bundle.next_given_prev) + build_rpt_kernel(
        bundle.prev_given_next, bundle.eps_next_given_prev
    )
    return hat_kernel - exact_kernel, first_order


def kernel_row_max_norm(e) -> float:
    """``max`` over source states of the row L1 norm (kernels are row-stochastic)."""
    return float(np.abs(np.asarray(e, dtype=float)).sum(axis=1).max())


def rpt_joint_error(bundle: PerturbationBundle, tol=STATIONARY_TOL, max_iters=STATIONARY_MAX_ITERS):
    """Stationary joint of the perturbed kernel and its error against the truth.

    Power iteration starts from the NTP joint, as the sampler does.
    """
    hat_kernel = build_rpt_kernel(bundle.hat_prev_given_next, bundle.hat_next_given_prev)
    start, _, _ = ntp_joint_error(bundle)
    hat_joint = stationary_distribution(hat_kernel, initial=start, tol=tol, max_iters=max_iters)
    return hat_joint, hat_joint - bundle.ground_truth


def ntp_error_bound(bundle: PerturbationBundle) -> float:
    return prob.l1_norm(bundle.eps_marginal) + prob.max_norm(bundle.eps_next_given_prev)


def kernel_error_bound(bundle: PerturbationBundle) -> float:
    return prob.max_norm(bundle.eps_prev_given_next) + prob.max_norm(bundle.eps_next_given_prev)


def rpt_error_bound(bundle: PerturbationBundle, kappa: float) -> float:
    if kappa < 1.0:
        raise ParameterError(f"condition number must be >= 1, got {kappa}")
    return kappa * kernel_error_bound(bundle)


def rpt_factor(bundle: PerturbationBundle, kappa: float) -> float:
    denom = ntp_error_bound(bundle)
    if denom == 0.0:
        raise DegenerateRatioError("NTP error bound is zero; RPT factor undefined")
    return rpt_error_bound(bundle, kappa) / denom


def tight_ntp_bundle(alpha=0.3, eps=0.1) -> PerturbationBundle:
    """Two-token diagonal joint with a marginal-only perturbation.

    ``pi = diag(alpha, 1 - alpha)`` and ``hat_marginal = (alpha + eps,
    1 - alpha - eps)``; both conditionals stay exact, so the NTP error bound
    is attained with equality.
    """
    beta = 1.0 - alpha
    if not 0.0 < eps < min(alpha, beta):
        raise ParameterError("need 0 < eps < min(alpha, 1 - alpha)")
    pi = np.diag([alpha, beta])
    _, c, d = prob.conditionals_from_joint(pi)
    return make_bundle(pi, np.array([alpha + eps, beta - eps]), c.copy(), d.copy())


BOUND_COLUMNS = [
    "trial", "delta", "ntp_l1", "ntp_bound", "kernel_err", "kernel_bound", "rpt_l1", "rpt_bound", "kappa",
    "ntp_first_order_gap", "kernel_first_order_gap",
]


def bound_check(bundle: PerturbationBundle) -> dict:
    """Exact errors next to their bounds, plus first-order residuals."""
    _, ntp_err, ntp_lin = ntp_joint_error(bundle)
    k_err, k_lin = kernel_error(bundle)
    kappa = condition_number(build_rpt_kernel(bundle.prev_given_next, bundle.next_given_prev))
    _, rpt_err = rpt_joint_error(bundle)
    return {
        "ntp_l1": prob.l1_norm(ntp_err),
        "ntp_bound": ntp_error_bound(bundle),
        "kernel_err": kernel_row_max_norm(k_err),
        "kernel_bound": kernel_error_bound(bundle),
        "rpt_l1": prob.l1_norm(rpt_err),
        "rpt_bound": rpt_error_bound(bundle, kappa),
        "kappa": kappa,
        "ntp_first_order_gap": prob.l1_norm(ntp_err - ntp_lin),
        "kernel_first_order_gap": kernel_row_max_norm(k_err - k_lin),
    }


def bound_suite(trials=1000, delta=1e-4, seed=0, vocab_size=20) -> list:
    """Random joints perturbed at scale ``delta`` (same level for every factor)."""
    rows = []
    for t in range(trials):
        rng = trial_rng(seed, t)
        pi = prob.random_joint(vocab_size, rng)
        bundle, _ = mixed_bundle(pi, delta, delta, rng)
        rows.append({"trial": t, "delta": delta, **bound_check(bundle)})
    return rows


def first_order_residuals(pi, deltas, rng) -> list:
    """First-order residuals at each scale in ``deltas`` with shared noise draws.

    Reusing one noise triple makes the perturbation exactly linear in the
    scale, so residuals shrink as ``delta**2``.
    """
    noise = None
    out = []
    for delta in deltas:
        bundle, noise = mixed_bundle(pi, delta, delta, rng if noise is None else None, noise=noise)
        _, ntp_err, ntp_lin = ntp_joint_error(bundle)
        k_err, k_lin = kernel_error(bundle)
        out.append(
            {
                "delta": delta,
                "ntp_residual": prob.l1_norm(ntp_err - ntp_lin),
                "kernel_residual": kernel_row_max_norm(k_err - k_lin),
            }
        )
    return out


# ---------------------------------------------------------------------------
# synthetic NTP-vs-RPT experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    vocab_size: int = 20
    base_noise: float = 1.0
    ratio: float = 0.0
    trials: int = 1000
    seed: int = 0

    def validate(self):
        if int(self.vocab_size) != self.vocab_size or self.vocab_size < 2:
            raise ParameterError("vocab_size must be an integer >= 2")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ParameterError("trials must be an integer >= 1")
        if not 0.0 < self.base_noise <= 1.0:
            raise ParameterError("base_noise must lie in (0, 1]")
        if not 0.0 <= self.ratio <= 1.0:
            raise ParameterError("ratio must lie in [0, 1]")
        return self


@dataclass(frozen=True)
class TrialResult:
    ntp_tv: float
    rpt_tv: float
    ntp_max: float
    rpt_max: float
    kappa: float
    rpt_factor: float
    ntp_bound: float
    rpt_bound: float


TRIAL_FIELDS = [f for f in TrialResult.__dataclass_fields__]


def trial_rng(seed: int, trial_index: int) -> np.random.Generator:
    """Independent stream for one trial, derived from ``(seed, trial_index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial_index)]))


def synthetic_trial(vocab_size, base_noise, ratio, rng) -> TrialResult:
    """One draw of the synthetic comparison.

    ``base_noise`` may be zero here (noiseless sanity case); the RPT factor
    is then reported as NaN.
    """
    pi = prob.random_joint(vocab_size, rng)
    bundle, _ = mixed_bundle(pi, base_noise, ratio * base_noise, rng)
    ntp_joint, ntp_err, _ = ntp_joint_error(bundle)
    _, rpt_err = rpt_joint_error(bundle)
    kappa = condition_number(build_rpt_kernel(bundle.prev_given_next, bundle.next_given_prev))
    ntp_bound = ntp_error_bound(bundle)
    rpt_bound = rpt_error_bound(bundle, kappa)
    factor = rpt_bound / ntp_bound if ntp_bound > 0 else math.nan
    return TrialResult(
        ntp_tv=0.5 * prob.l1_norm(ntp_err),
        rpt_tv=0.5 * prob.l1_norm(rpt_err),
        ntp_max=float(np.abs(ntp_err).max()),
        rpt_max=float(np.abs(rpt_err).max()),
        kappa=kappa,
        rpt_factor=factor,
        ntp_bound=ntp_bound,
        rpt_bound=rpt_bound,
    )


def run_synthetic_trial(config: SyntheticConfig, rng) -> TrialResult:
    config.validate()
    return synthetic_trial(config.vocab_size, config.base_noise, config.ratio, rng)


def _run_trial_job(job):
    config, index = job
    try:
        result = run_synthetic_trial(config, trial_rng(config.seed, index))
        return index, asdict(result), None
    except Exception as exc:  # reported per trial, the sweep continues
        return index, None, f"{type(exc).__name__}: {exc}"


@dataclass
class SweepOutcome:
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)


def run_synthetic_sweep(configs, parallelism=1) -> SweepOutcome:
    """Run every trial of every config; results are ordered by (config, trial)."""
    configs = [c.validate() for c in configs]
    jobs = [(c, i) for c in configs for i in range(c.trials)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * parallelism))))
    else:
        results = [_run_trial_job(job) for job in jobs]
    out = SweepOutcome()
    for (config, _), (index, record, error) in zip(jobs, results):
        cell = {"base_noise": config.base_noise, "ratio": config.ratio, "trial": index}
        if error is None:
            out.records.append({**cell, **record})
        else:
            out.failures.append({**cell, "error": error})
    return out


def run_synthetic_experiment(configs, parallelism=1):
    """Sweep ``configs`` and assemble an :class:`~rptlab.report.ExperimentReport`."""
    from .report import build_synthetic_report

    configs = list(configs)
    outcome = run_synthetic_sweep(configs, parallelism=parallelism)
    return build_synthetic_report(configs, outcome.records, outcome.failures)


def default_grid(trials=1000, seed=0, vocab_size=20, ratios=(0.0, 0.5, 0.75), base_noises=(0.01, 0.1, 1.0)):
    return [
        SyntheticConfig(vocab_size=vocab_size, base_noise=bn, ratio=r, trials=trials, seed=seed)
        for bn in base_noises
        for r in ratios
    ]
