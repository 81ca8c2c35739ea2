"""NTP generation with RPT refinement, plus held-out error analyses.

Positions in traces are 0-based indices into the full token list (prompt
included).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .toymodel import ConditionalModel, SourceSpec, sample_sequences


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling knobs.

    ``iterations`` may be a multiple of 0.5: the trailing half iteration
    resamples the previous tokens of the window but not its last token.
    ``temperature=0`` means argmax with ties to the lowest token index.
    ``confidence`` accepts a proposed replacement only when its raw
    previous-token probability exceeds the threshold.
    """

    window: int = 2
    iterations: float = 1
    temperature: float = 1.0
    greedy_ptp: bool = False
    confidence: float | None = None
    seed: int = 0
    schedule: str = "sliding"

    def validate(self):
        if self.window not in (0, 2, 3):
            raise ParameterError("window must be 0 (pure NTP), 2 or 3")
        if self.iterations < 0 or not float(2 * self.iterations).is_integer():
            raise ParameterError("iterations must be a non-negative multiple of 0.5")
        if self.iterations > 0 and self.window < 2:
            raise ParameterError("refinement iterations need window >= 2")
        if self.temperature < 0:
            raise ParameterError("temperature must be >= 0")
        if self.confidence is not None and not 0.0 < self.confidence <= 1.0:
            raise ParameterError("confidence must lie in (0, 1]")
        if self.schedule not in ("sliding", "posthoc"):
            raise ParameterError("schedule must be 'sliding' or 'posthoc'")
        return self


def tempered(probs, temperature) -> np.ndarray:
    """Distribution actually sampled at ``temperature`` (one-hot argmax at 0)."""
    probs = np.asarray(probs, dtype=float)
    if temperature == 0:
        out = np.zeros_like(probs)
        out[int(np.argmax(probs))] = 1.0
        return out
    if temperature == 1:
        return probs / probs.sum()
    with np.errstate(divide="ignore"):
        logp = np.log(probs) / temperature
    logp -= logp.max()
    w = np.exp(logp)
    return w / w.sum()


def draw(probs, temperature, rng) -> int:
    """Sample a token; temperature 0 is argmax and consumes no randomness."""
    if temperature == 0:
        return int(np.argmax(probs))
    p = tempered(probs, temperature)
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), p.size - 1))


@dataclass
class GenerationTrace:
    prompt: list
    initial: list = field(default_factory=list)
    final_tokens: list = field(default_factory=list)
    replacements: list = field(default_factory=list)  # (position, iteration, old, new)
    decisions: list = field(default_factory=list)  # (position, iteration, proposed, probability, accepted)

    def replay(self) -> list:
        tokens = list(self.prompt) + list(self.initial)
        for pos, _, old, new in self.replacements:
            if tokens[pos] != old:
                raise ValueError(f"replacement at {pos} expected {old}, found {tokens[pos]}")
            tokens[pos] = new
        return tokens

    def records(self):
        return [{"position": p, "iteration": it, "old": o, "new": n} for p, it, o, n in self.replacements]


def _sweep(model, tokens, start, width, config, rng, trace, iteration, partial=False):
    """One refinement sweep over ``tokens[start:start+width]`` (in place)."""
    end = start + width
    for pos in range(start, end - 1):
        future = tokens[pos + 1 : end]
        dist = model.ptp(tokens[:pos], future)
        old = tokens[pos]
        if config.greedy_ptp:
            proposed = int(np.argmax(dist))
        else:
            proposed = draw(dist, config.temperature, rng)
        accepted = True
        if config.confidence is not None and proposed != old:
            accepted = bool(dist[proposed] > config.confidence)
        if trace is not None:
            trace.decisions.append((pos, iteration, proposed, float(dist[proposed]), accepted))
        if accepted and proposed != old:
            tokens[pos] = proposed
            if trace is not None:
                trace.replacements.append((pos, iteration, old, proposed))
    if partial:
        return
    pos = end - 1
    old = tokens[pos]
    new = draw(model.ntp(tokens[:pos]), config.temperature, rng)
    if new != old:
        tokens[pos] = new
        if trace is not None:
            trace.replacements.append((pos, iteration, old, new))


def _refine_window(model, tokens, start, config, rng, trace):
    full = int(config.iterations)
    for it in range(full):
        _sweep(model, tokens, start, config.window, config, rng, trace, it)
    if config.iterations > full:
        _sweep(model, tokens, start, config.window, config, rng, trace, full, partial=True)


def ntp_generate(model: ConditionalModel, prompt, length, config: SamplerConfig, rng) -> GenerationTrace:
    if length < 1:
        raise ParameterError("length must be >= 1")
    tokens = list(prompt)
    trace = GenerationTrace(list(prompt))
    for _ in range(length):
        t = draw(model.ntp(tokens), config.temperature, rng)
        tokens.append(t)
        trace.initial.append(t)
    trace.final_tokens = tokens
    return trace


def rpt_generate(model: ConditionalModel, prompt, length, config: SamplerConfig, rng) -> GenerationTrace:
    """Generate with refinement of a trailing window.

    In the default ``sliding`` schedule every new NTP token that completes a
    window of generated tokens triggers ``iterations`` sweeps over that
    window.  ``posthoc`` generates the whole continuation first and then
    sweeps every window left to right.  Prompt tokens are never rewritten.
    """
    config.validate()
    if length < 1:
        raise ParameterError("length must be >= 1")
    w = config.window
    if config.iterations == 0 or w < 2:
        return ntp_generate(model, prompt, length, config, rng)
    tokens = list(prompt)
    p0 = len(tokens)
    trace = GenerationTrace(list(prompt))
    for _ in range(length):
        t = draw(model.ntp(tokens), config.temperature, rng)
        tokens.append(t)
        trace.initial.append(t)
        if config.schedule == "sliding" and len(tokens) - p0 >= w:
            _refine_window(model, tokens, len(tokens) - w, config, rng, trace)
    if config.schedule == "posthoc":
        for start in range(p0, len(tokens) - w + 1):
            _refine_window(model, tokens, start, config, rng, trace)
    trace.final_tokens = tokens
    return trace


def rpt_refine_pair(model: ConditionalModel, prefix, x_i, x_next, config: SamplerConfig, rng):
    """One refinement step on the pair following ``prefix``."""
    tokens = list(prefix) + [int(x_i), int(x_next)]
    _sweep(model, tokens, len(prefix), 2, config, rng, None, 0)
    return tokens[-2], tokens[-1]


# ---------------------------------------------------------------------------
# exact one-step laws
# ---------------------------------------------------------------------------


def _first_draw_law(ptp_matrix, config: SamplerConfig):
    """``F[a_old, a_new, b]``: law of the resampled token given the incumbent and the next token."""
    d = np.asarray(ptp_matrix, dtype=float)
    v = d.shape[0]
    if config.greedy_ptp:
        prop = np.zeros_like(d)
        prop[np.argmax(d, axis=0), np.arange(v)] = 1.0
    else:
        prop = np.stack([tempered(d[:, b], config.temperature) for b in range(v)], axis=1)
    law = np.broadcast_to(prop, (v, v, v)).copy()
    if config.confidence is not None:
        rejected = prop * (d <= config.confidence)
        for a in range(v):
            law[a] -= rejected
            law[a, a] += rejected.sum(axis=0)
    return law


def pair_kernel(model: ConditionalModel, context, config: SamplerConfig) -> np.ndarray:
    """Exact ``(V*V, V*V)`` transition law of one window-2 refinement step."""
    d = model.ptp_matrix(context)
    c = model.ntp_after_matrix(context)
    v = d.shape[0]
    ct = np.stack([tempered(c[:, a], config.temperature) for a in range(v)], axis=1)
    first = _first_draw_law(d, config)  # [a, a2, b]
    # K[(a, b), (a2, b2)] = first[a, a2, b] * ct[b2, a2]
    k = first.transpose(0, 2, 1)[:, :, :, None] * ct.T[None, None, :, :]
    return k.reshape(v * v, v * v)


def refine_pair_distribution(model: ConditionalModel, prefix, x_i, x_next, config: SamplerConfig) -> np.ndarray:
    """Exact ``(V, V)`` law of :func:`rpt_refine_pair` from state ``(x_i, x_next)``."""
    prefix = list(prefix)
    d = model.ptp(prefix, [int(x_next)])
    v = d.size
    if config.greedy_ptp:
        first = np.zeros(v)
        first[int(np.argmax(d))] = 1.0
    else:
        first = tempered(d, config.temperature)
    if config.confidence is not None:
        rejected = first * (d <= config.confidence)
        rejected[int(x_i)] = 0.0
        first = first - rejected
        first[int(x_i)] += rejected.sum()
    out = np.zeros((v, v))
    for a in range(v):
        if first[a] > 0:
            out[a] = first[a] * tempered(model.ntp(prefix + [a]), config.temperature)
    return out


def rpt_marginals(model: ConditionalModel, context, k_max, config: SamplerConfig | None = None) -> np.ndarray:
    """Law of ``x_i`` after ``k = 0..k_max`` refinement steps, shape ``(k_max+1, V)``.

    The pair starts from NTP sampling and is propagated exactly through the
    window-2 kernel; no sampling noise is involved.
    """
    config = SamplerConfig() if config is None else config
    context = list(context)
    p0 = tempered(model.ntp(context), config.temperature)
    c = model.ntp_after_matrix(context)
    v = p0.size
    ct = np.stack([tempered(c[:, a], config.temperature) for a in range(v)], axis=1)
    out = np.empty((k_max + 1, v))
    out[0] = p0
    if k_max == 0:
        return out
    q = (p0[:, None] * ct.T).ravel()
    if config.confidence is None and not config.greedy_ptp and config.temperature == 1:
        d = model.ptp_matrix(context)
        for k in range(1, k_max + 1):
            qb = q.reshape(v, v).sum(axis=0)
            first = d @ qb
            out[k] = first
            q = (first[:, None] * ct.T).ravel()
        return out
    kernel = pair_kernel(model, context, config)
    for k in range(1, k_max + 1):
        q = q @ kernel
        out[k] = q.reshape(v, v).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# error analyses on held-out data
# ---------------------------------------------------------------------------


@dataclass
class HeldOutProbs:
    """Probability assigned to each held-out token after ``k`` refinement steps."""

    probs: np.ndarray  # (tokens, k_max + 1)
    skipped: int

    @property
    def count(self) -> int:
        return int(self.probs.shape[0])


def held_out_probs(model, sequences, k_max, config=None, min_context=20) -> HeldOutProbs:
    rows, skipped = [], 0
    for seq in np.atleast_2d(sequences):
        seq = [int(t) for t in seq]
        for j, tok in enumerate(seq):
            if j < min_context:
                skipped += 1
                continue
            rows.append(rpt_marginals(model, seq[:j], k_max, config)[:, tok])
    return HeldOutProbs(np.array(rows).reshape(-1, k_max + 1), skipped)


def held_out_stream(spec: SourceSpec, num_tokens, rng, min_context=20, seq_len=64) -> np.ndarray:
    per_seq = seq_len - min_context
    if per_seq < 1:
        raise ParameterError("seq_len must exceed min_context")
    return sample_sequences(spec, math.ceil(num_tokens / per_seq), seq_len, rng)


@dataclass
class TVError:
    k: int
    mean: float
    stderr: float
    count: int
    skipped: int
    method: str = "exact propagation"


def tv_errors_from_probs(held: HeldOutProbs, ks) -> list:
    out = []
    for k in ks:
        err = 1.0 - held.probs[:, k]
        se = float(err.std(ddof=1) / math.sqrt(err.size)) if err.size > 1 else 0.0
        out.append(TVError(int(k), float(err.mean()), se, held.count, held.skipped))
    return out


def empirical_tv_error(model, spec: SourceSpec, num_tokens, k, config=None, rng=None, min_context=20):
    """Mean ``1 - p^(k)(x_i)`` over held-out tokens drawn from ``spec``."""
    config = SamplerConfig() if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    seqs = held_out_stream(spec, num_tokens, rng, min_context)
    held = held_out_probs(model, seqs, k, config, min_context)
    return tv_errors_from_probs(held, [k])[0]


def tv_table(model, spec: SourceSpec, num_tokens, ks=(0, 1, 2, 3), config=None, rng=None, min_context=20):
    """Errors for every ``k`` in ``ks`` on one shared held-out stream."""
    config = SamplerConfig() if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    seqs = held_out_stream(spec, num_tokens, rng, min_context)
    held = held_out_probs(model, seqs, max(ks), config, min_context)
    return tv_errors_from_probs(held, ks)


@dataclass
class ImprovementResult:
    fraction: float
    fraction_excluding_ties: float
    improved: int
    worsened: int
    ties: int
    total: int
    degenerate: bool
    hist_edges: list
    hist_counts: list
    diffs: np.ndarray = field(repr=False, default=None)


TIE_TOL = 1e-10


def improvement_from_probs(held: HeldOutProbs, bins=50) -> ImprovementResult:
    diffs = held.probs[:, 1] - held.probs[:, 0]
    improved = int((diffs > TIE_TOL).sum())
    worsened = int((diffs < -TIE_TOL).sum())
    ties = int(diffs.size - improved - worsened)
    total = int(diffs.size)
    decided = improved + worsened
    lim = float(np.abs(diffs).max()) if total else 0.0
    counts, edges = np.histogram(diffs, bins=bins, range=(-lim, lim) if lim > 0 else (-1.0, 1.0))
    return ImprovementResult(
        fraction=improved / total if total else math.nan,
        fraction_excluding_ties=improved / decided if decided else math.nan,
        improved=improved,
        worsened=worsened,
        ties=ties,
        total=total,
        degenerate=decided == 0,
        hist_edges=edges.tolist(),
        hist_counts=counts.tolist(),
        diffs=diffs,
    )


def improvement_fraction(model, spec: SourceSpec, num_tokens, config=None, rng=None, min_context=20):
    """Share of held-out tokens whose probability rises after one refinement step."""
    config = SamplerConfig() if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    seqs = held_out_stream(spec, num_tokens, rng, min_context)
    return improvement_from_probs(held_out_probs(model, seqs, 1, config, min_context))
