"""Synthetic sources and a tabular-softmax autoregressive model.

The model is a logit table indexed by a context key: the last ``c`` input
tokens in fed order together with their positional deltas ``tau - sigma``.
Because the key carries the deltas, the same table answers next-token and
previous-token queries; which one is asked is determined by the delta of the
current position (``1`` or ``w`` for next-token, ``-l`` for the token ``l``
places back).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import prob
from .errors import (
    EmptyBatchError,
    InsufficientContextError,
    ParameterError,
    TrainingDivergedError,
    UnsupportedOffsetError,
)
from .permutation import BatchSpec, make_training_batch

# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceSpec:
    """Order-``m`` Markov source over ``vocab_size`` tokens.

    ``transition[h]`` is the next-token distribution after history ``h``,
    where a history ``(y_1..y_m)`` is encoded as ``sum y_j V**(m-j)``.
    ``initial`` is a distribution over the ``V**m`` seed histories.
    """

    vocab_size: int
    order: int
    transition: np.ndarray
    initial: np.ndarray
    name: str = "source"

    def __post_init__(self):
        v, m = self.vocab_size, self.order
        if v < 2 or m < 1:
            raise ParameterError("need vocab_size >= 2 and order >= 1")
        if self.transition.shape != (v**m, v):
            raise ParameterError(f"transition must have shape {(v**m, v)}, got {self.transition.shape}")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1) > 1e-9):
            raise ParameterError("every transition row must be a distribution")
        if self.initial.shape != (v**m,) or abs(self.initial.sum() - 1) > 1e-9:
            raise ParameterError("initial must be a distribution over seed histories")

    def history_index(self, tokens) -> int:
        h = 0
        for t in tokens[-self.order :]:
            h = h * self.vocab_size + int(t)
        return h


def uniform_source(vocab_size, order=1) -> SourceSpec:
    n = vocab_size**order
    return SourceSpec(vocab_size, order, np.full((n, vocab_size), 1.0 / vocab_size), np.full(n, 1.0 / n), "uniform")


def random_source(vocab_size, order, rng, concentration=1.0, name="random") -> SourceSpec:
    n = vocab_size**order
    trans = rng.dirichlet(np.full(vocab_size, concentration), size=n)
    return SourceSpec(vocab_size, order, trans, np.full(n, 1.0 / n), name)


def deterministic_source(vocab_size, order, rng, seed_history=None) -> SourceSpec:
    """Every history maps to a single next token; the seed is fixed too."""
    n = vocab_size**order
    trans = np.zeros((n, vocab_size))
    trans[np.arange(n), rng.integers(0, vocab_size, size=n)] = 1.0
    initial = np.zeros(n)
    initial[0 if seed_history is None else seed_history] = 1.0
    return SourceSpec(vocab_size, order, trans, initial, "deterministic")


def coupled_source(vocab_size=16, order=2, rng=None, coupling=0.9, concentration=0.3, name="coupled") -> SourceSpec:
    """Source in which the next token largely reveals the current one.

    Tokens are pairs ``(hi, lo)`` in base ``b = sqrt(V)``.  The next token's
    ``hi`` copies the current ``lo`` with probability ``coupling`` (uniform
    otherwise) and its ``lo`` is drawn from a sparse Dirichlet table indexed by
    the full history.  Next-token prediction is therefore uncertain while the
    previous token is nearly determined by its successor.
    """
    b = math.isqrt(vocab_size)
    if b * b != vocab_size:
        raise ParameterError("coupled_source needs a square vocabulary size")
    rng = np.random.default_rng() if rng is None else rng
    n = vocab_size**order
    lo_tables = rng.dirichlet(np.full(b, concentration), size=n)
    last_lo = np.arange(n) % vocab_size % b
    hi_tables = np.full((n, b), (1.0 - coupling) / b)
    hi_tables[np.arange(n), last_lo] += coupling
    trans = (hi_tables[:, :, None] * lo_tables[:, None, :]).reshape(n, vocab_size)
    return SourceSpec(vocab_size, order, trans, np.full(n, 1.0 / n), name)


def sample_sequences(spec: SourceSpec, count, length, rng) -> np.ndarray:
    """``count`` independent sequences of ``length`` tokens, shape ``(count, length)``."""
    v, m = spec.vocab_size, spec.order
    if length < 1:
        raise ParameterError("length must be >= 1")
    out = np.empty((count, max(length, m)), dtype=np.int64)
    seeds = rng.choice(spec.initial.size, size=count, p=spec.initial)
    for j in range(m):
        out[:, j] = seeds // v ** (m - 1 - j) % v
    cdf = np.cumsum(spec.transition, axis=1)
    hist = seeds.copy()
    mod = v**m
    for t in range(m, length):
        u = rng.random(count)
        nxt = np.minimum((cdf[hist] < u[:, None]).sum(axis=1), v - 1)
        out[:, t] = nxt
        hist = (hist * v + nxt) % mod
    return out[:, :length]


def sample_source(spec: SourceSpec, length, rng) -> np.ndarray:
    return sample_sequences(spec, 1, length, rng)[0]


def exact_source_conditional(spec: SourceSpec, context) -> np.ndarray:
    if len(context) < spec.order:
        raise InsufficientContextError(f"need at least {spec.order} context tokens, got {len(context)}")
    return spec.transition[spec.history_index(context)]


# ---------------------------------------------------------------------------
# conditional models
# ---------------------------------------------------------------------------


class ConditionalModel:
    """Anything that answers next-token and previous-token queries.

    ``ntp(context)`` is ``p(x_j | x_<j)``; ``ptp(context, future)`` is
    ``p(x_j | x_<j, x_{j+1..j+l})`` with ``l = len(future)``.
    """

    vocab_size: int
    window: int

    def ntp(self, context) -> np.ndarray:
        raise NotImplementedError

    def ptp(self, context, future) -> np.ndarray:
        raise NotImplementedError

    def ptp_matrix(self, context) -> np.ndarray:
        """``D[a, b] = ptp(context, [b])[a]``: previous token given the next."""
        return np.stack([self.ptp(context, [b]) for b in range(self.vocab_size)], axis=1)

    def ntp_after_matrix(self, context) -> np.ndarray:
        """``C[b, a] = ntp(context + [a])[b]``: next token given the current one."""
        ctx = list(context)
        return np.stack([self.ntp(ctx + [a]) for a in range(self.vocab_size)], axis=1)


class SourceModel(ConditionalModel):
    """Exact conditionals of a :class:`SourceSpec`; previous-token ones by Bayes' rule."""

    def __init__(self, spec: SourceSpec, window=3):
        self.spec = spec
        self.vocab_size = spec.vocab_size
        self.window = window

    def ntp(self, context):
        return exact_source_conditional(self.spec, context)

    def ptp(self, context, future):
        context = list(context)
        weights = exact_source_conditional(self.spec, context).copy()
        for a in range(self.vocab_size):
            if weights[a] == 0.0:
                continue
            seq = context + [a]
            for f in future:
                weights[a] *= exact_source_conditional(self.spec, seq)[f]
                seq.append(f)
        total = weights.sum()
        if total <= 0:
            raise InsufficientContextError("future tokens have zero probability under the source")
        return weights / total

    def ptp_matrix(self, context):
        # next tokens the source can never emit get a uniform (unused) column
        context = list(context)
        step = [exact_source_conditional(self.spec, context + [a]) for a in range(self.vocab_size)]
        joint = exact_source_conditional(self.spec, context)[:, None] * np.array(step)
        mass = joint.sum(axis=0)
        safe = np.where(mass > 0, mass, 1.0)
        return np.where(mass > 0, joint / safe, 1.0 / self.vocab_size)


class PerturbedSourceModel(SourceModel):
    """Source model whose next-token conditionals are mixed with fixed noise.

    Each history gets its own noise distribution, drawn once, so the model is
    a deterministic function of the context.  Previous-token queries stay
    exact unless ``ptp_level`` is positive.
    """

    def __init__(self, spec: SourceSpec, ntp_level, rng, ptp_level=0.0, window=3):
        super().__init__(spec, window)
        n = spec.transition.shape[0]
        self.ntp_level = ntp_level
        self.ptp_level = ptp_level
        self._noise = np.stack([prob.random_distribution(spec.vocab_size, rng) for _ in range(n)])
        self._ptp_noise = np.stack([prob.random_distribution(spec.vocab_size, rng) for _ in range(n)])

    def ntp(self, context):
        h = self.spec.history_index(context) if len(context) >= self.spec.order else None
        if h is None:
            raise InsufficientContextError(f"need at least {self.spec.order} context tokens")
        return (1 - self.ntp_level) * self.spec.transition[h] + self.ntp_level * self._noise[h]

    def ptp(self, context, future):
        exact = SourceModel.ptp(self, context, future)
        if self.ptp_level == 0.0:
            return exact
        h = self.spec.history_index(list(context) + list(future))
        return (1 - self.ptp_level) * exact + self.ptp_level * self._ptp_noise[h]

    def ptp_matrix(self, context):
        if self.ptp_level == 0.0:
            return SourceModel.ptp_matrix(self, context)
        return ConditionalModel.ptp_matrix(self, context)


# ---------------------------------------------------------------------------
# tabular softmax model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextKey:
    """Last ``c`` fed tokens with their deltas; ``target_delta`` belongs to the current position."""

    recent_tokens: tuple
    recent_deltas: tuple
    target_delta: int


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class ToyModel(ConditionalModel):
    """Logit table over context keys, trained by SGD on cross-entropy.

    Unseen keys behave as an all-zero logit row (uniform prediction).
    """

    def __init__(self, vocab_size, context=None, window=3, order=1, lr=0.5):
        if window < 2:
            raise ParameterError("window must be >= 2")
        self.vocab_size = int(vocab_size)
        self.window = int(window)
        self.context = int(context) if context is not None else order + window - 1
        if self.context < 1:
            raise ParameterError("context width must be >= 1")
        self.lr = float(lr)
        self._pad = self.vocab_size
        self._index: dict[int, int] = {}
        self._logits = np.zeros((64, self.vocab_size))

    # -- key encoding -------------------------------------------------------

    @property
    def num_rows(self) -> int:
        return len(self._index)

    @property
    def hyperparams(self) -> dict:
        return {"vocab_size": self.vocab_size, "context": self.context, "window": self.window, "lr": self.lr}

    def _clamp(self, deltas):
        return np.clip(deltas, -(self.window - 1), self.window)

    def encode(self, tokens, deltas) -> np.ndarray:
        """Integer codes for key windows.

        ``tokens`` and ``deltas`` have shape ``(..., c)``; pad positions use
        token ``V`` and delta ``0``.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        deltas = np.asarray(deltas, dtype=np.int64)
        pad = tokens == self._pad
        d = np.where(pad, 0, self._clamp(deltas)) + (self.window - 1)
        tok_base = self.vocab_size + 1
        delta_base = 2 * self.window
        codes = np.zeros(tokens.shape[:-1], dtype=np.int64)
        for j in range(self.context):
            codes = (codes * tok_base + tokens[..., j]) * delta_base + d[..., j]
        return codes

    def decode(self, code) -> ContextKey:
        tok_base = self.vocab_size + 1
        delta_base = 2 * self.window
        toks, ds = [], []
        code = int(code)
        for _ in range(self.context):
            code, d = divmod(code, delta_base)
            code, t = divmod(code, tok_base)
            toks.append(t)
            ds.append(d - (self.window - 1))
        toks.reverse()
        ds.reverse()
        return ContextKey(tuple(toks), tuple(ds[:-1]), ds[-1])

    def key_code(self, key: ContextKey) -> int:
        deltas = list(key.recent_deltas) + [key.target_delta]
        return int(self.encode(np.array([key.recent_tokens]), np.array([deltas]))[0])

    def _windows(self, fed_tokens, deltas) -> np.ndarray:
        """Codes for every position of a fed (sigma-ordered) sequence."""
        c = self.context
        toks = np.concatenate([np.full(c - 1, self._pad), np.asarray(fed_tokens, dtype=np.int64)])
        ds = np.concatenate([np.zeros(c - 1, dtype=np.int64), np.asarray(deltas, dtype=np.int64)])
        return self.encode(sliding_window_view(toks, c), sliding_window_view(ds, c))

    def _query_code(self, fed_tokens, deltas) -> int:
        c = self.context
        toks = list(fed_tokens)[-c:]
        ds = list(deltas)[-c:]
        k = c - len(toks)
        return int(self.encode(np.array([[self._pad] * k + toks]), np.array([[0] * k + ds]))[0])

    # -- table access -------------------------------------------------------

    def rows_for(self, codes, create=False) -> np.ndarray:
        """Row indices for ``codes``; ``-1`` marks unseen keys unless ``create``."""
        index = self._index
        if create:
            out = np.empty(len(codes), dtype=np.int64)
            for i, code in enumerate(codes.tolist()):
                row = index.get(code)
                if row is None:
                    row = index[code] = len(index)
                out[i] = row
            need = len(index)
            if need > self._logits.shape[0]:
                grown = np.zeros((max(need, 2 * self._logits.shape[0]), self.vocab_size))
                grown[: self._logits.shape[0]] = self._logits
                self._logits = grown
            return out
        return np.fromiter((index.get(code, -1) for code in codes.tolist()), dtype=np.int64, count=len(codes))

    def logits_for(self, codes) -> np.ndarray:
        rows = self.rows_for(np.asarray(codes, dtype=np.int64).ravel())
        out = np.zeros((rows.size, self.vocab_size))
        seen = rows >= 0
        out[seen] = self._logits[rows[seen]]
        return out

    def logit_row(self, key: ContextKey) -> np.ndarray:
        return self.logits_for([self.key_code(key)])[0]

    def set_logits(self, key: ContextKey, logits):
        code = self.key_code(key)
        row = self.rows_for(np.array([code]), create=True)[0]
        self._logits[row] = np.asarray(logits, dtype=float)

    def items(self):
        """``(ContextKey, logits)`` for every stored row, in insertion order."""
        for code, row in self._index.items():
            yield self.decode(code), self._logits[row].copy()

    def copy(self) -> "ToyModel":
        other = ToyModel(self.vocab_size, self.context, self.window, lr=self.lr)
        other._index = dict(self._index)
        other._logits = self._logits.copy()
        return other

    # -- queries ------------------------------------------------------------

    def forward(self, key: ContextKey) -> np.ndarray:
        return softmax(self.logit_row(key))

    def ntp(self, context):
        return softmax(self.logits_for([self._query_code(context, [1] * len(context))])[0])

    def ptp(self, context, future):
        ell = len(future)
        if ell == 0:
            return self.ntp(context)
        if ell >= self.window:
            raise UnsupportedOffsetError(f"offset {ell} needs a window larger than {self.window}")
        fed = list(context) + list(future)
        deltas = [1] * len(context) + [-j for j in range(1, ell + 1)]
        return softmax(self.logits_for([self._query_code(fed, deltas)])[0])

    def ptp_matrix(self, context):
        v = self.vocab_size
        ctx = list(context)
        codes = [self._query_code(ctx + [b], [1] * len(ctx) + [-1]) for b in range(v)]
        return softmax(self.logits_for(codes), axis=1).T

    def ntp_after_matrix(self, context):
        v = self.vocab_size
        ctx = list(context)
        codes = [self._query_code(ctx + [a], [1] * (len(ctx) + 1)) for a in range(v)]
        return softmax(self.logits_for(codes), axis=1).T

    # -- serialization ------------------------------------------------------

    def save(self, path):
        """Flat record checkpoint: a hyperparameter header then one JSON line per row."""
        path = Path(path)
        lines = [json.dumps({"hyperparams": self.hyperparams, "rows": self.num_rows}, sort_keys=True)]
        for key, logits in self.items():
            lines.append(
                json.dumps(
                    {
                        "recent_tokens": list(key.recent_tokens),
                        "recent_deltas": list(key.recent_deltas),
                        "target_delta": key.target_delta,
                        "logits": logits.tolist(),
                    },
                    sort_keys=True,
                )
            )
        from .report import atomic_write_text

        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ToyModel":
        with open(path) as fh:
            header = json.loads(fh.readline())
            hp = header["hyperparams"]
            model = cls(hp["vocab_size"], hp["context"], hp["window"], lr=hp["lr"])
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    key = ContextKey(tuple(rec["recent_tokens"]), tuple(rec["recent_deltas"]), rec["target_delta"])
                    model.set_logits(key, rec["logits"])
        return model


def ntp_conditional(model: ConditionalModel, context) -> np.ndarray:
    return model.ntp(list(context))


def ptp_conditional(model: ConditionalModel, context, window_tokens, ell) -> np.ndarray:
    """Distribution of the token ``ell`` places before the end of the window.

    ``window_tokens`` are the ``ell`` tokens that follow the queried position.
    """
    if ell >= model.window:
        raise UnsupportedOffsetError(f"offset {ell} must be smaller than the window {model.window}")
    if len(window_tokens) != ell:
        raise ParameterError(f"expected {ell} future tokens, got {len(window_tokens)}")
    return model.ptp(list(context), list(window_tokens))


def forward(model: ToyModel, key: ContextKey) -> np.ndarray:
    return model.forward(key)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class Gradient:
    """Sparse gradient: one dense row per touched context key."""

    codes: np.ndarray
    values: np.ndarray


@dataclass
class BatchLoss:
    loss: float
    gradient: Gradient
    count: int
    head_sums: dict
    head_counts: dict


def _batch_terms(model: ToyModel, batch: BatchSpec):
    mask = batch.mask
    if not mask.any():
        raise EmptyBatchError("batch has no unmasked positions")
    codes = model._windows(batch.permuted_tokens, batch.plan.deltas)[mask]
    targets = batch.targets[mask]
    deltas = batch.plan.deltas[mask]
    return codes, targets, deltas


def _head_of(deltas):
    # positive deltas predict the next token; -l predicts the token l back
    return np.where(deltas > 0, 0, -deltas)


def loss_and_grad(model: ToyModel, batch: BatchSpec) -> BatchLoss:
    """Mean cross-entropy over unmasked positions and its gradient.

    The gradient of each touched row is ``softmax - onehot(target)`` summed
    over the row's positions and divided by the number of positions.
    """
    codes, targets, deltas = _batch_terms(model, batch)
    n = codes.size
    probs = softmax(model.logits_for(codes), axis=1)
    picked = probs[np.arange(n), targets]
    nll = -np.log(np.maximum(picked, 1e-300))
    grad_rows = probs
    grad_rows[np.arange(n), targets] -= 1.0
    uniq, inverse = np.unique(codes, return_inverse=True)
    values = np.zeros((uniq.size, model.vocab_size))
    np.add.at(values, inverse, grad_rows)
    heads = _head_of(deltas)
    head_sums, head_counts = {}, {}
    for h in np.unique(heads).tolist():
        sel = heads == h
        head_sums[h] = float(nll[sel].sum())
        head_counts[h] = int(sel.sum())
    return BatchLoss(float(nll.mean()), Gradient(uniq, values / n), n, head_sums, head_counts)


def apply_gradient(model: ToyModel, grad: Gradient, step_size):
    rows = model.rows_for(grad.codes, create=True)
    model._logits[rows] -= step_size * grad.values


@dataclass
class TrainResult:
    model: ToyModel
    ntp_trace: list = field(default_factory=list)
    ptp_traces: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)

    def trace_rows(self):
        """``(step, ntp_loss, ptp_1_loss, ...)`` rows; missing heads are ``None``."""
        heads = sorted(self.ptp_traces)
        lookup = {h: dict(self.ptp_traces[h]) for h in heads}
        rows = []
        for step, ntp_loss in self.ntp_trace:
            rows.append([step, ntp_loss] + [lookup[h].get(step) for h in heads])
        return rows


def train(
    model: ToyModel,
    spec: SourceSpec,
    steps,
    s,
    q,
    w,
    rng,
    seq_len=64,
    reduction="sum",
    checkpoint_every=None,
    checkpoint_fn=None,
) -> TrainResult:
    """Permutation-aware SGD training on sequences drawn from ``spec``.

    Each step draws one sequence, permutes it with probability ``s`` (swap
    probability ``q``, window ``w``) and takes one SGD step with the model's
    learning rate.  ``reduction="sum"`` steps on the summed per-sequence loss
    (every position moves its row by ``lr``); ``"mean"`` steps on the mean.
    Per-step losses are traced per head: next-token, and previous-token at
    each offset ``1..w-1``.
    """
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if w > model.window:
        raise ParameterError(f"training window {w} exceeds model window {model.window}")
    if reduction not in ("sum", "mean"):
        raise ParameterError("reduction must be 'sum' or 'mean'")
    data = sample_sequences(spec, steps, seq_len, rng)
    result = TrainResult(model, [], {ell: [] for ell in range(1, w)} if s > 0 else {})
    for step in range(steps):
        batch = make_training_batch(data[step], s, q, w, rng)
        with np.errstate(over="ignore", invalid="ignore"):
            out = loss_and_grad(model, batch)
        if not math.isfinite(out.loss):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        scale = model.lr * (out.count if reduction == "sum" else 1.0)
        apply_gradient(model, out.gradient, scale)
        if 0 in out.head_counts:
            result.ntp_trace.append((step, out.head_sums[0] / out.head_counts[0]))
        for ell, total in out.head_sums.items():
            if ell > 0:
                result.ptp_traces.setdefault(ell, []).append((step, total / out.head_counts[ell]))
        if checkpoint_every and (step + 1) % checkpoint_every == 0:
            snap = model.copy()
            result.checkpoints.append((step + 1, checkpoint_fn(snap) if checkpoint_fn else snap))
    if s == 0:
        result.ptp_traces = {}
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def head_codes(model: ToyModel, seq, ell):
    """Key codes and targets for every position of ``seq`` under head ``ell``.

    ``ell = 0`` predicts ``x_j`` from ``x_<j`` (j >= 1); ``ell > 0`` predicts
    ``x_j`` from ``x_<j`` and the ``ell`` tokens after it.
    """
    seq = np.asarray(seq, dtype=np.int64)
    n = seq.size
    c = model.context
    pad = np.full(c, model._pad, dtype=np.int64)
    padded = np.concatenate([pad, seq])
    if ell == 0:
        js = np.arange(1, n)
        idx = js[:, None] + np.arange(c)[None, :]  # positions j-c..j-1 in padded coordinates
        toks = padded[idx]
        ds = np.where(toks == model._pad, 0, 1)
        return model.encode(toks, ds), seq[js], js
    js = np.arange(0, n - ell)
    ctx_len = max(c - ell, 0)
    parts_t, parts_d = [], []
    if ctx_len:
        idx = js[:, None] + np.arange(c - ctx_len, c)[None, :]
        t = padded[idx]
        parts_t.append(t)
        parts_d.append(np.where(t == model._pad, 0, 1))
    fut = seq[js[:, None] + np.arange(1, ell + 1)[None, :]]
    fut_d = np.broadcast_to(-np.arange(1, ell + 1), fut.shape)
    parts_t.append(fut[:, -c:])
    parts_d.append(fut_d[:, -c:])
    toks = np.concatenate(parts_t, axis=1)
    ds = np.concatenate(parts_d, axis=1)
    return model.encode(toks, ds), seq[js], js


def head_cross_entropy(model: ToyModel, sequences, ell, min_context=0) -> float:
    """Mean cross-entropy of head ``ell`` over all eligible positions."""
    total, count = 0.0, 0
    for seq in np.atleast_2d(sequences):
        codes, targets, js = head_codes(model, seq, ell)
        keep = js >= min_context
        if not keep.any():
            continue
        probs = softmax(model.logits_for(codes[keep]), axis=1)
        total += float(-np.log(np.maximum(probs[np.arange(keep.sum()), targets[keep]], 1e-300)).sum())
        count += int(keep.sum())
    if count == 0:
        raise EmptyBatchError("no eligible positions")
    return total / count


def validation_losses(model: ToyModel, sequences, min_context=None) -> dict:
    """Cross-entropy per head: ``{0: ntp, 1: ptp_1, ...}``."""
    mc = model.context if min_context is None else min_context
    return {ell: head_cross_entropy(model, sequences, ell, mc) for ell in range(model.window)}


def mean_ntp_tv(model: ConditionalModel, spec: SourceSpec, contexts) -> float:
    """Average TV between the model's and the source's next-token conditionals."""
    return float(np.mean([prob.tv_distance(model.ntp(list(c)), exact_source_conditional(spec, c)) for c in contexts]))
