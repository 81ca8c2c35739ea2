"""Experiment runners behind the CLI subcommands.

Each runner takes a resolved parameter dict plus a master seed and returns an
:class:`~rptlab.report.ExperimentReport`.  Sub-streams derive from
``(seed, stream_id)`` so results never depend on execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import markov, sampler, toymodel
from .report import ExperimentReport, finalize

# stream ids for SeedSequence([seed, stream])
SOURCE, TRAIN, VALID, HELD_OUT, SAMPLE, PROMPTS = range(1, 7)


def stream(seed, sid, *extra) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), sid, *extra]))


def _echo(command, params, seed):
    return {"command": command, "seed": int(seed), "params": dict(params)}


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------


def run_synthetic(params, seed, parallelism=1) -> ExperimentReport:
    configs = markov.default_grid(
        trials=params["trials"],
        seed=seed,
        vocab_size=params["vocab_size"],
        ratios=tuple(params["ratios"]),
        base_noises=tuple(params["base_noises"]),
    )
    rep = markov.run_synthetic_experiment(configs, parallelism=parallelism)
    rep.config = _echo("synthetic", params, seed)
    return rep


# ---------------------------------------------------------------------------
# toy training
# ---------------------------------------------------------------------------


@dataclass
class TrainedToy:
    spec: toymodel.SourceSpec
    model: toymodel.ToyModel
    result: toymodel.TrainResult


def make_source(params, seed, coupling=None) -> toymodel.SourceSpec:
    c = params["coupling"] if coupling is None else coupling
    return toymodel.coupled_source(
        params["vocab_size"],
        params["order"],
        rng=stream(seed, SOURCE, int(round(c * 1000))),
        coupling=c,
        concentration=params["concentration"],
    )


def train_toy(params, seed, s=None, spec=None) -> TrainedToy:
    spec = make_source(params, seed) if spec is None else spec
    model = toymodel.ToyModel(
        spec.vocab_size, context=params.get("context"), window=params["window"], order=spec.order, lr=params["lr"]
    )
    result = toymodel.train(
        model,
        spec,
        params["steps"],
        params["s"] if s is None else s,
        params["q"],
        params["window"],
        stream(seed, TRAIN),
        seq_len=params["seq_len"],
        reduction=params["reduction"],
    )
    return TrainedToy(spec, model, result)


def exact_cross_entropy(spec, sequences, ell, min_context) -> float:
    model = toymodel.SourceModel(spec)
    total, count = 0.0, 0
    for seq in sequences:
        seq = [int(t) for t in seq]
        for j in range(max(min_context, spec.order), len(seq) - ell):
            p = model.ptp(seq[:j], seq[j + 1 : j + 1 + ell]) if ell else model.ntp(seq[:j])
            total -= math.log(p[seq[j]])
            count += 1
    return total / count


def run_train_toy(params, seed, out_dir=None) -> ExperimentReport:
    trained = train_toy(params, seed)
    val = toymodel.sample_sequences(trained.spec, params["val_sequences"], params["seq_len"], stream(seed, VALID))
    summary = {"validation": toymodel.validation_losses(trained.model, val), "rows": trained.model.num_rows}
    if params["baseline"]:
        base = train_toy(params, seed, s=0.0, spec=trained.spec)
        summary["baseline_validation_ntp"] = toymodel.validation_losses(base.model, val)[0]
        summary["ntp_gap"] = summary["validation"][0] - summary["baseline_validation_ntp"]
    summary["exact"] = {
        ell: exact_cross_entropy(trained.spec, val[:50], ell, trained.model.context) for ell in range(params["window"])
    }
    if out_dir is not None:
        trained.model.save(f"{out_dir}/train-toy_model.jsonl")
    heads = sorted(trained.result.ptp_traces)
    columns = ["step", "ntp_loss"] + [f"ptp_{h}_loss" for h in heads]
    records = [dict(zip(columns, row)) for row in trained.result.trace_rows()]
    rep = ExperimentReport("train-toy", _echo("train-toy", params, seed), columns, records, summary=summary)
    return finalize(rep)


# ---------------------------------------------------------------------------
# error analyses
# ---------------------------------------------------------------------------


def sampler_config(params, seed) -> sampler.SamplerConfig:
    return sampler.SamplerConfig(
        window=params.get("sample_window", 2),
        iterations=params.get("iterations", 1),
        temperature=params["temperature"],
        greedy_ptp=params["greedy_ptp"],
        confidence=params["confidence"],
        seed=seed,
    ).validate()


def held_out(trained: TrainedToy, params, seed, k_max, config):
    seqs = sampler.held_out_stream(trained.spec, params["num_tokens"], stream(seed, HELD_OUT), params["min_context"])
    return sampler.held_out_probs(trained.model, seqs, k_max, config, params["min_context"])


def run_tv_table(params, seed) -> ExperimentReport:
    ks = [int(k) for k in params["ks"]]
    config = sampler_config(params, seed)
    columns = ["k"]
    table = {k: {"k": k} for k in ks}
    summary = {}
    for coupling in params["couplings"]:
        name = f"coupled_{coupling:g}"
        spec = make_source(params, seed, coupling)
        trained = train_toy(params, seed, spec=spec)
        held = held_out(trained, params, seed, max(ks), config)
        for err in sampler.tv_errors_from_probs(held, ks):
            table[err.k][name] = err.mean
            table[err.k][f"{name}_se"] = err.stderr
        summary[name] = {"tokens": held.count, "skipped": held.skipped, "method": "exact propagation"}
        columns += [name, f"{name}_se"]
    rep = ExperimentReport("tv-table", _echo("tv-table", params, seed), columns, [table[k] for k in ks], summary=summary)
    return finalize(rep)


def run_improve_hist(params, seed) -> ExperimentReport:
    config = sampler_config(params, seed)
    trained = train_toy(params, seed)
    held = held_out(trained, params, seed, 1, config)
    records = [
        {"token": i, "p0": float(p0), "p1": float(p1), "diff": float(p1 - p0)} for i, (p0, p1) in enumerate(held.probs)
    ]
    rep = ExperimentReport(
        "improve-hist",
        _echo("improve-hist", params, seed),
        ["token", "p0", "p1", "diff"],
        records,
        summary={"skipped": held.skipped},
    )
    return finalize(rep)


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------


def run_bounds(params, seed) -> ExperimentReport:
    rows = markov.bound_suite(params["trials"], params["delta"], seed, params["vocab_size"])
    tight = markov.tight_ntp_bundle()
    _, err, _ = markov.ntp_joint_error(tight)
    rates = markov.first_order_residuals(
        markov.prob.random_joint(params["vocab_size"], stream(seed, SOURCE)), params["deltas"], stream(seed, TRAIN)
    )
    slack = 1.0 + 10.0 * params["delta"]
    summary = {
        "tightness": {"ntp_l1": markov.prob.l1_norm(err), "ntp_bound": markov.ntp_error_bound(tight)},
        "first_order": rates,
        "violations": {
            name: sum(r[name + "_l1" if name != "kernel" else "kernel_err"] > r[name + "_bound"] * slack for r in rows)
            for name in ("ntp", "kernel", "rpt")
        },
    }
    rep = ExperimentReport("bounds", _echo("bounds", params, seed), list(markov.BOUND_COLUMNS), rows, summary=summary)
    return finalize(rep)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def source_log_likelihood(spec, tokens, start) -> float:
    model = toymodel.SourceModel(spec)
    return float(sum(math.log(max(model.ntp(tokens[:j])[tokens[j]], 1e-300)) for j in range(start, len(tokens))))


def run_sample(params, seed, model=None) -> ExperimentReport:
    spec = make_source(params, seed)
    if model is None:
        model = train_toy(params, seed, spec=spec).model
    config = sampler_config(params, seed)
    prompts = toymodel.sample_sequences(spec, params["samples"], params["prompt_length"], stream(seed, PROMPTS))
    records = []
    for i, prompt in enumerate(prompts):
        prompt = [int(t) for t in prompt]
        trace = sampler.rpt_generate(model, prompt, params["length"], config, stream(seed, SAMPLE, i))
        records.append(
            {
                "sample": i,
                "prompt": prompt,
                "initial": trace.initial,
                "final": trace.final_tokens[len(prompt) :],
                "replacements": len(trace.replacements),
                "log_likelihood": source_log_likelihood(spec, trace.final_tokens, len(prompt)),
            }
        )
    columns = ["sample", "prompt", "initial", "final", "replacements", "log_likelihood"]
    return finalize(ExperimentReport("sample", _echo("sample", params, seed), columns, records))


RUNNERS = {
    "synthetic": run_synthetic,
    "train-toy": run_train_toy,
    "tv-table": run_tv_table,
    "improve-hist": run_improve_hist,
    "bounds": run_bounds,
    "sample": run_sample,
}
