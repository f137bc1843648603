"""Command-line interface: ``dplrprop <command> ...``.

Commands: ``propagate``, ``sample``, ``score``, ``compare``, ``bench`` and
``gen-model``. Validation failures exit with status 1 and I/O failures
with status 2, each with a single-line message on stderr. The README
documents the report schema and the bench CSV columns.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from dplrprop import __version__, scores
from dplrprop._linalg import rows_times
from dplrprop.config import TAG_BENCH, TAG_GEN_MODEL, PropagationConfig, stream
from dplrprop.decompose import decompose_arrays, dense_operator
from dplrprop.dplr import DplrMatrix, GaussianState
from dplrprop.errors import ModelFileNotFound
from dplrprop.moments import (
    ACTIVATIONS,
    Activation,
    Conv2dDet,
    Conv2dMeanField,
    Dropout,
    Flatten,
    LinearDet,
    LinearMeanField,
    LinearRowCov,
)
from dplrprop.network import Model, load_model, propagate_batch, save_model
from dplrprop.oracle import DENSE_CAP, McConfig, dense_propagate, empirical_moments, mc_forward_batch, sample_jsd

TOOL = "dplrprop"
REPORT_VERSION = 1
SCORE_NAMES = ("jsd", "entropy", "maxprob", "mahalanobis", "gaussian_nll")
DEFAULT_SCORES = "jsd,entropy,maxprob"
BENCH_HEADER = ("width", "rank", "repeat", "phase", "nanos")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# file helpers


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_array(path):
    """An inline JSON array, or raw little-endian float32 with a ``<file>.json`` shape sidecar."""
    path = Path(path)
    if path.suffix == ".json":
        return np.asarray(_read_json(path), dtype=np.float64)
    meta = _read_json(str(path) + ".json")
    shape = tuple(int(s) for s in meta["shape"])
    raw = path.read_bytes()
    if len(raw) != 4 * int(np.prod(shape)):
        raise ValueError(f"{path.name}: {len(raw)} bytes do not match sidecar shape {list(shape)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def read_inputs(path, model: Model) -> np.ndarray:
    """Batch ``(B, input_dim)``; a single input may omit the batch axis."""
    arr = read_array(path)
    shape = model.input_shape
    if arr.shape == shape or (arr.ndim == 1 and arr.size == model.input_dim):
        arr = arr[None]
    if arr.ndim < 2 or int(np.prod(arr.shape[1:])) != model.input_dim or (arr.ndim > 2 and arr.shape[1:] != shape):
        raise ValueError(f"{path}: array shape {list(arr.shape)} does not match model input {list(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite input value")
    return arr.reshape(arr.shape[0], -1)


def _load(path, weight_rank=None):
    try:
        return load_model(path, weight_rank)
    except ModelFileNotFound as exc:
        raise FileNotFoundError(str(exc)) from None


def _write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


# ----------------------------------------------------------------------------
# scoring


def _parse_scores(text, have_targets, have_reference):
    names = [s.strip() for s in text.split(",") if s.strip()]
    for name in names:
        if name not in SCORE_NAMES:
            raise UsageError(f"unknown score {name!r}; choose from {', '.join(SCORE_NAMES)}")
    if "gaussian_nll" in names and not have_targets:
        raise UsageError("score gaussian_nll needs --targets")
    if "mahalanobis" in names and not have_reference:
        raise UsageError("score mahalanobis needs --reference")
    return names


def _read_targets(path, count):
    if path is None:
        return None
    t = read_array(path)
    t = t.reshape(t.shape[0], -1) if t.ndim > 1 else t.reshape(-1, 1)
    if t.shape[0] != count:
        raise ValueError(f"{path}: {t.shape[0]} targets for {count} inputs")
    return t


def _read_labels(path, count):
    if path is None:
        return None
    labels = np.asarray(_read_json(path))
    if labels.shape != (count,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"{path}: expected {count} integer labels")
    return labels


def _reference(args):
    if args.reference is None:
        return None
    ref = _read_json(args.reference)
    means = np.asarray([item["mean"] for item in ref["items"]], dtype=np.float64)
    labels = None
    if args.reference_labels is not None:
        labels = _read_labels(args.reference_labels, len(means))
    return scores.mahalanobis_fit(means, labels)


def gaussian_scores(state: GaussianState, names, targets=None, ref=None, jitter=0.0):
    """Per-item score dicts for a batched state."""
    cols = {}
    if "jsd" in names:
        cols["jsd"] = scores.jsd_approx(state)
    if "entropy" in names:
        cols["entropy"] = scores.entropy(state)
    if "maxprob" in names:
        cols["maxprob"] = scores.maxprob(state)
    if "mahalanobis" in names:
        cols["mahalanobis"] = scores.mahalanobis_score(ref, state)
    if "gaussian_nll" in names:
        cols["gaussian_nll"] = scores.gaussian_nll(state, targets, jitter)
    n = state.mean.shape[0]
    return [{k: _num(v[i]) for k, v in cols.items()} for i in range(n)]


def sample_scores(samples, names, targets=None, ref=None, jitter=0.0):
    """Per-item score dicts from MC output samples ``(B, N, d)``."""
    out = []
    for i, s in enumerate(samples):
        probs = scores.softmax(s)
        pbar = probs.mean(axis=0)
        row = {}
        if "jsd" in names:
            row["jsd"] = sample_jsd(probs) if len(s) > 1 else 0.0
        if "entropy" in names:
            row["entropy"] = float(scores._entropy(pbar))
        if "maxprob" in names:
            row["maxprob"] = float(pbar.max())
        if "mahalanobis" in names:
            row["mahalanobis"] = float(scores.mahalanobis_score(ref, s.mean(axis=0)))
        if "gaussian_nll" in names:
            if len(s) > 1:
                em = empirical_moments(s)
                row["gaussian_nll"] = scores.gaussian_nll_dense(em.mean, em.cov, targets[i], jitter)
            else:
                row["gaussian_nll"] = None
        out.append({k: _num(v) if v is not None else None for k, v in row.items()})
    return out


def aggregate_metrics(probs, state, labels, targets):
    agg = {}
    if labels is not None:
        agg["accuracy"] = scores.accuracy(probs, labels)
        agg["ece"] = scores.ece(probs, labels)
        agg["brier"] = scores.brier(probs, labels)
    if targets is not None:
        agg["coverage95"] = scores.coverage95(state, targets)
    return agg


# ----------------------------------------------------------------------------
# reports


def _config_echo(args, extra):
    echo = {"model": args.model, "input": args.input, "scores": args.scores}
    for key in ("labels", "targets", "reference", "reference_labels", "jitter"):
        if getattr(args, key, None) is not None:
            echo[key] = getattr(args, key)
    echo.update(extra)
    return echo


def _report(method, config, model, items, aggregate, timings, args):
    rep = {
        "tool": TOOL,
        "version": __version__,
        "report_version": REPORT_VERSION,
        "method": method,
        "config": config,
        "output_shape": list(model.output_shape),
        "items": items,
    }
    if aggregate:
        rep["aggregate"] = aggregate
    if not args.no_timings:
        rep["timings_ns"] = timings
    return rep


def _prop_config(args):
    return PropagationConfig(rank=args.rank, iterations=args.iters, act_mode=args.act_mode,
                             weight_rank=args.weight_rank, seed=args.seed, ritz=not args.literal,
                             solve_jitter=args.jitter or 0.0)


def _stack_states(states):
    width = max(s.cov.rank for s in states)
    factors = [np.pad(s.cov.factor, ((0, 0), (0, width - s.cov.rank))) for s in states]
    return GaussianState(np.stack([s.mean for s in states]),
                         DplrMatrix(np.stack([s.cov.lam for s in states]), np.stack(factors)))


def cmd_propagate(args):
    t0 = time.perf_counter_ns()
    model = _load(args.model, args.weight_rank)
    t1 = time.perf_counter_ns()
    xs = read_inputs(args.input, model)
    labels = _read_labels(args.labels, len(xs))
    targets = _read_targets(args.targets, len(xs))
    names = _parse_scores(args.scores, targets is not None, args.reference is not None)
    ref = _reference(args)
    cfg = _prop_config(args)
    t2 = time.perf_counter_ns()
    states = propagate_batch(model, xs, cfg, workers=args.workers)
    t3 = time.perf_counter_ns()
    batch = _stack_states(states)
    per_item = gaussian_scores(batch, names, targets, ref, cfg.solve_jitter)
    agg = aggregate_metrics(scores.softmax(batch.mean), batch, labels, targets)
    t4 = time.perf_counter_ns()
    items = []
    for i, st in enumerate(states):
        item = {"index": i, "mean": st.mean.tolist(), "variance": st.variance().tolist(), "scores": per_item[i]}
        if not args.no_cov:
            item["covariance"] = {"lambda": st.cov.lam.tolist(), "factor": st.cov.factor.tolist()}
        items.append(item)
    config = _config_echo(args, {"propagation": cfg.to_dict()})
    timings = {"load_model": t1 - t0, "read_input": t2 - t1, "propagate": t3 - t2, "scores": t4 - t3}
    _write_text(args.out, _dump(_report("dplr", config, model, items, agg, timings, args)))


def _mc_all(model, xs, samples, seed, workers):
    mc = McConfig(samples, seed)
    workers = max(1, min(int(workers), len(xs)))
    if workers == 1:
        return mc_forward_batch(model, xs, mc)
    size = math.ceil(len(xs) / workers)
    starts = list(range(0, len(xs), size))
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda s: mc_forward_batch(model, xs[s:s + size], mc, first_index=s), starts))
    return np.concatenate(parts, axis=0)


def cmd_sample(args):
    t0 = time.perf_counter_ns()
    model = _load(args.model)
    t1 = time.perf_counter_ns()
    xs = read_inputs(args.input, model)
    labels = _read_labels(args.labels, len(xs))
    targets = _read_targets(args.targets, len(xs))
    names = _parse_scores(args.scores, targets is not None, args.reference is not None)
    ref = _reference(args)
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    t2 = time.perf_counter_ns()
    samples = _mc_all(model, xs, args.samples, args.seed, args.workers)
    t3 = time.perf_counter_ns()
    per_item = sample_scores(samples, names, targets, ref, args.jitter or 0.0)
    means = samples.mean(axis=1)
    var = samples.var(axis=1, ddof=1) if args.samples > 1 else np.zeros_like(means)
    probs = scores.softmax(samples).mean(axis=1)
    agg = aggregate_metrics(probs, GaussianState(means, DplrMatrix.diag(var)), labels, targets)
    t4 = time.perf_counter_ns()
    items = []
    for i in range(len(xs)):
        item = {"index": i, "mean": means[i].tolist(), "scores": per_item[i]}
        if args.samples > 1:
            item["variance"] = var[i].tolist()
            if args.include_cov:
                item["covariance"] = {"dense": empirical_moments(samples[i]).cov.tolist()}
        items.append(item)
    config = _config_echo(args, {"samples": args.samples, "seed": args.seed})
    timings = {"load_model": t1 - t0, "read_input": t2 - t1, "sample": t3 - t2, "scores": t4 - t3}
    _write_text(args.out, _dump(_report("mc", config, model, items, agg, timings, args)))


def state_from_item(item):
    """Rebuild a GaussianState from one report item (DPLR, dense or diagonal covariance)."""
    mean = np.asarray(item["mean"], dtype=np.float64)
    cov = item.get("covariance")
    if cov is not None and "lambda" in cov:
        factor = np.asarray(cov["factor"], dtype=np.float64).reshape(mean.size, -1)
        return GaussianState(mean, DplrMatrix(np.asarray(cov["lambda"], dtype=np.float64), factor))
    if cov is not None and "dense" in cov:
        w, e = np.linalg.eigh(np.asarray(cov["dense"], dtype=np.float64))
        return GaussianState(mean, DplrMatrix(np.zeros(mean.size), e * np.sqrt(np.maximum(w, 0.0))))
    var = np.asarray(item.get("variance", np.zeros(mean.size)), dtype=np.float64)
    return GaussianState(mean, DplrMatrix.diag(var))


def cmd_score(args):
    rep = _read_json(args.report)
    items = rep.get("items")
    if not isinstance(items, list) or not items:
        raise ValueError(f"{args.report}: report has no items")
    states = [state_from_item(it) for it in items]
    labels = _read_labels(args.labels, len(states))
    targets = _read_targets(args.targets, len(states))
    names = _parse_scores(args.scores, targets is not None, args.reference is not None)
    ref = _reference(args)
    t0 = time.perf_counter_ns()
    batch = _stack_states(states)
    per_item = gaussian_scores(batch, names, targets, ref, args.jitter or 0.0)
    agg = aggregate_metrics(scores.softmax(batch.mean), batch, labels, targets)
    t1 = time.perf_counter_ns()
    out = {
        "tool": TOOL,
        "version": __version__,
        "report_version": REPORT_VERSION,
        "method": rep.get("method"),
        "config": {"report": args.report, "scores": args.scores, "source_config": rep.get("config")},
        "items": [{"index": i, "scores": s} for i, s in enumerate(per_item)],
    }
    if agg:
        out["aggregate"] = agg
    if not args.no_timings:
        out["timings_ns"] = {"scores": t1 - t0}
    _write_text(args.out, _dump(out))


# ----------------------------------------------------------------------------
# compare


def _best_time(fn, repeat):
    best, result = None, None
    for _ in range(repeat):
        t0 = time.perf_counter_ns()
        result = fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return best, result


def _rel(a, b):
    na = np.linalg.norm(a - b)
    nb = np.linalg.norm(b)
    if nb == 0:
        return 0.0 if na == 0 else math.inf
    return float(na / nb)


def _within_cap(model):
    return max([model.input_dim] + [int(np.prod(s)) for s in model.shapes()]) <= DENSE_CAP


COMPARE_COLUMNS = ("method", "wall_ns", "mean_dev", "var_dev", "cov_dev")


def cmd_compare(args):
    model = _load(args.model, args.weight_rank)
    xs = read_inputs(args.input, model)
    labels = _read_labels(args.labels, len(xs))
    names = _parse_scores(args.scores, False, False)
    ood = read_inputs(args.ood_inputs, model) if args.ood_inputs else None
    cfg = _prop_config(args)
    if args.samples < 2:
        raise UsageError("--samples must be >= 2")
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    model.prepare(cfg)

    det_t, _ = _best_time(lambda: model.forward(xs, stable=False), args.repeat)
    det_out = model.forward(xs)
    fast_t, fast_states = _best_time(lambda: propagate_batch(model, xs, cfg, workers=args.workers), args.repeat)
    mc_t, mc = _best_time(lambda: _mc_all(model, xs, args.samples, args.seed, args.workers), args.repeat)

    oracle = None
    if not args.no_oracle and _within_cap(model):
        oracle = [dense_propagate(model, x, cfg.act_mode) for x in xs]

    fast_batch = _stack_states(fast_states)
    fast_dense = [np.diag(s.cov.lam) + s.cov.factor @ s.cov.factor.T for s in fast_states]
    mc_moments = [empirical_moments(s) for s in mc]
    rows = {
        "deterministic": {"mean": det_out, "cov": [np.zeros((det_out.shape[1],) * 2)] * len(xs),
                          "wall": det_t, "probs": scores.softmax(det_out)},
        "dplr": {"mean": fast_batch.mean, "cov": fast_dense, "wall": fast_t,
                 "probs": scores.softmax(fast_batch.mean),
                 "scores": gaussian_scores(fast_batch, names)},
        "mc": {"mean": np.stack([m.mean for m in mc_moments]), "cov": [m.cov for m in mc_moments],
               "wall": mc_t, "probs": scores.softmax(mc).mean(axis=1),
               "scores": sample_scores(mc, names)},
    }
    if oracle is not None:
        o_mean = np.stack([o[0] for o in oracle])
        o_state = GaussianState(o_mean, DplrMatrix(np.zeros_like(o_mean), np.stack(
            [_psd_factor(o[1]) for o in oracle])))
        rows["dense"] = {"mean": o_mean, "cov": [o[1] for o in oracle], "wall": None,
                         "probs": scores.softmax(o_mean), "scores": gaussian_scores(o_state, names)}
    ood_scores = _ood_scores(model, ood, cfg, args, names) if ood is not None else None

    table = []
    for method, r in rows.items():
        row = {"method": method, "wall_ns": None if args.no_timings else r["wall"]}
        if oracle is not None:
            row["mean_dev"] = float(np.mean([_rel(r["mean"][i], oracle[i][0]) for i in range(len(xs))]))
            row["var_dev"] = float(np.mean([_rel(np.diag(r["cov"][i]), np.diag(oracle[i][1])) for i in range(len(xs))]))
            row["cov_dev"] = float(np.mean([_rel(r["cov"][i], oracle[i][1]) for i in range(len(xs))]))
        else:
            row.update(mean_dev=None, var_dev=None, cov_dev=None)
        for name in names:
            vals = [s[name] for s in r.get("scores", [])]
            row[f"score_{name}"] = float(np.mean(vals)) if vals else None
            if ood_scores is not None and method in ood_scores and vals:
                row[f"auroc_{name}"] = scores.auroc(_oriented(name, vals), _oriented(name, ood_scores[method][name]))
            else:
                row[f"auroc_{name}"] = None
        if labels is not None:
            row.update(accuracy=scores.accuracy(r["probs"], labels), ece=scores.ece(r["probs"], labels),
                       brier=scores.brier(r["probs"], labels))
        table.append({k: (_num(v) if isinstance(v, float) else v) for k, v in row.items()})

    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(table[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in table:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        _write_text(args.out, buf.getvalue())
    else:
        config = {"model": args.model, "input": args.input, "ood_inputs": args.ood_inputs, "labels": args.labels,
                  "samples": args.samples, "repeat": args.repeat, "scores": args.scores,
                  "propagation": cfg.to_dict()}
        _write_text(args.out, _dump({"tool": TOOL, "version": __version__, "report_version": REPORT_VERSION,
                                     "config": config, "methods": table}))


def _psd_factor(cov):
    w, e = np.linalg.eigh(cov)
    return e * np.sqrt(np.maximum(w, 0.0))


def _oriented(name, vals):
    """Scores oriented so that larger means more likely out of distribution."""
    vals = np.asarray(vals, dtype=np.float64)
    return -vals if name == "maxprob" else vals


def _ood_scores(model, ood, cfg, args, names):
    fast = _stack_states(propagate_batch(model, ood, cfg, workers=args.workers))
    mc = _mc_all(model, ood, args.samples, args.seed + 1, args.workers)
    to_cols = lambda rows: {n: [r[n] for r in rows] for n in names}  # noqa: E731
    return {"dplr": to_cols(gaussian_scores(fast, names)), "mc": to_cols(sample_scores(mc, names))}


# ----------------------------------------------------------------------------
# bench


def bench_rows(widths, ranks, repeat, seed, iters=3, batch=32):
    """Timings of one fast_dplr call and one deterministic product per (width, rank, repeat)."""
    rows = []
    for width in widths:
        for rank in ranks:
            if rank > width:
                raise UsageError(f"rank {rank} exceeds width {width}")
            for rep in range(repeat):
                rng = stream(seed, TAG_BENCH, width, rank, rep)
                w = rng.standard_normal((width, width)) / math.sqrt(width)
                lam = rng.random((batch, width))
                factor = rng.standard_normal((batch, width, rank)) / math.sqrt(width)
                init = rng.standard_normal((width, rank))
                x = rng.standard_normal((batch, width))
                op = dense_operator(w)
                t0 = time.perf_counter_ns()
                decompose_arrays(op, lam, factor, rank, iters, init=init)
                t1 = time.perf_counter_ns()
                rows_times(x, w.T)
                t2 = time.perf_counter_ns()
                rows.append((width, rank, rep, "fast_dplr", t1 - t0))
                rows.append((width, rank, rep, "matvec", t2 - t1))
    return rows


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError(f"list entries must be positive integers, got {text!r}")
    return vals


def cmd_bench(args):
    if args.repeat < 1 or args.batch < 1 or args.iters < 1:
        raise UsageError("--repeat, --batch and --iters must be >= 1")
    rows = bench_rows(_int_list(args.widths), _int_list(args.ranks), args.repeat, args.seed, args.iters, args.batch)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_HEADER)
    for row in rows:
        writer.writerow(row if not args.no_timings else row[:4] + ("",))
    _write_text(args.out, buf.getvalue())


# ----------------------------------------------------------------------------
# gen-model


_TOKEN = re.compile(r"[^,]+")


class ArchError(ValueError):
    def __init__(self, msg, pos, token):
        super().__init__(f"arch spec: {msg} at position {pos} (token {token!r})")
        self.pos = pos


def _dims(text, n, pos, token):
    parts = text.split("x")
    if len(parts) != n or not all(p.isdigit() and int(p) > 0 for p in parts):
        raise ArchError(f"expected {n} positive integers separated by 'x'", pos, token)
    return [int(p) for p in parts]


def parse_arch(spec):
    """Split an arch string into ``(position, token)`` pairs (1-based positions)."""
    if not spec or not spec.strip():
        raise ArchError("empty spec", 1, spec)
    out = []
    for m in _TOKEN.finditer(spec):
        tok = m.group(0)
        if tok != tok.strip() or not tok:
            raise ArchError("whitespace inside token", m.start() + 1, tok)
        out.append((m.start() + 1, tok))
    if spec.startswith(",") or spec.endswith(",") or ",," in spec:
        pos = spec.find(",,") + 2 if ",," in spec else (1 if spec.startswith(",") else len(spec))
        raise ArchError("empty token", pos, "")
    return out


def build_model(spec, seed) -> Model:
    """Random model from an arch string such as ``linear:784x128,relu,dropout:0.1,linear:128x10``."""
    tokens = parse_arch(spec)
    shape = input_shape = None
    if tokens[0][1].startswith("input:"):
        pos, tok = tokens.pop(0)
        dims = tok[len("input:"):].split("x")
        shape = input_shape = tuple(_dims(tok[len("input:"):], len(dims), pos, tok))
        if len(shape) not in (1, 3):
            raise ArchError("input must be N or CxHxW", pos, tok)
    if not tokens:
        raise ArchError("no layers", len(spec), spec)
    layers = []
    for li, (pos, tok) in enumerate(tokens):
        rng = stream(seed, TAG_GEN_MODEL, li)
        name, _, rest = tok.partition(":")
        base, _, suffix = (rest if rest else name).partition("~")
        if not rest:
            name = base
        if suffix and suffix != "mf" and not re.fullmatch(r"rc[1-9][0-9]*", suffix):
            raise ArchError(f"unknown suffix '~{suffix}'", pos, tok)
        if name == "linear":
            n_in, n_out = _dims(base, 2, pos, tok)
            if shape is None:
                shape = input_shape = (n_in,)
            if len(shape) != 1 or shape[0] != n_in:
                raise ArchError(f"linear input {n_in} does not match incoming shape {list(shape)}", pos, tok)
            w = rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
            b = 0.1 * rng.standard_normal(n_out)
            if suffix == "mf":
                w_var = rng.uniform(0.5, 1.5, (n_out, n_in)) * 0.01 / n_in
                b_var = rng.uniform(0.5, 1.5, n_out) * 0.01
                layers.append(LinearMeanField(w, b, w_var, b_var))
            elif suffix:
                s = int(suffix[2:])
                f = rng.standard_normal((n_out, n_in, s)) * (0.1 / math.sqrt(n_in * s))
                layers.append(LinearRowCov(w, b, f))
            else:
                layers.append(LinearDet(w, b))
        elif name == "conv":
            m = re.fullmatch(r"(\d+)x(\d+)((?:/[sp]\d+)*)", base)
            if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
                raise ArchError("conv expects OUTxK with optional /sN and /pN", pos, tok)
            if shape is None or len(shape) != 3:
                raise ArchError("conv needs a CxHxW input (declare input:CxHxW first)", pos, tok)
            o, k = int(m.group(1)), int(m.group(2))
            opts = dict((t[0], int(t[1:])) for t in m.group(3).split("/") if t)
            stride, padding = opts.get("s", 1), opts.get("p", 0)
            if stride < 1:
                raise ArchError("stride must be >= 1", pos, tok)
            fan_in = shape[0] * k * k
            kern = rng.standard_normal((o, shape[0], k, k)) / math.sqrt(fan_in)
            bias = 0.1 * rng.standard_normal(o)
            if suffix == "mf":
                layers.append(Conv2dMeanField(kern, bias, rng.uniform(0.5, 1.5, kern.shape) * 0.01 / fan_in,
                                              rng.uniform(0.5, 1.5, o) * 0.01, stride=stride, padding=padding))
            elif suffix:
                raise ArchError("row-covariance conv is not supported", pos, tok)
            else:
                layers.append(Conv2dDet(kern, bias, stride, padding))
        elif name == "dropout":
            try:
                p = float(base)
            except ValueError:
                raise ArchError("dropout expects a probability", pos, tok) from None
            if not 0.0 <= p < 1.0:
                raise ArchError("dropout probability must lie in [0, 1)", pos, tok)
            layers.append(Dropout(p))
        elif name in ACTIVATIONS and not suffix:
            layers.append(Activation(name))
        elif name == "flatten" and not suffix:
            layers.append(Flatten())
        else:
            raise ArchError(f"unknown layer {name!r}" + (f" with suffix '~{suffix}'" if suffix else ""), pos, tok)
        if shape is None:
            raise ArchError("input shape unknown; start with input:... or a linear layer", pos, tok)
        try:
            shape = tuple(layers[-1].output_shape(shape))
        except ValueError as exc:
            raise ArchError(str(exc), pos, tok) from None
    # round-trip through float32 so the in-memory model equals the saved one
    return Model([_as_f32(layer) for layer in layers], input_shape,
                 name="generated", metadata={"arch": spec, "seed": seed})


def _as_f32(layer):
    changes = {}
    for f in fields(layer):
        val = getattr(layer, f.name)
        if isinstance(val, np.ndarray) and val.dtype.kind == "f":
            changes[f.name] = val.astype(np.float32).astype(np.float64)
    return replace(layer, **changes) if changes else layer


def cmd_gen_model(args):
    model = build_model(args.arch, args.seed)
    save_model(model, args.out)


# ----------------------------------------------------------------------------
# argument parsing


def _add_common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, default=None)
    p.add_argument("--no-timings", action="store_true", help="omit wall-clock timings (byte-stable output)")


def _add_model_input(p):
    p.add_argument("--model", required=True)
    p.add_argument("--input", "--inputs", dest="input", required=True)
    p.add_argument("--workers", type=int, default=1)


def _add_propagation(p):
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--act-mode", choices=("taylor", "gauss"), default="gauss")
    p.add_argument("--weight-rank", type=int, default=None)
    p.add_argument("--literal", action="store_true",
                   help="use the column-norm eigenvalue estimate instead of the Ritz step")


def _add_scoring(p):
    p.add_argument("--scores", default=DEFAULT_SCORES)
    p.add_argument("--labels", default=None)
    p.add_argument("--targets", default=None)
    p.add_argument("--reference", default=None, help="report whose item means fit the Mahalanobis reference")
    p.add_argument("--reference-labels", default=None)
    p.add_argument("--jitter", type=float, default=None)


def build_parser():
    parser = _Parser(prog=TOOL, description="Sample-free moment propagation for Bayesian networks.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("propagate", help="fast DPLR propagation")
    _add_model_input(p)
    _add_propagation(p)
    _add_scoring(p)
    _add_common(p)
    p.add_argument("--no-cov", action="store_true", help="omit lambda and factor from the report")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("sample", help="Monte-Carlo forward passes")
    _add_model_input(p)
    _add_scoring(p)
    _add_common(p)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--include-cov", action="store_true", help="include the dense empirical covariance")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("score", help="recompute scores from a propagate or sample report")
    p.add_argument("--report", required=True)
    _add_scoring(p)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="fast path vs Monte Carlo vs dense oracle")
    _add_model_input(p)
    _add_propagation(p)
    _add_common(p, out_required=False)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--scores", default=DEFAULT_SCORES)
    p.add_argument("--labels", default=None)
    p.add_argument("--ood-inputs", default=None)
    p.add_argument("--repeat", type=int, default=3, help="timing repeats; the minimum is reported")
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--jitter", type=float, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="timing CSV for fast_dplr and matvec")
    p.add_argument("--widths", required=True)
    p.add_argument("--ranks", required=True)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--batch", type=int, default=32, help="covariances decomposed per call")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-model", help="write a seeded random model directory")
    p.add_argument("--arch", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        args.func(args)
    except OSError as exc:
        _fail(f"{type(exc).__name__}: {exc}")
        return 2
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, KeyError, TypeError) as exc:
        _fail(str(exc) if isinstance(exc, UsageError) else f"{type(exc).__name__}: {exc}")
        return 1
    return 0


def _fail(msg):
    sys.stderr.write(f"{TOOL}: error: {' '.join(str(msg).split())}\n")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
