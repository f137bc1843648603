"""Acceptance criteria. Each test prints one PASS/FAIL line, then asserts it."""

import csv
import io
import json

import numpy as np
import pytest

from dplrprop import dplr
from dplrprop.cli import main
from dplrprop.config import PropagationConfig
from dplrprop.decompose import DecomposeConfig, dense_operator, fast_dplr, lambda_step
from dplrprop.dplr import DplrMatrix, GaussianState
from dplrprop.moments import (
    Activation,
    Dropout,
    LinearDet,
    LinearMeanField,
    LinearRowCov,
    prop_dropout,
    prop_linear_meanfield,
)
from dplrprop.network import Model, propagate
from dplrprop.oracle import McConfig, dense_propagate, empirical_moments, mc_forward, sample_jsd
from dplrprop.scores import jsd_approx, softmax

from conftest import random_dplr, random_pipeline, rel_fro


@pytest.fixture
def verdict(capsys):
    def emit(num, name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {num} ({name}): {detail}")
        assert ok, detail
    return emit


def full_rank(model):
    return max([model.input_dim] + [int(np.prod(s)) for s in model.shapes()])


def slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# ---------------------------------------------------------------- 1


def test_c1_dense_oracle_equivalence(verdict):
    cov_err, mean_err = [], []
    for seed in range(24):
        rng = np.random.default_rng(seed)
        conv = seed % 3 == 0
        model = random_pipeline(rng, widths_max=32, depth=int(rng.integers(2, 5)), conv=conv, conv_shape=(1, 4, 4))
        assert full_rank(model) <= 32
        x = rng.standard_normal(model.input_shape)
        out = propagate(model, x, PropagationConfig(rank=full_rank(model), iterations=6))
        mu, cov = dense_propagate(model, x)
        cov_err.append(rel_fro(dplr.to_dense(out.cov), cov))
        mean_err.append(rel_fro(out.mean, mu))
    ok = max(cov_err) <= 1e-3 and max(mean_err) <= 1e-8
    verdict(1, "dense-oracle equivalence", ok,
            f"24 pipelines, max cov rel-Frobenius {max(cov_err):.2e} (<= 1e-3), max mean rel {max(mean_err):.2e} (<= 1e-8)")


# ---------------------------------------------------------------- 2


def wide_pipeline(rng, lo, hi, depth=3):
    """Dropout 0.1 before every linear layer; det, mean-field and row-covariance in turn."""
    n = int(rng.integers(lo, hi + 1))
    input_dim, layers = n, []
    for i in range(depth):
        m = int(rng.integers(lo, hi + 1))
        W, b = rng.standard_normal((m, n)) / np.sqrt(n), 0.1 * rng.standard_normal(m)
        layers.append(Dropout(0.1))
        layers.append([LinearDet(W, b),
                       LinearMeanField(W, b, 0.02 * rng.random((m, n)), 0.01 * rng.random(m)),
                       LinearRowCov(W, b, 0.1 * rng.standard_normal((m, n, 2)))][i % 3])
        if i < depth - 1:
            layers.append(Activation(("relu", "sigmoid", "tanh")[int(rng.integers(3))]))
        n = m
    return Model(layers, (input_dim,))


def mc_deviation(lo, hi):
    worst_mean, worst_var = 0.0, 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        model = wide_pipeline(rng, lo, hi)
        x = rng.standard_normal(model.input_dim)
        out = propagate(model, x, PropagationConfig(rank=full_rank(model), iterations=6, act_mode="gauss"))
        emp = empirical_moments(mc_forward(model, x, McConfig(100_000, seed=seed)))
        worst_mean = max(worst_mean, float(np.max(np.abs(out.mean - emp.mean)) / np.abs(emp.mean).max()))
        var = np.diag(emp.cov)
        worst_var = max(worst_var, float(np.max(np.abs(dplr.diagonal(out.cov) - var) / var)))
    return worst_mean, worst_var


def test_c2_mc_consistency(verdict, capsys):
    narrow = mc_deviation(3, 10)
    with capsys.disabled():
        print(f"\ninfo criterion 2: at widths 3-10 the Gaussian closure gives worst mean dev {narrow[0]:.2%}, "
              f"worst variance dev {narrow[1]:.2%}")
    worst_mean, worst_var = mc_deviation(32, 64)
    ok = worst_mean <= 0.01 and worst_var <= 0.05
    verdict(2, "MC consistency", ok,
            f"5 pipelines of width 32-64, 1e5 samples, worst mean dev {worst_mean:.2%} (<= 1%), "
            f"worst variance dev {worst_var:.2%} (<= 5%)")


# ---------------------------------------------------------------- 3


def recovery(iterations):
    hits, residuals = 0, []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(4, 65))
        s = int(rng.integers(1, 4))
        r = s + int(rng.integers(0, 2))
        target = DplrMatrix(rng.random(m) + 0.1, rng.standard_normal((m, s)))
        out = fast_dplr(dense_operator(np.eye(m)), target, DecomposeConfig(rank=r, iterations=iterations, seed=seed))
        err = rel_fro(dplr.to_dense(out), dplr.to_dense(target))
        residuals.append(err)
        hits += err <= 1e-6
    return hits, residuals


def test_c3_exact_recovery(verdict, capsys):
    with capsys.disabled():
        print(f"\ninfo criterion 3: at K=40 {recovery(40)[0]}/50 instances reach 1e-6")
    hits, residuals = recovery(4)
    ok = hits >= 48
    verdict(3, "exact recovery at K=4", ok,
            f"{hits}/50 instances with residual <= 1e-6 (need >= 48), median residual {np.median(residuals):.2e}")


# ---------------------------------------------------------------- 4


def rho(M, lam, V):
    return np.linalg.norm(M - np.diag(lam) - V @ V.T)


def test_c4_lambda_step_and_baseline(verdict):
    optimal = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        m, r = int(rng.integers(3, 20)), int(rng.integers(1, 4))
        A = rng.standard_normal((m, m))
        M = A @ A.T
        V = rng.standard_normal((m, r))
        s_inv = 1.0 / np.linalg.norm(V, axis=0)
        lam = lambda_step(np.diag(M), V, s_inv)
        Vs = V * np.sqrt(s_inv)
        base = rho(M, lam, Vs)
        good = True
        for i in range(m):
            for delta in (1e-3, -1e-3, 1e-1):
                trial = lam.copy()
                trial[i] = max(trial[i] + delta, 0.0)
                good &= rho(M, trial, Vs) >= base - 1e-12
        optimal += good
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        m, n = int(rng.integers(6, 30)), int(rng.integers(4, 30))
        W = rng.standard_normal((m, n))
        cov = random_dplr(rng, n, int(rng.integers(1, 5)))
        M = W @ dplr.to_dense(cov) @ W.T
        out = fast_dplr(dense_operator(W), cov, DecomposeConfig(rank=min(2, m), seed=seed))
        wins += rho(M, out.lam, out.factor) <= rho(M, np.diag(M), np.zeros((m, 0)))
    ok = optimal == 50 and wins >= 90
    verdict(4, "lambda-step optimality and residual dominance", ok,
            f"perturbation optimal on {optimal}/50 (need 50), beats diagonal baseline on {wins}/100 (need >= 90)")


# ---------------------------------------------------------------- 5


def small_gaussian(rng, d=10):
    sigma = random_dplr(rng, d, 2, lam_scale=0.01)
    return GaussianState(rng.standard_normal(d), DplrMatrix(sigma.lam, 0.1 * sigma.factor))


def test_c5_jsd_concordance(verdict):
    rng = np.random.default_rng(0)
    counts = (10, 100, 1000, 10_000)
    states = [small_gaussian(rng) for _ in range(100)]
    approx = np.array([float(jsd_approx(s)) for s in states])
    sampled = {n: np.array([sample_jsd(softmax(dplr.sample(s, rng, size=n))) for s in states]) for n in counts}
    corr = float(np.corrcoef(approx, sampled[10_000])[0, 1])
    mad = [float(np.mean(np.abs(sampled[n] - approx))) for n in counts]
    monotone = all(a > b for a, b in zip(mad, mad[1:]))
    ok = corr > 0.95 and monotone
    verdict(5, "JSD concordance", ok,
            f"Pearson r {corr:.4f} (> 0.95) at 1e4 samples; MAD over N=10..1e4: "
            + ", ".join(f"{v:.2e}" for v in mad) + (" (monotone)" if monotone else " (not monotone)"))


# ---------------------------------------------------------------- 6

SPEED_ARCH = ",".join(["linear:256x256,relu,dropout:0.1"] * 3 + ["linear:256x256"])


def compare_walls(tmp_path, extra=()):
    model = tmp_path / "mlp"
    if not model.exists():
        assert main(["gen-model", "--arch", SPEED_ARCH, "--seed", "0", "--out", str(model)]) == 0
        xs = np.random.default_rng(0).standard_normal((256, 256))
        (tmp_path / "x.json").write_text(json.dumps(xs.tolist()))
    out = tmp_path / "cmp.json"
    args = ["compare", "--model", str(model), "--inputs", str(tmp_path / "x.json"), "--rank", "2", "--iters", "3",
            "--samples", "10", "--repeat", "5", "--no-oracle", "--out", str(out), *extra]
    assert main(args) == 0
    return {r["method"]: r["wall_ns"] for r in json.loads(out.read_text())["methods"]}


def test_c6_speed(verdict, tmp_path, capsys):
    wall = compare_walls(tmp_path)
    vs_det = wall["dplr"] / wall["deterministic"]
    vs_mc = wall["dplr"] / wall["mc"]
    q = compare_walls(tmp_path, ("--weight-rank", "16"))
    with capsys.disabled():
        print(f"\ninfo criterion 6: with --weight-rank 16 the fast path is {q['dplr'] / q['deterministic']:.1f}x "
              f"deterministic and {q['dplr'] / q['mc']:.2f}x MC-10")
    ok = vs_det <= 4.0 and vs_mc <= 0.5
    verdict(6, "speed", ok,
            f"width 256 depth 4, batch 256, r=2 K=3: fast path {vs_det:.1f}x deterministic (<= 4x), "
            f"{vs_mc:.2f}x MC-10 (<= 0.5x)")


# ---------------------------------------------------------------- 7


def bench_min(widths, ranks, batch, capsys):
    capsys.readouterr()
    assert main(["bench", "--widths", widths, "--ranks", ranks, "--repeat", "5", "--batch", str(batch)]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    best = {}
    for r in rows:
        if r["phase"] == "fast_dplr":
            key = (int(r["width"]), int(r["rank"]))
            best[key] = min(best.get(key, np.inf), int(r["nanos"]))
    return best


def test_c7_complexity_scaling(verdict, capsys):
    by_width = bench_min("128,256,512", "2", 32, capsys)
    by_rank = bench_min("256", "1,2,4,8", 128, capsys)
    wide = bench_min("512,1024,2048", "2", 32, capsys)
    with capsys.disabled():
        print(f"\ninfo criterion 7: width slope over 512-2048 is {slope([k[0] for k in wide], list(wide.values())):.2f}")
    w_slope = slope([k[0] for k in by_width], list(by_width.values()))
    r_slope = slope([k[1] for k in by_rank], list(by_rank.values()))
    ok = 1.6 <= w_slope <= 2.6 and 0.8 <= r_slope <= 1.3
    verdict(7, "complexity scaling", ok,
            f"width slope {w_slope:.2f} (in [1.6, 2.6]), rank slope {r_slope:.2f} (in [0.8, 1.3])")


# ---------------------------------------------------------------- 8


def test_c8_dplr_primitives(verdict):
    rng = np.random.default_rng(8)
    worst = 0.0
    psd = True
    for _ in range(200):
        n, r = int(rng.integers(1, 40)), int(rng.integers(0, 7))
        sigma = random_dplr(rng, n, r, lam_floor=0.05)
        dense = np.diag(sigma.lam) + sigma.factor @ sigma.factor.T
        v, f = rng.standard_normal(n), rng.standard_normal(n)
        scale = np.linalg.norm(dense)
        psd &= np.linalg.eigvalsh(dplr.to_dense(sigma)).min() >= -1e-10 * scale
        worst = max(worst,
                    rel_fro(dplr.to_dense(sigma), dense),
                    rel_fro(dplr.matvec(sigma, v), dense @ v),
                    rel_fro(dplr.diagonal(sigma), np.diag(dense)),
                    abs(dplr.quad_form(sigma, f) - f @ dense @ f) / abs(f @ dense @ f),
                    rel_fro(dplr.solve(sigma, v), np.linalg.solve(dense, v)),
                    rel_fro(dplr.matvec(sigma, dplr.solve(sigma, v)), v),
                    abs(dplr.logdet(sigma) - np.linalg.slogdet(dense)[1]) / max(1.0, abs(np.linalg.slogdet(dense)[1])))
    moment_err = 0.0
    for _ in range(5):
        sigma = random_dplr(rng, 8, 3)
        mu = rng.standard_normal(8)
        z = dplr.sample(GaussianState(mu, sigma), rng, size=200_000)
        em = empirical_moments(z)
        moment_err = max(moment_err, rel_fro(em.cov, dplr.to_dense(sigma)))
    ok = psd and worst <= 1e-10 and moment_err <= 0.02
    verdict(8, "DPLR primitives", ok,
            f"200 instances: PSD {'ok' if psd else 'violated'}, worst dense disagreement {worst:.1e} (<= 1e-10); "
            f"sampling cov error {moment_err:.2%} (<= 2%)")


# ---------------------------------------------------------------- 9


def test_c9_dropout_and_meanfield_closed_forms(verdict):
    n = 1_000_000
    drop = Model([Dropout(0.5)], (1,), input_noise=[1.0])
    closed = prop_dropout(GaussianState(np.array([2.0]), DplrMatrix.diag([1.0])), 0.5)
    emp = empirical_moments(mc_forward(drop, [2.0], McConfig(n, seed=0)))
    d_err = abs(float(dplr.diagonal(closed.cov)[0]) / emp.cov[0, 0] - 1)

    rng = np.random.default_rng(9)
    p = rng.uniform(0.05, 0.5, 4)
    mu, lam = rng.standard_normal(4), rng.random(4)
    closed4 = prop_dropout(GaussianState(mu, DplrMatrix.diag(lam)), p)
    emp4 = empirical_moments(mc_forward(Model([Dropout(p)], (4,), input_noise=lam), mu, McConfig(n, seed=1)))
    d_err = max(d_err, float(np.max(np.abs(dplr.diagonal(closed4.cov) / np.diag(emp4.cov) - 1))))

    layer = LinearMeanField([[0.0]], [0.0], [[1.0]], [0.0])
    mf = prop_linear_meanfield(GaussianState(np.array([1.0]), DplrMatrix.zeros(1)), layer, PropagationConfig(rank=1))
    emp_mf = empirical_moments(mc_forward(Model([layer], (1,)), [1.0], McConfig(n, seed=2)))
    mf_err = abs(float(dplr.diagonal(mf.cov)[0]) / emp_mf.cov[0, 0] - 1)
    ok = d_err <= 0.02 and mf_err <= 0.03
    verdict(9, "dropout and mean-field closed forms", ok,
            f"1e6 samples: dropout variance dev {d_err:.2%} (<= 2%), 1x1 mean-field dev {mf_err:.2%} (<= 3%)")


# ---------------------------------------------------------------- 10


def test_c10_cli_determinism(verdict, tmp_path, monkeypatch):
    arch = "input:1x6x6,conv:2x3/p1,relu,flatten,dropout:0.1,linear:72x12~mf,tanh,linear:12x8~rc2,relu,linear:8x4"
    files = {
        "x.json": np.random.default_rng(0).standard_normal((9, 36)).tolist(),
        "ood.json": (3 * np.random.default_rng(2).standard_normal((9, 36))).tolist(),
        "y.json": np.random.default_rng(1).standard_normal((9, 4)).tolist(),
        "labels.json": [0, 1, 2, 3, 0, 1, 2, 3, 0],
    }
    runs = {
        "propagate": ["propagate", "--model", "model", "--input", "x.json", "--rank", "3", "--seed", "2",
                      "--scores", "jsd,entropy,maxprob,gaussian_nll", "--targets", "y.json", "--jitter", "1e-6",
                      "--labels", "labels.json"],
        "sample": ["sample", "--model", "model", "--input", "x.json", "--samples", "25", "--seed", "2",
                   "--include-cov", "--labels", "labels.json"],
        "score": ["score", "--report", "propagate.out", "--scores", "jsd,mahalanobis", "--reference", "sample.out"],
        "compare": ["compare", "--model", "model", "--inputs", "x.json", "--samples", "12", "--repeat", "1",
                    "--labels", "labels.json", "--ood-inputs", "ood.json"],
        "compare_csv": ["compare", "--model", "model", "--inputs", "x.json", "--samples", "12", "--repeat", "1",
                        "--format", "csv"],
        "bench": ["bench", "--widths", "8,16", "--ranks", "1,2", "--repeat", "2", "--batch", "3"],
    }
    threaded = ("propagate", "sample", "compare", "compare_csv")

    def outputs(tag, workers):
        d = tmp_path / tag
        d.mkdir()
        monkeypatch.chdir(d)
        for name, content in files.items():
            (d / name).write_text(json.dumps(content))
        assert main(["gen-model", "--arch", arch, "--seed", "5", "--out", "model"]) == 0
        blobs = {"model/" + p.name: p.read_bytes() for p in sorted((d / "model").iterdir())}
        for name, argv in runs.items():
            extra = ["--workers", str(workers)] if name in threaded else []
            assert main(argv + extra + ["--no-timings", "--out", f"{name}.out"]) == 0, name
            blobs[name] = (d / f"{name}.out").read_bytes()
        return blobs

    results = [outputs("a", 1), outputs("b", 1), outputs("c", 8)]
    diffs = sorted({k for other in results[1:] for k in results[0] if results[0][k] != other.get(k)})
    ok = not diffs
    verdict(10, "determinism", ok,
            f"{len(results[0])} artifacts from gen-model, propagate, sample, score, compare, bench; "
            "repeat and workers 1 vs 8 byte-identical" + ("" if ok else f", differing: {diffs}"))
