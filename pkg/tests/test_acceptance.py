"""Acceptance criteria, one test group per numbered criterion.

Every test pins the stated tolerance and runtime budget.  The conftest
hook collects the per-criterion verdicts into a summary table at the end
of the run.  Criterion 6 is the full-scale spot check and only runs with
DKN_FULL_SCALE=1 in the environment.
"""

import json
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from dkn import glm, rng
from dkn.cli import main
from dkn.diagnostics import theory_constants
from dkn.dkn_fit import DknStructure, FitOptions, deepest_structure, fit, scan_rank
from dkn.harness import ExperimentConfig, SignalSpec, run_experiment
from dkn.kron_ops import compose_coeff, conv_chain_eval, kron_chain, reshape_R, reshape_T, tkp
from dkn.tensor_core import inner, vec


# ------------------------------------------------- 1. algebraic identities


def test_criterion_01_kron_rank1_reshape():
    t0 = time.perf_counter()
    g = np.random.default_rng(101)
    worst = 0.0
    for _ in range(200):
        sa = tuple(int(e) for e in g.integers(1, 5, size=3))
        sb = tuple(int(e) for e in g.integers(1, 5, size=3))
        a, b = g.standard_normal(sa), g.standard_normal(sb)
        diff = reshape_R(tkp(a, b), sa) - np.outer(vec(a), vec(b))
        worst = max(worst, float(np.sqrt(np.sum(diff * diff))))
    assert worst <= 1e-12
    assert time.perf_counter() - t0 < 5.0


def test_criterion_01_conv_chain_inner_product():
    t0 = time.perf_counter()
    g = np.random.default_rng(102)
    worst = 0.0
    for _ in range(100):
        depth = int(g.integers(2, 5))
        chain = [g.standard_normal(tuple(int(e) for e in g.integers(1, 4, size=3)))
                 for _ in range(depth)]
        c = kron_chain(chain)
        x = g.standard_normal(c.shape)
        ref = inner(x, c)
        rel = abs(conv_chain_eval(x, chain) - ref) / max(1.0, abs(ref))
        worst = max(worst, rel)
    assert worst <= 1e-10
    assert time.perf_counter() - t0 < 5.0


def test_criterion_01_cp_regrouping():
    t0 = time.perf_counter()
    g = np.random.default_rng(103)
    worst = 0.0
    for rank in (1, 2, 3):
        for depth in (2, 3):
            for _ in range(5):
                fd = [tuple(int(e) for e in g.integers(1, 4, size=3))
                      for _ in range(depth)]
                terms = [[g.standard_normal(f) for f in fd] for _ in range(rank)]
                t = reshape_T(compose_coeff(terms), fd)
                cp = np.zeros(t.shape)
                for chain in terms:
                    acc = vec(chain[0])
                    for f in chain[1:]:
                        acc = np.multiply.outer(acc, vec(f))
                    cp = cp + acc
                worst = max(worst, float(np.max(np.abs(t - cp))))
    assert worst <= 1e-12
    assert time.perf_counter() - t0 < 5.0


# ------------------------------------- 2 + 3. exact recovery and its decay


@pytest.fixture(scope="module")
def exact_recovery_runs():
    """Twenty noiseless rank-1 fits at 8x8, L=3, all 2x2 factors, n=300."""
    t0 = time.perf_counter()
    s = DknStructure(image_dims=(8, 8), factor_dims=[(2, 2), (2, 2), (2, 2)])
    traces = []
    for seed in range(20):
        g = rng.stream(seed, rng.PURPOSE_SIGNAL, 0)
        chain = [g.standard_normal(fd) for fd in s.factor_dims]
        coeff = compose_coeff([chain])
        x = rng.stream(seed, rng.PURPOSE_IMAGES, 0).standard_normal((300, 8, 8))
        y = x.reshape(300, -1, order="F") @ vec(coeff)
        options = FitOptions(max_sweeps=50, tol=1e-12, trace_truth=coeff, seed=seed)
        _, report = fit(x, y, s, options=options)
        traces.append(report.dist_trace)
    return traces, time.perf_counter() - t0


def test_criterion_02_noiseless_exact_recovery(exact_recovery_runs):
    traces, elapsed = exact_recovery_runs
    assert len(traces) == 20
    recovered = sum(len(t) <= 50 and t[-1] <= 1e-6 for t in traces)
    assert recovered >= 19
    assert elapsed < 30.0


def test_criterion_03_geometric_decay(exact_recovery_runs):
    traces, _ = exact_recovery_runs
    decayed = 0
    for trace in traces:
        ok = all(trace[t + 1] / trace[t] <= 0.9
                 for t in range(len(trace) - 1) if trace[t] > 1e-8)
        decayed += ok
    assert decayed >= 19


# ------------------------------------------------- 4. gradient correctness


def test_criterion_04_gradient_vs_central_differences():
    t0 = time.perf_counter()
    g = np.random.default_rng(104)
    h = 1e-6
    for family in ("gaussian", "bernoulli"):
        worst = 0.0
        for _ in range(50):
            n = int(g.integers(10, 41))
            m = int(g.integers(2, 9))
            design = g.standard_normal((n, m))
            beta = 0.5 * g.standard_normal(m)
            if family == "gaussian":
                y = g.standard_normal(n)
            else:
                y = (g.random(n) < 0.5).astype(np.float64)
            grad = glm.nll_grad(family, design, beta, y)
            fd = np.zeros(m)
            for j in range(m):
                e = np.zeros(m)
                e[j] = h
                fd[j] = (glm.nll(family, design, beta + e, y)
                         - glm.nll(family, design, beta - e, y)) / (2.0 * h)
            rel = np.linalg.norm(grad - fd) / max(1.0, np.linalg.norm(fd))
            worst = max(worst, rel)
        assert worst <= 1e-5, f"{family}: worst relative error {worst:.3e}"
    assert time.perf_counter() - t0 < 10.0


# -------------------------------------------- 5. desk-scale circle study


def test_criterion_05_desk_scale_beats_ridge():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        image_dims=(32, 32),
        n_train=500,
        signal=SignalSpec("one_circle", "sparse"),
        family="gaussian",
        noise_sd=1.0,
        rank=1,
        n_reps=20,
        seed=20260817,
    )
    out = run_experiment(cfg)
    mean_dkn = out["summary"]["rmse_coeff_dkn"]["mean"]
    assert mean_dkn <= 0.15
    wins = sum(r["rmse_coeff_dkn"] < r["rmse_coeff_ridge"]
               for r in out["repetitions"])
    assert wins >= 18  # strictly better than ridge on >= 90% of seeds
    assert time.perf_counter() - t0 < 300.0


# ------------------------------------------- 6. full-scale spot check


@pytest.mark.skipif(os.environ.get("DKN_FULL_SCALE") != "1",
                    reason="set DKN_FULL_SCALE=1 to run the 128x128 spot check")
def test_criterion_06_full_scale_circle():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(
        image_dims=(128, 128),
        n_train=500,
        signal=SignalSpec("one_circle", "sparse"),
        family="gaussian",
        noise_sd=1.0,
        rank=1,
        n_reps=10,
        seed=20260817,
        run_ridge=False,
    )
    out = run_experiment(cfg)
    mean_dkn = out["summary"]["rmse_coeff_dkn"]["mean"]
    assert 0.025 <= mean_dkn <= 0.075
    assert time.perf_counter() - t0 < 3600.0


# ------------------------------------------------- 7. BIC rank selection


def test_criterion_07_bic_rank_selection():
    t0 = time.perf_counter()
    s1 = deepest_structure((16, 16), rank=1)
    correct = 0
    null_correct = 0
    for seed in range(20):
        gs = rng.stream(seed, 40)
        chains = []
        for r in range(2):
            chain = [gs.standard_normal(fd) for fd in s1.factor_dims]
            chain = [f / np.linalg.norm(f) for f in chain]
            chain[0] = chain[0] * (3.0 if r == 0 else 2.0)
            chains.append(chain)
        coeff = compose_coeff(chains)
        x = rng.stream(seed, rng.PURPOSE_IMAGES, 0).standard_normal((400, 16, 16))
        y = x.reshape(400, -1, order="F") @ vec(coeff)
        y = y + 0.1 * rng.stream(seed, 41).standard_normal(400)
        scan = scan_rank(x, y, s1, [1, 2, 3], options=FitOptions(seed=seed))
        correct += scan.best_rank == 2

        xn = rng.stream(seed + 1000, rng.PURPOSE_IMAGES, 0).standard_normal((400, 16, 16))
        yn = rng.stream(seed, 42).standard_normal(400)
        scan_null = scan_rank(xn, yn, s1, [1, 2, 3], options=FitOptions(seed=seed))
        null_correct += scan_null.best_rank == 1
    assert correct >= 16
    assert null_correct >= 16
    assert time.perf_counter() - t0 < 180.0


# ------------------------------------------------ 8. parameter arithmetic


def test_criterion_08_parameter_count():
    s = deepest_structure((256, 256, 256), rank=3)
    assert s.depth == 8
    assert all(fd == (2, 2, 2) for fd in s.factor_dims)
    assert s.param_count == 192
    assert 256**3 == 16777216  # the count the factorization replaces


# ------------------------------------------------- 9. theory constants


def test_criterion_09_theory_constants():
    # noiseless reduction over a (nu, depth) grid
    for depth in range(2, 7):
        target = 2.0 ** (1.0 / (depth - 1)) - 1.0
        grid = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.41, 0.5, 0.75, 0.99, 1.0]
        grid += [v for v in (target - 1e-6, target + 1e-6) if 0.0 <= v <= 1.0]
        for nu in grid:
            c = theory_constants(0.0, nu, 0.0, 1.0, depth)
            assert c.eta == 1.0
            assert abs(c.condition_rhs - target) <= 1e-12
            assert c.condition_met == (nu < target)

    # hand-computed example in exact rational arithmetic
    nu = Fraction(1, 10) + Fraction(3, 20) / Fraction(17, 20)
    assert nu == Fraction(47, 170)
    kappa = (1 + nu) ** 3 - (2 * nu + 1)
    c1 = 2 * (1 + nu / kappa)
    c2 = (1 + nu) ** 2 / (nu * (1 - kappa)) + 1
    c = theory_constants(0.05, 0.1, 0.0, 1.0, 3)
    assert abs(c.nu - float(nu)) <= 1e-9
    assert abs(c.kappa - float(kappa)) <= 1e-9
    assert abs(c.c1 - float(c1)) <= 1e-9
    assert abs(c.c2 - float(c2)) <= 1e-9
    assert abs(c.condition_rhs - (math.sqrt(2.0) - 1.0)) <= 1e-9
    assert c.condition_met


# ------------------------------------------------- 10. CLI determinism


def test_criterion_10_cli_byte_determinism(tmp_path):
    cfg = {
        "image_dims": [8, 8],
        "n_train": 40,
        "signal": {"shape": "one_circle", "kind": "sparse", "circles": None},
        "family": "gaussian",
        "noise_sd": 0.3,
        "rank": 1,
        "depth": None,
        "n_reps": 1,
        "seed": 7,
        "max_sweeps": 20,
        "tol": 1e-8,
        "run_ridge": False,
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))

    for run in ("a", "b"):
        root = tmp_path / run
        data = root / "data"
        assert main(["simulate", "--config", str(cfg_path), "--out", str(data)]) == 0
        assert main(["fit", "--images", str(data / "images"), "--y", str(data / "y.csv"),
                     "--out", str(root / "model"), "--seed", "0"]) == 0
        assert main(["predict", "--model", str(root / "model"),
                     "--images", str(data / "test_images"),
                     "--out", str(root / "pred.csv")]) == 0
        assert main(["check-equivalence", "--instances", "10", "--seed", "3",
                     "--out", str(root / "equiv.json")]) == 0

    def tree(root):
        files = {}
        for dirpath, _, names in os.walk(root):
            for name in names:
                full = os.path.join(dirpath, name)
                files[os.path.relpath(full, root)] = full
        return files

    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert sorted(a) == sorted(b)
    assert len(a) > 50  # images, model factors, reports, predictions
    for rel in sorted(a):
        with open(a[rel], "rb") as fa, open(b[rel], "rb") as fb:
            assert fa.read() == fb.read(), f"{rel} differs between identical runs"
