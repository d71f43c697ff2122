"""End-to-end acceptance gate.

Each test covers one numbered acceptance criterion and prints a single
PASS/FAIL line (collected by conftest into the terminal summary, so the
verdicts survive pytest's output capture).  Tolerances and budgets are
stated inline next to each check; the constructions are seeded so reruns
see the same instances.
"""

import csv
import functools
import os
import time

import numpy as np

import oracles
from acceptance_report import report
from factorforge import (CompletionVariant, DenseTensor, LossSpec,
                         ProblemConfig, RegularizerSpec, SparseTensor,
                         SplitSpec, SynthSpec, congruence, fit, full,
                         gen_ratings, gen_synthetic, gram_hadamard,
                         khatri_rao, matricize, mttkrp, plant_dictionary,
                         prox_apply, run_completion_cv, run_dictlearn,
                         sample_observed, save_tensor, y_update)
from factorforge.cli import main


def criterion(num, label):
    """Wrap a test body so the verdict line is printed even on a crash."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                report(num, label, False, "%s: %s" % (type(exc).__name__, exc))
                raise
            report(num, label, True, detail or "")
        return wrapper

    return deco


def _close(got, want, tol, what):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-30)
    assert rel <= tol, "%s: relative error %.3e > %.1e" % (what, rel, tol)


# --------------------------------------------------------------------------
# 1. kernel identities


@criterion(1, "kernel identities")
def test_01_kernel_identities():
    t0 = time.monotonic()
    instances = 102
    for idx in range(instances):
        r = np.random.default_rng(1000 + idx)
        ndim = 2 + idx % 3                       # cycle N in {2, 3, 4}
        dims = tuple(int(r.integers(2, 7)) for _ in range(ndim))
        k = int(r.integers(1, 5))
        factors = [r.standard_normal((d, k)) for d in dims]
        values = r.standard_normal(dims)
        t = DenseTensor(values)

        _close(full(factors).values, oracles.full_walk(factors),
               1e-10, "full %r" % (dims,))
        _close(khatri_rao(factors), oracles.khatri_rao_loops(factors),
               1e-10, "khatri_rao %r" % (dims,))
        for mode in range(ndim):
            _close(matricize(t, mode),
                   oracles.matricize_walk(values, dims, mode),
                   1e-10, "matricize %r mode %d" % (dims, mode))
            _close(mttkrp(t, factors, mode),
                   oracles.mttkrp_reference(values, dims, factors, mode),
                   1e-10, "mttkrp %r mode %d" % (dims, mode))
            gram_ref = np.ones((k, k))
            for j, h in enumerate(factors):
                if j != mode:
                    gram_ref *= h.T @ h
            _close(gram_hadamard(factors, mode), gram_ref,
                   1e-10, "gram %r mode %d" % (dims, mode))

        keep = r.random(dims) < 0.5
        if keep.any():
            st = SparseTensor(dims, np.argwhere(keep), values[keep])
            masked = np.where(keep, values, 0.0)
            for mode in range(ndim):
                _close(mttkrp(st, factors, mode),
                       oracles.mttkrp_reference(masked, dims, factors, mode),
                       1e-10, "sparse mttkrp %r mode %d" % (dims, mode))
    dt = time.monotonic() - t0
    assert dt < 10.0, "kernel suite took %.1fs (budget 10s)" % dt
    return "%d instances, %.1fs" % (instances, dt)


# --------------------------------------------------------------------------
# 2. prox / y_update oracle equivalence


def _prox_scalar_cases(spec, oracle, n, rng, tol=1e-6, spread=3.0):
    count = 0
    for _ in range(n):
        xbar = float(rng.normal(0.0, spread))
        rho = float(rng.exponential(1.0)) + 0.1
        got = prox_apply(spec, np.array([[xbar]]), rho)[0, 0]
        want = oracle(xbar, rho)
        assert abs(got - want) <= tol, \
            "%s: prox(%.4f, rho=%.4f) = %.8f vs oracle %.8f" % (
                spec.kind, xbar, rho, got, want)
        count += 1
    return count


@criterion(2, "prox/loss oracle match")
def test_02_operator_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(77)
    cases = 0

    def quad(xbar, rho, lo, hi):
        # indicator prox == projection; search only the feasible interval
        return oracles.golden_section(
            lambda x: 0.5 * rho * (x - xbar) ** 2, lo, hi)

    cases += _prox_scalar_cases(
        RegularizerSpec(), lambda xb, rho: xb, 100, rng)
    cases += _prox_scalar_cases(
        RegularizerSpec("nonneg"),
        lambda xb, rho: quad(xb, rho, 0.0, max(xb, 0.0) + 1.0), 200, rng)
    cases += _prox_scalar_cases(
        RegularizerSpec("box", lo=-0.4, hi=1.3),
        lambda xb, rho: quad(xb, rho, -0.4, 1.3), 200, rng)
    lam1 = 0.8
    cases += _prox_scalar_cases(
        RegularizerSpec("l1", lam1),
        lambda xb, rho: oracles.prox_scalar(lambda x: lam1 * abs(x), xb, rho),
        200, rng)
    lam2 = 1.4
    cases += _prox_scalar_cases(
        RegularizerSpec("tikhonov", lam2),
        lambda xb, rho: oracles.prox_scalar(
            lambda x: 0.5 * lam2 * x * x, xb, rho), 200, rng)
    cases += _prox_scalar_cases(
        RegularizerSpec("nonneg-composed", inner=RegularizerSpec("l1", lam1)),
        lambda xb, rho: oracles.prox_scalar(
            lambda x: lam1 * abs(x), max(xb, 0.0), rho), 200, rng)

    for axis, n_cases in (("columns", 75), ("rows", 75)):
        spec = RegularizerSpec("simplex", axis=axis)
        for _ in range(n_cases):
            n = int(rng.integers(2, 9))
            v = rng.normal(0.0, 2.0, n)
            hbar = v[:, None] if axis == "columns" else v[None, :]
            got = prox_apply(spec, hbar, 1.0).ravel()
            want = oracles.simplex_project(v)
            assert np.max(np.abs(got - want)) <= 1e-6, "simplex %s" % axis
            cases += 1

    for _ in range(60):
        n = int(rng.integers(4, 11))
        lam = float(rng.uniform(0.2, 2.0))
        rho = float(rng.uniform(0.5, 3.0))
        hbar = rng.normal(0.0, 2.0, (n, 2))
        got = prox_apply(RegularizerSpec("smooth", lam), hbar, rho)
        want = oracles.smooth_prox_dense(hbar, lam, rho)
        assert np.max(np.abs(got - want)) <= 1e-6, "smooth n=%d" % n
        cases += 1

    for _ in range(100):
        n = int(rng.integers(2, 7))
        hbar = rng.normal(0.0, 1.5, (n, 1))
        nrm = np.linalg.norm(hbar)
        # optimum lies on the ray t*hbar, t in [0, 1/||hbar||]
        t_star = oracles.golden_section(
            lambda t: (t - 1.0) ** 2 * nrm * nrm, 0.0, 1.0 / nrm)
        got = prox_apply(RegularizerSpec("unit-norm-columns"), hbar, 1.0)
        assert np.max(np.abs(got - t_star * hbar)) <= 1e-6, "unit-norm"
        cases += 1

    pairs = 200
    y = rng.normal(0.0, 2.0, pairs)
    yb = rng.normal(0.0, 2.0, pairs)
    for kind, oracle_kind, spec in (
            ("least-squares", "ls", LossSpec()),
            ("l1", "l1", LossSpec("l1")),
            ("huber", "huber", LossSpec("huber", lam=0.7))):
        out = y_update(spec, y, yb)
        for i in range(pairs):
            want = oracles.y_update_scalar(oracle_kind, y[i], yb[i],
                                           lam=spec.lam)
            assert abs(out[i] - want) <= 1e-6, "%s pair %d" % (kind, i)
            cases += 1

    y_kl = rng.exponential(1.0, pairs)
    out = y_update(LossSpec("kl"), y_kl, yb)
    for i in range(pairs):
        want = oracles.y_update_scalar("kl", y_kl[i], yb[i])
        assert abs(out[i] - want) <= 1e-6, "kl pair %d" % i
        cases += 1

    mask = np.arange(pairs) % 2 == 0
    out = y_update(LossSpec("missing", mask=mask), y, yb)
    for i in range(pairs):
        if mask[i]:
            want = oracles.y_update_scalar("ls", y[i], yb[i])
            assert abs(out[i] - want) <= 1e-6, "missing observed %d" % i
        else:
            assert out[i] == yb[i], "missing unobserved %d" % i
        cases += 1

    dt = time.monotonic() - t0
    assert cases >= 1000, "only %d cases" % cases
    assert dt < 30.0, "oracle suite took %.1fs (budget 30s)" % dt
    return "%d cases, %.1fs" % (cases, dt)


# --------------------------------------------------------------------------
# 3. unconstrained fit vs truncated SVD + synthetic-recipe noise floor


@criterion(3, "unconstrained + recipe fit")
def test_03_fit_quality():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal((50, 5))
    h0 = rng.standard_normal((40, 5))
    y = w0 @ h0.T + rng.normal(0.0, 0.1, (50, 40))
    u, s, vt = np.linalg.svd(y, full_matrices=False)
    svd_err = np.linalg.norm(y - (u[:, :5] * s[:5]) @ vt[:5])
    res = fit(DenseTensor(y),
              ProblemConfig(rank=5, seed=1, outer_max_iter=200,
                            outer_tol=1e-12))
    ratio = np.linalg.norm(y - full(res.factors).values) / svd_err
    assert ratio <= 1.01, "fit/svd ratio %.6f > 1.01" % ratio

    ratios = []
    for seed in range(10):
        data, truth = gen_synthetic(SynthSpec((200, 200), k_true=10,
                                              seed=seed))
        noise = data.values - full(truth).values
        floor = np.linalg.norm(noise) / np.linalg.norm(data.values)
        r = fit(data, ProblemConfig(rank=10, seed=seed + 100,
                                    outer_max_iter=200,
                                    regs=[RegularizerSpec("nonneg")] * 2))
        ratios.append(r.trace[-1].rel_error / floor)
    mean_ratio = float(np.mean(ratios))
    assert mean_ratio <= 1.05, \
        "mean rel-error/noise-floor %.4f > 1.05" % mean_ratio
    return "svd ratio %.4f, recipe mean %.4f" % (ratio, mean_ratio)


# --------------------------------------------------------------------------
# 4. warm starts shrink inner iteration counts


@criterion(4, "inner-iteration warm start")
def test_04_warm_start_economy():
    data, _ = gen_synthetic(SynthSpec((200, 200), k_true=10, seed=0))
    res = fit(data, ProblemConfig(rank=10, seed=100, outer_max_iter=120,
                                  outer_tol=1e-14,
                                  regs=[RegularizerSpec("nonneg")] * 2))
    inner = [rec.inner_iterations for rec in res.trace]
    assert len(inner) == 120, "run stopped at %d outers" % len(inner)
    window = [n for rec in inner[9:100] for n in rec]
    median = float(np.median(window))
    last20 = [n for rec in inner[-20:] for n in rec]
    ones = float(np.mean([n == 1 for n in last20]))
    assert median <= 10.0, "median inner iterations %.1f > 10" % median
    assert ones >= 0.8, "single-iteration fraction %.2f < 0.8" % ones
    return "median %.1f, ones %.0f%%" % (median, 100.0 * ones)


# --------------------------------------------------------------------------
# 5. near-monotone objective under adaptive mu


def _mu_problem_traces(inner_eps, inner_max_iter):
    out = {}
    data, _ = gen_synthetic(SynthSpec((30, 30, 30), k_true=5, seed=3))
    out["ntf"] = fit(data, ProblemConfig(
        rank=5, seed=11, outer_max_iter=120, outer_tol=1e-30,
        inner_eps=inner_eps, inner_max_iter=inner_max_iter,
        regs=[RegularizerSpec("nonneg")] * 3)).trace
    obs, _ = gen_ratings(n_users=100, n_items=120, obs_fraction=0.3, seed=4)
    out["completion"] = fit(obs, ProblemConfig(
        rank=4, seed=12, outer_max_iter=80, outer_tol=1e-30,
        inner_eps=inner_eps, inner_max_iter=inner_max_iter,
        mu_policy="adaptive", loss=LossSpec("missing"),
        regs=[RegularizerSpec("nonneg")] * 2)).trace
    y, _, _ = plant_dictionary(m=20, k=30, n=300, atoms_per_sample=3,
                               noise=0.02, seed=7)
    out["dl"] = fit(DenseTensor(y), ProblemConfig(
        rank=30, seed=13, outer_max_iter=80, outer_tol=1e-30,
        inner_eps=inner_eps, inner_max_iter=inner_max_iter,
        mu_policy="adaptive",
        regs=[RegularizerSpec("unit-norm-columns"),
              RegularizerSpec("l1", lam=0.15)])).trace
    return out


@criterion(5, "near-monotone objective")
def test_05_near_monotone():
    worst = 0.0
    for name, trace in _mu_problem_traces(0.01, 10).items():
        objs = [rec.objective for rec in trace]
        for a, b in zip(objs, objs[1:]):
            step = (b - a) / (1.0 + abs(a))
            assert step <= 1e-6, \
                "%s: objective rose by %.3e relative" % (name, step)
            worst = max(worst, step)
    for name, trace in _mu_problem_traces(1e-6, 10).items():
        objs = [rec.objective for rec in trace]
        for a, b in zip(objs, objs[1:]):
            assert b <= a, \
                "%s: objective rose %.6e -> %.6e at tight eps" % (name, a, b)
    return "max relative step %.1e, tight-eps strict" % worst


# --------------------------------------------------------------------------
# 6. NTF factor recovery


@criterion(6, "ntf factor recovery")
def test_06_ntf_recovery():
    wins = 0
    slowest = 0.0
    for seed in range(10):
        data, truth = gen_synthetic(SynthSpec((30, 30, 30), k_true=5,
                                              seed=seed))
        t0 = time.monotonic()
        res = fit(data, ProblemConfig(rank=5, seed=seed + 50,
                                      outer_max_iter=300,
                                      regs=[RegularizerSpec("nonneg")] * 3))
        dt = time.monotonic() - t0
        slowest = max(slowest, dt)
        assert dt < 60.0, "seed %d took %.1fs (budget 60s)" % (seed, dt)
        scores = [congruence(t, h) for t, h in zip(truth, res.factors)]
        wins += all(c >= 0.95 for c in scores)
    assert wins >= 9, "only %d/10 seeds recovered all modes" % wins
    return "%d/10 seeds, slowest run %.1fs" % (wins, slowest)


# --------------------------------------------------------------------------
# 7. nonnegativity curbs completion over-fitting at high rank


@criterion(7, "completion nonneg vs plain")
def test_07_completion_overfit():
    plain, nonneg = [], []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        truth = [rng.exponential(1.0, (100, 4)), rng.exponential(1.0, (120, 4))]
        dense = full(truth).values + rng.normal(0.0, 0.1, (100, 120))
        obs = sample_observed(DenseTensor(dense), 1.0, seed=seed)
        rows = run_completion_cv(
            obs, SplitSpec(train_fraction=0.8, folds=1, seed=seed),
            [CompletionVariant("plain", rank=8, constraint="none",
                               outer_max_iter=60, seed=seed),
             CompletionVariant("nonneg", rank=8, constraint="nonneg",
                               outer_max_iter=60, seed=seed)])
        for row in rows:
            if row["fold"] == "mean":
                (plain if row["variant"] == "plain"
                 else nonneg).append(row["test_mae"])
    mp, mn = float(np.mean(plain)), float(np.mean(nonneg))
    assert mn <= mp, "nonneg MAE %.4f > plain MAE %.4f" % (mn, mp)
    return "plain %.4f, nonneg %.4f" % (mp, mn)


# --------------------------------------------------------------------------
# 8. dictionary recovery + inversion-lemma path agreement


@criterion(8, "dictionary recovery + lemma")
def test_08_dictionary_learning():
    y0, d_true, _ = plant_dictionary(m=20, k=30, n=300, atoms_per_sample=3,
                                     noise=0.0, seed=7)
    rng = np.random.default_rng(8)
    sigma = np.sqrt(np.mean(y0 ** 2)) / 10.0      # SNR 20 dB
    y = y0 + rng.normal(0.0, sigma, y0.shape)
    d, _, stats, _ = run_dictlearn(y, k=30, lam=0.15, iters=100, seed=1)
    score = congruence(d_true, d)
    assert stats["outer_iterations"] <= 100
    assert score >= 0.9, "dictionary congruence %.3f < 0.9" % score
    objs = []
    for ratio in (0.0, 1.0):
        _, _, st, _ = run_dictlearn(y, k=30, lam=0.15, iters=100, seed=1,
                                    lemma_ratio=ratio)
        objs.append(st["objective"])
    gap = abs(objs[0] - objs[1])
    assert gap <= 1e-6, "solver-path objective gap %.3e > 1e-6" % gap
    return "congruence %.3f, path gap %.1e" % (score, gap)


# --------------------------------------------------------------------------
# 9. KL update satisfies its stationarity equation


@criterion(9, "kl update stationarity")
def test_09_kl_stationarity():
    rng = np.random.default_rng(42)
    y = rng.exponential(1.0, 10000)
    ybar = rng.normal(0.0, 5.0, 10000)
    yt = y_update(LossSpec("kl"), y, ybar)
    resid = np.abs(-y / yt + 1.0 + yt - ybar)
    worst = float(resid.max())
    assert worst <= 1e-9, "stationarity residual %.3e > 1e-9" % worst
    return "max residual %.1e over 10^4 pairs" % worst


# --------------------------------------------------------------------------
# 10. CLI determinism


def _assert_trees_match(a, b):
    files_a = {str(p.relative_to(a)): p for p in a.rglob("*") if p.is_file()}
    files_b = {str(p.relative_to(b)): p for p in b.rglob("*") if p.is_file()}
    assert set(files_a) == set(files_b), \
        "output sets differ: %r vs %r" % (sorted(files_a), sorted(files_b))
    for rel in sorted(files_a):
        pa, pb = files_a[rel], files_b[rel]
        name = os.path.basename(rel)
        if name == "trace.csv":
            with open(pa, newline="") as fh:
                rows_a = [r[:4] + r[5:] for r in csv.reader(fh)]
            with open(pb, newline="") as fh:
                rows_b = [r[:4] + r[5:] for r in csv.reader(fh)]
            assert rows_a == rows_b, "%s differs beyond elapsed_s" % rel
        elif name == "config.toml":
            # the echoed config names the output directory itself
            text_a = pa.read_text().replace(str(a), "@OUT@")
            text_b = pb.read_text().replace(str(b), "@OUT@")
            assert text_a == text_b, "%s differs" % rel
        else:
            assert pa.read_bytes() == pb.read_bytes(), "%s differs" % rel
    return len(files_a)


def _run_twice(base, name, argv_for):
    outs, codes = [], []
    for tag in ("run_a", "run_b"):
        out = base / ("%s_%s" % (name, tag))
        codes.append(main(argv_for(str(out))))
        outs.append(out)
    assert codes[0] == codes[1] == 0, "%s exit codes %r" % (name, codes)
    return _assert_trees_match(outs[0], outs[1]), outs[0]


@criterion(10, "cli determinism")
def test_10_cli_determinism(tmp_path):
    compared = 0

    data, _ = gen_synthetic(SynthSpec((20, 16), k_true=3, seed=21))
    fit_input = tmp_path / "fit_data.npy"
    save_tensor(data, fit_input)
    fit_cfg = tmp_path / "fit.toml"
    fit_cfg.write_text("[problem]\nrank = 3\nseed = 5\nouter_max_iter = 60\n"
                       "deterministic = true\n")
    n, fit_out = _run_twice(
        tmp_path, "fit",
        lambda out: ["fit", "--config", str(fit_cfg),
                     "--input", str(fit_input), "--output", out])
    compared += n

    n, _ = _run_twice(
        tmp_path, "eval",
        lambda out: ["eval", "--config", str(fit_cfg),
                     "--input", str(fit_input),
                     "--factors", str(fit_out / "factors"), "--output", out])
    compared += n

    synth_cfg = tmp_path / "synth.toml"
    synth_cfg.write_text("[synth]\ndims = [12, 10]\nk_true = 2\nseed = 3\n")
    n, _ = _run_twice(
        tmp_path, "synth",
        lambda out: ["synth", "--config", str(synth_cfg), "--output", out])
    compared += n

    obs, _ = gen_ratings(n_users=20, n_items=16, k_true=2, obs_fraction=0.6,
                         seed=5)
    ratings = tmp_path / "ratings.mtx"
    save_tensor(obs, ratings)
    complete_cfg = tmp_path / "complete.toml"
    complete_cfg.write_text("[completion]\nfolds = 2\nranks = [2]\n"
                            "variants = [\"plain\"]\nouter_max_iter = 15\n"
                            "train_fraction = 0.75\n")
    n, _ = _run_twice(
        tmp_path, "complete",
        lambda out: ["complete", "--config", str(complete_cfg),
                     "--input", str(ratings), "--output", out])
    compared += n

    patches, _, _ = plant_dictionary(m=8, k=6, n=40, atoms_per_sample=2,
                                     noise=0.005, seed=2)
    patch_path = tmp_path / "patches.npy"
    save_tensor(DenseTensor(patches), patch_path)
    dict_cfg = tmp_path / "dict.toml"
    dict_cfg.write_text("[dictlearn]\nk = 6\nlambda = 0.1\niters = 25\n")
    n, _ = _run_twice(
        tmp_path, "dictlearn",
        lambda out: ["dictlearn", "--config", str(dict_cfg),
                     "--input", str(patch_path), "--output", out])
    compared += n

    return "5 subcommands, %d files byte-compared" % compared
