"""Synthetic data generators and the two case-study experiment drivers
(matrix completion with cross-validation, sparse dictionary learning).
"""

import math
from dataclasses import dataclass

import numpy as np

from .driver import ProblemConfig, fit, fit_two_stage
from .losses import LossSpec
from .prox import RegularizerSpec
from .tensors import DenseTensor, SparseTensor, full, model_at, relative_error


@dataclass
class SynthSpec:
    """Planted low-rank model: factor entries ~ Exp(1) (or N(0,1) when
    nonneg=False), a ``sparsify`` fraction of them zeroed, and i.i.d.
    Gaussian noise of variance ``noise_var`` added to the expansion."""

    dims: tuple
    k_true: int = 10
    sparsify: float = 0.5
    noise_var: float = 0.01
    seed: int = 0
    nonneg: bool = True

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) < 2 or any(n < 1 for n in self.dims):
            raise ValueError("dims must be >= 2 positive sizes")
        if self.k_true < 1:
            raise ValueError("k_true must be >= 1")
        if not 0.0 <= self.sparsify <= 1.0:
            raise ValueError("sparsify must be in [0, 1]")
        if self.noise_var < 0.0:
            raise ValueError("noise_var must be >= 0")


def gen_synthetic(spec):
    """Draw (data, true_factors) from a SynthSpec."""
    rng = np.random.default_rng(spec.seed)
    factors = []
    for n in spec.dims:
        if spec.nonneg:
            h = rng.exponential(1.0, size=(n, spec.k_true))
        else:
            h = rng.standard_normal((n, spec.k_true))
        if spec.sparsify > 0.0:
            h[rng.random(h.shape) < spec.sparsify] = 0.0
        factors.append(h)
    data = full(factors).values
    if spec.noise_var > 0.0:
        data = data + rng.normal(0.0, math.sqrt(spec.noise_var), size=spec.dims)
    return DenseTensor(data), factors


def congruence(a, b):
    """Mean absolute cosine between greedily matched columns of a and b.

    1.0 means the column sets agree up to permutation and per-column scaling
    (sign included); zero columns are rejected.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %r vs %r" % (a.shape, b.shape))
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("congruence undefined for zero columns")
    c = np.abs((a / na).T @ (b / nb))
    k = c.shape[0]
    total = 0.0
    alive_r = list(range(k))
    alive_c = list(range(k))
    for _ in range(k):
        sub = c[np.ix_(alive_r, alive_c)]
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        total += sub[i, j]
        alive_r.pop(i)
        alive_c.pop(j)
    return total / k


def sample_observed(data, fraction, seed=0):
    """Subsample a dense matrix/tensor into a SparseTensor of observed
    entries (uniform without replacement)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    vals = data.values if isinstance(data, DenseTensor) else np.asarray(data)
    rng = np.random.default_rng(seed)
    total = vals.size
    count = max(1, int(round(fraction * total)))
    flat = rng.choice(total, size=count, replace=False)
    idx = np.column_stack(np.unravel_index(flat, vals.shape))
    return SparseTensor(vals.shape, idx, vals[tuple(idx.T)])


def gen_ratings(n_users=100, n_items=120, k_true=4, obs_fraction=0.3,
                noise_var=0.04, lo=1.0, hi=5.0, seed=0):
    """Ratings-like completion instance: nonnegative latent factors plus
    user/item biases, Gaussian noise, values clipped into [lo, hi], then a
    random fraction of entries kept as observed.

    Returns (observed SparseTensor, full DenseTensor).
    """
    rng = np.random.default_rng(seed)
    k = max(1, int(k_true))
    w = rng.exponential(0.5, size=(n_users, k))
    h = rng.exponential(0.5, size=(n_items, k))
    user_bias = rng.normal(0.0, 0.5, size=(n_users, 1))
    item_bias = rng.normal(0.0, 0.5, size=(1, n_items))
    base = (lo + hi) / 2.0
    dense = base + user_bias + item_bias + (w @ h.T - np.mean(w @ h.T))
    if noise_var > 0.0:
        dense = dense + rng.normal(0.0, math.sqrt(noise_var), size=dense.shape)
    dense = np.clip(dense, lo, hi)
    obs = sample_observed(DenseTensor(dense), obs_fraction, seed=seed + 1)
    return obs, DenseTensor(dense)


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")


@dataclass
class CompletionVariant:
    """One completion model to cross-validate.

    constraint: "none" | "tikhonov" | "nonneg" | "nonneg-biases"
    loss:       "missing" (masked least squares) | "kl"
    """

    name: str
    rank: int
    constraint: str = "tikhonov"
    loss: str = "missing"
    lam: float = 0.1
    outer_max_iter: int = 60
    two_stage: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.constraint not in ("none", "tikhonov", "nonneg", "nonneg-biases"):
            raise ValueError("unknown constraint %r" % (self.constraint,))
        if self.loss not in ("missing", "kl"):
            raise ValueError("completion loss must be 'missing' or 'kl'")
        if self.constraint == "nonneg-biases" and self.rank < 2:
            raise ValueError("bias columns need rank >= 2")


def _variant_regs(variant):
    c = variant.constraint
    if c == "none":
        return None
    if c == "tikhonov":
        spec = RegularizerSpec("tikhonov", lam=variant.lam)
        return [spec, spec]
    if c == "nonneg":
        return [RegularizerSpec("nonneg"), RegularizerSpec("nonneg")]
    # nonneg with bias columns: the mode-0 factor pins column 0 to ones,
    # the mode-1 factor pins column 1, so the model carries additive
    # item and user offsets alongside the interaction terms
    return [RegularizerSpec("nonneg", ones_cols=(0,)),
            RegularizerSpec("nonneg", ones_cols=(1,))]


def _fold_split(nnz, split, fold, rng):
    test_size = max(1, int(round((1.0 - split.train_fraction) * nnz)))
    if test_size >= nnz:
        raise ValueError("split leaves no training entries")
    perm = rng.permutation(nnz)
    return perm[test_size:], perm[:test_size]


def run_completion_cv(data, split, variants, clamp=None, progress=None):
    """Cross-validated completion study on an observed-entry matrix.

    For each fold and variant, fits on the training entries (loss masked to
    them) and scores mean absolute error on both splits; predictions are
    clipped to ``clamp`` = (lo, hi) when given.  Returns one row dict per
    (fold, variant) plus a fold="mean" row per variant.
    """
    if not isinstance(data, SparseTensor) or data.ndim != 2:
        raise ValueError("completion data must be a 2-mode SparseTensor")
    if data.nnz < split.folds:
        raise ValueError("need at least one observation per fold")
    rng = np.random.default_rng(split.seed)
    rows = []
    for fold in range(split.folds):
        train_ids, test_ids = _fold_split(data.nnz, split, fold, rng)
        train = SparseTensor(data.dims, data.indices[train_ids],
                             data.values[train_ids])
        test_idx = data.indices[test_ids]
        test_val = data.values[test_ids]
        for variant in variants:
            cfg = ProblemConfig(
                rank=variant.rank,
                loss=LossSpec(variant.loss, mask_source="unlisted-entries"),
                regs=_variant_regs(variant),
                outer_max_iter=variant.outer_max_iter,
                seed=variant.seed,
            )
            runner = fit_two_stage if variant.two_stage else fit
            result = runner(train, cfg)
            pred_train = model_at(result.factors, train.indices)
            pred_test = model_at(result.factors, test_idx)
            if clamp is not None:
                pred_train = np.clip(pred_train, clamp[0], clamp[1])
                pred_test = np.clip(pred_test, clamp[0], clamp[1])
            row = {
                "fold": fold,
                "variant": variant.name,
                "rank": variant.rank,
                "train_mae": float(np.mean(np.abs(train.values - pred_train))),
                "test_mae": float(np.mean(np.abs(test_val - pred_test))),
                "converged": result.converged,
            }
            rows.append(row)
            if progress is not None:
                progress(row)
    for variant in variants:
        sub = [r for r in rows if r["variant"] == variant.name and r["fold"] != "mean"]
        rows.append({
            "fold": "mean",
            "variant": variant.name,
            "rank": variant.rank,
            "train_mae": float(np.mean([r["train_mae"] for r in sub])),
            "test_mae": float(np.mean([r["test_mae"] for r in sub])),
            "converged": all(r["converged"] for r in sub),
        })
    return rows


def plant_dictionary(m=20, k=30, n=300, atoms_per_sample=3, noise=0.01,
                     seed=0, nonneg=False):
    """Planted dictionary-learning instance: unit-norm atoms, sparse codes
    with ``atoms_per_sample`` nonzeros per column.  Returns (patches, D, S)."""
    rng = np.random.default_rng(seed)
    if nonneg:
        d = np.abs(rng.standard_normal((m, k)))
    else:
        d = rng.standard_normal((m, k))
    d /= np.linalg.norm(d, axis=0)[None, :]
    s = np.zeros((k, n))
    for j in range(n):
        support = rng.choice(k, size=atoms_per_sample, replace=False)
        coef = rng.uniform(0.5, 1.5, size=atoms_per_sample)
        if not nonneg:
            coef *= rng.choice([-1.0, 1.0], size=atoms_per_sample)
        s[support, j] = coef
    y = d @ s
    if noise > 0.0:
        y = y + rng.normal(0.0, noise, size=y.shape)
    return y, d, s


def run_dictlearn(patches, k, lam, nonneg=False, iters=100, seed=0,
                  lemma_ratio=0.5, init_factors=None, outer_tol=1e-7):
    """Sparse dictionary learning: patches ~ D S with unit-norm atoms D and
    l1-penalized codes S (both clamped nonnegative when nonneg=True).

    Returns (D, S, stats, FitResult); S is k x n_samples.
    """
    if isinstance(patches, DenseTensor):
        data = patches
    else:
        data = DenseTensor(np.asarray(patches, dtype=np.float64))
    if data.ndim != 2:
        raise ValueError("patches must form a 2-mode tensor")
    d_spec = RegularizerSpec("unit-norm-columns")
    s_spec = RegularizerSpec("l1", lam=lam)
    if nonneg:
        d_spec = RegularizerSpec("nonneg-composed", inner=d_spec)
        s_spec = RegularizerSpec("nonneg-composed", inner=s_spec)
    cfg = ProblemConfig(
        rank=k,
        regs=[d_spec, s_spec],
        outer_max_iter=iters,
        outer_tol=outer_tol,
        seed=seed,
        lemma_ratio=lemma_ratio,
        init="provided" if init_factors is not None else "uniform01",
        init_factors=init_factors,
    )
    result = fit(data, cfg)
    d = result.factors[0]
    s = result.factors[1].T
    rel = relative_error(data, result.factors)
    stats = {
        "atoms_per_sample": float(np.mean((np.abs(s) > 0.0).sum(axis=0))),
        "energy_fraction": float(max(0.0, 1.0 - rel * rel)),
        "rel_error": float(rel),
        "objective": float(result.trace[-1].objective) if result.trace else math.nan,
        "converged": bool(result.converged),
        "outer_iterations": len(result.trace),
    }
    return d, s, stats, result
