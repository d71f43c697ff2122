"""Outer alternating-optimization loop over factor subproblems.

``fit`` cycles through the modes, solving each factor's regularized
subproblem with the inner ADMM solver (warm-started from its own previous
iterates), and stops when the relative objective change stays below
``outer_tol`` for two consecutive sweeps.  ``fit_two_stage`` runs a
least-squares surrogate first and hands its factors to the true loss.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import admm
from .losses import DenseSplitState, LossSpec, SparseSplitState, loss_value
from .prox import RegularizerSpec, reg_value, violation
from .tensors import (DenseTensor, SparseTensor, full, model_at,
                      relative_error, validate_factors)

MU_POLICIES = ("auto", "zero", "fixed", "adaptive")
INIT_KINDS = ("uniform01", "abs-gaussian", "provided")
_MAX_REDRAWS = 5


@dataclass
class ProblemConfig:
    """Everything ``fit`` needs besides the data tensor."""

    rank: int
    loss: LossSpec = field(default_factory=LossSpec)
    regs: "list | None" = None
    inner_eps: float = 0.01
    inner_max_iter: int = 10
    outer_max_iter: int = 200
    outer_tol: float = 1e-7
    mu_policy: str = "auto"
    mu_fixed: float = 0.0
    frobenius_weight: float = 0.0
    seed: int = 0
    deterministic: bool = False
    init: str = "uniform01"
    init_factors: "list | None" = None
    split_state: str = "per-mode"
    lemma_ratio: float = 0.5
    stage1_fraction: float = 0.2
    checkpoint_every: int = 0

    def __post_init__(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError("rank must be a positive integer, got %r" % (self.rank,))
        if not (self.inner_eps > 0.0 and math.isfinite(self.inner_eps)):
            raise ValueError("inner_eps must be positive")
        if self.inner_max_iter < 1:
            raise ValueError("inner_max_iter must be >= 1")
        if self.outer_max_iter < 0:
            raise ValueError("outer_max_iter must be >= 0")
        if not (self.outer_tol > 0.0 and math.isfinite(self.outer_tol)):
            raise ValueError("outer_tol must be positive")
        if self.mu_policy not in MU_POLICIES:
            raise ValueError("mu_policy must be one of %r" % (MU_POLICIES,))
        if self.mu_fixed < 0.0:
            raise ValueError("mu_fixed must be nonnegative")
        if self.frobenius_weight < 0.0:
            raise ValueError("frobenius_weight must be nonnegative")
        if self.init not in INIT_KINDS:
            raise ValueError("init must be one of %r" % (INIT_KINDS,))
        if self.init == "provided" and not self.init_factors:
            raise ValueError("init='provided' needs init_factors")
        if self.split_state not in ("per-mode", "shared"):
            raise ValueError("split_state must be 'per-mode' or 'shared'")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise ValueError("stage1_fraction must be in [0, 1]")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class TraceRecord:
    iteration: int
    objective: float
    rel_error: float
    inner_iterations: tuple
    elapsed_s: float
    mu: float
    violation: float
    factors: "list | None" = None


@dataclass
class FitResult:
    factors: list
    trace: list
    converged: bool
    mu: float
    counters: admm.Counters


def _resolve_loss(data, loss):
    """Fill in the mask and decide the split-state layout.

    Returns (loss, sparse_split) where sparse_split means the data is sparse
    and the mask equals the stored support, so the low-rank-plus-sparse state
    applies.  Dense data with masked kinds carries a boolean mask array;
    sparse data with unmasked robust kinds is densified by the caller.
    """
    if loss.kind == "least-squares":
        return loss, False
    if isinstance(data, SparseTensor):
        if loss.mask is None:
            if loss.kind == "missing" or loss.mask_source == "unlisted-entries":
                return replace(loss, mask=None, mask_source="unlisted-entries"), True
            return loss, False  # zeros semantics: dense state
        raise ValueError(
            "explicit masks on sparse data are not supported; "
            "list exactly the observed entries instead"
        )
    if loss.mask is not None:
        mask = np.asarray(loss.mask)
        if mask.shape == data.dims:
            mask = mask.astype(bool)
        elif mask.ndim == 2 and mask.shape[1] == data.ndim \
                and np.issubdtype(mask.dtype, np.integer):
            # index-list mask: (nnz, N) integer rows
            dense = np.zeros(data.dims, dtype=bool)
            dense[tuple(mask.astype(np.int64).T)] = True
            mask = dense
        else:
            raise ValueError(
                "mask shape %r does not match data dims %r" % (mask.shape, data.dims)
            )
        return replace(loss, mask=mask), False
    if loss.kind == "missing":
        raise ValueError("missing loss on dense data needs a mask")
    return loss, False


def _resolve_regs(cfg, ndim):
    regs = cfg.regs
    if regs is None:
        regs = [RegularizerSpec("none")] * ndim
    if len(regs) != ndim:
        raise ValueError("need %d regularizer specs, got %d" % (ndim, len(regs)))
    return list(regs)


def _resolve_mu_policy(cfg, ndim):
    if cfg.mu_policy == "auto":
        return "adaptive" if ndim >= 3 else "zero"
    return cfg.mu_policy


def _draw_factors(cfg, dims, rng):
    if cfg.init == "provided":
        validate_factors(cfg.init_factors, dims=dims, rank=cfg.rank)
        return [np.array(h, dtype=np.float64, copy=True) for h in cfg.init_factors]
    k = cfg.rank
    if cfg.init == "uniform01":
        return [rng.random((n, k)) for n in dims]
    return [np.abs(rng.standard_normal((n, k))) for n in dims]


def _gram_traces_positive(factors):
    grams = [np.asarray(h).T @ np.asarray(h) for h in factors]
    n = len(factors)
    for mode in range(n):
        prod = np.ones(factors[0].shape[1])
        for d in range(n):
            if d != mode:
                prod *= np.diag(grams[d])
        if prod.sum() <= 0.0:
            return False
    return True


def init_factors(data, cfg, rng=None):
    """Draw (or validate) the starting factors; re-draws random inits whose
    Gram trace degenerates to zero, up to a small retry budget."""
    rng = rng or np.random.default_rng(cfg.seed)
    for attempt in range(_MAX_REDRAWS + 1):
        factors = _draw_factors(cfg, data.dims, rng)
        if _gram_traces_positive(factors):
            return factors
        if cfg.init == "provided":
            raise admm.InitializationError(
                "provided factors have a zero-trace Gram; supply a better start"
            )
    raise admm.InitializationError("could not draw factors with positive Gram trace")


def update_mu(data, factors, policy="adaptive", current=0.0, observed_only=False):
    """Proximal-weight schedule: adaptive follows the current misfit
    (1e-7 + 0.01 * relative error), fixed/zero pass through."""
    if policy == "zero":
        return 0.0
    if policy == "fixed":
        return float(current)
    if policy != "adaptive":
        raise ValueError("unknown mu policy %r" % (policy,))
    return 1e-7 + 0.01 * relative_error(data, factors, observed_only=observed_only)


def _rel_error(data, factors, loss, sparse_split):
    if isinstance(data, SparseTensor):
        return relative_error(data, factors, observed_only=sparse_split)
    if loss.mask is not None:
        mask = loss.mask
        base = float(np.linalg.norm(data.values[mask]))
        if base == 0.0:
            raise ValueError("relative error undefined: observed entries all zero")
        diff = data.values[mask] - full(factors).values[mask]
        return float(np.linalg.norm(diff) / base)
    return relative_error(data, factors)


def objective(data, factors, cfg):
    """Loss plus regularizer values at the given factors (indicator
    regularizers contribute zero; see ``constraint_violation``)."""
    loss, sparse_split = _resolve_loss(data, cfg.loss)
    regs = _resolve_regs(cfg, data.ndim)
    if isinstance(data, SparseTensor):
        if sparse_split:
            est = model_at(factors, data.indices)
            val = loss_value(loss, data.values, est, mask=True)
        elif loss.kind == "least-squares":
            rel = relative_error(data, factors)
            val = 0.5 * (rel * data.norm()) ** 2
        else:
            dense = data.to_dense()
            val = loss_value(loss, dense.values, full(factors).values)
    else:
        val = loss_value(loss, data.values, full(factors).values)
    for spec, h in zip(regs, factors):
        val += reg_value(spec, h)
    if cfg.frobenius_weight > 0.0:
        val += 0.5 * cfg.frobenius_weight * sum(
            float(np.square(np.asarray(h)).sum()) for h in factors
        )
    return float(val)


def constraint_violation(factors, cfg, ndim=None):
    """Max feasibility violation across factors (0 when all feasible)."""
    regs = _resolve_regs(cfg, ndim if ndim is not None else len(factors))
    return max(violation(spec, h) for spec, h in zip(regs, factors))


def evaluate(data, factors, cfg):
    """Score saved factors against data: objective, relative error, and
    constraint violation under cfg's loss and regularizers."""
    validate_factors(factors, dims=data.dims)
    loss, sparse_split = _resolve_loss(data, cfg.loss)
    return {
        "objective": objective(data, factors, cfg),
        "rel_error": _rel_error(data, factors, loss, sparse_split),
        "violation": constraint_violation(factors, cfg, data.ndim),
    }


def _fresh_splits(data, sparse_split, ndim, shared, mask=None):
    count = 1 if shared else ndim
    if sparse_split:
        return [SparseSplitState.fresh(data.values) for _ in range(count)]
    values = data.values
    if mask is not None:
        # unobserved placeholders must never reach the solver
        values = np.where(mask, values, 0.0)
    return [DenseSplitState.fresh(values) for _ in range(count)]


def fit(data, cfg, callback=None):
    """Run alternating optimization from a fresh (or provided) start.

    Returns a FitResult; ``callback`` (if given) sees every TraceRecord as it
    is appended.  ``cfg.outer_max_iter == 0`` returns the initialization with
    an empty trace.
    """
    if not isinstance(data, (DenseTensor, SparseTensor)):
        raise TypeError("data must be a DenseTensor or SparseTensor")
    loss, sparse_split = _resolve_loss(data, cfg.loss)
    if loss.kind == "kl":
        vals = data.values
        if np.any(vals < 0.0):
            raise ValueError("kl loss needs nonnegative data")
    regs = _resolve_regs(cfg, data.ndim)
    work = data
    if isinstance(data, SparseTensor) and loss.needs_split and not sparse_split:
        work = data.to_dense()  # zeros semantics for unmasked robust kinds
    ndim = work.ndim
    mu_policy = _resolve_mu_policy(cfg, ndim)
    rng = np.random.default_rng(cfg.seed)
    factors = init_factors(work, cfg, rng)
    rank = validate_factors(factors, dims=work.dims, rank=cfg.rank)
    duals = [np.zeros((n, rank)) for n in work.dims]
    shared = cfg.split_state == "shared"
    splits = None
    if loss.needs_split:
        splits = _fresh_splits(work, sparse_split, ndim, shared, mask=loss.mask)
    counters = admm.Counters()
    masked = loss.needs_split and (sparse_split or loss.mask is not None)
    mu = 0.0
    if mu_policy == "fixed":
        mu = cfg.mu_fixed
    elif mu_policy == "adaptive":
        mu = update_mu(work, factors, "adaptive", observed_only=masked)
    trace = []
    converged = False
    stall = 0
    prev_obj = None
    start = time.perf_counter()
    for it in range(1, cfg.outer_max_iter + 1):
        inner_counts = []
        for mode in range(ndim):
            cache = admm.build_cache(
                factors, mode, work, mu=mu, loss_kind=loss.kind,
                ridge=cfg.frobenius_weight, lemma_ratio=cfg.lemma_ratio,
                deterministic=cfg.deterministic, counters=counters)
            anchor = factors[mode].copy() if mu > 0.0 else None
            if loss.needs_split:
                state = splits[0] if shared else splits[mode]
                if shared and sparse_split and state.htilde_prev is not None \
                        and state.mode != mode:
                    # mode switch under a shared sparse state: the off-support
                    # part of Ytilde is re-anchored at the current model
                    state.htilde_prev = factors[mode].T.copy()
                    state.mode = mode
                h, u, state, rep = admm.admm_general(
                    cache, work, factors, factors[mode], duals[mode], state,
                    regs[mode], loss, eps=cfg.inner_eps,
                    max_iter=cfg.inner_max_iter, h_prev_outer=anchor,
                    counters=counters)
                if shared:
                    splits[0] = state
                else:
                    splits[mode] = state
            else:
                h, u, rep = admm.admm_ls(
                    cache, cache.f, factors[mode], duals[mode], regs[mode],
                    eps=cfg.inner_eps, max_iter=cfg.inner_max_iter,
                    h_prev_outer=anchor, counters=counters)
            factors[mode] = h
            duals[mode] = u
            inner_counts.append(rep.iterations)
        obj = objective(work, factors, replace(cfg, loss=loss))
        if not math.isfinite(obj):
            raise FloatingPointError("objective became non-finite at outer iteration %d" % it)
        rel = _rel_error(work, factors, loss, sparse_split)
        viol = constraint_violation(factors, cfg, ndim)
        if mu_policy == "adaptive":
            mu = update_mu(work, factors, "adaptive", observed_only=masked)
        snap = None
        if cfg.checkpoint_every > 0 and it % cfg.checkpoint_every == 0:
            snap = [h.copy() for h in factors]
        record = TraceRecord(it, obj, rel, tuple(inner_counts),
                             time.perf_counter() - start, mu, viol, snap)
        trace.append(record)
        if callback is not None:
            callback(record)
        if prev_obj is not None and abs(obj - prev_obj) <= cfg.outer_tol * (1.0 + abs(prev_obj)):
            stall += 1
        else:
            stall = 0
        prev_obj = obj
        if stall >= 2:
            converged = True
            break
    return FitResult(factors, trace, converged, mu, counters)


def fit_two_stage(data, cfg, callback=None):
    """Least-squares warm start followed by the true loss.

    Stage 1 runs ``stage1_fraction`` of the outer budget with the
    least-squares surrogate (masked problems keep their mask and use the
    masked least-squares kind); stage 2 continues from stage 1's factors
    under the configured loss.  Traces are spliced, counters summed.
    """
    if not cfg.loss.needs_split:
        raise ValueError("two-stage fitting is for non-least-squares losses")
    n1 = int(round(cfg.stage1_fraction * cfg.outer_max_iter))
    loss, sparse_split = _resolve_loss(data, cfg.loss)
    if sparse_split or loss.mask is not None:
        stage1_loss = LossSpec("missing", mask=loss.mask, mask_source=loss.mask_source)
    else:
        stage1_loss = LossSpec("least-squares")
    first = replace(cfg, loss=stage1_loss, outer_max_iter=n1)
    res1 = fit(data, first, callback=callback)
    second = replace(cfg, init="provided", init_factors=res1.factors,
                     outer_max_iter=cfg.outer_max_iter - n1)
    offset_iter = len(res1.trace)
    offset_time = res1.trace[-1].elapsed_s if res1.trace else 0.0

    def shifted(rec):
        return replace(rec, iteration=rec.iteration + offset_iter,
                       elapsed_s=rec.elapsed_s + offset_time)

    cb2 = None if callback is None else (lambda rec: callback(shifted(rec)))
    res2 = fit(data, second, callback=cb2)
    trace = list(res1.trace) + [shifted(r) for r in res2.trace]
    converged = res2.converged if second.outer_max_iter > 0 else res1.converged
    return FitResult(res2.factors, trace, converged, res2.mu,
                     res1.counters.merged(res2.counters))
