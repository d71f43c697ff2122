"""Inner ADMM solvers for one factor subproblem.

Each outer-loop step fixes all factors but one and solves

    min_H  l(Y, model) + g(H) + mu/2 ||H - H_prev||_F^2

with ADMM.  The quadratic kernel (Gram matrix, penalty rho, Cholesky factor,
and for least squares the MTTKRP right-hand side) is computed once per
subproblem and reused across inner iterations via ``KernelCache``.

Conventions: factor iterates H are n_d x k; the auxiliary iterate Htilde is
k x n_d (transposed system variable); scaled duals U share H's shape.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .losses import y_update
from .prox import prox_apply
from .tensors import DenseTensor, SparseTensor, full, gram_hadamard, mttkrp


class InitializationError(RuntimeError):
    """Gram matrix has zero trace: degenerate factors, re-draw the init."""


@dataclass
class Counters:
    """Work counters accumulated across a run."""

    factorizations: int = 0
    inner_iterations: int = 0
    mttkrp_calls: int = 0

    def merged(self, other):
        return Counters(
            self.factorizations + other.factorizations,
            self.inner_iterations + other.inner_iterations,
            self.mttkrp_calls + other.mttkrp_calls,
        )


@dataclass
class AdmmReport:
    iterations: int
    r: float
    s: float
    converged: bool


@dataclass
class KernelCache:
    """Per-subproblem quadratic kernel.

    chol factors either G + (rho+mu+ridge) I (k x k) or, on the inversion-
    lemma path for wide 2-mode problems (m < lemma_ratio * k), the small
    matrix (rho+mu+ridge) I + W W^T (m x m) with W the other factor.
    """

    mode: int
    gram: np.ndarray
    rho: float
    mu: float
    ridge: float
    chol: tuple
    lemma: bool = False
    w: "np.ndarray | None" = None
    f: "np.ndarray | None" = None

    @property
    def shift(self):
        return self.rho + self.mu + self.ridge


def build_cache(factors, mode, data=None, *, mu=0.0, loss_kind="least-squares",
                ridge=0.0, lemma_ratio=0.5, deterministic=False, counters=None):
    """Assemble the kernel for one subproblem.

    rho = trace(G)/k per the adaptive penalty rule; a zero-trace Gram raises
    InitializationError (caller should re-draw its initialization).  For the
    least-squares loss the MTTKRP right-hand side is computed here (``data``
    required); general losses recompute their right-hand side every inner
    iteration and pass data to the solver instead.
    """
    gram = gram_hadamard(factors, mode)
    k = gram.shape[0]
    trace = float(np.trace(gram))
    if not (trace > 0.0 and math.isfinite(trace)):
        raise InitializationError(
            "gram trace %r for mode %d; re-draw the initialization" % (trace, mode)
        )
    if mu < 0.0 or ridge < 0.0:
        raise ValueError("mu and ridge must be nonnegative")
    rho = trace / k
    shift = rho + mu + ridge
    lemma = False
    w = None
    if len(factors) == 2:
        other = np.asarray(factors[1 - mode], dtype=np.float64)
        m = other.shape[0]
        if m < lemma_ratio * k:
            lemma = True
            w = other.copy()
            chol = cho_factor(shift * np.eye(m) + w @ w.T, lower=True)
    if not lemma:
        chol = cho_factor(gram + shift * np.eye(k), lower=True)
    f = None
    if loss_kind == "least-squares":
        if data is None:
            raise ValueError("least-squares cache needs the data tensor")
        f = mttkrp(data, factors, mode, deterministic=deterministic)
        if counters is not None:
            counters.mttkrp_calls += 1
    if counters is not None:
        counters.factorizations += 1
    return KernelCache(mode=mode, gram=gram, rho=rho, mu=mu, ridge=ridge,
                       chol=chol, lemma=lemma, w=w, f=f)


def solve_ls_system(cache, rhs):
    """Solve (G + (rho+mu+ridge) I) X = rhs for X (same shape as rhs)."""
    rhs = np.asarray(rhs, dtype=np.float64)
    if not np.isfinite(rhs).all():
        raise ValueError("solver right-hand side has non-finite entries")
    if cache.lemma:
        # (W^T W + s I)^{-1} = s^{-1} (I - W^T (s I + W W^T)^{-1} W)
        inner = cho_solve(cache.chol, cache.w @ rhs)
        return (rhs - cache.w.T @ inner) / cache.shift
    return cho_solve(cache.chol, rhs)


def _ratio(num, den):
    if den > 0.0:
        return num / den
    return 0.0 if num == 0.0 else math.inf


def residuals(h, htilde, u, h_prev):
    """Squared relative primal/dual residuals (r, s) of one ADMM iteration."""
    ht = htilde.T
    r = _ratio(float(np.square(h - ht).sum()), float(np.square(h).sum()))
    s = _ratio(float(np.square(h - h_prev).sum()), float(np.square(u).sum()))
    return r, s


def _check_inner_args(eps, max_iter, floor):
    if not (eps > 0.0 and math.isfinite(eps)):
        raise ValueError("eps must be positive and finite, got %r" % (eps,))
    if int(max_iter) != max_iter or max_iter < floor:
        raise ValueError("max_iter must be an integer >= %d, got %r" % (floor, max_iter))


def admm_ls(cache, f, h, u, spec, eps=0.01, max_iter=10, h_prev_outer=None,
            counters=None):
    """Least-squares inner loop (cached right-hand side F = MTTKRP).

    Runs at most max_iter iterations of

        Htilde <- solve(F + rho (H + U)^T [+ mu H_prev^T])
        H      <- prox(Htilde^T - U)
        U      <- U + H - Htilde^T

    and stops early when both squared relative residuals drop below eps.
    Returns (H, U, AdmmReport); inputs are not mutated.
    """
    _check_inner_args(eps, max_iter, 1)
    rho = cache.rho
    f_eff = np.asarray(f, dtype=np.float64)
    if cache.mu > 0.0:
        anchor = h if h_prev_outer is None else h_prev_outer
        f_eff = f_eff + cache.mu * np.asarray(anchor).T
    converged = False
    r = s = math.inf
    it = 0
    for it in range(1, int(max_iter) + 1):
        h0 = h
        htilde = solve_ls_system(cache, f_eff + rho * (h + u).T)
        h = prox_apply(spec, htilde.T - u, rho)
        u = u + (h - htilde.T)
        r, s = residuals(h, htilde, u, h0)
        if counters is not None:
            counters.inner_iterations += 1
        if r < eps and s < eps:
            converged = True
            break
    return h, u, AdmmReport(it, r, s, converged)


def admm_general(cache, data, factors, h, u, split, spec, loss, eps=0.01,
                 max_iter=10, h_prev_outer=None, counters=None):
    """General-loss inner loop: alternates the factor block with the data
    split variable Ytilde (second penalty fixed at 1).

    ``split`` is a DenseSplitState (tensor-shaped Ytilde, V) or a
    SparseSplitState (observed-entry vectors; mask must equal the stored
    support).  The state is advanced in place and also returned.  max_iter=0
    is a no-op returning the inputs unchanged.
    """
    _check_inner_args(eps, max_iter, 0)
    mode = cache.mode
    rho = cache.rho
    mu_term = None
    if cache.mu > 0.0:
        anchor = h if h_prev_outer is None else h_prev_outer
        mu_term = cache.mu * np.asarray(anchor).T
    converged = False
    r = s = math.inf
    it = 0
    sparse = isinstance(data, SparseTensor)
    if sparse:
        idx = data.indices
        cols = idx[:, mode]
        k = cache.gram.shape[0]
        # W rows at observed entries; fixed while the other factors are fixed
        p = np.ones((idx.shape[0], k))
        for d in range(len(factors)):
            if d != mode:
                p *= np.asarray(factors[d], dtype=np.float64)[idx[:, d], :]
    for it in range(1, int(max_iter) + 1):
        h0 = h
        if sparse:
            if split.htilde_prev is None:
                f = np.zeros((k, h.shape[0]))
                wh_prev = np.zeros(idx.shape[0])
            else:
                f = cache.gram @ split.htilde_prev
                wh_prev = np.einsum("ej,je->e", p, split.htilde_prev[:, cols])
            corr = split.ytilde_obs + split.v_obs - wh_prev
            scat = np.zeros((h.shape[0], k))
            np.add.at(scat, cols, corr[:, None] * p)
            f = f + scat.T
        else:
            f = mttkrp(DenseTensor(split.ytilde + split.v), factors, mode)
        if counters is not None:
            counters.mttkrp_calls += 1
        rhs = f + rho * (h + u).T
        if mu_term is not None:
            rhs = rhs + mu_term
        htilde = solve_ls_system(cache, rhs)
        h = prox_apply(spec, htilde.T - u, rho)
        if sparse:
            wh = np.einsum("ej,je->e", p, htilde[:, cols])
            ybar = wh - split.v_obs
            split.ytilde_obs = y_update(loss, data.values, ybar, mask=True)
            split.v_obs = split.v_obs + (split.ytilde_obs - wh)
            split.htilde_prev = htilde.copy()
            split.mode = mode
        else:
            model_factors = list(factors)
            model_factors[mode] = htilde.T
            wh = full(model_factors).values
            ybar = wh - split.v
            split.ytilde = y_update(loss, data.values, ybar)
            split.v = split.v + (split.ytilde - wh)
        u = u + (h - htilde.T)
        r, s = residuals(h, htilde, u, h0)
        if counters is not None:
            counters.inner_iterations += 1
        if r < eps and s < eps:
            converged = True
            break
    return h, u, split, AdmmReport(it, r, s, converged)
