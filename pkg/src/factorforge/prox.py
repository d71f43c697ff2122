"""Proximal operators for the factor-matrix regularizers.

Every operator evaluates prox_{g/rho}(Hbar) = argmin_H g(H) + rho/2 ||H - Hbar||_F^2
in closed form (or via one banded solve).  Specs are declarative and
serializable; ``prox_apply`` dispatches on the kind.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

KINDS = (
    "none",
    "nonneg",
    "box",
    "l1",
    "simplex",
    "smooth",
    "tikhonov",
    "unit-norm-columns",
    "nonneg-composed",
)

# kinds that are pure indicator constraints (objective contribution 0)
INDICATOR_KINDS = {"none", "nonneg", "box", "simplex", "unit-norm-columns"}


@dataclass(frozen=True)
class RegularizerSpec:
    """Declarative description of one factor's regularizer.

    kind        one of KINDS
    lam         weight for l1 / smooth / tikhonov (must be > 0 there)
    lo, hi      box bounds (lo <= hi)
    axis        simplex slices: "columns" or "rows"
    inner       nested spec for kind="nonneg-composed" (clamp, then inner op)
    ones_cols   factor columns reset to all-ones after the operator (bias
                columns for completion models); empty for none
    """

    kind: str = "none"
    lam: float = 0.0
    lo: float = 0.0
    hi: float = 1.0
    axis: str = "columns"
    inner: "RegularizerSpec | None" = None
    ones_cols: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError("unknown regularizer kind %r" % (self.kind,))
        if self.kind in ("l1", "smooth", "tikhonov"):
            if not (self.lam > 0.0 and math.isfinite(self.lam)):
                raise ValueError("%s needs lam > 0, got %r" % (self.kind, self.lam))
        if self.kind == "box":
            if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
                raise ValueError("box bounds must be finite")
            if self.lo > self.hi:
                raise ValueError("box needs lo <= hi, got [%r, %r]" % (self.lo, self.hi))
        if self.kind == "simplex" and self.axis not in ("columns", "rows"):
            raise ValueError("simplex axis must be 'columns' or 'rows'")
        if self.kind == "nonneg-composed":
            if self.inner is None:
                raise ValueError("nonneg-composed needs an inner spec")
            if self.inner.kind in ("nonneg-composed", "simplex"):
                raise ValueError("nonneg-composed cannot nest %r" % (self.inner.kind,))
        elif self.inner is not None:
            raise ValueError("inner spec only valid for nonneg-composed")
        object.__setattr__(self, "ones_cols", tuple(int(c) for c in self.ones_cols))


def prox_apply(spec, hbar, rho):
    """Apply spec's proximal operator at penalty rho to the matrix hbar."""
    hbar = np.asarray(hbar, dtype=np.float64)
    if not np.isfinite(hbar).all():
        raise ValueError("prox input has non-finite entries")
    if not (rho > 0.0 and math.isfinite(rho)):
        raise ValueError("prox needs finite rho > 0, got %r" % (rho,))
    out = _dispatch(spec, hbar, rho)
    if spec.ones_cols:
        for c in spec.ones_cols:
            if not 0 <= c < out.shape[1]:
                raise ValueError("ones column %d out of range for %d columns" % (c, out.shape[1]))
        out[:, list(spec.ones_cols)] = 1.0
    return out


def _dispatch(spec, hbar, rho):
    kind = spec.kind
    if kind == "none":
        return hbar.copy()
    if kind == "nonneg":
        return np.maximum(hbar, 0.0)
    if kind == "box":
        return np.clip(hbar, spec.lo, spec.hi)
    if kind == "l1":
        t = spec.lam / rho
        return np.sign(hbar) * np.maximum(np.abs(hbar) - t, 0.0)
    if kind == "simplex":
        if spec.axis == "columns":
            return _simplex_columns(hbar)
        return _simplex_columns(hbar.T).T
    if kind == "smooth":
        return _smooth(hbar, spec.lam, rho)
    if kind == "tikhonov":
        return (rho / (spec.lam + rho)) * hbar
    if kind == "unit-norm-columns":
        norms = np.linalg.norm(hbar, axis=0)
        return hbar / np.maximum(1.0, norms)[None, :]
    if kind == "nonneg-composed":
        return _dispatch(spec.inner, np.maximum(hbar, 0.0), rho)
    raise ValueError("unknown regularizer kind %r" % (kind,))


def _simplex_columns(v):
    # Euclidean projection of each column onto the probability simplex,
    # by sorting: tau is the largest threshold keeping the positive part
    # summing to one.
    n = v.shape[0]
    u = np.sort(v, axis=0)[::-1, :]
    css = np.cumsum(u, axis=0) - 1.0
    idx = np.arange(1, n + 1, dtype=np.float64)[:, None]
    cond = u - css / idx > 0.0
    # last True per column; every column has at least one (the largest entry)
    rho_i = n - 1 - np.argmax(cond[::-1, :], axis=0)
    tau = css[rho_i, np.arange(v.shape[1])] / (rho_i + 1.0)
    return np.maximum(v - tau[None, :], 0.0)


def _smooth(hbar, lam, rho):
    # minimize lam/2 ||T h||^2 + rho/2 ||h - hbar||^2 columnwise, T the
    # (n x n) second-difference stencil tridiag(-1, 2, -1); the normal matrix
    # lam T^T T + rho I is pentadiagonal symmetric positive definite.
    n = hbar.shape[0]
    diag = np.full(n, 4.0)
    if n > 1:
        diag[0] += 1.0
        diag[-1] += 1.0
        diag[1:-1] += 2.0
    ab = np.zeros((3, n))
    ab[2, :] = lam * diag + rho
    if n > 1:
        ab[1, 1:] = lam * -4.0
    if n > 2:
        ab[0, 2:] = lam * 1.0
    return solveh_banded(ab, rho * hbar, lower=False)


def reg_value(spec, h):
    """Objective contribution g(H).  Indicator kinds contribute 0; use
    ``violation`` for their feasibility residual."""
    h = np.asarray(h, dtype=np.float64)
    if spec.kind in INDICATOR_KINDS:
        base = 0.0
    elif spec.kind == "l1":
        base = spec.lam * float(np.abs(h).sum())
    elif spec.kind == "smooth":
        base = 0.5 * spec.lam * float(np.square(_second_diff(h)).sum())
    elif spec.kind == "tikhonov":
        base = 0.5 * spec.lam * float(np.square(h).sum())
    elif spec.kind == "nonneg-composed":
        base = reg_value(spec.inner, h)
    else:
        raise ValueError("unknown regularizer kind %r" % (spec.kind,))
    return base


def violation(spec, h):
    """Max constraint violation of H against spec (0 when feasible)."""
    h = np.asarray(h, dtype=np.float64)
    worst = 0.0
    kind = spec.kind
    if kind in ("nonneg", "nonneg-composed"):
        worst = max(worst, float(np.maximum(-h, 0.0).max(initial=0.0)))
        if kind == "nonneg-composed":
            worst = max(worst, violation(spec.inner, h))
    if kind == "box":
        worst = max(worst, float(np.maximum(spec.lo - h, 0.0).max(initial=0.0)))
        worst = max(worst, float(np.maximum(h - spec.hi, 0.0).max(initial=0.0)))
    if kind == "simplex":
        sl = h if spec.axis == "columns" else h.T
        worst = max(worst, float(np.abs(sl.sum(axis=0) - 1.0).max(initial=0.0)))
        worst = max(worst, float(np.maximum(-sl, 0.0).max(initial=0.0)))
    if kind == "unit-norm-columns":
        norms = np.linalg.norm(h, axis=0)
        worst = max(worst, float(np.maximum(norms - 1.0, 0.0).max(initial=0.0)))
    if spec.ones_cols:
        cols = list(spec.ones_cols)
        worst = max(worst, float(np.abs(h[:, cols] - 1.0).max(initial=0.0)))
    return worst


def _second_diff(h):
    n = h.shape[0]
    t = 2.0 * h.copy()
    if n > 1:
        t[1:] -= h[:-1]
        t[:-1] -= h[1:]
    return t
