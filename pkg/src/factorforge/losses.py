"""Elementwise data-fit terms and their splitting-variable updates.

Each loss l(y, yhat) is handled inside the inner solver through the scaled
update

    ytilde = argmin_t  l(y, t) + 1/2 (t - ybar)^2

(the penalty on the data split is fixed at 1), which has a closed form for
every supported kind.  ``mask`` marks observed entries: unlisted entries are
unconstrained by the loss (their update is ytilde = ybar).
"""

import math
from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("least-squares", "missing", "l1", "huber", "kl")


@dataclass
class LossSpec:
    """kind plus per-kind parameters.

    lam          huber transition half-width (> 0); unused elsewhere
    mask         observed-entry marker: boolean array shaped like the data,
                 or None.  Required for kind="missing" on dense data;
                 for sparse data, None means "the stored entries".
    mask_source  "explicit" or "unlisted-entries" (serialization detail:
                 how the mask is derived when loading a problem)
    """

    kind: str = "least-squares"
    lam: float = 1.0
    mask: object = None
    mask_source: str = "explicit"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError("unknown loss kind %r" % (self.kind,))
        if self.kind == "huber" and not (self.lam > 0.0 and math.isfinite(self.lam)):
            raise ValueError("huber needs lam > 0, got %r" % (self.lam,))
        if self.mask_source not in ("explicit", "unlisted-entries"):
            raise ValueError("unknown mask_source %r" % (self.mask_source,))

    @property
    def needs_split(self):
        return self.kind != "least-squares"


def y_update(spec, y, ybar, mask=None):
    """Closed-form minimizer of l(y, t) + 1/2 (t - ybar)^2, elementwise.

    ``mask`` overrides spec.mask; where the mask is False the result is ybar.
    """
    y = np.asarray(y, dtype=np.float64)
    ybar = np.asarray(ybar, dtype=np.float64)
    if mask is None:
        mask = spec.mask
    kind = spec.kind
    if kind == "least-squares":
        out = 0.5 * (y + ybar)
    elif kind == "missing":
        if mask is None:
            raise ValueError("missing loss needs a mask")
        out = 0.5 * (y + ybar)
    elif kind == "l1":
        d = ybar - y
        out = np.where(np.abs(d) <= 1.0, y, ybar - np.sign(d))
    elif kind == "huber":
        d = ybar - y
        near = np.abs(d) <= 2.0 * spec.lam
        out = np.where(near, 0.5 * (y + ybar), ybar - np.sign(d) * spec.lam)
    elif kind == "kl":
        if np.any(y < 0.0):
            raise ValueError("kl loss needs nonnegative data")
        out = _kl_root(y, ybar)
    else:
        raise ValueError("unknown loss kind %r" % (kind,))
    if kind != "least-squares" and mask is not None:
        out = np.where(mask, out, ybar)
    return out


def _kl_root(y, ybar):
    # positive root of t^2 - (ybar - 1) t - y = 0.  The textbook form
    # ((ybar-1) + sqrt((ybar-1)^2 + 4y)) / 2 cancels catastrophically when
    # ybar - 1 << 0; the rationalized form 2y / (sqrt(.) + (1 - ybar)) does
    # not.  Pick per sign of (ybar - 1).
    b = ybar - 1.0
    disc = np.sqrt(b * b + 4.0 * y)
    naive = 0.5 * (b + disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        rational = np.where(disc - b != 0.0, (2.0 * y) / (disc - b), 0.0)
    return np.where(b >= 0.0, naive, rational)


def v_update(v, ytilde, model):
    """Scaled dual ascent for the data split: v + (ytilde - model)."""
    return v + (np.asarray(ytilde) - np.asarray(model))


def loss_value(spec, y, yhat, mask=None):
    """Total loss l(y, yhat) summed over (observed) entries."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if mask is None:
        mask = spec.mask
    kind = spec.kind
    if kind == "least-squares":
        r = y - yhat
        val = 0.5 * np.square(r)
    elif kind == "missing":
        if mask is None:
            raise ValueError("missing loss needs a mask")
        val = 0.5 * np.square(y - yhat)
    elif kind == "l1":
        val = np.abs(y - yhat)
    elif kind == "huber":
        d = np.abs(y - yhat)
        lam = spec.lam
        val = np.where(d <= lam, 0.5 * np.square(d), lam * d - 0.5 * lam * lam)
    elif kind == "kl":
        if np.any(y < 0.0):
            raise ValueError("kl loss needs nonnegative data")
        if np.any(yhat <= 0.0):
            return math.inf
        with np.errstate(divide="ignore", invalid="ignore"):
            ylog = np.where(y > 0.0, y * np.log(np.where(y > 0.0, y, 1.0) / yhat), 0.0)
        val = ylog - y + yhat
    else:
        raise ValueError("unknown loss kind %r" % (kind,))
    if kind != "least-squares" and mask is not None:
        val = np.where(mask, val, 0.0)
    return float(val.sum())


@dataclass
class DenseSplitState:
    """Split variables for general losses on dense data: both tensors are
    shaped like the data."""

    ytilde: np.ndarray
    v: np.ndarray

    @classmethod
    def fresh(cls, data_values):
        return cls(np.asarray(data_values, dtype=np.float64).copy(),
                   np.zeros_like(data_values, dtype=np.float64))

    def copy(self):
        return DenseSplitState(self.ytilde.copy(), self.v.copy())


@dataclass
class SparseSplitState:
    """Split variables for masked losses on sparse data whose mask equals the
    stored support.  Off-support, the optimal ytilde equals the running model
    W @ Htilde, so only observed-entry vectors plus the last inner-solver
    iterate are kept (low-rank-plus-sparse form; never densified).  ``mode``
    records which factor htilde_prev belongs to.
    """

    ytilde_obs: np.ndarray
    v_obs: np.ndarray
    htilde_prev: "np.ndarray | None" = None
    mode: "int | None" = None

    @classmethod
    def fresh(cls, obs_values):
        v = np.asarray(obs_values, dtype=np.float64)
        return cls(v.copy(), np.zeros_like(v), None, None)

    def copy(self):
        hp = None if self.htilde_prev is None else self.htilde_prev.copy()
        return SparseSplitState(self.ytilde_obs.copy(), self.v_obs.copy(), hp,
                                self.mode)
