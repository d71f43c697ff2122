"""Dense/sparse tensor containers and the multilinear kernels built on them.

Conventions used throughout:

* modes are numbered 0..N-1 in code (file formats are 1-based),
* a factor set for an N-way tensor is a list of N arrays, each n_d x k,
* ``matricize(t, d)`` produces the unfolding whose columns are mode-d fibers,
  rows ordered so that the remaining modes vary with the *last* mode fastest
  (row = sum over j != d of i_j * stride_j, stride_j = prod of n_{j'} for
  j' > j, j' != d),
* ``khatri_rao`` is the columnwise Kronecker product taken left to right with
  the first matrix's row index varying slowest, which makes
  matricize(full(H), d) == kr_skip(H, d) @ H[d].T hold exactly.
"""

import numpy as np

# Hard cap on elements for any dense expansion (full tensors, dense
# matricizations).  Guards against accidentally materializing huge models.
ELEMENT_BUDGET = 100_000_000

_AXIS_LETTERS = "abcdefghijklmnopqrstuvwxy"
_RANK_LETTER = "z"


class BudgetError(ValueError):
    """Raised when a dense expansion would exceed ELEMENT_BUDGET elements."""


def _check_budget(dims, what):
    total = 1
    for n in dims:
        total *= int(n)
    if total > ELEMENT_BUDGET:
        raise BudgetError(
            "%s would materialize %d elements (budget %d)"
            % (what, total, ELEMENT_BUDGET)
        )
    return total


class DenseTensor:
    """Dense N-way array, N >= 2, stored as a float ndarray."""

    __slots__ = ("values",)

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim < 2:
            raise ValueError("DenseTensor needs at least 2 modes, got %d" % values.ndim)
        if any(n < 1 for n in values.shape):
            raise ValueError("all mode sizes must be positive, got %r" % (values.shape,))
        self.values = values

    @classmethod
    def from_flat(cls, dims, flat):
        """Build from a flat value list in the canonical linear order
        (first index fastest, last index slowest)."""
        dims = tuple(int(n) for n in dims)
        flat = np.asarray(flat, dtype=np.float64).ravel()
        total = _check_budget(dims, "dense tensor")
        if flat.size != total:
            raise ValueError("expected %d values for dims %r, got %d" % (total, dims, flat.size))
        return cls(flat.reshape(dims, order="F"))

    @property
    def dims(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def norm(self):
        return float(np.linalg.norm(self.values.ravel()))

    def to_flat(self):
        """Values in the canonical linear order (first index fastest)."""
        return self.values.ravel(order="F").copy()

    def __repr__(self):
        return "DenseTensor(dims=%r)" % (self.dims,)


class SparseTensor:
    """COO-style sparse N-way tensor: 0-based integer index rows plus values.

    Entries are kept in canonical order (sorted by linearized index, first
    index fastest); duplicate index rows are rejected.
    """

    __slots__ = ("shape_", "indices", "values")

    def __init__(self, dims, indices, values):
        dims = tuple(int(n) for n in dims)
        if len(dims) < 2:
            raise ValueError("SparseTensor needs at least 2 modes")
        if any(n < 1 for n in dims):
            raise ValueError("all mode sizes must be positive, got %r" % (dims,))
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64).ravel()
        if indices.ndim != 2 or indices.shape[1] != len(dims):
            raise ValueError(
                "indices must be (nnz, %d), got %r" % (len(dims), indices.shape)
            )
        if indices.shape[0] != values.size:
            raise ValueError("index rows and values disagree: %d vs %d" % (indices.shape[0], values.size))
        if indices.size:
            if indices.min() < 0:
                raise ValueError("negative index entry")
            if (indices >= np.asarray(dims, dtype=np.int64)).any():
                raise ValueError("index entry out of range for dims %r" % (dims,))
        lin = _linearize(indices, dims)
        order = np.argsort(lin, kind="stable")
        lin = lin[order]
        if lin.size > 1 and (np.diff(lin) == 0).any():
            where = int(np.flatnonzero(np.diff(lin) == 0)[0])
            dup = indices[order[where]]
            raise ValueError("duplicate entry at index %r" % (tuple(int(i) for i in dup),))
        self.shape_ = dims
        self.indices = np.ascontiguousarray(indices[order])
        self.values = np.ascontiguousarray(values[order])

    @property
    def dims(self):
        return self.shape_

    @property
    def ndim(self):
        return len(self.shape_)

    @property
    def nnz(self):
        return self.values.size

    def norm(self):
        return float(np.linalg.norm(self.values))

    def to_dense(self):
        _check_budget(self.shape_, "densified sparse tensor")
        out = np.zeros(self.shape_)
        out[tuple(self.indices.T)] = self.values
        return DenseTensor(out)

    def __repr__(self):
        return "SparseTensor(dims=%r, nnz=%d)" % (self.shape_, self.nnz)


def _linearize(indices, dims):
    # canonical linear index: first mode fastest
    if indices.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.ravel_multi_index(tuple(indices.T), dims, order="F")


def validate_factors(factors, dims=None, rank=None):
    """Check a factor list: 2-D, finite, shared column count (and sizes/rank
    when given).  Returns the shared rank."""
    if not factors:
        raise ValueError("empty factor list")
    k = None
    for d, h in enumerate(factors):
        h = np.asarray(h)
        if h.ndim != 2:
            raise ValueError("factor %d is not a matrix" % d)
        if not np.isfinite(h).all():
            raise ValueError("factor %d has non-finite entries" % d)
        if k is None:
            k = h.shape[1]
        elif h.shape[1] != k:
            raise ValueError(
                "factor %d has %d columns, expected %d" % (d, h.shape[1], k)
            )
        if dims is not None and h.shape[0] != dims[d]:
            raise ValueError(
                "factor %d has %d rows, mode size is %d" % (d, h.shape[0], dims[d])
            )
    if rank is not None and k != rank:
        raise ValueError("factors have %d columns, expected rank %d" % (k, rank))
    return k


def matricize(t, mode):
    """Mode-``mode`` unfolding of a DenseTensor as a (prod other dims) x n_mode
    array.  Column j is the j-th mode fiber; rows enumerate the remaining
    indices with the last tensor mode varying fastest."""
    if isinstance(t, SparseTensor):
        raise TypeError("matricize is dense-only; use mttkrp for sparse data")
    a = t.values
    n = a.ndim
    if not 0 <= mode < n:
        raise ValueError("mode %d out of range for %d-way tensor" % (mode, n))
    _check_budget(a.shape, "matricization")
    return np.moveaxis(a, mode, -1).reshape(-1, a.shape[mode])


def khatri_rao(mats):
    """Columnwise Kronecker product of a list of matrices sharing k columns.

    Taken left to right; the first matrix's row index varies slowest in the
    output rows.  A single matrix is returned as-is (copy).
    """
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise ValueError("khatri_rao of empty list")
    k = validate_factors(mats)
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, k)
    return out.copy() if len(mats) == 1 else out


def kr_skip(factors, mode):
    """khatri_rao of all factors except ``mode``, order preserved."""
    rest = [h for d, h in enumerate(factors) if d != mode]
    if not rest:
        raise ValueError("kr_skip needs at least 2 factors")
    return khatri_rao(rest)


def gram_hadamard(factors, mode):
    """Hadamard product of H_j^T H_j over all j != mode (k x k, symmetric)."""
    k = validate_factors(factors)
    out = np.ones((k, k))
    for d, h in enumerate(factors):
        if d == mode:
            continue
        h = np.asarray(h, dtype=np.float64)
        out *= h.T @ h
    # exact symmetry costs nothing and downstream Cholesky expects it
    return (out + out.T) / 2.0


def mttkrp(t, factors, mode, deterministic=False):
    """Matricized-tensor times Khatri-Rao product, returned k x n_mode.

    Equals kr_skip(factors, mode).T @ matricize(t, mode) without forming
    either operand densely.  ``deterministic`` forces a fixed reduction
    order (bitwise-reproducible across thread counts).
    """
    n = t.ndim
    if not 0 <= mode < n:
        raise ValueError("mode %d out of range for %d-way tensor" % (mode, n))
    validate_factors(factors, dims=t.dims)
    if isinstance(t, SparseTensor):
        return _mttkrp_sparse(t.indices, t.values, t.dims, factors, mode)
    if n > len(_AXIS_LETTERS):
        raise ValueError("dense mttkrp supports up to %d modes" % len(_AXIS_LETTERS))
    letters = _AXIS_LETTERS[:n]
    inputs = [letters]
    operands = [t.values]
    for d in range(n):
        if d == mode:
            continue
        inputs.append(letters[d] + _RANK_LETTER)
        operands.append(np.asarray(factors[d], dtype=np.float64))
    sub = ",".join(inputs) + "->" + _RANK_LETTER + letters[mode]
    optimize = False if deterministic else "greedy"
    return np.einsum(sub, *operands, optimize=optimize)


def _mttkrp_sparse(indices, values, dims, factors, mode):
    k = factors[0].shape[1]
    if values.size == 0:
        return np.zeros((k, dims[mode]))
    prod = values[:, None] * np.ones((1, k))
    for d in range(len(dims)):
        if d == mode:
            continue
        prod *= np.asarray(factors[d], dtype=np.float64)[indices[:, d], :]
    out = np.zeros((dims[mode], k))
    # np.add.at applies updates sequentially in index order: deterministic
    np.add.at(out, indices[:, mode], prod)
    return out.T


def model_at(factors, indices):
    """Model values sum_r prod_d H_d[i_d, r] at the given (nnz, N) index rows."""
    indices = np.asarray(indices, dtype=np.int64)
    k = validate_factors(factors)
    prod = np.ones((indices.shape[0], k))
    for d, h in enumerate(factors):
        prod *= np.asarray(h, dtype=np.float64)[indices[:, d], :]
    return prod.sum(axis=1)


def full(factors):
    """Expand a factor list into the DenseTensor it models."""
    validate_factors(factors)
    dims = tuple(np.asarray(h).shape[0] for h in factors)
    _check_budget(dims, "full model tensor")
    n = len(dims)
    if n > len(_AXIS_LETTERS):
        raise ValueError("full supports up to %d modes" % len(_AXIS_LETTERS))
    letters = _AXIS_LETTERS[:n]
    sub = ",".join(l + _RANK_LETTER for l in letters) + "->" + letters
    vals = np.einsum(sub, *[np.asarray(h, dtype=np.float64) for h in factors])
    return DenseTensor(vals)


def relative_error(t, factors, observed_only=False):
    """|| t - model ||_F / || t ||_F.

    For sparse ``t`` with ``observed_only`` the norm runs over stored entries
    only; otherwise unlisted entries count as zeros (computed via the Gram
    identity, never densified).  Raises on zero-norm data.
    """
    data_norm = t.norm()
    if data_norm == 0.0:
        raise ValueError("relative error undefined for zero-norm data")
    if isinstance(t, DenseTensor):
        model = full(factors)
        return float(np.linalg.norm((t.values - model.values).ravel()) / data_norm)
    validate_factors(factors, dims=t.dims)
    est = model_at(factors, t.indices)
    if observed_only:
        return float(np.linalg.norm(t.values - est) / data_norm)
    # ||Y - M||^2 = ||Y||^2 - 2 <Y, M>_obs + ||M||^2, with
    # ||M||^2 = 1^T (hadamard of all grams) 1
    gram = np.ones((factors[0].shape[1],) * 2)
    for h in factors:
        h = np.asarray(h, dtype=np.float64)
        gram *= h.T @ h
    sq = data_norm**2 - 2.0 * float(np.dot(t.values, est)) + float(gram.sum())
    return float(np.sqrt(max(sq, 0.0)) / data_norm)
