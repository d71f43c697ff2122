"""Tensor and factor persistence.

Formats:

* ``coo``            text; header line ``N n_1 ... n_N`` then one
                     ``i_1 ... i_N value`` line per stored entry, indices
                     1-based.  Loads to SparseTensor.
* ``matrix-market``  2-mode only, via scipy.io (dense array or coordinate).
* ``dense-binary``   numpy ``.npy`` holding the dense value array.

Factor sets are written one Matrix Market file per mode next to a JSON
manifest (dims, rank, seed, config hash, file list).
"""

import io
import json
import os

import numpy as np
import scipy.io
import scipy.sparse

from .tensors import DenseTensor, SparseTensor

FORMATS = ("coo", "matrix-market", "dense-binary")

_EXTENSIONS = {
    ".coo": "coo",
    ".txt": "coo",
    ".mtx": "matrix-market",
    ".mm": "matrix-market",
    ".npy": "dense-binary",
}

MANIFEST_NAME = "manifest.json"


class TensorFormatError(ValueError):
    """Malformed tensor file; the message carries the 1-based line number."""


def infer_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _EXTENSIONS:
        raise TensorFormatError(
            "cannot infer format from extension %r (known: %s)"
            % (ext, ", ".join(sorted(_EXTENSIONS)))
        )
    return _EXTENSIONS[ext]


def load_tensor(path, fmt=None):
    """Read a tensor; ``fmt`` defaults to extension-based inference."""
    fmt = fmt or infer_format(path)
    if fmt == "coo":
        return _load_coo(path)
    if fmt == "matrix-market":
        try:
            mat = scipy.io.mmread(str(path))
        except Exception as exc:
            raise TensorFormatError("%s: %s" % (path, exc)) from exc
        if scipy.sparse.issparse(mat):
            coo = mat.tocoo()
            return SparseTensor(coo.shape, np.column_stack([coo.row, coo.col]),
                                coo.data)
        return DenseTensor(np.asarray(mat, dtype=np.float64))
    if fmt == "dense-binary":
        arr = np.load(str(path), allow_pickle=False)
        return DenseTensor(arr)
    raise ValueError("unknown format %r" % (fmt,))


def save_tensor(t, path, fmt=None):
    """Write a tensor; ``fmt`` defaults to extension-based inference."""
    fmt = fmt or infer_format(path)
    if fmt == "coo":
        if not isinstance(t, SparseTensor):
            raise TypeError("coo format stores sparse tensors")
        _save_coo(t, path)
        return
    if fmt == "matrix-market":
        if t.ndim != 2:
            raise ValueError("matrix-market stores 2-mode tensors, got %d modes" % t.ndim)
        if isinstance(t, SparseTensor):
            mat = scipy.sparse.coo_matrix(
                (t.values, (t.indices[:, 0], t.indices[:, 1])), shape=t.dims)
            scipy.io.mmwrite(str(path), mat)
        else:
            scipy.io.mmwrite(str(path), t.values)
        return
    if fmt == "dense-binary":
        if not isinstance(t, DenseTensor):
            raise TypeError("dense-binary stores dense tensors")
        np.save(str(path), t.values)
        return
    raise ValueError("unknown format %r" % (fmt,))


def _load_coo(path):
    with open(path, "r", encoding="utf-8") as fh:
        return _parse_coo(fh, str(path))


def _parse_coo(fh, name):
    dims = None
    indices = []
    values = []
    first_line = {}
    for lineno, raw in enumerate(fh, start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if dims is None:
            try:
                header = [int(t) for t in tokens]
            except ValueError as exc:
                raise TensorFormatError(
                    "%s line %d: header must be integers (N n_1 ... n_N): %s"
                    % (name, lineno, exc)) from exc
            if len(header) < 1 or header[0] != len(header) - 1:
                raise TensorFormatError(
                    "%s line %d: header says %d modes but lists %d sizes"
                    % (name, lineno, header[0] if header else 0, len(header) - 1))
            if header[0] < 2:
                raise TensorFormatError(
                    "%s line %d: need at least 2 modes" % (name, lineno))
            dims = header[1:]
            if any(n < 1 for n in dims):
                raise TensorFormatError(
                    "%s line %d: mode sizes must be positive" % (name, lineno))
            continue
        if len(tokens) != len(dims) + 1:
            raise TensorFormatError(
                "%s line %d: expected %d tokens (%d indices + value), got %d"
                % (name, lineno, len(dims) + 1, len(dims), len(tokens)))
        try:
            idx = [int(t) for t in tokens[:-1]]
        except ValueError as exc:
            raise TensorFormatError(
                "%s line %d: bad index: %s" % (name, lineno, exc)) from exc
        for d, (i, n) in enumerate(zip(idx, dims)):
            if not 1 <= i <= n:
                raise TensorFormatError(
                    "%s line %d: index %d out of range [1, %d] in mode %d"
                    % (name, lineno, i, n, d + 1))
        try:
            val = float(tokens[-1])
        except ValueError as exc:
            raise TensorFormatError(
                "%s line %d: bad value %r" % (name, lineno, tokens[-1])) from exc
        if not np.isfinite(val):
            raise TensorFormatError(
                "%s line %d: non-finite value %r" % (name, lineno, tokens[-1]))
        key = tuple(idx)
        if key in first_line:
            raise TensorFormatError(
                "%s line %d: duplicate entry %r (first at line %d)"
                % (name, lineno, key, first_line[key]))
        first_line[key] = lineno
        indices.append([i - 1 for i in idx])
        values.append(val)
    if dims is None:
        raise TensorFormatError("%s: empty file, missing header" % name)
    idx_arr = np.asarray(indices, dtype=np.int64).reshape(len(values), len(dims))
    return SparseTensor(dims, idx_arr, np.asarray(values))


def _save_coo(t, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("%d %s\n" % (t.ndim, " ".join(str(n) for n in t.dims)))
        for row, val in zip(t.indices, t.values):
            fh.write("%s %s\n" % (" ".join(str(i + 1) for i in row), repr(float(val))))


def loads_coo(text, name="<string>"):
    return _parse_coo(io.StringIO(text), name)


def save_factors(factors, outdir, *, seed=None, config_hash=None, extra=None):
    """Write one Matrix Market file per factor plus manifest.json."""
    os.makedirs(outdir, exist_ok=True)
    files = []
    for d, h in enumerate(factors):
        fname = "factor_%d.mtx" % d
        scipy.io.mmwrite(os.path.join(outdir, fname), np.asarray(h, dtype=np.float64))
        files.append(fname)
    manifest = {
        "dims": [int(np.asarray(h).shape[0]) for h in factors],
        "rank": int(np.asarray(factors[0]).shape[1]),
        "seed": seed,
        "config_hash": config_hash,
        "format": "matrix-market",
        "files": files,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(outdir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_factors(indir):
    """Read back a factor directory written by save_factors."""
    with open(os.path.join(indir, MANIFEST_NAME), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    factors = []
    for fname in manifest["files"]:
        mat = scipy.io.mmread(os.path.join(indir, fname))
        if scipy.sparse.issparse(mat):
            mat = mat.toarray()
        factors.append(np.asarray(mat, dtype=np.float64))
    dims = [h.shape[0] for h in factors]
    if dims != list(manifest["dims"]):
        raise TensorFormatError(
            "factor files disagree with manifest dims: %r vs %r"
            % (dims, manifest["dims"]))
    return factors, manifest
