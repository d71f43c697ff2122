"""Run configuration: TOML in, canonical TOML out, stable hashing.

The schema is a small fixed tree (scalars, one level of named sections, an
array of tables for the per-mode regularizers), so serialization is done by
a local emitter; parsing uses tomllib/tomli.  Unknown keys are rejected --
a typo in a config should fail loudly, not silently fall back to a default.
"""

import hashlib
import json
import math
import os

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .driver import ProblemConfig
from .losses import LossSpec
from .prox import RegularizerSpec


class ConfigError(ValueError):
    """Bad run configuration (unknown key, wrong type, missing file)."""


DEFAULTS = {
    "run": {
        "input": "",
        "format": "",            # "" = infer from extension
        "output": "out",
        "log_cadence": 1,
        "plots": True,
        "factor_format": "matrix-market",
    },
    "problem": {
        "rank": 8,
        "seed": 0,
        "inner_eps": 0.01,
        "inner_max_iter": 10,
        "outer_max_iter": 200,
        "outer_tol": 1e-7,
        "mu_policy": "auto",
        "mu_fixed": 0.0,
        "frobenius_weight": 0.0,
        "deterministic": False,
        "init": "uniform01",
        "split_state": "per-mode",
        "lemma_ratio": 0.5,
        "two_stage": False,
        "stage1_fraction": 0.2,
        "checkpoint_every": 0,
        "loss": {
            "kind": "least-squares",
            "lambda": 1.0,
            "mask_source": "unlisted-entries",
        },
        "regs": [],
    },
    "synth": {
        "dims": [200, 200],
        "k_true": 10,
        "sparsify": 0.5,
        "noise_var": 0.01,
        "seed": 0,
        "nonneg": True,
        "with_truth": True,
    },
    "completion": {
        "train_fraction": 0.8,
        "folds": 5,
        "seed": 0,
        "ranks": [4, 8],
        "variants": ["plain", "tikhonov", "biases", "kl"],
        "lambda": 0.1,
        "clamp_lo": 1.0,
        "clamp_hi": 5.0,
        "outer_max_iter": 60,
    },
    "dictlearn": {
        "k": 50,
        "lambda": 0.5,
        "nonneg": False,
        "iters": 100,
        "patch_shape": [],
        "lemma_ratio": 0.5,
    },
}

_REG_KEYS = ("kind", "lambda", "lo", "hi", "axis", "ones_cols", "inner")


def _merge(defaults, user, path):
    out = {}
    for key, dval in defaults.items():
        if key in user:
            uval = user[key]
            if isinstance(dval, dict):
                if not isinstance(uval, dict):
                    raise ConfigError("%s.%s must be a table" % (path, key) if path else
                                      "%s must be a table" % key)
                out[key] = _merge(dval, uval, path + "." + key if path else key)
            else:
                out[key] = uval
        else:
            out[key] = json.loads(json.dumps(dval))  # deep copy
    for key in user:
        if key not in defaults:
            where = path + "." + key if path else key
            raise ConfigError("unknown config key %r" % where)
    return out


def _check_regs(regs):
    if not isinstance(regs, list):
        raise ConfigError("problem.regs must be an array of tables")
    for i, reg in enumerate(regs):
        if not isinstance(reg, dict):
            raise ConfigError("problem.regs[%d] must be a table" % i)
        for key in reg:
            if key not in _REG_KEYS:
                raise ConfigError("unknown key %r in problem.regs[%d]" % (key, i))
        inner = reg.get("inner")
        if inner is not None:
            for key in inner:
                if key not in _REG_KEYS or key == "inner":
                    raise ConfigError(
                        "unknown key %r in problem.regs[%d].inner" % (key, i))


def parse_config(text):
    """Parse TOML text, merge over defaults, reject unknown keys."""
    try:
        user = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("bad TOML: %s" % exc) from exc
    cfg = _merge(DEFAULTS, user, "")
    _check_regs(cfg["problem"]["regs"])
    return cfg


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError("config file not found: %s" % path)
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    return parse_config(text)


def reg_from_dict(d):
    kwargs = {"kind": d.get("kind", "none")}
    if "lambda" in d:
        kwargs["lam"] = float(d["lambda"])
    if "lo" in d:
        kwargs["lo"] = float(d["lo"])
    if "hi" in d:
        kwargs["hi"] = float(d["hi"])
    if "axis" in d:
        kwargs["axis"] = d["axis"]
    if "ones_cols" in d:
        kwargs["ones_cols"] = tuple(int(c) for c in d["ones_cols"])
    if d.get("inner") is not None:
        kwargs["inner"] = reg_from_dict(d["inner"])
    try:
        return RegularizerSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def reg_to_dict(spec):
    out = {"kind": spec.kind}
    if spec.kind in ("l1", "smooth", "tikhonov"):
        out["lambda"] = float(spec.lam)
    if spec.kind == "box":
        out["lo"] = float(spec.lo)
        out["hi"] = float(spec.hi)
    if spec.kind == "simplex":
        out["axis"] = spec.axis
    if spec.ones_cols:
        out["ones_cols"] = [int(c) for c in spec.ones_cols]
    if spec.inner is not None:
        out["inner"] = reg_to_dict(spec.inner)
    return out


def loss_from_dict(d):
    try:
        return LossSpec(kind=d.get("kind", "least-squares"),
                        lam=float(d.get("lambda", 1.0)),
                        mask_source=d.get("mask_source", "unlisted-entries"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def problem_from_config(cfg):
    """Build a ProblemConfig from a merged config dict."""
    p = cfg["problem"]
    regs = [reg_from_dict(d) for d in p["regs"]] or None
    try:
        return ProblemConfig(
            rank=int(p["rank"]),
            loss=loss_from_dict(p["loss"]),
            regs=regs,
            inner_eps=float(p["inner_eps"]),
            inner_max_iter=int(p["inner_max_iter"]),
            outer_max_iter=int(p["outer_max_iter"]),
            outer_tol=float(p["outer_tol"]),
            mu_policy=p["mu_policy"],
            mu_fixed=float(p["mu_fixed"]),
            frobenius_weight=float(p["frobenius_weight"]),
            seed=int(p["seed"]),
            deterministic=bool(p["deterministic"]),
            init=p["init"],
            split_state=p["split_state"],
            lemma_ratio=float(p["lemma_ratio"]),
            stage1_fraction=float(p["stage1_fraction"]),
            checkpoint_every=int(p["checkpoint_every"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ConfigError("non-finite float %r not representable in config" % v)
        if v == int(v) and abs(v) < 1e16:
            return "%.1f" % v
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ConfigError("cannot serialize %r" % (v,))


def _emit_table(d, prefix, lines):
    scalars = [(k, v) for k, v in sorted(d.items())
               if not isinstance(v, dict)
               and not (isinstance(v, list) and v and isinstance(v[0], dict))]
    tables = [(k, v) for k, v in sorted(d.items()) if isinstance(v, dict)]
    arrays = [(k, v) for k, v in sorted(d.items())
              if isinstance(v, list) and v and isinstance(v[0], dict)]
    if prefix and scalars:
        lines.append("[%s]" % ".".join(prefix))
    for k, v in scalars:
        lines.append("%s = %s" % (k, _fmt_value(v)))
    if prefix and scalars:
        lines.append("")
    for k, v in tables:
        _emit_table(v, prefix + [k], lines)
    for k, entries in arrays:
        for entry in entries:
            lines.append("[[%s]]" % ".".join(prefix + [k]))
            sub_scalars = [(sk, sv) for sk, sv in sorted(entry.items())
                           if not isinstance(sv, dict)]
            sub_tables = [(sk, sv) for sk, sv in sorted(entry.items())
                          if isinstance(sv, dict)]
            for sk, sv in sub_scalars:
                lines.append("%s = %s" % (sk, _fmt_value(sv)))
            lines.append("")
            for sk, sv in sub_tables:
                lines.append("[%s.%s]" % (".".join(prefix + [k]), sk))
                for ik, iv in sorted(sv.items()):
                    lines.append("%s = %s" % (ik, _fmt_value(iv)))
                lines.append("")
    if prefix and not scalars and not tables and not arrays:
        lines.append("[%s]" % ".".join(prefix))
        lines.append("")


def serialize_config(cfg):
    """Canonical TOML text for a merged config dict (sorted keys)."""
    lines = []
    _emit_table(cfg, [], lines)
    while lines and lines[-1] == "":
        lines.pop()
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    """Stable sha256 over the canonical form of a merged config dict."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
