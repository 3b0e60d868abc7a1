"""Canonical JSON emission and config fingerprints.

Reports that must be byte-identical across reruns go through canonical_json:
keys sorted, floats printed with 17 significant digits, no whitespace
variation, no timestamps. Fingerprints are sha256 over the canonical form.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import InputError


def _emit(obj, out: list) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        v = float(obj)
        if np.isnan(v):
            out.append('"NaN"')
        elif np.isinf(v):
            out.append('"Infinity"' if v > 0 else '"-Infinity"')
        else:
            out.append("%.17g" % v)
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, (list, tuple, np.ndarray)):
        out.append("[")
        items = list(obj)
        for k, item in enumerate(items):
            if k:
                out.append(",")
            _emit(item, out)
        out.append("]")
    elif isinstance(obj, dict):
        out.append("{")
        for k, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise InputError(f"canonical JSON needs string keys, got {key!r}")
            if k:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _emit(obj[key], out)
        out.append("}")
    else:
        raise InputError(f"cannot canonicalize value of type {type(obj).__name__}")


def canonical_json(obj) -> str:
    out: list = []
    _emit(obj, out)
    return "".join(out)


def write_canonical(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()
