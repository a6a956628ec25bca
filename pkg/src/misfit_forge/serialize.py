"""Deterministic file output: float formatting, atomic writes, digests, XYZ and seeds."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile

import numpy as np

FLOAT_DIGITS = 17


def fmt_float(x: float) -> str:
    """Lossless text form with 17 significant digits."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.{FLOAT_DIGITS}g}"


def derive_seed(root: int, *counters: int) -> int:
    """Per-component seed from a root seed and integer counters.

    The words ``[root, len(counters), *counters]`` feed a
    ``numpy.random.SeedSequence`` whose first 32-bit state word is the component
    seed. The length word keeps ``(r, 1)`` and ``(r, 1, 0)`` apart, which a bare
    word list would not since trailing zeros do not change the entropy.
    """
    words = [int(root), len(counters)] + [int(c) for c in counters]
    if any(w < 0 for w in words):
        raise ValueError(f"seed words must be nonnegative, got {words}")
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def to_jsonable(obj):
    """Convert numpy containers and scalars to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _emit(obj, indent: int, out: list) -> None:
    pad = "  " * indent
    if obj is None or isinstance(obj, bool):
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite float {obj} cannot be written as JSON")
        text = fmt_float(obj)
        out.append(text if any(c in text for c in ".e") else text + ".0")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = sorted(obj.items())
        for i, (k, v) in enumerate(items):
            out.append(f"{pad}  {json.dumps(str(k))}: ")
            _emit(v, indent + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, list):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad + "  ")
            _emit(v, indent + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, 2-space indent, 17-digit floats, trailing newline."""
    out = []
    _emit(to_jsonable(obj), 0, out)
    return "".join(out) + "\n"


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the target directory and rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


SYMBOLS = {0: "L", 1: "R"}


def xyz_text(positions, phase, comment: str = "") -> str:
    """Plain XYZ: one line per atom, tag ``L`` (left phase) or ``R`` (right phase).

    Two-dimensional clouds get a zero third coordinate.
    """
    pos = np.asarray(positions, dtype=float)
    if pos.shape[1] == 2:
        pos = np.hstack([pos, np.zeros((len(pos), 1))])
    lines = [str(len(pos)), comment.replace("\n", " ")]
    for p, ph in zip(pos, np.asarray(phase)):
        lines.append(" ".join([SYMBOLS[int(ph)]] + [fmt_float(c) for c in p]))
    return "\n".join(lines) + "\n"


def read_xyz(text: str):
    """Parse text written by ``xyz_text``; returns ``(positions, phase, comment)``."""
    lines = text.splitlines()
    n = int(lines[0])
    inverse = {v: k for k, v in SYMBOLS.items()}
    pos = np.empty((n, 3))
    phase = np.empty(n, dtype=int)
    for i, line in enumerate(lines[2 : 2 + n]):
        sym, *xyz = line.split()
        phase[i] = inverse[sym]
        pos[i] = [float(c) for c in xyz]
    return pos, phase, lines[1]
