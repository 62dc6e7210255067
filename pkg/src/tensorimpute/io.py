"""Long-format text files for tensors, draws and summaries.

A tensor file is a CSV with header ``i1,...,iN,value`` and 1-based indices;
``NA`` marks a missing cell and cells absent from the file are missing.  A
JSON descriptor next to it records the dims, optional mode names and an
optional fiber-missing mode hint (1-based).  Values are written with 17
significant digits so they read back bit-identically.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .draws import ImputationDraws
from .tensor import MaskedTensor

FORMAT_VERSION = 1
NA = "NA"


class TensorFileError(ValueError):
    pass


def fmt(v):
    return NA if v is None or (isinstance(v, float) and math.isnan(v)) else "%.17g" % v


def descriptor_path(path):
    return Path(path).with_suffix(".json")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _header(ndim, extra):
    return [f"i{k + 1}" for k in range(ndim)] + list(extra)


def write_tensor(path, t, descriptor=None, mode_names=None, fiber_missing_mode=None, observed_only=False):
    """Write ``t`` and its descriptor; returns the descriptor path.

    Cells are listed first-mode-fastest.  With ``observed_only`` missing cells
    are omitted instead of written as ``NA``.
    """
    if not isinstance(t, MaskedTensor):
        t = MaskedTensor(t)
    idx = np.column_stack(np.unravel_index(np.arange(t.size), t.dims, order="F")) + 1
    vals = t.values.ravel(order="F")
    miss = t.mask.ravel(order="F")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(t.ndim, ["value"]))
        for row, v, m in zip(idx, vals, miss):
            if m and observed_only:
                continue
            w.writerow([*map(int, row), NA if m else fmt(float(v))])
    desc = Path(descriptor) if descriptor else descriptor_path(path)
    meta = {"format_version": FORMAT_VERSION, "dims": list(t.dims)}
    if mode_names is not None:
        if len(mode_names) != t.ndim:
            raise ValueError("need one name per mode")
        meta["mode_names"] = list(mode_names)
    if fiber_missing_mode is not None:
        meta["fiber_missing_mode"] = int(fiber_missing_mode)
    write_json(desc, meta)
    return desc


def read_descriptor(path):
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if not isinstance(meta, dict) or "dims" not in meta:
        raise TensorFileError(f"{path}: descriptor needs a 'dims' list")
    version = meta.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise TensorFileError(f"{path}: unsupported format_version {version}")
    dims = meta["dims"]
    if not (isinstance(dims, list) and dims and all(isinstance(d, int) and d > 0 for d in dims)):
        raise TensorFileError(f"{path}: dims must be a list of positive integers")
    return meta


def read_tensor(path, descriptor=None):
    """Read a tensor file.

    The descriptor defaults to the ``.json`` file beside ``path``; without
    one the dims are the largest index seen in each column.

    Raises
    ------
    TensorFileError
        For a bad header, malformed or out-of-range index, malformed value or
        duplicate cell, naming the line.
    """
    desc = Path(descriptor) if descriptor else descriptor_path(path)
    meta = read_descriptor(desc) if desc.exists() else None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TensorFileError(f"{path}: empty file")
    head = [h.strip() for h in rows[0]]
    ndim = len(head) - 1
    if ndim < 1 or head != _header(ndim, ["value"]):
        raise TensorFileError(f"{path}: line 1: header must be i1,...,iN,value")
    if meta is not None and len(meta["dims"]) != ndim:
        raise TensorFileError(f"{path}: header has {ndim} index columns, descriptor {len(meta['dims'])} dims")
    index = np.empty((len(rows) - 1, ndim), dtype=np.int64)
    values = np.empty(len(rows) - 1)
    for r, row in enumerate(rows[1:]):
        line = r + 2
        if len(row) != ndim + 1:
            raise TensorFileError(f"{path}: line {line}: expected {ndim + 1} fields, got {len(row)}")
        try:
            index[r] = [int(v) for v in row[:ndim]]
        except ValueError:
            raise TensorFileError(f"{path}: line {line}: malformed index {row[:ndim]}") from None
        v = row[ndim].strip()
        if v == NA:
            values[r] = np.nan
            continue
        try:
            values[r] = float(v)
        except ValueError:
            raise TensorFileError(f"{path}: line {line}: malformed value {v!r}") from None
        if not math.isfinite(values[r]):
            raise TensorFileError(f"{path}: line {line}: non-finite value {v!r}")
    if meta is not None:
        dims = tuple(meta["dims"])
    else:
        if index.shape[0] == 0:
            raise TensorFileError(f"{path}: no rows and no descriptor")
        dims = tuple(int(d) for d in index.max(axis=0))
    for r in range(index.shape[0]):
        if np.any(index[r] < 1) or np.any(index[r] > dims):
            raise TensorFileError(f"{path}: line {r + 2}: index {index[r].tolist()} outside dims {list(dims)}")
    lin = np.ravel_multi_index(tuple((index - 1).T), dims, order="F")
    order = np.argsort(lin, kind="stable")
    dup = np.flatnonzero(np.diff(lin[order]) == 0)
    if dup.size:
        a, b = sorted((order[dup[0]], order[dup[0] + 1]))
        raise TensorFileError(f"{path}: line {b + 2}: duplicate cell {index[b].tolist()} (first at line {a + 2})")
    flat = np.full(math.prod(dims), np.nan)
    flat[lin] = values
    x = flat.reshape(dims, order="F")
    return MaskedTensor(x, np.isnan(x))


def write_draws(path, draws):
    """Rows ``draw,i1..iN,value`` for every retained draw (chains concatenated)."""
    pooled = draws.pooled()
    idx = draws.missing_index + 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw"] + _header(idx.shape[1], ["value"]))
        for d, vals in enumerate(pooled):
            for row, v in zip(idx, vals):
                w.writerow([d + 1, *map(int, row), fmt(float(v))])


def read_draws(path, dims):
    """Inverse of :func:`write_draws`; the draws come back as a single chain."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ndim = len(dims)
    if data.shape[1] != ndim + 2:
        raise TensorFileError(f"{path}: expected {ndim + 2} columns")
    draw = data[:, 0].astype(int)
    idx = data[:, 1:-1].astype(int) - 1
    n_draws = draw.max()
    m = idx.shape[0] // n_draws
    if m * n_draws != idx.shape[0]:
        raise TensorFileError(f"{path}: draws have unequal lengths")
    first = idx[draw == 1]
    lin = np.ravel_multi_index(tuple(first.T), tuple(dims), order="F")
    order = np.argsort(lin)
    vals = data[:, -1].reshape(n_draws, m)[:, order]
    return ImputationDraws(tuple(dims), first[order], vals[None])


def write_summary(path, draws):
    """Rows ``i1..iN,mean,sd,q025,q975`` for the missing cells."""
    s = draws.summary()
    idx = draws.missing_index + 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(idx.shape[1], ["mean", "sd", "q025", "q975"]))
        for j, row in enumerate(idx):
            w.writerow([*map(int, row)] + [fmt(float(s[k][j])) for k in ("mean", "sd", "q025", "q975")])


def write_rows(path, rows, columns=None):
    """Write a list of dicts as CSV; ``None`` becomes ``NA``."""
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def _cell(v):
    if v is None:
        return NA
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return fmt(v)
    return v
