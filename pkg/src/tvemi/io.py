"""CSV ingestion and export for survival datasets and imputations."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .data import BINARY, CONTINUOUS, CovariateMeta, SurvivalDataset
from .errors import DataError

MISSING_TOKENS = ("", "NA")
RESERVED = ("time", "event", "imp", "id")


def _number(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: non-numeric value {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return v


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    for need in ("time", "event"):
        if need not in header:
            raise DataError(f"{path}: missing mandatory column {need!r}")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"row {i}: expected {len(header)} fields, got {len(r)}")
    return header, rows


def _parse(header, rows, kinds=None):
    kinds = dict(kinds or {})
    ti, ei = header.index("time"), header.index("event")
    cov_cols = [j for j, h in enumerate(header) if h not in RESERVED]
    if not cov_cols:
        raise DataError("no covariate columns")
    n = len(rows)
    time = np.empty(n)
    event = np.empty(n, dtype=int)
    x = np.zeros((n, len(cov_cols)))
    mask = np.zeros((n, len(cov_cols)), dtype=bool)
    for i, r in enumerate(rows):
        line = i + 2
        t = r[ti].strip()
        if t in MISSING_TOKENS:
            raise DataError(f"row {line}, column 'time': missing value")
        time[i] = _number(t, line, "time")
        if time[i] < 0:
            raise DataError(f"row {line}, column 'time': negative time {t}")
        e = r[ei].strip()
        ev = _number(e, line, "event") if e not in MISSING_TOKENS else None
        if ev not in (0.0, 1.0):
            raise DataError(f"row {line}, column 'event': must be 0 or 1, got {e!r}")
        event[i] = int(ev)
        for k, j in enumerate(cov_cols):
            c = r[j].strip()
            if c in MISSING_TOKENS:
                mask[i, k] = True
            else:
                x[i, k] = _number(c, line, header[j])
    meta = []
    for k, j in enumerate(cov_cols):
        name = header[j]
        obs = x[~mask[:, k], k]
        inferred = BINARY if obs.size and np.all(np.isin(obs, (0.0, 1.0))) else CONTINUOUS
        kind = kinds.pop(name, inferred)
        if kind == BINARY and not np.all(np.isin(obs, (0.0, 1.0))):
            raise DataError(f"column {name!r}: declared binary but has values other than 0/1")
        meta.append(CovariateMeta(name, kind))
    if kinds:
        raise DataError(f"kind override for unknown column(s): {', '.join(sorted(kinds))}")
    return time, event, x, mask, tuple(meta)


def ingest_csv(path, kinds=None) -> SurvivalDataset:
    """Read a dataset: columns ``time``, ``event`` and covariates (``NA`` or empty = missing).

    An optional ``id`` column is kept as subject identifiers. ``kinds`` maps
    column names to ``"binary"``/``"continuous"`` to override inference.
    """
    header, rows = _read_rows(path)
    if "imp" in header:
        raise DataError(f"{path}: looks like an imputation file (has an 'imp' column)")
    time, event, x, mask, meta = _parse(header, rows, kinds)
    ids = tuple(r[header.index("id")] for r in rows) if "id" in header else ()
    return SurvivalDataset(time, event, x, mask, meta, ids)


def ingest_imputations(path, kinds=None):
    """Read a long-format imputation file; returns (skeleton dataset, list of covariate matrices)."""
    header, rows = _read_rows(path)
    if "imp" not in header:
        raise DataError(f"{path}: no 'imp' column")
    ii = header.index("imp")
    groups: dict[str, list] = {}
    for r in rows:
        groups.setdefault(r[ii].strip(), []).append(r)
    keys = sorted(groups, key=lambda k: float(k))
    parsed = [_parse(header, groups[k], kinds) for k in keys]
    t0, e0 = parsed[0][0], parsed[0][1]
    for t, e, x, mask, _ in parsed:
        if t.shape != t0.shape or not (np.array_equal(t, t0) and np.array_equal(e, e0)):
            raise DataError("imputations disagree on the outcome columns")
        if mask.any():
            raise DataError("imputation file has missing cells")
    # binary kinds are judged on the union of imputations
    meta = tuple(CovariateMeta(m.name, BINARY if all(p[4][k].kind == BINARY for p in parsed) else CONTINUOUS)
                 for k, m in enumerate(parsed[0][4]))
    ids = tuple(r[header.index("id")] for r in groups[keys[0]]) if "id" in header else ()
    skeleton = SurvivalDataset(t0, e0, parsed[0][2], None, meta, ids)
    return skeleton, [p[2] for p in parsed]


def _cell(v):
    return repr(float(v))


def export_csv(dataset: SurvivalDataset, path, with_ids: bool = False):
    """Write a dataset; masked cells become ``NA``. Values use round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["id"] if with_ids else []) + ["time", "event", *dataset.names])
        for i in range(dataset.n):
            cells = ["NA" if dataset.missing_mask[i, k] else _cell(dataset.covariates[i, k]) for k in range(dataset.p)]
            w.writerow(([dataset.ids[i]] if with_ids else []) + [_cell(dataset.time[i]), int(dataset.event[i]), *cells])


def export_imputations(imputed, path):
    """Long format: one block of rows per imputation, tagged by ``imp`` (1-based)."""
    src = imputed.source
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["imp", "id", "time", "event", *src.names])
        for imp, x in enumerate(imputed.completed, start=1):
            for i in range(src.n):
                w.writerow([imp, src.ids[i], _cell(src.time[i]), int(src.event[i]), *(_cell(v) for v in x[i])])


def write_rows(path, header, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
