"""CSV/JSON formats for datasets, chains, designs and run manifests."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .grid import Grid, Region, build_grid
from .inference import Chain, ChainConfig, PriorSpec
from .simulate import Dataset

CORE_COLUMNS = ("cell_id", "count", "y_sum")
KNOWN_COLUMNS = CORE_COLUMNS + ("y_sumsq", "truth_S")


class ParseError(ValueError):
    pass


def _num(x: float) -> str:
    return repr(float(x))


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def grid_spec(grid: Grid) -> dict:
    return {"bounds": [list(b) for b in grid.region.bounds], "cells": list(grid.shape)}


def write_dataset(ds: Dataset, path: str | Path) -> None:
    """Write ``path`` (CSV, one row per active cell) and its JSON sidecar.

    ``cell_id`` is the cell's position on the full lattice, so masked grids
    are recovered from which ids appear.
    """
    path = Path(path)
    extra_cols = list(ds.extra)
    cols = list(CORE_COLUMNS) + ["y_sumsq"]
    if ds.truth_S is not None:
        cols.append("truth_S")
    cols += extra_cols
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, lat in enumerate(ds.grid.lattice_index):
            row = [int(lat), int(ds.counts[i]), _num(ds.y_sum[i]), _num(ds.y_sumsq[i])]
            if ds.truth_S is not None:
                row.append(_num(ds.truth_S[i]))
            row += [ds.extra[c][i] for c in extra_cols]
            w.writerow(row)
    meta = {"grid": grid_spec(ds.grid), "params": ds.params, "seed": ds.seed, "n": ds.n}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(path: str | Path, grid: Grid | None = None) -> Dataset:
    """Parse a dataset CSV; the grid comes from ``grid`` or the JSON sidecar."""
    path = Path(path)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        missing = [c for c in CORE_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"{path}:1: missing columns {missing}")
        pos = {c: header.index(c) for c in header}
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                rec = {
                    "cell_id": int(row[pos["cell_id"]]),
                    "count": int(row[pos["count"]]),
                    "y_sum": float(row[pos["y_sum"]]),
                }
                for c in ("y_sumsq", "truth_S"):
                    if c in pos:
                        rec[c] = float(row[pos[c]])
            except ValueError as exc:
                raise ParseError(f"{path}:{line}: {exc}") from None
            if rec["count"] < 0:
                raise ParseError(f"{path}:{line}: negative count")
            rec["extra"] = [row[pos[c]] for c in header if c not in KNOWN_COLUMNS]
            rows.append(rec)
    if not rows:
        raise ParseError(f"{path}: no data rows")

    ids = np.array([r["cell_id"] for r in rows])
    if grid is None:
        if "grid" not in meta:
            raise ParseError(f"{path}: no grid given and no sidecar {side.name}")
        g = meta["grid"]
        shape = tuple(g["cells"])
        total = int(np.prod(shape))
        if ids.min() < 0 or ids.max() >= total:
            raise ParseError(f"{path}: cell_id out of range for lattice {shape}")
        mask = np.zeros(total, dtype=bool)
        mask[ids] = True
        grid = build_grid(Region(tuple(tuple(b) for b in g["bounds"])), shape,
                          mask=None if mask.all() else mask)
    lookup = grid._lattice_lookup
    if len(set(ids.tolist())) != ids.size:
        raise ParseError(f"{path}: duplicate cell_id")
    if ids.max() >= lookup.size or np.any(lookup[ids] < 0):
        raise ParseError(f"{path}: cell_id not on the grid")
    if ids.size != grid.cell_count:
        raise ParseError(f"{path}: {ids.size} rows for {grid.cell_count} cells")
    order = lookup[ids]
    m = grid.cell_count

    def col(name, dtype=float):
        out = np.zeros(m, dtype=dtype)
        out[order] = [r[name] for r in rows]
        return out

    extra_cols = [c for c in header if c not in KNOWN_COLUMNS]
    extra = {}
    for j, c in enumerate(extra_cols):
        vals = [""] * m
        for i, r in zip(order, rows):
            vals[i] = r["extra"][j]
        extra[c] = vals
    try:
        return Dataset(
            grid=grid,
            counts=col("count", np.int64),
            y_sum=col("y_sum"),
            y_sumsq=col("y_sumsq") if "y_sumsq" in pos else None,
            truth_S=col("truth_S") if "truth_S" in pos else None,
            params=meta.get("params", {}),
            seed=meta.get("seed"),
            extra=extra,
        )
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


# -- chains -----------------------------------------------------------------------

def write_chain(chain: Chain, outdir: str | Path, extra_meta: dict | None = None) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    names = chain.names
    with open(out / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw_id", *names])
        for i in range(len(chain)):
            w.writerow([i, *(_num(chain.params[k][i]) for k in names)])
    with open(out / "S.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw_id", "cell_id", "value"])
        for i in range(len(chain)):
            for j, v in enumerate(chain.S[i]):
                w.writerow([i, j, _num(v)])
    report = {"acceptance_rates": chain.acceptance_rates,
              "numerical_rejects": chain.numerical_rejects}
    (out / "acceptance.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    meta = {"model": chain.model, "config": asdict(chain.config), "prior": asdict(chain.prior)}
    meta.update(extra_meta or {})
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_chain(outdir: str | Path) -> tuple[Chain, dict]:
    out = Path(outdir)
    meta = json.loads((out / "meta.json").read_text())
    report = json.loads((out / "acceptance.json").read_text())
    with open(out / "params.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    body = np.array([[float(x) for x in r[1:]] for r in rows[1:]]).reshape(-1, len(names))
    params = {k: body[:, j].copy() for j, k in enumerate(names)}
    s = np.loadtxt(out / "S.csv", delimiter=",", skiprows=1, ndmin=2)
    L = body.shape[0]
    m = int(s[:, 1].max()) + 1 if s.size else 0
    S = np.zeros((L, m))
    S[s[:, 0].astype(int), s[:, 1].astype(int)] = s[:, 2]
    chain = Chain(
        model=meta["model"], params=params, S=S,
        acceptance_rates=report["acceptance_rates"],
        numerical_rejects=report["numerical_rejects"],
        config=ChainConfig(**meta["config"]), prior=PriorSpec(**meta["prior"]),
    )
    return chain, meta


def write_summaries(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "mean", "q2.5", "q97.5"])
        for name, mean, lo, hi in rows:
            w.writerow([name, _num(mean), _num(lo), _num(hi)])


def write_table(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(x) if isinstance(x, (float, np.floating)) else x for x in row])


# -- manifests --------------------------------------------------------------------

def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "prefgeo": __version__}


def write_manifest(path: str | Path, command: str, argv: list[str], config: dict, outputs,
                   cwd: str | None = None) -> None:
    """Record how a run was made; output paths are stored as given (relative to ``cwd``)."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "cwd": cwd,
        "config": config,
        "versions": versions(),
        "outputs": {str(p): file_digest(p) for p in sorted(map(str, outputs))},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
