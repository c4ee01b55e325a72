"""CSV / JSON formats for densities, maps, potentials, manifests and models."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Density1D, Grid1D, density_from_samples
from .ot1d import Potential1D, TransportMap1D

DEFAULT_BANDWIDTH = 0.1


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_rows(path, header, rows) -> None:
    """Plain CSV with a header; floats written with full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_table(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = [h.strip() for h in next(rd)]
        data = [[float(v) for v in row] for row in rd if row]
    return header, np.array(data, dtype=float).reshape(len(data), len(header))


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else ("inf" if f > 0 else "-inf" if f < 0 else "nan")
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def sidecar(path) -> Path:
    return Path(str(path) + ".json")


# -- 1D densities -----------------------------------------------------------

def write_density(path, d: Density1D) -> None:
    write_rows(path, ["x", "density"], zip(d.grid.nodes, d.values))


def read_density(path) -> Density1D:
    header, a = read_table(path)
    if header[:2] != ["x", "density"]:
        raise ValueError(f"{path}: expected header 'x,density'")
    g = Grid1D.from_nodes(a[:, 0])
    return Density1D.normalized(g, a[:, 1])


def read_samples(path, grid: Grid1D, bandwidth: float = DEFAULT_BANDWIDTH) -> Density1D:
    header, a = read_table(path)
    if header[:1] != ["value"]:
        raise ValueError(f"{path}: expected header 'value'")
    return density_from_samples(a[:, 0], grid, bandwidth)


def read_density_or_samples(path, grid: Grid1D | None, bandwidth: float = DEFAULT_BANDWIDTH):
    with open(path) as fh:
        first = fh.readline().strip().split(",")
    if first[0].strip() == "value":
        if grid is None:
            raise ValueError(f"{path}: sample files need a grid in the manifest")
        return read_samples(path, grid, bandwidth)
    return read_density(path)


# -- 1D maps and potentials ---------------------------------------------------

def write_map(path, tmap: TransportMap1D, reference: str | None = None) -> None:
    write_rows(path, ["x", "value"], zip(tmap.grid.nodes, tmap.values))
    write_json(sidecar(path), {**tmap.grid.to_dict(), "reference": reference, "kind": "map"})


def write_potential(path, pot: Potential1D) -> None:
    write_rows(path, ["x", "value", "deriv"], zip(pot.grid.nodes, pot.values, pot.deriv))
    write_json(sidecar(path), {**pot.grid.to_dict(), "reference": pot.reference,
                               "kind": "potential"})


def read_map(path) -> TransportMap1D:
    _, a = read_table(path)
    meta = read_json(sidecar(path)) if sidecar(path).exists() else None
    g = Grid1D.from_dict(meta) if meta else Grid1D.from_nodes(a[:, 0])
    return TransportMap1D(g, a[:, 1])


def read_potential(path) -> Potential1D:
    _, a = read_table(path)
    meta = read_json(sidecar(path)) if sidecar(path).exists() else {}
    g = Grid1D.from_dict(meta) if "n" in meta else Grid1D.from_nodes(a[:, 0])
    return Potential1D(g, a[:, 1], a[:, 2], meta.get("reference"))


# -- 2D ---------------------------------------------------------------------

def write_density2d(path, d) -> None:
    g = d.grid
    X, Y = g.mesh()
    write_rows(path, ["x", "y", "density"], zip(X.ravel(), Y.ravel(), d.values.ravel()))
    write_json(sidecar(path), g.to_dict())


def read_density2d(path):
    from .ot2d import Density2D, Grid2D

    header, a = read_table(path)
    if header[:3] != ["x", "y", "density"]:
        raise ValueError(f"{path}: expected header 'x,y,density'")
    if sidecar(path).exists():
        g = Grid2D.from_dict(read_json(sidecar(path)))
    else:
        g = Grid2D.from_centers(np.unique(a[:, 0]), np.unique(a[:, 1]))
    return Density2D.normalized(g, a[:, 2].reshape(g.nx, g.ny))


def write_field2d(path, grid, tx, ty) -> None:
    X, Y = grid.mesh()
    write_rows(path, ["x", "y", "Tx", "Ty"], zip(X.ravel(), Y.ravel(), np.ravel(tx), np.ravel(ty)))
    write_json(sidecar(path), grid.to_dict())


# -- manifests ----------------------------------------------------------------

@dataclass
class Manifest:
    """Per-record file lists plus the shared grid description.

    Paths are resolved relative to the manifest's directory.
    """

    records: list
    grid: dict | None = None
    dimension: int = 1
    bandwidth: float = DEFAULT_BANDWIDTH
    base: Path = field(default_factory=Path)
    extra: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.records[0].get("predictors", [])) if self.records else 0

    @property
    def q(self) -> int:
        return len(self.records[0].get("scalars", [])) if self.records else 0

    def path(self, rel) -> Path:
        rel = Path(rel)
        return rel if rel.is_absolute() else self.base / rel

    def to_dict(self) -> dict:
        d = {"dimension": self.dimension, "grid": self.grid, "bandwidth": self.bandwidth,
             "records": self.records}
        d.update(self.extra)
        return d


def load_manifest(path) -> Manifest:
    path = Path(path)
    d = read_json(path)
    recs = d.get("records")
    if not isinstance(recs, list) or not recs:
        raise ValueError("manifest has no records")
    p = len(recs[0].get("predictors", []))
    q = len(recs[0].get("scalars", []))
    for i, r in enumerate(recs):
        if "response" not in r:
            raise ValueError(f"record {i} has no response")
        if len(r.get("predictors", [])) != p or len(r.get("scalars", [])) != q:
            raise ValueError(f"record {i} has a different arity from record 0")
    m = Manifest(recs, d.get("grid"), int(d.get("dimension", 1)),
                 float(d.get("bandwidth", DEFAULT_BANDWIDTH)), path.parent,
                 {k: v for k, v in d.items() if k not in ("records", "grid", "dimension", "bandwidth")})
    if m.dimension not in (1, 2):
        raise ValueError("dimension must be 1 or 2")
    for r in recs:
        for f in [r["response"], *r.get("predictors", [])]:
            if not m.path(f).exists():
                raise FileNotFoundError(f"manifest references missing file {f}")
    return m


def save_manifest(path, manifest: Manifest) -> None:
    write_json(path, manifest.to_dict())


def manifest_grid(m: Manifest) -> Grid1D | None:
    return Grid1D.from_dict(m.grid) if m.grid and m.dimension == 1 else None


def load_dataset_1d(m: Manifest, centering: str = "predictor"):
    """Read every density of a 1D manifest and build a :class:`Dataset`."""
    from .model import Dataset

    g = manifest_grid(m)
    read = lambda f: read_density_or_samples(m.path(f), g, m.bandwidth)
    responses = [read(r["response"]) for r in m.records]
    preds = [[read(f) for f in r.get("predictors", [])] for r in m.records]
    scalars = np.array([r.get("scalars", []) for r in m.records], dtype=float).reshape(len(m.records), -1)
    return Dataset.build(responses, preds, scalars, centering=centering)


def load_dataset_2d(m: Manifest):
    from .ot2d import Dataset2D

    responses = [read_density2d(m.path(r["response"])) for r in m.records]
    preds = [[read_density2d(m.path(f)) for f in r.get("predictors", [])] for r in m.records]
    return Dataset2D.build(responses, preds)


# -- models -------------------------------------------------------------------

def save_model(path, model) -> None:
    write_json(path, model.to_dict())


def load_model(path):
    from .model import ModelSpec

    d = read_json(path)
    if d.get("format") == "kantoreg-model2d/1":
        from .ot2d import ModelSpec2D

        return ModelSpec2D.from_dict(d)
    return ModelSpec.from_dict(d)


def relpath(target, start) -> str:
    return os.path.relpath(target, start)
