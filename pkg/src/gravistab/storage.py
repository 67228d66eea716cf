"""File formats: profile CSVs with JSON sidecars, model directories, the common
grid binary layout and deterministic JSON reports."""
from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .equilibria import EquilibriumModel, King, Polytrope, TabulatedF
from .radial_numerics import MonotoneMap, RadialGrid, RadialProfile

PROFILE_NAMES = ("phi", "rho", "dphi")


def dump_json(path, obj) -> None:
    """Sorted keys and repr-precision floats so identical inputs give identical bytes."""
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False))
        fh.write("\n")


def write_profile_csv(path, profile: RadialProfile) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["r", "value"])
        for r, v in zip(profile.grid.nodes, profile.values):
            wr.writerow([repr(float(r)), repr(float(v))])
    dump_json(path.with_suffix(".json"), {"extrapolation": profile.extrapolation, "decay": float(profile.decay)})


def read_profile_csv(path) -> RadialProfile:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta = {"extrapolation": "zero", "decay": 1.0}
    side = path.with_suffix(".json")
    if side.exists():
        meta.update(json.loads(side.read_text()))
    return RadialProfile(RadialGrid(data[:, 0]), data[:, 1], meta["extrapolation"], float(meta["decay"]))


def law_from_params(params: dict):
    kind = params.get("kind")
    if kind == "polytrope":
        return Polytrope(float(params["n"]), float(params.get("C_F", 1.0)))
    if kind == "king":
        return King()
    if kind == "tabulated":
        return TabulatedF(MonotoneMap(np.asarray(params["depth"], float), np.asarray(params["F"], float), "increasing"))
    raise ValueError(f"unknown law kind {kind!r}")


def model_document(model: EquilibriumModel) -> dict:
    return {
        "law": model.law.params(),
        "E0": float(model.E0),
        "M": float(model.M),
        "R": float(model.R),
        "phi_c": float(model.phi_c),
        "u_c": float(model.u_c),
        "grid_ref": {"n": int(len(model.grid)), "r_max": model.grid.r_max,
                     "profiles": {k: f"{k}.csv" for k in PROFILE_NAMES}},
    }


def save_model(model: EquilibriumModel, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in PROFILE_NAMES:
        write_profile_csv(d / f"{name}.csv", getattr(model, name))
    dump_json(d / "model.json", model_document(model))
    return d


def load_model(directory) -> EquilibriumModel:
    d = Path(directory)
    doc_path = d / "model.json"
    if not doc_path.exists():
        raise FileNotFoundError(f"no model.json in {d}")
    doc = json.loads(doc_path.read_text())
    profiles = {k: read_profile_csv(d / doc["grid_ref"]["profiles"][k]) for k in PROFILE_NAMES}
    return EquilibriumModel(law_from_params(doc["law"]), float(doc["E0"]), profiles["phi"], profiles["rho"],
                            profiles["dphi"], float(doc["M"]), float(doc["R"]), float(doc["phi_c"]), float(doc["u_c"]))


def write_grid_binary(path, values: np.ndarray, extents: Sequence[tuple]) -> None:
    """Header: int64 ndim, int64 dims[ndim], float64 (lo, hi) per axis; payload row-major float64, little-endian."""
    v = np.ascontiguousarray(values, dtype="<f8")
    if len(extents) != v.ndim:
        raise ValueError("one (lo, hi) extent per axis is required")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", v.ndim))
        fh.write(struct.pack(f"<{v.ndim}q", *v.shape))
        fh.write(struct.pack(f"<{2 * v.ndim}d", *[float(x) for e in extents for x in e]))
        fh.write(v.tobytes(order="C"))


def read_grid_binary(path):
    raw = Path(path).read_bytes()
    (ndim,) = struct.unpack_from("<q", raw, 0)
    if not 0 < ndim <= 8:
        raise ValueError("corrupt grid header")
    dims = struct.unpack_from(f"<{ndim}q", raw, 8)
    off = 8 + 8 * ndim
    ext = struct.unpack_from(f"<{2 * ndim}d", raw, off)
    off += 16 * ndim
    n = int(np.prod(dims))
    if len(raw) != off + 8 * n:
        raise ValueError("grid payload size does not match its header")
    values = np.frombuffer(raw, dtype="<f8", offset=off).reshape(dims).copy()
    return values, [(ext[2 * i], ext[2 * i + 1]) for i in range(ndim)]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p


SCHEMA_DIR = Path(__file__).with_name("schemas")


def load_schema(name: str) -> dict:
    """Published JSON schema by short name: model, report, run or stability."""
    return json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text())
