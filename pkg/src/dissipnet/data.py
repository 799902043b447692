"""Dataset container and the on-disk formats (dataset CSV + metadata JSON,
parameter JSON, training history CSV)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ConfigurationError

CSV_HEADER = ["t", "dt", "C11", "C22", "C33", "C12", "C13", "C23",
              "S11", "S22", "S33", "S12", "S13", "S23"]
HISTORY_HEADER = ["epoch", "loss_stress", "loss_evo", "loss_total"]


@dataclass
class PathRecord:
    t: np.ndarray   # (T,)
    dt: np.ndarray  # (T,)
    C: np.ndarray   # (T, 6) Voigt
    S: np.ndarray   # (T, 6) Voigt, MPa

    def truncated(self, steps: int) -> "PathRecord":
        return PathRecord(self.t[:steps], self.dt[:steps], self.C[:steps], self.S[:steps])


@dataclass
class Dataset:
    paths: list
    direction: tuple = (1.0, 0.0, 0.0)
    stress_scale: float = 1.0
    model: str = "iso"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.paths)

    @staticmethod
    def scale_of(paths) -> float:
        m = max((float(np.max(np.abs(p.S))) for p in paths if p.S.size), default=0.0)
        return m if m > 0 else 1.0

    def subset(self, indices) -> "Dataset":
        return Dataset([self.paths[i] for i in indices], self.direction, self.stress_scale,
                       self.model, dict(self.meta))

    def truncated(self, n_paths: int, steps: int) -> "Dataset":
        return Dataset([p.truncated(steps) for p in self.paths[:n_paths]], self.direction,
                       self.stress_scale, self.model, dict(self.meta))

    def arrays(self):
        """Stacked ``(C (B,T,3,3), dt (B,T), S_normalized (B,T,6))``; paths must share length."""
        from .tensor import from_voigt
        lengths = {len(p.t) for p in self.paths}
        if len(lengths) != 1:
            raise ConfigurationError("paths of unequal length cannot be batched")
        C = np.stack([np.asarray(from_voigt(p.C)) for p in self.paths])
        dt = np.stack([p.dt for p in self.paths])
        S = np.stack([p.S for p in self.paths]) / self.stress_scale
        return C, dt, S


# --------------------------------------------------------------------------
# dataset directory


def _fmt(x) -> str:
    return repr(float(x))


def write_path_csv(path: Path, rec: PathRecord):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for k in range(len(rec.t)):
            w.writerow([_fmt(rec.t[k]), _fmt(rec.dt[k])] + [_fmt(v) for v in rec.C[k]]
                       + [_fmt(v) for v in rec.S[k]])


def read_path_csv(path: Path) -> PathRecord:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ConfigurationError(f"{path}: unexpected header")
    a = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, 14)
    return PathRecord(a[:, 0].copy(), a[:, 1].copy(), a[:, 2:8].copy(), a[:, 8:14].copy())


def path_filename(i: int) -> str:
    return f"path_{i:03d}.csv"


def write_dataset(ds: Dataset, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, rec in enumerate(ds.paths):
        f = out / path_filename(i)
        write_path_csv(f, rec)
        files.append(f)
    meta = dict(ds.meta)
    meta.update(model=ds.model, direction=[float(v) for v in ds.direction],
                stress_scale=float(ds.stress_scale), paths=len(ds.paths))
    meta.setdefault("steps", int(len(ds.paths[0].t)) if ds.paths else 0)
    f = out / "metadata.json"
    f.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    files.append(f)
    return files


def read_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    f = d / "metadata.json"
    if not f.exists():
        raise ConfigurationError(f"{d}: missing metadata.json")
    meta = json.loads(f.read_text())
    paths = [read_path_csv(d / path_filename(i)) for i in range(int(meta["paths"]))]
    return Dataset(paths, tuple(meta["direction"]), float(meta["stress_scale"]), meta["model"], meta)


# --------------------------------------------------------------------------
# parameters


def params_to_doc(theta: dict, activations: dict, topology: dict, seed: int, stress_scale: float) -> dict:
    """Nested parameter dict -> JSON-ready document.

    ``activations`` maps group name to ``{array name: activation name}``.
    """
    from .nets import is_nonneg
    groups = {}
    for g in sorted(theta):
        arrays = {}
        for name in sorted(theta[g]):
            a = np.asarray(theta[g][name], dtype=float)
            arrays[name] = {
                "shape": list(a.shape),
                "constraint": "nonneg" if is_nonneg(name) else "free",
                "activation": activations.get(g, {}).get(name, "linear"),
                "values": [float(v) for v in a.ravel()],
            }
        groups[g] = {"arrays": arrays}
    return {"topology": topology, "seed": int(seed), "stress_scale": float(stress_scale), "params": groups}


def doc_to_params(doc: dict) -> dict:
    theta = {}
    for g, block in doc["params"].items():
        theta[g] = {name: np.asarray(spec["values"], dtype=float).reshape(spec["shape"])
                    for name, spec in block["arrays"].items()}
    return theta


def dumps_doc(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_params(path, doc: dict):
    Path(path).write_text(dumps_doc(doc))


def read_params(path) -> dict:
    return json.loads(Path(path).read_text())


def write_history(path, history: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([row["epoch"], _fmt(row["loss_stress"]), _fmt(row["loss_evo"]),
                        _fmt(row["loss_total"])])
