"""``dissipnet`` command line: gen-data, train, eval, simulate, check.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ConfigurationError, DomainError, ParameterError, __version__

log = logging.getLogger("dissipnet")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(target: Path, command: str, config: dict, seed, outputs) -> Path:
    """Manifest beside ``target`` (inside it when ``target`` is a directory)."""
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": {Path(o).name: _sha256(o) for o in sorted(outputs, key=str)},
        "version": __version__,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def parse_direction(text: str):
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"--direction: {exc}") from None
    if v.shape != (3,) or not np.linalg.norm(v) > 0:
        raise UsageError("--direction needs three comma-separated numbers, not all zero")
    return tuple(float(x) for x in v / np.linalg.norm(v))


def parse_indices(text: str | None, count: int):
    """``"0-7"`` or ``"8,9"`` -> index list; ``None`` -> all."""
    if text is None:
        return list(range(count))
    out = []
    for part in text.split(","):
        try:
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-"))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"bad path index list {text!r}") from None
    if any(i < 0 or i >= count for i in out):
        raise UsageError(f"path index out of range 0..{count - 1}")
    return out


def _positive(kind):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


# --------------------------------------------------------------------------
# model documents


def consti_doc(theta, topo, config, stress_scale, model):
    from .data import params_to_doc
    from .nets import param_activations
    topology = {
        "kind": "consti",
        "model": model,
        "direction": list(topo.direction),
        "anisotropic": topo.anisotropic,
        "lambda_gr": topo.lambda_gr,
        "update": config.update,
    }
    acts = {g: param_activations(getattr(topo, g)) for g in ("psi", "phi_c", "phi_m", "aux")}
    return params_to_doc(theta, acts, topology, config.seed, stress_scale)


def baseline_doc(params, kind, seed, stress_scale, model):
    from .data import params_to_doc
    from .nets import baseline_spec, param_activations
    topology = {"kind": kind, "model": model}
    return params_to_doc({"baseline": params}, {"baseline": param_activations(baseline_spec(kind))},
                         topology, seed, stress_scale)


def load_model(path):
    """Parameter document -> ``(kind, params, topology-or-spec, stress_scale)``."""
    from .consti import ConstiTopology
    from .data import doc_to_params, read_params
    from .nets import baseline_spec
    try:
        doc = read_params(path)
        theta = doc_to_params(doc)
        top = doc["topology"]
        kind = top["kind"]
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read parameter file {path}: {exc}") from None
    if kind == "consti":
        topo = ConstiTopology(direction=tuple(top["direction"]), anisotropic=bool(top["anisotropic"]),
                              lambda_gr=float(top["lambda_gr"]))
        return kind, theta, topo, float(doc["stress_scale"])
    return kind, theta["baseline"], baseline_spec(kind), float(doc["stress_scale"])


def predict_paths(kind, params, topo, C, dt, update):
    """Normalized stress predictions ``(B, T, 6)``."""
    import jax
    import jax.numpy as jnp
    from .train import baseline_predict, predict
    C, dt = jnp.asarray(C), jnp.asarray(dt)
    if kind == "consti":
        return np.asarray(jax.jit(lambda th: predict(th, topo, C, dt, update))(params))
    return np.asarray(jax.jit(lambda p: baseline_predict(p, topo, C, dt))(params))


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    from .data import write_dataset
    from .refmodel import RefParams, default_path_specs, generate_dataset
    iso = args.model == "iso"
    direction = parse_direction(args.direction)
    ds = generate_dataset(default_path_specs(args.paths, args.steps, args.dt), RefParams(), direction,
                          iso_only=iso, seed=args.seed, model=args.model)
    files = write_dataset(ds, args.out)
    write_manifest(Path(args.out), "gen-data", _config(args), args.seed, files)
    print(f"wrote {len(ds)} paths to {args.out} (stress scale {ds.stress_scale:.6g} MPa)")
    return 0


def _read_data(path):
    from .data import read_dataset
    try:
        return read_dataset(path)
    except (OSError, ConfigurationError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def cmd_train(args):
    from .data import write_history, write_params
    from .train import TrainConfig, fit, fit_baseline, topology_for
    ds = _read_data(args.data)
    ds = ds.subset(parse_indices(args.train_paths, len(ds)))
    config = TrainConfig(epochs=args.epochs, lr=args.lr, clip=args.clip, lambda_evo=args.lambda_evo,
                         lambda_gr=args.lambda_gr, pretrain_epochs=args.pretrain_epochs,
                         pretrain_paths=args.pretrain_paths, pretrain_steps=args.pretrain_steps,
                         seed=args.seed, update=args.update, log_every=args.log_every)
    if args.baseline:
        params, history = fit_baseline(ds, config, args.baseline)
        doc = baseline_doc(params, args.baseline, args.seed, ds.stress_scale, ds.model)
    else:
        theta, history = fit(ds, config)
        doc = consti_doc(theta, topology_for(ds, config), config, ds.stress_scale, ds.model)
    out = Path(args.out)
    write_params(out, doc)
    hist = Path(args.history) if args.history else out.with_suffix(".history.csv")
    write_history(hist, history)
    write_manifest(out, "train", _config(args), args.seed, [out, hist])
    status = "aborted (non-finite loss)" if history.aborted else "done"
    print(f"training {status}: best total loss {history.best_loss:.6g} at epoch {history.best_epoch}")
    return 1 if history.aborted else 0


COMPONENTS = ("S11", "S22", "S33", "S12", "S13", "S23")


def cmd_eval(args):
    from .refmodel import RefParams, replay
    ds = _read_data(args.data)
    idx = parse_indices(args.paths, len(ds))
    sub = ds.subset(idx)
    C, dt, S = sub.arrays()
    if args.reference:
        iso = ds.model == "iso"
        pred = np.stack([replay(RefParams(), ds.direction, iso, p.C, p.dt) for p in sub.paths]) / ds.stress_scale
    else:
        if not args.params:
            raise UsageError("eval needs --params unless --reference is given")
        kind, params, topo, _ = load_model(args.params)
        pred = predict_paths(kind, params, topo, C, dt, args.update)
    if not np.all(np.isfinite(pred)):
        b, t = np.argwhere(~np.all(np.isfinite(pred), axis=-1))[0]
        raise FloatingPointError(f"non-finite prediction on path {idx[b]} at step {t}")
    out = Path(args.out)
    rows = []
    for b, i in enumerate(idx):
        per = np.mean((pred[b] - S[b]) ** 2, axis=0)
        rows.append([str(i)] + [repr(float(v)) for v in per] + [repr(float(np.mean(per)))])
    per = np.mean((pred - S).reshape(-1, 6) ** 2, axis=0)
    rows.append(["all"] + [repr(float(v)) for v in per] + [repr(float(np.mean(per)))])
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path"] + [f"mse_{c}" for c in COMPONENTS] + ["mse_total"])
        w.writerows(rows)
    write_manifest(out, "eval", _config(args), None, [out])
    print(f"normalized stress MSE over {len(idx)} path(s): {float(np.mean(per)):.6g}")
    return 0


def read_path_input(path):
    """Deformation input CSV: needs ``t, dt, C11..C23``; extra columns are ignored."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        t = np.array([float(r["t"]) for r in rows])
        dt = np.array([float(r["dt"]) for r in rows])
        C = np.array([[float(r[k]) for k in ("C11", "C22", "C33", "C12", "C13", "C23")] for r in rows])
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read deformation input {path}: {exc}") from None
    return t, dt, C


def cmd_simulate(args):
    from .data import CSV_HEADER, PathRecord, write_path_csv
    from .tensor import from_voigt
    t, dt, Cv = read_path_input(args.input)
    kind, params, topo, scale = load_model(args.params)
    C = np.asarray(from_voigt(Cv))[None]
    pred = predict_paths(kind, params, topo, C, dt[None], args.update)[0]
    if not np.all(np.isfinite(pred)):
        step = int(np.argmax(~np.all(np.isfinite(pred), axis=-1)))
        raise FloatingPointError(f"non-finite stress at step {step}")
    out = Path(args.out)
    write_path_csv(out, PathRecord(t, dt, Cv, pred * scale))
    write_manifest(out, "simulate", _config(args), None, [out])
    print(f"wrote {len(t)} rows ({','.join(CSV_HEADER[-6:])} in MPa) to {out}")
    return 0


def cmd_check(args):
    from .checks import SUITES, run_suite
    if args.suite != "all" and args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from all, {', '.join(SUITES)}")
    results = run_suite(args.suite, args.samples, args.seed)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    if args.out:
        out = Path(args.out)
        out.write_text("\n".join(lines) + "\n")
        write_manifest(out, "check", _config(args), args.seed, [out])
    return 0 if all(r.passed for r in results) else 1


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dissipnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate reference-material paths")
    g.add_argument("--model", choices=("iso", "aniso"), default="iso")
    g.add_argument("--paths", type=_positive(int), default=10)
    g.add_argument("--steps", type=_positive(int), default=120)
    g.add_argument("--dt", type=_positive(float), default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--direction", default="1,0,0", help="preferred direction, e.g. 0.7071,0.7071,0")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit the constitutive model or a baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="parameter JSON")
    t.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    t.add_argument("--train-paths", help="path indices, e.g. 0-7")
    t.add_argument("--epochs", type=_nonneg_int, default=2000)
    t.add_argument("--pretrain-epochs", type=_nonneg_int, default=500)
    t.add_argument("--pretrain-paths", type=_positive(int), default=1)
    t.add_argument("--pretrain-steps", type=_positive(int), default=40)
    t.add_argument("--lr", type=_positive(float), default=1e-3)
    t.add_argument("--clip", type=_positive(float), default=1e-3)
    t.add_argument("--lambda-evo", type=float, default=1000.0)
    t.add_argument("--lambda-gr", type=_positive(float), default=1e-4)
    t.add_argument("--update", choices=("linn", "explicit"), default="linn")
    t.add_argument("--baseline", choices=("rnn", "linn"))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log-every", type=_nonneg_int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-component stress MSE report")
    e.add_argument("--data", required=True)
    e.add_argument("--params")
    e.add_argument("--paths", help="path indices, e.g. 8,9")
    e.add_argument("--update", choices=("linn", "explicit"), default="linn")
    e.add_argument("--reference", action="store_true", help="replay the reference material instead of a model")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="stress response along a deformation path")
    s.add_argument("--params", required=True)
    s.add_argument("--input", required=True, help="CSV with t,dt,C11,C22,C33,C12,C13,C23")
    s.add_argument("--update", choices=("linn", "explicit"), default="linn")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("check", help="run the property-test battery")
    c.add_argument("--suite", default="all")
    c.add_argument("--samples", type=_positive(int))
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "log_every", 0) and not args.verbose:
        logging.getLogger("dissipnet").setLevel(logging.INFO)
    threads = os.environ.get("DISSIPNET_THREADS")
    if threads is not None and not (threads.isdigit() and int(threads) > 0):
        print(f"dissipnet: error: DISSIPNET_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ParameterError) as exc:
        print(f"dissipnet: error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, FloatingPointError, OSError, RuntimeError, ValueError) as exc:
        print(f"dissipnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
