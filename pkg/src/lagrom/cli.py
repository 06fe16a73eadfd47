"""Command-line pipeline: simulate, ingest, train, evaluate, spectrum, ringdown, sweep.

Configuration is JSON. A config names a preset (``"model": "rod"``,
``"membrane"`` or ``"external"``) and overrides any of its keys; unknown keys
are rejected. Every command writes the resolved config next to its outputs,
and every CSV starts with ``#`` provenance lines (config hash, seed, versions).

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import platform
import struct
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, analyze, models, rom as rom_mod, spml
from .errors import ConfigError, LagromError, NumericalError
from .integrate import NewmarkConfig, simulate
from .lopinf import LinearLagrangianRom, infer_linear
from .reduce import partition_columns, pod_basis, project, reduced_dataset, split_dataset

# ----------------------------------------------------------------- config

_ROD = {
    "model": "rod",
    "model_params": {"n": 64, "m": 1.56e-2, "kappa": 65.0, "rho": 2.62e5, "nl_lo": 22, "nl_hi": 28},
    "ic": {"nu": [1.0e-1, 2.5e-2, 5.0e-2], "normalization": "momentum"},
    "dt": 1e-3,
    "T": 16.0,
    "r": 6,
    "split": [7.5, 8.0],
    "lopinf": {"eps": 1e-8, "conservative": True, "tikhonov": 0.0},
    "arch": {"hidden": [64, 30, 20, 6], "degrees": [2, 3, 4], "n_mlp": 1, "use_TNN": False, "use_FNN": False},
    "train": {
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "batch_size": 250,
        "epochs": 300,
        "penalty_weight": 1.0,
    },
    "seed": 0,
    "rom_kind": "lopinf-spml",
    "evaluate": {"node": 0, "window": None, "sweep": False, "ringdown": False, "phase_portrait": True},
    "ingest": {"fs": None, "total_mass": 1.0},
}

_MEMBRANE = copy.deepcopy(_ROD)
_MEMBRANE.update(
    {
        "model": "membrane",
        "model_params": {
            "l_x": math.sqrt(2.0),
            "l_y": 1.0 / math.sqrt(2.0),
            "N_x": 21,
            "N_y": 13,
            "damping_ratio": 1e-4,
            "k_nl": None,
            "c_nl": None,
            "clamp": "xy0",
        },
        "ic": {"nu": [3.0e-1, 7.5e-2, 1.5e-1], "normalization": "mass"},
        "dt": 5e-3,
        "T": 35.0,
        "r": 12,
        "split": [15.0, 17.5],
        "lopinf": {"eps": 1e-8, "conservative": False, "tikhonov": 0.0},
    }
)
_MEMBRANE["arch"] = dict(_MEMBRANE["arch"], hidden=[128, 64, 30, 20, 12], use_FNN=True)
_MEMBRANE["train"] = dict(_MEMBRANE["train"], epochs=200)

_EXTERNAL = copy.deepcopy(_MEMBRANE)
_EXTERNAL.update({"model": "external", "model_params": {}, "ic": {"nu": [], "normalization": "mass"}})
_EXTERNAL["arch"] = dict(_EXTERNAL["arch"], use_TNN=True)

PRESETS = {"rod": _ROD, "membrane": _MEMBRANE, "external": _EXTERNAL}
ROM_KINDS = {"lopinf": "lopinf", "lopinf-spml": "lopinf_spml", "pod-spml": "pod_spml", "intrusive": "intrusive"}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        ref = base[key]
        if isinstance(ref, dict) and ref and key != "model_params":
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(ref, val, where + ".")
        else:
            out[key] = _check_type(val, ref, where)
    return out


def _check_type(val, ref, where):
    if ref is None or val is None:
        return val
    if isinstance(ref, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{where} must be true/false")
        return val
    if isinstance(ref, (int, float)):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{where} must be a number")
        if isinstance(ref, int) and not isinstance(ref, bool) and float(val) != int(val):
            raise ConfigError(f"{where} must be an integer")
        return type(ref)(val) if isinstance(ref, int) else float(val)
    if isinstance(ref, list) and not isinstance(val, list):
        raise ConfigError(f"{where} must be a list")
    if isinstance(ref, str) and not isinstance(val, str):
        raise ConfigError(f"{where} must be a string")
    return val


def resolve_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    name = raw.get("model", "rod")
    if name not in PRESETS:
        raise ConfigError(f"unknown model {name!r}; expected one of {sorted(PRESETS)}")
    base = PRESETS[name]
    cfg = _merge(base, raw)
    # model params are checked against the dataclass fields
    params_cls = {"rod": models.RodParams, "membrane": models.MembraneParams}.get(name)
    if params_cls is not None:
        fields = set(params_cls.__dataclass_fields__)
        extra = set(cfg["model_params"]) - fields
        if extra:
            raise ConfigError(f"unknown model_params keys {sorted(extra)}")
        cfg["model_params"] = dict(base["model_params"], **cfg["model_params"])
    if cfg["rom_kind"] not in ROM_KINDS:
        raise ConfigError(f"rom_kind must be one of {sorted(ROM_KINDS)}")
    if cfg["dt"] <= 0 or cfg["T"] < 0:
        raise ConfigError("dt must be positive and T nonnegative")
    if cfg["r"] < 1:
        raise ConfigError("r must be positive")
    if len(cfg["split"]) != 2 or cfg["split"][0] > cfg["split"][1]:
        raise ConfigError("split must be [train_end, val_end] with train_end <= val_end")
    if cfg["ic"]["normalization"] not in ("mass", "momentum"):
        raise ConfigError("ic.normalization must be 'mass' or 'momentum'")
    return cfg


def load_config(path=None, overrides=None) -> dict:
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def build_fom(cfg: dict) -> models.MechanicalFom:
    try:
        if cfg["model"] == "rod":
            return models.build_rod(models.RodParams(**cfg["model_params"]))
        if cfg["model"] == "membrane":
            return models.build_membrane(models.MembraneParams(**cfg["model_params"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model_params: {exc}") from exc
    raise ConfigError(f"model {cfg['model']!r} has no full-order model")


def arch_from(cfg: dict) -> spml.SpmlArch:
    a = cfg["arch"]
    try:
        return spml.SpmlArch(cfg["r"], tuple(a["hidden"]), tuple(a["degrees"]), a["n_mlp"], a["use_TNN"], a["use_FNN"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"arch: {exc}") from exc


def train_config_from(cfg: dict) -> spml.TrainConfig:
    try:
        return spml.TrainConfig(seed=cfg["seed"], **cfg["train"])
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc


# -------------------------------------------------------------- snapshots

SNAP_MAGIC = b"LGRMSNAP"
SNAP_VERSION = 1
_SNAP_HEADER = struct.Struct("<8sIQQd")


def write_snapshot(path, Q, dt: float) -> None:
    """Header (magic, version, n, K, dt) then n*K little-endian float64, column-major."""
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2:
        raise ValueError("snapshot matrix must be 2-D")
    n, K = Q.shape
    with open(path, "wb") as fh:
        fh.write(_SNAP_HEADER.pack(SNAP_MAGIC, SNAP_VERSION, n, K, float(dt)))
        fh.write(np.asfortranarray(Q).astype("<f8").tobytes(order="F"))


def read_snapshot(path):
    """Returns (Q, dt)."""
    with open(path, "rb") as fh:
        head = fh.read(_SNAP_HEADER.size)
        if len(head) < _SNAP_HEADER.size:
            raise ValueError(f"{path}: truncated snapshot header")
        magic, version, n, K, dt = _SNAP_HEADER.unpack(head)
        if magic != SNAP_MAGIC:
            raise ValueError(f"{path}: not a snapshot file")
        if version != SNAP_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        payload = fh.read()
    if len(payload) != 8 * n * K:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {8 * n * K}")
    Q = np.frombuffer(payload, dtype="<f8").reshape((n, K), order="F").astype(float)
    return Q, dt


def ingest_csv(path, fs: float):
    """K rows x n columns of displacements -> (Q n x K, dt). Lines starting with # are skipped."""
    if fs is None or not fs > 0:
        raise ConfigError("ingest needs a positive sampling frequency")
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (row[0].lstrip().startswith("#")):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValueError(f"{path}:{lineno}: ragged row with {len(row)} cells, expected {width}")
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    x = float(cell)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: column {col}: non-numeric cell {cell!r}") from None
                if not math.isfinite(x):
                    raise ValueError(f"{path}:{lineno}: column {col}: non-finite value {cell!r}")
                vals.append(x)
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.array(rows).T.copy(), 1.0 / fs


def export_csv(path, Q) -> None:
    """Inverse of ingest_csv: one row per time sample, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for col in np.asarray(Q).T:
            w.writerow([_fmt(x) for x in col])


# ------------------------------------------------------------ CSV output


def _fmt(x) -> str:
    return "%.17g" % float(x)


def provenance(cfg: dict, extra=None) -> list:
    lines = [
        f"config_hash={config_hash(cfg)}",
        f"seed={cfg.get('seed')}",
        f"lagrom={__version__} numpy={np.__version__} scipy={scipy.__version__} python={platform.python_version()}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    return lines


def write_csv(path, header, rows, cfg: dict, extra=None) -> None:
    with open(path, "w", newline="") as fh:
        for line in provenance(cfg, extra):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def read_table(path):
    """(header, rows as strings) of a CSV written by write_csv."""
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def read_csv(path):
    """(header, float array) of an all-numeric CSV written by write_csv."""
    head, rows = read_table(path)
    return head, np.array([[float(x) for x in r] for r in rows])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


# -------------------------------------------------------------- commands


class _Stage:
    """Prefix errors raised inside a pipeline stage with its name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, tp, exc, tb):
        if exc is not None and isinstance(exc, (LagromError, ValueError)) and not getattr(exc, "_staged", False):
            exc.args = (f"[{self.name}] {exc}",) + tuple(exc.args[1:])
            exc._staged = True
        return False


def cmd_simulate(cfg: dict, out: Path) -> dict:
    fom = build_fom(cfg)
    q0, v0 = models.modal_initial_condition(fom, cfg["ic"]["nu"], cfg["ic"]["normalization"])
    with _Stage("simulate"):
        tr = simulate(fom.as_system(), NewmarkConfig(cfg["dt"]), q0, v0, cfg["T"])
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out / "positions.snap", tr.Q, cfg["dt"])
    write_snapshot(out / "velocities.snap", tr.V, cfg["dt"])
    _write_json(out / "config.json", cfg)
    _write_json(out / "metadata.json", {"n": fom.n, "K": len(tr), "fom": fom.metadata, "config_hash": config_hash(cfg)})
    return {"Q": tr.Q, "V": tr.V}


def cmd_ingest(csv_path, fs, cfg: dict, out: Path) -> Path:
    Q, dt = ingest_csv(csv_path, fs)
    out = Path(out)
    if out.suffix != ".snap":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "positions.snap"
    write_snapshot(out, Q, dt)
    _write_json(out.with_name("config.json"), cfg)
    return out


def _velocity_for(snapshot: Path, Q, dt):
    vpath = Path(snapshot).with_name("velocities.snap")
    if vpath.exists() and vpath != Path(snapshot):
        V, vdt = read_snapshot(vpath)
        if V.shape == Q.shape and vdt == dt:
            return V
    return np.gradient(Q, dt, axis=1, edge_order=2)


def cmd_train(cfg: dict, snapshot, out: Path) -> rom_mod.LagrangianRom:
    Q, dt = read_snapshot(snapshot)
    kind = ROM_KINDS[cfg["rom_kind"]]
    r = cfg["r"]
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    with _Stage("pod_basis"):
        basis = pod_basis(Q, r)
    meta = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "kind": kind, "r": r, "dt": dt}
    if kind == "intrusive":
        rom = rom_mod.intrusive_project(build_fom(cfg), basis, meta)
        rom_mod.save_rom(rom, out / "rom.npz")
        return rom
    with _Stage("project"):
        Qhat = project(basis, Q)
    with _Stage("fd_derivatives"):
        data = reduced_dataset(Qhat, dt)
    with _Stage("split"):
        data = split_dataset(data, cfg["split"])
    lo = cfg["lopinf"]
    if kind == "pod_spml":
        lin = LinearLagrangianRom.zeros(r, lo["conservative"])
    else:
        with _Stage("infer_linear"):
            lin = infer_linear(data, lo["conservative"], lo["eps"], tikhonov=lo["tikhonov"])
    model = None
    if kind != "lopinf":
        arch = arch_from(cfg)
        tc = train_config_from(cfg)
        with _Stage("train"):
            model, hist = spml.train(data, lin, arch, tc)
        write_csv(
            out / "loss_history.csv",
            ["epoch", "train_loss", "val_loss"],
            hist.rows(),
            cfg,
            {"best_epoch": hist.best_epoch, "n_params": arch.n_params},
        )
        meta.update(best_epoch=hist.best_epoch, n_params=arch.n_params)
    rom = rom_mod.LagrangianRom(basis, lin, model, kind, metadata=meta)
    rom_mod.save_rom(rom, out / "rom.npz")
    return rom


def cmd_evaluate(cfg: dict, archive, snapshot, out: Path) -> analyze.ErrorReport:
    rom = rom_mod.load_rom(archive)
    Q, dt = read_snapshot(snapshot)
    if Q.shape[0] != rom.basis.n:
        raise ValueError(f"reference has n={Q.shape[0]}, ROM basis has n={rom.basis.n}")
    V = _velocity_for(snapshot, Q, dt)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    T = (Q.shape[1] - 1) * dt
    ncfg = NewmarkConfig(dt)
    q0, v0 = project(rom.basis, Q[:, 0]), project(rom.basis, V[:, 0])
    with _Stage("simulate_rom"):
        tr = rom_mod.simulate_rom(rom, q0, v0, ncfg, T)
    times = tr.times
    parts = partition_columns(times, cfg["split"]) if times[-1] >= cfg["split"][1] else {"train": np.arange(len(times))}
    E = analyze.energy_series(rom, tr.Q, tr.V)
    report = analyze.error_report(Q, rom.basis, tr.Q, parts, np.abs(E - E[0]), r=rom.r, kind=rom.kind, seed=cfg["seed"])
    extra = {"kind": rom.kind, "r": rom.r}
    write_csv(out / "errors.csv", ["partition", "relative_state_error"], sorted(report.errors.items()), cfg, extra)
    write_csv(
        out / "energy.csv",
        ["t", "energy", "energy_error", "relative_energy_error"],
        zip(times, E, report.energy_error, report.energy_error / abs(E[0]) if E[0] else report.energy_error),
        cfg,
        extra,
    )
    node = cfg["evaluate"]["node"]
    lifted = rom.basis.Vr[node] @ tr.Q
    for name, idx in parts.items():
        if len(idx) < 2:
            continue
        f, a_ref = analyze.amplitude_spectrum(Q[node, idx], 1.0 / dt, cfg["evaluate"]["window"])
        _, a_rom = analyze.amplitude_spectrum(lifted[idx], 1.0 / dt, cfg["evaluate"]["window"])
        write_csv(out / f"spectrum_{name}.csv", ["frequency", "amplitude_reference", "amplitude_rom"], zip(f, a_ref, a_rom), cfg, extra)
    if cfg["evaluate"]["phase_portrait"]:
        vnode = rom.basis.Vr[node] @ tr.V
        write_csv(
            out / "phase_portrait.csv",
            ["t", "q_reference", "v_reference", "q_rom", "v_rom"],
            zip(times, Q[node], V[node], lifted, vnode),
            cfg,
            extra,
        )
    if cfg["evaluate"]["ringdown"]:
        _ringdown_csv(out / "ringdown.csv", lifted, 1.0 / dt, cfg, extra)
    if cfg["evaluate"]["sweep"]:
        cmd_sweep(cfg, rom, out)
    return report


def _ringdown_csv(path, signal, fs, cfg, extra=None, velocities=None):
    curve = analyze.ringdown_analysis(signal, fs)
    if velocities is not None:
        ke = analyze.kinetic_energy_proxy(velocities, cfg["ingest"]["total_mass"])
        curve.energy = ke[np.clip(np.round(curve.time * fs).astype(int), 0, ke.size - 1)]
    write_csv(
        path,
        ["t", "amplitude", "frequency_hz", "damping_ratio", "energy"],
        zip(curve.time, curve.amplitude, curve.frequency, curve.damping_ratio, curve.energy),
        cfg,
        extra,
    )
    return curve


def cmd_spectrum(cfg, snapshot, out: Path, node=None, window=None, start=None, stop=None):
    Q, dt = read_snapshot(snapshot)
    node = cfg["evaluate"]["node"] if node is None else node
    t = np.arange(Q.shape[1]) * dt
    mask = (t >= (start if start is not None else -np.inf)) & (t <= (stop if stop is not None else np.inf))
    f, a = analyze.amplitude_spectrum(Q[node, mask], 1.0 / dt, window or cfg["evaluate"]["window"])
    write_csv(out, ["frequency", "amplitude"], zip(f, a), cfg, {"node": node})
    return f, a


def cmd_ringdown(cfg, snapshot, out: Path, node=None):
    Q, dt = read_snapshot(snapshot)
    node = cfg["evaluate"]["node"] if node is None else node
    V = np.gradient(Q, dt, axis=1, edge_order=2)
    return _ringdown_csv(out, Q[node], 1.0 / dt, cfg, {"node": node}, velocities=V)


def cmd_sweep(cfg, rom, out: Path):
    fom = build_fom(cfg)
    cells = analyze.generalization_sweep(
        fom, rom, analyze.ic_grid(), NewmarkConfig(cfg["dt"]), cfg["T"], cfg["ic"]["normalization"]
    )
    write_csv(
        out / "sweep.csv",
        ["nu1", "nu2", "nu3", "relative_state_error", "status"],
        [(c.nu[0], c.nu[1], c.nu[2], c.error, c.status) for c in cells],
        cfg,
        {"kind": rom.kind, "r": rom.r},
    )
    return cells


# ------------------------------------------------------------------ main


def _parser():
    p = argparse.ArgumentParser(prog="lagrom", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (preset + overrides)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", required=True, help="output directory (or file for spectrum/ringdown)")
    common.add_argument("--rom-kind", choices=sorted(ROM_KINDS), help="override the config rom_kind")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a benchmark full-order model")
    s = sub.add_parser("ingest", parents=[common], help="convert a displacement CSV to a snapshot file")
    s.add_argument("csv")
    s.add_argument("--fs", type=float, help="sampling frequency in Hz")
    s = sub.add_parser("train", parents=[common], help="fit a reduced-order model to a snapshot file")
    s.add_argument("snapshot")
    s = sub.add_parser("evaluate", parents=[common], help="evaluate a ROM archive against reference snapshots")
    s.add_argument("archive")
    s.add_argument("snapshot")
    s = sub.add_parser("spectrum", parents=[common], help="amplitude spectrum of one DOF")
    s.add_argument("snapshot")
    s.add_argument("--node", type=int)
    s.add_argument("--window", choices=["hann"])
    s.add_argument("--start", type=float)
    s.add_argument("--stop", type=float)
    s = sub.add_parser("ringdown", parents=[common], help="per-cycle frequency and damping of one DOF")
    s.add_argument("snapshot")
    s.add_argument("--node", type=int)
    s = sub.add_parser("sweep", parents=[common], help="unseen-IC generalization sweep of a ROM archive")
    s.add_argument("archive")
    return p


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "rom_kind": args.rom_kind})
        out = Path(args.out)
        if args.command == "simulate":
            cmd_simulate(cfg, out)
        elif args.command == "ingest":
            fs = args.fs if args.fs is not None else cfg["ingest"]["fs"]
            cmd_ingest(args.csv, fs, cfg, out)
        elif args.command == "train":
            cmd_train(cfg, args.snapshot, out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.archive, args.snapshot, out)
        elif args.command == "spectrum":
            out.parent.mkdir(parents=True, exist_ok=True)
            cmd_spectrum(cfg, args.snapshot, out, args.node, args.window, args.start, args.stop)
        elif args.command == "ringdown":
            out.parent.mkdir(parents=True, exist_ok=True)
            cmd_ringdown(cfg, args.snapshot, out, args.node)
        elif args.command == "sweep":
            out.mkdir(parents=True, exist_ok=True)
            cmd_sweep(cfg, rom_mod.load_rom(args.archive), out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
